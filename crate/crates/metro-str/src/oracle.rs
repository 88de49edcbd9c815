//! Brute-force reference solvers.
//!
//! These deliberately avoid the production code paths: the headway check is
//! a plain dense-grid argmin over the objective, and the regulation check
//! enumerates integer control lattices with a direct scalar rollout of the
//! deviation recursion. They exist so the optimizers can be audited end to
//! end, both from the test suite and from the command line.

use crate::headway::{HeadwayOptimum, HeadwayProblem};
use crate::regulator::{deviation_step, objective_j, RegulationWeights, TrafficState};
use crate::scenario::Scenario;

/// Dense-grid argmin of the headway objective with the optimizer's
/// tie-break rules (closest to the current headway, then larger).
pub fn headway_grid_argmin(problem: &HeadwayProblem, step: f64) -> HeadwayOptimum {
    let lo = problem.min_headway;
    let hi = problem.max_headway;
    let mut best_h = lo;
    let mut best_f = problem.objective(lo);
    let mut h = lo + step;
    loop {
        let at_end = h >= hi;
        let cand_h = if at_end { hi } else { h };
        let cand_f = problem.objective(cand_h);
        let better = if (cand_f - best_f).abs() > 1e-12 {
            cand_f < best_f
        } else {
            let da = (best_h - problem.current_headway).abs();
            let db = (cand_h - problem.current_headway).abs();
            if (da - db).abs() > 1e-12 {
                db < da
            } else {
                cand_h > best_h
            }
        };
        if better {
            best_h = cand_h;
            best_f = cand_f;
        }
        if at_end {
            break;
        }
        h += step;
    }
    HeadwayOptimum {
        headway: best_h,
        objective: best_f,
    }
}

/// Outcome of one exhaustive regulation search.
#[derive(Debug, Clone, PartialEq)]
pub struct RegulationOracleResult {
    pub best_j: f64,
    pub run_controls: Vec<f64>,
    pub dwell_controls: Vec<f64>,
    pub candidates: u64,
    pub feasible_candidates: u64,
}

/// Exhaustively minimizes the regulation cost over an integer-second control
/// lattice, rolling the deviation recursion directly per candidate.
///
/// Returns `None` when no lattice point is feasible or the lattice exceeds
/// `max_candidates`.
pub fn regulation_exhaustive(
    state: &TrafficState,
    scenario: &Scenario,
    horizon: &[(usize, usize)],
    max_candidates: u64,
) -> Option<RegulationOracleResult> {
    let mut events: Vec<(usize, usize)> = horizon.to_vec();
    events.sort_unstable();
    events.dedup();
    if events.is_empty() {
        return None;
    }
    let estimates = state.estimate_pending_deviations(scenario);

    // Integer value ranges per control slot, run control first per event.
    struct Slot {
        event: usize,
        is_run: bool,
        values: Vec<f64>,
    }
    let mut slots: Vec<Slot> = Vec::new();
    for (idx, &(_, station)) in events.iter().enumerate() {
        if station >= 2 {
            let (lo, hi) = scenario.run_box_into(station);
            slots.push(Slot {
                event: idx,
                is_run: true,
                values: integer_range(lo, hi),
            });
        }
        let (lo, hi) = scenario.dwell_control;
        slots.push(Slot {
            event: idx,
            is_run: false,
            values: integer_range(lo, hi),
        });
    }
    let total: u64 = slots
        .iter()
        .map(|s| s.values.len() as u64)
        .try_fold(1u64, u64::checked_mul)?;
    if total == 0 || total > max_candidates {
        return None;
    }

    let weights = RegulationWeights::of(scenario);
    let mut counters = vec![0usize; slots.len()];
    let mut best: Option<RegulationOracleResult> = None;
    let mut run_controls = vec![0.0; events.len()];
    let mut dwell_controls = vec![0.0; events.len()];
    let mut feasible_candidates = 0u64;

    for _ in 0..total {
        for (slot, &c) in slots.iter().zip(&counters) {
            if slot.is_run {
                run_controls[slot.event] = slot.values[c];
            } else {
                dwell_controls[slot.event] = slot.values[c];
            }
        }

        // Scalar rollout of the deviation recursion over the horizon, with
        // the executor's minimal-headway floor applied.
        let mut xs = vec![0.0; events.len()];
        let mut preds = vec![0.0; events.len()];
        let mut feasible = true;
        for (idx, &(train, station)) in events.iter().enumerate() {
            let lookup = |t: usize, j: usize| -> f64 {
                if t == 0 || j == 0 {
                    return 0.0;
                }
                if let Ok(pos) = events.binary_search(&(t, j)) {
                    if pos < idx {
                        return xs[pos];
                    }
                }
                state.deviation(t, j).unwrap_or_else(|| estimates.at(t, j))
            };
            let x_prev_station = lookup(train, station.wrapping_sub(1));
            let x_prev_train = lookup(train.wrapping_sub(1), station);
            let mut x = deviation_step(
                x_prev_station,
                x_prev_train,
                run_controls[idx] + dwell_controls[idx],
                0.0,
                scenario.lambda(train, station),
            )
            .expect("validated delay rate");
            if train >= 2 {
                let bound = scenario.min_headway - state.timetable().scheduled_gap(train, station);
                let floor = x_prev_train + bound;
                if x < floor {
                    x = floor;
                }
                if x - x_prev_train < bound - 1e-9 {
                    feasible = false;
                    break;
                }
            }
            xs[idx] = x;
            preds[idx] = x_prev_train;
        }

        if feasible {
            feasible_candidates += 1;
            let j = objective_j(&xs, &preds, &run_controls, &dwell_controls, &weights);
            if best.as_ref().is_none_or(|b| j < b.best_j) {
                best = Some(RegulationOracleResult {
                    best_j: j,
                    run_controls: run_controls.clone(),
                    dwell_controls: dwell_controls.clone(),
                    candidates: total,
                    feasible_candidates: 0,
                });
            }
        }

        // odometer increment
        for (c, slot) in counters.iter_mut().zip(&slots) {
            *c += 1;
            if *c < slot.values.len() {
                break;
            }
            *c = 0;
        }
    }

    best.map(|mut b| {
        b.feasible_candidates = feasible_candidates;
        b
    })
}

fn integer_range(lo: f64, hi: f64) -> Vec<f64> {
    let lo_i = lo.ceil() as i64;
    let hi_i = hi.floor() as i64;
    (lo_i..=hi_i).map(|v| v as f64).collect()
}

/// Small deterministic PRNG (splitmix64) for reproducible randomized
/// instances in the self-check and the test suites.
#[derive(Debug, Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer draw in `[lo, hi]`.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() as usize) % (hi - lo + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regulator::{solve_regulation, RegulationOptions};
    use crate::scenario::{RunControlBounds, ScenarioBuilder};
    use crate::timetable::build_nominal_timetable;

    #[test]
    fn grid_argmin_finds_the_floor_on_a_congested_problem() {
        let p = HeadwayProblem::build(
            3,
            2,
            vec![1500.0, 900.0],
            vec![2.0, 1.5],
            vec![0.1, 0.2],
            1860.0,
            180.0,
            360.0,
            360.0,
            0.5,
            1.5,
        )
        .unwrap();
        let g = headway_grid_argmin(&p, 1.0);
        assert_eq!(g.headway, 180.0);
        let o = p.optimize(0.1);
        assert_eq!(o.headway, g.headway);
        assert_eq!(o.objective, g.objective);
    }

    #[test]
    fn exhaustive_search_agrees_with_the_solver_on_a_small_instance() {
        let s = ScenarioBuilder::new(2, 2)
            .nominal_run(vec![120.0])
            .uniform_delay_rate(0.0)
            .run_control(RunControlBounds::Absolute {
                min: -4.0,
                max: 4.0,
            })
            .dwell_control(-4.0, 4.0)
            .disturbance(1, 1, 0.0, 20.0)
            .build()
            .unwrap();
        let mut state = TrafficState::new(build_nominal_timetable(&s, 0.0));
        state
            .execute_departure(1, 1, 0.0, 0.0, f64::NEG_INFINITY, &s)
            .unwrap();
        let horizon = vec![(1, 2), (2, 1), (2, 2)];
        let oracle = regulation_exhaustive(&state, &s, &horizon, 10_000_000).unwrap();
        let decision = solve_regulation(&state, &s, &horizon, &RegulationOptions::default());
        assert!(decision.feasible);
        assert!(
            decision.objective_j <= oracle.best_j * 1.01 + 1e-9,
            "solver {} vs lattice {}",
            decision.objective_j,
            oracle.best_j
        );
    }

    #[test]
    fn integer_range_is_inclusive() {
        assert_eq!(integer_range(-2.0, 2.0), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(integer_range(-2.4, 1.7), vec![-2.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn splitmix_is_reproducible() {
        let mut a = SplitMix64(7);
        let mut b = SplitMix64(7);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
