//! Model invariants under randomized inputs.

use proptest::prelude::*;

use metro_str::engine::{compare_modes, run, RegulationMode, SolverOptions};
use metro_str::headway::HeadwayProblem;
use metro_str::io::{load_scenario, save_scenario};
use metro_str::passenger::{on_board_folded, stranded_folded, waiting_time, PassengerState};
use metro_str::regulator::deviation_step;
use metro_str::scenario::{Scenario, ScenarioBuilder};

fn small_scenario_strategy() -> impl Strategy<Value = (Scenario, u64)> {
    (
        2usize..=6,
        2usize..=8,
        0.0f64..2.5,
        0.0f64..1.0,
        0.0f64..0.4,
        any::<u64>(),
    )
        .prop_map(|(m, n, alpha, beta, lambda, seed)| {
            let s = ScenarioBuilder::new(m, n)
                .nominal_run(vec![120.0; n - 1])
                .uniform_arrival_rate(alpha)
                .uniform_alight_fraction(beta)
                .uniform_delay_rate(lambda)
                .capacities(1200.0, 1200.0)
                .build()
                .unwrap();
            (s, seed)
        })
}

proptest! {
    /// The flow-balance route and the folded one-line recursions agree, and
    /// the platform balance conserves passengers exactly.
    #[test]
    fn passenger_routes_agree_and_conserve((scenario, seed) in small_scenario_strategy()) {
        let mut state = PassengerState::new(scenario.n_trains, scenario.n_stations);
        let mut mix = seed;
        for train in 1..=scenario.n_trains {
            for station in 1..=scenario.n_stations {
                mix = mix.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let h = 120.0 + (mix >> 40) as f64 / 16.0; // 120..~1168 s
                let on_board_prev = state.on_board(train, station.saturating_sub(1));
                let stranded_prev = state.stranded(train.wrapping_sub(1), station);
                let flows = state.apply_departure(train, station, h, &scenario).unwrap();

                let alpha = scenario.alpha(train, station);
                let beta = scenario.beta(train, station);
                let folded_in = on_board_folded(
                    scenario.train_capacity, stranded_prev, alpha, h, beta, on_board_prev,
                );
                let folded_str = stranded_folded(
                    scenario.train_capacity, stranded_prev, alpha, h, beta, on_board_prev,
                );
                prop_assert!((flows.on_board - folded_in).abs() < 1e-9);
                prop_assert!((flows.stranded - folded_str).abs() < 1e-9);
                // conservation is exact, not approximate
                prop_assert_eq!(flows.arrived + stranded_prev - flows.boarded - flows.stranded, 0.0);
                // capacity and sign invariants
                prop_assert!(flows.on_board <= scenario.train_capacity);
                prop_assert!(flows.boarded >= 0.0);
                prop_assert!(flows.stranded >= 0.0);
            }
        }
    }

    /// With boarding pinned at capacity, a longer headway never shrinks the
    /// stranded queue.
    #[test]
    fn stranded_queue_monotone_in_headway(
        stranded_prev in 0.0f64..3000.0,
        alpha in 0.1f64..3.0,
        beta in 0.0f64..0.5,
        on_board_prev in 1500.0f64..1860.0,
        h1 in 180.0f64..600.0,
        dh in 0.0f64..300.0,
    ) {
        let cap = 1860.0;
        let s1 = stranded_folded(cap, stranded_prev, alpha, h1, beta, on_board_prev);
        let s2 = stranded_folded(cap, stranded_prev, alpha, h1 + dh, beta, on_board_prev);
        prop_assert!(s2 >= s1);
    }

    /// Waiting time strictly increases with the headway whenever anyone is
    /// waiting.
    #[test]
    fn waiting_time_increasing(
        stranded in 0.0f64..2000.0,
        alpha in 0.0f64..3.0,
        h in 60.0f64..600.0,
        dh in 1.0f64..300.0,
    ) {
        prop_assume!(stranded > 0.0 || alpha > 0.0);
        prop_assert!(waiting_time(stranded, alpha, h + dh) > waiting_time(stranded, alpha, h));
    }

    /// Solving the one-step dwell coupling reproduces the implicit equation.
    #[test]
    fn deviation_step_implicit_consistency(
        xp in -600.0f64..600.0,
        xt in -600.0f64..600.0,
        u in -50.0f64..50.0,
        w in -100.0f64..100.0,
        lambda in 0.0f64..0.9,
    ) {
        let x = deviation_step(xp, xt, u, w, lambda).unwrap();
        let rhs = xp + lambda * (x - xt) + u + w;
        prop_assert!((x - rhs).abs() < 1e-9);
    }
}

fn headway_problem_strategy() -> impl Strategy<Value = HeadwayProblem> {
    (2usize..=10, any::<u64>(), 0.2f64..1.0, 0.5f64..2.0).prop_map(|(n, seed, ww, wl)| {
        let mut mix = seed;
        let mut draw = |lo: f64, hi: f64| {
            mix = mix
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((mix >> 11) as f64 / (1u64 << 53) as f64)
        };
        let stranded: Vec<f64> = (0..n).map(|_| draw(300.0, 2600.0)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| draw(0.2, 2.5)).collect();
        let beta: Vec<f64> = (0..n).map(|_| draw(0.0, 0.5)).collect();
        HeadwayProblem::build(
            1, 1, stranded, alpha, beta, 1860.0, 180.0, 360.0, 360.0, ww, wl,
        )
        .unwrap()
    })
}

proptest! {
    /// The optimizer never dips below the safety floor and never loses to
    /// its own reference grid.
    #[test]
    fn headway_optimum_respects_floor_and_grid(p in headway_problem_strategy()) {
        let opt = p.optimize(0.1);
        prop_assert!(opt.headway >= p.min_headway);
        prop_assert!(opt.headway <= p.max_headway);
        let grid = metro_str::oracle::headway_grid_argmin(&p, 1.0);
        prop_assert!(opt.objective <= grid.objective + 1e-12);
    }

    /// Scaling both objective weights by one positive constant moves nothing.
    #[test]
    fn headway_argmin_invariant_under_weight_scaling(
        p in headway_problem_strategy(),
        scale in 0.1f64..10.0,
    ) {
        let scaled = HeadwayProblem::build(
            p.trigger_train,
            p.trigger_station,
            p.stranded_snapshot.clone(),
            p.alpha_next.clone(),
            p.beta_next.clone(),
            p.train_capacity,
            p.min_headway,
            p.max_headway,
            p.current_headway,
            p.weight_wait * scale,
            p.weight_load * scale,
        )
        .unwrap();
        let a = p.optimize(0.1);
        let b = scaled.optimize(0.1);
        prop_assert_eq!(a.headway, b.headway);
    }

    /// The successor sweep keeps every passenger-state invariant.
    #[test]
    fn successor_sweep_invariants(p in headway_problem_strategy(), h in 180.0f64..360.0) {
        let sweep = p.propagate_successor(h);
        for j in 0..sweep.on_board.len() {
            prop_assert!(sweep.on_board[j] >= 0.0 && sweep.on_board[j] <= p.train_capacity);
            prop_assert!(sweep.stranded[j] >= 0.0);
            prop_assert!((0.0..=1.0).contains(&sweep.load_rate[j]));
            // boarding implied by the balance is non-negative
            let arrived = p.alpha_next[j] * h;
            let boarded = arrived + p.stranded_snapshot[j] - sweep.stranded[j];
            prop_assert!(boarded >= -1e-9);
        }
    }
}

#[test]
fn quiet_run_matches_fixed_mode_record_for_record() {
    let scenario = ScenarioBuilder::new(5, 4)
        .nominal_run(vec![100.0, 120.0, 90.0])
        .uniform_arrival_rate(0.1)
        .uniform_alight_fraction(0.2)
        .uniform_delay_rate(0.02)
        .build()
        .unwrap();
    let cmp = compare_modes(&scenario, 0.0, SolverOptions::default());
    assert_eq!(cmp.str_trace.summary.pfm_episodes, 0);
    assert_eq!(cmp.str_trace.records, cmp.fixed_trace.records);
}

#[test]
fn executed_trace_is_chronological_and_safe() {
    let scenario = ScenarioBuilder::new(6, 4)
        .nominal_run(vec![100.0, 120.0, 90.0])
        .capacities(800.0, 800.0)
        .uniform_arrival_rate(1.4)
        .uniform_alight_fraction(0.1)
        .uniform_delay_rate(0.05)
        .disturbance(2, 1, 0.0, 45.0)
        .build()
        .unwrap();
    let trace = run(
        &scenario,
        RegulationMode::Str,
        0.0,
        SolverOptions::default(),
    );
    for pair in trace.records.windows(2) {
        assert!(pair[1].departure_time >= pair[0].departure_time);
    }
    for r in &trace.records {
        if r.train >= 2 {
            assert!(r.headway >= scenario.min_headway - 1e-9);
        }
    }
}

#[test]
fn scenario_save_load_round_trip_random_fields() {
    // a handful of deterministic pseudo-random scenarios, full precision
    for seed in [3u64, 17, 92] {
        let mut mix = seed;
        let mut draw = |lo: f64, hi: f64| {
            mix = mix
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((mix >> 11) as f64 / (1u64 << 53) as f64)
        };
        let n = 4;
        let mut b = ScenarioBuilder::new(3, n)
            .nominal_run((0..n - 1).map(|_| draw(60.0, 200.0)).collect())
            .min_dwell(draw(10.0, 45.0))
            .capacities(draw(500.0, 2000.0), draw(500.0, 2000.0))
            .uniform_delay_rate(draw(0.0, 0.4));
        for train in 1..=3 {
            for station in 1..n {
                b = b.arrival_rate_at(train, station, draw(0.0, 2.0));
            }
            for station in 2..n {
                b = b.alight_fraction_at(train, station, draw(0.0, 1.0));
            }
        }
        let scenario = b
            .disturbance(2, 2, draw(-5.0, 5.0), draw(0.0, 70.0))
            .build()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.toml");
        save_scenario(&scenario, &path).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded, scenario);
    }
}
