//! Chronological departure-event loop coupling the passenger-flow side and
//! the train-operation side.
//!
//! The regulator stays active at every departure. In adaptive mode the
//! overcrowding check runs after each departure; when it fires, the headway
//! program is solved, the schedule is handed over to the new headway, and
//! regulation continues against the re-spaced timetable. In fixed mode the
//! check never runs, which is the baseline the comparison report measures
//! against.
//!
//! A single-threaded loop owns all mutable state; the solvers it calls are
//! pure functions over immutable snapshots.

use serde::Serialize;

use crate::headway::HeadwayProblem;
use crate::passenger::{trigger_check, PassengerState};
use crate::regulator::{solve_regulation, RegulationDecision, RegulationOptions, TrafficState};
use crate::scenario::Scenario;
use crate::timetable::build_nominal_timetable;

/// Operating mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegulationMode {
    /// Service-oriented regulation: headway re-optimization armed.
    Str,
    /// Fixed-headway baseline: regulation only.
    Fixed,
}

impl RegulationMode {
    pub fn tag(&self) -> &'static str {
        match self {
            RegulationMode::Str => "STR",
            RegulationMode::Fixed => "FIXED",
        }
    }
}

/// Solver knobs shared by a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub regulation: RegulationOptions,
    /// Refinement tolerance of the headway optimizer, seconds.
    pub pfm_tolerance: f64,
    /// Samples of the objective curve recorded per episode.
    pub pfm_curve_samples: usize,
    /// Receding horizon length in trains; the event horizon is this many
    /// line lengths.
    pub horizon_trains: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            regulation: RegulationOptions::default(),
            pfm_tolerance: 0.1,
            pfm_curve_samples: 129,
            horizon_trains: 2,
        }
    }
}

/// One executed departure with its full state snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventRecord {
    /// Event counter `k = train + station`.
    pub k: usize,
    pub train: usize,
    pub station: usize,
    pub departure_time: f64,
    pub deviation: f64,
    /// Realized headway feeding the arrival window (scheduled headway in
    /// force for the first train).
    pub headway: f64,
    pub on_board: f64,
    pub stranded: f64,
    pub peak: f64,
    pub wait_time: f64,
    pub run_control: f64,
    pub dwell_control: f64,
    /// A headway re-optimization episode fired at this departure.
    pub pfm_episode: bool,
    /// The departure was postponed to keep the minimal headway.
    pub postponed: bool,
}

/// One headway re-optimization episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PfmEpisode {
    /// Index of the triggering record in the trace.
    pub event_index: usize,
    pub trigger_train: usize,
    pub trigger_station: usize,
    pub old_headway: f64,
    pub new_headway: f64,
    pub objective: f64,
    /// `(headway, objective)` samples across the feasible interval.
    pub curve: Vec<(f64, f64)>,
}

/// Whole-run metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSummary {
    pub max_peak: f64,
    pub total_wait: f64,
    pub total_abs_control: f64,
    /// Realized regulation cost accumulated over all executed departures.
    pub final_j: f64,
    pub pfm_episodes: usize,
    pub postponed_departures: usize,
    pub infeasible_solves: usize,
    pub headway_reverts: usize,
}

/// Ordered log of an entire run.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace {
    pub mode: RegulationMode,
    pub records: Vec<EventRecord>,
    pub episodes: Vec<PfmEpisode>,
    pub summary: TraceSummary,
}

impl EventTrace {
    /// Sums a per-record quantity over each event counter `k = 2..=M+N`.
    pub fn series_by_counter(&self, field: impl Fn(&EventRecord) -> f64) -> Vec<(usize, f64)> {
        let mut sums: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for r in &self.records {
            *sums.entry(r.k).or_insert(0.0) += field(r);
        }
        sums.into_iter().collect()
    }

    /// Maximum of a per-record quantity per event counter.
    pub fn max_by_counter(&self, field: impl Fn(&EventRecord) -> f64) -> Vec<(usize, f64)> {
        let mut maxs: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for r in &self.records {
            let e = maxs.entry(r.k).or_insert(f64::NEG_INFINITY);
            *e = e.max(field(r));
        }
        maxs.into_iter().collect()
    }
}

/// Engine state while a run is in flight. [`Engine::step`] executes one
/// departure; [`Engine::finish`] seals the trace.
pub struct Engine<'a> {
    scenario: &'a Scenario,
    mode: RegulationMode,
    options: SolverOptions,
    traffic: TrafficState,
    passengers: PassengerState,
    records: Vec<EventRecord>,
    episodes: Vec<PfmEpisode>,
    decision: RegulationDecision,
    clock: f64,
    /// Next pending station per train (1-based; `n_stations + 1` when done).
    next_station: Vec<usize>,
    /// Latest observed peak occupancy per station.
    last_peak: Vec<f64>,
    /// Record index of the last headway change, for re-trigger hygiene.
    last_shift_at: Option<usize>,
    infeasible_solves: usize,
    headway_reverts: usize,
    postponed_departures: usize,
    final_j: f64,
}

impl<'a> Engine<'a> {
    pub fn new(
        scenario: &'a Scenario,
        mode: RegulationMode,
        t0: f64,
        options: SolverOptions,
    ) -> Self {
        let timetable = build_nominal_timetable(scenario, t0);
        let traffic = TrafficState::new(timetable);
        let mut engine = Engine {
            scenario,
            mode,
            options,
            traffic,
            passengers: PassengerState::new(scenario.n_trains, scenario.n_stations),
            records: Vec::with_capacity(scenario.n_trains * scenario.n_stations),
            episodes: Vec::new(),
            decision: RegulationDecision {
                horizon: Vec::new(),
                run_controls: Vec::new(),
                dwell_controls: Vec::new(),
                objective_j: 0.0,
                solver_iterations: 0,
                converged: true,
                feasible: true,
            },
            clock: f64::NEG_INFINITY,
            next_station: vec![1; scenario.n_trains],
            last_peak: vec![0.0; scenario.n_stations],
            last_shift_at: None,
            infeasible_solves: 0,
            headway_reverts: 0,
            postponed_departures: 0,
            final_j: 0.0,
        };
        engine.resolve_regulation();
        engine
    }

    fn pending_count(&self) -> usize {
        let n = self.scenario.n_stations;
        self.next_station.iter().map(|&j| n + 1 - j).sum()
    }

    /// Departures whose dependencies have executed: each train's next
    /// station, provided the preceding train has already left it.
    fn ready_events(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.scenario.n_stations;
        (1..=self.scenario.n_trains).filter_map(move |train| {
            let station = self.next_station[train - 1];
            if station > n {
                return None;
            }
            if train >= 2 && self.next_station[train - 2] <= station {
                return None;
            }
            Some((train, station))
        })
    }

    /// Receding horizon: the earliest pending departures by uncontrolled
    /// estimate, covering `horizon_trains` line lengths.
    fn horizon(&self) -> Vec<(usize, usize)> {
        let estimates = self.traffic.estimate_pending_deviations(self.scenario);
        let mut pending: Vec<(f64, usize, usize)> = Vec::new();
        for train in 1..=self.scenario.n_trains {
            for station in self.next_station[train - 1]..=self.scenario.n_stations {
                let t = self.traffic.timetable().departure(train, station)
                    + estimates.at(train, station);
                pending.push((t, train, station));
            }
        }
        pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let w = self.options.horizon_trains * self.scenario.n_stations;
        pending.truncate(w);
        pending.into_iter().map(|(_, i, j)| (i, j)).collect()
    }

    fn resolve_regulation(&mut self) {
        let horizon = self.horizon();
        self.decision = solve_regulation(
            &self.traffic,
            self.scenario,
            &horizon,
            &self.options.regulation,
        );
        if !self.decision.feasible {
            self.infeasible_solves += 1;
        }
    }

    fn committed_control(&self, train: usize, station: usize) -> (f64, f64) {
        self.decision
            .control_for(train, station)
            .unwrap_or((0.0, 0.0))
    }

    /// Executes the chronologically next departure. Returns `None` when all
    /// trains have completed the line.
    pub fn step(&mut self) -> Option<EventRecord> {
        let mut best: Option<(f64, usize, usize)> = None;
        for (train, station) in self.ready_events() {
            let (u1, u2) = self.committed_control(train, station);
            let (t, _) = self
                .traffic
                .predict_departure(train, station, u1, u2, self.clock, self.scenario)
                .expect("ready event has executed dependencies");
            let key = (t, train, station);
            if best.is_none_or(|b| (key.0, key.1, key.2) < b) {
                best = Some(key);
            }
        }
        let (_, train, station) = best?;

        let (u1, u2) = self.committed_control(train, station);
        let executed = self
            .traffic
            .execute_departure(train, station, u1, u2, self.clock, self.scenario)
            .expect("ready event executes");
        self.clock = executed.departure_time;
        self.next_station[train - 1] += 1;
        if executed.postponed {
            self.postponed_departures += 1;
        }

        let headway = if train >= 2 {
            executed.departure_time - self.traffic.actual_departure(train - 1, station).unwrap()
        } else {
            self.traffic.timetable().headway_in_force()
        };
        let flows = self
            .passengers
            .apply_departure(train, station, headway, self.scenario)
            .expect("headway floor keeps gaps causal");
        self.last_peak[station - 1] = flows.peak_platform;

        let record_index = self.records.len();
        let mut fired = false;
        if self.mode == RegulationMode::Str && self.cooldown_over(record_index) {
            if trigger_check(flows.peak_platform, self.scenario) {
                fired = self.run_pfm_episode(train, station, record_index);
            } else {
                self.maybe_revert(train, record_index);
            }
        }

        self.resolve_regulation();

        let x_pred = if train >= 2 {
            self.records
                .iter()
                .rfind(|r| r.train == train - 1 && r.station == station)
                .map_or(0.0, |r| r.deviation)
        } else {
            0.0
        };
        self.final_j += self.scenario.weight_punctuality * executed.deviation * executed.deviation
            + self.scenario.weight_regularity * (executed.deviation - x_pred).powi(2)
            + self.scenario.weight_effort * (u1 * u1 + u2 * u2);

        let record = EventRecord {
            k: train + station,
            train,
            station,
            departure_time: executed.departure_time,
            deviation: executed.deviation,
            headway,
            on_board: flows.on_board,
            stranded: flows.stranded,
            peak: flows.peak_platform,
            wait_time: flows.wait_time,
            run_control: u1,
            dwell_control: u2,
            pfm_episode: fired,
            postponed: executed.postponed,
        };
        self.records.push(record);
        Some(record)
    }

    /// Re-trigger hygiene: at least one full event between consecutive
    /// headway changes, so a floor-bound optimum cannot livelock the loop.
    fn cooldown_over(&self, record_index: usize) -> bool {
        self.last_shift_at
            .is_none_or(|last| record_index > last + 1)
    }

    fn run_pfm_episode(&mut self, train: usize, station: usize, record_index: usize) -> bool {
        let successor = train + 1;
        if successor > self.scenario.n_trains {
            return false;
        }
        let n = self.scenario.n_stations;
        let snapshot: Vec<f64> = (1..=n).map(|j| self.latest_stranded(j)).collect();
        let alpha_next: Vec<f64> = (1..=n).map(|j| self.scenario.alpha(successor, j)).collect();
        let beta_next: Vec<f64> = (1..=n).map(|j| self.scenario.beta(successor, j)).collect();
        let old_headway = self.traffic.timetable().headway_in_force();
        let problem = match HeadwayProblem::build(
            train,
            station,
            snapshot,
            alpha_next,
            beta_next,
            self.scenario.train_capacity,
            self.scenario.min_headway,
            self.scenario.max_headway,
            old_headway,
            self.scenario.weight_wait,
            self.scenario.weight_load,
        ) {
            Ok(p) => p,
            Err(_) => return false, // degenerate: overcrowd carries no headway information
        };
        let optimum = problem.optimize(self.options.pfm_tolerance);
        if optimum.headway != old_headway {
            self.traffic
                .apply_headway_shift(optimum.headway, train, self.scenario)
                .expect("optimizer respects the headway floor");
        }
        self.episodes.push(PfmEpisode {
            event_index: record_index,
            trigger_train: train,
            trigger_station: station,
            old_headway,
            new_headway: optimum.headway,
            objective: optimum.objective,
            curve: problem.sample_curve(self.options.pfm_curve_samples),
        });
        self.last_shift_at = Some(record_index);
        true
    }

    /// Once every platform's last observed peak is back under the policy
    /// threshold, restore the originally scheduled headway.
    fn maybe_revert(&mut self, anchor_train: usize, record_index: usize) {
        let Some(theta) = self.scenario.revert_policy.threshold() else {
            return;
        };
        let current = self.traffic.timetable().headway_in_force();
        if current == self.scenario.scheduled_headway {
            return;
        }
        let limit = theta * self.scenario.platform_capacity;
        if self.last_peak.iter().any(|&p| p >= limit) {
            return;
        }
        self.traffic
            .apply_headway_shift(self.scenario.scheduled_headway, anchor_train, self.scenario)
            .expect("scheduled headway is inside the bounds");
        self.headway_reverts += 1;
        self.last_shift_at = Some(record_index);
    }

    /// Stranded count from the most recent departure at `station`, zero if
    /// the platform has not seen a departure yet.
    fn latest_stranded(&self, station: usize) -> f64 {
        for train in (1..=self.scenario.n_trains).rev() {
            if self.next_station[train - 1] > station {
                return self.passengers.stranded(train, station);
            }
        }
        0.0
    }

    pub fn finish(self) -> EventTrace {
        let summary = TraceSummary {
            max_peak: self.records.iter().map(|r| r.peak).fold(0.0, f64::max),
            total_wait: self.records.iter().map(|r| r.wait_time).sum(),
            total_abs_control: self
                .records
                .iter()
                .map(|r| r.run_control.abs() + r.dwell_control.abs())
                .sum(),
            final_j: self.final_j,
            pfm_episodes: self.episodes.len(),
            postponed_departures: self.postponed_departures,
            infeasible_solves: self.infeasible_solves,
            headway_reverts: self.headway_reverts,
        };
        EventTrace {
            mode: self.mode,
            records: self.records,
            episodes: self.episodes,
            summary,
        }
    }

    pub fn traffic(&self) -> &TrafficState {
        &self.traffic
    }

    pub fn passengers(&self) -> &PassengerState {
        &self.passengers
    }

    /// Current receding horizon, exposed for audits and tests.
    pub fn current_horizon(&self) -> Vec<(usize, usize)> {
        self.horizon()
    }
}

/// Simulates all trains over all stations in the given mode.
pub fn run(
    scenario: &Scenario,
    mode: RegulationMode,
    t0: f64,
    options: SolverOptions,
) -> EventTrace {
    let mut engine = Engine::new(scenario, mode, t0, options);
    let expected = engine.pending_count();
    let mut executed = 0;
    while engine.step().is_some() {
        executed += 1;
    }
    debug_assert_eq!(executed, expected);
    engine.finish()
}

/// Paired per-counter series and scalar deltas of an adaptive vs. fixed run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub scenario_name: String,
    pub max_peak_str: f64,
    pub max_peak_fixed: f64,
    pub total_wait_str: f64,
    pub total_wait_fixed: f64,
    /// `str - fixed`; negative means the adaptive run improved the metric.
    pub max_peak_delta: f64,
    pub total_wait_delta: f64,
    /// Event counter at which per-counter waiting first returns below its
    /// pre-congestion level after the first episode, per mode.
    pub recovery_counter_str: Option<usize>,
    pub recovery_counter_fixed: Option<usize>,
    pub pfm_episodes: usize,
}

/// Per-counter paired sample of the two modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonPoint {
    pub k: usize,
    pub peak_str: f64,
    pub peak_fixed: f64,
    pub wait_str: f64,
    pub wait_fixed: f64,
    pub stranded_str: f64,
    pub stranded_fixed: f64,
}

/// Both runs plus the paired report.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeComparison {
    pub str_trace: EventTrace,
    pub fixed_trace: EventTrace,
    pub series: Vec<ComparisonPoint>,
    pub report: ComparisonReport,
}

/// Event counter at which the per-counter waiting series first drops back
/// to `level` strictly after `after_k`.
fn recovery_counter(series: &[(usize, f64)], after_k: usize, level: f64) -> Option<usize> {
    series
        .iter()
        .find(|&&(k, w)| k > after_k && w <= level)
        .map(|&(k, _)| k)
}

/// Runs both modes on identical inputs and pairs the results.
pub fn compare_modes(scenario: &Scenario, t0: f64, options: SolverOptions) -> ModeComparison {
    let str_trace = run(scenario, RegulationMode::Str, t0, options);
    let fixed_trace = run(scenario, RegulationMode::Fixed, t0, options);

    let wait_str = str_trace.series_by_counter(|r| r.wait_time);
    let wait_fixed = fixed_trace.series_by_counter(|r| r.wait_time);
    let peak_str = str_trace.max_by_counter(|r| r.peak);
    let peak_fixed = fixed_trace.max_by_counter(|r| r.peak);
    let stranded_str = str_trace.series_by_counter(|r| r.stranded);
    let stranded_fixed = fixed_trace.series_by_counter(|r| r.stranded);

    let series: Vec<ComparisonPoint> = wait_str
        .iter()
        .enumerate()
        .map(|(idx, &(k, w_s))| ComparisonPoint {
            k,
            peak_str: peak_str[idx].1,
            peak_fixed: peak_fixed[idx].1,
            wait_str: w_s,
            wait_fixed: wait_fixed[idx].1,
            stranded_str: stranded_str[idx].1,
            stranded_fixed: stranded_fixed[idx].1,
        })
        .collect();

    // Recovery: waiting per counter returns below the level just before the
    // first episode's counter.
    let (recovery_str, recovery_fixed) = match str_trace.episodes.first() {
        Some(ep) => {
            let k_trig = str_trace.records[ep.event_index].k;
            let level = wait_str
                .iter()
                .rfind(|&&(k, _)| k < k_trig)
                .map_or(0.0, |&(_, w)| w);
            (
                recovery_counter(&wait_str, k_trig, level),
                recovery_counter(&wait_fixed, k_trig, level),
            )
        }
        None => (None, None),
    };

    let report = ComparisonReport {
        scenario_name: scenario.name.clone(),
        max_peak_str: str_trace.summary.max_peak,
        max_peak_fixed: fixed_trace.summary.max_peak,
        total_wait_str: str_trace.summary.total_wait,
        total_wait_fixed: fixed_trace.summary.total_wait,
        max_peak_delta: str_trace.summary.max_peak - fixed_trace.summary.max_peak,
        total_wait_delta: str_trace.summary.total_wait - fixed_trace.summary.total_wait,
        recovery_counter_str: recovery_str,
        recovery_counter_fixed: recovery_fixed,
        pfm_episodes: str_trace.summary.pfm_episodes,
    };
    ModeComparison {
        str_trace,
        fixed_trace,
        series,
        report,
    }
}
