//! Immutable line description: geometry, demand rates, capacities, weights,
//! operational bounds, and disturbances.
//!
//! A [`Scenario`] is validated once on construction and never mutated
//! afterwards, so it is safe to share by reference across threads.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::grid::Grid;

/// Default boarding-time coefficient (seconds of dwell extension per
/// passenger/second of arrival rate) used when a scenario derives its delay
/// rates from demand instead of declaring them.
pub const DEFAULT_KAPPA_B: f64 = 0.05;

/// Default saturation ceiling for derived delay rates.
pub const DEFAULT_LAMBDA_MAX: f64 = 0.5;

/// Policy for returning to the originally scheduled headway once platform
/// occupancy has dropped again.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RevertPolicy {
    /// Keep whatever headway the last re-optimization chose.
    Never,
    /// Revert as soon as every platform's last observed peak is below the
    /// acceptable capacity.
    Immediate,
    /// Revert once every platform's last observed peak is below
    /// `threshold * platform_capacity`, with `threshold` in `(0, 1]`.
    Hysteresis(f64),
}

impl RevertPolicy {
    /// Occupancy fraction below which the policy allows a revert, if any.
    pub fn threshold(&self) -> Option<f64> {
        match self {
            RevertPolicy::Never => None,
            RevertPolicy::Immediate => Some(1.0),
            RevertPolicy::Hysteresis(theta) => Some(*theta),
        }
    }
}

/// Run-time adjustment bounds, either absolute seconds shared by all
/// sections or a fraction of each section's nominal running time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunControlBounds {
    /// `[min, max]` seconds with `min <= 0 <= max`.
    Absolute { min: f64, max: f64 },
    /// Adjustment range `[-down * R_j, +up * R_j]` per section, both
    /// fractions non-negative.
    Fraction { down: f64, up: f64 },
}

impl RunControlBounds {
    /// Resolves the box for the section with nominal running time `nominal_run`.
    pub fn resolve(&self, nominal_run: f64) -> (f64, f64) {
        match *self {
            RunControlBounds::Absolute { min, max } => (min, max),
            RunControlBounds::Fraction { down, up } => (-down * nominal_run, up * nominal_run),
        }
    }
}

/// External disturbance attached to one (train, station) pair: `run_s`
/// perturbs the running process on the section leaving the station, `dwell_s`
/// perturbs the dwell at the station itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Disturbance {
    pub run_s: f64,
    pub dwell_s: f64,
}

/// Complete, validated description of a single-direction metro line run.
///
/// Trains are indexed `1..=n_trains` in departure order, stations
/// `1..=n_stations` along the direction of travel; section `j` connects
/// station `j` to `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub n_stations: usize,
    pub n_trains: usize,
    /// Nominal running time per section, seconds; length `n_stations - 1`.
    pub nominal_run: Vec<f64>,
    /// Minimal dwell time when no passenger boards, seconds.
    pub min_dwell: f64,
    /// Initially scheduled headway, seconds.
    pub scheduled_headway: f64,
    /// Minimal allowable headway (safety), seconds.
    pub min_headway: f64,
    /// Upper bound for re-optimized headways, seconds.
    pub max_headway: f64,
    /// Passenger arrival rate, passengers/second, per (train, station).
    pub arrival_rate: Grid<f64>,
    /// Fraction of on-board passengers alighting, per (train, station).
    pub alight_fraction: Grid<f64>,
    /// Dwell delay rate coupling dwell time to the realized headway,
    /// per (train, station); each value in `[0, 1)`.
    pub delay_rate: Grid<f64>,
    pub train_capacity: f64,
    pub platform_capacity: f64,
    /// Headway objective weights: waiting time vs. load rate.
    pub weight_wait: f64,
    pub weight_load: f64,
    /// Regulation objective weights: punctuality, regularity, control effort.
    pub weight_punctuality: f64,
    pub weight_regularity: f64,
    pub weight_effort: f64,
    pub run_control: RunControlBounds,
    /// Dwell adjustment box `[min, max]` seconds with `min <= 0 <= max`.
    pub dwell_control: (f64, f64),
    /// Sparse disturbances keyed by (train, station).
    pub disturbances: BTreeMap<(usize, usize), Disturbance>,
    pub revert_policy: RevertPolicy,
}

impl Scenario {
    /// Arrival rate for train `i` at station `j`.
    #[inline]
    pub fn alpha(&self, train: usize, station: usize) -> f64 {
        self.arrival_rate.at(train, station)
    }

    /// Alight fraction for train `i` at station `j`.
    #[inline]
    pub fn beta(&self, train: usize, station: usize) -> f64 {
        self.alight_fraction.at(train, station)
    }

    /// Dwell delay rate for train `i` at station `j`.
    #[inline]
    pub fn lambda(&self, train: usize, station: usize) -> f64 {
        self.delay_rate.at(train, station)
    }

    /// Disturbance affecting the running process on the section that leads
    /// into station `station` (i.e. the section leaving `station - 1`).
    pub fn run_disturbance_into(&self, train: usize, station: usize) -> f64 {
        if station < 2 {
            return 0.0;
        }
        self.disturbances
            .get(&(train, station - 1))
            .map_or(0.0, |d| d.run_s)
    }

    /// Disturbance affecting the dwell process at `station`.
    pub fn dwell_disturbance_at(&self, train: usize, station: usize) -> f64 {
        self.disturbances
            .get(&(train, station))
            .map_or(0.0, |d| d.dwell_s)
    }

    /// Run-time control box for the section leading into `station`.
    pub fn run_box_into(&self, station: usize) -> (f64, f64) {
        debug_assert!(station >= 2);
        self.run_control.resolve(self.nominal_run[station - 2])
    }
}

/// First violated invariant found while validating a scenario.
#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("scenario needs at least 2 stations, got {0}")]
    TooFewStations(usize),
    #[error("scenario needs at least 2 trains, got {0}")]
    TooFewTrains(usize),
    #[error("{key} must have shape {expected_trains} x {expected_stations}, got {got_trains} x {got_stations}")]
    DimensionMismatch {
        key: &'static str,
        expected_trains: usize,
        expected_stations: usize,
        got_trains: usize,
        got_stations: usize,
    },
    #[error("nominal_run must have one entry per section ({expected}), got {got}")]
    RunLengthMismatch { expected: usize, got: usize },
    #[error("nominal running time of section {section} must be > 0, got {value}")]
    NonPositiveRunTime { section: usize, value: f64 },
    #[error("min_dwell must be >= 0, got {0}")]
    NegativeDwell(f64),
    #[error("train capacity must be > 0, got {0}")]
    NonPositiveTrainCapacity(f64),
    #[error("platform capacity must be > 0, got {0}")]
    NonPositivePlatformCapacity(f64),
    #[error("min_headway must be > 0, got {0}")]
    NonPositiveMinHeadway(f64),
    #[error("scheduled headway {headway} violates bounds [{min}, {max}]")]
    HeadwayOutOfBounds { headway: f64, min: f64, max: f64 },
    #[error(
        "arrival rate at train {train}, station {station} must be finite and >= 0, got {value}"
    )]
    InvalidArrivalRate {
        train: usize,
        station: usize,
        value: f64,
    },
    #[error("alight fraction at train {train}, station {station} must lie in [0, 1], got {value}")]
    InvalidAlightFraction {
        train: usize,
        station: usize,
        value: f64,
    },
    #[error("delay rate must be < 1 (and >= 0): train {train}, station {station} has {value}")]
    InvalidDelayRate {
        train: usize,
        station: usize,
        value: f64,
    },
    #[error(
        "terminal station: alight fraction must be 1 for every train, train {train} has {value}"
    )]
    TerminalAlightFraction { train: usize, value: f64 },
    #[error("terminal station: arrival rate must be 0 for every train, train {train} has {value}")]
    TerminalArrivalRate { train: usize, value: f64 },
    #[error("{key} weight must be finite and >= 0, got {value}")]
    InvalidWeight { key: &'static str, value: f64 },
    #[error("run control box must satisfy min <= 0 <= max, got [{min}, {max}]")]
    InvalidRunBox { min: f64, max: f64 },
    #[error("dwell control box must satisfy min <= 0 <= max, got [{min}, {max}]")]
    InvalidDwellBox { min: f64, max: f64 },
    #[error("disturbance at train {train}, station {station} is outside the line")]
    DisturbanceOutOfRange { train: usize, station: usize },
    #[error("hysteresis revert threshold must lie in (0, 1], got {0}")]
    InvalidRevertThreshold(f64),
}

/// Checks every scenario invariant, returning the scenario unchanged when
/// all hold and the first violation otherwise.
// negated comparisons are deliberate: they reject NaN along with the
// out-of-range values
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn validate_scenario(raw: Scenario) -> Result<Scenario, ScenarioError> {
    let s = &raw;
    if s.n_stations < 2 {
        return Err(ScenarioError::TooFewStations(s.n_stations));
    }
    if s.n_trains < 2 {
        return Err(ScenarioError::TooFewTrains(s.n_trains));
    }

    for (key, grid) in [
        ("arrival_rate", &s.arrival_rate),
        ("alight_fraction", &s.alight_fraction),
        ("delay_rate", &s.delay_rate),
    ] {
        if grid.n_trains() != s.n_trains || grid.n_stations() != s.n_stations {
            return Err(ScenarioError::DimensionMismatch {
                key,
                expected_trains: s.n_trains,
                expected_stations: s.n_stations,
                got_trains: grid.n_trains(),
                got_stations: grid.n_stations(),
            });
        }
    }
    if s.nominal_run.len() != s.n_stations - 1 {
        return Err(ScenarioError::RunLengthMismatch {
            expected: s.n_stations - 1,
            got: s.nominal_run.len(),
        });
    }
    for (idx, &r) in s.nominal_run.iter().enumerate() {
        if !(r > 0.0) || !r.is_finite() {
            return Err(ScenarioError::NonPositiveRunTime {
                section: idx + 1,
                value: r,
            });
        }
    }
    if !(s.min_dwell >= 0.0) {
        return Err(ScenarioError::NegativeDwell(s.min_dwell));
    }
    if !(s.train_capacity > 0.0) {
        return Err(ScenarioError::NonPositiveTrainCapacity(s.train_capacity));
    }
    if !(s.platform_capacity > 0.0) {
        return Err(ScenarioError::NonPositivePlatformCapacity(
            s.platform_capacity,
        ));
    }
    if !(s.min_headway > 0.0) {
        return Err(ScenarioError::NonPositiveMinHeadway(s.min_headway));
    }
    if !(s.min_headway <= s.scheduled_headway && s.scheduled_headway <= s.max_headway) {
        return Err(ScenarioError::HeadwayOutOfBounds {
            headway: s.scheduled_headway,
            min: s.min_headway,
            max: s.max_headway,
        });
    }

    for (train, station, &v) in s.arrival_rate.iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(ScenarioError::InvalidArrivalRate {
                train,
                station,
                value: v,
            });
        }
    }
    for (train, station, &v) in s.alight_fraction.iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(ScenarioError::InvalidAlightFraction {
                train,
                station,
                value: v,
            });
        }
    }
    for (train, station, &v) in s.delay_rate.iter() {
        if !v.is_finite() || !(0.0..1.0).contains(&v) {
            return Err(ScenarioError::InvalidDelayRate {
                train,
                station,
                value: v,
            });
        }
    }

    // Terminal boundary: everyone alights, nobody boards. Declared, not
    // silently rewritten, so scenario authors see the constraint.
    for train in 1..=s.n_trains {
        let beta_n = s.alight_fraction.at(train, s.n_stations);
        if beta_n != 1.0 {
            return Err(ScenarioError::TerminalAlightFraction {
                train,
                value: beta_n,
            });
        }
        let alpha_n = s.arrival_rate.at(train, s.n_stations);
        if alpha_n != 0.0 {
            return Err(ScenarioError::TerminalArrivalRate {
                train,
                value: alpha_n,
            });
        }
    }

    for (key, value) in [
        ("wait", s.weight_wait),
        ("load", s.weight_load),
        ("punctuality", s.weight_punctuality),
        ("regularity", s.weight_regularity),
        ("effort", s.weight_effort),
    ] {
        if !value.is_finite() || value < 0.0 {
            return Err(ScenarioError::InvalidWeight { key, value });
        }
    }

    match s.run_control {
        RunControlBounds::Absolute { min, max } => {
            if !(min <= 0.0 && 0.0 <= max) {
                return Err(ScenarioError::InvalidRunBox { min, max });
            }
        }
        RunControlBounds::Fraction { down, up } => {
            if !(down >= 0.0 && up >= 0.0) {
                return Err(ScenarioError::InvalidRunBox {
                    min: -down,
                    max: up,
                });
            }
        }
    }
    let (dmin, dmax) = s.dwell_control;
    if !(dmin <= 0.0 && 0.0 <= dmax) {
        return Err(ScenarioError::InvalidDwellBox {
            min: dmin,
            max: dmax,
        });
    }

    for &(train, station) in s.disturbances.keys() {
        if train < 1 || train > s.n_trains || station < 1 || station > s.n_stations {
            return Err(ScenarioError::DisturbanceOutOfRange { train, station });
        }
    }

    if let RevertPolicy::Hysteresis(theta) = s.revert_policy {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(ScenarioError::InvalidRevertThreshold(theta));
        }
    }

    Ok(raw)
}

/// Derives a delay-rate grid from arrival rates: dwell extension grows in
/// proportion to boarding demand and saturates at `lambda_max`.
pub fn derive_delay_rate(arrival_rate: &Grid<f64>, kappa_b: f64, lambda_max: f64) -> Grid<f64> {
    let mut out = Grid::filled(arrival_rate.n_trains(), arrival_rate.n_stations(), 0.0);
    for (i, j, &a) in arrival_rate.iter() {
        out.set(i, j, (kappa_b * a).min(lambda_max));
    }
    out
}

/// Convenience constructor for programmatic scenarios (tests, the CLI's
/// self-check instances). Starts from uniform rates and lets call sites
/// override individual fields before validation.
pub struct ScenarioBuilder {
    scenario: Scenario,
    explicit_delay_rate: bool,
    kappa_b: f64,
    lambda_max: f64,
}

impl ScenarioBuilder {
    pub fn new(n_trains: usize, n_stations: usize) -> Self {
        let mut arrival = Grid::filled(n_trains, n_stations, 0.1);
        let mut alight = Grid::filled(n_trains, n_stations, 0.1);
        for train in 1..=n_trains {
            arrival.set(train, n_stations, 0.0);
            alight.set(train, n_stations, 1.0);
            alight.set(train, 1, 0.0);
        }
        ScenarioBuilder {
            scenario: Scenario {
                name: "builder".to_string(),
                n_stations,
                n_trains,
                nominal_run: vec![120.0; n_stations - 1],
                min_dwell: 30.0,
                scheduled_headway: 360.0,
                min_headway: 180.0,
                max_headway: 360.0,
                arrival_rate: arrival,
                alight_fraction: alight,
                delay_rate: Grid::filled(n_trains, n_stations, 0.0),
                train_capacity: 1860.0,
                platform_capacity: 1860.0,
                weight_wait: 0.5,
                weight_load: 1.5,
                weight_punctuality: 1.0,
                weight_regularity: 1.0,
                weight_effort: 1.0,
                run_control: RunControlBounds::Fraction {
                    down: 0.17,
                    up: 0.53,
                },
                dwell_control: (-10.0, 10.0),
                disturbances: BTreeMap::new(),
                revert_policy: RevertPolicy::Never,
            },
            explicit_delay_rate: false,
            kappa_b: DEFAULT_KAPPA_B,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    pub fn name(mut self, name: &str) -> Self {
        self.scenario.name = name.to_string();
        self
    }

    pub fn nominal_run(mut self, run: Vec<f64>) -> Self {
        self.scenario.nominal_run = run;
        self
    }

    pub fn headways(mut self, scheduled: f64, min: f64, max: f64) -> Self {
        self.scenario.scheduled_headway = scheduled;
        self.scenario.min_headway = min;
        self.scenario.max_headway = max;
        self
    }

    pub fn min_dwell(mut self, dwell: f64) -> Self {
        self.scenario.min_dwell = dwell;
        self
    }

    pub fn capacities(mut self, train: f64, platform: f64) -> Self {
        self.scenario.train_capacity = train;
        self.scenario.platform_capacity = platform;
        self
    }

    /// Uniform arrival rate at boarding stations (terminal stays 0).
    pub fn uniform_arrival_rate(mut self, alpha: f64) -> Self {
        let n = self.scenario.n_stations;
        for train in 1..=self.scenario.n_trains {
            for station in 1..n {
                self.scenario.arrival_rate.set(train, station, alpha);
            }
        }
        self
    }

    /// Uniform alight fraction at intermediate stations (station 1 stays 0,
    /// terminal stays 1).
    pub fn uniform_alight_fraction(mut self, beta: f64) -> Self {
        let n = self.scenario.n_stations;
        for train in 1..=self.scenario.n_trains {
            for station in 2..n {
                self.scenario.alight_fraction.set(train, station, beta);
            }
        }
        self
    }

    pub fn arrival_rate_at(mut self, train: usize, station: usize, alpha: f64) -> Self {
        self.scenario.arrival_rate.set(train, station, alpha);
        self
    }

    pub fn alight_fraction_at(mut self, train: usize, station: usize, beta: f64) -> Self {
        self.scenario.alight_fraction.set(train, station, beta);
        self
    }

    pub fn delay_rate_grid(mut self, grid: Grid<f64>) -> Self {
        self.scenario.delay_rate = grid;
        self.explicit_delay_rate = true;
        self
    }

    pub fn uniform_delay_rate(mut self, lambda: f64) -> Self {
        let (m, n) = (self.scenario.n_trains, self.scenario.n_stations);
        self.scenario.delay_rate = Grid::filled(m, n, lambda);
        self.explicit_delay_rate = true;
        self
    }

    pub fn delay_rate_at(mut self, train: usize, station: usize, lambda: f64) -> Self {
        self.scenario.delay_rate.set(train, station, lambda);
        self.explicit_delay_rate = true;
        self
    }

    /// Parameters of the derived delay-rate model, used when no explicit
    /// delay rates are set.
    pub fn delay_model(mut self, kappa_b: f64, lambda_max: f64) -> Self {
        self.kappa_b = kappa_b;
        self.lambda_max = lambda_max;
        self
    }

    pub fn pfm_weights(mut self, wait: f64, load: f64) -> Self {
        self.scenario.weight_wait = wait;
        self.scenario.weight_load = load;
        self
    }

    pub fn tom_weights(mut self, punctuality: f64, regularity: f64, effort: f64) -> Self {
        self.scenario.weight_punctuality = punctuality;
        self.scenario.weight_regularity = regularity;
        self.scenario.weight_effort = effort;
        self
    }

    pub fn run_control(mut self, bounds: RunControlBounds) -> Self {
        self.scenario.run_control = bounds;
        self
    }

    pub fn dwell_control(mut self, min: f64, max: f64) -> Self {
        self.scenario.dwell_control = (min, max);
        self
    }

    pub fn disturbance(mut self, train: usize, station: usize, run_s: f64, dwell_s: f64) -> Self {
        self.scenario
            .disturbances
            .insert((train, station), Disturbance { run_s, dwell_s });
        self
    }

    pub fn revert_policy(mut self, policy: RevertPolicy) -> Self {
        self.scenario.revert_policy = policy;
        self
    }

    pub fn build(mut self) -> Result<Scenario, ScenarioError> {
        if !self.explicit_delay_rate {
            self.scenario.delay_rate =
                derive_delay_rate(&self.scenario.arrival_rate, self.kappa_b, self.lambda_max);
        }
        validate_scenario(self.scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line9_shape() -> ScenarioBuilder {
        ScenarioBuilder::new(40, 13)
            .headways(360.0, 180.0, 360.0)
            .capacities(1860.0, 1860.0)
    }

    #[test]
    fn accepts_case_study_shape() {
        let s = line9_shape().build().expect("valid scenario");
        assert_eq!(s.n_stations, 13);
        assert_eq!(s.n_trains, 40);
        assert_eq!(s.train_capacity, 1860.0);
        assert_eq!(s.platform_capacity, 1860.0);
        assert_eq!(s.scheduled_headway, 360.0);
        assert_eq!(s.min_headway, 180.0);
    }

    #[test]
    fn rejects_delay_rate_of_one() {
        let err = line9_shape().delay_rate_at(5, 3, 1.0).build().unwrap_err();
        assert_eq!(
            err,
            ScenarioError::InvalidDelayRate {
                train: 5,
                station: 3,
                value: 1.0
            }
        );
        assert!(err.to_string().contains("delay rate must be < 1"));
    }

    #[test]
    fn rejects_headway_below_minimum() {
        let err = line9_shape()
            .headways(120.0, 180.0, 360.0)
            .build()
            .unwrap_err();
        assert!(matches!(err, ScenarioError::HeadwayOutOfBounds { .. }));
    }

    #[test]
    fn rejects_negative_capacity() {
        let err = line9_shape().capacities(-5.0, 1860.0).build().unwrap_err();
        assert!(matches!(err, ScenarioError::NonPositiveTrainCapacity(_)));
    }

    #[test]
    fn rejects_terminal_boarding() {
        let err = line9_shape()
            .arrival_rate_at(2, 13, 0.4)
            .build()
            .unwrap_err();
        assert_eq!(
            err,
            ScenarioError::TerminalArrivalRate {
                train: 2,
                value: 0.4
            }
        );
    }

    #[test]
    fn rejects_terminal_partial_alighting() {
        let err = line9_shape()
            .alight_fraction_at(7, 13, 0.9)
            .build()
            .unwrap_err();
        assert_eq!(
            err,
            ScenarioError::TerminalAlightFraction {
                train: 7,
                value: 0.9
            }
        );
    }

    #[test]
    fn derived_delay_rate_saturates() {
        let s = ScenarioBuilder::new(2, 3)
            .uniform_arrival_rate(20.0)
            .delay_model(0.05, 0.5)
            .build()
            .unwrap();
        // 0.05 * 20 = 1.0 saturates at 0.5; terminal column has alpha = 0.
        assert_eq!(s.lambda(1, 1), 0.5);
        assert_eq!(s.lambda(1, 3), 0.0);
    }

    #[test]
    fn run_box_resolves_percentage_bounds() {
        let s = line9_shape()
            .nominal_run(vec![120.0; 12])
            .run_control(RunControlBounds::Fraction {
                down: 0.17,
                up: 0.53,
            })
            .build()
            .unwrap();
        let (lo, hi) = s.run_box_into(2);
        assert!((lo - (-20.4)).abs() < 1e-12);
        assert!((hi - 63.6).abs() < 1e-12);
    }

    #[test]
    fn disturbance_lookup_by_side() {
        let s = line9_shape().disturbance(13, 1, 5.0, 68.0).build().unwrap();
        assert_eq!(s.dwell_disturbance_at(13, 1), 68.0);
        // run_s on section 1 is felt by the departure at station 2
        assert_eq!(s.run_disturbance_into(13, 2), 5.0);
        assert_eq!(s.run_disturbance_into(13, 1), 0.0);
        assert_eq!(s.dwell_disturbance_at(14, 1), 0.0);
    }
}
