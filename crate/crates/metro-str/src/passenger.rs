//! Event-driven passenger bookkeeping.
//!
//! All counts are kept as non-negative reals: arrivals accrue fluidly over a
//! headway, and rounding inside the dynamics would break the algebraic
//! equivalence between the flow-balance route and the folded recursions that
//! the test suite cross-checks. Rounding belongs in report formatting only.

use thiserror::Error;

use crate::grid::Grid;
use crate::scenario::Scenario;

/// Per-(train, station) passenger ledger, filled in as departures execute.
#[derive(Debug, Clone, PartialEq)]
pub struct PassengerState {
    on_board: Grid<f64>,
    stranded: Grid<f64>,
    boarded: Grid<f64>,
    alighted: Grid<f64>,
    arrived: Grid<f64>,
    peak_platform: Grid<f64>,
    wait_time: Grid<f64>,
}

/// Flows computed by one departure event, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepartureFlows {
    pub alighted: f64,
    pub arrived: f64,
    pub boarded: f64,
    pub on_board: f64,
    pub stranded: f64,
    pub peak_platform: f64,
    pub wait_time: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PassengerError {
    #[error("non-causal headway {0} at train {1}, station {2}")]
    NonCausalHeadway(f64, usize, usize),
}

/// Number of passengers alighting, proportional to the load carried in.
#[inline]
pub fn alighting_count(on_board_prev: f64, beta: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&beta) && on_board_prev >= 0.0);
    beta * on_board_prev
}

/// Passengers arriving at the platform over one headway, uniform in time.
#[inline]
pub fn arrival_count(alpha: f64, headway: f64) -> f64 {
    debug_assert!(alpha >= 0.0 && headway > 0.0);
    alpha * headway
}

/// Passengers able to board given the remaining train capacity.
#[inline]
pub fn boarding_count(
    capacity: f64,
    on_board_prev: f64,
    alighted: f64,
    arrived: f64,
    stranded_prev_train: f64,
) -> f64 {
    (capacity - on_board_prev + alighted).min(arrived + stranded_prev_train)
}

/// Total waiting time accumulated on a platform over one headway: the queue
/// left behind waits the full headway and fresh arrivals wait half of it on
/// average.
#[inline]
pub fn waiting_time(stranded_prev: f64, alpha: f64, headway: f64) -> f64 {
    stranded_prev * headway + 0.5 * alpha * headway * headway
}

impl PassengerState {
    pub fn new(n_trains: usize, n_stations: usize) -> Self {
        PassengerState {
            on_board: Grid::filled(n_trains, n_stations, 0.0),
            stranded: Grid::filled(n_trains, n_stations, 0.0),
            boarded: Grid::filled(n_trains, n_stations, 0.0),
            alighted: Grid::filled(n_trains, n_stations, 0.0),
            arrived: Grid::filled(n_trains, n_stations, 0.0),
            peak_platform: Grid::filled(n_trains, n_stations, 0.0),
            wait_time: Grid::filled(n_trains, n_stations, 0.0),
        }
    }

    /// On-board count after `train` departs `station`; 0 for the boundary
    /// "station 0" (trains enter the line empty).
    pub fn on_board(&self, train: usize, station: usize) -> f64 {
        if station == 0 {
            return 0.0;
        }
        self.on_board.at(train, station)
    }

    /// Stranded count left on the platform after `train` departs `station`;
    /// 0 for the boundary "train 0" (platforms start empty).
    pub fn stranded(&self, train: usize, station: usize) -> f64 {
        if train == 0 {
            return 0.0;
        }
        self.stranded.at(train, station)
    }

    pub fn boarded(&self, train: usize, station: usize) -> f64 {
        self.boarded.at(train, station)
    }

    pub fn alighted(&self, train: usize, station: usize) -> f64 {
        self.alighted.at(train, station)
    }

    pub fn arrived(&self, train: usize, station: usize) -> f64 {
        self.arrived.at(train, station)
    }

    pub fn peak_platform(&self, train: usize, station: usize) -> f64 {
        self.peak_platform.at(train, station)
    }

    pub fn wait_time(&self, train: usize, station: usize) -> f64 {
        self.wait_time.at(train, station)
    }

    /// Applies the departure of `train` from `station` with realized headway
    /// `headway`, recording all flows for the event.
    ///
    /// Requires the states for (train, station-1) and (train-1, station) to
    /// be recorded already; the engine's event order guarantees that.
    ///
    /// Evaluation order within the event is fixed (alight, arrive, board,
    /// on-board, stranded, peak) so traces are reproducible. Boarding and the
    /// platform balance come from the flow equations directly, which keeps
    /// platform conservation exact in floating point; the folded one-line
    /// recursions for on-board and stranded counts are algebraically equal
    /// and are cross-checked in the test suite.
    pub fn apply_departure(
        &mut self,
        train: usize,
        station: usize,
        headway: f64,
        scenario: &Scenario,
    ) -> Result<DepartureFlows, PassengerError> {
        if headway < 0.0 {
            return Err(PassengerError::NonCausalHeadway(headway, train, station));
        }
        let capacity = scenario.train_capacity;
        let alpha = scenario.alpha(train, station);
        let beta = scenario.beta(train, station);
        let on_board_prev = if station >= 2 {
            self.on_board.at(train, station - 1)
        } else {
            0.0
        };
        let stranded_prev = if train >= 2 {
            self.stranded.at(train - 1, station)
        } else {
            0.0
        };

        let alighted = alighting_count(on_board_prev, beta);
        let arrived = alpha * headway;
        let boarded = boarding_count(capacity, on_board_prev, alighted, arrived, stranded_prev);
        // Capacity min guards the last-ulp rounding of the flow balance.
        let on_board = (on_board_prev + boarded - alighted).min(capacity);
        let stranded = stranded_prev + arrived - boarded;
        let peak_platform = stranded_prev + arrived + beta * on_board_prev;
        let wait_time = waiting_time(stranded_prev, alpha, headway);

        self.alighted.set(train, station, alighted);
        self.arrived.set(train, station, arrived);
        self.boarded.set(train, station, boarded);
        self.on_board.set(train, station, on_board);
        self.stranded.set(train, station, stranded);
        self.peak_platform.set(train, station, peak_platform);
        self.wait_time.set(train, station, wait_time);

        Ok(DepartureFlows {
            alighted,
            arrived,
            boarded,
            on_board,
            stranded,
            peak_platform,
            wait_time,
        })
    }
}

/// Enabling check for headway re-optimization: the platform's worst-instant
/// occupancy has reached the acceptable capacity.
#[inline]
pub fn trigger_check(peak: f64, scenario: &Scenario) -> bool {
    peak >= scenario.platform_capacity
}

/// Folded one-line recursion for the on-board count (cross-check route).
#[inline]
pub fn on_board_folded(
    capacity: f64,
    stranded_prev_train: f64,
    alpha: f64,
    headway: f64,
    beta: f64,
    on_board_prev: f64,
) -> f64 {
    capacity.min(stranded_prev_train + alpha * headway + (1.0 - beta) * on_board_prev)
}

/// Folded one-line recursion for the stranded count (cross-check route).
#[inline]
pub fn stranded_folded(
    capacity: f64,
    stranded_prev_train: f64,
    alpha: f64,
    headway: f64,
    beta: f64,
    on_board_prev: f64,
) -> f64 {
    (stranded_prev_train + alpha * headway + (1.0 - beta) * on_board_prev - capacity).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioBuilder;

    #[test]
    fn alighting_is_proportional() {
        assert_eq!(alighting_count(100.0, 0.2), 20.0);
        assert_eq!(alighting_count(734.5, 1.0), 734.5);
        assert_eq!(alighting_count(0.0, 0.7), 0.0);
    }

    #[test]
    fn arrivals_accrue_over_headway() {
        assert_eq!(arrival_count(0.5, 360.0), 180.0);
        assert_eq!(arrival_count(0.0, 240.0), 0.0);
        assert_eq!(arrival_count(2.0, 180.0), 360.0);
    }

    #[test]
    fn boarding_limited_by_remaining_capacity() {
        // nearly full train: only the freed space plus slack is available
        let boarded = boarding_count(1860.0, 1800.0, 100.0, 150.0, 50.0);
        assert_eq!(boarded, 160.0); // min(1860 - 1800 + 100, 200)
    }

    #[test]
    fn waiting_time_examples() {
        assert_eq!(waiting_time(0.0, 1.0, 360.0), 64_800.0);
        assert_eq!(waiting_time(100.0, 0.0, 60.0), 6_000.0);
        assert_eq!(waiting_time(0.0, 0.0, 500.0), 0.0);
    }

    #[test]
    fn trigger_boundary_is_inclusive() {
        let s = ScenarioBuilder::new(2, 2)
            .capacities(1860.0, 1860.0)
            .build()
            .unwrap();
        assert!(trigger_check(1860.0, &s));
        assert!(!trigger_check(1859.9, &s));
        assert!(trigger_check(2210.0, &s));
    }

    fn grid_scenario(alpha: f64, beta: f64) -> Scenario {
        ScenarioBuilder::new(3, 3)
            .uniform_arrival_rate(alpha)
            .uniform_alight_fraction(beta)
            .uniform_delay_rate(0.0)
            .build()
            .unwrap()
    }

    #[test]
    fn no_exchange_leaves_state_unchanged() {
        let s = grid_scenario(0.0, 0.0);
        let mut p = PassengerState::new(3, 3);
        // Seed train 1 with 500 on board at station 1 via a synthetic platform
        // queue: board 500 from a stranded queue of the phantom predecessor.
        // Simpler: drive the real recursion with a one-off scenario where
        // alpha puts 500 on the platform for train 1.
        let seed = ScenarioBuilder::new(3, 3)
            .uniform_arrival_rate(500.0 / 360.0)
            .uniform_alight_fraction(0.0)
            .uniform_delay_rate(0.0)
            .build()
            .unwrap();
        p.apply_departure(1, 1, 360.0, &seed).unwrap();
        assert!((p.on_board(1, 1) - 500.0).abs() < 1e-9);
        // now a no-exchange departure at station 2
        let f = p.apply_departure(1, 2, 360.0, &s).unwrap();
        assert_eq!(f.on_board, p.on_board(1, 1));
        assert_eq!(f.stranded, 0.0);
        assert_eq!(f.peak_platform, 0.0);
    }

    #[test]
    fn saturated_departure_matches_folded_values() {
        // stranded 300 + arrivals 360 + kept load 800 stays under capacity
        let mut p = PassengerState::new(2, 3);
        let s = ScenarioBuilder::new(2, 3)
            .capacities(1860.0, 1860.0)
            .uniform_arrival_rate(1.0)
            .uniform_alight_fraction(0.5)
            .uniform_delay_rate(0.0)
            .build()
            .unwrap();
        // Manually place the boundary values the example prescribes.
        p.on_board.set(2, 1, 1600.0);
        p.stranded.set(1, 2, 300.0);
        let f = p.apply_departure(2, 2, 360.0, &s).unwrap();
        assert!((f.on_board - 1460.0).abs() < 1e-9);
        assert_eq!(f.stranded, 0.0);
        assert!((f.peak_platform - 1460.0).abs() < 1e-9);
        // folded routes agree
        assert_eq!(
            on_board_folded(1860.0, 300.0, 1.0, 360.0, 0.5, 1600.0),
            1460.0
        );
        assert_eq!(stranded_folded(1860.0, 300.0, 1.0, 360.0, 0.5, 1600.0), 0.0);
    }

    #[test]
    fn negative_headway_is_rejected() {
        let s = grid_scenario(0.1, 0.1);
        let mut p = PassengerState::new(3, 3);
        let err = p.apply_departure(1, 1, -1.0, &s).unwrap_err();
        assert_eq!(err, PassengerError::NonCausalHeadway(-1.0, 1, 1));
    }

    #[test]
    fn platform_conservation_is_exact() {
        let s = grid_scenario(1.7, 0.3);
        let mut p = PassengerState::new(3, 3);
        for train in 1..=3 {
            for station in 1..=3 {
                let f = p.apply_departure(train, station, 313.7, &s).unwrap();
                let stranded_prev = if train >= 2 {
                    p.stranded(train - 1, station)
                } else {
                    0.0
                };
                assert_eq!(f.arrived + stranded_prev - f.boarded - f.stranded, 0.0);
            }
        }
    }
}
