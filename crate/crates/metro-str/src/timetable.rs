//! Nominal timetable construction and headway re-spacing.

use thiserror::Error;

use crate::grid::Grid;
use crate::scenario::Scenario;

/// Scheduled departure times per (train, station) plus the headway the
/// schedule is currently spaced at.
#[derive(Debug, Clone, PartialEq)]
pub struct Timetable {
    departures: Grid<f64>,
    headway_in_force: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum TimetableError {
    #[error("new headway {new} is below the minimal allowable headway {min}")]
    HeadwayBelowMinimum { new: f64, min: f64 },
    #[error("re-spacing anchor train {0} is outside the line")]
    AnchorOutOfRange(usize),
}

impl Timetable {
    /// Scheduled departure of train `i` at station `j`, seconds from epoch.
    #[inline]
    pub fn departure(&self, train: usize, station: usize) -> f64 {
        self.departures.at(train, station)
    }

    /// Headway the schedule is currently spaced at (between re-spaced trains).
    pub fn headway_in_force(&self) -> f64 {
        self.headway_in_force
    }

    /// Scheduled gap between train `i` and its predecessor at `station`.
    /// Returns the headway in force for the first train, which has no
    /// predecessor.
    pub fn scheduled_gap(&self, train: usize, station: usize) -> f64 {
        if train < 2 {
            self.headway_in_force
        } else {
            self.departure(train, station) - self.departure(train - 1, station)
        }
    }

    pub fn n_trains(&self) -> usize {
        self.departures.n_trains()
    }

    pub fn n_stations(&self) -> usize {
        self.departures.n_stations()
    }

    /// Schedule with every train after `anchor_train` re-spaced at `new_h`
    /// behind the anchor's (unchanged) slots. Trains up to and including the
    /// anchor keep their current schedule.
    pub fn respaced(
        &self,
        anchor_train: usize,
        new_h: f64,
        min_headway: f64,
    ) -> Result<Timetable, TimetableError> {
        if new_h < min_headway {
            return Err(TimetableError::HeadwayBelowMinimum {
                new: new_h,
                min: min_headway,
            });
        }
        if anchor_train < 1 || anchor_train > self.n_trains() {
            return Err(TimetableError::AnchorOutOfRange(anchor_train));
        }
        let mut departures = self.departures.clone();
        for train in (anchor_train + 1)..=self.n_trains() {
            let steps = (train - anchor_train) as f64;
            for station in 1..=self.n_stations() {
                departures.set(
                    train,
                    station,
                    self.departure(anchor_train, station) + steps * new_h,
                );
            }
        }
        Ok(Timetable {
            departures,
            headway_in_force: new_h,
        })
    }
}

/// Builds the scheduled timetable for `scenario`, with train 1 departing
/// station 1 at `t0`.
///
/// Under a constant scheduled headway the implicit gap between successive
/// trains at a station equals the headway itself, so the scheduled dwell at
/// station `j + 1` closes to `D + lambda[i, j+1] * H` and each train's row
/// follows from the previous station in closed form:
///
/// ```text
/// T[i, 1]     = t0 + (i - 1) * H
/// T[i, j + 1] = T[i, j] + R[j] + D + lambda[i, j + 1] * H
/// ```
///
/// The closed form reproduces the constant headway at every station exactly
/// when the delay rates are train-invariant per station (the shape every
/// bundled scenario uses); train-varying delay rates perturb the scheduled
/// gaps by the difference in their dwell supplements.
pub fn build_nominal_timetable(scenario: &Scenario, t0: f64) -> Timetable {
    let h = scenario.scheduled_headway;
    let mut departures = Grid::filled(scenario.n_trains, scenario.n_stations, 0.0);
    // Each row is base + accumulated offset. Keeping the per-train base out
    // of the running sum makes the scheduled gap of trains with identical
    // delay-rate columns bitwise equal to the headway.
    for train in 1..=scenario.n_trains {
        let base = t0 + (train as f64 - 1.0) * h;
        let mut offset = 0.0;
        departures.set(train, 1, base);
        for station in 2..=scenario.n_stations {
            offset += scenario.nominal_run[station - 2]
                + scenario.min_dwell
                + scenario.lambda(train, station) * h;
            departures.set(train, station, base + offset);
        }
    }
    Timetable {
        departures,
        headway_in_force: h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioBuilder;

    fn two_station_scenario(lambda_12: f64) -> Scenario {
        ScenarioBuilder::new(3, 2)
            .nominal_run(vec![120.0])
            .min_dwell(30.0)
            .headways(360.0, 180.0, 360.0)
            .uniform_delay_rate(0.0)
            .delay_rate_at(1, 2, lambda_12)
            .build()
            .unwrap()
    }

    #[test]
    fn closed_form_without_delay_rate() {
        let s = two_station_scenario(0.0);
        let t = build_nominal_timetable(&s, 0.0);
        assert_eq!(t.departure(1, 2), 150.0); // 0 + 120 + 30
        assert_eq!(t.departure(2, 2), 510.0); // 360 + 120 + 30
    }

    #[test]
    fn closed_form_with_delay_rate_dwell_supplement() {
        let s = two_station_scenario(0.1);
        let t = build_nominal_timetable(&s, 0.0);
        assert_eq!(t.departure(1, 2), 186.0); // 0 + 120 + 30 + 0.1 * 360
    }

    #[test]
    fn regularity_holds_at_every_station() {
        let s = ScenarioBuilder::new(5, 4)
            .nominal_run(vec![100.0, 140.0, 90.0])
            .uniform_delay_rate(0.12)
            .build()
            .unwrap();
        let t = build_nominal_timetable(&s, 600.0);
        for train in 1..5 {
            for station in 1..=4 {
                let gap = t.departure(train + 1, station) - t.departure(train, station);
                assert!(
                    (gap - 360.0).abs() < 1e-9,
                    "train {train} station {station}: {gap}"
                );
            }
        }
    }

    #[test]
    fn monotone_along_each_train() {
        let s = two_station_scenario(0.3);
        let t = build_nominal_timetable(&s, 0.0);
        for train in 1..=3 {
            assert!(t.departure(train, 2) > t.departure(train, 1));
        }
    }

    #[test]
    fn determinism_bitwise() {
        let s = two_station_scenario(0.25);
        let a = build_nominal_timetable(&s, 42.0);
        let b = build_nominal_timetable(&s, 42.0);
        assert_eq!(a, b);
    }

    #[test]
    fn respacing_keeps_anchor_and_shifts_later_trains() {
        let s = two_station_scenario(0.0);
        let t = build_nominal_timetable(&s, 0.0);
        let r = t.respaced(2, 300.0, 180.0).unwrap();
        // anchor and earlier trains untouched
        assert_eq!(r.departure(1, 1), 0.0);
        assert_eq!(r.departure(2, 1), 360.0);
        assert_eq!(r.departure(2, 2), 510.0);
        // train 3 re-spaced 300 s behind the anchor at every station
        assert_eq!(r.departure(3, 1), 660.0);
        assert_eq!(r.departure(3, 2), 810.0);
        assert_eq!(r.headway_in_force(), 300.0);
        assert_eq!(r.scheduled_gap(3, 1), 300.0);
    }

    #[test]
    fn respacing_rejects_sub_minimum_headway() {
        let s = two_station_scenario(0.0);
        let t = build_nominal_timetable(&s, 0.0);
        assert_eq!(
            t.respaced(1, 100.0, 180.0).unwrap_err(),
            TimetableError::HeadwayBelowMinimum {
                new: 100.0,
                min: 180.0
            }
        );
    }
}
