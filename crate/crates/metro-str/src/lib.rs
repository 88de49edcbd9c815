//! Discrete-event simulation and service-oriented traffic regulation for a
//! single-direction metro line.
//!
//! The crate couples two cooperating controllers over one event-driven line
//! model:
//!
//! - a **passenger-flow side** that tracks on-board, stranded, and peak
//!   platform counts at every departure and, when a platform overcrowds,
//!   re-optimizes the line headway over a bounded interval
//!   ([`headway::HeadwayProblem`]);
//! - a **train-operation side** that regulates departure-time deviations
//!   with run-time and dwell-time adjustments solved from a box-constrained
//!   quadratic program ([`regulator::solve_regulation`]).
//!
//! [`engine::run`] orchestrates both over a chronological departure loop and
//! produces an audit-ready [`engine::EventTrace`]; `engine::compare_modes`
//! runs the adaptive and fixed-headway policies side by side on identical
//! inputs. Everything is deterministic: identical inputs give byte-identical
//! traces.

pub mod engine;
pub mod grid;
pub mod headway;
pub mod io;
pub mod oracle;
pub mod passenger;
pub mod regulator;
pub mod scenario;
pub mod timetable;

pub use engine::{compare_modes, run, EventTrace, RegulationMode};
pub use scenario::{validate_scenario, Scenario, ScenarioBuilder, ScenarioError};
pub use timetable::{build_nominal_timetable, Timetable};
