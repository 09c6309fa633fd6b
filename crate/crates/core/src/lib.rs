//! Phasor-domain simulation of a back-to-back converter linking a grid and
//! a microgrid through a shared DC capacitor.
//!
//! The AC networks are algebraic (admittance matrices solved every
//! evaluation); converter current loops, the DC-voltage PI integral and the
//! DC-link voltage are the dynamic states, advanced with Heun's method by
//! [`engine::Simulation`]. [`oracle`] integrates the same continuous model
//! independently with RK4 at a fine step for validation.

use std::fmt;

pub mod converter;
pub mod dclink;
pub mod engine;
pub mod error;
pub mod network;
pub mod oracle;
pub mod output;
pub mod phasor;
pub mod scenario;

pub use engine::{RunFailure, Simulation, StateVector, Trace};
pub use error::SimError;
pub use output::OutputRow;
pub use scenario::{parse_scenario, parse_scenario_str, Scenario};

/// Which AC system a converter or network belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Grid,
    Microgrid,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Grid => "grid",
            Side::Microgrid => "microgrid",
        })
    }
}
