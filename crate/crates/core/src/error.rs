use crate::engine::StateVector;
use crate::phasor::SingularEquivalent;
use crate::Side;

/// Model errors raised while building or advancing a simulation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("dead bus on the {side} side: PCC voltage is zero, the PLL has no signal")]
    DeadBus { side: Side },

    #[error("{side} PCC voltage {v_d:.4} V is below the low-voltage threshold {v_min:.4} V")]
    LowVoltage { side: Side, v_d: f64, v_min: f64 },

    #[error("DC-link voltage collapsed to {v_dc} V")]
    CollapsedDcLink { v_dc: f64 },

    #[error("{side} network is degenerate (1-norm condition estimate {cond:.3e})")]
    NetworkDegenerate { side: Side, cond: f64 },

    #[error(transparent)]
    SingularEquivalent(#[from] SingularEquivalent),

    #[error("bus {bus} does not exist in a {n_bus}-bus network")]
    InvalidBus { bus: usize, n_bus: usize },

    #[error("no shunt with impedance {z} is attached to bus {bus}")]
    ShuntNotFound { bus: usize, z: num_complex::Complex64 },

    #[error("{side} network/converter interface did not converge (residual {residual:.3e} V)")]
    InterfaceNotConverged { side: Side, residual: f64 },

    #[error("non-finite state at t = {t} s; last good state: {last_good}")]
    Divergence { t: f64, last_good: StateVector },

    #[error("initialization did not converge in {iterations} iterations (residual {residual:.3e})")]
    InitNotConverged { iterations: usize, residual: f64 },

    #[error("steady-state solve did not converge in {iterations} iterations (residual {residual:.3e})")]
    SteadyStateNotConverged { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
