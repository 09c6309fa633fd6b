//! The shared DC capacitor.
//!
//! Both converters deposit the current they draw from the capacitor;
//! `i_dc_x > 0` means the capacitor discharges into converter `x`. The
//! voltage itself is a state of the engine's global integrator.

use crate::error::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcLinkState {
    pub v_dc: f64,
    pub c_dc: f64,
    pub i_dc_g: f64,
    pub i_dc_m: f64,
}

impl DcLinkState {
    pub fn new(c_dc: f64, v_dc: f64) -> Result<Self, SimError> {
        if !(c_dc.is_finite() && c_dc > 0.0) {
            return Err(SimError::InvalidConfig(format!("c_dc must be positive, got {c_dc}")));
        }
        if !(v_dc.is_finite() && v_dc > 0.0) {
            return Err(SimError::CollapsedDcLink { v_dc });
        }
        Ok(Self {
            v_dc,
            c_dc,
            i_dc_g: 0.0,
            i_dc_m: 0.0,
        })
    }

    /// Record the currents the two converters draw at an exchange point.
    pub fn deposit(&mut self, i_dc_g: f64, i_dc_m: f64) {
        self.i_dc_g = i_dc_g;
        self.i_dc_m = i_dc_m;
    }

    pub fn dv_dc_dt(&self) -> f64 {
        (-self.i_dc_g - self.i_dc_m) / self.c_dc
    }

    /// Stored energy, `C V^2 / 2`.
    pub fn energy(&self) -> f64 {
        0.5 * self.c_dc * self.v_dc * self.v_dc
    }
}
