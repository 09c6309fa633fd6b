//! One AC/DC stage of the back-to-back converter.
//!
//! The same code serves both sides. The grid-side converter runs in
//! [`ControlMode::DcRegulation`], where a PI on the DC-link voltage produces
//! the active power reference; the microgrid-side converter runs in
//! [`ControlMode::PqSetpoint`] and takes its references from the scenario.
//!
//! The inner current loop is represented by a first-order lag of time
//! constant `t_f` on each axis. Everything else is algebraic: given the PCC
//! voltage, the grid current state and the DC voltage, the filter capacitor
//! voltage, filter current, switching-terminal voltage and DC-side power
//! follow from KVL/KCL in the converter frame.

use num_complex::Complex64;

use crate::error::SimError;
use crate::phasor::{peak_phase_from_ll_rms, three_phase_power, DqPair, Phasor};
use crate::Side;

/// Passive parameters of one converter stage. SI units throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConverterParams {
    /// Interface reactor resistance between filter capacitor and PCC.
    pub r_reactor: f64,
    pub l_reactor: f64,
    pub c_filter: f64,
    /// Resistance of the switch-side filter inductor.
    pub r_filter: f64,
    pub l_filter: f64,
    pub s_rated: f64,
    pub v_ll_rms: f64,
    pub omega_nom: f64,
}

impl ConverterParams {
    pub fn validate(&self, side: Side) -> Result<(), SimError> {
        let fields = [
            ("r", self.r_reactor),
            ("l", self.l_reactor),
            ("c_f", self.c_filter),
            ("r_f", self.r_filter),
            ("l_f", self.l_filter),
            ("s_rated", self.s_rated),
            ("v_ll_rms", self.v_ll_rms),
            ("omega_nom", self.omega_nom),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "{side} converter parameter {name} must be positive, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// `r + j omega l` of the interface reactor at nominal frequency.
    pub fn z_reactor(&self) -> Complex64 {
        Complex64::new(self.r_reactor, self.omega_nom * self.l_reactor)
    }

    pub fn v_nominal_peak(&self) -> f64 {
        peak_phase_from_ll_rms(self.v_ll_rms)
    }

    /// Peak phase current at rated apparent power and nominal voltage.
    pub fn i_rated_peak(&self) -> f64 {
        2.0 / 3.0 * self.s_rated / self.v_nominal_peak()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    DcRegulation,
    PqSetpoint,
}

/// Controller settings for one converter. `p_ref` and `q_ref` may be
/// changed by scenario events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub mode: ControlMode,
    /// DC PI proportional gain, W/V.
    pub k_p: f64,
    /// DC PI integral gain, W/(V s).
    pub k_i: f64,
    /// Current-loop lag time constant, s.
    pub t_f: f64,
    pub v_dc_ref: f64,
    pub p_ref: f64,
    pub q_ref: f64,
    /// Clamp the current reference magnitude at the rated current.
    pub current_limit: bool,
    /// Reference currents are refused below this fraction of nominal voltage.
    pub low_voltage_fraction: f64,
}

impl ControlConfig {
    pub fn dc_regulation(k_p: f64, k_i: f64, t_f: f64, v_dc_ref: f64, q_ref: f64) -> Self {
        Self {
            mode: ControlMode::DcRegulation,
            k_p,
            k_i,
            t_f,
            v_dc_ref,
            p_ref: 0.0,
            q_ref,
            current_limit: false,
            low_voltage_fraction: DEFAULT_LOW_VOLTAGE_FRACTION,
        }
    }

    pub fn pq_setpoint(t_f: f64, p_ref: f64, q_ref: f64) -> Self {
        Self {
            mode: ControlMode::PqSetpoint,
            k_p: 0.0,
            k_i: 0.0,
            t_f,
            v_dc_ref: 0.0,
            p_ref,
            q_ref,
            current_limit: false,
            low_voltage_fraction: DEFAULT_LOW_VOLTAGE_FRACTION,
        }
    }

    pub fn validate(&self, side: Side) -> Result<(), SimError> {
        let bad = |what: String| Err(SimError::InvalidConfig(format!("{side} control: {what}")));
        if !(self.t_f.is_finite() && self.t_f > 0.0) {
            return bad(format!("t_f must be positive, got {}", self.t_f));
        }
        if !(self.k_p >= 0.0 && self.k_i >= 0.0) {
            return bad(format!("gains must be non-negative (k_p {}, k_i {})", self.k_p, self.k_i));
        }
        if self.mode == ControlMode::DcRegulation && !(self.v_dc_ref > 0.0) {
            return bad(format!("v_dc_ref must be positive, got {}", self.v_dc_ref));
        }
        if !(0.0..1.0).contains(&self.low_voltage_fraction) {
            return bad(format!(
                "low_voltage_fraction must be in [0, 1), got {}",
                self.low_voltage_fraction
            ));
        }
        if !(self.p_ref.is_finite() && self.q_ref.is_finite()) {
            return bad("setpoints must be finite".into());
        }
        Ok(())
    }
}

pub const DEFAULT_LOW_VOLTAGE_FRACTION: f64 = 0.1;

/// Dynamic states of one converter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConverterState {
    /// PCC current, d axis (A). Positive flows from the converter into the network.
    pub i_d: f64,
    pub i_q: f64,
    /// Integral of the DC voltage error (V s). Unused in `PqSetpoint` mode.
    pub pi_integral: f64,
}

/// Algebraic quantities derived from one converter's state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConverterOutputs {
    /// Filter capacitor voltage.
    pub e_source: DqPair,
    pub i_f: DqPair,
    pub v_t: DqPair,
    /// DC-side power, positive when the capacitor discharges into this converter.
    pub p_dc: f64,
    pub i_dc: f64,
    pub p_pcc: f64,
    pub q_pcc: f64,
    /// Diagnostic DC power computed at the switching terminals,
    /// `3/2 (v_t . i_f)`. Includes the filter-branch losses.
    pub p_dc_terminal: f64,
}

/// Failure of a single converter relation, before it is tagged with a side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConverterFault {
    DeadBus,
    LowVoltage { v_d: f64, v_min: f64 },
    CollapsedDcLink { v_dc: f64 },
}

impl ConverterFault {
    pub fn on(self, side: Side) -> SimError {
        match self {
            ConverterFault::DeadBus => SimError::DeadBus { side },
            ConverterFault::LowVoltage { v_d, v_min } => SimError::LowVoltage { side, v_d, v_min },
            ConverterFault::CollapsedDcLink { v_dc } => SimError::CollapsedDcLink { v_dc },
        }
    }
}

/// Ideal PLL: put the d axis on the PCC voltage.
pub fn align_frame(v_pcc: Phasor) -> Result<(f64, DqPair), ConverterFault> {
    let mag = v_pcc.magnitude();
    if mag == 0.0 || !mag.is_finite() {
        return Err(ConverterFault::DeadBus);
    }
    let angle = v_pcc.angle();
    Ok((angle, DqPair::new(mag, 0.0, angle)))
}

/// Filter capacitor voltage behind the interface reactor.
pub fn internal_voltage(v: DqPair, i: DqPair, params: &ConverterParams, omega: f64) -> DqPair {
    debug_assert_eq!(v.frame_angle, i.frame_angle);
    let (r, x) = (params.r_reactor, omega * params.l_reactor);
    DqPair::new(v.d + r * i.d - x * i.q, v.q + r * i.q + x * i.d, v.frame_angle)
}

/// Current through the switch-side filter inductor.
pub fn filter_current(e: DqPair, i: DqPair, params: &ConverterParams, omega: f64) -> DqPair {
    debug_assert_eq!(e.frame_angle, i.frame_angle);
    let b = omega * params.c_filter;
    DqPair::new(i.d - b * e.q, i.q + b * e.d, e.frame_angle)
}

/// Voltage at the switching terminals.
pub fn terminal_voltage(e: DqPair, i_f: DqPair, params: &ConverterParams, omega: f64) -> DqPair {
    debug_assert_eq!(e.frame_angle, i_f.frame_angle);
    let (r, x) = (params.r_filter, omega * params.l_filter);
    DqPair::new(
        e.d + r * i_f.d - x * i_f.q,
        e.q + r * i_f.q + x * i_f.d,
        e.frame_angle,
    )
}

/// DC power and current drawn from the capacitor, neglecting filter losses.
pub fn dc_side(e: DqPair, i: DqPair, v_dc: f64) -> Result<(f64, f64), ConverterFault> {
    if !(v_dc > 0.0) {
        return Err(ConverterFault::CollapsedDcLink { v_dc });
    }
    let p_dc = three_phase_power(e, i).p;
    Ok((p_dc, p_dc / v_dc))
}

/// Current references for an aligned frame (`v_q = 0`).
pub fn reference_currents(
    p_ref: f64,
    q_ref: f64,
    v_d: f64,
    v_min: f64,
) -> Result<(f64, f64), ConverterFault> {
    if !(v_d > 0.0 && v_d >= v_min) {
        return Err(ConverterFault::LowVoltage { v_d, v_min });
    }
    Ok((2.0 / 3.0 * p_ref / v_d, -2.0 / 3.0 * q_ref / v_d))
}

/// DC-link voltage regulator output. A positive result exports power to
/// the AC side, discharging the capacitor.
pub fn dc_voltage_pi(v_dc: f64, cfg: &ControlConfig, integral: f64) -> f64 {
    cfg.k_p * (v_dc - cfg.v_dc_ref) + cfg.k_i * integral
}

/// Rate of the PI integral state.
pub fn pi_integral_rate(v_dc: f64, cfg: &ControlConfig) -> f64 {
    v_dc - cfg.v_dc_ref
}

/// First-order current-loop response on both axes.
pub fn current_lag_derivatives(
    i_d: f64,
    i_q: f64,
    i_d_ref: f64,
    i_q_ref: f64,
    t_f: f64,
) -> (f64, f64) {
    ((i_d_ref - i_d) / t_f, (i_q_ref - i_q) / t_f)
}

/// Everything one converter computes for a given PCC voltage, state and
/// DC voltage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConverterEval {
    pub frame_angle: f64,
    pub v_dq: DqPair,
    pub outputs: ConverterOutputs,
    pub p_ref: f64,
    pub i_d_ref: f64,
    pub i_q_ref: f64,
    /// Time derivative of the state.
    pub rate: ConverterState,
}

/// One converter object: parameters plus controller configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Converter {
    pub side: Side,
    pub params: ConverterParams,
    pub control: ControlConfig,
}

impl Converter {
    pub fn new(side: Side, params: ConverterParams, control: ControlConfig) -> Result<Self, SimError> {
        params.validate(side)?;
        control.validate(side)?;
        Ok(Self {
            side,
            params,
            control,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.control.low_voltage_fraction * self.params.v_nominal_peak()
    }

    /// Active power reference in force for the given DC state.
    pub fn power_reference(&self, v_dc: f64, pi_integral: f64) -> f64 {
        match self.control.mode {
            ControlMode::DcRegulation => dc_voltage_pi(v_dc, &self.control, pi_integral),
            ControlMode::PqSetpoint => self.control.p_ref,
        }
    }

    /// Current references for a PCC d-axis voltage, including the optional clamp.
    pub fn current_references(&self, p_ref: f64, v_d: f64) -> Result<(f64, f64), SimError> {
        let (mut i_d, mut i_q) = reference_currents(p_ref, self.control.q_ref, v_d, self.v_min())
            .map_err(|f| f.on(self.side))?;
        if self.control.current_limit {
            let limit = self.params.i_rated_peak();
            let mag = i_d.hypot(i_q);
            if mag > limit {
                let k = limit / mag;
                i_d *= k;
                i_q *= k;
            }
        }
        Ok((i_d, i_q))
    }

    pub fn evaluate(
        &self,
        v_pcc: Phasor,
        state: &ConverterState,
        v_dc: f64,
    ) -> Result<ConverterEval, SimError> {
        let omega = self.params.omega_nom;
        let (frame_angle, v_dq) = align_frame(v_pcc).map_err(|f| f.on(self.side))?;
        let i = DqPair::new(state.i_d, state.i_q, frame_angle);
        let e_source = internal_voltage(v_dq, i, &self.params, omega);
        let i_f = filter_current(e_source, i, &self.params, omega);
        let v_t = terminal_voltage(e_source, i_f, &self.params, omega);
        let (p_dc, i_dc) = dc_side(e_source, i, v_dc).map_err(|f| f.on(self.side))?;
        let pcc = three_phase_power(v_dq, i);

        let p_ref = self.power_reference(v_dc, state.pi_integral);
        let (i_d_ref, i_q_ref) = self.current_references(p_ref, v_dq.d)?;
        let (di_d, di_q) = current_lag_derivatives(state.i_d, state.i_q, i_d_ref, i_q_ref, self.control.t_f);
        let di_int = match self.control.mode {
            ControlMode::DcRegulation => pi_integral_rate(v_dc, &self.control),
            ControlMode::PqSetpoint => 0.0,
        };

        Ok(ConverterEval {
            frame_angle,
            v_dq,
            outputs: ConverterOutputs {
                e_source,
                i_f,
                v_t,
                p_dc,
                i_dc,
                p_pcc: pcc.p,
                q_pcc: pcc.q,
                p_dc_terminal: three_phase_power(v_t, i_f).p,
            },
            p_ref,
            i_d_ref,
            i_q_ref,
            rate: ConverterState {
                i_d: di_d,
                i_q: di_q,
                pi_integral: di_int,
            },
        })
    }

    /// Network-frame current this converter injects at its PCC.
    pub fn injected_current(state: &ConverterState, frame_angle: f64) -> Complex64 {
        Complex64::new(state.i_d, state.i_q) * Complex64::from_polar(1.0, frame_angle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor::to_dq;
    use std::f64::consts::PI;

    const V_NOM: f64 = 169.83;
    const OMEGA: f64 = 376.99;

    fn table_params() -> ConverterParams {
        ConverterParams {
            r_reactor: 0.001,
            l_reactor: 0.2e-3,
            c_filter: 50e-6,
            r_filter: 0.001,
            l_filter: 1e-3,
            s_rated: 50e3,
            v_ll_rms: 208.0,
            omega_nom: 2.0 * PI * 60.0,
        }
    }

    fn dq(d: f64, q: f64) -> DqPair {
        DqPair::new(d, q, 0.0)
    }

    fn close(a: DqPair, d: f64, q: f64, tol: f64) {
        assert!(
            (a.d - d).abs() <= tol && (a.q - q).abs() <= tol,
            "got ({}, {}), want ({d}, {q})",
            a.d,
            a.q
        );
    }

    #[test]
    fn frame_snaps_to_pcc_angle() {
        let (angle, v) = align_frame(Phasor::from_polar(V_NOM, (-5.0f64).to_radians())).unwrap();
        assert!((angle + 5.0f64.to_radians()).abs() < 1e-15);
        assert!((v.d - V_NOM).abs() < 1e-12);
        assert_eq!(v.q, 0.0);
        let (angle, _) = align_frame(Phasor::new(V_NOM, 0.0)).unwrap();
        assert_eq!(angle, 0.0);
        assert_eq!(align_frame(Phasor::ZERO), Err(ConverterFault::DeadBus));
    }

    #[test]
    fn internal_voltage_chain() {
        let p = table_params();
        close(internal_voltage(dq(V_NOM, 0.0), dq(0.0, 0.0), &p, OMEGA), V_NOM, 0.0, 0.0);
        close(internal_voltage(dq(V_NOM, 0.0), dq(176.65, 0.0), &p, OMEGA), 170.01, 13.32, 5e-3);
        close(internal_voltage(dq(V_NOM, 0.0), dq(0.0, -10.0), &p, OMEGA), 170.58, -0.01, 5e-3);
    }

    #[test]
    fn filter_current_chain() {
        let p = table_params();
        close(filter_current(dq(0.0, 0.0), dq(3.0, -4.0), &p, OMEGA), 3.0, -4.0, 0.0);
        close(filter_current(dq(170.01, 13.32), dq(176.65, 0.0), &p, OMEGA), 176.40, 3.20, 5e-3);
        close(filter_current(dq(170.0, 0.0), dq(0.0, 0.0), &p, OMEGA), 0.0, 3.204, 5e-4);
    }

    #[test]
    fn terminal_voltage_chain() {
        let p = table_params();
        close(terminal_voltage(dq(170.0, 2.0), dq(0.0, 0.0), &p, OMEGA), 170.0, 2.0, 0.0);
        close(terminal_voltage(dq(170.01, 13.32), dq(176.40, 3.20), &p, OMEGA), 168.98, 79.83, 1e-2);
        close(terminal_voltage(dq(170.0, 0.0), dq(0.0, 1.0), &p, OMEGA), 169.623, 0.001, 5e-4);
    }

    #[test]
    fn dc_side_power_and_current() {
        assert_eq!(dc_side(dq(170.0, 0.0), dq(0.0, 0.0), 600.0).unwrap(), (0.0, 0.0));
        let (p, i) = dc_side(dq(170.01, 13.32), dq(176.65, 0.0), 600.0).unwrap();
        assert!((p - 45_048.0).abs() < 1.0, "p = {p}");
        assert!((i - 75.08).abs() < 5e-3, "i = {i}");
        let (p, i) = dc_side(dq(170.0, 0.0), dq(-98.13, 0.0), 600.0).unwrap();
        assert!((p + 25_023.15).abs() < 0.01, "p = {p}");
        assert!((i + 41.705).abs() < 1e-3, "i = {i}");
        assert_eq!(p / 600.0, i);
    }

    #[test]
    fn dc_side_rejects_collapsed_link() {
        assert!(matches!(
            dc_side(dq(1.0, 0.0), dq(1.0, 0.0), 0.0),
            Err(ConverterFault::CollapsedDcLink { .. })
        ));
        assert!(dc_side(dq(1.0, 0.0), dq(1.0, 0.0), -5.0).is_err());
    }

    #[test]
    fn reference_currents_from_setpoints() {
        let (d, q) = reference_currents(45_000.0, 0.0, V_NOM, 17.0).unwrap();
        assert!((d - 176.65).abs() < 5e-3 && q == 0.0);
        assert_eq!(reference_currents(0.0, 0.0, 120.0, 17.0).unwrap(), (0.0, 0.0));
        let (d, q) = reference_currents(0.0, 1_000.0, V_NOM, 17.0).unwrap();
        assert!(d == 0.0 && (q + 3.925).abs() < 5e-4, "q = {q}");
    }

    #[test]
    fn reference_currents_refuse_low_voltage() {
        assert!(matches!(
            reference_currents(1.0, 0.0, 10.0, 16.983),
            Err(ConverterFault::LowVoltage { .. })
        ));
        assert!(reference_currents(1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn dc_pi_terms() {
        let cfg = ControlConfig::dc_regulation(700.0, 800.0, 0.005, 600.0, 0.0);
        assert_eq!(dc_voltage_pi(600.0, &cfg, 0.0), 0.0);
        assert_eq!(dc_voltage_pi(601.0, &cfg, 0.0), 700.0);
        assert_eq!(dc_voltage_pi(600.0, &cfg, 10.0), 8_000.0);
        assert_eq!(pi_integral_rate(598.0, &cfg), -2.0);
    }

    #[test]
    fn current_lag_rates() {
        assert_eq!(current_lag_derivatives(5.0, -2.0, 5.0, -2.0, 0.005), (0.0, 0.0));
        let (dd, dq_) = current_lag_derivatives(0.0, 0.0, 176.65, 0.0, 0.005);
        assert!((dd - 35_330.0).abs() < 1e-9 && dq_ == 0.0);
    }

    #[test]
    fn current_lag_step_response_reaches_63_percent() {
        // Closed form of the lag after one time constant.
        let expected = 100.0 * (1.0 - (-1.0f64).exp());
        assert!((expected - 63.21).abs() < 5e-3);
        // Fine explicit integration of the rate function converges to it.
        let (t_f, n) = (0.005, 100_000);
        let h = t_f / n as f64;
        let mut i = 0.0;
        for _ in 0..n {
            let k1 = current_lag_derivatives(i, 0.0, 100.0, 0.0, t_f).0;
            let k2 = current_lag_derivatives(i + h * k1, 0.0, 100.0, 0.0, t_f).0;
            i += 0.5 * h * (k1 + k2);
        }
        assert!((i - expected).abs() < 1e-6, "i = {i}");
    }

    #[test]
    fn evaluate_reports_reactor_loss_between_pcc_and_dc() {
        let conv = Converter::new(
            Side::Microgrid,
            table_params(),
            ControlConfig::pq_setpoint(0.005, 45e3, 2e3),
        )
        .unwrap();
        let st = ConverterState {
            i_d: 170.0,
            i_q: -8.0,
            pi_integral: 0.0,
        };
        let ev = conv.evaluate(Phasor::from_polar(V_NOM, 0.3), &st, 600.0).unwrap();
        let loss = 1.5 * 0.001 * (170.0f64.powi(2) + 8.0f64.powi(2));
        assert!(((ev.outputs.p_dc - ev.outputs.p_pcc) - loss).abs() <= 1e-6 * loss);
        assert_eq!(ev.outputs.i_dc * 600.0, ev.outputs.p_dc);
        assert!((ev.frame_angle - 0.3).abs() < 1e-15);
        assert_eq!(ev.v_dq.q, 0.0);
        assert_eq!(ev.rate.pi_integral, 0.0);
    }

    #[test]
    fn evaluate_gsc_runs_the_pi() {
        let conv = Converter::new(
            Side::Grid,
            table_params(),
            ControlConfig::dc_regulation(700.0, 800.0, 0.005, 600.0, 0.0),
        )
        .unwrap();
        let st = ConverterState {
            i_d: 0.0,
            i_q: 0.0,
            pi_integral: 10.0,
        };
        let ev = conv.evaluate(Phasor::new(V_NOM, 0.0), &st, 601.0).unwrap();
        assert_eq!(ev.p_ref, 8_700.0);
        assert!((ev.i_d_ref - 2.0 / 3.0 * 8_700.0 / V_NOM).abs() < 1e-12);
        assert_eq!(ev.rate.pi_integral, 1.0);
    }

    #[test]
    fn optional_current_clamp() {
        let mut cfg = ControlConfig::pq_setpoint(0.005, 80e3, 0.0);
        cfg.current_limit = true;
        let conv = Converter::new(Side::Microgrid, table_params(), cfg).unwrap();
        let (d, q) = conv.current_references(80e3, V_NOM).unwrap();
        assert!((d.hypot(q) - table_params().i_rated_peak()).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut p = table_params();
        p.c_filter = 0.0;
        assert!(p.validate(Side::Grid).is_err());
        let cfg = ControlConfig::pq_setpoint(0.0, 0.0, 0.0);
        assert!(cfg.validate(Side::Grid).is_err());
    }

    #[test]
    fn injected_current_rotates_into_network_frame() {
        let st = ConverterState {
            i_d: 10.0,
            i_q: 0.0,
            pi_integral: 0.0,
        };
        let i = Converter::injected_current(&st, PI / 2.0);
        assert!(i.re.abs() < 1e-12 && (i.im - 10.0).abs() < 1e-12);
        let back = to_dq(Phasor::from(i), PI / 2.0);
        assert!((back.d - 10.0).abs() < 1e-12);
    }
}
