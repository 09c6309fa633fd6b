//! Reference integrator for the same continuous-time model.
//!
//! Written separately from [`crate::engine`] and sharing none of its step
//! loop, network or converter code: the networks are reduced to Thevenin
//! equivalents at the PCC with nalgebra, the PLL angle comes from a closed
//! form, converter relations are written in complex form, and the states
//! are advanced with classical RK4 at a fine step. Agreement between the
//! two is therefore evidence that both implement the model correctly.
//!
//! The oracle checks integration and coupling accuracy of the phasor engine.
//! It has no switching ripple and is not an electromagnetic-transient model.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::engine::{StateVector, Trace};
use crate::error::SimError;
use crate::network::ShuntChange;
use crate::output::OutputRow;
use crate::scenario::{EventAction, InitMode, NetworkSpec, Scenario};
use crate::Side;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// RK4 step.
    pub dt_fine: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { dt_fine: 1e-5 }
    }
}

const SS_MAX_ITER: usize = 500;
const SS_TOL: f64 = 1e-12;
const SS_DAMPING: f64 = 0.8;

/// Thevenin view of one network at its PCC, plus its load list.
#[derive(Debug, Clone)]
struct Equivalent {
    spec: NetworkSpec,
    v_th: Complex64,
    z_th: Complex64,
}

impl Equivalent {
    fn new(side: Side, spec: &NetworkSpec) -> Result<Self, SimError> {
        let mut eq = Self {
            spec: spec.clone(),
            v_th: Complex64::new(0.0, 0.0),
            z_th: Complex64::new(0.0, 0.0),
        };
        eq.reduce(side)?;
        Ok(eq)
    }

    fn reduce(&mut self, side: Side) -> Result<(), SimError> {
        let s = &self.spec;
        let n = s.buses;
        let w = 2.0 * std::f64::consts::PI * s.frequency;
        let mut y = DMatrix::<Complex64>::zeros(n, n);
        for l in &s.lines {
            let ys = Complex64::new(l.r, w * l.l).inv();
            let half = Complex64::new(0.0, 0.5 * w * l.c);
            y[(l.from, l.from)] += ys + half;
            y[(l.to, l.to)] += ys + half;
            y[(l.from, l.to)] -= ys;
            y[(l.to, l.from)] -= ys;
        }
        let z_src = Complex64::new(s.source_r, w * s.source_l);
        y[(s.source_bus, s.source_bus)] += z_src.inv();
        for ld in &s.loads {
            y[(ld.bus, ld.bus)] += Complex64::new(ld.r, ld.x).inv();
        }
        let z = y.clone().try_inverse().ok_or(SimError::NetworkDegenerate {
            side,
            cond: f64::INFINITY,
        })?;
        let e_peak = s.source_v_ll_rms * (2.0f64 / 3.0).sqrt();
        let i_src = Complex64::from_polar(e_peak, s.source_angle) / z_src;
        self.v_th = z[(s.pcc_bus, s.source_bus)] * i_src;
        self.z_th = z[(s.pcc_bus, s.pcc_bus)];
        if !(self.v_th.is_finite() && self.z_th.is_finite()) {
            return Err(SimError::NetworkDegenerate {
                side,
                cond: f64::INFINITY,
            });
        }
        Ok(())
    }

    fn change(&mut self, side: Side, change: ShuntChange) -> Result<(), SimError> {
        let loads = &mut self.spec.loads;
        match change {
            ShuntChange::Add { bus, z } => loads.push(crate::scenario::LoadSpec { bus, r: z.re, x: z.im }),
            ShuntChange::Remove { bus, z } => {
                let pos = loads
                    .iter()
                    .position(|l| l.bus == bus && l.r == z.re && l.x == z.im)
                    .ok_or(SimError::ShuntNotFound { bus, z })?;
                loads.remove(pos);
            }
            ShuntChange::Replace { bus, z } => {
                loads.retain(|l| l.bus != bus);
                loads.push(crate::scenario::LoadSpec { bus, r: z.re, x: z.im });
            }
        }
        self.reduce(side)
    }

    /// PCC voltage magnitude and angle for a converter current `i`
    /// expressed in the frame aligned with that same voltage.
    fn pcc(&self, side: Side, i: Complex64) -> Result<(f64, f64), SimError> {
        let w = self.z_th * i;
        let rho = self.v_th.norm();
        let phi = self.v_th.arg();
        if rho == 0.0 || w.im.abs() > rho {
            return Err(SimError::DeadBus { side });
        }
        let s = w.im / rho;
        let mag = rho * (1.0 - s * s).sqrt() + w.re;
        if !(mag > 0.0) {
            return Err(SimError::DeadBus { side });
        }
        Ok((mag, phi + s.asin()))
    }
}

/// Setpoints and parameters as plain numbers.
#[derive(Debug, Clone, Copy)]
struct Setpoints {
    p_m: f64,
    q_m: f64,
    q_g: f64,
    v_dc_ref: f64,
}

#[derive(Debug, Clone)]
struct Model {
    grid: Equivalent,
    micro: Equivalent,
    z_g: Complex64,
    z_m: Complex64,
    i_max_g: f64,
    i_max_m: f64,
    v_min_g: f64,
    v_min_m: f64,
    k_p: f64,
    k_i: f64,
    t_f: f64,
    c_dc: f64,
    limit: bool,
    sp: Setpoints,
}

#[derive(Debug, Clone, Copy)]
struct Side3 {
    v_mag: f64,
    v_ang: f64,
    e: Complex64,
    p_dc: f64,
    p: f64,
    q: f64,
    i_ref: Complex64,
}

impl Model {
    fn new(s: &Scenario) -> Result<Self, SimError> {
        let conv = |p: &crate::converter::ConverterParams| {
            let v_peak = p.v_ll_rms * (2.0f64 / 3.0).sqrt();
            (
                Complex64::new(p.r_reactor, p.omega_nom * p.l_reactor),
                2.0 * p.s_rated / (3.0 * v_peak),
                s.control.low_voltage_fraction * v_peak,
            )
        };
        let (z_g, i_max_g, v_min_g) = conv(&s.gsc);
        let (z_m, i_max_m, v_min_m) = conv(&s.msc);
        Ok(Self {
            grid: Equivalent::new(Side::Grid, &s.grid)?,
            micro: Equivalent::new(Side::Microgrid, &s.microgrid)?,
            z_g,
            z_m,
            i_max_g,
            i_max_m,
            v_min_g,
            v_min_m,
            k_p: s.control.k_p,
            k_i: s.control.k_i,
            t_f: s.control.t_f,
            c_dc: s.dclink.c_dc,
            limit: s.control.current_limit,
            sp: Setpoints {
                p_m: s.control.p_m_ref,
                q_m: s.control.q_m_ref,
                q_g: s.control.q_g_ref,
                v_dc_ref: s.control.v_dc_ref,
            },
        })
    }

    fn apply(&mut self, action: EventAction) -> Result<(), SimError> {
        match action {
            EventAction::MscPRef(v) => self.sp.p_m = v,
            EventAction::MscQRef(v) => self.sp.q_m = v,
            EventAction::GscQRef(v) => self.sp.q_g = v,
            EventAction::GscVdcRef(v) => self.sp.v_dc_ref = v,
            EventAction::Load { side: Side::Grid, change } => self.grid.change(Side::Grid, change)?,
            EventAction::Load { side: Side::Microgrid, change } => self.micro.change(Side::Microgrid, change)?,
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn side(
        &self,
        side: Side,
        eq: &Equivalent,
        z: Complex64,
        i: Complex64,
        p_ref: f64,
        q_ref: f64,
        v_dc: f64,
        v_min: f64,
        i_max: f64,
    ) -> Result<Side3, SimError> {
        let (v_mag, v_ang) = eq.pcc(side, i)?;
        let e = v_mag + z * i;
        let p_dc = 1.5 * (e * i.conj()).re;
        let s_pcc = 1.5 * v_mag * i.conj();
        if !(v_mag >= v_min) {
            return Err(SimError::LowVoltage { side, v_d: v_mag, v_min });
        }
        if !(v_dc > 0.0) {
            return Err(SimError::CollapsedDcLink { v_dc });
        }
        let mut i_ref = Complex64::new(p_ref, -q_ref) * (2.0 / (3.0 * v_mag));
        if self.limit && i_ref.norm() > i_max {
            i_ref *= i_max / i_ref.norm();
        }
        Ok(Side3 {
            v_mag,
            v_ang,
            e,
            p_dc,
            p: s_pcc.re,
            q: s_pcc.im,
            i_ref,
        })
    }

    fn sides(&self, x: &StateVector) -> Result<(Side3, Side3), SimError> {
        let p_g = self.k_p * (x.v_dc - self.sp.v_dc_ref) + self.k_i * x.pi_integral;
        let g = self.side(
            Side::Grid,
            &self.grid,
            self.z_g,
            Complex64::new(x.i_g_d, x.i_g_q),
            p_g,
            self.sp.q_g,
            x.v_dc,
            self.v_min_g,
            self.i_max_g,
        )?;
        let m = self.side(
            Side::Microgrid,
            &self.micro,
            self.z_m,
            Complex64::new(x.i_m_d, x.i_m_q),
            self.sp.p_m,
            self.sp.q_m,
            x.v_dc,
            self.v_min_m,
            self.i_max_m,
        )?;
        Ok((g, m))
    }

    fn derivative(&self, x: &StateVector) -> Result<[f64; 6], SimError> {
        let (g, m) = self.sides(x)?;
        Ok([
            (g.i_ref.re - x.i_g_d) / self.t_f,
            (g.i_ref.im - x.i_g_q) / self.t_f,
            x.v_dc - self.sp.v_dc_ref,
            (m.i_ref.re - x.i_m_d) / self.t_f,
            (m.i_ref.im - x.i_m_q) / self.t_f,
            -(g.p_dc + m.p_dc) / (x.v_dc * self.c_dc),
        ])
    }

    fn row(&self, t: f64, x: &StateVector) -> Result<OutputRow, SimError> {
        let (g, m) = self.sides(x)?;
        let wrap = |a: f64| crate::phasor::wrap_angle(a);
        Ok(OutputRow {
            t,
            v_dc: x.v_dc,
            i_dc_g: g.p_dc / x.v_dc,
            i_dc_m: m.p_dc / x.v_dc,
            p_g: g.p,
            q_g: g.q,
            p_m: m.p,
            q_m: m.q,
            v_g_mag: g.v_mag,
            v_g_ang: wrap(g.v_ang),
            v_m_mag: m.v_mag,
            v_m_ang: wrap(m.v_ang),
            e_g_d: g.e.re,
            e_g_q: g.e.im,
            e_m_d: m.e.re,
            e_m_q: m.e.im,
        })
    }

    fn rk4(&self, x: &StateVector, h: f64) -> Result<StateVector, SimError> {
        let a = x.to_array();
        let at = |k: &[f64; 6], c: f64| StateVector::from_array(std::array::from_fn(|i| a[i] + c * k[i]));
        let k1 = self.derivative(x)?;
        let k2 = self.derivative(&at(&k1, 0.5 * h))?;
        let k3 = self.derivative(&at(&k2, 0.5 * h))?;
        let k4 = self.derivative(&at(&k3, h))?;
        Ok(StateVector::from_array(std::array::from_fn(|i| {
            a[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        })))
    }

    fn steady(&self) -> Result<StateVector, SimError> {
        let v_ref = self.sp.v_dc_ref;
        let hold = |p_g: f64| {
            if self.k_i > 0.0 {
                (v_ref, p_g / self.k_i)
            } else if self.k_p > 0.0 {
                (v_ref + p_g / self.k_p, 0.0)
            } else {
                (v_ref, 0.0)
            }
        };
        let mut x = StateVector {
            v_dc: v_ref,
            ..StateVector::default()
        };
        let mut p_g = 0.0;
        let mut residual = f64::INFINITY;
        for _ in 0..SS_MAX_ITER {
            let (g, m) = self.sides(&x)?;
            let mismatch = g.p_dc + m.p_dc;
            p_g -= SS_DAMPING * mismatch;
            let (v_dc, pi_integral) = hold(p_g);
            let next = StateVector {
                i_g_d: g.i_ref.re,
                i_g_q: g.i_ref.im,
                pi_integral,
                i_m_d: m.i_ref.re,
                i_m_q: m.i_ref.im,
                v_dc,
            };
            residual = next
                .to_array()
                .iter()
                .zip(x.to_array())
                .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
                .fold(mismatch.abs() / 1e3, f64::max);
            x = next;
            if residual < SS_TOL {
                return Ok(x);
            }
        }
        Err(SimError::SteadyStateNotConverged {
            iterations: SS_MAX_ITER,
            residual,
        })
    }
}

/// Algebraic steady state and the quantities logged at it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub state: StateVector,
    pub outputs: OutputRow,
}

/// Steady state for the setpoints in the scenario's `[control]` section,
/// ignoring its events.
pub fn steady_state(scenario: &Scenario) -> Result<SteadyState, SimError> {
    let model = Model::new(scenario)?;
    let state = model.steady()?;
    Ok(SteadyState {
        state,
        outputs: model.row(0.0, &state)?,
    })
}

/// Integrate the scenario with RK4 at `config.dt_fine`, logging on the same
/// time grid the engine would use.
pub fn run_fine(scenario: &Scenario, config: &OracleConfig) -> Result<Trace, SimError> {
    let sim = &scenario.simulation;
    let h = config.dt_fine;
    if !(h > 0.0 && h <= sim.dt / 10.0 * (1.0 + 1e-12)) {
        return Err(SimError::InvalidConfig(format!(
            "oracle step {h} s must be at most a tenth of the engine step {} s",
            sim.dt
        )));
    }
    let log_every = ((sim.dt * sim.log_stride as f64) / h).round() as u64;
    let n_steps = (sim.t_stop / h).round() as u64;
    let mut model = Model::new(scenario)?;
    let eps = 1e-9 * h;
    let mut next_event = 0;
    let apply_due = |model: &mut Model, t: f64, next_event: &mut usize| -> Result<(), SimError> {
        while let Some(e) = scenario.events.get(*next_event) {
            if t + eps < e.time {
                break;
            }
            model.apply(e.action)?;
            *next_event += 1;
        }
        Ok(())
    };
    apply_due(&mut model, 0.0, &mut next_event)?;
    let mut x = match sim.init_mode {
        InitMode::EquilibriumInit => model.steady()?,
        InitMode::ColdStart => StateVector {
            v_dc: scenario.dclink.v_dc_init.unwrap_or(model.sp.v_dc_ref),
            ..StateVector::default()
        },
    };
    let mut rows = vec![model.row(0.0, &x)?];
    for n in 0..n_steps {
        let t = n as f64 * h;
        apply_due(&mut model, t, &mut next_event)?;
        let next = model.rk4(&x, h)?;
        if !next.is_finite() {
            return Err(SimError::Divergence { t, last_good: x });
        }
        x = next;
        if (n + 1) % log_every == 0 {
            rows.push(model.row((n + 1) as f64 * h, &x)?);
        }
    }
    Ok(Trace { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_setpoints_steady_state() {
        let ss = steady_state(&Scenario::reference_50kva()).unwrap();
        assert!(ss.state.i_g_d.abs() < 1e-9 && ss.state.i_m_d.abs() < 1e-12);
        assert_eq!(ss.state.v_dc, 600.0);
    }

    #[test]
    fn power_balance_at_45_kw() {
        let mut s = Scenario::reference_50kva();
        s.control.p_m_ref = 45e3;
        let ss = steady_state(&s).unwrap();
        let o = ss.outputs;
        assert!((o.i_dc_m - 75.0).abs() < 0.5, "{}", o.i_dc_m);
        assert!((o.i_dc_g + o.i_dc_m).abs() < 1e-6);
        assert!(o.p_g < -45e3 && o.p_g > -46e3, "{}", o.p_g);
    }

    #[test]
    fn reversed_power() {
        let mut s = Scenario::reference_50kva();
        s.control.p_m_ref = -20e3;
        let o = steady_state(&s).unwrap().outputs;
        assert!((o.i_dc_m + 33.33).abs() < 0.3, "{}", o.i_dc_m);
        assert!(o.p_g > 0.0);
    }

    #[test]
    fn closed_form_angle_solves_network() {
        let eq = Equivalent::new(Side::Grid, &Scenario::reference_50kva().grid).unwrap();
        let i = Complex64::new(150.0, -40.0);
        let (mag, ang) = eq.pcc(Side::Grid, i).unwrap();
        let v = Complex64::from_polar(mag, ang);
        let back = eq.v_th + eq.z_th * i * Complex64::from_polar(1.0, ang);
        assert!((v - back).norm() < 1e-9);
    }

    #[test]
    fn rejects_coarse_step() {
        let s = Scenario::reference_50kva();
        assert!(run_fine(&s, &OracleConfig { dt_fine: 2e-4 }).is_err());
    }
}
