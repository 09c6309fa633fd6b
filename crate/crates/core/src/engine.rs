//! Fixed-step phasor simulation of the back-to-back converter.
//!
//! Each step applies the events that are due, evaluates the state
//! derivatives at `t` (network solve, PLL alignment, converter chain, DC
//! balance), takes an Euler predictor step, re-solves the networks and the
//! converter chain for the predicted state, and closes with the trapezoidal
//! corrector. That is Heun's method with the network algebra solved at
//! both stages.
//!
//! Network coupling: each converter is a Norton port behind its interface
//! reactor `z_c`, injecting `E / z_c` where `E = V + z_c I`. With the grid
//! current a state, the only unknown is the PLL angle that rotates `I` into
//! the network frame. It is found by Newton iteration on the misalignment
//! between the frame and the PCC voltage it produces, using the open-port
//! voltage and driving-point impedance of the network; the network is then
//! solved with the resulting injection and must reproduce that voltage.

use std::fmt;

use num_complex::Complex64;

use crate::converter::{ControlConfig, Converter, ConverterEval, ConverterState};
use crate::error::SimError;
use crate::network::{Branch, Network, PortId};
use crate::output::OutputRow;
use crate::phasor::{peak_phase_from_ll_rms, Phasor, SourceEquivalent};
use crate::scenario::{Event, EventAction, InitMode, NetworkSpec, Scenario};
use crate::Side;

const INTERFACE_MAX_ITER: usize = 100;
const INTERFACE_TOL: f64 = 1e-13;
const INIT_MAX_ITER: usize = 200;
const INIT_TOL: f64 = 1e-10;

/// All dynamic states, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateVector {
    pub i_g_d: f64,
    pub i_g_q: f64,
    /// Integral of `v_dc - v_dc_ref`, V s.
    pub pi_integral: f64,
    pub i_m_d: f64,
    pub i_m_q: f64,
    pub v_dc: f64,
}

impl StateVector {
    pub const LEN: usize = 6;
    pub const NAMES: [&'static str; 6] = ["i_g_d", "i_g_q", "pi_integral", "i_m_d", "i_m_q", "v_dc"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.i_g_d, self.i_g_q, self.pi_integral, self.i_m_d, self.i_m_q, self.v_dc]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            i_g_d: a[0],
            i_g_q: a[1],
            pi_integral: a[2],
            i_m_d: a[3],
            i_m_q: a[4],
            v_dc: a[5],
        }
    }

    /// `self + h * rate`.
    pub fn advanced(&self, h: f64, rate: &StateVector) -> Self {
        let (a, b) = (self.to_array(), rate.to_array());
        Self::from_array(std::array::from_fn(|k| a[k] + h * b[k]))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn gsc(&self) -> ConverterState {
        ConverterState {
            i_d: self.i_g_d,
            i_q: self.i_g_q,
            pi_integral: self.pi_integral,
        }
    }

    pub fn msc(&self) -> ConverterState {
        ConverterState {
            i_d: self.i_m_d,
            i_q: self.i_m_q,
            pi_integral: 0.0,
        }
    }

    /// Largest absolute component difference.
    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, v)) in Self::NAMES.iter().zip(self.to_array()).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{name} = {v}")?;
        }
        Ok(())
    }
}

/// One AC network with its converter port.
#[derive(Debug, Clone)]
struct NetSide {
    side: Side,
    net: Network,
    port: PortId,
    pcc: usize,
    z_c: Complex64,
    /// PCC voltage with no port injection.
    v_open: Complex64,
    /// `y_c` times the driving-point impedance at the PCC.
    g: Complex64,
    y_c: Complex64,
    /// `v_open / (1 - g)`: PCC voltage term independent of the converter.
    v_base: Complex64,
    /// `g z_c / (1 - g)`: PCC voltage per unit converter current.
    k: Complex64,
    /// Last PLL angle, used as the next starting guess, and its unit phasor.
    theta: f64,
    unit: Complex64,
}

impl NetSide {
    fn build(side: Side, spec: &NetworkSpec, z_c: Complex64) -> Result<Self, SimError> {
        let omega = spec.omega();
        let mut net = Network::new(side, spec.buses)?;
        for l in &spec.lines {
            net.add_branch(Branch {
                from: l.from,
                to: l.to,
                z: Complex64::new(l.r, omega * l.l),
                y_shunt: Complex64::new(0.0, omega * l.c),
            })?;
        }
        let e = Phasor::from_polar(peak_phase_from_ll_rms(spec.source_v_ll_rms), spec.source_angle);
        let z_s = Complex64::new(spec.source_r, omega * spec.source_l);
        net.attach_source(spec.source_bus, SourceEquivalent::from_thevenin(e, z_s)?)?;
        for ld in &spec.loads {
            net.update_admittance(crate::network::ShuntChange::Add { bus: ld.bus, z: ld.z() })?;
        }
        let port = net.attach_port(spec.pcc_bus, z_c)?;
        let mut s = Self {
            side,
            net,
            port,
            pcc: spec.pcc_bus,
            z_c,
            v_open: Complex64::new(0.0, 0.0),
            g: Complex64::new(0.0, 0.0),
            y_c: z_c.inv(),
            v_base: Complex64::new(0.0, 0.0),
            k: Complex64::new(0.0, 0.0),
            theta: 0.0,
            unit: Complex64::new(1.0, 0.0),
        };
        s.refresh()?;
        s.theta = s.v_open.arg();
        s.unit = Complex64::from_polar(1.0, s.theta);
        Ok(s)
    }

    /// Recompute the open-port voltage and port coupling after a topology
    /// or load change.
    fn refresh(&mut self) -> Result<(), SimError> {
        self.net.set_port_current(self.port, Complex64::new(0.0, 0.0));
        self.v_open = self.net.solve_bus(self.pcc)?;
        let z_port = self.net.driving_point_impedance(self.pcc)?;
        self.g = z_port / self.z_c;
        if (Complex64::new(1.0, 0.0) - self.g).norm() < 1e-12 {
            return Err(SimError::NetworkDegenerate {
                side: self.side,
                cond: f64::INFINITY,
            });
        }
        let one = Complex64::new(1.0, 0.0);
        self.v_base = self.v_open / (one - self.g);
        self.k = self.g * self.z_c / (one - self.g);
        Ok(())
    }

    /// PCC voltage for a converter current given in its own (PLL) frame.
    fn solve(&mut self, i_d: f64, i_q: f64) -> Result<Phasor, SimError> {
        let i_conv = Complex64::new(i_d, i_q);
        let base = self.v_base;
        if base.norm_sqr() == 0.0 {
            return Err(SimError::DeadBus { side: self.side });
        }
        // Newton on h(theta) = Im(V(theta) e^{-j theta}), zero when the
        // frame is aligned with the voltage it produces. The frame is
        // carried as a unit phasor so small corrections need no trig.
        let drop_q = (self.k * i_conv).im;
        let mut theta = self.theta;
        let mut unit = self.unit;
        let mut converged = false;
        let mut h = f64::NAN;
        for _ in 0..INTERFACE_MAX_ITER {
            let rotated = base * unit.conj();
            h = rotated.im + drop_q;
            let slope = -rotated.re;
            if slope == 0.0 || !slope.is_finite() {
                break;
            }
            let delta = h / slope;
            theta -= delta;
            unit *= unit_rotation(-delta);
            if delta.abs() <= INTERFACE_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SimError::InterfaceNotConverged {
                side: self.side,
                residual: h.abs(),
            });
        }
        unit /= unit.norm_sqr().sqrt();
        let i_net = i_conv * unit;
        let v = base + self.k * i_net;
        let e = v + self.z_c * i_net;
        self.net.set_port_current(self.port, e * self.y_c);
        let solved = self.net.solve_bus(self.pcc)?;
        if (solved - v).norm_sqr() > 1e-18 * v.norm_sqr().max(1.0) {
            return Err(SimError::InterfaceNotConverged {
                side: self.side,
                residual: (solved - v).norm(),
            });
        }
        self.unit = unit;
        self.theta = theta;
        Ok(solved.into())
    }
}

/// `e^{j a}`, by series for the small corrections of a converging Newton
/// iteration.
fn unit_rotation(a: f64) -> Complex64 {
    if a.abs() < 1e-3 {
        let a2 = a * a;
        Complex64::new(
            1.0 - a2 / 2.0 * (1.0 - a2 / 12.0 * (1.0 - a2 / 30.0)),
            a * (1.0 - a2 / 6.0 * (1.0 - a2 / 20.0)),
        )
    } else {
        Complex64::from_polar(1.0, a)
    }
}

/// Everything computed at one state: both converter chains, PCC voltages
/// and the state derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub gsc: ConverterEval,
    pub msc: ConverterEval,
    pub v_g: Phasor,
    pub v_m: Phasor,
    pub rate: StateVector,
}

impl Evaluation {
    pub fn row(&self, t: f64, v_dc: f64) -> OutputRow {
        let (g, m) = (&self.gsc.outputs, &self.msc.outputs);
        OutputRow {
            t,
            v_dc,
            i_dc_g: g.i_dc,
            i_dc_m: m.i_dc,
            p_g: g.p_pcc,
            q_g: g.q_pcc,
            p_m: m.p_pcc,
            q_m: m.q_pcc,
            v_g_mag: self.v_g.magnitude(),
            v_g_ang: self.v_g.angle(),
            v_m_mag: self.v_m.magnitude(),
            v_m_ang: self.v_m.angle(),
            e_g_d: g.e_source.d,
            e_g_q: g.e_source.q,
            e_m_d: m.e_source.d,
            e_m_q: m.e_source.q,
        }
    }
}

/// Logged rows of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<OutputRow>,
}

impl Trace {
    pub fn column(&self, f: impl Fn(&OutputRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn last(&self) -> Option<&OutputRow> {
        self.rows.last()
    }

    /// Row closest to time `t`.
    pub fn at(&self, t: f64) -> Option<&OutputRow> {
        self.rows
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

/// A run that stopped on an error, with the rows logged before it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: SimError,
    pub partial: Trace,
}

/// A scenario being integrated.
#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    gsc: Converter,
    msc: Converter,
    grid: NetSide,
    microgrid: NetSide,
    c_dc: f64,
    state: StateVector,
    step_index: u64,
    next_event: usize,
    /// Evaluation at (`time()`, `state`), valid until an event or a state change.
    cached: Option<Evaluation>,
}

impl Simulation {
    /// Build the networks and converters, apply events at `t <= 0` and
    /// initialize the state as the scenario requests.
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate().map_err(SimError::InvalidConfig)?;
        let c = &scenario.control;
        let gsc = Converter::new(
            Side::Grid,
            scenario.gsc,
            ControlConfig {
                current_limit: c.current_limit,
                low_voltage_fraction: c.low_voltage_fraction,
                ..ControlConfig::dc_regulation(c.k_p, c.k_i, c.t_f, c.v_dc_ref, c.q_g_ref)
            },
        )?;
        let msc = Converter::new(
            Side::Microgrid,
            scenario.msc,
            ControlConfig {
                current_limit: c.current_limit,
                low_voltage_fraction: c.low_voltage_fraction,
                ..ControlConfig::pq_setpoint(c.t_f, c.p_m_ref, c.q_m_ref)
            },
        )?;
        if !(scenario.dclink.c_dc > 0.0) {
            return Err(SimError::InvalidConfig("c_dc must be positive".into()));
        }
        let grid = NetSide::build(Side::Grid, &scenario.grid, scenario.gsc.z_reactor())?;
        let microgrid = NetSide::build(Side::Microgrid, &scenario.microgrid, scenario.msc.z_reactor())?;
        let mut sim = Self {
            scenario: scenario.clone(),
            gsc,
            msc,
            grid,
            microgrid,
            c_dc: scenario.dclink.c_dc,
            state: StateVector::default(),
            step_index: 0,
            next_event: 0,
            cached: None,
        };
        sim.apply_due_events()?;
        sim.state = match scenario.simulation.init_mode {
            InitMode::EquilibriumInit => sim.equilibrium()?,
            InitMode::ColdStart => StateVector {
                v_dc: scenario.dclink.v_dc_init.unwrap_or(sim.gsc.control.v_dc_ref),
                ..StateVector::default()
            },
        };
        sim.cached = None;
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> StateVector {
        self.state
    }

    /// Replace the state, e.g. to start from a perturbed point.
    pub fn set_state(&mut self, state: StateVector) {
        self.state = state;
        self.cached = None;
    }

    pub fn dt(&self) -> f64 {
        self.scenario.simulation.dt
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.dt()
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn converter(&self, side: Side) -> &Converter {
        match side {
            Side::Grid => &self.gsc,
            Side::Microgrid => &self.msc,
        }
    }

    /// Apply an event immediately, outside the scenario's schedule.
    pub fn apply_event(&mut self, action: EventAction) -> Result<(), SimError> {
        match action {
            EventAction::MscPRef(p) => self.msc.control.p_ref = p,
            EventAction::MscQRef(q) => self.msc.control.q_ref = q,
            EventAction::GscQRef(q) => self.gsc.control.q_ref = q,
            EventAction::GscVdcRef(v) => self.gsc.control.v_dc_ref = v,
            EventAction::Load { side, change } => {
                let ns = match side {
                    Side::Grid => &mut self.grid,
                    Side::Microgrid => &mut self.microgrid,
                };
                ns.net.update_admittance(change)?;
                ns.refresh()?;
            }
        }
        self.cached = None;
        Ok(())
    }

    fn apply_due_events(&mut self) -> Result<(), SimError> {
        let t = self.time();
        let eps = 1e-9 * self.dt();
        while let Some(&Event { time, action }) = self.scenario.events.get(self.next_event) {
            if t + eps < time {
                break;
            }
            self.apply_event(action)?;
            self.next_event += 1;
        }
        Ok(())
    }

    /// Network solve, PLL alignment, converter chains and derivatives at `x`.
    pub fn evaluate(&mut self, x: &StateVector) -> Result<Evaluation, SimError> {
        let v_g = self.grid.solve(x.i_g_d, x.i_g_q)?;
        let v_m = self.microgrid.solve(x.i_m_d, x.i_m_q)?;
        let gsc = self.gsc.evaluate(v_g, &x.gsc(), x.v_dc)?;
        let msc = self.msc.evaluate(v_m, &x.msc(), x.v_dc)?;
        let dv_dc = -(gsc.outputs.i_dc + msc.outputs.i_dc) / self.c_dc;
        Ok(Evaluation {
            gsc,
            msc,
            v_g,
            v_m,
            rate: StateVector {
                i_g_d: gsc.rate.i_d,
                i_g_q: gsc.rate.i_q,
                pi_integral: gsc.rate.pi_integral,
                i_m_d: msc.rate.i_d,
                i_m_q: msc.rate.i_q,
                v_dc: dv_dc,
            },
        })
    }

    /// Evaluation at the present time and state.
    pub fn current(&mut self) -> Result<Evaluation, SimError> {
        match self.cached {
            Some(e) => Ok(e),
            None => {
                let x = self.state;
                let e = self.evaluate(&x)?;
                self.cached = Some(e);
                Ok(e)
            }
        }
    }

    pub fn current_row(&mut self) -> Result<OutputRow, SimError> {
        let e = self.current()?;
        Ok(e.row(self.time(), self.state.v_dc))
    }

    fn divergence(&self) -> SimError {
        SimError::Divergence {
            t: self.time(),
            last_good: self.state,
        }
    }

    /// Advance one step of length `dt`.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.apply_due_events()?;
        let dt = self.dt();
        let x = self.state;
        let f = self.current()?;
        if !f.rate.is_finite() {
            return Err(self.divergence());
        }
        let predicted = x.advanced(dt, &f.rate);
        if !predicted.is_finite() {
            return Err(self.divergence());
        }
        let f_pred = self.evaluate(&predicted)?;
        let avg = StateVector::from_array(std::array::from_fn(|k| {
            0.5 * (f.rate.to_array()[k] + f_pred.rate.to_array()[k])
        }));
        let next = x.advanced(dt, &avg);
        if !next.is_finite() {
            return Err(self.divergence());
        }
        self.state = next;
        self.step_index += 1;
        // final solve at the corrected state; reused as f(t) next step
        self.cached = None;
        self.current()?;
        Ok(())
    }

    /// Run to `t_stop`, handing every logged row to `sink`.
    pub fn run_with(&mut self, mut sink: impl FnMut(&OutputRow)) -> Result<(), SimError> {
        let sim = self.scenario.simulation;
        let stride = sim.log_stride as u64;
        let n_steps = sim.n_steps();
        if self.step_index == 0 {
            sink(&self.current_row()?);
        }
        while self.step_index < n_steps {
            self.step()?;
            if self.step_index % stride == 0 {
                sink(&self.current_row()?);
            }
        }
        Ok(())
    }

    /// Run to `t_stop` and collect the log.
    pub fn run(&mut self) -> Result<Trace, RunFailure> {
        let mut rows = Vec::with_capacity((self.scenario.simulation.n_steps() / self.scenario.simulation.log_stride as u64 + 1) as usize);
        match self.run_with(|r| rows.push(*r)) {
            Ok(()) => Ok(Trace { rows }),
            Err(error) => Err(RunFailure {
                error,
                partial: Trace { rows },
            }),
        }
    }

    /// Algebraic steady state for the setpoints in force: currents at their
    /// references, `v_dc` at its reference and the PI integral loaded with
    /// the power that balances the DC link.
    fn equilibrium(&mut self) -> Result<StateVector, SimError> {
        let (k_p, k_i, v_ref) = (self.gsc.control.k_p, self.gsc.control.k_i, self.gsc.control.v_dc_ref);
        let hold = |p_g: f64| -> (f64, f64) {
            if k_i > 0.0 {
                (v_ref, p_g / k_i)
            } else if k_p > 0.0 {
                (v_ref + p_g / k_p, 0.0)
            } else {
                (v_ref, 0.0)
            }
        };
        let mut p_g = 0.0;
        let mut x = StateVector {
            v_dc: v_ref,
            ..StateVector::default()
        };
        let mut residual = f64::INFINITY;
        for _ in 0..INIT_MAX_ITER {
            let e = self.evaluate(&x)?;
            p_g -= e.gsc.outputs.p_dc + e.msc.outputs.p_dc;
            let (v_dc, pi_integral) = hold(p_g);
            let e = self.evaluate(&StateVector { v_dc, pi_integral, ..x })?;
            let next = StateVector {
                i_g_d: e.gsc.i_d_ref,
                i_g_q: e.gsc.i_q_ref,
                pi_integral,
                i_m_d: e.msc.i_d_ref,
                i_m_q: e.msc.i_q_ref,
                v_dc,
            };
            residual = next.max_abs_diff(&x);
            x = next;
            if residual < INIT_TOL {
                return Ok(x);
            }
        }
        Err(SimError::InitNotConverged {
            iterations: INIT_MAX_ITER,
            residual,
        })
    }
}
