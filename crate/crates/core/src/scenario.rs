//! Scenario description and its flat INI-style text format.
//!
//! ```text
//! # comment
//! [gsc]
//! r_g  = 0.001 ohm
//! l_g  = 0.2 mH
//!
//! [events]
//! msc.p_ref = 45 kW @ 7 s
//! ```
//!
//! Every value is SI unless it carries one of the unit suffixes accepted
//! for its key (`mH`, `uF`, `kW`, `ms`, `deg`, ...). Unknown sections, unknown
//! keys, missing keys, wrong units, non-positive physical parameters and
//! out-of-order events are rejected with the line and column of the
//! offending text. Defaults exist only for the keys marked optional in
//! [`KEYS`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::path::Path;

use num_complex::Complex64;

use crate::converter::{ConverterParams, DEFAULT_LOW_VOLTAGE_FRACTION};
use crate::network::ShuntChange;
use crate::Side;

/// Topology and source of one AC network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub frequency: f64,
    pub buses: usize,
    pub pcc_bus: usize,
    pub source_bus: usize,
    pub source_v_ll_rms: f64,
    /// Source angle, rad.
    pub source_angle: f64,
    pub source_r: f64,
    pub source_l: f64,
    pub lines: Vec<LineSpec>,
    pub loads: Vec<LoadSpec>,
}

impl NetworkSpec {
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency
    }
}

/// Pi-section line: series `r + j omega l`, total shunt capacitance `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
    pub c: f64,
}

/// Constant-impedance shunt load `r + jx` ohms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadSpec {
    pub bus: usize,
    pub r: f64,
    pub x: f64,
}

impl LoadSpec {
    pub fn z(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcLinkSpec {
    pub c_dc: f64,
    /// Initial voltage for cold starts; `v_dc_ref` when absent.
    pub v_dc_init: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSpec {
    pub k_p: f64,
    pub k_i: f64,
    pub t_f: f64,
    pub v_dc_ref: f64,
    pub p_m_ref: f64,
    pub q_m_ref: f64,
    pub q_g_ref: f64,
    pub current_limit: bool,
    pub low_voltage_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Start from the algebraic steady state of the t = 0 setpoints.
    EquilibriumInit,
    /// Zero currents and integrator, `v_dc = v_dc_init`.
    ColdStart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_stop: f64,
    pub log_stride: usize,
    pub init_mode: InitMode,
}

impl SimulationConfig {
    pub fn n_steps(&self) -> u64 {
        (self.t_stop / self.dt).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventAction {
    MscPRef(f64),
    MscQRef(f64),
    GscQRef(f64),
    GscVdcRef(f64),
    Load { side: Side, change: ShuntChange },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: NetworkSpec,
    pub microgrid: NetworkSpec,
    pub gsc: ConverterParams,
    pub msc: ConverterParams,
    pub dclink: DcLinkSpec,
    pub control: ControlSpec,
    pub simulation: SimulationConfig,
    pub events: Vec<Event>,
}

impl Scenario {
    /// 50 kVA, 208 V back-to-back unit between two stiff 208 V sources,
    /// 600 V DC link, no events, 20 s horizon at 1 ms.
    pub fn reference_50kva() -> Self {
        let net = NetworkSpec {
            frequency: 60.0,
            buses: 1,
            pcc_bus: 0,
            source_bus: 0,
            source_v_ll_rms: 208.0,
            source_angle: 0.0,
            source_r: 0.001,
            source_l: 0.2e-3,
            lines: Vec::new(),
            loads: Vec::new(),
        };
        let conv = ConverterParams {
            r_reactor: 0.001,
            l_reactor: 0.2e-3,
            c_filter: 50e-6,
            r_filter: 0.001,
            l_filter: 1e-3,
            s_rated: 50e3,
            v_ll_rms: 208.0,
            omega_nom: net.omega(),
        };
        Self {
            grid: net.clone(),
            microgrid: net,
            gsc: conv,
            msc: conv,
            dclink: DcLinkSpec {
                c_dc: 5000e-6,
                v_dc_init: None,
            },
            control: ControlSpec {
                k_p: 700.0,
                k_i: 800.0,
                t_f: 0.005,
                v_dc_ref: 600.0,
                p_m_ref: 0.0,
                q_m_ref: 0.0,
                q_g_ref: 0.0,
                current_limit: false,
                low_voltage_fraction: DEFAULT_LOW_VOLTAGE_FRACTION,
            },
            simulation: SimulationConfig {
                dt: 1e-3,
                t_stop: 20.0,
                log_stride: 1,
                init_mode: InitMode::EquilibriumInit,
            },
            events: Vec::new(),
        }
    }

    pub fn network(&self, side: Side) -> &NetworkSpec {
        match side {
            Side::Grid => &self.grid,
            Side::Microgrid => &self.microgrid,
        }
    }

    pub fn converter(&self, side: Side) -> &ConverterParams {
        match side {
            Side::Grid => &self.gsc,
            Side::Microgrid => &self.msc,
        }
    }

    /// Push a timed MSC active-power setpoint change.
    pub fn with_msc_power_step(mut self, time: f64, p: f64) -> Self {
        self.events.push(Event {
            time,
            action: EventAction::MscPRef(p),
        });
        self
    }

    /// The same scenario with every event folded into the initial setpoints
    /// and load lists, so a steady-state solve sees what is in force at the end.
    pub fn final_setpoints(&self) -> Scenario {
        let mut out = self.clone();
        for e in &self.events {
            match e.action {
                EventAction::MscPRef(p) => out.control.p_m_ref = p,
                EventAction::MscQRef(q) => out.control.q_m_ref = q,
                EventAction::GscQRef(q) => out.control.q_g_ref = q,
                EventAction::GscVdcRef(v) => out.control.v_dc_ref = v,
                EventAction::Load { side, change } => {
                    let loads = match side {
                        Side::Grid => &mut out.grid.loads,
                        Side::Microgrid => &mut out.microgrid.loads,
                    };
                    match change {
                        ShuntChange::Add { bus, z } => loads.push(LoadSpec { bus, r: z.re, x: z.im }),
                        ShuntChange::Remove { bus, z } => {
                            if let Some(i) = loads.iter().position(|l| l.bus == bus && l.z() == z) {
                                loads.remove(i);
                            }
                        }
                        ShuntChange::Replace { bus, z } => {
                            loads.retain(|l| l.bus != bus);
                            loads.push(LoadSpec { bus, r: z.re, x: z.im });
                        }
                    }
                }
            }
        }
        out.events.clear();
        out
    }

    /// Semantic checks that do not depend on where the values came from.
    pub fn validate(&self) -> Result<(), String> {
        let sim = &self.simulation;
        if !(sim.dt > 0.0 && sim.dt <= 0.01) {
            return Err(format!("dt must be in (0, 0.01] s, got {}", sim.dt));
        }
        if !(sim.t_stop > 0.0 && sim.t_stop.is_finite()) {
            return Err(format!("t_stop must be positive, got {}", sim.t_stop));
        }
        if sim.log_stride == 0 {
            return Err("log_stride must be at least 1".into());
        }
        for side in [Side::Grid, Side::Microgrid] {
            let net = self.network(side);
            if net.buses == 0 {
                return Err(format!("{side} network needs at least one bus"));
            }
            for (what, bus) in [("pcc_bus", net.pcc_bus), ("source_bus", net.source_bus)] {
                if bus >= net.buses {
                    return Err(format!("{side} {what} {bus} out of range for {} buses", net.buses));
                }
            }
            for l in &net.lines {
                if l.from >= net.buses || l.to >= net.buses || l.from == l.to {
                    return Err(format!("{side} line {}-{} is invalid", l.from, l.to));
                }
            }
            for ld in &net.loads {
                if ld.bus >= net.buses {
                    return Err(format!("{side} load bus {} out of range", ld.bus));
                }
            }
            let omega = self.converter(side).omega_nom;
            if (omega - net.omega()).abs() > 1e-9 * omega {
                return Err(format!(
                    "{side} converter frequency {omega} rad/s differs from its network"
                ));
            }
        }
        for w in self.events.windows(2) {
            if w[1].time < w[0].time {
                return Err(format!("events out of order: {} s after {} s", w[1].time, w[0].time));
            }
        }
        Ok(())
    }

    /// Non-fatal remarks about a valid scenario.
    pub fn warnings(&self) -> Vec<String> {
        let sim = &self.simulation;
        let mut out = Vec::new();
        let on_grid = |t: f64| ((t / sim.dt) - (t / sim.dt).round()).abs() < 1e-6;
        if !on_grid(sim.t_stop) {
            out.push(format!("t_stop {} s is not a multiple of dt {} s", sim.t_stop, sim.dt));
        }
        if sim.n_steps() % sim.log_stride as u64 != 0 {
            out.push("the final step is not a multiple of log_stride and will not be logged".into());
        }
        for e in &self.events {
            if !on_grid(e.time) {
                out.push(format!("event at {} s falls between steps; it applies at the next step", e.time));
            }
            if e.time > sim.t_stop {
                out.push(format!("event at {} s is after t_stop", e.time));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioErrorKind {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("duplicate key `{key}` in [{section}]")]
    DuplicateKey { section: String, key: String },
    #[error("missing required key `{key}` in [{section}]")]
    MissingKey { section: String, key: String },
    #[error("`{key}`: unit `{unit}` is not a valid {expected} unit")]
    BadUnit {
        key: String,
        unit: String,
        expected: &'static str,
    },
    #[error("`{key}`: cannot parse `{text}`")]
    BadValue { key: String, text: String },
    #[error("`{key}` must be {requirement}, got {value}")]
    OutOfRange {
        key: String,
        value: f64,
        requirement: &'static str,
    },
    #[error("events out of order: {later} s is listed after {earlier} s")]
    UnsortedEvents { earlier: f64, later: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Scenario problem with the 1-based line and column where it was found
/// (`0` when the problem has no single location, e.g. a missing section).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}, column {column}: {kind}")]
pub struct ScenarioError {
    pub line: usize,
    pub column: usize,
    pub kind: ScenarioErrorKind,
}

impl ScenarioError {
    fn at(line: usize, column: usize, kind: ScenarioErrorKind) -> Self {
        Self { line, column, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Resistance,
    Inductance,
    Capacitance,
    Voltage,
    Power,
    ReactivePower,
    ApparentPower,
    Time,
    Frequency,
    Angle,
    PropGain,
    IntGain,
    Ratio,
}

/// Decimal sub-unit prefixes divide so that "50 uF" lands on the nearest
/// double to 5e-5.
fn scaled(n: f64, scale: f64) -> f64 {
    let inv = (1.0 / scale).round();
    if scale < 1.0 && inv.log10().fract() == 0.0 {
        n / inv
    } else {
        n * scale
    }
}

impl Dim {
    fn name(self) -> &'static str {
        match self {
            Dim::Resistance => "resistance",
            Dim::Inductance => "inductance",
            Dim::Capacitance => "capacitance",
            Dim::Voltage => "voltage",
            Dim::Power => "active power",
            Dim::ReactivePower => "reactive power",
            Dim::ApparentPower => "apparent power",
            Dim::Time => "time",
            Dim::Frequency => "frequency",
            Dim::Angle => "angle",
            Dim::PropGain => "W/V gain",
            Dim::IntGain => "W/(V s) gain",
            Dim::Ratio => "dimensionless",
        }
    }

    fn scale(self, unit: &str) -> Option<f64> {
        if unit.is_empty() {
            return Some(1.0);
        }
        let s = match (self, unit) {
            (Dim::Resistance, "ohm" | "Ohm" | "Ω") => 1.0,
            (Dim::Resistance, "mohm" | "mΩ") => 1e-3,
            (Dim::Resistance, "kohm" | "kΩ") => 1e3,
            (Dim::Inductance, "H") => 1.0,
            (Dim::Inductance, "mH") => 1e-3,
            (Dim::Inductance, "uH" | "µH" | "μH") => 1e-6,
            (Dim::Capacitance, "F") => 1.0,
            (Dim::Capacitance, "mF") => 1e-3,
            (Dim::Capacitance, "uF" | "µF" | "μF") => 1e-6,
            (Dim::Capacitance, "nF") => 1e-9,
            (Dim::Voltage, "V") => 1.0,
            (Dim::Voltage, "kV") => 1e3,
            (Dim::Voltage, "mV") => 1e-3,
            (Dim::Power, "W") => 1.0,
            (Dim::Power, "kW") => 1e3,
            (Dim::Power, "MW") => 1e6,
            (Dim::ReactivePower, "var") => 1.0,
            (Dim::ReactivePower, "kvar") => 1e3,
            (Dim::ReactivePower, "Mvar") => 1e6,
            (Dim::ApparentPower, "VA") => 1.0,
            (Dim::ApparentPower, "kVA") => 1e3,
            (Dim::ApparentPower, "MVA") => 1e6,
            (Dim::Time, "s") => 1.0,
            (Dim::Time, "ms") => 1e-3,
            (Dim::Time, "us" | "µs" | "μs") => 1e-6,
            (Dim::Frequency, "Hz") => 1.0,
            (Dim::Angle, "rad") => 1.0,
            (Dim::Angle, "deg") => PI / 180.0,
            (Dim::PropGain, "W/V") => 1.0,
            (Dim::IntGain, "W/(V.s)" | "W/(V*s)" | "W/(V·s)" | "W/V/s") => 1.0,
            _ => return None,
        };
        Some(s)
    }

    fn base_unit(self) -> &'static str {
        match self {
            Dim::Resistance => "ohm",
            Dim::Inductance => "H",
            Dim::Capacitance => "F",
            Dim::Voltage => "V",
            Dim::Power => "W",
            Dim::ReactivePower => "var",
            Dim::ApparentPower => "VA",
            Dim::Time => "s",
            Dim::Frequency => "Hz",
            Dim::Angle => "rad",
            Dim::PropGain => "W/V",
            Dim::IntGain => "W/(V.s)",
            Dim::Ratio => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Quantity(Dim),
    Count,
    Flag,
    InitMode,
    /// `from to r l [c]`, repeatable.
    Line,
    /// `bus r x`, repeatable.
    Load,
}

/// One documented key of the scenario format.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    /// Default in SI units, rendered as text; `None` means required.
    pub default: Option<&'static str>,
    kind: Kind,
}

const fn k(section: &'static str, key: &'static str, kind: Kind, default: Option<&'static str>) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        kind,
    }
}

const NETWORK_KEYS: [(&str, Kind, Option<&str>); 10] = [
    ("frequency", Kind::Quantity(Dim::Frequency), Some("60")),
    ("buses", Kind::Count, Some("1")),
    ("pcc_bus", Kind::Count, Some("0")),
    ("source_bus", Kind::Count, Some("0")),
    ("source_v_ll_rms", Kind::Quantity(Dim::Voltage), None),
    ("source_angle", Kind::Quantity(Dim::Angle), Some("0")),
    ("source_r", Kind::Quantity(Dim::Resistance), None),
    ("source_l", Kind::Quantity(Dim::Inductance), None),
    ("line", Kind::Line, Some("")),
    ("load", Kind::Load, Some("")),
];

/// Every key accepted in a scenario file, with its default.
pub const KEYS: &[KeySpec] = &[
    k("grid_network", NETWORK_KEYS[0].0, NETWORK_KEYS[0].1, NETWORK_KEYS[0].2),
    k("grid_network", NETWORK_KEYS[1].0, NETWORK_KEYS[1].1, NETWORK_KEYS[1].2),
    k("grid_network", NETWORK_KEYS[2].0, NETWORK_KEYS[2].1, NETWORK_KEYS[2].2),
    k("grid_network", NETWORK_KEYS[3].0, NETWORK_KEYS[3].1, NETWORK_KEYS[3].2),
    k("grid_network", NETWORK_KEYS[4].0, NETWORK_KEYS[4].1, NETWORK_KEYS[4].2),
    k("grid_network", NETWORK_KEYS[5].0, NETWORK_KEYS[5].1, NETWORK_KEYS[5].2),
    k("grid_network", NETWORK_KEYS[6].0, NETWORK_KEYS[6].1, NETWORK_KEYS[6].2),
    k("grid_network", NETWORK_KEYS[7].0, NETWORK_KEYS[7].1, NETWORK_KEYS[7].2),
    k("grid_network", NETWORK_KEYS[8].0, NETWORK_KEYS[8].1, NETWORK_KEYS[8].2),
    k("grid_network", NETWORK_KEYS[9].0, NETWORK_KEYS[9].1, NETWORK_KEYS[9].2),
    k("microgrid_network", NETWORK_KEYS[0].0, NETWORK_KEYS[0].1, NETWORK_KEYS[0].2),
    k("microgrid_network", NETWORK_KEYS[1].0, NETWORK_KEYS[1].1, NETWORK_KEYS[1].2),
    k("microgrid_network", NETWORK_KEYS[2].0, NETWORK_KEYS[2].1, NETWORK_KEYS[2].2),
    k("microgrid_network", NETWORK_KEYS[3].0, NETWORK_KEYS[3].1, NETWORK_KEYS[3].2),
    k("microgrid_network", NETWORK_KEYS[4].0, NETWORK_KEYS[4].1, NETWORK_KEYS[4].2),
    k("microgrid_network", NETWORK_KEYS[5].0, NETWORK_KEYS[5].1, NETWORK_KEYS[5].2),
    k("microgrid_network", NETWORK_KEYS[6].0, NETWORK_KEYS[6].1, NETWORK_KEYS[6].2),
    k("microgrid_network", NETWORK_KEYS[7].0, NETWORK_KEYS[7].1, NETWORK_KEYS[7].2),
    k("microgrid_network", NETWORK_KEYS[8].0, NETWORK_KEYS[8].1, NETWORK_KEYS[8].2),
    k("microgrid_network", NETWORK_KEYS[9].0, NETWORK_KEYS[9].1, NETWORK_KEYS[9].2),
    k("gsc", "r_g", Kind::Quantity(Dim::Resistance), None),
    k("gsc", "l_g", Kind::Quantity(Dim::Inductance), None),
    k("gsc", "c_fg", Kind::Quantity(Dim::Capacitance), None),
    k("gsc", "r_fg", Kind::Quantity(Dim::Resistance), None),
    k("gsc", "l_fg", Kind::Quantity(Dim::Inductance), None),
    k("gsc", "s_rated", Kind::Quantity(Dim::ApparentPower), None),
    k("gsc", "v_ll_rms", Kind::Quantity(Dim::Voltage), None),
    k("msc", "r_m", Kind::Quantity(Dim::Resistance), None),
    k("msc", "l_m", Kind::Quantity(Dim::Inductance), None),
    k("msc", "c_fm", Kind::Quantity(Dim::Capacitance), None),
    k("msc", "r_fm", Kind::Quantity(Dim::Resistance), None),
    k("msc", "l_fm", Kind::Quantity(Dim::Inductance), None),
    k("msc", "s_rated", Kind::Quantity(Dim::ApparentPower), None),
    k("msc", "v_ll_rms", Kind::Quantity(Dim::Voltage), None),
    k("dclink", "c_dc", Kind::Quantity(Dim::Capacitance), None),
    k("dclink", "v_dc_init", Kind::Quantity(Dim::Voltage), Some("v_dc_ref")),
    k("control", "k_p", Kind::Quantity(Dim::PropGain), None),
    k("control", "k_i", Kind::Quantity(Dim::IntGain), None),
    k("control", "t_f", Kind::Quantity(Dim::Time), None),
    k("control", "v_dc_ref", Kind::Quantity(Dim::Voltage), None),
    k("control", "p_m_ref", Kind::Quantity(Dim::Power), Some("0")),
    k("control", "q_m_ref", Kind::Quantity(Dim::ReactivePower), Some("0")),
    k("control", "q_g_ref", Kind::Quantity(Dim::ReactivePower), Some("0")),
    k("control", "current_limit", Kind::Flag, Some("false")),
    k("control", "low_voltage_fraction", Kind::Quantity(Dim::Ratio), Some("0.1")),
    k("simulation", "dt", Kind::Quantity(Dim::Time), Some("0.001")),
    k("simulation", "t_stop", Kind::Quantity(Dim::Time), None),
    k("simulation", "log_stride", Kind::Count, Some("1")),
    k("simulation", "init", Kind::InitMode, Some("equilibrium")),
];

const SECTIONS: [&str; 8] = [
    "grid_network",
    "microgrid_network",
    "gsc",
    "msc",
    "dclink",
    "control",
    "simulation",
    "events",
];

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    key_col: usize,
    value_col: usize,
}

#[derive(Debug, Default)]
struct Document {
    sections: HashMap<String, (usize, Vec<Entry>)>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn column_of(line: &str, sub: &str) -> usize {
    // `sub` is a slice of `line`
    let offset = sub.as_ptr() as usize - line.as_ptr() as usize;
    line[..offset].chars().count() + 1
}

fn tokenize(text: &str) -> Result<Document, ScenarioError> {
    let mut doc = Document::default();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let body = strip_comment(raw);
        let trimmed = body.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = column_of(raw, trimmed);
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| {
                ScenarioError::at(line_no, col, ScenarioErrorKind::Syntax("unterminated section header".into()))
            })?;
            let name = name.trim().to_string();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ScenarioError::at(line_no, col, ScenarioErrorKind::UnknownSection(name)));
            }
            if doc.sections.contains_key(&name) {
                return Err(ScenarioError::at(
                    line_no,
                    col,
                    ScenarioErrorKind::Syntax(format!("section [{name}] appears twice")),
                ));
            }
            doc.sections.insert(name.clone(), (line_no, Vec::new()));
            current = Some(name);
            continue;
        }
        let section = current.as_ref().ok_or_else(|| {
            ScenarioError::at(line_no, col, ScenarioErrorKind::Syntax("entry before any [section]".into()))
        })?;
        let eq = trimmed.find('=').ok_or_else(|| {
            ScenarioError::at(line_no, col, ScenarioErrorKind::Syntax("expected `key = value`".into()))
        })?;
        let key = trimmed[..eq].trim();
        let value = trimmed[eq + 1..].trim();
        if key.is_empty() {
            return Err(ScenarioError::at(line_no, col, ScenarioErrorKind::Syntax("empty key".into())));
        }
        let value_col = if value.is_empty() {
            column_of(raw, &trimmed[eq + 1..])
        } else {
            column_of(raw, value)
        };
        let entry = Entry {
            key: key.to_string(),
            value: value.to_string(),
            line: line_no,
            key_col: column_of(raw, key),
            value_col,
        };
        doc.sections.get_mut(section).expect("section exists").1.push(entry);
    }
    Ok(doc)
}

/// Split `"0.2 mH"` / `"0.2mH"` into number and unit.
fn split_quantity(text: &str) -> Option<(f64, &str)> {
    let end = text
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E')))
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    let number: f64 = text[..end].trim().parse().ok()?;
    if !number.is_finite() {
        return None;
    }
    Some((number, text[end..].trim()))
}

struct SectionReader<'a> {
    name: &'static str,
    header_line: usize,
    entries: Vec<&'a Entry>,
}

impl<'a> SectionReader<'a> {
    fn new(doc: &'a Document, name: &'static str) -> Result<Self, ScenarioError> {
        let (header_line, entries) = match doc.sections.get(name) {
            Some((line, entries)) => (*line, entries.iter().collect::<Vec<_>>()),
            None => (0, Vec::new()),
        };
        let reader = Self {
            name,
            header_line,
            entries,
        };
        reader.check_keys()?;
        Ok(reader)
    }

    fn spec(&self, key: &str) -> Option<&'static KeySpec> {
        KEYS.iter().find(|s| s.section == self.name && s.key == key)
    }

    fn check_keys(&self) -> Result<(), ScenarioError> {
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for e in &self.entries {
            let spec = self.spec(&e.key).ok_or_else(|| {
                ScenarioError::at(
                    e.line,
                    e.key_col,
                    ScenarioErrorKind::UnknownKey {
                        section: self.name.into(),
                        key: e.key.clone(),
                    },
                )
            })?;
            let repeatable = matches!(spec.kind, Kind::Line | Kind::Load);
            if !repeatable && seen.insert(e.key.as_str(), ()).is_some() {
                return Err(ScenarioError::at(
                    e.line,
                    e.key_col,
                    ScenarioErrorKind::DuplicateKey {
                        section: self.name.into(),
                        key: e.key.clone(),
                    },
                ));
            }
        }
        Ok(())
    }

    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.entries.iter().copied().find(|e| e.key == key)
    }

    fn missing(&self, key: &str) -> ScenarioError {
        ScenarioError::at(
            self.header_line,
            0,
            ScenarioErrorKind::MissingKey {
                section: self.name.into(),
                key: key.into(),
            },
        )
    }

    fn raw(&self, key: &'static str) -> Result<Option<&'a Entry>, ScenarioError> {
        let spec = self.spec(key).expect("documented key");
        match self.entry(key) {
            Some(e) => Ok(Some(e)),
            None if spec.default.is_some() => Ok(None),
            None => Err(self.missing(key)),
        }
    }

    fn quantity(&self, key: &'static str) -> Result<Option<(f64, &'a Entry)>, ScenarioError> {
        let Some(e) = self.raw(key)? else {
            return Ok(None);
        };
        let Kind::Quantity(dim) = self.spec(key).expect("documented key").kind else {
            unreachable!("{key} is not a quantity")
        };
        let (number, unit) = split_quantity(&e.value).ok_or_else(|| {
            ScenarioError::at(
                e.line,
                e.value_col,
                ScenarioErrorKind::BadValue {
                    key: key.into(),
                    text: e.value.clone(),
                },
            )
        })?;
        let scale = dim.scale(unit).ok_or_else(|| {
            ScenarioError::at(
                e.line,
                e.value_col,
                ScenarioErrorKind::BadUnit {
                    key: key.into(),
                    unit: unit.into(),
                    expected: dim.name(),
                },
            )
        })?;
        Ok(Some((scaled(number, scale), e)))
    }

    fn positive(&self, key: &'static str) -> Result<f64, ScenarioError> {
        let (v, e) = self.quantity(key)?.ok_or_else(|| self.missing(key))?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(out_of_range(e, key, v, "positive"))
        }
    }

    fn non_negative_or(&self, key: &'static str, default: f64) -> Result<f64, ScenarioError> {
        match self.quantity(key)? {
            Some((v, e)) if v < 0.0 => Err(out_of_range(e, key, v, "non-negative")),
            Some((v, _)) => Ok(v),
            None => Ok(default),
        }
    }

    fn any_or(&self, key: &'static str, default: f64) -> Result<f64, ScenarioError> {
        Ok(self.quantity(key)?.map(|(v, _)| v).unwrap_or(default))
    }

    fn count_or(&self, key: &'static str, default: usize) -> Result<usize, ScenarioError> {
        let Some(e) = self.raw(key)? else {
            return Ok(default);
        };
        e.value.parse::<usize>().map_err(|_| bad_value(e, key))
    }

    fn flag_or(&self, key: &'static str, default: bool) -> Result<bool, ScenarioError> {
        let Some(e) = self.raw(key)? else {
            return Ok(default);
        };
        match e.value.as_str() {
            "true" | "on" | "yes" => Ok(true),
            "false" | "off" | "no" => Ok(false),
            _ => Err(bad_value(e, key)),
        }
    }

    fn all(&self, key: &str) -> impl Iterator<Item = &'a Entry> + '_ {
        let key = key.to_string();
        self.entries.iter().copied().filter(move |e| e.key == key)
    }
}

fn bad_value(e: &Entry, key: &str) -> ScenarioError {
    ScenarioError::at(
        e.line,
        e.value_col,
        ScenarioErrorKind::BadValue {
            key: key.into(),
            text: e.value.clone(),
        },
    )
}

fn out_of_range(e: &Entry, key: &str, value: f64, requirement: &'static str) -> ScenarioError {
    ScenarioError::at(
        e.line,
        e.value_col,
        ScenarioErrorKind::OutOfRange {
            key: key.into(),
            value,
            requirement,
        },
    )
}

fn parse_numbers(e: &Entry, key: &str, n_min: usize, n_max: usize) -> Result<Vec<f64>, ScenarioError> {
    let nums: Vec<f64> = e
        .value
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| bad_value(e, key))?;
    if nums.len() < n_min || nums.len() > n_max {
        return Err(bad_value(e, key));
    }
    Ok(nums)
}

fn as_index(v: f64, e: &Entry, key: &str) -> Result<usize, ScenarioError> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(bad_value(e, key))
    }
}

fn parse_network(doc: &Document, name: &'static str) -> Result<NetworkSpec, ScenarioError> {
    let s = SectionReader::new(doc, name)?;
    let mut lines = Vec::new();
    for e in s.all("line") {
        let v = parse_numbers(e, "line", 4, 5)?;
        let line = LineSpec {
            from: as_index(v[0], e, "line")?,
            to: as_index(v[1], e, "line")?,
            r: v[2],
            l: v[3],
            c: v.get(4).copied().unwrap_or(0.0),
        };
        if line.r < 0.0 || line.l < 0.0 || line.c < 0.0 || (line.r == 0.0 && line.l == 0.0) {
            return Err(bad_value(e, "line"));
        }
        lines.push(line);
    }
    let mut loads = Vec::new();
    for e in s.all("load") {
        let v = parse_numbers(e, "load", 3, 3)?;
        let load = LoadSpec {
            bus: as_index(v[0], e, "load")?,
            r: v[1],
            x: v[2],
        };
        if load.r < 0.0 || (load.r == 0.0 && load.x == 0.0) {
            return Err(bad_value(e, "load"));
        }
        loads.push(load);
    }
    let source_r = s.non_negative_or("source_r", f64::NAN)?;
    let source_l = s.non_negative_or("source_l", f64::NAN)?;
    if source_r == 0.0 && source_l == 0.0 {
        let e = s.entry("source_l").expect("required key present");
        return Err(out_of_range(e, "source_l", 0.0, "non-zero when source_r is zero"));
    }
    Ok(NetworkSpec {
        frequency: s.positive_or("frequency", 60.0)?,
        buses: s.count_or("buses", 1)?,
        pcc_bus: s.count_or("pcc_bus", 0)?,
        source_bus: s.count_or("source_bus", 0)?,
        source_v_ll_rms: s.positive("source_v_ll_rms")?,
        source_angle: s.any_or("source_angle", 0.0)?,
        source_r,
        source_l,
        lines,
        loads,
    })
}

impl SectionReader<'_> {
    fn positive_or(&self, key: &'static str, default: f64) -> Result<f64, ScenarioError> {
        match self.quantity(key)? {
            Some((v, e)) if v <= 0.0 => Err(out_of_range(e, key, v, "positive")),
            Some((v, _)) => Ok(v),
            None => Ok(default),
        }
    }
}

fn parse_converter(
    doc: &Document,
    name: &'static str,
    keys: [&'static str; 5],
    omega: f64,
) -> Result<ConverterParams, ScenarioError> {
    let s = SectionReader::new(doc, name)?;
    Ok(ConverterParams {
        r_reactor: s.positive(keys[0])?,
        l_reactor: s.positive(keys[1])?,
        c_filter: s.positive(keys[2])?,
        r_filter: s.positive(keys[3])?,
        l_filter: s.positive(keys[4])?,
        s_rated: s.positive("s_rated")?,
        v_ll_rms: s.positive("v_ll_rms")?,
        omega_nom: omega,
    })
}

fn parse_event(e: &Entry) -> Result<Event, ScenarioError> {
    let key = e.key.as_str();
    let (value, time) = e.value.rsplit_once('@').ok_or_else(|| {
        ScenarioError::at(
            e.line,
            e.value_col,
            ScenarioErrorKind::Syntax("event needs `target = value @ time`".into()),
        )
    })?;
    let (value, time) = (value.trim(), time.trim());
    let quantity = |text: &str, dim: Dim, what: &str| -> Result<f64, ScenarioError> {
        let (n, unit) = split_quantity(text).ok_or_else(|| bad_value(e, what))?;
        let scale = dim.scale(unit).ok_or_else(|| {
            ScenarioError::at(
                e.line,
                e.value_col,
                ScenarioErrorKind::BadUnit {
                    key: what.into(),
                    unit: unit.into(),
                    expected: dim.name(),
                },
            )
        })?;
        Ok(scaled(n, scale))
    };
    let time = quantity(time, Dim::Time, "event time")?;
    if time < 0.0 {
        return Err(out_of_range(e, "event time", time, "non-negative"));
    }
    let load = |side: Side, make: fn(usize, Complex64) -> ShuntChange| -> Result<EventAction, ScenarioError> {
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .filter(|v: &Vec<f64>| v.len() == 3)
            .ok_or_else(|| bad_value(e, key))?;
        let bus = as_index(nums[0], e, key)?;
        Ok(EventAction::Load {
            side,
            change: make(bus, Complex64::new(nums[1], nums[2])),
        })
    };
    let add = |bus, z| ShuntChange::Add { bus, z };
    let remove = |bus, z| ShuntChange::Remove { bus, z };
    let replace = |bus, z| ShuntChange::Replace { bus, z };
    let action = match key {
        "msc.p_ref" => EventAction::MscPRef(quantity(value, Dim::Power, key)?),
        "msc.q_ref" => EventAction::MscQRef(quantity(value, Dim::ReactivePower, key)?),
        "gsc.q_ref" => EventAction::GscQRef(quantity(value, Dim::ReactivePower, key)?),
        "gsc.v_dc_ref" => {
            let v = quantity(value, Dim::Voltage, key)?;
            if v <= 0.0 {
                return Err(out_of_range(e, key, v, "positive"));
            }
            EventAction::GscVdcRef(v)
        }
        "grid.load_add" => load(Side::Grid, add)?,
        "grid.load_remove" => load(Side::Grid, remove)?,
        "grid.load_set" => load(Side::Grid, replace)?,
        "microgrid.load_add" => load(Side::Microgrid, add)?,
        "microgrid.load_remove" => load(Side::Microgrid, remove)?,
        "microgrid.load_set" => load(Side::Microgrid, replace)?,
        _ => {
            return Err(ScenarioError::at(
                e.line,
                e.key_col,
                ScenarioErrorKind::UnknownKey {
                    section: "events".into(),
                    key: key.into(),
                },
            ))
        }
    };
    Ok(Event { time, action })
}

/// Parse scenario text.
pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let doc = tokenize(text)?;
    let grid = parse_network(&doc, "grid_network")?;
    let microgrid = parse_network(&doc, "microgrid_network")?;
    let gsc = parse_converter(&doc, "gsc", ["r_g", "l_g", "c_fg", "r_fg", "l_fg"], grid.omega())?;
    let msc = parse_converter(&doc, "msc", ["r_m", "l_m", "c_fm", "r_fm", "l_fm"], microgrid.omega())?;

    let c = SectionReader::new(&doc, "control")?;
    let k_p = c.non_negative_or("k_p", f64::NAN)?;
    let k_i = c.non_negative_or("k_i", f64::NAN)?;
    let lvf = c.non_negative_or("low_voltage_fraction", DEFAULT_LOW_VOLTAGE_FRACTION)?;
    if lvf >= 1.0 {
        let e = c.entry("low_voltage_fraction").expect("present when non-default");
        return Err(out_of_range(e, "low_voltage_fraction", lvf, "below 1"));
    }
    let control = ControlSpec {
        k_p,
        k_i,
        t_f: c.positive("t_f")?,
        v_dc_ref: c.positive("v_dc_ref")?,
        p_m_ref: c.any_or("p_m_ref", 0.0)?,
        q_m_ref: c.any_or("q_m_ref", 0.0)?,
        q_g_ref: c.any_or("q_g_ref", 0.0)?,
        current_limit: c.flag_or("current_limit", false)?,
        low_voltage_fraction: lvf,
    };

    let d = SectionReader::new(&doc, "dclink")?;
    let v_dc_init = match d.quantity("v_dc_init")? {
        Some((v, e)) if v <= 0.0 => return Err(out_of_range(e, "v_dc_init", v, "positive")),
        other => other.map(|(v, _)| v),
    };
    let dclink = DcLinkSpec {
        c_dc: d.positive("c_dc")?,
        v_dc_init,
    };

    let s = SectionReader::new(&doc, "simulation")?;
    let dt = s.positive_or("dt", 1e-3)?;
    if dt > 0.01 {
        let e = s.entry("dt").expect("present when non-default");
        return Err(out_of_range(e, "dt", dt, "at most 0.01 s"));
    }
    let log_stride = s.count_or("log_stride", 1)?;
    if log_stride == 0 {
        let e = s.entry("log_stride").expect("present");
        return Err(out_of_range(e, "log_stride", 0.0, "at least 1"));
    }
    let init_mode = match s.raw("init")? {
        None => InitMode::EquilibriumInit,
        Some(e) => match e.value.as_str() {
            "equilibrium" => InitMode::EquilibriumInit,
            "cold" => InitMode::ColdStart,
            _ => return Err(bad_value(e, "init")),
        },
    };
    let simulation = SimulationConfig {
        dt,
        t_stop: s.positive("t_stop")?,
        log_stride,
        init_mode,
    };

    let mut events = Vec::new();
    if let Some((_, entries)) = doc.sections.get("events") {
        let mut previous: Option<Event> = None;
        for e in entries {
            let ev = parse_event(e)?;
            if let Some(p) = previous {
                if ev.time < p.time {
                    return Err(ScenarioError::at(
                        e.line,
                        e.value_col,
                        ScenarioErrorKind::UnsortedEvents {
                            earlier: p.time,
                            later: ev.time,
                        },
                    ));
                }
            }
            previous = Some(ev);
            events.push(ev);
        }
    }

    let scenario = Scenario {
        grid,
        microgrid,
        gsc,
        msc,
        dclink,
        control,
        simulation,
        events,
    };
    scenario
        .validate()
        .map_err(|m| ScenarioError::at(0, 0, ScenarioErrorKind::Invalid(m)))?;
    Ok(scenario)
}

/// Read and parse a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::at(0, 0, ScenarioErrorKind::Io(format!("{}: {e}", path.display()))))?;
    parse_scenario_str(&text)
}

// ---------------------------------------------------------------------------
// Serialization

fn q(out: &mut String, key: &str, value: f64, dim: Dim) {
    let unit = dim.base_unit();
    if unit.is_empty() {
        let _ = writeln!(out, "{key} = {value}");
    } else {
        let _ = writeln!(out, "{key} = {value} {unit}");
    }
}

fn write_network(out: &mut String, name: &str, n: &NetworkSpec) {
    let _ = writeln!(out, "[{name}]");
    q(out, "frequency", n.frequency, Dim::Frequency);
    let _ = writeln!(out, "buses = {}", n.buses);
    let _ = writeln!(out, "pcc_bus = {}", n.pcc_bus);
    let _ = writeln!(out, "source_bus = {}", n.source_bus);
    q(out, "source_v_ll_rms", n.source_v_ll_rms, Dim::Voltage);
    q(out, "source_angle", n.source_angle, Dim::Angle);
    q(out, "source_r", n.source_r, Dim::Resistance);
    q(out, "source_l", n.source_l, Dim::Inductance);
    for l in &n.lines {
        let _ = writeln!(out, "line = {} {} {} {} {}", l.from, l.to, l.r, l.l, l.c);
    }
    for l in &n.loads {
        let _ = writeln!(out, "load = {} {} {}", l.bus, l.r, l.x);
    }
    out.push('\n');
}

fn write_converter(out: &mut String, name: &str, keys: [&str; 5], p: &ConverterParams) {
    let _ = writeln!(out, "[{name}]");
    q(out, keys[0], p.r_reactor, Dim::Resistance);
    q(out, keys[1], p.l_reactor, Dim::Inductance);
    q(out, keys[2], p.c_filter, Dim::Capacitance);
    q(out, keys[3], p.r_filter, Dim::Resistance);
    q(out, keys[4], p.l_filter, Dim::Inductance);
    q(out, "s_rated", p.s_rated, Dim::ApparentPower);
    q(out, "v_ll_rms", p.v_ll_rms, Dim::Voltage);
    out.push('\n');
}

impl fmt::Display for Scenario {
    /// Canonical text form; parsing it yields an identical scenario.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        write_network(&mut out, "grid_network", &self.grid);
        write_network(&mut out, "microgrid_network", &self.microgrid);
        write_converter(&mut out, "gsc", ["r_g", "l_g", "c_fg", "r_fg", "l_fg"], &self.gsc);
        write_converter(&mut out, "msc", ["r_m", "l_m", "c_fm", "r_fm", "l_fm"], &self.msc);

        out.push_str("[dclink]\n");
        q(&mut out, "c_dc", self.dclink.c_dc, Dim::Capacitance);
        if let Some(v) = self.dclink.v_dc_init {
            q(&mut out, "v_dc_init", v, Dim::Voltage);
        }
        out.push('\n');

        let c = &self.control;
        out.push_str("[control]\n");
        q(&mut out, "k_p", c.k_p, Dim::PropGain);
        q(&mut out, "k_i", c.k_i, Dim::IntGain);
        q(&mut out, "t_f", c.t_f, Dim::Time);
        q(&mut out, "v_dc_ref", c.v_dc_ref, Dim::Voltage);
        q(&mut out, "p_m_ref", c.p_m_ref, Dim::Power);
        q(&mut out, "q_m_ref", c.q_m_ref, Dim::ReactivePower);
        q(&mut out, "q_g_ref", c.q_g_ref, Dim::ReactivePower);
        let _ = writeln!(out, "current_limit = {}", c.current_limit);
        q(&mut out, "low_voltage_fraction", c.low_voltage_fraction, Dim::Ratio);
        out.push('\n');

        let s = &self.simulation;
        out.push_str("[simulation]\n");
        q(&mut out, "dt", s.dt, Dim::Time);
        q(&mut out, "t_stop", s.t_stop, Dim::Time);
        let _ = writeln!(out, "log_stride = {}", s.log_stride);
        let init = match s.init_mode {
            InitMode::EquilibriumInit => "equilibrium",
            InitMode::ColdStart => "cold",
        };
        let _ = writeln!(out, "init = {init}");
        out.push('\n');

        out.push_str("[events]\n");
        for e in &self.events {
            let (target, value) = match e.action {
                EventAction::MscPRef(v) => ("msc.p_ref".to_string(), format!("{v} W")),
                EventAction::MscQRef(v) => ("msc.q_ref".to_string(), format!("{v} var")),
                EventAction::GscQRef(v) => ("gsc.q_ref".to_string(), format!("{v} var")),
                EventAction::GscVdcRef(v) => ("gsc.v_dc_ref".to_string(), format!("{v} V")),
                EventAction::Load { side, change } => {
                    let (op, bus, z) = match change {
                        ShuntChange::Add { bus, z } => ("load_add", bus, z),
                        ShuntChange::Remove { bus, z } => ("load_remove", bus, z),
                        ShuntChange::Replace { bus, z } => ("load_set", bus, z),
                    };
                    (format!("{side}.{op}"), format!("{bus} {} {}", z.re, z.im))
                }
            };
            let _ = writeln!(out, "{target} = {value} @ {} s", e.time);
        }
        f.write_str(&out)
    }
}
