//! Randomized checks shared by the property suite and the acceptance run.

use std::f64::consts::PI;

use btb_core::engine::Simulation;
use btb_core::network::{Branch, Network, ShuntChange};
use btb_core::phasor::{from_dq, three_phase_power, to_dq, DqPair, Phasor, SourceEquivalent};
use btb_core::scenario::{Event, EventAction};
use btb_core::{Scenario, Side};
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const CASES: u32 = 1000;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn finish(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn complex(max: f64) -> impl Strategy<Value = Complex64> {
    (-max..max, -max..max).prop_map(|(re, im)| Complex64::new(re, im))
}

fn impedance() -> impl Strategy<Value = Complex64> {
    (1e-4..10.0f64, 1e-4..10.0f64).prop_map(|(r, x)| Complex64::new(r, x))
}

pub fn dq_round_trip(cases: u32) -> Result<(), String> {
    finish(runner(cases).run(&(1e-3..1e4f64, -PI..PI, -20.0..20.0f64), |(mag, ang, theta)| {
        let v = Phasor::from_polar(mag, ang);
        let back = from_dq(to_dq(v, theta));
        let err = (back.to_complex() - v.to_complex()).norm() / mag;
        prop_assert!(err <= 1e-12, "relative error {err}");
        Ok(())
    }))
}

pub fn norton_equivalence(cases: u32) -> Result<(), String> {
    finish(runner(cases).run(&(complex(1e4), impedance(), complex(1e4)), |(e, z, v_t)| {
        let src = SourceEquivalent::from_thevenin(e.into(), z).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let norton = src.terminal_current(v_t.into()).to_complex();
        let thevenin = (e - v_t) / z;
        let scale = (e.norm() + v_t.norm()) / z.norm();
        let err = (norton - thevenin).norm() / scale.max(f64::MIN_POSITIVE);
        prop_assert!(err <= 1e-12, "relative error {err}");
        Ok(())
    }))
}

pub fn power_rotation_invariance(cases: u32) -> Result<(), String> {
    finish(runner(cases).run(
        &(complex(500.0), complex(500.0), -PI..PI, -PI..PI),
        |(v, i, frame, other)| {
            let a = three_phase_power(DqPair::from_complex(v, frame), DqPair::from_complex(i, frame));
            let vr = DqPair::from_complex(v, frame).rotate_to(other);
            let ir = DqPair::from_complex(i, frame).rotate_to(other);
            let b = three_phase_power(vr, ir);
            let scale = 1.5 * v.norm() * i.norm();
            prop_assert!((a.p - b.p).abs() <= 1e-10 * scale.max(1.0), "p {} vs {}", a.p, b.p);
            prop_assert!((a.q - b.q).abs() <= 1e-10 * scale.max(1.0), "q {} vs {}", a.q, b.q);
            Ok(())
        },
    ))
}

#[derive(Debug, Clone)]
pub struct RandomNetwork {
    n_bus: usize,
    /// `(from, to, z, shunt susceptance)`; bus k connects to an earlier bus.
    lines: Vec<(usize, usize, Complex64, f64)>,
    loads: Vec<(usize, Complex64)>,
    source_bus: usize,
    source_z: Complex64,
}

fn random_network() -> impl Strategy<Value = RandomNetwork> {
    (1usize..6).prop_flat_map(|n| {
        let lines = (1..n)
            .map(|k| (0..k, impedance(), 0.0..1e-3f64).prop_map(move |(to, z, b)| (k, to, z, b)))
            .collect::<Vec<_>>();
        let loads = prop::collection::vec((0..n, impedance()), 0..4);
        (Just(n), lines, loads, 0..n, impedance()).prop_map(|(n_bus, lines, loads, source_bus, source_z)| RandomNetwork {
            n_bus,
            lines,
            loads,
            source_bus,
            source_z,
        })
    })
}

impl RandomNetwork {
    fn build(&self, e_source: Complex64, with_shunts: bool) -> Network {
        let mut net = Network::new(Side::Grid, self.n_bus).unwrap();
        for &(from, to, z, b) in &self.lines {
            let y_shunt = if with_shunts { Complex64::new(0.0, b) } else { Complex64::new(0.0, 0.0) };
            net.add_branch(Branch { from, to, z, y_shunt }).unwrap();
        }
        net.attach_source(self.source_bus, SourceEquivalent::from_thevenin(e_source.into(), self.source_z).unwrap())
            .unwrap();
        if with_shunts {
            for &(bus, z) in &self.loads {
                net.update_admittance(ShuntChange::Add { bus, z }).unwrap();
            }
        }
        net
    }
}

pub fn superposition(cases: u32) -> Result<(), String> {
    let strategy = random_network().prop_flat_map(|net| {
        let n = net.n_bus;
        (Just(net), 0..n, 0..n, complex(200.0), complex(200.0))
    });
    finish(runner(cases).run(&strategy, |(spec, bus_a, bus_b, i_a, i_b)| {
        let mut net = spec.build(Complex64::new(0.0, 0.0), true);
        let pa = net.attach_port(bus_a, Complex64::new(0.01, 0.075)).unwrap();
        let pb = net.attach_port(bus_b, Complex64::new(0.01, 0.075)).unwrap();
        let mut solve = |a: Complex64, b: Complex64| {
            net.set_port_current(pa, a);
            net.set_port_current(pb, b);
            net.solve().map(|v| v.iter().map(|p| p.to_complex()).collect::<Vec<_>>())
        };
        let zero = Complex64::new(0.0, 0.0);
        let (Ok(va), Ok(vb), Ok(vab)) = (solve(i_a, zero), solve(zero, i_b), solve(i_a, i_b)) else {
            // ill-conditioned draw; rejected by the solver, nothing to compare
            return Ok(());
        };
        let scale = vab.iter().chain(&va).chain(&vb).map(|v| v.norm()).fold(0.0, f64::max);
        for k in 0..vab.len() {
            let err = (vab[k] - va[k] - vb[k]).norm();
            prop_assert!(err <= 1e-10 * scale.max(1e-300), "bus {k}: {err} vs scale {scale}");
        }
        Ok(())
    }))
}

pub fn stamp_unstamp(cases: u32) -> Result<(), String> {
    let strategy = random_network().prop_flat_map(|net| {
        let n = net.n_bus;
        (Just(net), 0..n, impedance())
    });
    finish(runner(cases).run(&strategy, |(spec, bus, z)| {
        let mut net = spec.build(Complex64::new(100.0, 0.0), true);
        let before: Vec<Complex64> = net.y_matrix().to_vec();
        net.update_admittance(ShuntChange::Add { bus, z }).unwrap();
        prop_assert!(net.y_matrix() != &before[..] || z.inv() == Complex64::new(0.0, 0.0));
        net.update_admittance(ShuntChange::Remove { bus, z }).unwrap();
        let same = net
            .y_matrix()
            .iter()
            .zip(&before)
            .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits());
        prop_assert!(same, "admittance matrix not restored bit for bit");
        Ok(())
    }))
}

pub fn unloaded_source(cases: u32) -> Result<(), String> {
    finish(runner(cases).run(&(random_network(), 1.0..1e4f64, -PI..PI), |(spec, mag, ang)| {
        let e = Complex64::from_polar(mag, ang);
        let mut net = spec.build(e, false);
        let v = net.solve().map_err(|err| TestCaseError::fail(err.to_string()))?;
        for (k, vk) in v.iter().enumerate() {
            let err = (vk.to_complex() - e).norm() / mag;
            prop_assert!(err <= 1e-12, "bus {k}: relative error {err}");
        }
        Ok(())
    }))
}

/// A power step never moves a state discontinuously: in the step where it
/// applies, the MSC current covers at most `dt / T_f` of the distance to
/// its new reference, and the DC voltage moves only as far as that partial
/// power change allows.
pub fn event_continuity(cases: u32) -> Result<(), String> {
    let strategy = (1usize..50, -45e3..45e3f64, -45e3..45e3f64);
    finish(runner(cases).run(&strategy, |(k_event, p0, p1)| {
        let mut s = Scenario::reference_50kva();
        s.control.p_m_ref = p0;
        s.simulation.t_stop = 0.06;
        let t_event = k_event as f64 * s.simulation.dt;
        s.events.push(Event {
            time: t_event,
            action: EventAction::MscPRef(p1),
        });
        let mut sim = Simulation::new(&s).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let dt = s.simulation.dt;
        for _ in 0..k_event {
            sim.step().unwrap();
        }
        let before = sim.state();
        sim.step().unwrap();
        let after = sim.state();
        let i_ref_new = 2.0 / 3.0 * p1 / sim.current().unwrap().v_m.magnitude();
        let bound = dt / s.control.t_f * (i_ref_new - before.i_m_d).abs() * 1.01 + 1e-6;
        prop_assert!((after.i_m_d - before.i_m_d).abs() <= bound);
        // from equilibrium the predicted MSC current moves dt / T_f of the
        // way, so the corrector sees half of that power change
        let dp = (p1 - p0).abs();
        let v_bound = dt * dt / (2.0 * s.control.t_f * s.dclink.c_dc * before.v_dc) * dp * 1.05 + 1e-9;
        prop_assert!((after.v_dc - before.v_dc).abs() <= v_bound, "{} > {v_bound}", (after.v_dc - before.v_dc).abs());
        Ok(())
    }))
}

pub fn all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("dq round trip", dq_round_trip(cases)),
        ("norton equivalence", norton_equivalence(cases)),
        ("power invariance under rotation", power_rotation_invariance(cases)),
        ("superposition", superposition(cases)),
        ("stamp/unstamp round trip", stamp_unstamp(cases)),
        ("unloaded source", unloaded_source(cases)),
        ("event continuity", event_continuity(cases)),
    ]
}
