//! Admittance-matrix solver for one isolated AC network.
//!
//! Every element is stamped as an admittance: lines, source impedances,
//! shunt loads and the Norton admittance of the converter port. Sources
//! and converters contribute Norton current injections. The matrix is
//! rebuilt from the element list whenever it changes, so removing a load
//! restores the previous matrix bit for bit.

use num_complex::Complex64;

use crate::error::SimError;
use crate::phasor::{Phasor, SourceEquivalent};
use crate::Side;

/// Matrices whose 1-norm condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest accepted relative residual `|YV - I| / |I|` after a solve.
pub const MAX_RESIDUAL: f64 = 1e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series impedance.
    pub z: Complex64,
    /// Total shunt admittance of the pi section, split evenly between ends.
    pub y_shunt: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shunt {
    pub bus: usize,
    pub z: Complex64,
}

/// Change to the constant-impedance loads of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShuntChange {
    Add { bus: usize, z: Complex64 },
    /// Removes the first shunt at `bus` whose impedance equals `z` exactly.
    Remove { bus: usize, z: Complex64 },
    /// Replaces every shunt at `bus` with a single one.
    Replace { bus: usize, z: Complex64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
struct NortonPort {
    bus: usize,
    z: Complex64,
    current: Complex64,
}

#[derive(Debug, Clone)]
struct LuFactors {
    /// Row-major, unit lower part below the diagonal.
    a: Vec<Complex64>,
    perm: Vec<usize>,
}

impl LuFactors {
    fn factor(n: usize, mut a: Vec<Complex64>) -> Option<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (pivot_row, pivot_mag) = (k..n)
                .map(|r| (r, a[r * n + k].norm()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pivot_mag == 0.0 || !pivot_mag.is_finite() {
                return None;
            }
            if pivot_row != k {
                for j in 0..n {
                    a.swap(k * n + j, pivot_row * n + j);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = a[k * n + k];
            for i in (k + 1)..n {
                let factor = a[i * n + k] / pivot;
                a[i * n + k] = factor;
                if factor != ZERO {
                    for j in (k + 1)..n {
                        let akj = a[k * n + j];
                        a[i * n + j] -= factor * akj;
                    }
                }
            }
        }
        Some(Self { a, perm })
    }

    fn solve_in_place(&self, b: &[Complex64], x: &mut [Complex64]) {
        let n = self.perm.len();
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.a[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.a[i * n + j] * x[j];
            }
            x[i] = s / self.a[i * n + i];
        }
    }
}

/// One AC network solved as `Y V = I`.
#[derive(Debug, Clone)]
pub struct Network {
    side: Side,
    n_bus: usize,
    branches: Vec<Branch>,
    sources: Vec<(usize, SourceEquivalent)>,
    shunts: Vec<Shunt>,
    ports: Vec<NortonPort>,
    y: Vec<Complex64>,
    lu: Option<LuFactors>,
    condition: f64,
    scratch_i: Vec<Complex64>,
    scratch_v: Vec<Complex64>,
}

impl Network {
    pub fn new(side: Side, n_bus: usize) -> Result<Self, SimError> {
        if n_bus == 0 {
            return Err(SimError::InvalidConfig(format!("{side} network has no buses")));
        }
        Ok(Self {
            side,
            n_bus,
            branches: Vec::new(),
            sources: Vec::new(),
            shunts: Vec::new(),
            ports: Vec::new(),
            y: vec![ZERO; n_bus * n_bus],
            lu: None,
            condition: f64::NAN,
            scratch_i: vec![ZERO; n_bus],
            scratch_v: vec![ZERO; n_bus],
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    fn check_bus(&self, bus: usize) -> Result<(), SimError> {
        if bus < self.n_bus {
            Ok(())
        } else {
            Err(SimError::InvalidBus {
                bus,
                n_bus: self.n_bus,
            })
        }
    }

    fn check_impedance(z: Complex64) -> Result<(), SimError> {
        if z.norm() == 0.0 || !z.is_finite() {
            return Err(crate::phasor::SingularEquivalent(z).into());
        }
        Ok(())
    }

    pub fn add_branch(&mut self, branch: Branch) -> Result<(), SimError> {
        self.check_bus(branch.from)?;
        self.check_bus(branch.to)?;
        Self::check_impedance(branch.z)?;
        if branch.from == branch.to {
            return Err(SimError::InvalidConfig(format!(
                "{} network: branch connects bus {} to itself",
                self.side, branch.from
            )));
        }
        self.branches.push(branch);
        self.invalidate();
        Ok(())
    }

    pub fn attach_source(&mut self, bus: usize, source: SourceEquivalent) -> Result<(), SimError> {
        self.check_bus(bus)?;
        Self::check_impedance(source.z)?;
        self.sources.push((bus, source));
        self.invalidate();
        Ok(())
    }

    /// Attach a Norton equivalent whose current is set later with
    /// [`Network::set_port_current`].
    pub fn attach_port(&mut self, bus: usize, z: Complex64) -> Result<PortId, SimError> {
        self.check_bus(bus)?;
        Self::check_impedance(z)?;
        self.ports.push(NortonPort {
            bus,
            z,
            current: ZERO,
        });
        self.invalidate();
        Ok(PortId(self.ports.len() - 1))
    }

    pub fn set_port_current(&mut self, port: PortId, current: Complex64) {
        self.ports[port.0].current = current;
    }

    pub fn port_bus(&self, port: PortId) -> usize {
        self.ports[port.0].bus
    }

    pub fn port_impedance(&self, port: PortId) -> Complex64 {
        self.ports[port.0].z
    }

    pub fn shunts(&self) -> &[Shunt] {
        &self.shunts
    }

    /// Apply a load change; the factorization is rebuilt on the next solve.
    pub fn update_admittance(&mut self, change: ShuntChange) -> Result<(), SimError> {
        match change {
            ShuntChange::Add { bus, z } => {
                self.check_bus(bus)?;
                Self::check_impedance(z)?;
                self.shunts.push(Shunt { bus, z });
            }
            ShuntChange::Remove { bus, z } => {
                self.check_bus(bus)?;
                let pos = self
                    .shunts
                    .iter()
                    .position(|s| s.bus == bus && s.z == z)
                    .ok_or(SimError::ShuntNotFound { bus, z })?;
                self.shunts.remove(pos);
            }
            ShuntChange::Replace { bus, z } => {
                self.check_bus(bus)?;
                Self::check_impedance(z)?;
                let first = self.shunts.iter().position(|s| s.bus == bus);
                self.shunts.retain(|s| s.bus != bus);
                let at = first.unwrap_or(self.shunts.len()).min(self.shunts.len());
                self.shunts.insert(at, Shunt { bus, z });
            }
        }
        self.invalidate();
        Ok(())
    }

    fn invalidate(&mut self) {
        self.lu = None;
        self.rebuild_y();
    }

    fn rebuild_y(&mut self) {
        let n = self.n_bus;
        let y = &mut self.y;
        y.iter_mut().for_each(|v| *v = ZERO);
        for b in &self.branches {
            let ys = b.z.inv();
            let half = b.y_shunt * 0.5;
            y[b.from * n + b.from] += ys + half;
            y[b.to * n + b.to] += ys + half;
            y[b.from * n + b.to] -= ys;
            y[b.to * n + b.from] -= ys;
        }
        for (bus, src) in &self.sources {
            y[bus * n + bus] += src.z.inv();
        }
        for s in &self.shunts {
            y[s.bus * n + s.bus] += s.z.inv();
        }
        for p in &self.ports {
            y[p.bus * n + p.bus] += p.z.inv();
        }
    }

    /// Dense admittance matrix, row-major.
    pub fn y_matrix(&self) -> &[Complex64] {
        &self.y
    }

    pub fn y_entry(&self, row: usize, col: usize) -> Complex64 {
        self.y[row * self.n_bus + col]
    }

    /// Current injection vector from sources and ports.
    pub fn injections(&self) -> Vec<Complex64> {
        let mut i = vec![ZERO; self.n_bus];
        self.fill_injections(&mut i);
        i
    }

    fn fill_injections(&self, i: &mut [Complex64]) {
        i.iter_mut().for_each(|v| *v = ZERO);
        for (bus, src) in &self.sources {
            i[*bus] += src.i_norton.to_complex();
        }
        for p in &self.ports {
            i[p.bus] += p.current;
        }
    }

    /// 1-norm condition number of the current matrix.
    pub fn condition(&mut self) -> Result<f64, SimError> {
        self.factorize()?;
        Ok(self.condition)
    }

    fn factorize(&mut self) -> Result<(), SimError> {
        if self.lu.is_some() {
            return Ok(());
        }
        let n = self.n_bus;
        let lu = LuFactors::factor(n, self.y.clone()).ok_or(SimError::NetworkDegenerate {
            side: self.side,
            cond: f64::INFINITY,
        })?;
        // Exact 1-norm condition via the inverse; networks here are small.
        let norm_y = one_norm(n, &self.y);
        let mut inv_norm = 0.0f64;
        let mut e = vec![ZERO; n];
        let mut col = vec![ZERO; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = ZERO);
            e[j] = Complex64::new(1.0, 0.0);
            lu.solve_in_place(&e, &mut col);
            inv_norm = inv_norm.max(col.iter().map(|c| c.norm()).sum());
        }
        let cond = norm_y * inv_norm;
        if !(cond.is_finite() && cond <= MAX_CONDITION) {
            return Err(SimError::NetworkDegenerate {
                side: self.side,
                cond,
            });
        }
        self.condition = cond;
        self.lu = Some(lu);
        Ok(())
    }

    /// Solve for all bus voltages with the present injections.
    pub fn solve(&mut self) -> Result<Vec<Phasor>, SimError> {
        self.solve_internal()?;
        Ok(self.scratch_v.iter().map(|&v| v.into()).collect())
    }

    /// Solve and return the voltage of a single bus.
    pub fn solve_bus(&mut self, bus: usize) -> Result<Complex64, SimError> {
        self.check_bus(bus)?;
        self.solve_internal()?;
        Ok(self.scratch_v[bus])
    }

    fn solve_internal(&mut self) -> Result<(), SimError> {
        self.factorize()?;
        let mut i = std::mem::take(&mut self.scratch_i);
        let mut v = std::mem::take(&mut self.scratch_v);
        self.fill_injections(&mut i);
        self.lu.as_ref().expect("factorized").solve_in_place(&i, &mut v);
        let residual = self.relative_residual(&v, &i);
        self.scratch_i = i;
        self.scratch_v = v;
        if !(residual <= MAX_RESIDUAL) {
            return Err(SimError::NetworkDegenerate {
                side: self.side,
                cond: self.condition,
            });
        }
        Ok(())
    }

    /// `|Y v - i|_2 / |i|_2`, or the absolute residual when `i = 0`.
    pub fn relative_residual(&self, v: &[Complex64], i: &[Complex64]) -> f64 {
        let n = self.n_bus;
        let mut num = 0.0;
        for r in 0..n {
            let mut acc = -i[r];
            for c in 0..n {
                acc += self.y[r * n + c] * v[c];
            }
            num += acc.norm_sqr();
        }
        let den: f64 = i.iter().map(|x| x.norm_sqr()).sum();
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    /// Voltage at `bus` per unit current injected at `bus`, with every
    /// other injection removed.
    pub fn driving_point_impedance(&mut self, bus: usize) -> Result<Complex64, SimError> {
        self.check_bus(bus)?;
        self.factorize()?;
        let mut e = vec![ZERO; self.n_bus];
        e[bus] = Complex64::new(1.0, 0.0);
        let mut z = vec![ZERO; self.n_bus];
        self.lu.as_ref().expect("factorized").solve_in_place(&e, &mut z);
        Ok(z[bus])
    }
}

fn one_norm(n: usize, a: &[Complex64]) -> f64 {
    (0..n)
        .map(|c| (0..n).map(|r| a[r * n + c].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const V_NOM: f64 = 169.83;

    fn z_table() -> Complex64 {
        Complex64::new(0.001, 2.0 * PI * 60.0 * 0.2e-3)
    }

    fn one_bus_with_source() -> Network {
        let mut net = Network::new(Side::Grid, 1).unwrap();
        let src = SourceEquivalent::from_thevenin(Phasor::new(V_NOM, 0.0), z_table()).unwrap();
        net.attach_source(0, src).unwrap();
        net
    }

    #[test]
    fn unloaded_source_holds_its_voltage() {
        let mut net = one_bus_with_source();
        let v = net.solve().unwrap();
        assert!((v[0].to_complex() - Complex64::new(V_NOM, 0.0)).norm() <= 1e-12 * V_NOM);
    }

    #[test]
    fn drawn_current_drops_voltage_through_source_impedance() {
        let mut net = one_bus_with_source();
        // Converter draws 176.65 A in phase with the voltage.
        let port = net.attach_port(0, Complex64::new(1e6, 0.0)).unwrap();
        let draw = Complex64::new(-176.65, 0.0);
        net.set_port_current(port, draw);
        let v = net.solve_bus(0).unwrap();
        // One-bus Ohm's law with the port admittance included.
        let z_par = (z_table().inv() + Complex64::new(1e-6, 0.0)).inv();
        let expected = z_par * (Complex64::new(V_NOM, 0.0) / z_table() + draw);
        assert!((v - expected).norm() < 1e-9);
        let drop = Complex64::new(V_NOM, 0.0) - v;
        assert!((drop.norm() - 13.32).abs() < 0.01, "drop {drop}");
        assert!(drop.im.abs() > 50.0 * drop.re.abs(), "drop should be mostly quadrature");
    }

    #[test]
    fn two_bus_pi_section_matches_closed_form_inverse() {
        let z = Complex64::new(0.05, 0.2);
        let ysh = Complex64::new(0.0, 0.01);
        let zl = Complex64::new(4.0, 1.0);
        let mut net = Network::new(Side::Microgrid, 2).unwrap();
        net.add_branch(Branch {
            from: 0,
            to: 1,
            z,
            y_shunt: ysh,
        })
        .unwrap();
        net.update_admittance(ShuntChange::Add { bus: 1, z: zl }).unwrap();
        net.update_admittance(ShuntChange::Add { bus: 0, z: zl * 2.0 }).unwrap();
        let port = net.attach_port(0, Complex64::new(1e9, 0.0)).unwrap();
        net.set_port_current(port, Complex64::new(1.0, 0.0));

        let y11 = z.inv() + ysh * 0.5 + (zl * 2.0).inv() + Complex64::new(1e-9, 0.0);
        let y22 = z.inv() + ysh * 0.5 + zl.inv();
        let y12 = -z.inv();
        let det = y11 * y22 - y12 * y12;
        let v1 = y22 / det;
        let v2 = -y12 / det;
        let v = net.solve().unwrap();
        assert!((v[0].to_complex() - v1).norm() < 1e-12 * v1.norm());
        assert!((v[1].to_complex() - v2).norm() < 1e-12 * v2.norm());
        assert_eq!(net.y_entry(0, 1), net.y_entry(1, 0));
    }

    #[test]
    fn load_stamp_adds_admittance_to_diagonal() {
        let mut net = one_bus_with_source();
        let before = net.y_entry(0, 0);
        let z_load = Complex64::new(4.33, 0.0);
        net.update_admittance(ShuntChange::Add { bus: 0, z: z_load }).unwrap();
        assert!((net.y_entry(0, 0) - before - z_load.inv()).norm() < 1e-15 * before.norm());
        net.update_admittance(ShuntChange::Remove { bus: 0, z: z_load }).unwrap();
        assert_eq!(net.y_entry(0, 0), before);
    }

    #[test]
    fn fault_stamp_round_trip_is_exact() {
        let mut net = one_bus_with_source();
        net.attach_port(0, z_table()).unwrap();
        let y0 = net.y_matrix().to_vec();
        let fault = Complex64::new(1e-3, 0.0);
        net.update_admittance(ShuntChange::Add { bus: 0, z: fault }).unwrap();
        assert!((net.y_entry(0, 0) - y0[0]).re > 999.0);
        net.update_admittance(ShuntChange::Remove { bus: 0, z: fault }).unwrap();
        assert_eq!(net.y_matrix(), &y0[..]);
    }

    #[test]
    fn replace_keeps_a_single_shunt() {
        let mut net = Network::new(Side::Grid, 2).unwrap();
        net.update_admittance(ShuntChange::Add { bus: 1, z: Complex64::new(1.0, 0.0) }).unwrap();
        net.update_admittance(ShuntChange::Add { bus: 1, z: Complex64::new(2.0, 0.0) }).unwrap();
        net.update_admittance(ShuntChange::Replace { bus: 1, z: Complex64::new(5.0, 0.0) }).unwrap();
        assert_eq!(net.shunts().len(), 1);
        assert_eq!(net.shunts()[0].z, Complex64::new(5.0, 0.0));
    }

    #[test]
    fn invalid_bus_is_rejected() {
        let mut net = one_bus_with_source();
        let err = net.update_admittance(ShuntChange::Add { bus: 3, z: Complex64::new(1.0, 0.0) });
        assert_eq!(err, Err(SimError::InvalidBus { bus: 3, n_bus: 1 }));
        assert!(matches!(
            net.update_admittance(ShuntChange::Remove { bus: 0, z: Complex64::new(9.0, 0.0) }),
            Err(SimError::ShuntNotFound { .. })
        ));
    }

    #[test]
    fn floating_bus_is_degenerate() {
        let mut net = one_bus_with_source();
        let mut two = Network::new(Side::Grid, 2).unwrap();
        two.attach_source(0, SourceEquivalent::from_thevenin(Phasor::new(1.0, 0.0), z_table()).unwrap())
            .unwrap();
        assert!(matches!(two.solve(), Err(SimError::NetworkDegenerate { .. })));
        assert!(net.condition().unwrap() < 10.0);
    }

    #[test]
    fn driving_point_impedance_of_one_bus() {
        let mut net = one_bus_with_source();
        let port = net.attach_port(0, z_table() * 2.0).unwrap();
        let zp = net.driving_point_impedance(net.port_bus(port)).unwrap();
        let expected = (z_table().inv() + (z_table() * 2.0).inv()).inv();
        assert!((zp - expected).norm() < 1e-15);
    }
}
