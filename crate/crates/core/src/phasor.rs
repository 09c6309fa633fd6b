//! Phasor arithmetic, network/converter frame transforms and the
//! three-phase power convention shared by every other module.
//!
//! # dq convention
//!
//! All dq quantities are **amplitude invariant**: a balanced set of phase
//! voltages with peak value `V` maps to `d = V` when the frame is aligned.
//! Three-phase power is therefore
//!
//! ```text
//! P = 3/2 (v_d i_d + v_q i_q)
//! Q = 3/2 (v_q i_d - v_d i_q)
//! ```
//!
//! and current references invert those with a `2/3` factor. Mixing this
//! with an RMS-invariant convention produces silent 1.5x power errors, so
//! every power in the crate goes through [`three_phase_power`].
//!
//! Reactive power is positive when the converter injects inductive vars
//! into the network, which makes a negative q-axis current produce `Q > 0`.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Complex quantity in the network (Re/Im) frame. Volts or amperes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Phasor {
    pub re: f64,
    pub im: f64,
}

impl Phasor {
    pub const ZERO: Phasor = Phasor { re: 0.0, im: 0.0 };

    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn from_polar(magnitude: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(magnitude * c, magnitude * s)
    }

    pub fn magnitude(self) -> f64 {
        (self.re * self.re + self.im * self.im).sqrt()
    }

    /// Angle in `(-pi, pi]`. The zero phasor reports `0`.
    pub fn angle(self) -> f64 {
        let a = self.im.atan2(self.re);
        // atan2 returns -pi for (-x, -0.0); fold onto the closed end.
        if a == -PI {
            PI
        } else {
            a
        }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

impl From<Complex64> for Phasor {
    fn from(c: Complex64) -> Self {
        Self::new(c.re, c.im)
    }
}

impl From<Phasor> for Complex64 {
    fn from(p: Phasor) -> Self {
        p.to_complex()
    }
}

/// d/q components expressed in a converter frame whose d-axis sits at
/// `frame_angle` radians from the network real axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DqPair {
    pub d: f64,
    pub q: f64,
    pub frame_angle: f64,
}

impl DqPair {
    pub const fn new(d: f64, q: f64, frame_angle: f64) -> Self {
        Self { d, q, frame_angle }
    }

    /// `d + jq`, i.e. the quantity seen from inside the rotating frame.
    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.d, self.q)
    }

    pub fn from_complex(c: Complex64, frame_angle: f64) -> Self {
        Self::new(c.re, c.im, frame_angle)
    }

    pub fn magnitude(self) -> f64 {
        self.d.hypot(self.q)
    }

    /// Re-express the same physical quantity in another frame.
    pub fn rotate_to(self, frame_angle: f64) -> Self {
        to_dq(from_dq(self), frame_angle)
    }
}

/// Project a network-frame phasor onto a converter frame.
pub fn to_dq(v: Phasor, frame_angle: f64) -> DqPair {
    let (s, c) = frame_angle.sin_cos();
    // v * e^{-j frame_angle}
    DqPair {
        d: v.re * c + v.im * s,
        q: v.im * c - v.re * s,
        frame_angle,
    }
}

/// Inverse of [`to_dq`].
pub fn from_dq(x: DqPair) -> Phasor {
    let (s, c) = x.frame_angle.sin_cos();
    Phasor {
        re: x.d * c - x.q * s,
        im: x.d * s + x.q * c,
    }
}

/// Thevenin and Norton views of a source behind an impedance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceEquivalent {
    pub e_source: Phasor,
    pub z: Complex64,
    pub i_norton: Phasor,
}

impl SourceEquivalent {
    pub fn from_thevenin(e_source: Phasor, z: Complex64) -> Result<Self, SingularEquivalent> {
        let i_norton = thevenin_to_norton(e_source, z)?;
        Ok(Self {
            e_source,
            z,
            i_norton,
        })
    }

    pub fn admittance(&self) -> Complex64 {
        self.z.inv()
    }

    /// Current delivered into a terminal held at `v_terminal`.
    pub fn terminal_current(&self, v_terminal: Phasor) -> Phasor {
        (self.i_norton.to_complex() - v_terminal.to_complex() / self.z).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("source impedance {0} is zero; no Norton equivalent exists")]
pub struct SingularEquivalent(pub Complex64);

/// Norton current `e / z` of a voltage source behind `z`.
pub fn thevenin_to_norton(e_source: Phasor, z: Complex64) -> Result<Phasor, SingularEquivalent> {
    if z.norm() == 0.0 || !z.is_finite() {
        return Err(SingularEquivalent(z));
    }
    Ok((e_source.to_complex() / z).into())
}

/// Active and reactive three-phase power.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerPair {
    pub p: f64,
    pub q: f64,
}

/// Three-phase power from amplitude-invariant dq voltage and current.
///
/// Panics if `v` and `i` are not expressed in the same frame.
pub fn three_phase_power(v: DqPair, i: DqPair) -> PowerPair {
    assert!(
        same_frame(v.frame_angle, i.frame_angle),
        "three_phase_power: voltage frame {} rad differs from current frame {} rad",
        v.frame_angle,
        i.frame_angle
    );
    PowerPair {
        p: 1.5 * (v.d * i.d + v.q * i.q),
        q: 1.5 * (v.q * i.d - v.d * i.q),
    }
}

/// Wrap an angle onto `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w == -PI {
        PI
    } else {
        w
    }
}

fn same_frame(a: f64, b: f64) -> bool {
    a == b || wrap_angle(a - b).abs() <= 1e-12
}

/// Peak phase voltage corresponding to a line-to-line RMS value.
pub fn peak_phase_from_ll_rms(v_ll_rms: f64) -> f64 {
    v_ll_rms * (2.0f64 / 3.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const V_NOM: f64 = 169.83;

    fn deg(a: f64) -> f64 {
        a.to_radians()
    }

    #[test]
    fn aligned_frame_puts_everything_on_d() {
        let v = Phasor::from_polar(V_NOM, deg(30.0));
        let x = to_dq(v, deg(30.0));
        assert_relative_eq!(x.d, V_NOM, max_relative = 1e-14);
        assert!(x.q.abs() < 1e-12);
    }

    #[test]
    fn zero_phasor_maps_to_zero() {
        let x = to_dq(Phasor::ZERO, 1.234);
        assert_eq!((x.d, x.q), (0.0, 0.0));
        let p = from_dq(DqPair::new(0.0, 0.0, -2.0));
        assert_eq!(p.magnitude(), 0.0);
        assert_eq!(p.angle(), 0.0);
    }

    #[test]
    fn projection_onto_real_axis() {
        let x = to_dq(Phasor::from_polar(V_NOM, deg(30.0)), 0.0);
        assert!((x.d - 147.08).abs() < 5e-3, "d = {}", x.d);
        assert!((x.q - 84.92).abs() < 1e-2, "q = {}", x.q);
        let back = from_dq(DqPair::new(x.d, x.q, 0.0));
        assert_relative_eq!(back.magnitude(), V_NOM, max_relative = 1e-14);
        assert_relative_eq!(back.angle(), deg(30.0), max_relative = 1e-14);
    }

    #[test]
    fn from_dq_of_rounded_projection() {
        let p = from_dq(DqPair::new(147.08, 84.92, 0.0));
        assert!((p.magnitude() - V_NOM).abs() < 1e-2);
        assert!((p.angle() - deg(30.0)).abs() < 1e-4);
        let p = from_dq(DqPair::new(V_NOM, 0.0, deg(30.0)));
        assert_relative_eq!(p.angle(), deg(30.0), max_relative = 1e-14);
    }

    #[test]
    fn angle_range_is_half_open() {
        assert_eq!(Phasor::new(-1.0, -0.0).angle(), PI);
        assert_eq!(Phasor::new(-1.0, 0.0).angle(), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, max_relative = 1e-12);
    }

    #[test]
    fn norton_of_table_impedance() {
        let z = Complex64::new(0.001, 2.0 * PI * 60.0 * 0.2e-3);
        let e = Phasor::new(V_NOM, 0.0);
        let i = thevenin_to_norton(e, z).unwrap();
        // e / z by real arithmetic: e (r - jx) / (r^2 + x^2)
        let den = z.re * z.re + z.im * z.im;
        assert_relative_eq!(i.re, V_NOM * z.re / den, max_relative = 1e-14);
        assert_relative_eq!(i.im, -V_NOM * z.im / den, max_relative = 1e-14);
        assert!((i.re - 29.87).abs() < 0.01 && (i.im + 2252.06).abs() < 0.05, "{i:?}");
        assert!((z * i.to_complex() - e.to_complex()).norm() < 1e-9);
    }

    #[test]
    fn norton_trivial_cases() {
        let z = Complex64::new(0.3, 0.7);
        assert_eq!(thevenin_to_norton(Phasor::ZERO, z).unwrap(), Phasor::ZERO);
        let unit = thevenin_to_norton(Phasor::new(1.0, 0.0), Complex64::new(1.0, 0.0)).unwrap();
        assert_eq!(unit, Phasor::new(1.0, 0.0));
    }

    #[test]
    fn norton_rejects_zero_impedance() {
        assert!(thevenin_to_norton(Phasor::new(1.0, 0.0), Complex64::new(0.0, 0.0)).is_err());
        assert!(SourceEquivalent::from_thevenin(Phasor::ZERO, Complex64::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn source_equivalent_terminal_current() {
        let src =
            SourceEquivalent::from_thevenin(Phasor::new(100.0, 5.0), Complex64::new(0.5, 2.0))
                .unwrap();
        let vt = Phasor::new(90.0, -3.0);
        let thevenin = (src.e_source.to_complex() - vt.to_complex()) / src.z;
        assert!((src.terminal_current(vt).to_complex() - thevenin).norm() < 1e-12);
    }

    #[test]
    fn power_of_45kw_reference() {
        let v = DqPair::new(V_NOM, 0.0, 0.0);
        let s = three_phase_power(v, DqPair::new(176.65, 0.0, 0.0));
        assert!((s.p - 45_000.0).abs() < 1.0, "p = {}", s.p);
        assert_eq!(s.q, 0.0);
        let s = three_phase_power(v, DqPair::new(0.0, 0.0, 0.0));
        assert_eq!((s.p, s.q), (0.0, 0.0));
    }

    #[test]
    fn negative_q_current_injects_positive_vars() {
        let s = three_phase_power(DqPair::new(V_NOM, 0.0, 0.0), DqPair::new(0.0, -1.0, 0.0));
        assert_eq!(s.p, 0.0);
        assert_relative_eq!(s.q, 254.745, max_relative = 1e-12);
    }

    #[test]
    #[should_panic(expected = "differs from current frame")]
    fn power_in_mismatched_frames_panics() {
        three_phase_power(DqPair::new(1.0, 0.0, 0.0), DqPair::new(1.0, 0.0, 0.1));
    }

    #[test]
    fn nominal_peak_phase_voltage() {
        assert!((peak_phase_from_ll_rms(208.0) - V_NOM).abs() < 5e-3);
    }
}
