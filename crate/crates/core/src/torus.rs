//! Exact shear maps of the randomized ABC flow on T³ = ℝ³/(2πℤ)³.
//!
//! One iteration applies the A-, B- and C-shears in that order:
//!
//! ```text
//! A: (x, y, z) -> (x + A sin(z+α), y + A cos(z+α), z)
//! B: (x, y, z) -> (x, y + B sin(x+β), z + B cos(x+β))
//! C: (x, y, z) -> (x + C cos(y+γ), y, z + C sin(y+γ))
//! ```
//!
//! Each shear integrates one unit of time of the piecewise-constant velocity
//! field exactly, so a full iteration corresponds to three time units.

use std::f64::consts::TAU;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Reduce an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle(v: f64) -> f64 {
    // one-period shifts agree exactly with rem_euclid and avoid the fmod
    let r = if (0.0..TAU).contains(&v) {
        return v;
    } else if (-TAU..0.0).contains(&v) {
        v + TAU
    } else if (TAU..2.0 * TAU).contains(&v) {
        v - TAU
    } else {
        v.rem_euclid(TAU)
    };
    // adding TAU can round up to TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Reduce a displacement into `(-π, π]`.
#[inline]
pub fn wrap_signed(v: f64) -> f64 {
    let r = wrap_angle(v);
    if r > std::f64::consts::PI {
        r - TAU
    } else {
        r
    }
}

/// A point of the 3-torus with coordinates kept in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TorusPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x: wrap_angle(x),
            y: wrap_angle(y),
            z: wrap_angle(z),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Per-axis signed displacement `other - self`, each component in `(-π, π]`.
    pub fn displacement_to(&self, other: &TorusPoint) -> [f64; 3] {
        [
            wrap_signed(other.x - self.x),
            wrap_signed(other.y - self.y),
            wrap_signed(other.z - self.z),
        ]
    }

    /// Euclidean length of the shortest per-axis displacement.
    pub fn dist(&self, other: &TorusPoint) -> f64 {
        let d = self.displacement_to(other);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// One iteration's noise `ω = (A, B, C, α, β, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    pub amp_a: f64,
    pub amp_b: f64,
    pub amp_c: f64,
    pub phase_a: f64,
    pub phase_b: f64,
    pub phase_c: f64,
}

impl NoiseSample {
    pub fn new(amp_a: f64, amp_b: f64, amp_c: f64, phase_a: f64, phase_b: f64, phase_c: f64) -> Self {
        Self {
            amp_a,
            amp_b,
            amp_c,
            phase_a: wrap_angle(phase_a),
            phase_b: wrap_angle(phase_b),
            phase_c: wrap_angle(phase_c),
        }
    }

    /// All amplitudes zero: the identity map.
    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    /// Stacked coordinates in the fixed order (A, B, C, α, β, γ).
    pub fn to_array(self) -> [f64; 6] {
        [
            self.amp_a,
            self.amp_b,
            self.amp_c,
            self.phase_a,
            self.phase_b,
            self.phase_c,
        ]
    }

    /// Inverse of [`NoiseSample::to_array`]. Phases are not wrapped so that
    /// finite-difference perturbations survive unchanged.
    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            amp_a: a[0],
            amp_b: a[1],
            amp_c: a[2],
            phase_a: a[3],
            phase_b: a[4],
            phase_c: a[5],
        }
    }

    pub fn max_amplitude(&self) -> f64 {
        self.amp_a.abs().max(self.amp_b.abs()).max(self.amp_c.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    A,
    B,
    C,
}

/// Apply a single shear and wrap the result.
pub fn shear(axis: Axis, p: TorusPoint, amp: f64, phase: f64) -> TorusPoint {
    let (x, y, z) = (p.x, p.y, p.z);
    match axis {
        Axis::A => {
            let (s, c) = (z + phase).sin_cos();
            TorusPoint::new(x + amp * s, y + amp * c, z)
        }
        Axis::B => {
            let (s, c) = (x + phase).sin_cos();
            TorusPoint::new(x, y + amp * s, z + amp * c)
        }
        Axis::C => {
            let (s, c) = (y + phase).sin_cos();
            TorusPoint::new(x + amp * c, y, z + amp * s)
        }
    }
}

/// One full iteration `f_ω = f_C ∘ f_B ∘ f_A`.
pub fn step(p: TorusPoint, w: &NoiseSample) -> TorusPoint {
    let p = shear(Axis::A, p, w.amp_a, w.phase_a);
    let p = shear(Axis::B, p, w.amp_b, w.phase_b);
    shear(Axis::C, p, w.amp_c, w.phase_c)
}

/// `f_ω⁻¹ = f_A⁻¹ ∘ f_B⁻¹ ∘ f_C⁻¹`, each shear inverted by negating its amplitude.
pub fn inverse_step(p: TorusPoint, w: &NoiseSample) -> TorusPoint {
    let p = shear(Axis::C, p, -w.amp_c, w.phase_c);
    let p = shear(Axis::B, p, -w.amp_b, w.phase_b);
    shear(Axis::A, p, -w.amp_a, w.phase_a)
}

/// A 3×3 real matrix; every Jacobian produced here has unit determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian3(pub Matrix3<f64>);

impl Jacobian3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self(Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        ))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Entries in row-major order `(a11, a12, a13, a21, …, a33)`.
    pub fn row_major(&self) -> [f64; 9] {
        let r = self.rows();
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn max_abs_diff(&self, other: &Jacobian3) -> f64 {
        (self.0 - other.0).amax()
    }
}

impl Mul for Jacobian3 {
    type Output = Jacobian3;
    fn mul(self, rhs: Jacobian3) -> Jacobian3 {
        Jacobian3(self.0 * rhs.0)
    }
}

/// Intermediate shear-composed angles along one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianAux {
    pub big_x: f64,
    pub big_y: f64,
    pub big_z: f64,
    pub phi_aux: f64,
}

impl JacobianAux {
    pub fn new(p: &TorusPoint, w: &NoiseSample) -> Self {
        let big_z = w.phase_a + p.z;
        let big_x = w.phase_b + p.x + w.amp_a * big_z.sin();
        let big_y = w.phase_c + p.y + w.amp_a * big_z.cos() + w.amp_b * big_x.sin();
        let phi_aux = w.amp_b * big_x.cos() * big_z.cos() - big_z.sin();
        Self {
            big_x,
            big_y,
            big_z,
            phi_aux,
        }
    }
}

/// Analytic `D_p f_ω` in the compact form built from [`JacobianAux`].
pub fn jacobian_step(p: TorusPoint, w: &NoiseSample) -> Jacobian3 {
    let aux = JacobianAux::new(&p, w);
    let (a, b, c) = (w.amp_a, w.amp_b, w.amp_c);
    let (sx, cx) = aux.big_x.sin_cos();
    let (sy, cy) = aux.big_y.sin_cos();
    let cz = aux.big_z.cos();
    let phi = aux.phi_aux;
    Jacobian3::from_rows([
        [1.0 - b * c * cx * sy, -c * sy, -a * (c * phi * sy - cz)],
        [b * cx, 1.0, a * phi],
        [b * (c * cx * cy - sx), c * cy, 1.0 + a * (c * phi * cy - b * cz * sx)],
    ])
}

/// `(D_p f_ω)⁻¹` by the chain rule on the inverted shears,
/// `DA⁻¹(Z) · DB⁻¹(X) · DC⁻¹(Y)`.
pub fn jacobian_inverse_step(p: TorusPoint, w: &NoiseSample) -> Jacobian3 {
    let aux = JacobianAux::new(&p, w);
    let (a, b, c) = (w.amp_a, w.amp_b, w.amp_c);
    let (sx, cx) = aux.big_x.sin_cos();
    let (sy, cy) = aux.big_y.sin_cos();
    let (sz, cz) = aux.big_z.sin_cos();
    let da_inv = Matrix3::new(1.0, 0.0, -a * cz, 0.0, 1.0, a * sz, 0.0, 0.0, 1.0);
    let db_inv = Matrix3::new(1.0, 0.0, 0.0, -b * cx, 1.0, 0.0, b * sx, 0.0, 1.0);
    let dc_inv = Matrix3::new(1.0, c * sy, 0.0, 0.0, 1.0, 0.0, 0.0, -c * cy, 1.0);
    Jacobian3(da_inv * db_inv * dc_inv)
}

/// Returns `(f^n_ω(p), D_p f^n_ω)`, left-multiplying one-step Jacobians
/// evaluated along the trajectory.
pub fn iterate_with_cocycle(p: TorusPoint, path: &[NoiseSample]) -> (TorusPoint, Jacobian3) {
    path.iter().fold((p, Jacobian3::identity()), |(q, m), w| {
        (step(q, w), jacobian_step(q, w) * m)
    })
}

/// `f^n_ω(p)` without the cocycle.
pub fn iterate(p: TorusPoint, path: &[NoiseSample]) -> TorusPoint {
    path.iter().fold(p, step)
}

/// `(f^n_ω)⁻¹(p)`: inverse steps applied from the last sample backwards.
pub fn iterate_inverse(p: TorusPoint, path: &[NoiseSample]) -> TorusPoint {
    path.iter().rev().fold(p, inverse_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn sample(a: [f64; 6]) -> NoiseSample {
        NoiseSample::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    // Central differences of `step`, done on unwrapped displacements.
    fn fd_jacobian(p: TorusPoint, w: &NoiseSample, h: f64) -> Jacobian3 {
        let mut rows = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut plus = p.to_array();
            let mut minus = p.to_array();
            plus[j] += h;
            minus[j] -= h;
            let fp = step(TorusPoint::from_array(plus), w);
            let fm = step(TorusPoint::from_array(minus), w);
            let d = fm.displacement_to(&fp);
            for i in 0..3 {
                rows[i][j] = d[i] / (2.0 * h);
            }
        }
        Jacobian3::from_rows(rows)
    }

    fn adjugate_inverse(m: &Jacobian3) -> Jacobian3 {
        let a = m.rows();
        let det = m.det();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
        Jacobian3::from_rows([
            [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
            [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
        ])
    }

    #[test]
    fn zero_amplitude_shear_is_identity() {
        let p = TorusPoint::origin();
        assert_eq!(shear(Axis::A, p, 0.0, 1.23), p);
    }

    #[test]
    fn shear_a_examples() {
        let q = shear(Axis::A, TorusPoint::origin(), PI, FRAC_PI_2);
        assert_abs_diff_eq!(q.x, PI, epsilon = 1e-15);
        assert!(q.y.min(TAU - q.y) < 1e-15);
        assert_eq!(q.z, 0.0);

        let q = shear(Axis::A, TorusPoint::new(0.3, 5.9, 1.1), 2.0, 0.7);
        assert_abs_diff_eq!(q.x, 2.247_695_261_756_390_4, epsilon = 1e-14);
        assert_abs_diff_eq!(q.y, 5.445_595_810_613_825_9, epsilon = 1e-14);
        assert_abs_diff_eq!(q.z, 1.1, epsilon = 1e-15);
    }

    #[test]
    fn step_examples() {
        let p = TorusPoint::new(1.0, 2.0, 3.0);
        assert_eq!(step(p, &sample([0.0, 0.0, 0.0, 0.4, 0.1, 2.0])), p);

        let q = step(TorusPoint::origin(), &sample([PI, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert!(q.dist(&TorusPoint::new(0.0, PI, 0.0)) < 1e-15);

        let q = step(p, &sample([0.5, -0.7, 1.1, 0.2, 4.0, 5.5]));
        assert_abs_diff_eq!(q.x, 1.163_819_209_257_441_2, epsilon = 1e-14);
        assert_abs_diff_eq!(q.y, 2.177_608_377_160_615_9, epsilon = 1e-14);
        assert_abs_diff_eq!(q.z, 3.904_045_160_207_849_6, epsilon = 1e-14);
    }

    #[test]
    fn inverse_step_examples() {
        let p = TorusPoint::new(0.1, 0.2, 0.3);
        let w = sample([1.0, 2.0, 3.0, 0.4, 0.5, 0.6]);
        assert!(inverse_step(step(p, &w), &w).dist(&p) < 1e-12);

        let q = inverse_step(TorusPoint::new(0.0, PI, 0.0), &sample([PI, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert!(q.dist(&TorusPoint::origin()) < 1e-15);

        assert_eq!(inverse_step(p, &NoiseSample::identity()), p);
    }

    #[test]
    fn jacobian_examples() {
        let w = sample([0.0, 0.0, 0.0, FRAC_PI_2, FRAC_PI_2, FRAC_PI_2]);
        assert_eq!(jacobian_step(TorusPoint::origin(), &w), Jacobian3::identity());

        // high-precision central differences (40 digits, h = 1e-15)
        let expected = Jacobian3::from_rows([
            [0.978_731_888_148_716_49, 0.765_466_465_134_451_18, 1.415_587_989_402_530_6],
            [-0.027_784_511_562_564_463, 1.0, 0.980_237_306_484_410_72],
            [0.385_882_035_331_524_09, 0.473_350_917_137_136_26, 1.729_453_185_112_527_2],
        ]);
        let p = TorusPoint::new(0.3, 1.7, 5.2);
        let w = sample([1.2, -0.4, 0.9, 0.1, 2.2, 3.3]);
        let j = jacobian_step(p, &w);
        assert!(j.max_abs_diff(&expected) < 1e-13);
        assert!(j.max_abs_diff(&fd_jacobian(p, &w, 1e-6)) < 1e-6);
    }

    #[test]
    fn inverse_jacobian_matches_adjugate() {
        let w = sample([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let j = jacobian_step(TorusPoint::origin(), &w);
        let inv = jacobian_inverse_step(TorusPoint::origin(), &w);
        assert!(inv.max_abs_diff(&adjugate_inverse(&j)) < 1e-14);
        let expected = Jacobian3::from_rows([
            [1.0, 1.381_773_290_676_036_2, -1.0],
            [-1.0, 0.158_529_015_192_103_49, 0.0],
            [0.0, -0.540_302_305_868_139_72, 1.0],
        ]);
        assert!(inv.max_abs_diff(&expected) < 1e-14);
        assert_eq!(
            jacobian_inverse_step(TorusPoint::new(1.0, 2.0, 3.0), &NoiseSample::identity()),
            Jacobian3::identity()
        );
    }

    // The closed-form inverse carries one auxiliary symbol; the chain-rule
    // inverse agrees with it when that symbol is B sin X sin Y − cos Y.
    #[test]
    fn closed_form_inverse_with_inferred_auxiliary() {
        let p = TorusPoint::new(0.7, 2.9, 4.4);
        let w = sample([2.1, -1.3, 0.8, 1.9, 5.1, 0.2]);
        let aux = JacobianAux::new(&p, &w);
        let (a, b, c) = (w.amp_a, w.amp_b, w.amp_c);
        let (sx, cx) = aux.big_x.sin_cos();
        let (sy, cy) = aux.big_y.sin_cos();
        let (sz, cz) = aux.big_z.sin_cos();
        let psi = b * sx * sy - cy;
        let closed = Jacobian3::from_rows([
            [1.0 - a * b * sx * cz, -c * (a * psi * cz - sy), -a * cz],
            [b * (a * sx * sz - cx), 1.0 + c * (a * psi * sz - b * cx * sy), a * sz],
            [b * sx, c * psi, 1.0],
        ]);
        assert!(jacobian_inverse_step(p, &w).max_abs_diff(&closed) < 1e-13);
    }

    #[test]
    fn cocycle_edge_cases() {
        let p = TorusPoint::new(0.5, 0.6, 0.7);
        let (q, m) = iterate_with_cocycle(p, &[]);
        assert_eq!(q, p);
        assert_eq!(m, Jacobian3::identity());

        let path: Vec<_> = (0..5)
            .map(|i| {
                let t = i as f64;
                sample([1.0 + 0.3 * t, -2.0 + t, 0.5 * t, t, 2.0 * t, 3.0 * t])
            })
            .collect();
        let (full_p, full_m) = iterate_with_cocycle(p, &path);
        let (mid_p, mid_m) = iterate_with_cocycle(p, &path[..2]);
        let (end_p, end_m) = iterate_with_cocycle(mid_p, &path[2..]);
        assert!(full_p.dist(&end_p) < 1e-12);
        assert!(full_m.max_abs_diff(&(end_m * mid_m)) < 1e-10);
    }

    #[test]
    fn wrap_edges() {
        assert_eq!(wrap_angle(-1e-18), 0.0);
        assert!(wrap_angle(TAU) < TAU);
        assert_eq!(wrap_signed(PI), PI);
        assert_eq!(wrap_signed(-PI), PI);
        assert!(TorusPoint::new(0.1, 0.0, 0.0).dist(&TorusPoint::new(TAU - 0.1, 0.0, 0.0)) < 0.2 + 1e-15);
    }

    fn point() -> impl Strategy<Value = TorusPoint> {
        (0.0..TAU, 0.0..TAU, 0.0..TAU).prop_map(|(x, y, z)| TorusPoint::new(x, y, z))
    }

    fn noise() -> impl Strategy<Value = NoiseSample> {
        (
            -PI..PI,
            -PI..PI,
            -PI..PI,
            0.0..TAU,
            0.0..TAU,
            0.0..TAU,
        )
            .prop_map(|(a, b, c, al, be, ga)| NoiseSample::new(a, b, c, al, be, ga))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn step_stays_on_torus(p in point(), w in noise()) {
            let q = step(p, &w);
            for c in q.to_array() {
                prop_assert!((0.0..TAU).contains(&c));
            }
        }

        #[test]
        fn unit_determinant(p in point(), w in noise()) {
            prop_assert!((jacobian_step(p, &w).det() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn analytic_matches_finite_differences(p in point(), w in noise()) {
            prop_assert!(jacobian_step(p, &w).max_abs_diff(&fd_jacobian(p, &w, 1e-6)) < 1e-6);
        }

        #[test]
        fn inverse_roundtrip(p in point(), w in noise()) {
            prop_assert!(inverse_step(step(p, &w), &w).dist(&p) < 1e-12);
            let prod = jacobian_inverse_step(p, &w) * jacobian_step(p, &w);
            prop_assert!(prod.max_abs_diff(&Jacobian3::identity()) < 1e-10);
        }

        #[test]
        fn cocycle_splits(p in point(), ws in proptest::collection::vec(noise(), 0..8), cut in 0usize..8) {
            let cut = cut.min(ws.len());
            let (full_p, full_m) = iterate_with_cocycle(p, &ws);
            let (mid_p, mid_m) = iterate_with_cocycle(p, &ws[..cut]);
            let (end_p, end_m) = iterate_with_cocycle(mid_p, &ws[cut..]);
            prop_assert!(full_p.dist(&end_p) < 1e-12);
            prop_assert!(full_m.max_abs_diff(&(end_m * mid_m)) < 1e-10 * full_m.frobenius().max(1.0));
        }
    }
}
