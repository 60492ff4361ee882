//! Finite-difference certificates for the submersion and surjectivity
//! conditions of the one-point, projective and two-point chains.
//!
//! Noise Jacobians differentiate a flow functional with respect to the
//! stacked parameters of an n-step path. Columns are step-major:
//! `(A₁,B₁,C₁,α₁,β₁,γ₁, …, Aₙ,…,γₙ)`. Reference matrices written in another
//! column order are compared after an explicit column assignment search.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyapunov::UnitVector3;
use crate::noise::auxiliary_rng;
use crate::torus::{iterate, iterate_with_cocycle, jacobian_step, step, wrap_signed, NoiseSample, TorusPoint};
use rand::Rng;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// The map of the noise whose derivative is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Functional {
    /// `ωⁿ ↦ f_{ωⁿ}(x)`, 3 rows.
    Flow(TorusPoint),
    /// `ωⁿ ↦ (f_{ωⁿ}(x), D_x f_{ωⁿ} v / |D_x f_{ωⁿ} v|)`, 6 rows.
    Projective(TorusPoint, UnitVector3),
    /// `ωⁿ ↦ (f_{ωⁿ}(x¹), f_{ωⁿ}(x²))`, 6 rows.
    TwoPoint(TorusPoint, TorusPoint),
    /// `ωⁿ ↦ D_x f_{ωⁿ}` in row-major order, 9 rows.
    JacobianEntries(TorusPoint),
}

impl Functional {
    pub fn rows(&self) -> usize {
        match self {
            Self::Flow(_) => 3,
            Self::Projective(..) | Self::TwoPoint(..) => 6,
            Self::JacobianEntries(_) => 9,
        }
    }

    /// Row indices holding torus coordinates, whose differences are wrapped.
    fn angular_rows(&self) -> &'static [usize] {
        match self {
            Self::Flow(_) | Self::Projective(..) => &[0, 1, 2],
            Self::TwoPoint(..) => &[0, 1, 2, 3, 4, 5],
            Self::JacobianEntries(_) => &[],
        }
    }

    pub fn eval(&self, path: &[NoiseSample]) -> Vec<f64> {
        match *self {
            Self::Flow(x) => iterate(x, path).to_array().to_vec(),
            Self::Projective(x, v) => {
                let (y, m) = iterate_with_cocycle(x, path);
                let u = m.apply(&v.as_vector());
                let u = u / u.norm();
                let mut out = y.to_array().to_vec();
                out.extend_from_slice(u.as_slice());
                out
            }
            Self::TwoPoint(a, b) => {
                let mut out = iterate(a, path).to_array().to_vec();
                out.extend_from_slice(&iterate(b, path).to_array());
                out
            }
            Self::JacobianEntries(x) => iterate_with_cocycle(x, path).1.row_major().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseJacobian {
    pub steps: usize,
    pub h: f64,
    pub matrix: DMatrix<f64>,
}

/// Central differences of `functional` in each of the `6n` noise coordinates.
pub fn fd_noise_jacobian(functional: &Functional, omega: &[NoiseSample], h: f64) -> Result<NoiseJacobian> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h must lie in [1e-7, 1e-3], got {h}")));
    }
    let base: Vec<[f64; 6]> = omega.iter().map(|w| w.to_array()).collect();
    let rows = functional.rows();
    let cols = 6 * omega.len();
    let angular = functional.angular_rows();
    let mut m = DMatrix::zeros(rows, cols);
    let perturbed = |col: usize, delta: f64| -> Vec<f64> {
        let mut p = base.clone();
        p[col / 6][col % 6] += delta;
        let path: Vec<NoiseSample> = p.into_iter().map(NoiseSample::from_array).collect();
        functional.eval(&path)
    };
    for col in 0..cols {
        let plus = perturbed(col, h);
        let minus = perturbed(col, -h);
        for r in 0..rows {
            let mut d = plus[r] - minus[r];
            if angular.contains(&r) {
                d = wrap_signed(d);
            }
            m[(r, col)] = d / (2.0 * h);
        }
    }
    Ok(NoiseJacobian {
        steps: omega.len(),
        h,
        matrix: m,
    })
}

/// Singular values above `tol` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

/// Orthonormal basis (as columns) of the null space of `m`.
pub fn kernel_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    // pad to square so that the SVD returns a full right basis
    let mut sq = DMatrix::zeros(cols.max(m.nrows()), cols);
    sq.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol * max)
        .collect();
    DMatrix::from_fn(cols, idx.len(), |r, c| vt[(idx[c], r)])
}

/// Finds `perm` with `computed[:, perm[j]] ≈ reference[:, j]` for every column,
/// by depth-first assignment.
pub fn match_columns(computed: &DMatrix<f64>, reference: &DMatrix<f64>, tol: f64) -> Option<Vec<usize>> {
    if computed.shape() != reference.shape() {
        return None;
    }
    let n = reference.ncols();
    let close = |i: usize, j: usize| (computed.column(i) - reference.column(j)).amax() <= tol;
    let candidates: Vec<Vec<usize>> = (0..n).map(|j| (0..n).filter(|&i| close(i, j)).collect()).collect();
    fn assign(j: usize, cand: &[Vec<usize>], used: &mut [bool], perm: &mut Vec<usize>) -> bool {
        if j == cand.len() {
            return true;
        }
        for &i in &cand[j] {
            if !used[i] {
                used[i] = true;
                perm.push(i);
                if assign(j + 1, cand, used, perm) {
                    return true;
                }
                perm.pop();
                used[i] = false;
            }
        }
        false
    }
    let mut perm = Vec::with_capacity(n);
    assign(0, &candidates, &mut vec![false; n], &mut perm).then_some(perm)
}

fn permute_columns(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), perm.len(), |r, c| m[(r, perm[c])])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub computed: f64,
    pub target: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Only load-bearing checks decide the certificate.
    pub load_bearing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub name: String,
    pub passed: bool,
    pub h: f64,
    pub rank_tol: f64,
    pub checks: Vec<Check>,
    /// Entry-level disagreements with reference matrices.
    pub warnings: Vec<String>,
    /// Reference column `j` corresponds to computed column `column_map[j]`.
    pub column_map: Option<Vec<usize>>,
}

impl CertificateReport {
    fn new(name: &str, h: f64, rank_tol: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: true,
            h,
            rank_tol,
            checks: Vec::new(),
            warnings: Vec::new(),
            column_map: None,
        }
    }

    fn check(&mut self, label: &str, computed: f64, target: f64, tolerance: f64, load_bearing: bool) {
        let passed = (computed - target).abs() <= tolerance;
        if load_bearing && !passed {
            self.passed = false;
        }
        self.checks.push(Check {
            label: label.to_string(),
            computed,
            target,
            tolerance,
            passed,
            load_bearing,
        });
    }

    /// Records every entry of `computed` farther than `tol` from `reference`;
    /// returns the largest deviation.
    fn compare_entries(&mut self, what: &str, computed: &DMatrix<f64>, reference: &DMatrix<f64>, tol: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..reference.nrows() {
            for c in 0..reference.ncols() {
                let d = (computed[(r, c)] - reference[(r, c)]).abs();
                worst = worst.max(d);
                if d > tol {
                    self.warnings.push(format!(
                        "{what} entry ({}, {}): computed {:.6}, reference {:.6}",
                        r + 1,
                        c + 1,
                        computed[(r, c)],
                        reference[(r, c)]
                    ));
                }
            }
        }
        worst
    }
}

/// Reference matrices at the certificate parameters, as exact expressions in π.
pub mod expected {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    pub fn one_point() -> DMatrix<f64> {
        let mut m = DMatrix::zeros(3, 6);
        m.view_mut((0, 0), (3, 3)).fill_with_identity();
        m
    }

    pub fn projective() -> DMatrix<f64> {
        let s = 1.0 / 2f64.sqrt();
        let q = -1.0 / (2.0 * 2f64.sqrt());
        #[rustfmt::skip]
        let v = [
            0.0, 0.0, -1.0, PI, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            -1.0, 1.0, 0.0, 0.0, 0.0, -1.0,
            s, 0.0, 0.0, 0.0, 0.0, s,
            0.0, 0.0, q, 0.0, 0.0, 0.0,
            0.0, 0.0, q, 0.0, 0.0, 0.0,
        ];
        mat(6, 6, &v)
    }

    pub fn two_point() -> DMatrix<f64> {
        let p2 = PI * PI;
        #[rustfmt::skip]
        let v = [
            0.0, 0.0, -1.0, PI, 0.0, 0.0,
            1.0, 0.0, 0.0, p2, PI, 0.0,
            -1.0, 1.0, 0.0, -p2, -PI, -1.0,
            1.0, -1.0, 0.0, -PI, 0.0, 1.0,
            0.0, -1.0, 0.0, -PI, 0.0, 0.0,
            PI, 0.0, -1.0, 0.0, PI, 0.0,
        ];
        mat(6, 6, &v)
    }

    /// `D_{ω²}Φ`, 3×12.
    pub fn flow_derivative() -> DMatrix<f64> {
        let p2 = PI * PI;
        #[rustfmt::skip]
        let v = [
            1.0 - p2, 0.0, -PI, 0.0, PI, 1.0, -p2, -PI, -p2, 0.0, PI, 0.0,
            p2 - 1.0, -1.0, PI - 1.0, 0.0, -PI, 0.0, p2 - PI, PI, p2, -1.0, -PI, 0.0,
            PI, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, PI, 0.0, 0.0, 0.0,
        ];
        mat(3, 12, &v)
    }

    /// Kernel basis `𝒦`, 12×9.
    pub fn kernel() -> DMatrix<f64> {
        let i1 = 1.0 / PI;
        let i2 = i1 * i1;
        let mut k = DMatrix::zeros(12, 9);
        let top = [
            [0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, i1, i1],
            [0.0, -1.0, -1.0, i1, 1.0, 0.0, 1.0 - i1, -i2, 1.0 - i2],
            [0.0, 1.0, 0.0, -i1, -1.0, -PI, i1, i2, -1.0 + i2],
        ];
        for (r, row) in top.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                k[(r, c)] = *v;
            }
        }
        for r in 3..12 {
            k[(r, 11 - r)] = 1.0;
        }
        k
    }

    /// `𝒜 = (𝒜₁|𝒜₂)`, 9×12.
    pub fn jacobian_derivative() -> DMatrix<f64> {
        let (p, p2, p3, p4) = (PI, PI * PI, PI.powi(3), PI.powi(4));
        #[rustfmt::skip]
        let a1 = [
            p2, -p, -p, 0.0, 0.0, 0.0,
            0.0, 0.0, p2, 0.0, 1.0, 0.0,
            -p, -1.0, -p3, 0.0, -p, 0.0,
            p3 - p2 + p, p, p, p2 - 1.0, -p2, 0.0,
            0.0, 0.0, -p2, -p, -1.0, 0.0,
            p2 + p - 1.0, 1.0, p3, p2 + p, 0.0, 0.0,
            (p2 - 1.0).powi(2), 0.0, p3 - p + 1.0, 0.0, -p3 + p, p2 - 1.0,
            -p3 + p, 0.0, -p2 - p, 0.0, p2, -p + 1.0,
            p * (p + 1.0).powi(2) * (p - 1.0), 0.0, p2 * (p + 2.0), 0.0, -p2 * (p + 1.0), p2,
        ];
        #[rustfmt::skip]
        let a2 = [
            0.0, 0.0, p2, 0.0, 0.0, 0.0,
            p3, 0.0, 0.0, 0.0, -p2, 0.0,
            -p4 + p3 - p, 0.0, 0.0, 0.0, p3, 0.0,
            0.0, p2, p3 - p2 + p, 0.0, 0.0, 0.0,
            -p3, 0.0, 0.0, 0.0, p2, 0.0,
            p4 - p3 + p, p, p2, 0.0, -p3, 0.0,
            p2 * (p2 - 1.0), p3 - p, p2 * (p2 - 1.0), -p2 + 1.0, -p3 + p, 0.0,
            -p3 - p2, -p2, -p3, p, p2 + p, 0.0,
            p4 + 2.0 * p3 - p2, p3 + p2, p4 + p3, -p2 - p, -p3 - 2.0 * p2, 0.0,
        ];
        let mut a = DMatrix::zeros(9, 12);
        a.view_mut((0, 0), (9, 6)).copy_from(&mat(9, 6, &a1));
        a.view_mut((0, 6), (9, 6)).copy_from(&mat(9, 6, &a2));
        a
    }

    /// `𝒜𝒦 = ((𝒜𝒦)₁|(𝒜𝒦)₂)`, 9×9.
    pub fn product() -> DMatrix<f64> {
        let (p, p2, p3) = (PI, PI * PI, PI.powi(3));
        let (i1, i2) = (1.0 / PI, 1.0 / (PI * PI));
        #[rustfmt::skip]
        let v = [
            0.0, 0.0, p, 0.0, 0.0, p2, -p, p, p,
            0.0, 0.0, 0.0, -p2, -p2, 0.0, p, 2.0, -p2 + 1.0,
            0.0, 1.0, 1.0, p2 + p - i1, p3 - 1.0, p3 - p, -p2 - 1.0 + i1, -2.0 * p - 1.0 + i2, p3 - p - 2.0 + i2,
            0.0, 0.0, -p, 0.0, p2, -p2, p, -p + 1.0, 2.0 * p2 - p,
            0.0, 0.0, 0.0, p, p2, 0.0, -p, -2.0, p2 - p - 1.0,
            0.0, -1.0, -1.0, i1 * (p - 1.0) * (p + 1.0).powi(2), -p3 + p + 1.0, -p3 + p, p2 + 1.0 - i1,
                2.0 * p + 1.0 - i1 - i2, -p3 + p2 + 3.0 * p + 2.0 - i1 - i2,
            0.0, 1.0, 1.0 - p2, -i1, -1.0, -p, 2.0 * p2 - 2.0 + i1, i2, -1.0 + i2,
            0.0, 0.0, p, 1.0, p, 0.0, -2.0 * p, -i1, p - i1,
            0.0, 0.0, -p2 - p, -p, -p2, -p2, 2.0 * p * (p + 1.0), 1.0, -p2 + 1.0,
        ];
        mat(9, 9, &v)
    }
}

fn one_point_parameters() -> (TorusPoint, NoiseSample) {
    (
        TorusPoint::origin(),
        NoiseSample::new(0.0, 0.0, 0.0, FRAC_PI_2, FRAC_PI_2, FRAC_PI_2),
    )
}

/// Rank-3 certificate of `ω ↦ f_ω(x)` with entry match against `[I₃|0]`.
pub fn verify_one_point_submersion_at(x: TorusPoint, w: NoiseSample, h: f64) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("one-point submersion", h, DEFAULT_RANK_TOL);
    let m = fd_noise_jacobian(&Functional::Flow(x), &[w], h)?.matrix;
    rep.check("rank", numerical_rank(&m, DEFAULT_RANK_TOL) as f64, 3.0, 0.0, true);
    let (x0, w0) = one_point_parameters();
    if x == x0 && w == w0 {
        let worst = rep.compare_entries("D_ω Φ", &m, &expected::one_point(), 1e-6);
        rep.check("max |D_ω Φ − [I|0]|", worst, 0.0, 1e-6, true);
    }
    Ok(rep)
}

pub fn verify_one_point_submersion() -> Result<CertificateReport> {
    let (x, w) = one_point_parameters();
    verify_one_point_submersion_at(x, w, DEFAULT_H)
}

fn projective_parameters() -> (TorusPoint, UnitVector3, NoiseSample) {
    (
        TorusPoint::origin(),
        UnitVector3 { vx: 0.0, vy: 1.0, vz: 0.0 },
        NoiseSample::new(PI, 0.0, 1.0, 0.0, 0.0, 0.0),
    )
}

/// Rank ≥ 5 certificate of the projective functional; entries are compared
/// with the reference matrix but only reported.
pub fn verify_projective_submersion_at(
    x: TorusPoint,
    v: UnitVector3,
    w: NoiseSample,
    h: f64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("projective submersion", h, DEFAULT_RANK_TOL);
    let m = fd_noise_jacobian(&Functional::Projective(x, v), &[w], h)?.matrix;
    let rank = numerical_rank(&m, DEFAULT_RANK_TOL);
    rep.check("rank ≥ 5", rank.min(5) as f64, 5.0, 0.0, true);
    rep.check("rank", rank as f64, 5.0, 0.0, false);
    let (x0, v0, w0) = projective_parameters();
    if x == x0 && v == v0 && w == w0 {
        let reference = expected::projective();
        let map = match_columns(&m, &reference, 1e-4).unwrap_or_else(|| (0..6).collect());
        let worst = rep.compare_entries("D_ω Φ̂", &permute_columns(&m, &map), &reference, 1e-4);
        rep.check("max entry deviation", worst, 0.0, 1e-4, false);
        rep.column_map = Some(map);
    }
    Ok(rep)
}

pub fn verify_projective_submersion() -> Result<CertificateReport> {
    let (x, v, w) = projective_parameters();
    verify_projective_submersion_at(x, v, w, DEFAULT_H)
}

fn two_point_parameters() -> (TorusPoint, TorusPoint, NoiseSample) {
    (
        TorusPoint::origin(),
        TorusPoint::new(FRAC_PI_2, FRAC_PI_2, FRAC_PI_2),
        NoiseSample::new(PI, PI, 1.0, 0.0, 0.0, 0.0),
    )
}

/// `|det| = 2π²` and rank-6 certificate of the two-point functional.
pub fn verify_two_point_submersion_at(
    x1: TorusPoint,
    x2: TorusPoint,
    w: NoiseSample,
    h: f64,
) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("two-point submersion", h, DEFAULT_RANK_TOL);
    let m = fd_noise_jacobian(&Functional::TwoPoint(x1, x2), &[w], h)?.matrix;
    let target = 2.0 * PI * PI;
    rep.check("|det|", m.determinant().abs(), target, 1e-3 * target, true);
    rep.check("rank", numerical_rank(&m, DEFAULT_RANK_TOL) as f64, 6.0, 0.0, true);
    let (a, b, w0) = two_point_parameters();
    if x1 == a && x2 == b && w == w0 {
        let reference = expected::two_point();
        let map = match_columns(&m, &reference, 1e-4).unwrap_or_else(|| (0..6).collect());
        let worst = rep.compare_entries("D_ω Φ⁽²⁾", &permute_columns(&m, &map), &reference, 1e-4);
        rep.check("max entry deviation", worst, 0.0, 1e-4, false);
        rep.column_map = Some(map);
    }
    Ok(rep)
}

pub fn verify_two_point_submersion() -> Result<CertificateReport> {
    let (a, b, w) = two_point_parameters();
    verify_two_point_submersion_at(a, b, w, DEFAULT_H)
}

pub fn surjectivity_parameters() -> (TorusPoint, [NoiseSample; 2]) {
    (
        TorusPoint::origin(),
        [
            NoiseSample::new(PI, PI, PI, FRAC_PI_2, FRAC_PI_2, FRAC_PI_2),
            NoiseSample::new(PI, 1.0, 0.0, 0.0, 0.0, 0.0),
        ],
    )
}

/// Surjectivity of `D_{ω²}Ψ` restricted to `ker D_{ω²}Φ` onto the 8-dimensional
/// tangent space of `SL₃(ℝ)`.
///
/// Load-bearing: the reference kernel annihilates the computed `D_{ω²}Φ`
/// (after column matching) and has rank 9, and `𝒜` restricted to an
/// orthonormal basis of the computed kernel has rank 8. Entry-level
/// comparisons with the reference `D_{ω²}Φ`, `𝒜` and `𝒜𝒦` are reported only.
pub fn verify_lyapunov_surjectivity_with(h: f64) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("Lyapunov surjectivity", h, DEFAULT_RANK_TOL);
    let (x, omega) = surjectivity_parameters();
    let d_phi = fd_noise_jacobian(&Functional::Flow(x), &omega, h)?.matrix;
    let a = fd_noise_jacobian(&Functional::JacobianEntries(x), &omega, h)?.matrix;

    // (a) columns of the reference D_{ω²}Φ located among the computed ones
    let ref_phi = expected::flow_derivative();
    let map = match match_columns(&d_phi, &ref_phi, 1e-3) {
        Some(m) => {
            rep.check("D_{ω²}Φ columns matched", 1.0, 1.0, 0.0, false);
            m
        }
        None => {
            rep.check("D_{ω²}Φ columns matched", 0.0, 1.0, 0.0, false);
            rep.warnings
                .push("no column assignment matches the reference D_{ω²}Φ; using computed order".into());
            (0..12).collect()
        }
    };
    let phi_m = permute_columns(&d_phi, &map);
    let a_m = permute_columns(&a, &map);
    let worst = rep.compare_entries("D_{ω²}Φ", &phi_m, &ref_phi, 1e-3);
    rep.check("max |D_{ω²}Φ − reference|", worst, 0.0, 1e-3, false);

    // (b) reference kernel
    let k = expected::kernel();
    rep.check("max |D_{ω²}Φ·𝒦|", (&phi_m * &k).amax(), 0.0, 1e-3, true);
    rep.check("rank 𝒦", numerical_rank(&k, DEFAULT_RANK_TOL) as f64, 9.0, 0.0, true);

    // (c) derivative of the Jacobian entries
    let ref_a = expected::jacobian_derivative();
    let worst = rep.compare_entries("𝒜", &a_m, &ref_a, 1e-2);
    rep.check("max |𝒜 − reference|", worst, 0.0, 1e-2, false);

    // (d) rank on the computed kernel, independent of any column order
    let basis = kernel_basis(&d_phi, DEFAULT_RANK_TOL);
    rep.check("dim ker D_{ω²}Φ", basis.ncols() as f64, 9.0, 0.0, true);
    rep.check(
        "rank 𝒜·kernel basis",
        numerical_rank(&(&a * &basis), DEFAULT_RANK_TOL) as f64,
        8.0,
        0.0,
        true,
    );

    // (e) reference product
    let ref_ak = expected::product();
    let worst = rep.compare_entries("𝒜𝒦", &(&ref_a * &k), &ref_ak, 1e-6);
    rep.check("max |𝒜·𝒦 − reference 𝒜𝒦|", worst, 0.0, 1e-6, false);
    rep.check("rank reference 𝒜𝒦", numerical_rank(&ref_ak, DEFAULT_RANK_TOL) as f64, 8.0, 0.0, false);
    rep.column_map = Some(map);
    Ok(rep)
}

pub fn verify_lyapunov_surjectivity() -> Result<CertificateReport> {
    verify_lyapunov_surjectivity_with(DEFAULT_H)
}

/// Unit determinant of the analytic one-step Jacobian over `n_det` random
/// inputs and its agreement with central differences of the map (step
/// `1e−6`) over `n_fd` inputs, at amplitude bound `u_max`.
pub fn verify_jacobian_consistency(u_max: f64, seed: u64, n_det: usize, n_fd: usize) -> Result<CertificateReport> {
    let mut rep = CertificateReport::new("one-step Jacobian", 1e-6, DEFAULT_RANK_TOL);
    let mut rng = auxiliary_rng(seed, 0x4a41, 0);
    let mut draw = || {
        let mut u = || rng.random::<f64>();
        let p = TorusPoint::new(TAU * u(), TAU * u(), TAU * u());
        let a = [u(), u(), u()].map(|v| u_max * (2.0 * v - 1.0));
        let w = NoiseSample::new(a[0], a[1], a[2], TAU * u(), TAU * u(), TAU * u());
        (p, w)
    };
    let mut worst_det: f64 = 0.0;
    for _ in 0..n_det {
        let (p, w) = draw();
        worst_det = worst_det.max((jacobian_step(p, &w).det() - 1.0).abs());
    }
    rep.check("max |det − 1|", worst_det, 0.0, 1e-12, true);
    let h = 1e-6;
    let mut worst_fd: f64 = 0.0;
    for _ in 0..n_fd {
        let (p, w) = draw();
        let j = jacobian_step(p, &w);
        for c in 0..3 {
            let mut plus = p.to_array();
            let mut minus = p.to_array();
            plus[c] += h;
            minus[c] -= h;
            let (fp, fm) = (step(TorusPoint::from_array(plus), &w), step(TorusPoint::from_array(minus), &w));
            let d = fm.displacement_to(&fp);
            for r in 0..3 {
                worst_fd = worst_fd.max((d[r] / (2.0 * h) - j.0[(r, c)]).abs());
            }
        }
    }
    rep.check("max |analytic − FD|", worst_fd, 0.0, 1e-6, true);
    Ok(rep)
}

/// Every certificate at its default parameters.
pub fn verify_all() -> Result<Vec<CertificateReport>> {
    Ok(vec![
        verify_jacobian_consistency(PI, 42, 10_000, 1000)?,
        verify_one_point_submersion()?,
        verify_projective_submersion()?,
        verify_two_point_submersion()?,
        verify_lyapunov_surjectivity()?,
    ])
}

/// Component of `v` outside the column span of `basis` (orthonormal columns).
pub fn residual_outside_span(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let proj = basis * (basis.transpose() * v);
    (v - proj).norm()
}
