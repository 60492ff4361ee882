//! Ideal kinematic dynamo: a passive divergence-free vector field carried by
//! the flow, `B(n, φ_n(x)) = D_x φ_n B₀(x)`.
//!
//! Since every `φ_n` preserves volume, `‖B(n)‖_p^p = ∫ |D_x φ_n B₀(x)|^p dx`,
//! so norms are integrated over starting points on the grid and no field is
//! ever interpolated. Integrals use the normalized measure `dx/(2π)³`.

use nalgebra::Vector3;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyapunov::{LyapunovEstimate, UnitVector3};
use crate::torus::{iterate_inverse, iterate_with_cocycle, jacobian_step, step, Jacobian3, NoiseSample, TorusPoint};
use crate::transport::{fit_exponential_rate, grid_node, wavenumber, RateFit, SpectralScalarField};

/// Grid nodes per parallel work unit; partial sums are reduced in order.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MagneticInitialField {
    Constant([f64; 3]),
    /// `(A sin z + C cos y, B sin x + A cos z, C sin y + B cos x)`.
    Abc { a: f64, b: f64, c: f64 },
}

impl MagneticInitialField {
    pub fn eval(&self, p: &TorusPoint) -> Vector3<f64> {
        match *self {
            Self::Constant(v) => Vector3::from(v),
            Self::Abc { a, b, c } => Vector3::new(
                a * p.z.sin() + c * p.y.cos(),
                b * p.x.sin() + a * p.z.cos(),
                c * p.y.sin() + b * p.x.cos(),
            ),
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Self::Constant(v) => v.iter().all(|c| *c == 0.0),
            Self::Abc { a, b, c } => a == 0.0 && b == 0.0 && c == 0.0,
        }
    }
}

/// `L^p` norm exponent; `p = ∞` is the grid maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormExponent {
    Finite(f64),
    Infinity,
}

impl NormExponent {
    pub fn new(p: f64) -> Result<Self> {
        if p == f64::INFINITY {
            Ok(Self::Infinity)
        } else if p >= 1.0 && p.is_finite() {
            Ok(Self::Finite(p))
        } else {
            Err(Error::InvalidArgument(format!("norm exponent must lie in [1, ∞], got {p}")))
        }
    }

    fn reduce(&self, magnitudes: impl Iterator<Item = f64>, count: usize) -> f64 {
        match *self {
            Self::Infinity => magnitudes.fold(0.0, f64::max),
            Self::Finite(p) => (magnitudes.map(|m| m.powf(p)).sum::<f64>() / count as f64).powf(1.0 / p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthSeries {
    pub p: NormExponent,
    pub grid: usize,
    pub t: Vec<usize>,
    pub values: Vec<f64>,
}

fn check_inputs(b0: &MagneticInitialField, n: usize, t_record: &[usize], len: usize) -> Result<()> {
    if b0.is_zero() {
        return Err(Error::ZeroField);
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("grid size must be at least 2, got {n}")));
    }
    if t_record.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("recorded times must be ascending".into()));
    }
    match t_record.last() {
        Some(&t) if t > len => Err(Error::InvalidArgument(format!("recorded time {t} exceeds path length {len}"))),
        _ => Ok(()),
    }
}

/// `‖B(n)‖_p` at each recorded `n`, by change of variables over the `n³`
/// starting grid.
pub fn magnetic_growth_series(
    b0: &MagneticInitialField,
    path: &[NoiseSample],
    p: NormExponent,
    n: usize,
    t_record: &[usize],
) -> Result<GrowthSeries> {
    check_inputs(b0, n, t_record, path.len())?;
    let nodes = n * n * n;
    let nt = t_record.len();
    // per node, |D_x φ_t B₀(x)| at each recorded t
    let chunks: Vec<Vec<f64>> = (0..nodes.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::with_capacity(CHUNK * nt);
            for idx in c * CHUNK..((c + 1) * CHUNK).min(nodes) {
                let mut x = grid_node(n, idx);
                let mut v = b0.eval(&x);
                let mut done = 0;
                for &t in t_record {
                    while done < t {
                        v = jacobian_step(x, &path[done]).apply(&v);
                        x = step(x, &path[done]);
                        done += 1;
                    }
                    out.push(v.norm());
                }
            }
            out
        })
        .collect();
    let values = (0..nt)
        .map(|ti| p.reduce(chunks.iter().flat_map(|c| c.iter().skip(ti).step_by(nt).copied()), nodes))
        .collect();
    Ok(GrowthSeries {
        p,
        grid: n,
        t: t_record.to_vec(),
        values,
    })
}

/// The field `B(t, y) = D_x φ_t B₀(x)` with `x = φ_t⁻¹(y)` at every grid node `y`.
pub fn pushforward_field(b0: &MagneticInitialField, path: &[NoiseSample], n: usize) -> Vec<Vector3<f64>> {
    (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let x = iterate_inverse(grid_node(n, idx), path);
            iterate_with_cocycle(x, path).1.apply(&b0.eval(&x))
        })
        .collect()
}

/// `‖B(t)‖_p` quadratured over the target grid of the reconstructed pushforward.
pub fn pushforward_norm(b0: &MagneticInitialField, path: &[NoiseSample], p: NormExponent, n: usize) -> Result<f64> {
    check_inputs(b0, n, &[], 0)?;
    let field = pushforward_field(b0, path, n);
    Ok(p.reduce(field.iter().map(|v| v.norm()), field.len()))
}

/// `‖∇·B‖₂ / ‖|k| B̂‖₂` of the reconstructed pushforward, computed spectrally.
pub fn pushforward_divergence(b0: &MagneticInitialField, path: &[NoiseSample], n: usize) -> Result<f64> {
    let field = pushforward_field(b0, path, n);
    let comps: Vec<SpectralScalarField> = (0..3)
        .map(|c| SpectralScalarField::from_values(n, field.iter().map(|v| v[c]).collect()))
        .collect::<Result<_>>()?;
    let coeffs: Vec<&[Complex64]> = comps.iter().map(|f| f.coefficients()).collect();
    let mut div = 0.0;
    let mut grad = 0.0;
    for idx in 0..n * n * n {
        let k = [idx / (n * n), (idx / n) % n, idx % n].map(|m| wavenumber(m, n) as f64);
        let d: Complex64 = (0..3).map(|c| coeffs[c][idx] * k[c]).sum();
        div += d.norm_sqr();
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        grad += k2 * (0..3).map(|c| coeffs[c][idx].norm_sqr()).sum::<f64>();
    }
    if grad == 0.0 {
        return Ok(div.sqrt());
    }
    Ok((div / grad).sqrt())
}

/// `(|Mw|, √2·|det M|/‖M‖²_F·|w|)`; the first never falls below the second.
pub fn frobenius_bound_margin(m: &Jacobian3, w: &UnitVector3) -> (f64, f64) {
    frobenius_bound_margin_with_det(m, m.det(), w)
}

/// As [`frobenius_bound_margin`] with `det M` supplied, e.g. as the product of
/// per-step determinants of a long cocycle whose direct determinant has
/// lost all precision.
pub fn frobenius_bound_margin_with_det(m: &Jacobian3, det: f64, w: &UnitVector3) -> (f64, f64) {
    let v = w.as_vector();
    let f = m.frobenius();
    (m.apply(&v).norm(), 2f64.sqrt() * det.abs() / (f * f) * v.norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamoComparison {
    pub lambda1: f64,
    pub lambda1_stderr: f64,
    pub combined_stderr: f64,
    /// Whether `η ≥ λ₁ − 3·combined_stderr`.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamoRate {
    pub fit: RateFit,
    pub comparison: Option<DynamoComparison>,
}

/// Exponential fit of the series over `window`, with the optional comparison
/// against a top Lyapunov exponent.
pub fn dynamo_rate(series: &GrowthSeries, window: [f64; 2], lambda: Option<&LyapunovEstimate>) -> Result<DynamoRate> {
    let times: Vec<f64> = series.t.iter().map(|&t| t as f64).collect();
    let fit = fit_exponential_rate(&times, &series.values, window)?;
    let comparison = lambda.map(|l| {
        let combined = (fit.rate_stderr.powi(2) + l.stderr.powi(2)).sqrt();
        DynamoComparison {
            lambda1: l.lambda,
            lambda1_stderr: l.stderr,
            combined_stderr: combined,
            consistent: fit.rate >= l.lambda - 3.0 * combined,
        }
    });
    Ok(DynamoRate { fit, comparison })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseConfig, NoiseSource};
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_path_keeps_norms() {
        let path = vec![NoiseSample::new(0.0, 0.0, 0.0, 0.3, 0.2, 0.1); 4];
        let b0 = MagneticInitialField::Abc { a: 1.0, b: 0.5, c: 0.25 };
        for p in [NormExponent::Finite(1.0), NormExponent::Finite(2.0), NormExponent::Infinity] {
            let s = magnetic_growth_series(&b0, &path, p, 16, &[0, 2, 4]).unwrap();
            assert!(s.values.iter().all(|v| *v == s.values[0]));
        }
    }

    #[test]
    fn constant_field_norm() {
        let b0 = MagneticInitialField::Constant([0.0, 3.0, 4.0]);
        let s = magnetic_growth_series(&b0, &[], NormExponent::Finite(1.0), 16, &[0]).unwrap();
        assert_abs_diff_eq!(s.values[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_field_rejected() {
        let b0 = MagneticInitialField::Constant([0.0; 3]);
        assert_eq!(
            magnetic_growth_series(&b0, &[], NormExponent::Finite(1.0), 16, &[0]),
            Err(Error::ZeroField)
        );
        assert!(NormExponent::new(0.5).is_err());
        assert_eq!(NormExponent::new(f64::INFINITY), Ok(NormExponent::Infinity));
    }

    #[test]
    fn l2_dominates_l1() {
        let path = NoiseConfig::default().path(0, 5);
        let b0 = MagneticInitialField::Constant([0.0, 0.0, 1.0]);
        let t = [0, 1, 3, 5];
        let one = magnetic_growth_series(&b0, &path, NormExponent::Finite(1.0), 16, &t).unwrap();
        let two = magnetic_growth_series(&b0, &path, NormExponent::Finite(2.0), 16, &t).unwrap();
        let inf = magnetic_growth_series(&b0, &path, NormExponent::Infinity, 16, &t).unwrap();
        for i in 0..t.len() {
            assert!(two.values[i] >= one.values[i] * (1.0 - 1e-12));
            assert!(inf.values[i] >= two.values[i] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn change_of_variables_matches_pushforward() {
        let b0 = MagneticInitialField::Constant([0.0, 0.0, 1.0]);
        let path = NoiseConfig::new(1.0, 3).unwrap().path(0, 3);
        for n in 1..=3 {
            let cov = magnetic_growth_series(&b0, &path, NormExponent::Finite(2.0), 32, &[n]).unwrap().values[0];
            let direct = pushforward_norm(&b0, &path[..n], NormExponent::Finite(2.0), 32).unwrap();
            assert!((cov - direct).abs() < 0.01 * cov, "n={n}: {cov} vs {direct}");
        }
    }

    #[test]
    fn beltrami_field_is_divergence_free() {
        let b0 = MagneticInitialField::Abc { a: 1.0, b: 0.7, c: 0.4 };
        assert!(pushforward_divergence(&b0, &[], 16).unwrap() < 1e-12);
        let path = NoiseConfig::new(0.5, 1).unwrap().path(0, 1);
        let rel = pushforward_divergence(&b0, &path, 32).unwrap();
        assert!(rel < 1e-2, "relative divergence {rel}");
    }

    #[test]
    fn frobenius_bound_examples() {
        let (l, r) = frobenius_bound_margin(&Jacobian3::identity(), &UnitVector3::e1());
        assert_abs_diff_eq!(l, 1.0);
        assert_abs_diff_eq!(r, 2f64.sqrt() / 3.0, epsilon = 1e-15);
        let m = Jacobian3::from_rows([[2.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]]);
        let e2 = UnitVector3::new(0.0, 1.0, 0.0).unwrap();
        let (l, r) = frobenius_bound_margin(&m, &e2);
        assert_abs_diff_eq!(l, 0.5);
        assert_abs_diff_eq!(r, 2f64.sqrt() / 5.25, epsilon = 1e-15);
    }

    #[test]
    fn rate_of_exact_exponential() {
        let t: Vec<usize> = (0..=20).collect();
        let s = GrowthSeries {
            p: NormExponent::Finite(1.0),
            grid: 16,
            values: t.iter().map(|&t| (0.3 * t as f64).exp()).collect(),
            t,
        };
        let r = dynamo_rate(&s, [0.0, 20.0], None).unwrap();
        assert_abs_diff_eq!(r.fit.rate, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn constant_series_fails_comparison() {
        let s = GrowthSeries {
            p: NormExponent::Finite(1.0),
            grid: 16,
            t: (0..10).collect(),
            values: vec![1.0; 10],
        };
        let l = LyapunovEstimate {
            lambda: 0.8,
            stderr: 0.001,
            n_steps: 1,
            n_ensemble: 1,
            per_trajectory: vec![],
        };
        let r = dynamo_rate(&s, [0.0, 9.0], Some(&l)).unwrap();
        assert_eq!(r.fit.rate, 0.0);
        assert!(!r.comparison.unwrap().consistent);
    }
}
