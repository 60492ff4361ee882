//! Lyapunov exponents of the random cocycle `D_x f^n_ω` and chain diagnostics.
//!
//! Rates are per iteration (one full A→B→C step). Directions are renormalized
//! every step; standard errors use batch means (20 batches per trajectory).

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::noise::NoiseSource;
use crate::torus::{jacobian_step, step, NoiseSample, TorusPoint};

pub const BATCHES: usize = 20;
pub const BURN_IN: usize = 1000;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitVector3 {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl UnitVector3 {
    /// Normalizes on entry; the zero vector is rejected.
    pub fn new(vx: f64, vy: f64, vz: f64) -> Result<Self> {
        Self::from_vector(&Vector3::new(vx, vy, vz))
    }

    pub fn from_vector(v: &Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            vx: v.x / n,
            vy: v.y / n,
            vz: v.z / n,
        })
    }

    pub fn e1() -> Self {
        Self { vx: 1.0, vy: 0.0, vz: 0.0 }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.vz)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    /// Angle between the two directions, in `[0, π]`.
    pub fn angle_to(&self, other: &UnitVector3) -> f64 {
        let a = self.as_vector();
        let b = other.as_vector();
        a.cross(&b).norm().atan2(a.dot(&b))
    }

    /// Angle between the lines spanned by the two directions, in `[0, π/2]`.
    pub fn line_angle_to(&self, other: &UnitVector3) -> f64 {
        let t = self.angle_to(other);
        t.min(std::f64::consts::PI - t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub lambda: f64,
    pub stderr: f64,
    pub n_steps: usize,
    pub n_ensemble: usize,
    /// Per-trajectory estimates, in stream order.
    pub per_trajectory: Vec<f64>,
}

impl LyapunovEstimate {
    /// Two-sided 95% normal confidence interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.lambda - 1.96 * self.stderr, self.lambda + 1.96 * self.stderr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    /// Sorted so that `lambdas[0] ≥ lambdas[1] ≥ lambdas[2]`.
    pub lambdas: [f64; 3],
    pub stderrs: [f64; 3],
    pub sum: f64,
    pub sum_stderr: f64,
    pub n_steps: usize,
    pub n_ensemble: usize,
}

/// One step of the projective chain: `(f_ω(x), Dv/|Dv|, log|Dv|)`.
pub fn projective_step(
    x: TorusPoint,
    v: &UnitVector3,
    w: &NoiseSample,
) -> Result<(TorusPoint, UnitVector3, f64)> {
    let image = jacobian_step(x, w).apply(&v.as_vector());
    let growth = image.norm();
    if !(growth >= TINY) || !growth.is_finite() {
        return Err(Error::DegenerateGrowth(growth));
    }
    let u = image / growth;
    Ok((
        step(x, w),
        UnitVector3 {
            vx: u.x,
            vy: u.y,
            vz: u.z,
        },
        growth.ln(),
    ))
}

fn batch_bounds(n: usize) -> Vec<(usize, usize)> {
    let nb = BATCHES.min(n).max(1);
    (0..nb).map(|b| (b * n / nb, (b + 1) * n / nb)).collect()
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-step log growth along a single path.
pub fn log_growth_series(x0: TorusPoint, v0: &UnitVector3, path: &[NoiseSample]) -> Result<Vec<f64>> {
    let mut x = x0;
    let mut v = *v0;
    let mut out = Vec::with_capacity(path.len());
    for w in path {
        let (nx, nv, g) = projective_step(x, &v, w)?;
        x = nx;
        v = nv;
        out.push(g);
    }
    Ok(out)
}

/// Top exponent from `n_ensemble` independent trajectories (streams `0..n_ensemble`).
pub fn top_lyapunov<S: NoiseSource>(
    source: &S,
    x0: TorusPoint,
    v0: UnitVector3,
    n_steps: usize,
    n_ensemble: usize,
) -> Result<LyapunovEstimate> {
    if n_steps == 0 || n_ensemble == 0 {
        return Err(Error::InvalidArgument("n_steps and n_ensemble must be at least 1".into()));
    }
    let bounds = batch_bounds(n_steps);
    let per: Vec<(f64, Vec<f64>)> = (0..n_ensemble as u64)
        .into_par_iter()
        .map(|j| {
            let logs = log_growth_series(x0, &v0, &source.path(j, n_steps))?;
            let total: f64 = logs.iter().sum();
            let batches = bounds
                .iter()
                .map(|&(a, b)| logs[a..b].iter().sum::<f64>() / (b - a) as f64)
                .collect();
            Ok((total / n_steps as f64, batches))
        })
        .collect::<Result<_>>()?;
    let per_trajectory: Vec<f64> = per.iter().map(|p| p.0).collect();
    let batch_means: Vec<f64> = per.iter().flat_map(|p| p.1.iter().copied()).collect();
    let lambda = per_trajectory.iter().sum::<f64>() / n_ensemble as f64;
    let (_, stderr) = mean_and_stderr(&batch_means);
    Ok(LyapunovEstimate {
        lambda,
        stderr,
        n_steps,
        n_ensemble,
        per_trajectory,
    })
}

/// Per-step logs of the three stretch factors of a QR-propagated frame.
fn qr_stretch_series(x0: TorusPoint, path: &[NoiseSample]) -> Result<Vec<[f64; 3]>> {
    let mut x = x0;
    let mut frame = Matrix3::<f64>::identity();
    let mut out = Vec::with_capacity(path.len());
    for w in path {
        let m = jacobian_step(x, w).0 * frame;
        let qr = m.qr();
        let r = qr.r();
        let mut q = qr.q();
        let mut logs = [0.0; 3];
        for i in 0..3 {
            let d = r[(i, i)];
            if d.abs() < TINY {
                return Err(Error::FrameDegeneracy(d.abs()));
            }
            logs[i] = d.abs().ln();
            if d < 0.0 {
                q.column_mut(i).neg_mut();
            }
        }
        frame = q;
        x = step(x, w);
        out.push(logs);
    }
    Ok(out)
}

/// Full spectrum by QR reorthonormalization.
pub fn lyapunov_spectrum<S: NoiseSource>(
    source: &S,
    x0: TorusPoint,
    n_steps: usize,
    n_ensemble: usize,
) -> Result<SpectrumEstimate> {
    if n_steps == 0 || n_ensemble == 0 {
        return Err(Error::InvalidArgument("n_steps and n_ensemble must be at least 1".into()));
    }
    let bounds = batch_bounds(n_steps);
    let per: Vec<Vec<[f64; 4]>> = (0..n_ensemble as u64)
        .into_par_iter()
        .map(|j| {
            let logs = qr_stretch_series(x0, &source.path(j, n_steps))?;
            Ok(bounds
                .iter()
                .map(|&(a, b)| {
                    let len = (b - a) as f64;
                    let mut acc = [0.0; 4];
                    for l in &logs[a..b] {
                        acc[0] += l[0];
                        acc[1] += l[1];
                        acc[2] += l[2];
                        acc[3] += l[0] + l[1] + l[2];
                    }
                    acc.map(|s| s / len)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let batch_means: Vec<[f64; 4]> = per.into_iter().flatten().collect();
    let column = |k: usize| -> (f64, f64) {
        let vals: Vec<f64> = batch_means.iter().map(|b| b[k]).collect();
        mean_and_stderr(&vals)
    };
    let mut pairs = [column(0), column(1), column(2)];
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (sum, sum_stderr) = column(3);
    Ok(SpectrumEstimate {
        lambdas: pairs.map(|p| p.0),
        stderrs: pairs.map(|p| p.1),
        sum,
        sum_stderr,
        n_steps,
        n_ensemble,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityTest {
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub n_samples: usize,
    pub bins_per_axis: usize,
    pub burn_in: usize,
}

/// Chi-square goodness of fit of the one-point chain (stream 0) against the
/// uniform measure on a `bins³` partition, after [`BURN_IN`] discarded steps.
pub fn one_point_uniformity<S: NoiseSource>(
    source: &S,
    x0: TorusPoint,
    n_steps: usize,
    bins_per_axis: usize,
) -> Result<UniformityTest> {
    if bins_per_axis < 2 {
        return Err(Error::InvalidArgument(format!(
            "bins_per_axis must be at least 2, got {bins_per_axis}"
        )));
    }
    let cells = bins_per_axis.pow(3);
    let expected = n_steps as f64 / cells as f64;
    if expected < 5.0 {
        return Err(Error::InsufficientSamples { expected });
    }
    let path = source.path(0, BURN_IN + n_steps);
    let mut visited = Vec::with_capacity(n_steps);
    let mut x = x0;
    for (i, w) in path.iter().enumerate() {
        x = step(x, w);
        if i >= BURN_IN {
            visited.push(x);
        }
    }
    let (chi_square, p_value) = chi_square_uniform(visited.iter(), bins_per_axis)?;
    Ok(UniformityTest {
        chi_square,
        degrees_of_freedom: cells - 1,
        p_value,
        n_samples: n_steps,
        bins_per_axis,
        burn_in: BURN_IN,
    })
}

/// Pearson chi-square of points against the uniform law on a `bins³`
/// partition of the torus, with its upper-tail p-value.
pub fn chi_square_uniform<'a, I>(points: I, bins_per_axis: usize) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'a TorusPoint>,
{
    if bins_per_axis < 2 {
        return Err(Error::InvalidArgument(format!(
            "bins_per_axis must be at least 2, got {bins_per_axis}"
        )));
    }
    let cells = bins_per_axis.pow(3);
    let mut counts = vec![0u64; cells];
    let width = std::f64::consts::TAU / bins_per_axis as f64;
    let bin = |c: f64| ((c / width) as usize).min(bins_per_axis - 1);
    let mut total = 0usize;
    for x in points {
        counts[(bin(x.x) * bins_per_axis + bin(x.y)) * bins_per_axis + bin(x.z)] += 1;
        total += 1;
    }
    let expected = total as f64 / cells as f64;
    if expected < 5.0 {
        return Err(Error::InsufficientSamples { expected });
    }
    let chi_square: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((cells - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((chi_square, dist.sf(chi_square)))
}
