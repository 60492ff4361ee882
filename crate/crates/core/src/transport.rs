//! Passive-scalar transport by the random shears.
//!
//! Fourier coefficients are normalized as `ρ̂(k) = (2π)⁻³ ∫ ρ e^{−ik·x} dx`,
//! approximated on the `N³` grid by equal weights, so `ρ̂(k) = N⁻³ Σ ρ(x_j) e^{−ik·x_j}`.
//! All averages use the normalized measure `dx/(2π)³`.
//!
//! With `κ = 0` a recorded field is `ρ₀ ∘ φ_n⁻¹` evaluated at the grid nodes
//! through exact back-trajectories; the FFT is the only discretization.
//! With `κ > 0` coefficients are estimated by Monte Carlo over stochastic
//! characteristics: each unit-time shear is followed by a Gaussian kick of
//! per-axis variance `2κ`.

use std::f64::consts::TAU;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::auxiliary_rng;
use crate::torus::{inverse_step, iterate_inverse, shear, Axis, NoiseSample, TorusPoint};

/// Samples per work unit; partial sums are reduced in this fixed order.
const CHUNK: usize = 256;
const MC_DOMAIN: u64 = 0x4d43;
/// Batches used by the jackknife in diffusive norm estimates.
const JACKKNIFE_BATCHES: usize = 20;

/// One real Fourier mode `c cos(k·x) + s sin(k·x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigMode {
    pub k: [i32; 3],
    pub cos_amp: f64,
    pub sin_amp: f64,
}

impl TrigMode {
    fn eval(&self, p: &TorusPoint) -> f64 {
        let phase = self.k[0] as f64 * p.x + self.k[1] as f64 * p.y + self.k[2] as f64 * p.z;
        self.cos_amp * phase.cos() + self.sin_amp * phase.sin()
    }
}

/// Analytic initial conditions that can be evaluated anywhere on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialCondition {
    SinX,
    SinXCos2Y,
    Constant(f64),
    Modes(Vec<TrigMode>),
}

impl InitialCondition {
    pub fn modes(&self) -> Vec<TrigMode> {
        let m = |k, c, s| TrigMode { k, cos_amp: c, sin_amp: s };
        match self {
            Self::SinX => vec![m([1, 0, 0], 0.0, 1.0)],
            Self::SinXCos2Y => vec![m([1, 0, 0], 0.0, 1.0), m([0, 2, 0], 1.0, 0.0)],
            Self::Constant(c) => vec![m([0, 0, 0], *c, 0.0)],
            Self::Modes(v) => v.clone(),
        }
    }

    /// The spatial mean, carried by `k = 0` modes only.
    pub fn mean(&self) -> f64 {
        self.modes().iter().filter(|m| m.k == [0, 0, 0]).map(|m| m.cos_amp).sum()
    }

    /// Pointwise value of the mean-free part.
    pub fn eval(&self, p: &TorusPoint) -> f64 {
        match self {
            Self::SinX => p.x.sin(),
            Self::SinXCos2Y => p.x.sin() + (2.0 * p.y).cos(),
            Self::Constant(_) => 0.0,
            Self::Modes(v) => v.iter().filter(|m| m.k != [0, 0, 0]).map(|m| m.eval(p)).sum(),
        }
    }

    /// `‖·‖_{L²}` of the mean-free part under the normalized measure.
    pub fn l2_norm(&self) -> f64 {
        // modes with k and −k interfere, so sum in the complex basis
        let mut acc: Vec<([i32; 3], Complex64)> = Vec::new();
        let mut add = |k: [i32; 3], c: Complex64| match acc.iter_mut().find(|e| e.0 == k) {
            Some(e) => e.1 += c,
            None => acc.push((k, c)),
        };
        for m in self.modes().iter().filter(|m| m.k != [0, 0, 0]) {
            let plus = Complex64::new(m.cos_amp / 2.0, -m.sin_amp / 2.0);
            add(m.k, plus);
            add([-m.k[0], -m.k[1], -m.k[2]], plus.conj());
        }
        acc.iter().map(|e| e.1.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl FromStr for InitialCondition {
    type Err = Error;

    /// Accepts `sinx`, `sinx+cos2y`, `const:<c>` and
    /// `modes:kx,ky,kz,c,s;kx,ky,kz,c,s;...`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::UnknownSpec(t.to_string());
        match t {
            "sinx" => return Ok(Self::SinX),
            "sinx+cos2y" => return Ok(Self::SinXCos2Y),
            _ => {}
        }
        if let Some(c) = t.strip_prefix("const:") {
            return c.trim().parse().map(Self::Constant).map_err(|_| bad());
        }
        if let Some(list) = t.strip_prefix("modes:") {
            let mut modes = Vec::new();
            for item in list.split(';').filter(|i| !i.trim().is_empty()) {
                let f: Vec<&str> = item.split(',').map(str::trim).collect();
                if f.len() != 5 {
                    return Err(bad());
                }
                let k = [f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?];
                modes.push(TrigMode {
                    k,
                    cos_amp: f[3].parse().map_err(|_| bad())?,
                    sin_amp: f[4].parse().map_err(|_| bad())?,
                });
            }
            if modes.is_empty() {
                return Err(bad());
            }
            return Ok(Self::Modes(modes));
        }
        Err(bad())
    }
}

/// Index of grid node `(i, j, k)` is `(i·N + j)·N + k`, with `i` along x.
#[derive(Debug, Clone)]
pub struct SpectralScalarField {
    n: usize,
    values: Vec<f64>,
    coeffs: OnceLock<Vec<Complex64>>,
    source: Option<InitialCondition>,
}

impl PartialEq for SpectralScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.values == other.values && self.source == other.source
    }
}

/// Signed wavenumber of FFT index `m`, in `−N/2..N/2`.
#[inline]
pub fn wavenumber(m: usize, n: usize) -> i64 {
    if m < n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

fn check_grid(n: usize) -> Result<()> {
    if n < 8 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("grid size must be a power of two ≥ 8, got {n}")));
    }
    Ok(())
}

pub fn grid_node(n: usize, idx: usize) -> TorusPoint {
    let h = TAU / n as f64;
    let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
    TorusPoint::new(i as f64 * h, j as f64 * h, k as f64 * h)
}

fn fft3(n: usize, data: &mut [Complex64]) {
    let fft = FftPlanner::new().plan_fft_forward(n);
    data.par_chunks_mut(n).for_each(|line| fft.process(line));
    // y lines within each x slab, then x lines within each y-z column
    data.par_chunks_mut(n * n).for_each(|slab| {
        let mut line = vec![Complex64::default(); n];
        for k in 0..n {
            for j in 0..n {
                line[j] = slab[j * n + k];
            }
            fft.process(&mut line);
            for j in 0..n {
                slab[j * n + k] = line[j];
            }
        }
    });
    let columns: Vec<Vec<Complex64>> = (0..n * n)
        .into_par_iter()
        .map(|jk| {
            let mut line: Vec<Complex64> = (0..n).map(|i| data[i * n * n + jk]).collect();
            fft.process(&mut line);
            line
        })
        .collect();
    for (jk, line) in columns.into_iter().enumerate() {
        for (i, c) in line.into_iter().enumerate() {
            data[i * n * n + jk] = c;
        }
    }
}

impl SpectralScalarField {
    /// Wraps grid values without projection.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        check_grid(n)?;
        if values.len() != n * n * n {
            return Err(Error::InvalidArgument(format!(
                "expected {} grid values, got {}",
                n * n * n,
                values.len()
            )));
        }
        Ok(Self {
            n,
            values,
            coeffs: OnceLock::new(),
            source: None,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> Option<&InitialCondition> {
        self.source.as_ref()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Subtracts the grid mean so that `ρ̂(0) = 0`.
    pub fn project_mean_free(&mut self) {
        let m = self.mean();
        self.values.iter_mut().for_each(|v| *v -= m);
        self.coeffs = OnceLock::new();
    }

    /// Discrete L² norm, `(N⁻³ Σ ρ²)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    /// All coefficients in FFT index order.
    pub fn coefficients(&self) -> &[Complex64] {
        self.coeffs.get_or_init(|| {
            let mut data: Vec<Complex64> = self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft3(self.n, &mut data);
            let scale = 1.0 / data.len() as f64;
            data.iter_mut().for_each(|c| *c *= scale);
            data
        })
    }

    /// `ρ̂(k)` for `k ∈ {−N/2, …, N/2−1}³`; other wavenumbers alias.
    pub fn coefficient(&self, k: [i64; 3]) -> Complex64 {
        let n = self.n as i64;
        let [a, b, c] = k.map(|m| m.rem_euclid(n) as usize);
        self.coefficients()[(a * self.n + b) * self.n + c]
    }

    /// Evaluates the field off-grid: analytically when the source is known,
    /// otherwise by trigonometric interpolation over the nonzero coefficients.
    pub fn eval(&self, p: &TorusPoint) -> f64 {
        if let Some(ic) = &self.source {
            return ic.eval(p);
        }
        let n = self.n;
        let coeffs = self.coefficients();
        let cutoff = 1e-13 * coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
        coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm() > cutoff)
            .map(|(idx, c)| {
                let k = [idx / (n * n), (idx / n) % n, idx % n].map(|m| wavenumber(m, n) as f64);
                let ph = k[0] * p.x + k[1] * p.y + k[2] * p.z;
                (c * Complex64::new(ph.cos(), ph.sin())).re
            })
            .sum()
    }

    /// The evaluator used to pull this field back along trajectories. Analytic
    /// sources are re-centred so that the pulled-back field stays mean-free.
    fn evaluator(&self) -> SpectralScalarField {
        let out = self.clone();
        if out.source.is_none() {
            let _ = out.coefficients();
        }
        out
    }
}

/// Samples `ic` on the `N³` grid and removes the grid mean.
pub fn init_field(ic: &InitialCondition, n: usize) -> Result<SpectralScalarField> {
    check_grid(n)?;
    let values = (0..n * n * n).into_par_iter().map(|idx| ic.eval(&grid_node(n, idx))).collect();
    let mut f = SpectralScalarField::from_values(n, values)?;
    f.project_mean_free();
    f.source = Some(ic.clone());
    Ok(f)
}

/// `‖ρ‖_{Ḣ⁻ˢ} = (Σ_{k≠0} |ρ̂(k)|² |k|^{−2s})^{1/2}`. Negative `s` gives `Ḣ^{|s|}`.
pub fn mixing_norm(field: &SpectralScalarField, s: f64) -> f64 {
    let n = field.n;
    let coeffs = field.coefficients();
    let chunks: Vec<f64> = coeffs
        .par_chunks(n * n)
        .enumerate()
        .map(|(i, slab)| {
            let ki = wavenumber(i, n);
            let mut acc = 0.0;
            for (jk, c) in slab.iter().enumerate() {
                let kj = wavenumber(jk / n, n);
                let kk = wavenumber(jk % n, n);
                let k2 = (ki * ki + kj * kj + kk * kk) as f64;
                if k2 > 0.0 {
                    acc += c.norm_sqr() * k2.powf(-s);
                }
            }
            acc
        })
        .collect();
    chunks.iter().sum::<f64>().sqrt()
}

/// Preimages `φ_n⁻¹(node)` of every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct BackTrajectoryGrid {
    pub n: usize,
    pub steps: usize,
    pub points: Vec<TorusPoint>,
}

impl BackTrajectoryGrid {
    pub fn new(n: usize) -> Result<Self> {
        check_grid(n)?;
        Ok(Self {
            n,
            steps: 0,
            points: (0..n * n * n).map(|idx| grid_node(n, idx)).collect(),
        })
    }

    /// Recomputes the preimages for the prefix `path`, so `steps = path.len()`.
    /// `φ_n⁻¹` applies the latest sample first, so the grid cannot be advanced
    /// in place.
    pub fn pull_back(&mut self, path: &[NoiseSample]) {
        let n = self.n;
        self.points = (0..n * n * n)
            .into_par_iter()
            .map(|idx| iterate_inverse(grid_node(n, idx), path))
            .collect();
        self.steps = path.len();
    }

    /// Chi-square statistic of the preimages against the uniform law on a
    /// `bins³` partition, with its p-value.
    pub fn uniformity(&self, bins: usize) -> Result<(f64, f64)> {
        crate::lyapunov::chi_square_uniform(self.points.iter(), bins)
    }
}

/// Fields `ρ_n = ρ₀ ∘ φ_n⁻¹` for each `n` in `n_record` (ascending, ≤ path length).
pub fn pullback_evolve(
    field0: &SpectralScalarField,
    path: &[NoiseSample],
    n_record: &[usize],
) -> Result<Vec<SpectralScalarField>> {
    if n_record.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("recorded iterations must be ascending".into()));
    }
    if let Some(&last) = n_record.last() {
        if last > path.len() {
            return Err(Error::InvalidArgument(format!(
                "recorded iteration {last} exceeds path length {}",
                path.len()
            )));
        }
    }
    let eval = field0.evaluator();
    let mut grid = BackTrajectoryGrid::new(field0.n)?;
    let mut out = Vec::with_capacity(n_record.len());
    for &m in n_record {
        if m == 0 {
            out.push(field0.clone());
            continue;
        }
        grid.pull_back(&path[..m]);
        let values = grid.points.par_iter().map(|p| eval.eval(p)).collect();
        let mut f = SpectralScalarField::from_values(field0.n, values)?;
        f.project_mean_free();
        out.push(f);
    }
    Ok(out)
}

/// Pulls back by a single inverse step; used for closed-form comparisons.
pub fn pullback_one(field0: &SpectralScalarField, w: &NoiseSample, p: &TorusPoint) -> f64 {
    field0.eval(&inverse_step(*p, w))
}

/// `ln N / λ₁`: beyond this many iterations the grid no longer resolves the
/// pulled-back field.
pub fn resolution_horizon(n: usize, lambda1: f64) -> f64 {
    (n as f64).ln() / lambda1
}

/// Forward stochastic characteristic: each shear is followed by the kick
/// `√(2κ)·ξ`, with `ξ` a standard normal triple drawn from `rng`.
fn kicked_step<R: Rng>(p: TorusPoint, w: &NoiseSample, sigma: f64, rng: &mut R) -> TorusPoint {
    let mut q = p;
    for (axis, amp, phase) in [
        (Axis::A, w.amp_a, w.phase_a),
        (Axis::B, w.amp_b, w.phase_b),
        (Axis::C, w.amp_c, w.phase_c),
    ] {
        q = shear(axis, q, amp, phase);
        let kx: f64 = rng.sample(StandardNormal);
        let ky: f64 = rng.sample(StandardNormal);
        let kz: f64 = rng.sample(StandardNormal);
        if sigma > 0.0 {
            q = TorusPoint::new(q.x + sigma * kx, q.y + sigma * ky, q.z + sigma * kz);
        }
    }
    q
}

fn check_times(t_record: &[usize], len: usize) -> Result<()> {
    if t_record.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("recorded times must be ascending".into()));
    }
    match t_record.last() {
        Some(&t) if t > len => Err(Error::InvalidArgument(format!("recorded time {t} exceeds path length {len}"))),
        _ => Ok(()),
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument(format!("kappa must be non-negative, got {kappa}")));
    }
    Ok(())
}

/// Runs `f(sample_index, point_at_each_recorded_time)` for every sample and
/// reduces the per-chunk results in index order.
fn characteristics<T, F, G>(
    path: &[NoiseSample],
    kappa: f64,
    n_samples: usize,
    t_record: &[usize],
    seed: u64,
    init: G,
    f: F,
) -> Vec<T>
where
    T: Send,
    G: Fn() -> T + Sync,
    F: Fn(&mut T, usize, &TorusPoint, &[TorusPoint]) + Sync,
{
    let sigma = (2.0 * kappa).sqrt();
    let n_chunks = n_samples.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let mut at = Vec::with_capacity(t_record.len());
            for j in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let mut rng = auxiliary_rng(seed, MC_DOMAIN, j as u64);
                let x0 = TorusPoint::new(
                    TAU * rng.random::<f64>(),
                    TAU * rng.random::<f64>(),
                    TAU * rng.random::<f64>(),
                );
                at.clear();
                let mut p = x0;
                let mut done = 0;
                for &t in t_record {
                    while done < t {
                        p = kicked_step(p, &path[done], sigma, &mut rng);
                        done += 1;
                    }
                    at.push(p);
                }
                f(&mut acc, j, &x0, &at);
            }
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSeries {
    pub t: Vec<usize>,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Monte Carlo estimate of `∫ g(x) h(Φ_t(x)) dx` at each recorded `t`, with
/// `Φ_t` the (kicked, for `κ > 0`) forward characteristic along `path`.
pub fn correlation_mc(
    g: &SpectralScalarField,
    h: &SpectralScalarField,
    path: &[NoiseSample],
    kappa: f64,
    n_samples: usize,
    t_record: &[usize],
    seed: u64,
) -> Result<McSeries> {
    check_kappa(kappa)?;
    check_times(t_record, path.len())?;
    if n_samples < 100 {
        return Err(Error::InvalidArgument("at least 100 samples are required".into()));
    }
    let (ge, he) = (g.evaluator(), h.evaluator());
    let m = t_record.len();
    let parts = characteristics(
        path,
        kappa,
        n_samples,
        t_record,
        seed,
        || vec![(0.0, 0.0); m],
        |acc, _, x0, at| {
            let gv = ge.eval(x0);
            for (a, p) in acc.iter_mut().zip(at) {
                let y = gv * he.eval(p);
                a.0 += y;
                a.1 += y * y;
            }
        },
    );
    let ns = n_samples as f64;
    let mut value = Vec::with_capacity(m);
    let mut stderr = Vec::with_capacity(m);
    for i in 0..m {
        let (s1, s2) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p[i].0, a.1 + p[i].1));
        let mean = s1 / ns;
        let var = ((s2 - ns * mean * mean) / (ns - 1.0)).max(0.0);
        value.push(mean);
        stderr.push((var / ns).sqrt());
    }
    Ok(McSeries {
        t: t_record.to_vec(),
        value,
        stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveNormSeries {
    pub t: Vec<usize>,
    pub s: f64,
    pub k_cutoff: usize,
    /// Debiased truncated `Ḣ⁻ˢ` norm.
    pub value: Vec<f64>,
    /// Jackknife standard error over sample batches.
    pub stderr: Vec<f64>,
    /// Norm level produced by Monte Carlo noise alone (before debiasing).
    pub noise_floor: Vec<f64>,
    /// Upper bound on the norm of the `|k|∞ > k_cutoff` part.
    pub tail_bound: f64,
}

/// Wavevectors with `0 < |k|∞ ≤ cutoff`.
pub fn truncated_modes(cutoff: usize) -> Vec<[i64; 3]> {
    let c = cutoff as i64;
    let mut out = Vec::new();
    for a in -c..=c {
        for b in -c..=c {
            for d in -c..=c {
                if (a, b, d) != (0, 0, 0) {
                    out.push([a, b, d]);
                }
            }
        }
    }
    out
}

/// Truncated `Ḣ⁻ˢ` norm of `E ρ₀(Φ_t⁻¹ ·)` from `ρ̂(t,k) = E ∫ ρ₀(x) e^{−ik·Φ_t(x)} dx`,
/// estimated over `n_samples` stochastic characteristics.
#[allow(clippy::too_many_arguments)]
pub fn hs_norm_diffusive(
    field0: &SpectralScalarField,
    path: &[NoiseSample],
    kappa: f64,
    s: f64,
    k_cutoff: usize,
    n_samples: usize,
    t_record: &[usize],
    seed: u64,
) -> Result<DiffusiveNormSeries> {
    check_kappa(kappa)?;
    check_times(t_record, path.len())?;
    if k_cutoff < 1 {
        return Err(Error::InvalidArgument("k_cutoff must be at least 1".into()));
    }
    if n_samples < JACKKNIFE_BATCHES * 5 {
        return Err(Error::InvalidArgument(format!(
            "at least {} samples are required",
            JACKKNIFE_BATCHES * 5
        )));
    }
    let modes = truncated_modes(k_cutoff);
    let weights: Vec<f64> = modes
        .iter()
        .map(|k| ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).powf(-s))
        .collect();
    let nm = modes.len();
    let nt = t_record.len();
    let kc = k_cutoff as i64;
    let eval = field0.evaluator();
    // per batch, per time, per mode: (Σ Z, Σ |Z|²)
    let stride = nt * nm;
    let parts = characteristics(
        path,
        kappa,
        n_samples,
        t_record,
        seed,
        || vec![(Complex64::default(), 0.0); JACKKNIFE_BATCHES * stride],
        |acc, j, x0, at| {
            let b = j * JACKKNIFE_BATCHES / n_samples;
            let r = eval.eval(x0);
            let mut pw = vec![Complex64::default(); 3 * (2 * k_cutoff + 1)];
            for (ti, p) in at.iter().enumerate() {
                for (axis, q) in [p.x, p.y, p.z].into_iter().enumerate() {
                    for m in -kc..=kc {
                        let ph = -(m as f64) * q;
                        pw[axis * (2 * k_cutoff + 1) + (m + kc) as usize] = Complex64::new(ph.cos(), ph.sin());
                    }
                }
                let base = b * stride + ti * nm;
                for (mi, k) in modes.iter().enumerate() {
                    let e = pw[(k[0] + kc) as usize]
                        * pw[(2 * k_cutoff + 1) + (k[1] + kc) as usize]
                        * pw[2 * (2 * k_cutoff + 1) + (k[2] + kc) as usize];
                    let z = e * r;
                    let slot = &mut acc[base + mi];
                    slot.0 += z;
                    slot.1 += z.norm_sqr();
                }
            }
        },
    );
    let mut batch = vec![(Complex64::default(), 0.0); JACKKNIFE_BATCHES * stride];
    for p in &parts {
        for (a, b) in batch.iter_mut().zip(p) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }
    let batch_count: Vec<f64> = (0..JACKKNIFE_BATCHES)
        .map(|b| ((0..n_samples).filter(|j| j * JACKKNIFE_BATCHES / n_samples == b).count()) as f64)
        .collect();

    // debiased squared norm and raw noise level from the batches in `keep`
    let estimate = |ti: usize, skip: Option<usize>| -> (f64, f64) {
        let mut sq = 0.0;
        let mut floor = 0.0;
        for (mi, w) in weights.iter().enumerate() {
            let mut sz = Complex64::default();
            let mut sq_abs = 0.0;
            let mut count = 0.0;
            for b in (0..JACKKNIFE_BATCHES).filter(|&b| Some(b) != skip) {
                let e = batch[b * stride + ti * nm + mi];
                sz += e.0;
                sq_abs += e.1;
                count += batch_count[b];
            }
            let mean = sz / count;
            let var = ((sq_abs - count * mean.norm_sqr()) / (count - 1.0)).max(0.0);
            sq += w * (mean.norm_sqr() - var / count);
            floor += w * var / count;
        }
        (sq, floor)
    };
    let mut value = Vec::with_capacity(nt);
    let mut stderr = Vec::with_capacity(nt);
    let mut noise_floor = Vec::with_capacity(nt);
    let nb = JACKKNIFE_BATCHES as f64;
    for ti in 0..nt {
        let (sq, floor) = estimate(ti, None);
        let full = sq.max(0.0).sqrt();
        let loo: Vec<f64> = (0..JACKKNIFE_BATCHES)
            .map(|b| estimate(ti, Some(b)).0.max(0.0).sqrt())
            .collect();
        let loo_mean = loo.iter().sum::<f64>() / nb;
        let var = (nb - 1.0) / nb * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>();
        value.push(full);
        stderr.push(var.sqrt());
        noise_floor.push(floor.sqrt());
    }
    let l2 = match field0.source() {
        Some(ic) => ic.l2_norm(),
        None => field0.l2_norm(),
    };
    Ok(DiffusiveNormSeries {
        t: t_record.to_vec(),
        s,
        k_cutoff,
        value,
        stderr,
        noise_floor,
        tail_bound: l2 / ((k_cutoff + 1) as f64).powf(s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Slope of `log value` per unit time.
    pub rate: f64,
    pub intercept: f64,
    pub r2: f64,
    pub window: [f64; 2],
    pub n_points: usize,
    pub rate_stderr: f64,
}

/// Least-squares fit of `log v = intercept + rate·t` over the points with
/// `t ∈ [window[0], window[1]]`.
pub fn fit_exponential_rate(times: &[f64], values: &[f64], window: [f64; 2]) -> Result<RateFit> {
    if times.len() != values.len() {
        return Err(Error::InvalidArgument("times and values differ in length".into()));
    }
    let mut pts = Vec::new();
    for (i, (&t, &v)) in times.iter().zip(values).enumerate() {
        if t < window[0] || t > window[1] {
            continue;
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositive { index: i, value: v });
        }
        pts.push((t, v.ln()));
    }
    if pts.len() < 2 {
        return Err(Error::InvalidArgument("fit window holds fewer than two points".into()));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("fit window holds a single time".into()));
    }
    let rate = sxy / sxx;
    let intercept = ym - rate * tm;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - rate * p.0).powi(2)).sum();
    let r2 = if ss_tot <= f64::EPSILON * ym.abs().max(1.0) * n {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    let rate_stderr = if pts.len() > 2 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        rate,
        intercept,
        r2,
        window,
        n_points: pts.len(),
        rate_stderr,
    })
}

/// The longest initial run of times whose values stay above `factor·floor`,
/// as an inclusive time window.
pub fn window_above_floor(times: &[f64], values: &[f64], floor: &[f64], factor: f64) -> Option<[f64; 2]> {
    let run = values
        .iter()
        .zip(floor)
        .take_while(|(v, f)| **v > factor * **f && **v > 0.0)
        .count();
    (run >= 2).then(|| [times[0], times[run - 1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseConfig, NoiseSource};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sin_x_coefficients() {
        let f = init_field(&InitialCondition::SinX, 32).unwrap();
        let c = f.coefficient([1, 0, 0]);
        assert_abs_diff_eq!(c.re, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.im, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.coefficient([-1, 0, 0]).im, 0.5, epsilon = 1e-12);
        let others = f
            .coefficients()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 32 * 32 && *i != 31 * 32 * 32)
            .map(|(_, c)| c.norm())
            .fold(0.0, f64::max);
        assert!(others < 1e-12);
    }

    #[test]
    fn sin_x_cos_2y_coefficients() {
        let f = init_field(&InitialCondition::SinXCos2Y, 32).unwrap();
        let nonzero = f.coefficients().iter().filter(|c| c.norm() > 1e-12).count();
        assert_eq!(nonzero, 4);
        assert_abs_diff_eq!(f.coefficient([0, 2, 0]).re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.coefficient([0, -2, 0]).re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.coefficient([0, 2, 0]).im, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_field_vanishes() {
        let f = init_field(&InitialCondition::Constant(3.5), 8).unwrap();
        assert!(f.coefficients().iter().all(|c| c.norm() < 1e-14));
        assert_eq!(mixing_norm(&f, 1.0), 0.0);
    }

    #[test]
    fn parse_names() {
        assert_eq!("sinx".parse::<InitialCondition>().unwrap(), InitialCondition::SinX);
        assert_eq!("const:2".parse::<InitialCondition>().unwrap(), InitialCondition::Constant(2.0));
        let m: InitialCondition = "modes:1,0,0,0,1; 0,2,0,1,0".parse().unwrap();
        assert_eq!(m.modes().len(), 2);
        assert!(matches!("tanh".parse::<InitialCondition>(), Err(Error::UnknownSpec(_))));
        assert!(matches!("modes:1,2".parse::<InitialCondition>(), Err(Error::UnknownSpec(_))));
    }

    #[test]
    fn grid_size_checked() {
        assert!(init_field(&InitialCondition::SinX, 12).is_err());
        assert!(init_field(&InitialCondition::SinX, 4).is_err());
    }

    #[test]
    fn mixing_norm_examples() {
        let f = init_field(&InitialCondition::SinX, 32).unwrap();
        assert_abs_diff_eq!(mixing_norm(&f, 1.0), 0.5f64.sqrt(), epsilon = 1e-12);
        let g = init_field(&InitialCondition::SinXCos2Y, 32).unwrap();
        assert_abs_diff_eq!(mixing_norm(&g, 2.0), (0.5f64 + 1.0 / 32.0).sqrt(), epsilon = 1e-12);
        // Ḣ¹ of sin x + cos 2y: |k|² weights give 1/2 + 4/2
        assert_abs_diff_eq!(mixing_norm(&g, -1.0), 2.5f64.sqrt(), epsilon = 1e-10);
        let zero = SpectralScalarField::from_values(8, vec![0.0; 512]).unwrap();
        assert_eq!(mixing_norm(&zero, 1.0), 0.0);
    }

    #[test]
    fn parseval_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = SpectralScalarField::from_values(16, (0..4096).map(|_| rng.random::<f64>()).collect()).unwrap();
        f.project_mean_free();
        let rel = (mixing_norm(&f, 0.0) - f.l2_norm()).abs() / f.l2_norm();
        assert!(rel < 1e-10);
    }

    #[test]
    fn analytic_l2_norm() {
        assert_abs_diff_eq!(InitialCondition::SinX.l2_norm(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(InitialCondition::SinXCos2Y.l2_norm(), 1.0, epsilon = 1e-15);
        let m = InitialCondition::Modes(vec![
            TrigMode { k: [1, 0, 0], cos_amp: 0.0, sin_amp: 1.0 },
            TrigMode { k: [-1, 0, 0], cos_amp: 0.0, sin_amp: 1.0 },
        ]);
        assert_eq!(m.l2_norm(), 0.0);
    }

    #[test]
    fn interpolation_reproduces_band_limited_field() {
        let f = init_field(&InitialCondition::SinXCos2Y, 16).unwrap();
        let raw = SpectralScalarField::from_values(16, f.values().to_vec()).unwrap();
        let p = TorusPoint::new(0.37, 2.9, 5.1);
        assert_abs_diff_eq!(raw.eval(&p), f.eval(&p), epsilon = 1e-12);
    }

    #[test]
    fn empty_path_keeps_field() {
        let f = init_field(&InitialCondition::SinX, 8).unwrap();
        let out = pullback_evolve(&f, &[], &[0]).unwrap();
        assert_eq!(out[0], f);
    }

    #[test]
    fn single_a_shear_closed_form() {
        let (a, alpha) = (1.3, 0.4);
        let w = NoiseSample::new(a, 0.0, 0.0, alpha, 0.0, 0.0);
        let f = init_field(&InitialCondition::SinX, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let p = TorusPoint::new(TAU * rng.random::<f64>(), TAU * rng.random::<f64>(), TAU * rng.random::<f64>());
            let expect = (p.x - a * (p.z + alpha).sin()).sin();
            assert_abs_diff_eq!(pullback_one(&f, &w, &p), expect, epsilon = 1e-12);
        }
        let out = pullback_evolve(&f, &[w], &[1]).unwrap();
        let closed: Vec<f64> = (0..4096)
            .map(|idx| {
                let p = grid_node(16, idx);
                (p.x - a * (p.z + alpha).sin()).sin()
            })
            .collect();
        // the recorded field has its grid mean removed
        let mean = closed.iter().sum::<f64>() / 4096.0;
        for (got, expect) in out[0].values().iter().zip(&closed) {
            assert_abs_diff_eq!(*got, expect - mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn pullback_stays_mean_free() {
        let f = init_field(&InitialCondition::SinX, 16).unwrap();
        let path = NoiseConfig::default().path(0, 4);
        for g in pullback_evolve(&f, &path, &[1, 2, 4]).unwrap() {
            assert!(g.coefficient([0, 0, 0]).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_unsorted_records() {
        let f = init_field(&InitialCondition::SinX, 8).unwrap();
        let path = NoiseConfig::default().path(0, 4);
        assert!(pullback_evolve(&f, &path, &[2, 1]).is_err());
        assert!(pullback_evolve(&f, &path, &[5]).is_err());
    }

    #[test]
    fn correlation_at_time_zero() {
        let f = init_field(&InitialCondition::SinX, 8).unwrap();
        let path = NoiseConfig::default().path(0, 2);
        let c = correlation_mc(&f, &f, &path, 0.0, 20_000, &[0], 1).unwrap();
        assert!((c.value[0] - 0.5).abs() < 4.0 * c.stderr[0]);
    }

    #[test]
    fn identity_flow_correlation_is_constant() {
        let f = init_field(&InitialCondition::SinX, 8).unwrap();
        let path = vec![NoiseSample::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0); 5];
        let c = correlation_mc(&f, &f, &path, 0.0, 1000, &[0, 1, 3, 5], 3).unwrap();
        assert!(c.value.iter().all(|v| *v == c.value[0]));
    }

    #[test]
    fn heat_flow_on_first_mode() {
        let kappa = 0.05;
        let f = init_field(&InitialCondition::SinX, 8).unwrap();
        let path = vec![NoiseSample::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0); 4];
        let s = hs_norm_diffusive(&f, &path, kappa, 0.0, 1, 40_000, &[0, 2, 4], 11).unwrap();
        for (i, &t) in s.t.iter().enumerate() {
            let expect = 0.5f64.sqrt() * (-3.0 * kappa * t as f64).exp();
            assert!(
                (s.value[i] - expect).abs() < 4.0 * s.stderr[i] + 1e-3,
                "t={t}: {} vs {expect} ± {}",
                s.value[i],
                s.stderr[i]
            );
        }
    }

    #[test]
    fn diffusive_norm_at_time_zero() {
        let f = init_field(&InitialCondition::SinXCos2Y, 16).unwrap();
        let path = NoiseConfig::default().path(0, 1);
        let s = hs_norm_diffusive(&f, &path, 1e-3, 1.0, 2, 20_000, &[0], 2).unwrap();
        let exact = mixing_norm(&f, 1.0);
        assert!((s.value[0] - exact).abs() < 4.0 * s.stderr[0], "{} vs {exact}", s.value[0]);
        assert_abs_diff_eq!(s.tail_bound, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn fit_exact_exponential() {
        let f = fit_exponential_rate(&[0.0, 1.0, 2.0], &[1.0, (-1.0f64).exp(), (-2.0f64).exp()], [0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(f.rate, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.r2, 1.0, epsilon = 1e-12);
        let t: Vec<f64> = (0..31).map(f64::from).collect();
        let v: Vec<f64> = t.iter().map(|t| (0.3 * t).exp()).collect();
        assert_abs_diff_eq!(fit_exponential_rate(&t, &v, [0.0, 30.0]).unwrap().rate, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn fit_constant_series() {
        let f = fit_exponential_rate(&[0.0, 1.0, 2.0, 3.0], &[2.0; 4], [0.0, 3.0]).unwrap();
        assert_eq!(f.rate, 0.0);
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn fit_noisy_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let t: Vec<f64> = (0..41).map(f64::from).collect();
        let v: Vec<f64> = t
            .iter()
            .map(|t| (-0.5 * t).exp() * (1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let f = fit_exponential_rate(&t, &v, [0.0, 40.0]).unwrap();
        assert!((f.rate + 0.5).abs() < 0.025, "rate {}", f.rate);
    }

    #[test]
    fn fit_rejects_nonpositive() {
        assert_eq!(
            fit_exponential_rate(&[0.0, 1.0, 2.0], &[1.0, 0.0, 1.0], [0.0, 2.0]),
            Err(Error::NonPositive { index: 1, value: 0.0 })
        );
        // values outside the window are ignored
        assert!(fit_exponential_rate(&[0.0, 1.0, 2.0], &[1.0, 2.0, -1.0], [0.0, 1.0]).is_ok());
    }

    #[test]
    fn reductions_do_not_depend_on_thread_count() {
        let f = init_field(&InitialCondition::SinX, 8).unwrap();
        let path = NoiseConfig::default().path(1, 3);
        let run = || hs_norm_diffusive(&f, &path, 1e-3, 1.0, 1, 3000, &[0, 3], 4).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(one, many);
    }
}
