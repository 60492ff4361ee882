//! Seeded IID noise on `Ω₀ = [−U, U)³ × [0, 2π)³`.
//!
//! Every sample is a pure function of `(seed, stream, index)`: the generator
//! is ChaCha8 keyed by the seed, the ChaCha stream id is the stream index and
//! the word position is derived from the sample index. Parallel ensemble
//! members use distinct streams and never share generator state.

use std::f64::consts::{PI, TAU};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{wrap_angle, NoiseSample};

/// 32-bit words consumed per sample (six 64-bit draws).
const WORDS_PER_SAMPLE: u128 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub u_max: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { u_max: PI, seed: 42 }
    }
}

impl NoiseConfig {
    pub fn new(u_max: f64, seed: u64) -> Result<Self> {
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("u_max must be positive, got {u_max}")));
        }
        Ok(Self { u_max, seed })
    }

    fn rng_at(&self, stream: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.set_word_pos(index as u128 * WORDS_PER_SAMPLE);
        rng
    }
}

#[inline]
fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn draw(rng: &mut ChaCha8Rng, u_max: f64) -> NoiseSample {
    let mut amp = || -u_max + 2.0 * u_max * unit_f64(rng.next_u64());
    let (a, b, c) = (amp(), amp(), amp());
    let mut phase = || wrap_angle(TAU * unit_f64(rng.next_u64()));
    let (al, be, ga) = (phase(), phase(), phase());
    NoiseSample {
        amp_a: a,
        amp_b: b,
        amp_c: c,
        phase_a: al,
        phase_b: be,
        phase_c: ga,
    }
}

/// Sample number `index` of stream `stream`.
pub fn sample_noise(cfg: &NoiseConfig, stream: u64, index: u64) -> NoiseSample {
    draw(&mut cfg.rng_at(stream, index), cfg.u_max)
}

/// The samples with indices `1..=n` of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub config: NoiseConfig,
    pub stream: u64,
    pub samples: Vec<NoiseSample>,
}

impl NoisePath {
    /// A path that is not drawn from a generator (forced parameters).
    pub fn forced(samples: Vec<NoiseSample>) -> Self {
        Self {
            config: NoiseConfig {
                u_max: samples.iter().map(NoiseSample::max_amplitude).fold(0.0, f64::max),
                seed: 0,
            },
            stream: u64::MAX,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn as_slice(&self) -> &[NoiseSample] {
        &self.samples
    }
}

pub fn noise_path(cfg: &NoiseConfig, stream: u64, n: usize) -> NoisePath {
    // Sequential reads from index 1 give the same words as per-index seeking.
    let mut rng = cfg.rng_at(stream, 1);
    let samples = (0..n).map(|_| draw(&mut rng, cfg.u_max)).collect();
    NoisePath {
        config: *cfg,
        stream,
        samples,
    }
}

/// Anything that can hand out reproducible paths per stream.
pub trait NoiseSource: Sync {
    fn path(&self, stream: u64, n: usize) -> Vec<NoiseSample>;
}

impl NoiseSource for NoiseConfig {
    fn path(&self, stream: u64, n: usize) -> Vec<NoiseSample> {
        noise_path(self, stream, n).samples
    }
}

/// The same sample at every step of every stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantNoise(pub NoiseSample);

impl NoiseSource for ConstantNoise {
    fn path(&self, _stream: u64, n: usize) -> Vec<NoiseSample> {
        vec![self.0; n]
    }
}

/// Independent generator for auxiliary randomness (sample points, Brownian
/// kicks). Keyed off the noise seed with a fixed domain tag so it never
/// coincides with a noise stream.
pub fn auxiliary_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}
