//! Seeded Rician corruption of magnitude volumes.
//!
//! Magnitude MR noise arises from equal-variance Gaussian noise on the real
//! and imaginary channels: A = sqrt((I + s*n_r)^2 + (s*n_i)^2) with
//! s = alpha * level and alpha the per-volume maximum intensity. Both normal
//! draws come from one interleaved stream in row-major voxel order, n_r
//! first, so a (volume, level, seed) triple fully determines the output.

use crate::data::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise level must lie in [0, 1], got {0}")]
    BadLevel(f64),
    #[error("negative voxel {value} at index {index}: input must be a magnitude image")]
    NegativeVoxel { index: usize, value: f32 },
}

/// Noise fraction and seed; levels of interest are 0.03, 0.09 and 0.15.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(level: f64, seed: u64) -> Result<Self, NoiseError> {
        if !(0.0..=1.0).contains(&level) || !level.is_finite() {
            return Err(NoiseError::BadLevel(level));
        }
        Ok(NoiseSpec { level, seed })
    }
}

/// Standard normal sampler (Box-Muller over a seeded ChaCha stream), emitting
/// the pair (z0, z1) per two uniforms; `next()` interleaves them.
pub struct NormalStream {
    rng: ChaCha8Rng,
    cached: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached: None,
        }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.cached.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next();
        }
    }
}

/// `n` i.i.d. standard normal samples, reproducible per seed.
pub fn standard_normal(seed: u64, n: usize) -> Vec<f64> {
    let mut stream = NormalStream::new(seed);
    let mut out = vec![0.0; n];
    stream.fill(&mut out);
    out
}

/// Applies Rician noise at `spec.level` to a non-negative magnitude volume.
pub fn add_rician(volume: &Volume, spec: &NoiseSpec) -> Result<Volume, NoiseError> {
    if !(0.0..=1.0).contains(&spec.level) {
        return Err(NoiseError::BadLevel(spec.level));
    }
    if let Some((index, &value)) = volume
        .voxels()
        .iter()
        .enumerate()
        .find(|(_, &v)| v < 0.0)
    {
        return Err(NoiseError::NegativeVoxel { index, value });
    }
    let alpha = volume.max();
    let s = alpha * spec.level as f32;
    let mut stream = NormalStream::new(spec.seed);
    let mut out = volume.clone();
    for v in out.voxels_mut() {
        let nr = stream.next() as f32;
        let ni = stream.next() as f32;
        let re = *v + s * nr;
        let im = s * ni;
        *v = (re * re + im * im).sqrt();
    }
    Ok(out)
}
