//! DP-SGD primitives: Poisson batch sampling, per-sample clipping with a
//! global L2 bound, and Gaussian noising of the aggregate. The accountant
//! lives in [`accountant`].

pub mod accountant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

pub use accountant::{calibrate_sigma, epsilon_for, rdp_subsampled_gaussian, AccountantState};

/// Clip bound, noise multiplier, failure probability and sampling rate for
/// one DP-SGD run. When `target_epsilon` is set the noise multiplier is
/// expected to come from [`calibrate_sigma`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySpec {
    pub clip_norm: f32,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub target_epsilon: Option<f64>,
}

impl PrivacySpec {
    /// Checks invariants; warns (does not fail) when delta is not below 1/n.
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        if self.noise_multiplier <= 0.0 {
            return Err(Error::InvalidConfig("noise multiplier must be positive".into()));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must lie in (0,1)".into()));
        }
        if !(0.0 < self.sampling_rate && self.sampling_rate <= 1.0) {
            return Err(Error::InvalidConfig("sampling rate must lie in (0,1]".into()));
        }
        if dataset_size > 0 && self.delta >= 1.0 / dataset_size as f64 {
            log::warn!(
                "delta {} is not below 1/n = {:.2e}; the guarantee is weak",
                self.delta,
                1.0 / dataset_size as f64
            );
        }
        Ok(())
    }
}

/// Each index joins the batch independently with probability `q`; the batch
/// may be empty (a noise-only step is still a step).
pub fn poisson_sample_batch(n: usize, q: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Scales each per-sample gradient by `min(1, C / ||g||_2)` where the norm
/// is global over all parameters of that sample.
pub fn clip_per_sample(grads: &[Vec<f32>], clip_norm: f32) -> Result<Vec<Vec<f32>>> {
    if clip_norm <= 0.0 {
        return Err(Error::InvalidConfig("clip norm must be positive".into()));
    }
    let c = clip_norm as f64;
    let mut out = Vec::with_capacity(grads.len());
    for g in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("per-sample gradient".into()));
        }
        let norm = l2_norm(g);
        let scale = if norm > c { c / norm } else { 1.0 };
        let clipped: Vec<f32> = g.iter().map(|&v| (v as f64 * scale) as f32).collect();
        debug_assert!(l2_norm(&clipped) <= c + 1e-6, "clipped norm {}", l2_norm(&clipped));
        out.push(clipped);
    }
    Ok(out)
}

/// `(sum of clipped gradients + N(0, sigma^2 C^2 I)) / expected_batch`.
/// This is the only aggregation route on the DP training path; `dim` sizes
/// the noise when the sampled batch is empty.
pub fn noisy_aggregate(
    clipped: &[Vec<f32>],
    sigma: f64,
    clip_norm: f32,
    expected_batch: f64,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    if dim == 0 {
        return Err(Error::InvalidConfig("empty gradient dimension".into()));
    }
    if expected_batch <= 0.0 {
        return Err(Error::InvalidConfig("expected batch size must be positive".into()));
    }
    let mut acc = vec![0.0f64; dim];
    for g in clipped {
        if g.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} values, expected {dim}",
                g.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += v as f64;
        }
    }
    let noise_std = sigma * clip_norm as f64;
    for a in acc.iter_mut() {
        *a = (*a + noise_std * rng::standard_normal(rng)) / expected_batch;
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}
