//! L-infinity bounded adversarial example crafting (FGSM, PGD, FAB) and
//! adversarial dataset generation for poisoning and evaluation.

mod fab;
mod fgsm;
mod pgd;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::tensor::{linf_distance, Tensor};

pub use fab::project_box_hyperplane;

pub const DEFAULT_EPS: f32 = 8.0 / 255.0;
pub const DEFAULT_STEP: f32 = 2.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Fab,
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "fab" => Ok(AttackMethod::Fab),
            other => Err(Error::InvalidConfig(format!("unknown attack method {other}"))),
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Fab => "fab",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L-infinity budget as a fraction of the pixel dynamic range.
    pub eps: f32,
    pub step_size: f32,
    pub n_steps: usize,
    pub n_restarts: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(method: AttackMethod) -> Self {
        Self {
            method,
            eps: DEFAULT_EPS,
            step_size: DEFAULT_STEP,
            n_steps: 10,
            n_restarts: if method == AttackMethod::Fab { 3 } else { 1 },
            random_start: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `0 < step <= eps <= 1`; a zero budget is allowed as the degenerate
    /// evaluation case.
    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 || self.eps > 1.0 {
            return Err(Error::InvalidConfig(format!("eps {} outside [0,1]", self.eps)));
        }
        if self.eps > 0.0 && (self.step_size <= 0.0 || self.step_size > self.eps) {
            return Err(Error::InvalidConfig(format!(
                "step size {} must lie in (0, eps={}]",
                self.step_size, self.eps
            )));
        }
        Ok(())
    }
}

/// Attacked inputs with per-sample provenance and outcomes. `success` means
/// the crafting model misclassifies the sample within the budget.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    pub origin_indices: Vec<usize>,
    pub success: Vec<bool>,
    pub linf_norms: Vec<f32>,
}

pub(crate) fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Crafts adversarial versions of every sample against `model`.
pub fn run_attack(
    model: &dyn Classifier,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let indices: Vec<usize> = (0..images.n_samples()).collect();
    run_attack_indices(model, images, labels, &indices, cfg, &[])
}

/// Attack the given sample indices only. Each sample's rng stream derives
/// from `(cfg.seed, extra_labels..., original index)`, so the subset choice
/// and worker layout never change results.
pub(crate) fn run_attack_indices(
    model: &dyn Classifier,
    images: &Tensor,
    labels: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
    extra_labels: &[u64],
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    if images.n_samples() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs {} labels",
            images.n_samples(),
            labels.len()
        )));
    }
    if images.sample_len() != model.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "image size {} does not match model input {}",
            images.sample_len(),
            model.input_len()
        )));
    }
    let mut rows = Vec::with_capacity(indices.len());
    let mut success = Vec::with_capacity(indices.len());
    let mut norms = Vec::with_capacity(indices.len());
    for &i in indices {
        let x = images.sample(i);
        let y = labels[i];
        let mut stream_labels = vec![0xA7_7Au64];
        stream_labels.extend_from_slice(extra_labels);
        stream_labels.push(i as u64);
        let x_adv = match cfg.method {
            AttackMethod::Fgsm => fgsm::fgsm_sample(model, x, y, cfg.eps)?,
            AttackMethod::Pgd => pgd::pgd_sample(model, x, y, cfg, &stream_labels)?,
            AttackMethod::Fab => fab::fab_sample(model, x, y, cfg, &stream_labels)?,
        };
        let norm = linf_distance(&x_adv, x);
        let misclassified = model.predict(&x_adv)? != y;
        success.push(misclassified && norm <= cfg.eps + 1e-6);
        norms.push(norm);
        rows.push(x_adv);
    }
    let mut tail = images.shape()[1..].to_vec();
    if tail.is_empty() {
        tail = vec![images.sample_len()];
    }
    Ok(AdversarialBatch {
        x_adv: Tensor::stack(&rows, &tail)?,
        origin_indices: indices.to_vec(),
        success,
        linf_norms: norms,
    })
}

/// Replaces a seeded `floor(fraction * N)` subset with attacked versions
/// whose labels are the generator's predictions on the perturbed inputs.
pub fn craft_adversarial_set(
    generator: &dyn Classifier,
    ds: &DataSet,
    cfg: &AttackConfig,
    fraction: f64,
) -> Result<DataSet> {
    craft_adversarial_set_streams(generator, ds, cfg, fraction, &[])
}

pub(crate) fn craft_adversarial_set_streams(
    generator: &dyn Classifier,
    ds: &DataSet,
    cfg: &AttackConfig,
    fraction: f64,
    extra_labels: &[u64],
) -> Result<DataSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("poison fraction {fraction} outside [0,1]")));
    }
    let canonical = [0.0, 0.1, 0.2, 0.3, 0.4];
    if !canonical.iter().any(|&c| (fraction - c).abs() < 1e-9) {
        log::warn!("poison fraction {fraction} is outside the studied grid {canonical:?}");
    }
    let count = (fraction * ds.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(ds.clone());
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut rng::stream(cfg.seed, &[0x9015, extra_labels.first().copied().unwrap_or(0)]));
    let mut chosen: Vec<usize> = perm[..count].to_vec();
    chosen.sort_unstable();

    let batch = run_attack_indices(generator, &ds.images, &ds.labels, &chosen, cfg, extra_labels)?;
    let mut out = ds.clone();
    for (slot, &i) in chosen.iter().enumerate() {
        let x_adv = batch.x_adv.sample(slot);
        out.images.sample_mut(i).copy_from_slice(x_adv);
        out.labels[i] = generator.predict(x_adv)?;
    }
    Ok(out)
}
