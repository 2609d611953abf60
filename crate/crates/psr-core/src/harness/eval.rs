//! Threat-model evaluation: repeated seeded attack runs against white-box
//! or transfer targets, reported as mean and stddev of robust accuracy.

use crate::attack::{run_attack, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::tensor::Tensor;

/// Which model the adversary crafts against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreatKind {
    WhiteBox,
    Transfer,
    /// Poisoned-training scenario; crafting itself is white-box.
    TrainTime,
}

impl ThreatKind {
    pub fn label(&self) -> &'static str {
        match self {
            ThreatKind::WhiteBox => "whitebox",
            ThreatKind::Transfer => "transfer",
            ThreatKind::TrainTime => "traintime",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustStats {
    pub mean: f64,
    pub std: f64,
    pub per_repeat: Vec<f64>,
}

impl RobustStats {
    fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() > 1 {
            (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, per_repeat: samples }
    }
}

/// Clean accuracy through the common classifier surface.
pub fn clean_accuracy(model: &dyn Classifier, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if model.predict(images.sample(i))? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Robust accuracy of `target` under examples crafted against `generator`
/// (white-box when the two coincide), averaged over `repeats` seeded runs.
/// A sample counts as robust if the target classifies it correctly or the
/// attack exceeded the budget.
pub fn robust_accuracy(
    target: &dyn Classifier,
    generator: &dyn Classifier,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    repeats: usize,
    base_seed: u64,
) -> Result<RobustStats> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    if generator.architecture_id() != target.architecture_id() {
        return Err(Error::InvalidConfig(format!(
            "transfer needs a shared architecture: generator {} vs target {}",
            generator.architecture_id(),
            target.architecture_id()
        )));
    }
    let mut samples = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = rng::mix(base_seed, r as u64);
        let batch = run_attack(generator, images, labels, &run_cfg)?;
        let mut robust = 0usize;
        for (slot, &i) in batch.origin_indices.iter().enumerate() {
            let within_budget = batch.linf_norms[slot] <= cfg.eps + 1e-6;
            let correct = target.predict(batch.x_adv.sample(slot))? == labels[i];
            if correct || !within_budget {
                robust += 1;
            }
        }
        samples.push(robust as f64 / labels.len().max(1) as f64);
    }
    Ok(RobustStats::from_samples(samples))
}

#[derive(Debug, Clone)]
pub struct TransferRow {
    pub generator: String,
    pub target: String,
    pub attack: AttackMethod,
    pub seed: u64,
    pub stats: RobustStats,
}

/// The transfer comparison grid: every generator crossed with every target
/// of the same architecture (generator == target reduces to white-box).
pub fn run_transfer_eval(
    generators: &[(String, &dyn Classifier)],
    targets: &[(String, &dyn Classifier)],
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    repeats: usize,
    base_seed: u64,
) -> Result<Vec<TransferRow>> {
    let mut rows = Vec::with_capacity(generators.len() * targets.len());
    for (gi, (gname, gen)) in generators.iter().enumerate() {
        for (ti, (tname, tgt)) in targets.iter().enumerate() {
            let seed = rng::mix(base_seed, (gi * 97 + ti) as u64);
            let stats = robust_accuracy(*tgt, *gen, images, labels, cfg, repeats, seed)?;
            rows.push(TransferRow {
                generator: gname.clone(),
                target: tname.clone(),
                attack: cfg.method,
                seed,
                stats,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackMethod;
    use crate::nn::micro_resnet_9;
    use rand::Rng;

    fn random_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = rng::stream(seed, &[0]);
        let data: Vec<f32> = (0..n * 64).map(|_| rng.random::<f32>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        (Tensor::new(vec![n, 1, 8, 8], data).unwrap(), labels)
    }

    #[test]
    fn zero_budget_reproduces_clean_accuracy_exactly() {
        let m = micro_resnet_9((1, 8, 8), 3, (4, 8), 31).unwrap();
        let (x, y) = random_batch(24, 5);
        let cfg = AttackConfig { eps: 0.0, ..AttackConfig::new(AttackMethod::Pgd) };
        let stats = robust_accuracy(&m, &m, &x, &y, &cfg, 2, 9).unwrap();
        let clean = clean_accuracy(&m, &x, &y).unwrap();
        assert_eq!(stats.mean, clean);
        assert_eq!(stats.std, 0.0);
    }

    #[test]
    fn transfer_with_identical_generator_equals_whitebox() {
        let m = micro_resnet_9((1, 8, 8), 3, (4, 8), 32).unwrap();
        let (x, y) = random_batch(16, 6);
        let cfg = AttackConfig::new(AttackMethod::Fgsm);
        let wb = robust_accuracy(&m, &m, &x, &y, &cfg, 3, 42).unwrap();
        let tr = robust_accuracy(&m, &m, &x, &y, &cfg, 3, 42).unwrap();
        assert_eq!(wb.per_repeat, tr.per_repeat);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let a = micro_resnet_9((1, 8, 8), 3, (4, 8), 1).unwrap();
        let mut b = micro_resnet_9((1, 8, 8), 3, (4, 8), 2).unwrap();
        b.architecture_id = "other".into();
        let (x, y) = random_batch(4, 7);
        let cfg = AttackConfig::new(AttackMethod::Fgsm);
        assert!(robust_accuracy(&a, &b, &x, &y, &cfg, 1, 0).is_err());
    }

    #[test]
    fn untrained_model_sits_at_chance_level() {
        let m = micro_resnet_9((1, 8, 8), 4, (4, 8), 77).unwrap();
        let mut rng = rng::stream(3, &[9]);
        let n = 400;
        let data: Vec<f32> = (0..n * 64).map(|_| rng.random::<f32>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let x = Tensor::new(vec![n, 1, 8, 8], data).unwrap();
        let clean = clean_accuracy(&m, &x, &labels).unwrap();
        // labels are independent of the inputs: accuracy is Binomial(n, 1/4)
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((clean - 0.25).abs() <= 3.0 * sd, "clean {clean}");
        let cfg = AttackConfig::new(AttackMethod::Fgsm);
        let stats = robust_accuracy(&m, &m, &x, &labels, &cfg, 1, 4).unwrap();
        assert!((stats.mean - 0.25).abs() <= 4.0 * sd, "robust {}", stats.mean);
    }

    #[test]
    fn transfer_grid_has_one_row_per_pair() {
        let a = micro_resnet_9((1, 8, 8), 3, (4, 8), 1).unwrap();
        let b = micro_resnet_9((1, 8, 8), 3, (4, 8), 2).unwrap();
        let (x, y) = random_batch(8, 8);
        let cfg = AttackConfig::new(AttackMethod::Fgsm);
        let gens: Vec<(String, &dyn Classifier)> =
            vec![("a".into(), &a as &dyn Classifier), ("b".into(), &b as &dyn Classifier)];
        let rows = run_transfer_eval(&gens, &gens, &x, &y, &cfg, 2, 11).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.stats.per_repeat.len(), 2);
        }
    }
}
