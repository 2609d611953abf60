//! Simulated collaborative training: local training in four modes
//! (standard, dp, adversarial, dp+adversarial), federated averaging, and a
//! train-time poisoning adversary.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::{partition_clients, DataSet};
use crate::dp::{clip_per_sample, noisy_aggregate, poisson_sample_batch, AccountantState, PrivacySpec};
use crate::error::{Error, Result};
use crate::nn::{optim::SgdOptimizer, Classifier, Model};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMode {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "dp")]
    Dp,
    #[serde(rename = "adversarial")]
    Adversarial,
    #[serde(rename = "dp+adversarial")]
    DpAdversarial,
}

impl TrainingMode {
    pub fn uses_dp(self) -> bool {
        matches!(self, TrainingMode::Dp | TrainingMode::DpAdversarial)
    }

    pub fn uses_adversarial(self) -> bool {
        matches!(self, TrainingMode::Adversarial | TrainingMode::DpAdversarial)
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TrainingMode::Standard),
            "dp" => Ok(TrainingMode::Dp),
            "adversarial" => Ok(TrainingMode::Adversarial),
            "dp+adversarial" => Ok(TrainingMode::DpAdversarial),
            other => Err(Error::InvalidConfig(format!("unknown training mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, batch_size: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct LocalTrainSpec<'a> {
    pub mode: TrainingMode,
    pub epochs: usize,
    pub settings: &'a TrainSettings,
    pub dp: Option<&'a PrivacySpec>,
    pub attack: Option<&'a AttackConfig>,
    /// Fraction of each batch replaced by adversarial examples (true labels
    /// kept) in the adversarial modes.
    pub adv_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: Model,
    pub mean_loss: f32,
    pub noisy_steps: u64,
}

/// Trains a copy of `model` on `data` for `epochs`. Deterministic under
/// `(seed, client, round)`; momentum state is local to the call.
pub fn local_train(
    model: &Model,
    data: &DataSet,
    spec: &LocalTrainSpec,
    seed: u64,
    client: u64,
    round: u64,
) -> Result<LocalOutcome> {
    if spec.mode.uses_dp() != spec.dp.is_some() {
        return Err(Error::InvalidConfig(
            "dp spec must be present exactly when the mode includes dp".into(),
        ));
    }
    if spec.mode.uses_adversarial() && spec.attack.is_none() {
        return Err(Error::InvalidConfig("adversarial mode needs an attack config".into()));
    }
    if !(0.0..=1.0).contains(&spec.adv_fraction) {
        return Err(Error::InvalidConfig("adv_fraction must lie in [0,1]".into()));
    }
    let mut local = model.clone();
    if spec.epochs == 0 {
        return Ok(LocalOutcome { model: local, mean_loss: f32::NAN, noisy_steps: 0 });
    }
    let mut opt = SgdOptimizer::new(spec.settings.lr, spec.settings.momentum, local.n_params())?;
    let mut loss_sum = 0.0f64;
    let mut loss_count = 0usize;
    let mut noisy_steps = 0u64;

    if let Some(dp) = spec.dp {
        dp.validate(data.len())?;
        let q = dp.sampling_rate;
        let steps_per_epoch = (1.0 / q).round().max(1.0) as usize;
        let expected_batch = q * data.len() as f64;
        let mut sample_rng = rng::stream(seed, &[client, round, 0xD9]);
        let mut noise_rng = rng::stream(seed, &[client, round, 0x9015E]);
        for epoch in 0..spec.epochs {
            for step in 0..steps_per_epoch {
                let idxs = poisson_sample_batch(data.len(), q, &mut sample_rng);
                let per_sample = if idxs.is_empty() {
                    Vec::new()
                } else {
                    let batch = gather_batch(
                        data,
                        &idxs,
                        spec,
                        &local,
                        &[client, round, epoch as u64, step as u64],
                    )?;
                    let (losses, grads) =
                        local.per_sample_loss_and_grads(&batch.0, &batch.1)?;
                    for &l in &losses {
                        if !l.is_finite() {
                            return Err(Error::Divergence(format!(
                                "non-finite loss in dp step {step} of round {round}"
                            )));
                        }
                        loss_sum += l as f64;
                        loss_count += 1;
                    }
                    grads
                };
                let clipped = clip_per_sample(&per_sample, dp.clip_norm)?;
                let grad = noisy_aggregate(
                    &clipped,
                    dp.noise_multiplier,
                    dp.clip_norm,
                    expected_batch,
                    local.n_params(),
                    &mut noise_rng,
                )?;
                opt.step(&mut local, &grad)?;
                noisy_steps += 1;
            }
        }
    } else {
        for epoch in 0..spec.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::stream(seed, &[client, round, epoch as u64, 0xBA7]));
            for (bi, chunk) in order.chunks(spec.settings.batch_size.max(1)).enumerate() {
                let batch = gather_batch(
                    data,
                    chunk,
                    spec,
                    &local,
                    &[client, round, epoch as u64, bi as u64],
                )?;
                let (loss, grad) = local.loss_and_grads(&batch.0, &batch.1)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss in batch {bi} of round {round}"
                    )));
                }
                loss_sum += loss as f64;
                loss_count += 1;
                opt.step(&mut local, &grad)?;
            }
        }
    }
    let mean_loss =
        if loss_count > 0 { (loss_sum / loss_count as f64) as f32 } else { f32::NAN };
    Ok(LocalOutcome { model: local, mean_loss, noisy_steps })
}

/// Collects `indices` into a batch; in the adversarial modes the first
/// `floor(adv_fraction * len)` slots are replaced by attacks on the current
/// local model, keeping the true labels.
fn gather_batch(
    data: &DataSet,
    indices: &[usize],
    spec: &LocalTrainSpec,
    local: &Model,
    stream_labels: &[u64],
) -> Result<(Tensor, Vec<usize>)> {
    let mut images = Vec::with_capacity(indices.len() * data.images.sample_len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        images.extend_from_slice(data.images.sample(i));
        labels.push(data.labels[i]);
    }
    let mut shape = data.images.shape().to_vec();
    shape[0] = indices.len();
    let mut batch = Tensor::new(shape, images)?;

    if spec.mode.uses_adversarial() {
        let cfg = spec.attack.expect("checked in local_train");
        let n_adv = (spec.adv_fraction * indices.len() as f64).floor() as usize;
        if n_adv > 0 {
            let adv = attack::run_attack_indices(
                local,
                &data.images,
                &data.labels,
                &indices[..n_adv],
                cfg,
                stream_labels,
            )?;
            for slot in 0..n_adv {
                batch.sample_mut(slot).copy_from_slice(adv.x_adv.sample(slot));
            }
        }
    }
    Ok((batch, labels))
}

/// Parameter-wise mean weighted by client dataset sizes.
pub fn fedavg(updates: &[Vec<f32>], sizes: &[usize]) -> Result<Vec<f32>> {
    if updates.is_empty() || updates.len() != sizes.len() {
        return Err(Error::InvalidConfig("updates and sizes must pair up".into()));
    }
    let dim = updates[0].len();
    if updates.iter().any(|u| u.len() != dim) {
        return Err(Error::ShapeMismatch("client updates have differing lengths".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidConfig("total client size is zero".into()));
    }
    let mut acc = vec![0.0f64; dim];
    for (u, &s) in updates.iter().zip(sizes) {
        let w = s as f64 / total as f64;
        for (a, &v) in acc.iter_mut().zip(u) {
            *a += w * v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Replaces a seeded fraction of the shard with adversarial samples whose
/// labels are the generator's predictions on the perturbed inputs.
pub fn poison_client_data(
    data: &DataSet,
    generator: &dyn Classifier,
    cfg: &AttackConfig,
    fraction: f64,
) -> Result<DataSet> {
    attack::craft_adversarial_set(generator, data, cfg, fraction)
}

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub adversary_id: Option<usize>,
    pub poison_fraction: f64,
    pub mode: TrainingMode,
    /// Optional per-client mode override (defaults to `mode` for everyone).
    pub client_modes: Option<Vec<TrainingMode>>,
    pub adv_train_fraction: f64,
    /// Regenerate the adversary's poisoned shard each round from its latest
    /// local snapshot instead of once up front.
    pub regenerate_poison_per_round: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 2,
            rounds: 20,
            local_epochs: 1,
            adversary_id: None,
            poison_fraction: 0.0,
            mode: TrainingMode::Standard,
            client_modes: None,
            adv_train_fraction: 0.2,
            regenerate_poison_per_round: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidConfig("need at least one client".into()));
        }
        if let Some(a) = self.adversary_id {
            if a >= self.n_clients {
                return Err(Error::InvalidConfig(format!(
                    "adversary id {a} out of range for {} clients",
                    self.n_clients
                )));
            }
        }
        if !(0.0..=0.4 + 1e-9).contains(&self.poison_fraction) {
            return Err(Error::InvalidConfig(format!(
                "poison fraction {} outside [0, 0.4]",
                self.poison_fraction
            )));
        }
        if self.poison_fraction > 0.0 && self.adversary_id.is_none() {
            return Err(Error::InvalidConfig("poisoning requires an adversary id".into()));
        }
        if let Some(modes) = &self.client_modes {
            if modes.len() != self.n_clients {
                return Err(Error::InvalidConfig("one mode per client required".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.adv_train_fraction) {
            return Err(Error::InvalidConfig("adv_train_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }

    fn mode_of(&self, client: usize) -> TrainingMode {
        self.client_modes.as_ref().map_or(self.mode, |m| m[client])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub client_losses: Vec<f32>,
    pub clean_acc: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug)]
pub struct FederationOutcome {
    pub model: Model,
    pub rounds: Vec<RoundLog>,
    pub accountant: Option<AccountantState>,
}

/// Partitions `train` into IID shards and runs the round loop.
pub fn run_federation(
    cfg: &FederationConfig,
    settings: &TrainSettings,
    dp: Option<&PrivacySpec>,
    attack_cfg: Option<&AttackConfig>,
    model0: &Model,
    train: &DataSet,
    eval: Option<&DataSet>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    let shards = if cfg.n_clients == 1 {
        vec![train.clone()]
    } else {
        partition_clients(train, cfg.n_clients, cfg.seed)?
    };
    run_federation_with_shards(cfg, settings, dp, attack_cfg, model0, shards, eval)
}

/// Round loop over caller-provided shards (exposed for identity checks and
/// custom partitions).
pub fn run_federation_with_shards(
    cfg: &FederationConfig,
    settings: &TrainSettings,
    dp: Option<&PrivacySpec>,
    attack_cfg: Option<&AttackConfig>,
    model0: &Model,
    shards: Vec<DataSet>,
    eval: Option<&DataSet>,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if shards.len() != cfg.n_clients {
        return Err(Error::InvalidConfig("one shard per client required".into()));
    }
    let any_dp = (0..cfg.n_clients).any(|c| cfg.mode_of(c).uses_dp());
    if any_dp && dp.is_none() {
        return Err(Error::InvalidConfig("dp mode requires a privacy spec".into()));
    }
    let needs_attack = cfg.poison_fraction > 0.0
        || (0..cfg.n_clients).any(|c| cfg.mode_of(c).uses_adversarial());
    if needs_attack && attack_cfg.is_none() {
        return Err(Error::InvalidConfig("poisoning/adversarial training needs an attack config".into()));
    }

    let mut global = model0.clone();
    let mut adv_local = model0.clone();
    let mut accountant = any_dp.then(AccountantState::new);
    let mut total_noisy_steps = 0u64;
    let mut rounds = Vec::with_capacity(cfg.rounds);

    // once-up-front poisoning uses the adversary's initial snapshot
    let mut poisoned: Option<DataSet> = None;
    if cfg.poison_fraction > 0.0 && !cfg.regenerate_poison_per_round {
        let adv = cfg.adversary_id.expect("validated");
        poisoned = Some(attack::craft_adversarial_set_streams(
            &adv_local,
            &shards[adv],
            attack_cfg.expect("validated"),
            cfg.poison_fraction,
            &[0xF00D],
        )?);
    }

    for round in 0..cfg.rounds {
        let mut updates = Vec::with_capacity(cfg.n_clients);
        let mut sizes = Vec::with_capacity(cfg.n_clients);
        let mut losses = Vec::with_capacity(cfg.n_clients);
        for client in 0..cfg.n_clients {
            let mode = cfg.mode_of(client);
            let is_adversary = cfg.adversary_id == Some(client) && cfg.poison_fraction > 0.0;
            let regenerated;
            let shard: &DataSet = if is_adversary {
                if cfg.regenerate_poison_per_round {
                    regenerated = attack::craft_adversarial_set_streams(
                        &adv_local,
                        &shards[client],
                        attack_cfg.expect("validated"),
                        cfg.poison_fraction,
                        &[0xF00D, round as u64],
                    )?;
                    &regenerated
                } else {
                    poisoned.as_ref().expect("poisoned up front")
                }
            } else {
                &shards[client]
            };
            let spec = LocalTrainSpec {
                mode,
                epochs: cfg.local_epochs,
                settings,
                dp: mode.uses_dp().then(|| dp.expect("validated")),
                attack: mode.uses_adversarial().then(|| attack_cfg.expect("validated")),
                adv_fraction: cfg.adv_train_fraction,
            };
            let out = local_train(&global, shard, &spec, cfg.seed, client as u64, round as u64)
                .map_err(|e| {
                    Error::Divergence(format!("client {client} round {round} failed: {e}"))
                })?;
            if cfg.adversary_id == Some(client) {
                adv_local = out.model.clone();
            }
            if let (Some(acc), Some(dp)) = (accountant.as_mut(), dp) {
                if out.noisy_steps > 0 {
                    acc.record_steps(out.noisy_steps, dp.sampling_rate, dp.noise_multiplier)?;
                    total_noisy_steps += out.noisy_steps;
                }
            }
            updates.push(out.model.flat_params());
            sizes.push(shard.len());
            losses.push(out.mean_loss);
        }
        let avg = fedavg(&updates, &sizes)?;
        global.set_flat_params(&avg)?;
        let clean_acc = match eval {
            Some(ds) => Some(global.accuracy(&ds.images, &ds.labels)?),
            None => None,
        };
        let epsilon = match (&accountant, dp) {
            (Some(acc), Some(spec)) => Some(acc.epsilon(spec.delta)?.0),
            _ => None,
        };
        rounds.push(RoundLog { round, client_losses: losses, clean_acc, epsilon });
    }
    if let Some(acc) = &accountant {
        // accounting completeness: one accounted step per noisy aggregation
        assert_eq!(acc.steps, total_noisy_steps, "accountant missed noisy steps");
    }
    Ok(FederationOutcome { model: global, rounds, accountant })
}

/// `round,client_0_loss,...,clean_acc,epsilon` rows, one per round.
pub fn write_round_log_csv(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let n_clients = logs.first().map_or(0, |l| l.client_losses.len());
    let mut out = String::from("round");
    for c in 0..n_clients {
        out.push_str(&format!(",client_{c}_loss"));
    }
    out.push_str(",clean_acc,epsilon\n");
    for l in logs {
        out.push_str(&l.round.to_string());
        for v in &l.client_losses {
            out.push_str(&format!(",{v}"));
        }
        match l.clean_acc {
            Some(a) => out.push_str(&format!(",{a}")),
            None => out.push(','),
        }
        match l.epsilon {
            Some(e) => out.push_str(&format!(",{e}")),
            None => out.push(','),
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}
