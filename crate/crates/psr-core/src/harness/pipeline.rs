//! End-to-end pipeline: data prep, (optionally poisoned) federated training
//! of standard and DP models, static quantization, threat-model evaluation
//! and report emission. Every stage writes its artifacts so the per-stage
//! CLI subcommands can reproduce pipeline-internal results from disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attack::AttackMethod;
use crate::checkpoint;
use crate::data::{load_idx, split_dataset, write_idx, DataSet, SplitSpec};
use crate::dp::{calibrate_sigma, PrivacySpec};
use crate::error::{Error, Result};
use crate::fed::{run_federation, write_round_log_csv, FederationConfig, TrainSettings, TrainingMode};
use crate::harness::config::{DataSource, ExperimentConfig};
use crate::harness::eval::{clean_accuracy, robust_accuracy};
use crate::harness::report::{EvalRow, ModelSummary, RobustnessReport, REPORT_SCHEMA_VERSION};
use crate::nn::{build_architecture, Classifier, Model};
use crate::quant::{calibrate_ranges, model_size_bytes, quantize_model, quantized_size_bytes, size_reduction_pct, QuantizedModel};
use crate::rng;

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::InvalidConfig(format!("stage {name}: {e}")))
}

pub struct DataArtifacts {
    pub train: DataSet,
    pub val: DataSet,
    pub test: DataSet,
}

/// Builds the dataset, splits it, writes the IDX artifacts and reloads them
/// so every later consumer (including per-stage CLI reruns) sees the same
/// byte-grid pixels.
pub fn prepare_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DataArtifacts> {
    let full = match cfg.data.source {
        DataSource::Synthetic => crate::data::generate_synthetic(
            cfg.data.n_classes,
            cfg.data.n_per_class,
            cfg.data.image_size,
            cfg.data.noise_level,
            rng::mix(cfg.seed, 0xDA7A),
        )?,
        DataSource::Idx => {
            let images = cfg.data.idx_images.as_ref().expect("validated");
            let labels = cfg.data.idx_labels.as_ref().expect("validated");
            load_idx(images, labels)?
        }
    };
    let spec = SplitSpec {
        train: cfg.data.train_fraction,
        val: cfg.data.val_fraction,
        test: cfg.data.test_fraction,
        seed: rng::mix(cfg.seed, 0x5911),
    };
    let (train, val, test) = split_dataset(&full, &spec)?;
    if cfg.quantize.enabled && val.is_empty() {
        return Err(Error::InvalidConfig(
            "quantization calibration needs a non-empty validation split".into(),
        ));
    }
    let data_dir = out_dir.join("data");
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(data_dir.display().to_string(), e))?;
    let mut reloaded = Vec::with_capacity(3);
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let images = data_dir.join(format!("{name}-images.idx"));
        let labels = data_dir.join(format!("{name}-labels.idx"));
        write_idx(part, &images, &labels)?;
        let mut ds = load_idx(&images, &labels)?;
        ds.n_classes = ds.n_classes.max(cfg.data.n_classes);
        reloaded.push(ds);
    }
    let test = reloaded.pop().expect("three parts");
    let val = reloaded.pop().expect("three parts");
    let train = reloaded.pop().expect("three parts");
    Ok(DataArtifacts { train, val, test })
}

/// Resolves the DP spec for a federation run: explicit sigma, or sigma
/// calibrated so the full run lands on the target epsilon.
pub fn resolve_privacy(cfg: &ExperimentConfig, shard_len: usize) -> Result<Option<PrivacySpec>> {
    let Some(dp) = &cfg.dp else { return Ok(None) };
    dp.validate()?;
    let q = dp
        .sampling_rate
        .unwrap_or((cfg.training.batch_size as f64 / shard_len.max(1) as f64).min(1.0));
    if !(0.0 < q && q <= 1.0) {
        return Err(Error::InvalidConfig(format!("resolved sampling rate {q} outside (0,1]")));
    }
    let steps_per_epoch = (1.0 / q).round().max(1.0) as u64;
    let total_steps = cfg.federation.rounds as u64
        * cfg.federation.local_epochs as u64
        * steps_per_epoch
        * cfg.federation.n_clients as u64;
    let sigma = match (dp.sigma, dp.target_epsilon) {
        (Some(s), _) => s,
        (None, Some(target)) => calibrate_sigma(target, dp.delta, q, total_steps)?,
        (None, None) => unreachable!("validated"),
    };
    Ok(Some(PrivacySpec {
        clip_norm: dp.clip_norm,
        noise_multiplier: sigma,
        delta: dp.delta,
        sampling_rate: q,
        target_epsilon: dp.target_epsilon,
    }))
}

fn fed_config(cfg: &ExperimentConfig, mode: TrainingMode) -> FederationConfig {
    FederationConfig {
        n_clients: cfg.federation.n_clients,
        rounds: cfg.federation.rounds,
        local_epochs: cfg.federation.local_epochs,
        adversary_id: cfg.federation.adversary_id,
        poison_fraction: cfg.federation.poison_fraction,
        mode,
        client_modes: None,
        adv_train_fraction: cfg.federation.adv_train_fraction,
        regenerate_poison_per_round: cfg.federation.regenerate_poison_per_round,
        seed: rng::mix(cfg.seed, 0xFED),
    }
}

struct TrainedModels {
    std: Model,
    dp: Option<(Model, f64)>, // model plus spent epsilon
}

fn train_models(
    cfg: &ExperimentConfig,
    data: &DataArtifacts,
    out_dir: &Path,
) -> Result<TrainedModels> {
    let (c, h, w) = data.train.image_shape();
    let model0 = build_architecture(
        &cfg.model.architecture,
        (c, h, w),
        data.train.n_classes,
        &cfg.model.widths,
        rng::mix(cfg.seed, 0x1217),
    )?;
    let settings = TrainSettings {
        lr: cfg.training.lr,
        momentum: cfg.training.momentum,
        batch_size: cfg.training.batch_size,
    };
    let attack_cfg = cfg.attack.to_config(cfg.attack.method, rng::mix(cfg.seed, 0xA77A));
    let models_dir = out_dir.join("models");
    let logs_dir = out_dir.join("logs");
    for d in [&models_dir, &logs_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }

    let base_mode = if cfg.federation.mode.uses_adversarial() {
        TrainingMode::Adversarial
    } else {
        TrainingMode::Standard
    };
    let fed_std = fed_config(cfg, base_mode);
    let out_std = run_federation(
        &fed_std,
        &settings,
        None,
        Some(&attack_cfg),
        &model0,
        &data.train,
        Some(&data.val),
    )?;
    checkpoint::save_model(&out_std.model, &models_dir.join("std.ckpt"))?;
    write_round_log_csv(&logs_dir.join("std-rounds.csv"), &out_std.rounds)?;

    let dp = match resolve_privacy(cfg, data.train.len() / cfg.federation.n_clients.max(1))? {
        Some(spec) => {
            let dp_mode = if cfg.federation.mode.uses_adversarial() {
                TrainingMode::DpAdversarial
            } else {
                TrainingMode::Dp
            };
            let fed_dp = fed_config(cfg, dp_mode);
            let out_dp = run_federation(
                &fed_dp,
                &settings,
                Some(&spec),
                Some(&attack_cfg),
                &model0,
                &data.train,
                Some(&data.val),
            )?;
            let eps = out_dp
                .accountant
                .as_ref()
                .map(|a| a.epsilon(spec.delta))
                .transpose()?
                .map(|(e, _)| e)
                .unwrap_or(0.0);
            checkpoint::save_model(&out_dp.model, &models_dir.join("dp.ckpt"))?;
            write_round_log_csv(&logs_dir.join("dp-rounds.csv"), &out_dp.rounds)?;
            Some((out_dp.model, eps))
        }
        None => None,
    };
    Ok(TrainedModels { std: out_std.model, dp })
}

/// Data prep plus federated training only; returns the checkpoint paths it
/// wrote. Used by the `train` subcommand.
pub fn run_train_stages(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let data = stage("data", prepare_data(cfg, out_dir))?;
    let trained = stage("train", train_models(cfg, &data, out_dir))?;
    let mut paths = vec![out_dir.join("models").join("std.ckpt")];
    if trained.dp.is_some() {
        paths.push(out_dir.join("models").join("dp.ckpt"));
    }
    Ok(paths)
}

/// Runs every stage and emits `report.json` / `report.csv` under `out_dir`.
/// The returned report has already been re-parsed from disk, so a returned
/// `Ok` implies a schema-valid artifact.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RobustnessReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut timings: BTreeMap<String, u64> = BTreeMap::new();

    let t = Instant::now();
    let data = stage("data", prepare_data(cfg, out_dir))?;
    timings.insert("data".into(), t.elapsed().as_millis() as u64);

    let t = Instant::now();
    let trained = stage("train", train_models(cfg, &data, out_dir))?;
    timings.insert("train".into(), t.elapsed().as_millis() as u64);

    let t = Instant::now();
    let mut quantized: Vec<(String, QuantizedModel, String)> = Vec::new();
    if cfg.quantize.enabled {
        let mut sources: Vec<(&str, &Model)> = vec![("std", &trained.std)];
        if let Some((dp_model, _)) = &trained.dp {
            sources.push(("dp", dp_model));
        }
        for (name, model) in sources {
            let ranges = stage("quantize", calibrate_ranges(model, &data.val.images))?;
            let qm = stage("quantize", quantize_model(model, &ranges))?;
            let path = out_dir.join("models").join(format!("{name}_q.ckpt"));
            stage("quantize", checkpoint::save_quantized(&qm, &path))?;
            quantized.push((format!("{name}_q"), qm, name.to_string()));
        }
    }
    timings.insert("quantize".into(), t.elapsed().as_millis() as u64);

    let t = Instant::now();
    // model zoo: name -> classifier view, plus per-model metadata
    let mut zoo: Vec<(String, &dyn Classifier)> = vec![("std".into(), &trained.std)];
    let mut eps_of: BTreeMap<String, f64> = BTreeMap::new();
    if let Some((dp_model, eps)) = &trained.dp {
        zoo.push(("dp".into(), dp_model));
        eps_of.insert("dp".into(), *eps);
    }
    for (name, qm, source) in &quantized {
        zoo.push((name.clone(), qm));
        if let Some(e) = eps_of.get(source).copied() {
            eps_of.insert(name.clone(), e);
        }
    }

    let mut models = Vec::new();
    let mut sizes: BTreeMap<String, (u64, Option<u64>)> = BTreeMap::new();
    sizes.insert("std".into(), (model_size_bytes(&trained.std), None));
    if let Some((dp_model, _)) = &trained.dp {
        sizes.insert("dp".into(), (model_size_bytes(dp_model), None));
    }
    for (name, qm, source) in &quantized {
        let before = sizes[source].0;
        sizes.insert(name.clone(), (quantized_size_bytes(qm), Some(before)));
    }
    let mut clean_of: BTreeMap<String, f64> = BTreeMap::new();
    for (name, model) in &zoo {
        let clean = stage("eval", clean_accuracy(*model, &data.test.images, &data.test.labels))?;
        clean_of.insert(name.clone(), clean);
        let (size, before) = sizes[name];
        models.push(ModelSummary {
            name: name.clone(),
            clean_acc: clean,
            size_bytes: size,
            epsilon: eps_of.get(name).copied(),
            quantized_from: quantized
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, _, src)| src.clone()),
            size_reduction_pct: before.map(|b| size_reduction_pct(b, size)),
        });
    }

    let wb_label =
        if cfg.federation.poison_fraction > 0.0 { "traintime" } else { "whitebox" };
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    let mut row_counter = 0u64;
    let row_seed = |counter: &mut u64| {
        let s = rng::mix(cfg.seed, 0xE7A1_0000 + *counter);
        *counter += 1;
        s
    };
    for method in cfg.eval_attacks() {
        let base = cfg.attack.to_config(method, 0);
        if cfg.eval.whitebox {
            for (name, model) in &zoo {
                let seed = row_seed(&mut row_counter);
                let stats = stage(
                    "eval",
                    robust_accuracy(
                        *model,
                        *model,
                        &data.test.images,
                        &data.test.labels,
                        &base,
                        cfg.eval.repeats,
                        seed,
                    ),
                )?;
                push_row(
                    &mut rows,
                    &mut flags,
                    cfg,
                    method,
                    format!("{wb_label}:{name}"),
                    name.clone(),
                    None,
                    clean_of[name],
                    &stats.mean,
                    stats.std,
                    seed,
                    eps_of.get(name).copied(),
                    &sizes[name],
                );
            }
        }
        if cfg.eval.transfer {
            let generators: Vec<&(String, &dyn Classifier)> =
                zoo.iter().filter(|(n, _)| n == "std" || n == "dp").collect();
            for (gname, gen) in generators {
                for (tname, target) in &zoo {
                    if tname == gname {
                        continue;
                    }
                    let seed = row_seed(&mut row_counter);
                    let stats = stage(
                        "eval",
                        robust_accuracy(
                            *target,
                            *gen,
                            &data.test.images,
                            &data.test.labels,
                            &base,
                            cfg.eval.repeats,
                            seed,
                        ),
                    )?;
                    push_row(
                        &mut rows,
                        &mut flags,
                        cfg,
                        method,
                        format!("transfer:{gname}->{tname}"),
                        tname.clone(),
                        Some(gname.clone()),
                        clean_of[tname],
                        &stats.mean,
                        stats.std,
                        seed,
                        eps_of.get(tname).copied(),
                        &sizes[tname],
                    );
                }
            }
        }
    }
    timings.insert("eval".into(), t.elapsed().as_millis() as u64);

    let report = RobustnessReport {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment_id: cfg.experiment_id.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        models,
        rows,
        flags,
        timings_ms: timings,
    };
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    stage("report", report.write(&json_path, &csv_path))?;
    // exit contract: success implies a schema-valid report on disk
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    stage("report", RobustnessReport::parse_json(&text))
}

#[allow(clippy::too_many_arguments)]
fn push_row(
    rows: &mut Vec<EvalRow>,
    flags: &mut Vec<String>,
    cfg: &ExperimentConfig,
    method: AttackMethod,
    threat: String,
    target: String,
    generator: Option<String>,
    clean: f64,
    robust_mean: &f64,
    robust_std: f64,
    seed: u64,
    eps: Option<f64>,
    size: &(u64, Option<u64>),
) {
    // robust accuracy should not exceed clean accuracy beyond noise
    if *robust_mean > clean + 0.02 + 2.0 * robust_std {
        flags.push(format!(
            "{threat}: robust accuracy {robust_mean:.4} exceeds clean {clean:.4}"
        ));
    }
    rows.push(EvalRow {
        experiment: cfg.experiment_id.clone(),
        attack: method.to_string(),
        threat,
        target,
        generator,
        clean_acc: clean,
        robust_acc_mean: *robust_mean,
        robust_acc_std: robust_std,
        repeats: cfg.eval.repeats,
        seed,
        eps,
        size_before: size.1,
        size_after: size.1.map(|_| size.0),
    });
}

/// Output locations used by the pipeline; the per-stage subcommands accept
/// these paths directly.
pub fn artifact_paths(out_dir: &Path) -> BTreeMap<&'static str, PathBuf> {
    BTreeMap::from([
        ("train_prefix", out_dir.join("data").join("train")),
        ("val_prefix", out_dir.join("data").join("val")),
        ("test_prefix", out_dir.join("data").join("test")),
        ("std_model", out_dir.join("models").join("std.ckpt")),
        ("dp_model", out_dir.join("models").join("dp.ckpt")),
        ("std_q_model", out_dir.join("models").join("std_q.ckpt")),
        ("dp_q_model", out_dir.join("models").join("dp_q.ckpt")),
        ("report_json", out_dir.join("report.json")),
        ("report_csv", out_dir.join("report.csv")),
    ])
}
