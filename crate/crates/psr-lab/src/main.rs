//! psr-lab: train, attack, quantize and evaluate small image classifiers
//! under differential privacy, adversarial threat models and int8
//! quantization, from one JSON experiment config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use psr_core::attack::{run_attack, AttackConfig, AttackMethod};
use psr_core::checkpoint::{self, Entry, LoadedModel, Payload};
use psr_core::data::{load_idx, DataSet};
use psr_core::dp::{calibrate_sigma, epsilon_for};
use psr_core::harness::config::parse_ratio;
use psr_core::harness::pipeline::{run_pipeline, run_train_stages};
use psr_core::harness::{robust_accuracy, ExperimentConfig};
use psr_core::quant::{calibrate_ranges, model_size_bytes, quantize_model, quantized_size_bytes, size_reduction_pct};

#[derive(Parser)]
#[command(name = "psr-lab", version, about = "Private, robust and scalable training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn ratio_arg(s: &str) -> Result<f32, String> {
    parse_ratio(s).map_err(|e| e.to_string())
}

#[derive(Args, Clone)]
struct AttackArgs {
    /// fgsm | pgd | fab
    #[arg(long)]
    method: AttackMethod,
    /// L-infinity budget, e.g. 8/255 or 0.031
    #[arg(long, value_parser = ratio_arg, default_value = "8/255")]
    eps: f32,
    /// Step size, e.g. 2/255
    #[arg(long, value_parser = ratio_arg, default_value = "2/255")]
    step: f32,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Restarts (defaults to 1, 3 for fab)
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    random_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AttackArgs {
    fn to_config(&self) -> AttackConfig {
        let defaults = AttackConfig::new(self.method);
        AttackConfig {
            method: self.method,
            eps: self.eps,
            step_size: self.step,
            n_steps: self.steps,
            n_restarts: self.restarts.unwrap_or(defaults.n_restarts),
            random_start: self.random_start,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline: data, training, quantization, evaluation, report
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "psr-out")]
        out: PathBuf,
    },
    /// Data preparation and (federated) training only
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "psr-out")]
        out: PathBuf,
    },
    /// Craft an adversarial dataset against a checkpoint
    Attack {
        #[command(flatten)]
        attack: AttackArgs,
        /// Model checkpoint (float or quantized)
        #[arg(long)]
        model: PathBuf,
        /// Data prefix: reads PREFIX-images.idx / PREFIX-labels.idx
        #[arg(long)]
        data: PathBuf,
        /// Output prefix: writes PREFIX.ckpt and PREFIX.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Statically quantize a float checkpoint with min-max calibration
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Calibration data prefix
        #[arg(long)]
        calib: PathBuf,
        /// Output prefix: writes PREFIX.ckpt and PREFIX.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Robust-accuracy evaluation under white-box or transfer crafting
    Evaluate {
        #[command(flatten)]
        attack: AttackArgs,
        /// Target checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Generator checkpoint for transfer evaluation (white-box if absent)
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Write the result row as JSON here (also printed to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Privacy accounting: epsilon for (q, sigma, steps) or sigma calibration
    Accountant {
        /// Poisson sampling rate
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: Option<f64>,
        /// Calibrate sigma for this epsilon instead of supplying sigma
        #[arg(long)]
        target_epsilon: Option<f64>,
        #[arg(long)]
        delta: f64,
        /// Number of noisy steps
        #[arg(long)]
        steps: u64,
    },
}

fn load_data(prefix: &Path) -> anyhow::Result<DataSet> {
    let images = prefix.with_file_name(format!(
        "{}-images.idx",
        prefix.file_name().and_then(|s| s.to_str()).unwrap_or("data")
    ));
    let labels = prefix.with_file_name(format!(
        "{}-labels.idx",
        prefix.file_name().and_then(|s| s.to_str()).unwrap_or("data")
    ));
    load_idx(&images, &labels)
        .with_context(|| format!("loading IDX pair at prefix {}", prefix.display()))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Pipeline { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_pipeline(&cfg, &out)?;
            println!(
                "report written to {} ({} models, {} rows)",
                out.join("report.json").display(),
                report.models.len(),
                report.rows.len()
            );
        }
        Cmd::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let paths = run_train_stages(&cfg, &out)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Attack { attack, model, data, out } => {
            let cfg = attack.to_config();
            cfg.validate()?;
            let loaded = checkpoint::load_any(&model)?;
            let ds = load_data(&data)?;
            let batch = run_attack(loaded.classifier(), &ds.images, &ds.labels, &cfg)?;

            let n = batch.origin_indices.len();
            let mut tail = ds.images.shape()[1..].to_vec();
            if tail.is_empty() {
                tail = vec![ds.images.sample_len()];
            }
            let mut dims = vec![n];
            dims.extend_from_slice(&tail);
            let entries = vec![
                Entry { name: "x_adv".into(), dims, payload: Payload::F32(batch.x_adv.data().to_vec()) },
                Entry {
                    name: "origin".into(),
                    dims: vec![n],
                    payload: Payload::F32(batch.origin_indices.iter().map(|&i| i as f32).collect()),
                },
                Entry {
                    name: "success".into(),
                    dims: vec![n],
                    payload: Payload::F32(batch.success.iter().map(|&s| s as u8 as f32).collect()),
                },
                Entry {
                    name: "norms".into(),
                    dims: vec![n],
                    payload: Payload::F32(batch.linf_norms.clone()),
                },
            ];
            let ckpt = out.with_extension("ckpt");
            checkpoint::write_checkpoint(&ckpt, &entries)?;

            let successes = batch.success.iter().filter(|&&s| s).count();
            let mean_norm =
                batch.linf_norms.iter().map(|&v| v as f64).sum::<f64>() / n.max(1) as f64;
            let max_norm = batch.linf_norms.iter().copied().fold(0.0f32, f32::max);
            let summary = serde_json::json!({
                "method": cfg.method.to_string(),
                "eps": cfg.eps,
                "n": n,
                "success_rate": successes as f64 / n.max(1) as f64,
                "mean_norm": mean_norm,
                "max_norm": max_norm,
                "seed": cfg.seed,
            });
            let json_path = out.with_extension("json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
            println!("{summary}");
        }
        Cmd::Quantize { model, calib, out } => {
            let m = checkpoint::load_model(&model)?;
            let calib_ds = load_data(&calib)?;
            let ranges = calibrate_ranges(&m, &calib_ds.images)?;
            let qm = quantize_model(&m, &ranges)?;
            let ckpt = out.with_extension("ckpt");
            checkpoint::save_quantized(&qm, &ckpt)?;
            let before = model_size_bytes(&m);
            let after = quantized_size_bytes(&qm);
            let summary = serde_json::json!({
                "size_before": before,
                "size_after": after,
                "reduction_pct": size_reduction_pct(before, after),
            });
            std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{summary}");
        }
        Cmd::Evaluate { attack, model, generator, data, repeats, out } => {
            let cfg = attack.to_config();
            cfg.validate()?;
            let target = checkpoint::load_any(&model)?;
            let generator_loaded: Option<LoadedModel> =
                generator.as_deref().map(checkpoint::load_any).transpose()?;
            let ds = load_data(&data)?;
            let gen_ref = generator_loaded
                .as_ref()
                .map(|g| g.classifier())
                .unwrap_or_else(|| target.classifier());
            let stats = robust_accuracy(
                target.classifier(),
                gen_ref,
                &ds.images,
                &ds.labels,
                &cfg,
                repeats,
                cfg.seed,
            )?;
            let clean =
                psr_core::harness::clean_accuracy(target.classifier(), &ds.images, &ds.labels)?;
            let row = serde_json::json!({
                "attack": cfg.method.to_string(),
                "threat": if generator.is_some() { "transfer" } else { "whitebox" },
                "clean_acc": clean,
                "robust_acc_mean": stats.mean,
                "robust_acc_std": stats.std,
                "per_repeat": stats.per_repeat,
                "repeats": repeats,
                "seed": cfg.seed,
            });
            let text = serde_json::to_string_pretty(&row)?;
            if let Some(path) = out {
                std::fs::write(&path, &text)?;
            }
            println!("{text}");
        }
        Cmd::Accountant { q, sigma, target_epsilon, delta, steps } => {
            match (sigma, target_epsilon) {
                (Some(s), None) => {
                    let (eps, alpha) = epsilon_for(q, s, steps, delta)?;
                    println!("epsilon = {eps:.6} at order alpha = {alpha} (q={q}, sigma={s}, steps={steps}, delta={delta})");
                }
                (None, Some(target)) => {
                    let s = calibrate_sigma(target, delta, q, steps)?;
                    let (eps, alpha) = epsilon_for(q, s, steps, delta)?;
                    println!("sigma = {s:.6} reaches epsilon = {eps:.6} (target {target}, alpha = {alpha})");
                }
                (Some(_), Some(_)) => bail!("--sigma and --target-epsilon are mutually exclusive"),
                (None, None) => bail!("provide --sigma or --target-epsilon"),
            }
        }
    }
    Ok(())
}
