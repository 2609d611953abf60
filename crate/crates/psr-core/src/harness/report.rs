//! Robustness reports: a full nested JSON document plus a flat CSV with the
//! fixed header
//! `experiment,attack,threat,clean_acc,robust_acc_mean,robust_acc_std,eps,size_before,size_after`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "experiment,attack,threat,clean_acc,robust_acc_mean,robust_acc_std,eps,size_before,size_after";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub clean_acc: f64,
    pub size_bytes: u64,
    /// Privacy budget spent training this model, when DP was on.
    pub epsilon: Option<f64>,
    pub quantized_from: Option<String>,
    pub size_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub experiment: String,
    pub attack: String,
    /// `whitebox`, `traintime`, or `transfer`, suffixed with the
    /// generator/target names.
    pub threat: String,
    pub target: String,
    pub generator: Option<String>,
    pub clean_acc: f64,
    pub robust_acc_mean: f64,
    pub robust_acc_std: f64,
    pub repeats: usize,
    /// Base seed of the repeat family; rerunning `evaluate` with it
    /// reproduces this row bit-exactly.
    pub seed: u64,
    pub eps: Option<f64>,
    pub size_before: Option<u64>,
    pub size_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema_version: u32,
    pub experiment_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub models: Vec<ModelSummary>,
    pub rows: Vec<EvalRow>,
    /// Soft invariant violations (flagged, never fatal).
    pub flags: Vec<String>,
    /// Wall-clock stage timings; excluded from determinism comparisons.
    pub timings_ms: BTreeMap<String, u64>,
}

impl RobustnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::format("report.json", format!("schema violation: {e}")))
    }

    /// Canonical bytes with timings cleared; equal fingerprints mean equal
    /// reports up to wall-clock noise.
    pub fn fingerprint(&self) -> String {
        let mut copy = self.clone();
        copy.timings_ms.clear();
        copy.to_json()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let eps = r.eps.map(|e| e.to_string()).unwrap_or_default();
            let before = r.size_before.map(|v| v.to_string()).unwrap_or_default();
            let after = r.size_after.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.experiment,
                r.attack,
                r.threat,
                r.clean_acc,
                r.robust_acc_mean,
                r.robust_acc_std,
                eps,
                before,
                after
            ));
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json())
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        std::fs::write(csv_path, self.to_csv())
            .map_err(|e| Error::io(csv_path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RobustnessReport {
        RobustnessReport {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment_id: "t".into(),
            seed: 3,
            config: ExperimentConfig::default(),
            models: vec![ModelSummary {
                name: "std".into(),
                clean_acc: 0.9,
                size_bytes: 1000,
                epsilon: None,
                quantized_from: None,
                size_reduction_pct: None,
            }],
            rows: vec![EvalRow {
                experiment: "t".into(),
                attack: "pgd".into(),
                threat: "whitebox:std".into(),
                target: "std".into(),
                generator: None,
                clean_acc: 0.9,
                robust_acc_mean: 0.4,
                robust_acc_std: 0.01,
                repeats: 10,
                seed: 5,
                eps: None,
                size_before: None,
                size_after: None,
            }],
            flags: vec![],
            timings_ms: BTreeMap::from([("train".into(), 1234u64)]),
        }
    }

    #[test]
    fn json_round_trips_byte_identically() {
        let r = sample_report();
        let text = r.to_json();
        let parsed = RobustnessReport::parse_json(&text).unwrap();
        assert_eq!(parsed.to_json(), text);
    }

    #[test]
    fn csv_header_is_pinned() {
        let r = sample_report();
        let csv = r.to_csv();
        assert!(csv.starts_with(
            "experiment,attack,threat,clean_acc,robust_acc_mean,robust_acc_std,eps,size_before,size_after\n"
        ));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn empty_attack_list_still_yields_a_valid_report() {
        let mut r = sample_report();
        r.rows.clear();
        let parsed = RobustnessReport::parse_json(&r.to_json()).unwrap();
        assert!(parsed.rows.is_empty());
        assert_eq!(parsed.to_csv().lines().count(), 1);
    }

    #[test]
    fn fingerprint_ignores_timings() {
        let a = sample_report();
        let mut b = sample_report();
        b.timings_ms.insert("train".into(), 9999);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.to_json(), b.to_json());
    }
}
