//! Artifact writers. Numeric CSV cells carry 17 significant digits so that a
//! replayed run diffs clean against the original.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use fedlab_core::RoundRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const METRICS_HEADER: [&str; 5] = ["round", "train_loss", "test_accuracy", "grad_norm_sq", "elapsed_ms"];

/// Set to `1` to put wall-clock times into `metrics.csv`; otherwise that
/// column is zero and the times go to `timing.csv` only.
pub const WALLCLOCK_ENV: &str = "FEDLAB_WALLCLOCK";

pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn wallclock_in_metrics() -> bool {
    std::env::var(WALLCLOCK_ENV).is_ok_and(|v| v == "1")
}

pub fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(METRICS_HEADER)?;
    let wallclock = wallclock_in_metrics();
    for r in records {
        let elapsed = if wallclock { r.elapsed_ms } else { 0.0 };
        w.write_record([
            r.round.to_string(),
            fmt17(r.train_loss),
            fmt17(r.test_accuracy),
            fmt17(r.grad_norm_sq),
            fmt17(elapsed),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["round", "elapsed_ms"])?;
    for r in records {
        w.write_record([r.round.to_string(), format!("{:.3}", r.elapsed_ms)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub algorithm: String,
    pub seed: u64,
    pub rounds_to_target: Option<u64>,
    pub speedup: Option<f64>,
    pub final_acc_mean50: f64,
    pub final_acc_std50: f64,
    pub b_estimate_final: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub artifact_paths: Vec<String>,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(canonical_config: &str, seed: u64, started_at: chrono::DateTime<chrono::Utc>, artifacts: &[&str]) -> Self {
        RunManifest {
            config_hash: config_hash(canonical_config),
            seed,
            started_at: started_at.to_rfc3339(),
            artifact_paths: artifacts.iter().map(|s| s.to_string()).collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub seed: u64,
    pub final_acc_mean50: f64,
    pub final_acc_std50: f64,
    pub rounds_to_target: Option<u64>,
    pub speedup_vs_fedavg: Option<f64>,
    pub status: String,
}

impl ComparisonRow {
    pub fn empty(algorithm: String, seed: u64) -> Self {
        ComparisonRow {
            algorithm,
            seed,
            final_acc_mean50: f64::NAN,
            final_acc_std50: f64::NAN,
            rounds_to_target: None,
            speedup_vs_fedavg: None,
            status: "ok".into(),
        }
    }
}

pub const COMPARISON_HEADER: [&str; 7] = [
    "algorithm",
    "seed",
    "final_acc_mean50",
    "final_acc_std50",
    "rounds_to_target",
    "speedup_vs_fedavg",
    "status",
];

/// Rounds column as reported in tables: `>T` when the target was missed.
pub fn rounds_cell(rounds: Option<u64>) -> String {
    rounds.map_or_else(|| ">T".to_string(), |r| r.to_string())
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(COMPARISON_HEADER)?;
    for r in rows {
        let failed = r.status != "ok";
        let num = |x: f64| if failed { String::new() } else { fmt17(x) };
        w.write_record([
            r.algorithm.clone(),
            r.seed.to_string(),
            num(r.final_acc_mean50),
            num(r.final_acc_std50),
            if failed { String::new() } else { rounds_cell(r.rounds_to_target) },
            r.speedup_vs_fedavg.map(|s| format!("{s:.2}")).unwrap_or_default(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
