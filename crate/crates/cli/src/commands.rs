use std::path::Path;

use anyhow::{Context, Result};
use fedlab_core::orchestrator::{self, estimate_dissimilarity, final_accuracy_stats, rounds_to_target, RunOutput};
use fedlab_core::{Algorithm, ExperimentConfig, FedError, FederatedTask};

use crate::config::{parse_config, ComparisonSpec, ParsedConfig};
use crate::output::{self, ComparisonRow, RunManifest, Summary};

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: None,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// Process exit status for a failed command. Anything that is not a data or
/// divergence failure is treated as a configuration problem.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<FedError>()) {
        Some(FedError::Io { .. } | FedError::Format { .. }) => EXIT_DATA,
        Some(FedError::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn canonical(value: &impl serde::Serialize) -> String {
    serde_json::to_string(value).expect("configs serialize to JSON")
}

fn b_estimate(task: &FederatedTask, out: &RunOutput, round: u64) -> Option<f64> {
    if out.divergence.is_some() {
        return None;
    }
    let clients: Vec<usize> = (0..task.n_clients()).collect();
    match estimate_dissimilarity(task, &out.final_omega, &clients, round) {
        Ok(est) => Some(est.b_value),
        Err(e) => {
            log::info!("no dissimilarity estimate: {e}");
            None
        }
    }
}

pub fn run_command(config_path: &Path, out_dir: &Path, opts: RunOptions) -> Result<()> {
    let mut cfg = match parse_config(config_path)? {
        ParsedConfig::Experiment(cfg) => cfg,
        ParsedConfig::Comparison(_) => {
            return Err(FedError::config("comparison", "this is a comparison file; use `fedlab compare`").into())
        }
    };
    if let Some(seed) = opts.seed {
        cfg.experiment.seed = seed;
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let started = chrono::Utc::now();
    log::info!("{} on {:?}, {} rounds, seed {}", cfg.algorithm.label(), cfg.task, cfg.experiment.total_rounds, cfg.experiment.seed);

    let task = FederatedTask::build(&cfg)?;
    let out = orchestrator::run_on_task(&cfg, &task, opts.threads)?;
    let (mean50, std50) = final_accuracy_stats(&out.records);
    let last_round = out.records.last().map_or(0, |r| r.round);
    let summary = Summary {
        algorithm: cfg.algorithm.label().to_string(),
        seed: cfg.experiment.seed,
        rounds_to_target: cfg.experiment.target_accuracy.and_then(|t| rounds_to_target(&out.records, t)),
        speedup: None,
        final_acc_mean50: mean50,
        final_acc_std50: std50,
        b_estimate_final: b_estimate(&task, &out, last_round),
        diverged: out.divergence.is_some(),
    };

    let artifacts = ["metrics.csv", "timing.csv", "summary.json", "manifest.json"];
    output::write_metrics(&out_dir.join(artifacts[0]), &out.records)?;
    output::write_timing(&out_dir.join(artifacts[1]), &out.records)?;
    output::write_json(&out_dir.join(artifacts[2]), &summary)?;
    let manifest = RunManifest::new(&canonical(&cfg), cfg.experiment.seed, started, &artifacts);
    output::write_json(&out_dir.join(artifacts[3]), &manifest)?;

    match out.divergence {
        Some(e) => Err(e.into()),
        None => {
            log::info!("done: final accuracy mean {mean50:.4}, results in {}", out_dir.display());
            Ok(())
        }
    }
}

struct Cell {
    row: ComparisonRow,
    error: Option<FedError>,
    is_baseline: bool,
}

fn run_cell(spec: &ComparisonSpec, cfg: &ExperimentConfig, task: &FederatedTask, label: &str, threads: usize, curves: &Path) -> Result<Cell> {
    let seed = cfg.experiment.seed;
    let mut row = ComparisonRow::empty(label.to_string(), seed);
    let is_baseline = cfg.algorithm == Algorithm::FedAvg;
    let out = match orchestrator::run_on_task(cfg, task, threads) {
        Ok(out) => out,
        Err(e) => {
            row.status = format!("error: {e}");
            return Ok(Cell { row, error: Some(e), is_baseline });
        }
    };
    output::write_metrics(&curves.join(format!("{label}_seed{seed}.csv")), &out.records)?;
    let (mean, std) = final_accuracy_stats(&out.records);
    row.final_acc_mean50 = mean;
    row.final_acc_std50 = std;
    row.rounds_to_target = rounds_to_target(&out.records, spec.comparison.target_accuracy);
    if let Some(e) = &out.divergence {
        row.status = match e {
            FedError::Divergence { round, .. } => format!("diverged at round {round}"),
            other => format!("error: {other}"),
        };
    }
    log::info!("{label} seed {seed}: mean50 {mean:.4}, rounds to target {}", output::rounds_cell(row.rounds_to_target));
    Ok(Cell { row, error: out.divergence, is_baseline })
}

pub fn compare_command(config_path: &Path, out_dir: &Path, opts: RunOptions) -> Result<()> {
    let mut spec = match parse_config(config_path)? {
        ParsedConfig::Comparison(spec) => spec,
        ParsedConfig::Experiment(_) => {
            return Err(FedError::config("comparison", "missing [comparison] table; use `fedlab run` for single runs").into())
        }
    };
    if let Some(seed) = opts.seed {
        spec.comparison.seeds = vec![seed];
    }
    let curves = out_dir.join("curves");
    std::fs::create_dir_all(&curves).with_context(|| format!("creating {}", curves.display()))?;
    let started = chrono::Utc::now();
    let total = spec.comparison.total_rounds;

    let mut cells: Vec<Cell> = Vec::new();
    let mut failure: Option<FedError> = None;
    for &seed in &spec.comparison.seeds {
        let first = spec.experiment(spec.algorithms[0].algorithm, seed);
        // The task depends on the seed and shared sections only.
        let task = match FederatedTask::build(&first) {
            Ok(task) => task,
            Err(e) => {
                log::error!("seed {seed}: {e}");
                for entry in &spec.algorithms {
                    let mut row = ComparisonRow::empty(entry.label(), seed);
                    row.status = format!("error: {e}");
                    cells.push(Cell { row, error: None, is_baseline: false });
                }
                failure.get_or_insert(e);
                continue;
            }
        };
        let seed_start = cells.len();
        for entry in &spec.algorithms {
            let cfg = spec.experiment(entry.algorithm, seed);
            cells.push(run_cell(&spec, &cfg, &task, &entry.label(), opts.threads, &curves)?);
        }
        let seed_cells = &mut cells[seed_start..];
        let baseline = seed_cells
            .iter()
            .find(|c| c.is_baseline && c.row.status == "ok")
            .map(|c| c.row.rounds_to_target);
        if let Some(base) = baseline {
            for c in seed_cells.iter_mut().filter(|c| c.row.status == "ok") {
                c.row.speedup_vs_fedavg = Some(orchestrator::speedup(base, c.row.rounds_to_target, total).value);
            }
        }
    }

    let rows: Vec<ComparisonRow> = cells.iter().map(|c| c.row.clone()).collect();
    output::write_comparison(&out_dir.join("comparison.csv"), &rows)?;
    let manifest = RunManifest::new(
        &canonical(&spec),
        spec.comparison.seeds[0],
        started,
        &["comparison.csv", "curves/", "manifest.json"],
    );
    output::write_json(&out_dir.join("manifest.json"), &manifest)?;

    match failure.or_else(|| cells.into_iter().find_map(|c| c.error)) {
        Some(e) => Err(anyhow::Error::from(e).context("one or more comparison runs failed")),
        None => Ok(()),
    }
}
