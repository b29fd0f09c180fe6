//! TOML experiment and comparison files.

use std::path::Path;

use fedlab_core::{
    Algorithm, ExperimentConfig, ExperimentSection, FedError, GateConfig, LocalRunConfig, PartitionConfig,
    SamplerConfig, TaskConfig,
};
use serde::{Deserialize, Serialize};

/// Either a single run or a sweep; a file with a `[comparison]` table is a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedConfig {
    Experiment(ExperimentConfig),
    Comparison(ComparisonSpec),
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSection {
    pub total_rounds: u64,
    #[serde(default = "one")]
    pub eval_every: u64,
    #[serde(default)]
    pub descent_resamples: usize,
    pub target_accuracy: f64,
    pub seeds: Vec<u64>,
}

/// One sweep entry. `label` names the row; it defaults to the algorithm name,
/// so ablation variants of one algorithm need distinct labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub algorithm: Algorithm,
}

impl AlgorithmEntry {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.algorithm.label().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub comparison: ComparisonSection,
    pub task: TaskConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub run: LocalRunConfig,
    pub algorithms: Vec<AlgorithmEntry>,
}

impl ComparisonSpec {
    /// The single-run config for one sweep cell.
    pub fn experiment(&self, algorithm: Algorithm, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            experiment: ExperimentSection {
                seed,
                total_rounds: self.comparison.total_rounds,
                eval_every: self.comparison.eval_every,
                descent_resamples: self.comparison.descent_resamples,
                target_accuracy: Some(self.comparison.target_accuracy),
            },
            task: self.task.clone(),
            partition: self.partition,
            sampler: self.sampler,
            gate: self.gate,
            algorithm,
            run: self.run,
        }
    }

    pub fn validate(&self) -> fedlab_core::Result<()> {
        let c = &self.comparison;
        if self.algorithms.is_empty() {
            return Err(FedError::config("algorithms", "list at least one algorithm"));
        }
        if c.seeds.is_empty() {
            return Err(FedError::config("comparison.seeds", "list at least one seed"));
        }
        if !(c.target_accuracy > 0.0 && c.target_accuracy < 1.0) {
            return Err(FedError::config("comparison.target_accuracy", "must lie in (0, 1)"));
        }
        let mut labels: Vec<String> = self.algorithms.iter().map(AlgorithmEntry::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(FedError::config("algorithms.label", format!("duplicate label `{}`", w[0])));
        }
        // Every cell shares these sections, so checking one cell per
        // algorithm covers the whole sweep.
        for entry in &self.algorithms {
            self.experiment(entry.algorithm, c.seeds[0]).validate()?;
        }
        Ok(())
    }
}

pub fn parse_str(text: &str) -> fedlab_core::Result<ParsedConfig> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| FedError::config("config", e.message()))?;
    if value.contains_key("comparison") {
        let spec: ComparisonSpec = toml::from_str(text).map_err(toml_error)?;
        spec.validate()?;
        Ok(ParsedConfig::Comparison(spec))
    } else {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(ParsedConfig::Experiment(cfg))
    }
}

fn toml_error(e: toml::de::Error) -> FedError {
    // serde names the offending key in its message ("unknown field `x`",
    // "missing field `y`"); the span locates it in the file.
    let key = e
        .message()
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string());
    FedError::config(key, e.message().trim())
}

pub fn parse_config(path: &Path) -> fedlab_core::Result<ParsedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FedError::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    parse_str(&text)
}

pub fn serialize_experiment(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("experiment configs are always representable in TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedlab_core::{ExpectationHorizon, FedSsgParams, GateMode};

    const MINIMAL: &str = r#"
[experiment]
seed = 7
total_rounds = 10

[task]
kind = "synthetic_quadratic"

[sampler]
n_clients = 5
cohort_size = 5

[algorithm]
name = "fedssg"
"#;

    fn experiment(text: &str) -> ExperimentConfig {
        match parse_str(text).unwrap() {
            ParsedConfig::Experiment(cfg) => cfg,
            other => panic!("expected experiment, got {other:?}"),
        }
    }

    fn config_key(text: &str) -> String {
        match parse_str(text).unwrap_err() {
            FedError::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_gets_published_defaults() {
        let cfg = experiment(MINIMAL);
        assert_eq!(cfg.gate.mode, GateMode::Identity);
        assert_eq!(cfg.gate.epsilon, 1e-6);
        assert_eq!(cfg.gate.beta, 0.0);
        assert_eq!(cfg.gate.effective_horizon(), ExpectationHorizon::CurrentRound);
        assert_eq!(cfg.algorithm, Algorithm::FedSsg(FedSsgParams::default()));
        assert_eq!(cfg.run, LocalRunConfig::default());
        assert_eq!(cfg.experiment.eval_every, 1);
    }

    #[test]
    fn oversized_cohort_names_cohort_size() {
        let text = MINIMAL.replace("cohort_size = 5", "cohort_size = 6");
        assert_eq!(config_key(&text), "cohort_size");
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        assert_eq!(config_key(&MINIMAL.replace("n_clients", "n_clinets")), "n_clinets");
        assert_eq!(config_key(&MINIMAL.replace("seed = 7\n", "")), "seed");
        let extra = MINIMAL.replace("[algorithm]\nname = \"fedssg\"", "[algorithm]\nname = \"fedssg\"\nlearning = 1");
        assert_eq!(config_key(&extra), "learning");
        let bad_task = MINIMAL.replace("kind = \"synthetic_quadratic\"", "kind = \"synthetic_quadratic\"\nfeatures = 3");
        assert_eq!(config_key(&bad_task), "features");
    }

    #[test]
    fn invalid_values_name_their_key() {
        assert_eq!(config_key(&MINIMAL.replace("total_rounds = 10", "total_rounds = 0")), "total_rounds");
        let gate = format!("{MINIMAL}\n[gate]\nalpha = 2.0\nalpha_max = 1.0\n");
        assert_eq!(config_key(&gate), "gate.alpha");
    }

    #[test]
    fn experiment_round_trips_through_toml() {
        let mut cfg = experiment(MINIMAL);
        cfg.task = TaskConfig::SyntheticLogistic {
            features: 3,
            classes: 4,
            train_samples: 100,
            test_samples: 10,
            separation: 0.5,
            hidden: vec![8],
        };
        cfg.partition = PartitionConfig::Dirichlet { concentration: 0.3 };
        cfg.gate.mode = GateMode::Algorithm1;
        cfg.gate.horizon = Some(ExpectationHorizon::TotalRounds);
        cfg.experiment.target_accuracy = Some(0.9);
        let text = serialize_experiment(&cfg);
        assert_eq!(experiment(&text), cfg);
    }

    #[test]
    fn comparison_files_are_recognized() {
        let text = r#"
[comparison]
total_rounds = 5
target_accuracy = 0.8
seeds = [1, 2]

[task]
kind = "synthetic_logistic"

[sampler]
n_clients = 10
cohort_size = 2

[[algorithms]]
name = "fedavg"

[[algorithms]]
name = "fedssg"
label = "fedssg-no-pen"
penalization = false
"#;
        let ParsedConfig::Comparison(spec) = parse_str(text).unwrap() else {
            panic!("expected a comparison");
        };
        assert_eq!(spec.algorithms[1].label(), "fedssg-no-pen");
        assert!(matches!(
            spec.algorithms[1].algorithm,
            Algorithm::FedSsg(FedSsgParams { penalization: false, .. })
        ));
        let typo = text.replace("penalization = false", "penalisation = false");
        assert_eq!(config_key(&typo), "penalisation");
        let dup = text.replace("label = \"fedssg-no-pen\"", "label = \"fedavg\"");
        assert_eq!(config_key(&dup), "algorithms.label");
        assert_eq!(config_key(&text.replace("seeds = [1, 2]", "seeds = []")), "comparison.seeds");
    }
}
