//! Per-round client selection and the participation gate `φ(r_i^t)` with
//! `r_i^t = c_i^{1:t} / (μ_i^t + ε)`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numkit::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    #[default]
    UniformWithoutReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_clients: usize,
    pub cohort_size: usize,
    #[serde(default)]
    pub scheme: SamplingScheme,
}

impl SamplerConfig {
    pub fn new(n_clients: usize, cohort_size: usize) -> Result<Self> {
        let cfg = SamplerConfig {
            n_clients,
            cohort_size,
            scheme: SamplingScheme::UniformWithoutReplacement,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(FedError::config("n_clients", "must be at least 1"));
        }
        if self.cohort_size == 0 || self.cohort_size > self.n_clients {
            return Err(FedError::config(
                "cohort_size",
                format!("must lie in 1..={} (n_clients)", self.n_clients),
            ));
        }
        Ok(())
    }

    /// Inclusion probability `p_i = m/N`.
    pub fn inclusion_probability(&self) -> f64 {
        self.cohort_size as f64 / self.n_clients as f64
    }
}

/// `m` distinct client ids drawn uniformly, returned in ascending order.
pub fn sample_cohort(cfg: &SamplerConfig, rng: &mut RngStream) -> Vec<usize> {
    match cfg.scheme {
        SamplingScheme::UniformWithoutReplacement => {
            if cfg.cohort_size == cfg.n_clients {
                return (0..cfg.n_clients).collect();
            }
            let mut ids = index::sample(rng, cfg.n_clients, cfg.cohort_size).into_vec();
            ids.sort_unstable();
            ids
        }
    }
}

/// Which round count the expected participation `μ_i^t` refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationHorizon {
    /// `μ_i^t = p_i·t`.
    #[default]
    CurrentRound,
    /// `μ_i = p_i·T`, the denominator of the memo-correction `ξ_i`.
    TotalRounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationStats {
    pub counts: Vec<u64>,
    pub round: u64,
    pub total_rounds: u64,
    pub epsilon: f64,
    pub horizon: ExpectationHorizon,
}

impl ParticipationStats {
    pub fn new(n_clients: usize, total_rounds: u64, epsilon: f64, horizon: ExpectationHorizon) -> Self {
        ParticipationStats {
            counts: vec![0; n_clients],
            round: 0,
            total_rounds,
            epsilon,
            horizon,
        }
    }

    pub fn expected_count(&self, cfg: &SamplerConfig) -> f64 {
        let rounds = match self.horizon {
            ExpectationHorizon::CurrentRound => self.round,
            ExpectationHorizon::TotalRounds => self.total_rounds,
        };
        cfg.inclusion_probability() * rounds as f64
    }

    pub fn ratio(&self, cfg: &SamplerConfig, client: usize) -> f64 {
        self.counts[client] as f64 / (self.expected_count(cfg) + self.epsilon)
    }

    pub fn ratios(&self, cfg: &SamplerConfig) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.ratio(cfg, i)).collect()
    }

    /// One round elapses; every cohort member's count grows by one.
    pub fn record_participation(&mut self, cohort: &[usize]) {
        for &i in cohort {
            self.counts[i] += 1;
        }
        self.round += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Identity,
    IdentityClipped,
    Logistic,
    /// `ξ_i = c_i / (T·m/N)`: identity on the total-rounds ratio.
    Algorithm1,
    /// Ignores `r`; returns `constant_value`. Used for reduction checks.
    Constant,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_alpha_max() -> f64 {
    1.0
}
fn default_center() -> f64 {
    1.0
}
fn default_scale() -> f64 {
    0.25
}
fn default_epsilon() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    #[serde(default)]
    pub mode: GateMode,
    /// Alignment strength. Scales `P_i` in the identity modes and caps the
    /// gate in logistic mode.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_center")]
    pub logistic_center: f64,
    #[serde(default = "default_scale")]
    pub logistic_scale: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Defaults to `current_round`; `algorithm1` mode requires `total_rounds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<ExpectationHorizon>,
    #[serde(default)]
    pub constant_value: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            mode: GateMode::Identity,
            alpha: default_alpha(),
            alpha_max: default_alpha_max(),
            beta: 0.0,
            logistic_center: default_center(),
            logistic_scale: default_scale(),
            epsilon: default_epsilon(),
            horizon: None,
            constant_value: 0.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(FedError::config("gate.alpha", "must be positive"));
        }
        if self.alpha > self.alpha_max {
            return Err(FedError::config(
                "gate.alpha",
                format!("{} exceeds alpha_max {}", self.alpha, self.alpha_max),
            ));
        }
        if !finite_nonneg(self.beta) {
            return Err(FedError::config("gate.beta", "must be non-negative"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(FedError::config("gate.epsilon", "must be positive"));
        }
        if !(self.logistic_scale > 0.0) || !self.logistic_center.is_finite() {
            return Err(FedError::config("gate.logistic_scale", "must be positive with a finite center"));
        }
        if !finite_nonneg(self.constant_value) {
            return Err(FedError::config("gate.constant_value", "must be non-negative"));
        }
        if self.mode == GateMode::Algorithm1 && self.horizon == Some(ExpectationHorizon::CurrentRound) {
            return Err(FedError::config("gate.horizon", "algorithm1 mode uses the total_rounds horizon"));
        }
        Ok(())
    }

    pub fn effective_horizon(&self) -> ExpectationHorizon {
        match self.mode {
            GateMode::Algorithm1 => ExpectationHorizon::TotalRounds,
            _ => self.horizon.unwrap_or_default(),
        }
    }

    /// Weight on `P_i` in the local objective. Logistic mode already folds
    /// `α` into the gate, so the objective weight is then 1.
    pub fn objective_alpha(&self) -> f64 {
        match self.mode {
            GateMode::Logistic => 1.0,
            _ => self.alpha,
        }
    }
}

/// `φ(r)`; nondecreasing in `r` for every mode.
pub fn gate(cfg: &GateConfig, r: f64) -> f64 {
    match cfg.mode {
        GateMode::Identity | GateMode::Algorithm1 => r,
        GateMode::IdentityClipped => r.clamp(0.0, 1.0),
        GateMode::Logistic => {
            cfg.alpha / (1.0 + (-(r - cfg.logistic_center) / cfg.logistic_scale).exp())
        }
        GateMode::Constant => cfg.constant_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::derive_stream;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn full_and_singleton_cohorts() {
        let full = SamplerConfig::new(7, 7).unwrap();
        assert_eq!(sample_cohort(&full, &mut derive_stream(1, "cohort", 1)), (0..7).collect::<Vec<_>>());
        let one = SamplerConfig::new(1, 1).unwrap();
        assert_eq!(sample_cohort(&one, &mut derive_stream(1, "cohort", 1)), vec![0]);
    }

    #[test]
    fn cohort_is_distinct_and_replayable() {
        let cfg = SamplerConfig::new(100, 10).unwrap();
        let a = sample_cohort(&cfg, &mut derive_stream(4, "cohort", 9));
        let b = sample_cohort(&cfg, &mut derive_stream(4, "cohort", 9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_cohort_names_key() {
        let err = SamplerConfig::new(5, 6).unwrap_err();
        assert!(matches!(err, FedError::Config { ref key, .. } if key == "cohort_size"));
    }

    #[test]
    fn expected_counts() {
        let cfg = SamplerConfig::new(100, 10).unwrap();
        let mut s = ParticipationStats::new(100, 200, 1e-6, ExpectationHorizon::CurrentRound);
        assert_eq!(s.expected_count(&cfg), 0.0);
        s.round = 50;
        assert!(close(s.expected_count(&cfg), 5.0, 1e-12));
        let cfg15 = SamplerConfig::new(100, 15).unwrap();
        let s = ParticipationStats::new(100, 100, 1e-6, ExpectationHorizon::TotalRounds);
        assert!(close(s.expected_count(&cfg15), 15.0, 1e-12));
    }

    #[test]
    fn ratio_examples() {
        // μ = 3: N=10, m=1, t=30.
        let cfg = SamplerConfig::new(10, 1).unwrap();
        let mut s = ParticipationStats::new(10, 100, 1e-6, ExpectationHorizon::CurrentRound);
        s.round = 30;
        s.counts[0] = 3;
        assert!(close(s.ratio(&cfg, 0), 3.0 / 3.000001, 1e-15));
        assert_eq!(s.ratio(&cfg, 1), 0.0);
        s.round = 100;
        s.counts[2] = 15;
        assert!(close(s.ratio(&cfg, 2), 1.5, 1e-6));
    }

    #[test]
    fn gate_examples() {
        let id = GateConfig::default();
        assert_eq!(gate(&id, 0.5), 0.5);
        let clip = GateConfig { mode: GateMode::IdentityClipped, ..id };
        assert_eq!(gate(&clip, 1.7), 1.0);
        // ξ = 5 / (100·15/100) = 1/3.
        let cfg = SamplerConfig::new(100, 15).unwrap();
        let alg = GateConfig { mode: GateMode::Algorithm1, ..id };
        let mut s = ParticipationStats::new(100, 100, 1e-6, alg.effective_horizon());
        s.counts[3] = 5;
        assert!(close(gate(&alg, s.ratio(&cfg, 3)), 1.0 / 3.0, 1e-7));
        let logi = GateConfig { mode: GateMode::Logistic, alpha: 0.3, ..id };
        for r in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let g = gate(&logi, r);
            assert!(g > 0.0 && g < 0.3);
        }
        let constant = GateConfig { mode: GateMode::Constant, constant_value: 0.0, ..id };
        assert_eq!(gate(&constant, 3.0), 0.0);
    }

    #[test]
    fn record_participation_examples() {
        let mut s = ParticipationStats::new(3, 10, 1e-6, ExpectationHorizon::CurrentRound);
        s.record_participation(&[]);
        assert_eq!((s.counts.clone(), s.round), (vec![0, 0, 0], 1));
        s.record_participation(&[0, 2]);
        assert_eq!(s.counts.iter().sum::<u64>(), 2);
        let cfg = SamplerConfig::new(3, 3).unwrap();
        let mut full = ParticipationStats::new(3, 10, 1e-6, ExpectationHorizon::CurrentRound);
        for _ in 0..7 {
            full.record_participation(&[0, 1, 2]);
        }
        assert!(close(full.ratio(&cfg, 1), 1.0, 1e-6));
    }

    #[test]
    fn gate_config_validation() {
        assert!(GateConfig { alpha: 2.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { beta: -1.0, ..GateConfig::default() }.validate().is_err());
        let bad = GateConfig {
            mode: GateMode::Algorithm1,
            horizon: Some(ExpectationHorizon::CurrentRound),
            ..GateConfig::default()
        };
        assert!(matches!(bad.validate(), Err(FedError::Config { ref key, .. }) if key == "gate.horizon"));
        assert!(GateConfig::default().validate().is_ok());
    }
}
