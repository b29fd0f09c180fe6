//! The federated round loop and the analysis quantities computed from its
//! records: rounds-to-target, speedup, B-dissimilarity and the descent check.

use std::time::Instant;

use rayon::prelude::*;

use crate::algorithms::{self, ClientState, LocalContext, LocalOutcome, ServerState};
use crate::config::ExperimentConfig;
use crate::error::{FedError, Result};
use crate::numkit::{derive_stream, ParamVector};
use crate::sampling::{self, ParticipationStats};
use crate::task::FederatedTask;

/// Squared global-gradient norm below which dissimilarity is undefined.
pub const DEGENERATE_GRAD_NORM_SQ: f64 = 1e-20;

/// Accuracy statistics use the final this-many evaluation records.
pub const FINAL_WINDOW: usize = 50;

const DESCENT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 0 is the initial model.
    pub round: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
    pub participated: Vec<usize>,
    pub elapsed_ms: f64,
    /// Empirical descent constant `p̂_t` at the state this round started from.
    pub p_hat: Option<f64>,
}

impl RoundRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &RoundRecord) -> bool {
        RoundRecord { elapsed_ms: 0.0, ..self.clone() } == RoundRecord { elapsed_ms: 0.0, ..other.clone() }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub initial: RoundRecord,
    pub records: Vec<RoundRecord>,
    pub final_omega: ParamVector,
    /// Set when the run stopped early; `records` hold the rounds before it.
    pub divergence: Option<FedError>,
}

impl RunOutput {
    /// Initial record followed by the per-round records.
    pub fn trajectory(&self) -> Vec<RoundRecord> {
        std::iter::once(self.initial.clone()).chain(self.records.iter().cloned()).collect()
    }
}

/// Whole federation state between rounds.
#[derive(Clone)]
struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    task: &'a FederatedTask,
    server: ServerState,
    clients: Vec<ClientState>,
    stats: ParticipationStats,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a ExperimentConfig, task: &'a FederatedTask) -> Self {
        let algo = &cfg.algorithm;
        let omega = task.init_params(cfg.experiment.seed);
        let d = omega.len();
        let n = task.n_clients();
        Simulation {
            cfg,
            task,
            server: ServerState::new(algo, omega, n),
            clients: (0..n).map(|_| ClientState::new(algo, d)).collect(),
            stats: ParticipationStats::new(
                n,
                cfg.experiment.total_rounds,
                cfg.gate.epsilon,
                cfg.gate.effective_horizon(),
            ),
        }
    }

    /// One communication round with the given cohort. Participation is
    /// recorded first so the gate sees `c_i^{1:t}` including round `t`.
    fn step(&mut self, round: u64, cohort: &[usize], pool: &rayon::ThreadPool) -> Result<()> {
        let cfg = self.cfg;
        self.stats.record_participation(cohort);
        let contexts: Vec<LocalContext> = cohort
            .iter()
            .map(|&i| LocalContext {
                round,
                client: i,
                gate: sampling::gate(&cfg.gate, self.stats.ratio(&cfg.sampler, i)),
                beta: cfg.gate.beta,
                alpha: cfg.gate.objective_alpha(),
            })
            .collect();
        let seed = cfg.experiment.seed;
        let (task, server, clients) = (self.task, &self.server, &self.clients);
        let results: Vec<Result<LocalOutcome>> = pool.install(|| {
            contexts
                .par_iter()
                .map(|ctx| {
                    let mut rng = derive_stream(seed, "local", (round << 32) | ctx.client as u64);
                    algorithms::local_update(
                        &cfg.algorithm,
                        task.client_spec(ctx.client),
                        &clients[ctx.client],
                        server,
                        task.client_data(ctx.client),
                        &cfg.run,
                        ctx,
                        &mut rng,
                    )
                })
                .collect()
        });
        let outcomes: Vec<LocalOutcome> = results.into_iter().collect::<Result<_>>()?;
        algorithms::aggregate(&cfg.algorithm, &mut self.server, &outcomes)?;
        for o in outcomes {
            self.clients[o.client] = o.state;
        }
        Ok(())
    }
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FedError::config("threads", e.to_string()))
}

fn evaluate(task: &FederatedTask, omega: &ParamVector, round: u64) -> Result<RoundRecord> {
    let (train_loss, grad) = task.global_loss_and_grad(omega)?;
    Ok(RoundRecord {
        round,
        train_loss,
        test_accuracy: task.test_accuracy(omega)?,
        grad_norm_sq: grad.norm_sq(),
        participated: Vec::new(),
        elapsed_ms: 0.0,
        p_hat: None,
    })
}

/// `p̂_t = 2(f(ω^t) − E f(ω^{t+1})) / ‖∇f(ω^t)‖²`, the expectation taken over
/// freshly resampled cohorts from the current state.
fn empirical_descent(sim: &Simulation<'_>, round: u64, pool: &rayon::ThreadPool) -> Option<f64> {
    let resamples = sim.cfg.experiment.descent_resamples as u64;
    let (f_now, g_now) = sim.task.global_loss_and_grad(&sim.server.omega).ok()?;
    let denom = g_now.norm_sq();
    if resamples == 0 || denom <= 0.0 {
        return None;
    }
    let mut f_next = 0.0;
    for k in 0..resamples {
        let mut probe = sim.clone();
        let cohort = sampling::sample_cohort(
            &sim.cfg.sampler,
            &mut derive_stream(sim.cfg.experiment.seed, "cohort_resample", round * resamples + k),
        );
        probe.step(round, &cohort, pool).ok()?;
        f_next += probe.task.global_loss_and_grad(&probe.server.omega).ok()?.0;
    }
    Some(2.0 * (f_now - f_next / resamples as f64) / denom)
}

/// Executes all rounds of `cfg`. Configuration and data errors are returned;
/// a divergence ends the run early and is reported in the output.
pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let task = FederatedTask::build(cfg)?;
    run_on_task(cfg, &task, threads)
}

/// As [`run`], on an already materialized task.
pub fn run_on_task(cfg: &ExperimentConfig, task: &FederatedTask, threads: usize) -> Result<RunOutput> {
    cfg.validate()?;
    if task.n_clients() != cfg.sampler.n_clients {
        return Err(FedError::config("n_clients", "task and sampler disagree on the client count"));
    }
    let pool = build_pool(threads)?;
    let mut sim = Simulation::new(cfg, task);
    let initial = evaluate(task, &sim.server.omega, 0)?;
    let total = cfg.experiment.total_rounds;
    let with_descent = task.is_exact() && cfg.experiment.descent_resamples > 0;
    let mut records = Vec::new();
    let mut divergence = None;

    for t in 1..=total {
        let start = Instant::now();
        let cohort = sampling::sample_cohort(&cfg.sampler, &mut derive_stream(cfg.experiment.seed, "cohort", t));
        let p_hat = if with_descent { empirical_descent(&sim, t, &pool) } else { None };
        if let Err(e) = sim.step(t, &cohort, &pool) {
            match e {
                FedError::Divergence { .. } => {
                    log::warn!("round {t}: {e}");
                    divergence = Some(e);
                    break;
                }
                other => return Err(other),
            }
        }
        if t % cfg.experiment.eval_every == 0 || t == total {
            let mut rec = evaluate(task, &sim.server.omega, t)?;
            rec.participated = cohort;
            rec.p_hat = p_hat;
            rec.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            log::debug!(
                "round {t}: loss {:.6} acc {:.4} |grad|^2 {:.3e}",
                rec.train_loss,
                rec.test_accuracy,
                rec.grad_norm_sq
            );
            records.push(rec);
        }
    }
    Ok(RunOutput {
        initial,
        records,
        final_omega: sim.server.omega,
        divergence,
    })
}

/// First evaluated round whose test accuracy reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<u64> {
    records.iter().find(|r| r.test_accuracy >= target).map(|r| r.round)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speedup {
    pub value: f64,
    /// A missing round count was replaced by `T`.
    pub flagged: bool,
}

/// `baseline / method` rounds, substituting `T` for a target never reached.
pub fn speedup(baseline_rounds: Option<u64>, method_rounds: Option<u64>, total_rounds: u64) -> Speedup {
    let b = baseline_rounds.unwrap_or(total_rounds) as f64;
    let m = method_rounds.unwrap_or(total_rounds).max(1) as f64;
    Speedup {
        value: b / m,
        flagged: baseline_rounds.is_none() || method_rounds.is_none(),
    }
}

/// Mean and population standard deviation of test accuracy over the final
/// `FINAL_WINDOW` records (fewer if the run is shorter).
pub fn final_accuracy_stats(records: &[RoundRecord]) -> (f64, f64) {
    let tail = &records[records.len().saturating_sub(FINAL_WINDOW)..];
    if tail.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = tail.len() as f64;
    let mean = tail.iter().map(|r| r.test_accuracy).sum::<f64>() / n;
    let var = tail.iter().map(|r| (r.test_accuracy - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DissimilarityEstimate {
    pub b_value: f64,
    pub at_round: u64,
    /// `‖∇f(ω)‖²` of the client-averaged gradient.
    pub grad_norm_sq: f64,
    /// Mean squared deviation of client gradients from their average.
    pub grad_variance: f64,
}

/// Plug-in `B(ω) = sqrt(mean_i ‖∇f_i(ω)‖² / ‖mean_i ∇f_i(ω)‖²)` over `sample`.
pub fn estimate_dissimilarity(
    task: &FederatedTask,
    omega: &ParamVector,
    sample: &[usize],
    at_round: u64,
) -> Result<DissimilarityEstimate> {
    if sample.is_empty() {
        return Err(FedError::config("sample", "need at least one client"));
    }
    let grads: Vec<ParamVector> = sample
        .iter()
        .map(|&i| task.client_loss_and_grad(i, omega).map(|(_, g)| g))
        .collect::<Result<_>>()?;
    let mean = ParamVector::mean_of(grads.iter())?;
    let norm_sq = mean.norm_sq();
    let n = grads.len() as f64;
    let second_moment = grads.iter().map(ParamVector::norm_sq).sum::<f64>() / n;
    if norm_sq < DEGENERATE_GRAD_NORM_SQ * second_moment.max(1.0) {
        return Err(FedError::DegeneratePoint { norm_sq });
    }
    let variance = grads
        .iter()
        .map(|g| g.sub(&mean).map(|d| d.norm_sq()))
        .sum::<Result<f64>>()?
        / n;
    Ok(DissimilarityEstimate {
        b_value: (second_moment / norm_sq).sqrt(),
        at_round,
        grad_norm_sq: norm_sq,
        grad_variance: variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    /// Fraction of consecutive full windows whose moving average of `f` did
    /// not increase.
    pub decrease_fraction: f64,
    /// Least-squares slope of `log min_{s≤t} ‖∇f(ω^s)‖²` against `log t`.
    pub loglog_slope: f64,
    pub p_hat: Vec<Option<f64>>,
    /// `Σ_t ‖∇f(ω^t)‖² / (f(ω^0) − f_min)` when the minimum is known.
    pub grad_sum_ratio: Option<f64>,
}

/// Descent diagnostics over a trajectory that starts at the
/// initial model. `exact` states whether the losses are the true objective.
pub fn descent_check(trajectory: &[RoundRecord], exact: bool, f_min: Option<f64>) -> Result<DescentReport> {
    if !exact {
        return Err(FedError::Unsupported("descent check needs an exactly computable objective".into()));
    }
    if trajectory.len() < 2 {
        return Err(FedError::config("total_rounds", "descent check needs at least one round"));
    }
    let f: Vec<f64> = trajectory.iter().map(|r| r.train_loss).collect();
    let w = DESCENT_WINDOW.min(f.len());
    let ma: Vec<f64> = f.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect();
    let pairs = ma.len().saturating_sub(1);
    let held = ma
        .windows(2)
        .filter(|p| p[1] <= p[0] + 1e-12 * p[0].abs().max(f64::MIN_POSITIVE))
        .count();
    let decrease_fraction = if pairs == 0 { 1.0 } else { held as f64 / pairs as f64 };

    let mut best = f64::INFINITY;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for r in trajectory.iter().filter(|r| r.round >= 1) {
        best = best.min(r.grad_norm_sq);
        xs.push((r.round as f64).ln());
        ys.push(best.max(f64::MIN_POSITIVE).ln());
    }
    let loglog_slope = least_squares_slope(&xs, &ys);

    let grad_sum_ratio = f_min.map(|fm| {
        let total: f64 = trajectory[..trajectory.len() - 1].iter().map(|r| r.grad_norm_sq).sum();
        total / (f[0] - fm)
    });
    Ok(DescentReport {
        decrease_fraction,
        loglog_slope,
        p_hat: trajectory.iter().skip(1).map(|r| r.p_hat).collect(),
        grad_sum_ratio,
    })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Global objective value at the known minimizer of a quadratic task.
pub fn minimum_value(task: &FederatedTask) -> Option<f64> {
    let star = task.minimizer.as_ref()?;
    task.global_loss_and_grad(star).ok().map(|(f, _)| f)
}
