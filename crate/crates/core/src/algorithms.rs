//! FedAvg, FedProx, SCAFFOLD, FedDyn, FedDC and FedSSG behind one
//! local-update / aggregate contract.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{FedError, Result};
use crate::models::{self, AlignmentForm, Batch, CorrectionTerms, ObjectiveSpec};
use crate::numkit::{ParamVector, RngStream};

/// Parameters above this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

fn yes() -> bool {
    true
}

/// What the previous-round client update is compared against in `G_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionReference {
    /// `E_{i∈S^{t−1}} Δθ_i^{t−1}`, the cohort-mean local update.
    #[default]
    CohortMeanUpdate,
    /// `ω^{t−1} − ω^{t−2}`, which also carries the aggregated drift memory.
    GlobalUpdate,
    /// Mean of the stored correction states over all `N` clients (zero for
    /// clients not yet sampled), as SCAFFOLD's global control variate.
    PopulationMean,
}

/// What a FedSSG client stores as `Δθ_i^{t−1}` for its next `G_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionState {
    /// The raw local update `θ_i^t − ω^{t−1}`.
    #[default]
    Raw,
    /// The local update with the `G_i` term's own displacement removed, so
    /// the correction does not feed back into itself (SCAFFOLD option II).
    NetOfCorrection,
}

/// How drift memories enter the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryAggregation {
    /// `ω = mean_{i∈S}(θ_i + h_i)`.
    #[default]
    Cohort,
    /// `ω = mean_{i∈S} θ_i + (1/N)Σ_{all i} h_i`, as in FedDC.
    Population,
}

/// How the FedSSG drift memory is updated after local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// `h += (φ + β)Δθ`.
    #[default]
    Gated,
    /// `h += (1 + β)Δθ`: the memo-correction factor is switched off.
    Unit,
    /// `h` stays zero.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSsgParams {
    #[serde(default)]
    pub alignment: AlignmentForm,
    #[serde(default = "yes")]
    pub penalization: bool,
    #[serde(default = "yes")]
    pub grad_correction: bool,
    #[serde(default)]
    pub memory: MemoryMode,
    #[serde(default)]
    pub correction_reference: CorrectionReference,
    #[serde(default)]
    pub correction_state: CorrectionState,
    #[serde(default)]
    pub memory_aggregation: MemoryAggregation,
    /// Divide the aggregate by `N` instead of the cohort size.
    #[serde(default)]
    pub population_normalized: bool,
}

impl Default for FedSsgParams {
    fn default() -> Self {
        FedSsgParams {
            alignment: AlignmentForm::InnerProduct,
            penalization: true,
            grad_correction: true,
            memory: MemoryMode::Gated,
            correction_reference: CorrectionReference::CohortMeanUpdate,
            correction_state: CorrectionState::Raw,
            memory_aggregation: MemoryAggregation::Cohort,
            population_normalized: false,
        }
    }
}

fn default_prox_mu() -> f64 {
    1e-4
}
fn default_feddyn_alpha() -> f64 {
    0.01
}
fn default_feddc_alpha() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx {
        #[serde(default = "default_prox_mu")]
        mu: f64,
    },
    Scaffold,
    #[serde(rename = "feddyn")]
    FedDyn {
        #[serde(default = "default_feddyn_alpha")]
        alpha: f64,
    },
    #[serde(rename = "feddc")]
    FedDc {
        #[serde(default = "default_feddc_alpha")]
        alpha: f64,
    },
    #[serde(rename = "fedssg")]
    FedSsg(FedSsgParams),
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx { .. } => "fedprox",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedDyn { .. } => "feddyn",
            Algorithm::FedDc { .. } => "feddc",
            Algorithm::FedSsg(_) => "fedssg",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FedError::config(key, "must be positive"))
            }
        };
        match *self {
            Algorithm::FedProx { mu } => positive("algorithm.mu", mu),
            Algorithm::FedDyn { alpha } | Algorithm::FedDc { alpha } => positive("algorithm.alpha", alpha),
            _ => Ok(()),
        }
    }
}

/// FedSSG components that can be ablated; the empirical loss always stays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Penalization,
    GradCorrection,
    MemoXi,
}

/// FedSSG with the listed components disabled. Removing all three also
/// switches the drift memory off, which leaves plain FedAvg.
pub fn ablation_mask(disabled: &[Component]) -> Algorithm {
    let off = |c| disabled.contains(&c);
    let mut p = FedSsgParams::default();
    p.penalization = !off(Component::Penalization);
    p.grad_correction = !off(Component::GradCorrection);
    if off(Component::MemoXi) {
        p.memory = MemoryMode::Unit;
    }
    if !p.penalization && !p.grad_correction && off(Component::MemoXi) {
        p.memory = MemoryMode::Off;
    }
    Algorithm::FedSsg(p)
}

fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    50
}
fn default_lr() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    0.998
}
fn default_wd() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalRunConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay_per_round: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

impl Default for LocalRunConfig {
    fn default() -> Self {
        LocalRunConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            lr_decay_per_round: default_decay(),
            weight_decay: default_wd(),
        }
    }
}

impl LocalRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FedError::config("run.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FedError::config("run.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(FedError::config("run.lr", "must be positive"));
        }
        if !(self.lr_decay_per_round > 0.0 && self.lr_decay_per_round <= 1.0) {
            return Err(FedError::config("run.lr_decay_per_round", "must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(FedError::config("run.weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// Step size in (1-based) round `t`: `lr·decay^(t−1)`.
    pub fn lr_at(&self, round: u64) -> f64 {
        self.lr * self.lr_decay_per_round.powi(round.saturating_sub(1) as i32)
    }
}

/// Per-algorithm client state beyond the drift memory.
#[derive(Debug, Clone, PartialEq)]
pub enum AlgoAux {
    None,
    /// SCAFFOLD client control variate `c_i`.
    Scaffold { control: ParamVector },
    /// FedDyn gradient state `g_i`.
    FedDyn { grad_state: ParamVector },
    /// FedDC drift `h_i` and gradient state.
    FedDc { drift: ParamVector, grad_state: ParamVector },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    /// FedSSG drift memory.
    pub h: ParamVector,
    /// Participation count `c_i`.
    pub count: u64,
    pub dtheta_prev: Option<ParamVector>,
    pub aux: AlgoAux,
}

impl ClientState {
    pub fn new(algo: &Algorithm, dim: usize) -> Self {
        let aux = match algo {
            Algorithm::Scaffold => AlgoAux::Scaffold { control: ParamVector::zeros(dim) },
            Algorithm::FedDyn { .. } => AlgoAux::FedDyn { grad_state: ParamVector::zeros(dim) },
            Algorithm::FedDc { .. } => AlgoAux::FedDc {
                drift: ParamVector::zeros(dim),
                grad_state: ParamVector::zeros(dim),
            },
            _ => AlgoAux::None,
        };
        ClientState {
            h: ParamVector::zeros(dim),
            count: 0,
            dtheta_prev: None,
            aux,
        }
    }

    /// Number of stored floats; a fixed multiple of `d`.
    pub fn stored_floats(&self) -> usize {
        let aux = match &self.aux {
            AlgoAux::None => 0,
            AlgoAux::Scaffold { control } => control.len(),
            AlgoAux::FedDyn { grad_state } => grad_state.len(),
            AlgoAux::FedDc { drift, grad_state } => drift.len() + grad_state.len(),
        };
        self.h.len() + self.dtheta_prev.as_ref().map_or(0, ParamVector::len) + aux
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub omega: ParamVector,
    /// Rounds aggregated so far.
    pub round: u64,
    pub domega_prev: ParamVector,
    /// Cohort mean of the previous round's local updates `Δθ_i`.
    pub mean_update_prev: ParamVector,
    pub n_clients: usize,
    pub scaffold_c: Option<ParamVector>,
    pub feddyn_h: Option<ParamVector>,
    /// FedDC global gradient state and sum of all client drifts.
    pub feddc: Option<(ParamVector, ParamVector)>,
    /// FedSSG sums over all clients of stored correction states and of
    /// drift memories.
    pub ssg_sums: Option<(ParamVector, ParamVector)>,
}

impl ServerState {
    pub fn new(algo: &Algorithm, omega: ParamVector, n_clients: usize) -> Self {
        let d = omega.len();
        ServerState {
            round: 0,
            domega_prev: ParamVector::zeros(d),
            mean_update_prev: ParamVector::zeros(d),
            n_clients,
            scaffold_c: matches!(algo, Algorithm::Scaffold).then(|| ParamVector::zeros(d)),
            feddyn_h: matches!(algo, Algorithm::FedDyn { .. }).then(|| ParamVector::zeros(d)),
            feddc: matches!(algo, Algorithm::FedDc { .. })
                .then(|| (ParamVector::zeros(d), ParamVector::zeros(d))),
            ssg_sums: matches!(algo, Algorithm::FedSsg(_))
                .then(|| (ParamVector::zeros(d), ParamVector::zeros(d))),
            omega,
        }
    }
}

/// What a client trains on: a shard of a labeled dataset, or nothing for
/// families (quadratic) whose loss is exact.
#[derive(Debug, Clone, Copy)]
pub enum ClientData<'a> {
    Shard {
        dataset: &'a LabeledDataset,
        indices: &'a [usize],
    },
    Exact,
}

impl ClientData<'_> {
    pub fn len(&self) -> usize {
        match self {
            ClientData::Shard { indices, .. } => indices.len(),
            ClientData::Exact => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Local iterations per epoch.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        match self {
            ClientData::Shard { indices, .. } => indices.len().div_ceil(batch_size),
            ClientData::Exact => 1,
        }
    }

    /// The whole shard as one batch.
    pub fn full_batch(&self) -> Batch {
        match self {
            ClientData::Shard { dataset, indices } => dataset.gather(indices),
            ClientData::Exact => Batch::empty(),
        }
    }
}

/// Scalars a round hands to one client's local update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalContext {
    /// 1-based round being trained.
    pub round: u64,
    pub client: usize,
    /// `φ(r_i^t)` from the sampling module.
    pub gate: f64,
    pub beta: f64,
    /// Weight of the FedSSG alignment term.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub client: usize,
    pub theta: ParamVector,
    pub dtheta: ParamVector,
    pub state: ClientState,
    /// SCAFFOLD `Δc_i`, FedDC gradient-state change, or FedSSG change of
    /// the stored correction state.
    pub control_delta: Option<ParamVector>,
    /// FedSSG change of `h_i`.
    pub memory_delta: Option<ParamVector>,
    pub steps: usize,
}

fn diverged(ctx: &LocalContext, message: String) -> FedError {
    FedError::Divergence {
        round: ctx.round,
        client: Some(ctx.client),
        message,
    }
}

fn guard(theta: &ParamVector, ctx: &LocalContext) -> Result<()> {
    if !theta.is_finite() {
        return Err(diverged(ctx, "non-finite parameters".into()));
    }
    let m = theta.max_abs();
    if m > DIVERGENCE_LIMIT {
        return Err(diverged(ctx, format!("parameter magnitude {m:.3e} exceeds {DIVERGENCE_LIMIT:e}")));
    }
    Ok(())
}

/// Runs `epochs` passes of minibatch SGD from `start`, calling `grad` for the
/// search direction of each step.
fn sgd<F>(
    start: &ParamVector,
    data: ClientData<'_>,
    run: &LocalRunConfig,
    lr: f64,
    ctx: &LocalContext,
    rng: &mut RngStream,
    mut grad: F,
) -> Result<(ParamVector, usize)>
where
    F: FnMut(&ParamVector, &Batch) -> Result<ParamVector>,
{
    let mut theta = start.clone();
    let mut steps = 0;
    let empty = Batch::empty();
    let mut order: Vec<usize> = match data {
        ClientData::Shard { indices, .. } => indices.to_vec(),
        ClientData::Exact => Vec::new(),
    };
    for _ in 0..run.epochs {
        match data {
            ClientData::Exact => {
                let g = grad(&theta, &empty).map_err(|e| diverged(ctx, e.to_string()))?;
                theta.axpy_assign(-lr, &g)?;
                steps += 1;
                guard(&theta, ctx)?;
            }
            ClientData::Shard { dataset, .. } => {
                order.shuffle(rng);
                for chunk in order.chunks(run.batch_size) {
                    let batch = dataset.gather(chunk);
                    let g = grad(&theta, &batch).map_err(|e| diverged(ctx, e.to_string()))?;
                    theta.axpy_assign(-lr, &g)?;
                    steps += 1;
                    guard(&theta, ctx)?;
                }
            }
        }
    }
    Ok((theta, steps))
}

fn plain_grad(spec: &ObjectiveSpec, theta: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    Ok(models::loss_and_grad(spec, theta, batch)?.1)
}

/// Trains one client from `server.omega` on its local objective and updates
/// its state. Clients outside the cohort are never touched.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    algo: &Algorithm,
    spec: &ObjectiveSpec,
    client: &ClientState,
    server: &ServerState,
    data: ClientData<'_>,
    run: &LocalRunConfig,
    ctx: &LocalContext,
    rng: &mut RngStream,
) -> Result<LocalOutcome> {
    let omega = &server.omega;
    let d = omega.len();
    FedError::check_dim(spec.dim(), d)?;
    FedError::check_dim(d, client.h.len())?;
    if data.is_empty() {
        return Err(FedError::Numeric(format!("client {} has no data", ctx.client)));
    }
    let lr = run.lr_at(ctx.round);
    let planned_steps = run.epochs * data.batches_per_epoch(run.batch_size);
    let mut state = client.clone();
    state.count += 1;
    let mut control_delta = None;
    let mut memory_delta = None;

    let (theta, steps) = match algo {
        Algorithm::FedAvg => sgd(omega, data, run, lr, ctx, rng, |th, b| plain_grad(spec, th, b))?,
        Algorithm::FedProx { mu } => sgd(omega, data, run, lr, ctx, rng, |th, b| {
            let mut g = plain_grad(spec, th, b)?;
            g.axpy_assign(*mu, &th.sub(omega)?)?;
            Ok(g)
        })?,
        Algorithm::Scaffold => {
            let AlgoAux::Scaffold { control } = &client.aux else {
                return Err(FedError::Unsupported("client state does not match SCAFFOLD".into()));
            };
            let global_c = server.scaffold_c.as_ref().expect("SCAFFOLD server state");
            let shift = global_c.sub(control)?;
            let (theta, steps) = sgd(omega, data, run, lr, ctx, rng, |th, b| {
                let mut g = plain_grad(spec, th, b)?;
                g.axpy_assign(1.0, &shift)?;
                Ok(g)
            })?;
            // Option II: c_i+ = c_i − c + (ω − θ)/(Kη).
            let mut new_c = control.sub(global_c)?;
            new_c.axpy_assign(1.0 / (steps as f64 * lr), &omega.sub(&theta)?)?;
            control_delta = Some(new_c.sub(control)?);
            state.aux = AlgoAux::Scaffold { control: new_c };
            (theta, steps)
        }
        Algorithm::FedDyn { alpha } => {
            let AlgoAux::FedDyn { grad_state } = &client.aux else {
                return Err(FedError::Unsupported("client state does not match FedDyn".into()));
            };
            let (theta, steps) = sgd(omega, data, run, lr, ctx, rng, |th, b| {
                let mut g = plain_grad(spec, th, b)?;
                g.axpy_assign(-1.0, grad_state)?;
                g.axpy_assign(*alpha, &th.sub(omega)?)?;
                Ok(g)
            })?;
            let mut new_state = grad_state.clone();
            new_state.axpy_assign(-alpha, &theta.sub(omega)?)?;
            state.aux = AlgoAux::FedDyn { grad_state: new_state };
            (theta, steps)
        }
        Algorithm::FedDc { alpha } => {
            let AlgoAux::FedDc { drift, grad_state } = &client.aux else {
                return Err(FedError::Unsupported("client state does not match FedDC".into()));
            };
            let (global_g, _) = server.feddc.as_ref().expect("FedDC server state");
            let linear = global_g.sub(grad_state)?;
            let anchor = omega.sub(drift)?;
            let (theta, steps) = sgd(omega, data, run, lr, ctx, rng, |th, b| {
                let mut g = plain_grad(spec, th, b)?;
                g.axpy_assign(*alpha, &th.sub(&anchor)?)?;
                g.axpy_assign(1.0, &linear)?;
                Ok(g)
            })?;
            let dtheta = theta.sub(omega)?;
            let mut new_drift = drift.clone();
            new_drift.axpy_assign(1.0, &dtheta)?;
            // state_g = g_i − G − Δθ/(K·η₀)
            let mut new_g = grad_state.sub(global_g)?;
            new_g.axpy_assign(-1.0 / (steps as f64 * run.lr), &dtheta)?;
            control_delta = Some(new_g.sub(grad_state)?);
            state.aux = AlgoAux::FedDc {
                drift: new_drift,
                grad_state: new_g,
            };
            (theta, steps)
        }
        Algorithm::FedSsg(p) => {
            let population_ref;
            let reference = match p.correction_reference {
                CorrectionReference::CohortMeanUpdate => &server.mean_update_prev,
                CorrectionReference::GlobalUpdate => &server.domega_prev,
                CorrectionReference::PopulationMean => {
                    let (state_sum, _) = server.ssg_sums.as_ref().expect("FedSSG server state");
                    population_ref = state_sum.scaled(1.0 / server.n_clients as f64);
                    &population_ref
                }
            };
            let terms = CorrectionTerms {
                alpha: if p.penalization { ctx.alpha } else { 0.0 },
                gate: ctx.gate,
                h_prev: &client.h,
                omega_prev: omega,
                dtheta_prev: client.dtheta_prev.as_ref(),
                domega_prev: reference,
                eta: lr,
                epochs: planned_steps,
                alignment_form: p.alignment,
                grad_correction_enabled: p.grad_correction,
            };
            let (theta, steps) = sgd(omega, data, run, lr, ctx, rng, |th, b| {
                models::composite_grad(spec, th, b, &terms)
            })?;
            let dtheta = theta.sub(omega)?;
            let factor = match p.memory {
                MemoryMode::Gated => Some(ctx.gate + ctx.beta),
                MemoryMode::Unit => Some(1.0 + ctx.beta),
                MemoryMode::Off => None,
            };
            if let Some(f) = factor {
                state.h.axpy_assign(f, &dtheta)?;
                guard(&state.h, ctx)?;
            }
            // G_i's gradient is constant over the round, so its displacement
            // after `steps` steps of size η is exactly −(steps/K)(Δθ_prev − ref).
            let mut stored = dtheta.clone();
            if let (CorrectionState::NetOfCorrection, true, Some(prev)) =
                (p.correction_state, p.grad_correction, client.dtheta_prev.as_ref())
            {
                let shift = prev.sub(reference)?;
                stored.axpy_assign(steps as f64 / planned_steps as f64, &shift)?;
            }
            let old = client.dtheta_prev.clone().unwrap_or_else(|| ParamVector::zeros(d));
            control_delta = Some(stored.sub(&old)?);
            memory_delta = Some(state.h.sub(&client.h)?);
            state.dtheta_prev = Some(stored);
            (theta, steps)
        }
    };

    let dtheta = theta.sub(omega)?;
    Ok(LocalOutcome {
        client: ctx.client,
        theta,
        dtheta,
        state,
        control_delta,
        memory_delta,
        steps,
    })
}

/// Mean of `vectors` over the cohort, or their sum over `n` when given.
fn average<'a>(vectors: impl Iterator<Item = &'a ParamVector>, population: Option<usize>) -> Result<ParamVector> {
    match population {
        None => ParamVector::mean_of(vectors),
        Some(n) => {
            let v: Vec<&ParamVector> = vectors.collect();
            let cohort = v.len() as f64;
            Ok(ParamVector::mean_of(v)?.scaled(cohort / n as f64))
        }
    }
}

/// Forms the next global model from the cohort's outcomes (in cohort order)
/// and advances the server state by one round.
pub fn aggregate(algo: &Algorithm, server: &mut ServerState, outcomes: &[LocalOutcome]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(FedError::Numeric("aggregate needs at least one contribution".into()));
    }
    let d = server.omega.len();
    for o in outcomes {
        FedError::check_dim(d, o.theta.len())?;
        FedError::check_dim(d, o.state.h.len())?;
    }
    let n = server.n_clients as f64;
    let mean_theta = || ParamVector::mean_of(outcomes.iter().map(|o| &o.theta));
    let sum_deltas = |what: &str| -> Result<ParamVector> {
        let mut s = ParamVector::zeros(d);
        for o in outcomes {
            let delta = o
                .control_delta
                .as_ref()
                .ok_or_else(|| FedError::Unsupported(format!("missing {what} delta")))?;
            s.axpy_assign(1.0, delta)?;
        }
        Ok(s)
    };

    let omega = match algo {
        Algorithm::FedAvg | Algorithm::FedProx { .. } => mean_theta()?,
        Algorithm::Scaffold => {
            let c = server.scaffold_c.as_mut().expect("SCAFFOLD server state");
            c.axpy_assign(1.0 / n, &sum_deltas("control")?)?;
            mean_theta()?
        }
        Algorithm::FedDyn { alpha } => {
            let h = server.feddyn_h.as_mut().expect("FedDyn server state");
            let mut drift = ParamVector::zeros(d);
            for o in outcomes {
                drift.axpy_assign(1.0, &o.dtheta)?;
            }
            h.axpy_assign(-alpha / n, &drift)?;
            let mut omega = mean_theta()?;
            omega.axpy_assign(-1.0 / alpha, h)?;
            omega
        }
        Algorithm::FedDc { .. } => {
            let delta_g = sum_deltas("gradient-state")?;
            let (global_g, drift_sum) = server.feddc.as_mut().expect("FedDC server state");
            global_g.axpy_assign(1.0 / n, &delta_g)?;
            for o in outcomes {
                drift_sum.axpy_assign(1.0, &o.dtheta)?;
            }
            let mut omega = mean_theta()?;
            omega.axpy_assign(1.0 / n, drift_sum)?;
            omega
        }
        Algorithm::FedSsg(p) => {
            let (state_sum, h_sum) = server.ssg_sums.as_mut().expect("FedSSG server state");
            for o in outcomes {
                if let Some(delta) = &o.control_delta {
                    state_sum.axpy_assign(1.0, delta)?;
                }
                if let Some(delta) = &o.memory_delta {
                    h_sum.axpy_assign(1.0, delta)?;
                }
            }
            let population = p.population_normalized.then_some(server.n_clients);
            match p.memory_aggregation {
                MemoryAggregation::Population => {
                    let mut omega = average(outcomes.iter().map(|o| &o.theta), population)?;
                    omega.axpy_assign(1.0 / n, h_sum)?;
                    omega
                }
                MemoryAggregation::Cohort if outcomes.iter().all(|o| o.state.h.is_zero()) => {
                    average(outcomes.iter().map(|o| &o.theta), population)?
                }
                MemoryAggregation::Cohort => {
                    let sums: Vec<ParamVector> = outcomes
                        .iter()
                        .map(|o| o.theta.add(&o.state.h))
                        .collect::<Result<_>>()?;
                    average(sums.iter(), population)?
                }
            }
        }
    };

    server.round += 1;
    if !omega.is_finite() || omega.max_abs() > DIVERGENCE_LIMIT {
        return Err(FedError::Divergence {
            round: server.round,
            client: None,
            message: format!("global model magnitude {:.3e}", omega.max_abs()),
        });
    }
    server.mean_update_prev = ParamVector::mean_of(outcomes.iter().map(|o| &o.dtheta))?;
    server.domega_prev = omega.sub(&server.omega)?;
    server.omega = omega;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{derive_stream, DenseMatrix};

    fn half_norm_sq(d: usize) -> ObjectiveSpec {
        ObjectiveSpec::quadratic(DenseMatrix::identity(d), ParamVector::zeros(d)).unwrap()
    }

    fn ctx(gate: f64) -> LocalContext {
        LocalContext {
            round: 1,
            client: 0,
            gate,
            beta: 0.0,
            alpha: 0.05,
        }
    }

    fn one_step() -> LocalRunConfig {
        LocalRunConfig {
            epochs: 1,
            batch_size: 1,
            lr: 0.1,
            lr_decay_per_round: 1.0,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn fedavg_single_sgd_step() {
        let algo = Algorithm::FedAvg;
        let spec = half_norm_sq(2);
        let server = ServerState::new(&algo, ParamVector::from_vec(vec![1.0, 0.0]), 1);
        let client = ClientState::new(&algo, 2);
        let out = local_update(
            &algo,
            &spec,
            &client,
            &server,
            ClientData::Exact,
            &one_step(),
            &ctx(0.0),
            &mut derive_stream(0, "local", 0),
        )
        .unwrap();
        assert_eq!(out.theta.as_slice(), &[0.9, 0.0]);
        assert_eq!(out.steps, 1);
        assert_eq!(out.state.count, 1);
    }

    #[test]
    fn gated_memory_update_through_local_update() {
        let algo = Algorithm::FedSsg(FedSsgParams {
            penalization: false,
            grad_correction: false,
            ..FedSsgParams::default()
        });
        let spec = half_norm_sq(2);
        let server = ServerState::new(&algo, ParamVector::from_vec(vec![-3.0, -6.0]), 1);
        let client = ClientState::new(&algo, 2);
        let out = local_update(
            &algo,
            &spec,
            &client,
            &server,
            ClientData::Exact,
            &one_step(),
            &ctx(1.0 / 3.0),
            &mut derive_stream(0, "local", 0),
        )
        .unwrap();
        // One step of θ ← θ − 0.1θ from (−3, −6) gives Δθ = (0.3, 0.6).
        assert!((out.dtheta[0] - 0.3).abs() < 1e-15);
        assert!((out.state.h[0] - 0.1).abs() < 1e-15 && (out.state.h[1] - 0.2).abs() < 1e-15);
        assert_eq!(out.state.dtheta_prev.as_ref(), Some(&out.dtheta));
    }

    fn outcome(theta: Vec<f64>, h: Vec<f64>) -> LocalOutcome {
        let d = theta.len();
        let mut state = ClientState::new(&Algorithm::FedAvg, d);
        state.h = ParamVector::from_vec(h);
        LocalOutcome {
            client: 0,
            dtheta: ParamVector::from_vec(theta.clone()),
            theta: ParamVector::from_vec(theta),
            state,
            control_delta: None,
            memory_delta: None,
            steps: 1,
        }
    }

    #[test]
    fn aggregation_examples() {
        let ssg = Algorithm::FedSsg(FedSsgParams::default());
        let mut s = ServerState::new(&ssg, ParamVector::zeros(2), 10);
        aggregate(&ssg, &mut s, &[outcome(vec![1.0, 2.0], vec![0.5, -1.0])]).unwrap();
        assert_eq!(s.omega.as_slice(), &[1.5, 1.0]);
        assert_eq!(s.domega_prev.as_slice(), &[1.5, 1.0]);

        let pair = [outcome(vec![1.0, 0.0], vec![0.0, 0.0]), outcome(vec![3.0, 0.0], vec![0.0, 0.0])];
        let mut a = ServerState::new(&ssg, ParamVector::zeros(2), 10);
        let mut b = ServerState::new(&Algorithm::FedAvg, ParamVector::zeros(2), 10);
        aggregate(&ssg, &mut a, &pair).unwrap();
        aggregate(&Algorithm::FedAvg, &mut b, &pair).unwrap();
        assert_eq!(a.omega.as_slice(), &[2.0, 0.0]);
        assert_eq!(a.omega, b.omega);

        let literal = Algorithm::FedSsg(FedSsgParams {
            population_normalized: true,
            ..FedSsgParams::default()
        });
        let mut c = ServerState::new(&literal, ParamVector::zeros(2), 4);
        aggregate(&literal, &mut c, &pair).unwrap();
        assert_eq!(c.omega.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn ablation_variants() {
        assert_eq!(ablation_mask(&[]), Algorithm::FedSsg(FedSsgParams::default()));
        let Algorithm::FedSsg(p) =
            ablation_mask(&[Component::Penalization, Component::GradCorrection, Component::MemoXi])
        else {
            unreachable!()
        };
        assert_eq!(p.memory, MemoryMode::Off);
        assert!(!p.penalization && !p.grad_correction);
        let Algorithm::FedSsg(p) = ablation_mask(&[Component::MemoXi]) else { unreachable!() };
        assert_eq!(p.memory, MemoryMode::Unit);
        assert!(p.penalization && p.grad_correction);
    }

    #[test]
    fn divergence_carries_round_and_client() {
        let algo = Algorithm::FedAvg;
        let spec = ObjectiveSpec::quadratic(
            DenseMatrix::new(1, 1, vec![-1e9]).unwrap(),
            ParamVector::zeros(1),
        )
        .unwrap();
        let server = ServerState::new(&algo, ParamVector::from_vec(vec![1.0]), 3);
        let c = LocalContext { round: 7, client: 2, ..ctx(0.0) };
        let err = local_update(
            &algo,
            &spec,
            &ClientState::new(&algo, 1),
            &server,
            ClientData::Exact,
            &one_step(),
            &c,
            &mut derive_stream(0, "local", 0),
        )
        .unwrap_err();
        assert!(matches!(err, FedError::Divergence { round: 7, client: Some(2), .. }), "{err}");
    }

    #[test]
    fn client_memory_is_linear_in_dim() {
        for algo in [
            Algorithm::FedAvg,
            Algorithm::Scaffold,
            Algorithm::FedDc { alpha: 0.1 },
            Algorithm::FedSsg(FedSsgParams::default()),
        ] {
            let mut s = ClientState::new(&algo, 10);
            s.dtheta_prev = Some(ParamVector::zeros(10));
            assert_eq!(s.stored_floats() % 10, 0);
            assert!(s.stored_floats() <= 40);
        }
    }

    #[test]
    fn net_of_correction_state_removes_the_correction_shift() {
        let params = FedSsgParams {
            penalization: false,
            memory: MemoryMode::Off,
            correction_state: CorrectionState::NetOfCorrection,
            ..FedSsgParams::default()
        };
        let algo = Algorithm::FedSsg(params);
        let spec = half_norm_sq(2);
        let mut server = ServerState::new(&algo, ParamVector::from_vec(vec![1.0, -1.0]), 4);
        server.mean_update_prev = ParamVector::from_vec(vec![0.25, 0.5]);
        let mut client = ClientState::new(&algo, 2);
        client.dtheta_prev = Some(ParamVector::from_vec(vec![-0.5, 1.0]));
        let run = LocalRunConfig { epochs: 3, ..one_step() };
        let out = local_update(
            &algo,
            &spec,
            &client,
            &server,
            ClientData::Exact,
            &run,
            &ctx(1.0),
            &mut derive_stream(0, "local", 0),
        )
        .unwrap();
        let stored = out.state.dtheta_prev.as_ref().unwrap();
        let shift = stored.sub(&out.dtheta).unwrap();
        for (s, want) in shift.iter().zip([-0.75, 0.5]) {
            assert!((s - want).abs() < 1e-15, "{shift:?}");
        }
        assert_eq!(out.control_delta.unwrap(), stored.sub(client.dtheta_prev.as_ref().unwrap()).unwrap());
    }

    #[test]
    fn population_memory_aggregation_averages_all_drifts() {
        let params = FedSsgParams {
            memory_aggregation: MemoryAggregation::Population,
            ..FedSsgParams::default()
        };
        let algo = Algorithm::FedSsg(params);
        let mut server = ServerState::new(&algo, ParamVector::zeros(2), 4);
        // Drift left behind by a client outside this cohort.
        server.ssg_sums.as_mut().unwrap().1 = ParamVector::from_vec(vec![4.0, 0.0]);
        let mut a = outcome(vec![1.0, 0.0], vec![0.0, 2.0]);
        a.memory_delta = Some(ParamVector::from_vec(vec![0.0, 2.0]));
        let b = outcome(vec![3.0, 0.0], vec![0.0, 0.0]);
        aggregate(&algo, &mut server, &[a, b]).unwrap();
        // mean θ = (2, 0); Σh/N = (4, 2)/4.
        assert_eq!(server.omega.as_slice(), &[3.0, 0.5]);
    }

    #[test]
    fn population_reference_tracks_mean_stored_state() {
        let params = FedSsgParams {
            correction_reference: CorrectionReference::PopulationMean,
            ..FedSsgParams::default()
        };
        let algo = Algorithm::FedSsg(params);
        let mut server = ServerState::new(&algo, ParamVector::zeros(1), 2);
        let spec = half_norm_sq(1);
        let mut clients = [ClientState::new(&algo, 1), ClientState::new(&algo, 1)];
        server.omega = ParamVector::from_vec(vec![1.0]);
        for round in 1..=3 {
            let outs: Vec<_> = (0..2)
                .map(|i| {
                    let c = LocalContext { round, client: i, ..ctx(0.5) };
                    local_update(&algo, &spec, &clients[i], &server, ClientData::Exact, &one_step(), &c, &mut derive_stream(0, "local", i as u64))
                        .unwrap()
                })
                .collect();
            aggregate(&algo, &mut server, &outs).unwrap();
            for o in outs {
                clients[o.client] = o.state;
            }
            let sum: f64 = clients.iter().map(|c| c.dtheta_prev.as_ref().unwrap()[0]).sum();
            assert!((server.ssg_sums.as_ref().unwrap().0[0] - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn lr_decays_per_round() {
        let run = LocalRunConfig::default();
        assert_eq!(run.lr_at(1), 0.1);
        assert!((run.lr_at(3) - 0.1 * 0.998 * 0.998).abs() < 1e-17);
    }
}
