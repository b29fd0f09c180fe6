//! Local objective families with analytic gradients, the FedSSG composite
//! local objective, and a central finite-difference oracle.
//!
//! Parameter layout for dense networks (`logistic` and `mlp`): for every layer
//! `l` the weight matrix `W_l` (`out x in`, row-major) followed by the bias
//! `b_l` (`out`). Logistic regression is the network with no hidden layer.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numkit::{gemm, DenseMatrix, MatRef, ParamVector, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// `½ (θ − θ*)ᵀ A (θ − θ*)`; independent of the batch.
    Quadratic {
        hessian: DenseMatrix,
        center: ParamVector,
    },
    /// Multinomial logistic regression (softmax cross-entropy).
    Logistic { features: usize, classes: usize },
    /// Fully connected ReLU network with a softmax cross-entropy head.
    Mlp { layer_sizes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub family: Family,
    pub l2_weight_decay: f64,
}

impl ObjectiveSpec {
    /// Quadratic objective `½(θ−θ*)ᵀ(MᵀM + λI)(θ−θ*)`.
    pub fn quadratic_from_factor(
        factor: &DenseMatrix,
        ridge: f64,
        center: ParamVector,
    ) -> Result<Self> {
        if ridge < 0.0 {
            return Err(FedError::Numeric("ridge must be non-negative".into()));
        }
        let mut hessian = factor.transpose().matmul(factor)?;
        for i in 0..hessian.rows() {
            let v = hessian.get(i, i) + ridge;
            hessian.set(i, i, v);
        }
        Self::quadratic(hessian, center)
    }

    pub fn quadratic(hessian: DenseMatrix, center: ParamVector) -> Result<Self> {
        FedError::check_dim(hessian.rows(), hessian.cols())?;
        FedError::check_dim(hessian.rows(), center.len())?;
        if !hessian.is_symmetric(1e-12 * (1.0 + hessian.data().iter().fold(0.0_f64, |m, v| m.max(v.abs())))) {
            return Err(FedError::Numeric("quadratic hessian must be symmetric".into()));
        }
        Ok(ObjectiveSpec {
            family: Family::Quadratic { hessian, center },
            l2_weight_decay: 0.0,
        })
    }

    pub fn logistic(features: usize, classes: usize, l2_weight_decay: f64) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(FedError::config(
                "task.classes",
                "logistic regression needs at least one feature and two classes",
            ));
        }
        Ok(ObjectiveSpec {
            family: Family::Logistic { features, classes },
            l2_weight_decay,
        })
    }

    pub fn mlp(layer_sizes: Vec<usize>, l2_weight_decay: f64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(FedError::config(
                "layer_sizes",
                "an mlp needs an input and an output layer of positive width",
            ));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(FedError::config("layer_sizes", "the output layer needs >= 2 classes"));
        }
        Ok(ObjectiveSpec {
            family: Family::Mlp { layer_sizes },
            l2_weight_decay,
        })
    }

    pub fn with_weight_decay(mut self, l2_weight_decay: f64) -> Self {
        self.l2_weight_decay = l2_weight_decay;
        self
    }

    /// Layer widths for network families, `None` for the quadratic family.
    pub fn layer_sizes(&self) -> Option<Vec<usize>> {
        match &self.family {
            Family::Quadratic { .. } => None,
            Family::Logistic { features, classes } => Some(vec![*features, *classes]),
            Family::Mlp { layer_sizes } => Some(layer_sizes.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            Family::Quadratic { center, .. } => center.len(),
            _ => {
                let sizes = self.layer_sizes().unwrap();
                sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
            }
        }
    }

    pub fn classes(&self) -> Option<usize> {
        self.layer_sizes().map(|s| *s.last().unwrap())
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.family, Family::Quadratic { .. })
    }

    /// Uniform He-style initialization: weights in `±sqrt(6 / fan_in)`,
    /// zero biases. The quadratic family starts at the origin.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let Some(sizes) = self.layer_sizes() else {
            return ParamVector::zeros(self.dim());
        };
        let mut out = Vec::with_capacity(self.dim());
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("finite positive bound");
            out.extend((0..fan_in * fan_out).map(|_| dist.sample(rng)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::from_vec(out)
    }
}

/// A minibatch of inputs (`batch x features`) and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        FedError::check_dim(inputs.rows(), labels.len())?;
        Ok(Batch { inputs, labels })
    }

    /// The quadratic family ignores data; this is the batch it is evaluated on.
    pub fn empty() -> Self {
        Batch {
            inputs: DenseMatrix::zeros(1, 1),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentForm {
    Proximal,
    #[default]
    InnerProduct,
}

/// Arguments of the FedSSG penalized term `P_i` and gradient correction term `G_i`.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionTerms<'a> {
    pub alpha: f64,
    /// Expectation gate `φ(r_i^t)`.
    pub gate: f64,
    pub h_prev: &'a ParamVector,
    pub omega_prev: &'a ParamVector,
    /// `None` on a client's first participation: the correction is then zero.
    pub dtheta_prev: Option<&'a ParamVector>,
    pub domega_prev: &'a ParamVector,
    pub eta: f64,
    /// Local iteration count `E` scaling the correction by `1/(ηE)`.
    pub epochs: usize,
    pub alignment_form: AlignmentForm,
    pub grad_correction_enabled: bool,
}

impl CorrectionTerms<'_> {
    fn weight(&self) -> f64 {
        self.gate * self.alpha
    }

    fn check(&self, d: usize) -> Result<()> {
        FedError::check_dim(d, self.h_prev.len())?;
        FedError::check_dim(d, self.omega_prev.len())?;
        FedError::check_dim(d, self.domega_prev.len())?;
        if let Some(dt) = self.dtheta_prev {
            FedError::check_dim(d, dt.len())?;
        }
        if !(self.eta > 0.0) || self.epochs == 0 {
            return Err(FedError::Numeric("eta·epochs must be positive".into()));
        }
        Ok(())
    }

    fn penalty_active(&self) -> bool {
        self.weight() != 0.0
    }

    fn correction_active(&self) -> bool {
        self.grad_correction_enabled && self.dtheta_prev.is_some()
    }

    fn correction_scale(&self) -> f64 {
        1.0 / (self.eta * self.epochs as f64)
    }

    #[inline]
    fn penalized_grad_at(&self, params: &[f64], k: usize) -> f64 {
        let w = self.weight();
        match self.alignment_form {
            AlignmentForm::InnerProduct => w * self.h_prev[k],
            AlignmentForm::Proximal => w * (params[k] - self.omega_prev[k] + self.h_prev[k]),
        }
    }

    #[inline]
    fn correction_grad_at(&self, dtheta_prev: &ParamVector, k: usize) -> f64 {
        self.correction_scale() * (dtheta_prev[k] - self.domega_prev[k])
    }
}

/// Empirical loss (batch mean plus `½·wd·‖θ‖²`) and its analytic gradient.
pub fn loss_and_grad(
    spec: &ObjectiveSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    FedError::check_dim(spec.dim(), params.len())?;
    let (mut loss, mut grad) = match &spec.family {
        Family::Quadratic { hessian, center } => {
            let diff = params.sub(center)?;
            let g = hessian.matvec(diff.as_slice())?;
            let loss = 0.5 * diff.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            (loss, ParamVector::from_vec(g))
        }
        _ => {
            let sizes = spec.layer_sizes().unwrap();
            network_loss_and_grad(&sizes, params.as_slice(), batch)?
        }
    };
    let wd = spec.l2_weight_decay;
    if wd != 0.0 {
        loss += 0.5 * wd * params.norm_sq();
        grad.axpy_assign(wd, params)?;
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(FedError::Numeric("non-finite loss or gradient".into()));
    }
    Ok((loss, grad))
}

/// Empirical loss only; skips the backward pass.
pub fn loss_value(spec: &ObjectiveSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    FedError::check_dim(spec.dim(), params.len())?;
    let mut loss = match &spec.family {
        Family::Quadratic { hessian, center } => {
            let diff = params.sub(center)?;
            let g = hessian.matvec(diff.as_slice())?;
            0.5 * diff.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        }
        _ => {
            let sizes = spec.layer_sizes().unwrap();
            let fwd = forward(&sizes, params.as_slice(), &batch.inputs)?;
            cross_entropy(fwd.logits(), *sizes.last().unwrap(), &batch.labels)?.0
        }
    };
    if spec.l2_weight_decay != 0.0 {
        loss += 0.5 * spec.l2_weight_decay * params.norm_sq();
    }
    if !loss.is_finite() {
        return Err(FedError::Numeric("non-finite loss".into()));
    }
    Ok(loss)
}

/// Summed (not averaged) cross-entropy and correct-prediction count over a
/// batch, without weight decay. Used for chunked evaluation of large sets.
pub fn evaluate_batch(
    spec: &ObjectiveSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, usize)> {
    FedError::check_dim(spec.dim(), params.len())?;
    let sizes = spec
        .layer_sizes()
        .ok_or_else(|| FedError::Unsupported("classification metrics on a quadratic objective".into()))?;
    let classes = *sizes.last().unwrap();
    let fwd = forward(&sizes, params.as_slice(), &batch.inputs)?;
    let (mean, _) = cross_entropy(fwd.logits(), classes, &batch.labels)?;
    let correct = fwd
        .logits()
        .chunks(classes)
        .zip(&batch.labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    Ok((mean * batch.len() as f64, correct))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct Forward {
    /// Pre-activations per layer (`batch x width`), last one is the logits.
    pre: Vec<Vec<f64>>,
    /// Post-activations of hidden layers.
    post: Vec<Vec<f64>>,
}

impl Forward {
    fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

fn layer_offsets(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut at = 0;
    for w in sizes.windows(2) {
        let w_len = w[0] * w[1];
        offsets.push((at, at + w_len));
        at += w_len + w[1];
    }
    offsets
}

fn forward(sizes: &[usize], params: &[f64], inputs: &DenseMatrix) -> Result<Forward> {
    FedError::check_dim(sizes[0], inputs.cols())?;
    let batch = inputs.rows();
    let offsets = layer_offsets(sizes);
    let mut pre = Vec::with_capacity(sizes.len() - 1);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(sizes.len() - 2);
    for (l, &(w_at, b_at)) in offsets.iter().enumerate() {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let input: &[f64] = if l == 0 { inputs.data() } else { &post[l - 1] };
        let bias = &params[b_at..b_at + fan_out];
        let mut z = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            z.extend_from_slice(bias);
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            MatRef::row_major(input, fan_in),
            MatRef::transposed(&params[w_at..w_at + fan_in * fan_out], fan_in),
            1.0,
            &mut z,
            fan_out,
        );
        if l + 1 < offsets.len() {
            post.push(z.iter().map(|v| v.max(0.0)).collect());
        }
        pre.push(z);
    }
    if pre.last().unwrap().iter().any(|v| !v.is_finite()) {
        return Err(FedError::Numeric("non-finite activations".into()));
    }
    Ok(Forward { pre, post })
}

/// Mean softmax cross-entropy and `d loss / d logits`.
fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    if batch == 0 {
        return Err(FedError::Numeric("empty batch".into()));
    }
    let inv_b = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(FedError::Numeric(format!("label {y} out of range for {classes} classes")));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[y];
        let d = &mut dlogits[i * classes..(i + 1) * classes];
        for (dk, v) in d.iter_mut().zip(row) {
            *dk = (v - log_z).exp() * inv_b;
        }
        d[y] -= inv_b;
    }
    Ok((total * inv_b, dlogits))
}

fn network_loss_and_grad(
    sizes: &[usize],
    params: &[f64],
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    let fwd = forward(sizes, params, &batch.inputs)?;
    let classes = *sizes.last().unwrap();
    let (loss, mut delta) = cross_entropy(fwd.logits(), classes, &batch.labels)?;
    let n = batch.len();
    let offsets = layer_offsets(sizes);
    let mut grad = vec![0.0; params.len()];
    for l in (0..offsets.len()).rev() {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let (w_at, b_at) = offsets[l];
        let input: &[f64] = if l == 0 { batch.inputs.data() } else { &fwd.post[l - 1] };
        // dW = deltaᵀ · input
        gemm(
            fan_out,
            n,
            fan_in,
            1.0,
            MatRef::transposed(&delta, fan_out),
            MatRef::row_major(input, fan_in),
            0.0,
            &mut grad[w_at..w_at + fan_in * fan_out],
            fan_in,
        );
        let db = &mut grad[b_at..b_at + fan_out];
        for row in delta.chunks(fan_out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l > 0 {
            let mut upstream = vec![0.0; n * fan_in];
            gemm(
                n,
                fan_out,
                fan_in,
                1.0,
                MatRef::row_major(&delta, fan_out),
                MatRef::row_major(&params[w_at..w_at + fan_in * fan_out], fan_in),
                0.0,
                &mut upstream,
                fan_in,
            );
            for (u, z) in upstream.iter_mut().zip(&fwd.pre[l - 1]) {
                if *z <= 0.0 {
                    *u = 0.0;
                }
            }
            delta = upstream;
        }
    }
    Ok((loss, ParamVector::from_vec(grad)))
}

/// Value and gradient of the gated alignment term `φ·α·A(θ, ω − h)`.
pub fn penalized_term_value_and_grad(
    params: &ParamVector,
    c: &CorrectionTerms<'_>,
) -> Result<(f64, ParamVector)> {
    let d = params.len();
    c.check(d)?;
    if !c.penalty_active() {
        return Ok((0.0, ParamVector::zeros(d)));
    }
    let p = params.as_slice();
    let value = match c.alignment_form {
        AlignmentForm::InnerProduct => {
            c.weight()
                * (0..d)
                    .map(|k| (p[k] - (c.omega_prev[k] - c.h_prev[k])) * c.h_prev[k])
                    .sum::<f64>()
        }
        AlignmentForm::Proximal => {
            c.weight()
                * 0.5
                * (0..d)
                    .map(|k| {
                        let r = p[k] - (c.omega_prev[k] - c.h_prev[k]);
                        r * r
                    })
                    .sum::<f64>()
        }
    };
    let grad = (0..d).map(|k| c.penalized_grad_at(p, k)).collect();
    Ok((value, ParamVector::from_vec(grad)))
}

/// Gradient of `G_i(θ) = ⟨θ, Δθ_i^{t−1} − Δω^{t−1}⟩ / (ηE)`; constant in θ.
pub fn gradient_correction_grad(c: &CorrectionTerms<'_>) -> Result<ParamVector> {
    let d = c.h_prev.len();
    c.check(d)?;
    match c.dtheta_prev {
        Some(dt) if c.grad_correction_enabled => Ok(ParamVector::from_vec(
            (0..d).map(|k| c.correction_grad_at(dt, k)).collect(),
        )),
        _ => Ok(ParamVector::zeros(d)),
    }
}

/// Value of `G_i` at `params` (zero when inactive).
pub fn gradient_correction_value(params: &ParamVector, c: &CorrectionTerms<'_>) -> Result<f64> {
    c.check(params.len())?;
    match c.dtheta_prev {
        Some(dt) if c.grad_correction_enabled => {
            let diff = dt.sub(c.domega_prev)?;
            Ok(c.correction_scale() * params.dot(&diff)?)
        }
        _ => Ok(0.0),
    }
}

/// Gradient of `L_i + P_i + G_i`, accumulated as
/// `(plain + penalized) + correction` element by element.
pub fn composite_grad(
    spec: &ObjectiveSpec,
    params: &ParamVector,
    batch: &Batch,
    c: &CorrectionTerms<'_>,
) -> Result<ParamVector> {
    Ok(composite_loss_and_grad(spec, params, batch, c)?.1)
}

/// Composite gradient together with the plain empirical loss `L_i`.
pub fn composite_loss_and_grad(
    spec: &ObjectiveSpec,
    params: &ParamVector,
    batch: &Batch,
    c: &CorrectionTerms<'_>,
) -> Result<(f64, ParamVector)> {
    c.check(params.len())?;
    let (loss, mut grad) = loss_and_grad(spec, params, batch)?;
    let p = params.as_slice();
    if c.penalty_active() {
        for (k, g) in grad.as_mut_slice().iter_mut().enumerate() {
            *g += c.penalized_grad_at(p, k);
        }
    }
    if c.correction_active() {
        let dt = c.dtheta_prev.unwrap();
        for (k, g) in grad.as_mut_slice().iter_mut().enumerate() {
            *g += c.correction_grad_at(dt, k);
        }
    }
    Ok((loss, grad))
}

/// Central differences `(f(θ+s·e_k) − f(θ−s·e_k)) / 2s`. When `coords` is
/// given only those coordinates are differenced; the rest are zero.
pub fn finite_diff_grad<F>(
    mut scalar_fn: F,
    params: &ParamVector,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(FedError::Numeric("finite-difference step must be positive".into()));
    }
    let d = params.len();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..d).collect();
            &all
        }
    };
    let mut probe = params.clone();
    let mut out = ParamVector::zeros(d);
    for &k in coords {
        let orig = probe[k];
        probe[k] = orig + step;
        let plus = scalar_fn(&probe)?;
        probe[k] = orig - step;
        let minus = scalar_fn(&probe)?;
        probe[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FedError::Numeric(format!("non-finite objective at coordinate {k}")));
        }
        out[k] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}
