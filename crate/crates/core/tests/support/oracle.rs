//! Loop-based reference objectives, independent of the library's
//! vectorized forward/backward code, and central-difference comparisons.

use fedlab_core::models::{self, Batch, CorrectionTerms, Family};
use fedlab_core::numkit::derive_stream;
use fedlab_core::{AlignmentForm, DenseMatrix, ObjectiveSpec, ParamVector, RngStream};
use rand::Rng;

/// Relative-error bound for analytic vs central-difference gradients.
pub const TOL: f64 = 1e-5;

fn naive_network_loss(sizes: &[usize], p: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for (r, &y) in batch.labels.iter().enumerate() {
        let mut a: Vec<f64> = batch.inputs.row(r).to_vec();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &p[off..off + fan_in * fan_out];
            let bias = &p[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut s = bias[o];
                for i in 0..fan_in {
                    s += weights[o * fan_in + i] * a[i];
                }
                z[o] = if l + 2 < sizes.len() { s.max(0.0) } else { s };
            }
            a = z;
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[y];
    }
    total / batch.len() as f64
}

pub fn naive_loss(spec: &ObjectiveSpec, p: &ParamVector, batch: &Batch) -> f64 {
    let base = match &spec.family {
        Family::Quadratic { hessian, center } => {
            let d = center.len();
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += (p[i] - center[i]) * hessian.get(i, j) * (p[j] - center[j]);
                }
            }
            0.5 * s
        }
        _ => naive_network_loss(&spec.layer_sizes().unwrap(), p.as_slice(), batch),
    };
    base + 0.5 * spec.l2_weight_decay * p.iter().map(|v| v * v).sum::<f64>()
}

pub fn naive_composite(spec: &ObjectiveSpec, p: &ParamVector, batch: &Batch, c: &CorrectionTerms<'_>) -> f64 {
    let d = p.len();
    let w = c.gate * c.alpha;
    let penalty: f64 = match c.alignment_form {
        AlignmentForm::InnerProduct => (0..d)
            .map(|k| (p[k] - (c.omega_prev[k] - c.h_prev[k])) * c.h_prev[k])
            .sum::<f64>(),
        AlignmentForm::Proximal => {
            0.5 * (0..d)
                .map(|k| (p[k] - (c.omega_prev[k] - c.h_prev[k])).powi(2))
                .sum::<f64>()
        }
    };
    let correction = match c.dtheta_prev {
        Some(dt) if c.grad_correction_enabled => {
            (0..d).map(|k| p[k] * (dt[k] - c.domega_prev[k])).sum::<f64>() / (c.eta * c.epochs as f64)
        }
        _ => 0.0,
    };
    naive_loss(spec, p, batch) + w * penalty + correction
}

pub fn rel_err(analytic: &ParamVector, numeric: &ParamVector, coords: &[usize]) -> f64 {
    let diff: f64 = coords.iter().map(|&k| (analytic[k] - numeric[k]).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = coords.iter().map(|&k| numeric[k].powi(2)).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

pub fn random_batch(rng: &mut RngStream, n: usize, features: usize, classes: usize) -> Batch {
    let data = (0..n * features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(DenseMatrix::new(n, features, data).unwrap(), labels).unwrap()
}

pub fn random_vec(rng: &mut RngStream, d: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
}

pub fn random_spec(rng: &mut RngStream, family: usize) -> (ObjectiveSpec, Batch) {
    let wd = rng.random_range(0.0..0.01);
    match family {
        0 => {
            let d = rng.random_range(1..8);
            let m = DenseMatrix::new(d, d, random_vec(rng, d * d, 1.0).into_vec()).unwrap();
            let spec = ObjectiveSpec::quadratic_from_factor(&m, 0.5, random_vec(rng, d, 2.0))
                .unwrap()
                .with_weight_decay(wd);
            (spec, Batch::empty())
        }
        1 => {
            let (f, c) = (rng.random_range(1..10), rng.random_range(2..6));
            (ObjectiveSpec::logistic(f, c, wd).unwrap(), random_batch(rng, 7, f, c))
        }
        _ => {
            let f = rng.random_range(2..9);
            let c = rng.random_range(2..5);
            let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..7)).collect();
            let mut sizes = vec![f];
            sizes.extend(hidden);
            sizes.push(c);
            (ObjectiveSpec::mlp(sizes, wd).unwrap(), random_batch(rng, 6, f, c))
        }
    }
}

pub const FAMILIES: [&str; 3] = ["quadratic", "logistic", "mlp"];

/// Relative gradient error of the plain objective for one random configuration.
pub fn plain_error(family: usize, seed: u64) -> f64 {
    let mut rng = derive_stream(seed, "oracle", family as u64);
    let (spec, batch) = random_spec(&mut rng, family);
    // A generic point: zero biases can park ReLU inputs exactly on the kink.
    let theta = random_vec(&mut rng, spec.dim(), 1.0);
    let (_, g) = models::loss_and_grad(&spec, &theta, &batch).unwrap();
    let fd = models::finite_diff_grad(|p| Ok(naive_loss(&spec, p, &batch)), &theta, 1e-6, None).unwrap();
    let all: Vec<usize> = (0..theta.len()).collect();
    rel_err(&g, &fd, &all)
}

/// Relative gradient error of the full FedSSG local objective.
pub fn composite_error(form: AlignmentForm, family: usize, seed: u64) -> f64 {
    let mut rng = derive_stream(seed, "composite", family as u64 * 2 + form as u64);
    let (spec, batch) = random_spec(&mut rng, family);
    let d = spec.dim();
    let theta = random_vec(&mut rng, d, 0.5);
    let (h, omega, dt, dw) = (
        random_vec(&mut rng, d, 0.3),
        random_vec(&mut rng, d, 0.5),
        random_vec(&mut rng, d, 0.1),
        random_vec(&mut rng, d, 0.1),
    );
    let terms = CorrectionTerms {
        alpha: rng.random_range(0.01..0.1),
        gate: rng.random_range(0.0..2.0),
        h_prev: &h,
        omega_prev: &omega,
        dtheta_prev: (!seed.is_multiple_of(4)).then_some(&dt),
        domega_prev: &dw,
        eta: 0.1,
        epochs: rng.random_range(1..20),
        alignment_form: form,
        grad_correction_enabled: !seed.is_multiple_of(3),
    };
    let g = models::composite_grad(&spec, &theta, &batch, &terms).unwrap();
    let fd = models::finite_diff_grad(|p| Ok(naive_composite(&spec, p, &batch, &terms)), &theta, 1e-6, None).unwrap();
    let all: Vec<usize> = (0..d).collect();
    rel_err(&g, &fd, &all)
}
