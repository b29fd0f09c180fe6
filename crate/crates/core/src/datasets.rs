//! Dataset ingestion (IDX / MNIST), synthetic federated tasks, and label-skew
//! partitioning across clients.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{FedError, Result};
use crate::models::{Batch, ObjectiveSpec};
use crate::numkit::{DenseMatrix, ParamVector, RngStream};

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Largest curvature of a synthetic quadratic client objective.
pub const QUADRATIC_MAX_CURVATURE: f64 = 4.0;
/// Smallest curvature of a synthetic quadratic client objective.
pub const QUADRATIC_MIN_CURVATURE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        FedError::check_dim(inputs.rows(), labels.len())?;
        if let Some(bad) = labels.iter().find(|l| **l >= class_count) {
            return Err(FedError::Numeric(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// Copy the given rows into a minibatch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let cols = self.features();
        let mut data = Vec::with_capacity(indices.len() * cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs: DenseMatrix::new(indices.len().max(1), cols, pad_rows(data, cols))
                .expect("rows gathered from a valid dataset"),
            labels,
        }
    }
}

// `DenseMatrix` needs at least one row; an empty gather yields a single zero
// row with no labels, which every consumer rejects as an empty batch.
fn pad_rows(mut data: Vec<f64>, cols: usize) -> Vec<f64> {
    if data.is_empty() {
        data.resize(cols, 0.0);
    }
    data
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FedError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FedError::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

/// Load an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let label_bytes = read_file(labels_path)?;
    let magic = be_u32(&label_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FedError::Format {
            path: labels_path.to_path_buf(),
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = be_u32(&label_bytes, 4, labels_path)? as usize;
    let label_data = &label_bytes[8..];
    if label_data.len() < n_labels {
        return Err(FedError::Format {
            path: labels_path.to_path_buf(),
            offset: label_bytes.len() as u64,
            message: format!("expected {n_labels} labels, file holds {}", label_data.len()),
        });
    }

    let image_bytes = read_file(images_path)?;
    let magic = be_u32(&image_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FedError::Format {
            path: images_path.to_path_buf(),
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n_images = be_u32(&image_bytes, 4, images_path)? as usize;
    let rows = be_u32(&image_bytes, 8, images_path)? as usize;
    let cols = be_u32(&image_bytes, 12, images_path)? as usize;
    if n_images != n_labels {
        return Err(FedError::Format {
            path: images_path.to_path_buf(),
            offset: 4,
            message: format!("{n_images} images but {n_labels} labels"),
        });
    }
    let features = rows * cols;
    let pixels = &image_bytes[16..];
    if features == 0 || pixels.len() < n_images * features {
        return Err(FedError::Format {
            path: images_path.to_path_buf(),
            offset: image_bytes.len() as u64,
            message: format!(
                "expected {} pixel bytes, file holds {}",
                n_images * features,
                pixels.len()
            ),
        });
    }
    let data: Vec<f64> = pixels[..n_images * features]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_data[..n_labels].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let inputs = DenseMatrix::new(n_images.max(1), features, pad_rows(data, features))?;
    LabeledDataset::new(inputs, labels, class_count)
}

/// Client index lists: disjoint, covering `0..n`, each non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks the exact-cover and non-empty invariants against `n` samples.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for list in &self.assignments {
            if list.is_empty() {
                return false;
            }
            for &i in list {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Per-client label histograms.
    pub fn class_histograms(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|list| {
                let mut h = vec![0; classes];
                for &i in list {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }
}

fn group_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

fn check_clients(n_clients: usize, n: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(FedError::config("n_clients", "must be at least 1"));
    }
    if n_clients > n {
        return Err(FedError::config(
            "n_clients",
            format!("{n_clients} clients but only {n} samples"),
        ));
    }
    Ok(())
}

/// Integer counts summing to `total` from proportions, by largest remainder.
/// Ties go to the lower client index.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let quotas: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn sample_dirichlet(concentration: f64, k: usize, rng: &mut RngStream) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        if draws.iter().sum::<f64>() > 0.0 {
            return draws;
        }
    }
}

/// Label-skew split: for each class draw client proportions from
/// `Dirichlet(concentration·1)`, convert to counts by largest remainder and
/// hand out that class's (shuffled) indices. Empty clients then take one
/// sample from the currently largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    concentration: f64,
    rng: &mut RngStream,
) -> Result<Partition> {
    check_clients(n_clients, labels.len())?;
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(FedError::config("concentration", "must be a positive finite number"));
    }
    let mut assignments = vec![Vec::new(); n_clients];
    for mut members in group_by_class(labels) {
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let proportions = sample_dirichlet(concentration, n_clients, rng);
        let counts = largest_remainder(&proportions, members.len());
        let mut at = 0;
        for (client, c) in counts.into_iter().enumerate() {
            assignments[client].extend_from_slice(&members[at..at + c]);
            at += c;
        }
    }
    repair_empty(&mut assignments);
    for list in &mut assignments {
        list.sort_unstable();
    }
    Ok(Partition { assignments })
}

fn repair_empty(assignments: &mut [Vec<usize>]) {
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..assignments.len())
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .unwrap();
        let sample = assignments[donor].pop().expect("donor holds >= 2 samples");
        assignments[empty].push(sample);
    }
}

/// Class-stratified IID split: each class's shuffled indices are dealt to
/// clients round-robin, continuing the deal across classes.
pub fn iid_partition(labels: &[usize], n_clients: usize, rng: &mut RngStream) -> Result<Partition> {
    check_clients(n_clients, labels.len())?;
    let mut assignments = vec![Vec::new(); n_clients];
    let mut next = 0;
    for mut members in group_by_class(labels) {
        members.shuffle(rng);
        for i in members {
            assignments[next].push(i);
            next = (next + 1) % n_clients;
        }
    }
    for list in &mut assignments {
        list.sort_unstable();
    }
    Ok(Partition { assignments })
}

fn normal_vec(d: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Heterogeneous quadratic clients `f_i(θ) = ½(θ−θ_i*)ᵀA_i(θ−θ_i*)` with
/// `A_i = M_iᵀM_i + λI` and spectrum inside
/// `[QUADRATIC_MIN_CURVATURE, QUADRATIC_MAX_CURVATURE]`. Client optima are a
/// shared point plus `heterogeneity`-scaled Gaussian offsets.
pub fn synthetic_quadratic_task(
    n_clients: usize,
    dim: usize,
    heterogeneity: f64,
    rng: &mut RngStream,
) -> Result<Vec<ObjectiveSpec>> {
    if dim == 0 {
        return Err(FedError::config("task.dim", "must be at least 1"));
    }
    if n_clients == 0 {
        return Err(FedError::config("n_clients", "must be at least 1"));
    }
    if !(heterogeneity >= 0.0) {
        return Err(FedError::config("task.heterogeneity", "must be non-negative"));
    }
    let shared = normal_vec(dim, rng);
    let spread = QUADRATIC_MAX_CURVATURE - QUADRATIC_MIN_CURVATURE;
    (0..n_clients)
        .map(|_| {
            let mut factor = normal_vec(dim * dim, rng);
            // ‖M‖_F² bounds λ_max(MᵀM), which keeps the spectrum in range.
            let frob_sq: f64 = factor.iter().map(|v| v * v).sum();
            let scale = (spread / frob_sq.max(f64::MIN_POSITIVE)).sqrt();
            for v in &mut factor {
                *v *= scale;
            }
            let factor = DenseMatrix::new(dim, dim, factor)?;
            let offset = normal_vec(dim, rng);
            let center: Vec<f64> = shared
                .iter()
                .zip(&offset)
                .map(|(s, o)| s + heterogeneity * o)
                .collect();
            ObjectiveSpec::quadratic_from_factor(&factor, QUADRATIC_MIN_CURVATURE, ParamVector::from_vec(center))
        })
        .collect()
}

/// Minimizer of `(1/N)Σ f_i` for quadratic clients: `(ΣA_i)⁻¹ ΣA_iθ_i*`.
pub fn quadratic_global_minimizer(specs: &[ObjectiveSpec]) -> Result<ParamVector> {
    use crate::models::Family;
    let first = specs
        .first()
        .ok_or_else(|| FedError::config("n_clients", "need at least one client"))?;
    let d = first.dim();
    let mut hess_sum = DenseMatrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for spec in specs {
        let Family::Quadratic { hessian, center } = &spec.family else {
            return Err(FedError::Unsupported("closed-form minimizer of a non-quadratic task".into()));
        };
        let mut h = hessian.clone();
        let wd = spec.l2_weight_decay;
        for i in 0..d {
            h.set(i, i, h.get(i, i) + wd);
        }
        hess_sum = hess_sum.add(&h)?;
        for (r, v) in rhs.iter_mut().zip(hessian.matvec(center.as_slice())?) {
            *r += v;
        }
    }
    Ok(ParamVector::from_vec(hess_sum.cholesky_solve(&rhs)?))
}

/// Gaussian-mixture classification data for synthetic logistic tasks:
/// class means `separation·N(0, I)/sqrt(features)`, unit-variance noise.
/// Returns `(train, test)`; both draw from the same class means.
pub fn synthetic_classification(
    features: usize,
    classes: usize,
    train_samples: usize,
    test_samples: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if features == 0 || classes < 2 {
        return Err(FedError::config("task.classes", "need >= 1 feature and >= 2 classes"));
    }
    if train_samples == 0 || test_samples == 0 {
        return Err(FedError::config("task.train_samples", "sample counts must be positive"));
    }
    let scale = separation * (features as f64).sqrt().recip() * 3.0;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| normal_vec(features, rng).into_iter().map(|v| v * scale).collect())
        .collect();
    let mut make = |n: usize| -> Result<LabeledDataset> {
        let mut data = Vec::with_capacity(n * features);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            labels.push(y);
            for (m, z) in means[y].iter().zip(normal_vec(features, rng)) {
                data.push(m + z);
            }
        }
        LabeledDataset::new(DenseMatrix::new(n, features, data)?, labels, classes)
    };
    let train = make(train_samples)?;
    let test = make(test_samples)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::derive_stream;
    use std::io::Write;

    fn write_idx(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(n: u32, labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_LABELS_MAGIC, n] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_round_trip_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_idx(dir.path(), "img", &idx_images(2, 1, 2, &[0, 255, 51, 102]));
        let lab = write_idx(dir.path(), "lab", &idx_labels(2, &[3, 1]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features(), 2);
        assert_eq!(ds.inputs.row(0), &[0.0, 1.0]);
        assert!((ds.inputs.get(1, 0) - 0.2).abs() < 1e-15);
        assert_eq!(ds.labels, vec![3, 1]);
    }

    #[test]
    fn idx_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_idx(dir.path(), "img", &idx_images(2, 1, 2, &[0, 1, 2, 3]));
        let mut bad = idx_labels(2, &[0, 1]);
        bad[3] = 0x02;
        let bad_lab = write_idx(dir.path(), "bad", &bad);
        let err = load_idx(&img, &bad_lab).unwrap_err();
        assert!(matches!(err, FedError::Format { offset: 0, .. }), "{err}");

        let short = write_idx(dir.path(), "short", &idx_labels(3, &[0, 1, 2]));
        assert!(matches!(load_idx(&img, &short), Err(FedError::Format { offset: 4, .. })));

        let truncated = write_idx(dir.path(), "trunc", &idx_labels(5, &[0, 1]));
        assert!(matches!(load_idx(&img, &truncated), Err(FedError::Format { .. })));

        let missing = dir.path().join("nope");
        assert!(matches!(load_idx(&missing, &short), Err(FedError::Io { .. })));
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = vec![0, 1, 2, 1, 0];
        let p = dirichlet_partition(&labels, 1, 0.3, &mut derive_stream(1, "p", 0)).unwrap();
        assert_eq!(p.assignments, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn too_many_clients_is_config_error() {
        let err = dirichlet_partition(&[0, 1], 3, 1.0, &mut derive_stream(1, "p", 0)).unwrap_err();
        assert!(matches!(err, FedError::Config { ref key, .. } if key == "n_clients"));
        assert!(dirichlet_partition(&[0, 1], 1, 0.0, &mut derive_stream(1, "p", 0)).is_err());
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10), vec![1, 2, 7]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 2).iter().sum::<usize>(), 2);
    }

    #[test]
    fn repairs_empty_clients() {
        // 20 samples of one class over 15 clients at a tiny concentration
        // leaves most clients empty before repair.
        let labels = vec![0; 20];
        let p = dirichlet_partition(&labels, 15, 0.01, &mut derive_stream(3, "p", 0)).unwrap();
        assert!(p.is_exact_cover(20));
    }

    #[test]
    fn iid_split_is_balanced() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let p = iid_partition(&labels, 10, &mut derive_stream(1, "iid", 0)).unwrap();
        assert!(p.is_exact_cover(1000));
        for h in p.class_histograms(&labels, 10) {
            assert!(h.iter().all(|c| *c == 10));
        }
    }

    #[test]
    fn homogeneous_quadratic_clients_share_optimum() {
        let specs = synthetic_quadratic_task(4, 3, 0.0, &mut derive_stream(5, "q", 0)).unwrap();
        let centers: Vec<_> = specs
            .iter()
            .map(|s| match &s.family {
                crate::models::Family::Quadratic { center, .. } => center.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert!(centers.windows(2).all(|w| w[0] == w[1]));
        let star = quadratic_global_minimizer(&specs).unwrap();
        for k in 0..3 {
            assert!((star[k] - centers[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_hessians_average_optima() {
        let a = ObjectiveSpec::quadratic(DenseMatrix::identity(2), ParamVector::from_vec(vec![1.0, 0.0])).unwrap();
        let b = ObjectiveSpec::quadratic(DenseMatrix::identity(2), ParamVector::from_vec(vec![-1.0, 0.0])).unwrap();
        let star = quadratic_global_minimizer(&[a, b]).unwrap();
        assert!(star.max_abs() < 1e-15);
    }

    #[test]
    fn quadratic_spectrum_in_range() {
        let specs = synthetic_quadratic_task(3, 4, 1.0, &mut derive_stream(9, "q", 0)).unwrap();
        for s in &specs {
            let crate::models::Family::Quadratic { hessian, .. } = &s.family else { unreachable!() };
            // A - λ_min I and λ_max I - A must both be positive definite.
            let d = hessian.rows();
            let mut below = hessian.clone();
            let mut above = hessian.clone();
            for i in 0..d {
                below.set(i, i, hessian.get(i, i) - QUADRATIC_MIN_CURVATURE + 1e-9);
                for j in 0..d {
                    let id = if i == j { QUADRATIC_MAX_CURVATURE + 1e-9 } else { 0.0 };
                    above.set(i, j, id - hessian.get(i, j));
                }
            }
            assert!(below.cholesky_solve(&vec![1.0; d]).is_ok());
            assert!(above.cholesky_solve(&vec![1.0; d]).is_ok());
        }
    }

    #[test]
    fn synthetic_classification_shapes() {
        let (tr, te) = synthetic_classification(5, 3, 30, 9, 1.0, &mut derive_stream(1, "c", 0)).unwrap();
        assert_eq!((tr.len(), te.len(), tr.features()), (30, 9, 5));
        assert_eq!(tr.class_count, 3);
    }
}
