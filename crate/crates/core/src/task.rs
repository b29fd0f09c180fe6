//! A materialized federated task: per-client objectives and data shards, the
//! held-out test split, and exact or subset-based global objective evaluation.

use std::path::{Path, PathBuf};

use rand::seq::index;

use crate::algorithms::ClientData;
use crate::config::{ExperimentConfig, PartitionConfig, TaskConfig};
use crate::datasets::{self, LabeledDataset, Partition};
use crate::error::{FedError, Result};
use crate::models::{self, Batch, ObjectiveSpec};
use crate::numkit::{derive_stream, ParamVector};

/// Environment variable consulted when a config names no MNIST directory.
pub const DATA_DIR_ENV: &str = "FEDLAB_DATA_DIR";

const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone)]
enum Objectives {
    Shared(ObjectiveSpec),
    PerClient(Vec<ObjectiveSpec>),
}

#[derive(Debug, Clone)]
pub struct FederatedTask {
    objectives: Objectives,
    pub train: Option<LabeledDataset>,
    pub test: Option<LabeledDataset>,
    pub partition: Option<Partition>,
    /// Training rows used for `f(ω)` and `∇f(ω)` on data tasks.
    pub eval_indices: Vec<usize>,
    eval_batch: Option<Batch>,
    /// Closed-form global minimizer (quadratic tasks).
    pub minimizer: Option<ParamVector>,
    n_clients: usize,
    exact: bool,
}

fn mnist_files(dir: &Path) -> Result<[PathBuf; 4]> {
    let stems = ["train-images", "train-labels", "t10k-images", "t10k-labels"];
    let kinds = ["idx3-ubyte", "idx1-ubyte", "idx3-ubyte", "idx1-ubyte"];
    let mut out: [PathBuf; 4] = Default::default();
    for (k, (stem, kind)) in stems.iter().zip(kinds).enumerate() {
        let dashed = dir.join(format!("{stem}-{kind}"));
        let dotted = dir.join(format!("{stem}.{kind}"));
        out[k] = if dashed.exists() {
            dashed
        } else if dotted.exists() {
            dotted
        } else {
            return Err(FedError::Io {
                path: dashed,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            });
        };
    }
    Ok(out)
}

/// The MNIST directory a config resolves to: its `data_dir`, else
/// `FEDLAB_DATA_DIR`.
pub fn resolve_data_dir(configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = configured {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| FedError::Io {
        path: PathBuf::from(format!("${DATA_DIR_ENV}")),
        source: std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "no task.data_dir configured and FEDLAB_DATA_DIR unset",
        ),
    })
}

fn partition(cfg: &ExperimentConfig, labels: &[usize]) -> Result<Partition> {
    let mut rng = derive_stream(cfg.experiment.seed, "partition", 0);
    let n = cfg.sampler.n_clients;
    match cfg.partition {
        PartitionConfig::Iid => datasets::iid_partition(labels, n, &mut rng),
        PartitionConfig::Dirichlet { concentration } => {
            datasets::dirichlet_partition(labels, n, concentration, &mut rng)
        }
    }
}

impl FederatedTask {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.experiment.seed;
        let n_clients = cfg.sampler.n_clients;
        let wd = cfg.run.weight_decay;
        match &cfg.task {
            TaskConfig::SyntheticQuadratic { dim, heterogeneity } => {
                let specs: Vec<ObjectiveSpec> = datasets::synthetic_quadratic_task(
                    n_clients,
                    *dim,
                    *heterogeneity,
                    &mut derive_stream(seed, "task", 0),
                )?
                .into_iter()
                .map(|s| s.with_weight_decay(wd))
                .collect();
                let minimizer = datasets::quadratic_global_minimizer(&specs)?;
                Ok(FederatedTask {
                    objectives: Objectives::PerClient(specs),
                    train: None,
                    test: None,
                    partition: None,
                    eval_indices: Vec::new(),
                    eval_batch: None,
                    minimizer: Some(minimizer),
                    n_clients,
                    exact: true,
                })
            }
            TaskConfig::SyntheticLogistic {
                features,
                classes,
                train_samples,
                test_samples,
                separation,
                hidden,
            } => {
                let (train, test) = datasets::synthetic_classification(
                    *features,
                    *classes,
                    *train_samples,
                    *test_samples,
                    *separation,
                    &mut derive_stream(seed, "task", 0),
                )?;
                let spec = if hidden.is_empty() {
                    ObjectiveSpec::logistic(*features, *classes, wd)?
                } else {
                    let mut sizes = vec![*features];
                    sizes.extend(hidden);
                    sizes.push(*classes);
                    ObjectiveSpec::mlp(sizes, wd)?
                };
                let eval_indices: Vec<usize> = (0..train.len()).collect();
                Self::from_data(cfg, spec, train, test, eval_indices, true)
            }
            TaskConfig::Mnist {
                data_dir,
                hidden,
                eval_subset,
            } => {
                let dir = resolve_data_dir(data_dir.as_deref())?;
                let [tr_img, tr_lab, te_img, te_lab] = mnist_files(&dir)?;
                let train = datasets::load_idx(&tr_img, &tr_lab)?;
                let test = datasets::load_idx(&te_img, &te_lab)?;
                let mut sizes = vec![train.features()];
                sizes.extend(hidden);
                sizes.push(train.class_count.max(test.class_count));
                let spec = ObjectiveSpec::mlp(sizes, wd)?;
                let k = (*eval_subset).min(train.len());
                let mut eval_indices =
                    index::sample(&mut derive_stream(seed, "eval_subset", 0), train.len(), k).into_vec();
                eval_indices.sort_unstable();
                Self::from_data(cfg, spec, train, test, eval_indices, false)
            }
        }
    }

    fn from_data(
        cfg: &ExperimentConfig,
        spec: ObjectiveSpec,
        train: LabeledDataset,
        test: LabeledDataset,
        eval_indices: Vec<usize>,
        exact: bool,
    ) -> Result<Self> {
        FedError::check_dim(train.features(), test.features())?;
        let partition = partition(cfg, &train.labels)?;
        let eval_batch = train.gather(&eval_indices);
        Ok(FederatedTask {
            objectives: Objectives::Shared(spec),
            n_clients: partition.n_clients(),
            train: Some(train),
            test: Some(test),
            partition: Some(partition),
            eval_indices,
            eval_batch: Some(eval_batch),
            minimizer: None,
            exact,
        })
    }

    /// Identical quadratic clients (for dissimilarity checks).
    pub fn from_quadratics(specs: Vec<ObjectiveSpec>) -> Result<Self> {
        let minimizer = datasets::quadratic_global_minimizer(&specs)?;
        Ok(FederatedTask {
            n_clients: specs.len(),
            objectives: Objectives::PerClient(specs),
            train: None,
            test: None,
            partition: None,
            eval_indices: Vec::new(),
            eval_batch: None,
            minimizer: Some(minimizer),
            exact: true,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn dim(&self) -> usize {
        self.client_spec(0).dim()
    }

    /// Whether `f(ω)` is the true global objective rather than a subset estimate.
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn client_spec(&self, client: usize) -> &ObjectiveSpec {
        match &self.objectives {
            Objectives::Shared(s) => s,
            Objectives::PerClient(v) => &v[client],
        }
    }

    pub fn client_data(&self, client: usize) -> ClientData<'_> {
        match (&self.train, &self.partition) {
            (Some(dataset), Some(p)) => ClientData::Shard {
                dataset,
                indices: &p.assignments[client],
            },
            _ => ClientData::Exact,
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.client_spec(0).init_params(&mut derive_stream(seed, "init", 0))
    }

    /// `f(ω)` and `∇f(ω)`: the client average for quadratic tasks, the
    /// loss on the evaluation rows otherwise.
    pub fn global_loss_and_grad(&self, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        match (&self.objectives, &self.eval_batch) {
            (Objectives::Shared(spec), Some(batch)) => models::loss_and_grad(spec, omega, batch),
            (Objectives::PerClient(specs), _) => {
                let empty = Batch::empty();
                let mut loss = 0.0;
                let mut grad = ParamVector::zeros(omega.len());
                for spec in specs {
                    let (l, g) = models::loss_and_grad(spec, omega, &empty)?;
                    loss += l;
                    grad.axpy_assign(1.0, &g)?;
                }
                let n = specs.len() as f64;
                Ok((loss / n, grad.scaled(1.0 / n)))
            }
            (Objectives::Shared(_), None) => Err(FedError::Unsupported("task without evaluation rows".into())),
        }
    }

    /// `f_i(ω)` and `∇f_i(ω)` over the client's full shard.
    pub fn client_loss_and_grad(&self, client: usize, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        let batch = self.client_data(client).full_batch();
        models::loss_and_grad(self.client_spec(client), omega, &batch)
    }

    /// Accuracy on the held-out split; 0 for tasks without one.
    pub fn test_accuracy(&self, omega: &ParamVector) -> Result<f64> {
        let Some(test) = &self.test else {
            return Ok(0.0);
        };
        let spec = self.client_spec(0);
        let mut correct = 0;
        let rows: Vec<usize> = (0..test.len()).collect();
        for chunk in rows.chunks(EVAL_CHUNK) {
            correct += models::evaluate_batch(spec, omega, &test.gather(chunk))?.1;
        }
        Ok(correct as f64 / test.len() as f64)
    }
}
