//! Analytic gradients against central differences of an independent,
//! loop-based objective implementation.

mod support;

use fedlab_core::models::{self, Batch};
use fedlab_core::numkit::derive_stream;
use fedlab_core::{AlignmentForm, DenseMatrix, ObjectiveSpec};
use rand::Rng;
use support::oracle::{composite_error, plain_error, random_vec, rel_err, FAMILIES, TOL};

#[test]
fn plain_objectives_match_finite_differences() {
    for (family, name) in FAMILIES.iter().enumerate() {
        for seed in 0..20 {
            let e = plain_error(family, seed);
            assert!(e < TOL, "{name} seed {seed}: relative error {e:e}");
        }
    }
}

#[test]
fn composite_objective_matches_finite_differences() {
    for form in [AlignmentForm::InnerProduct, AlignmentForm::Proximal] {
        for (family, name) in FAMILIES.iter().enumerate() {
            for seed in 0..20 {
                let e = composite_error(form, family, seed);
                assert!(e < TOL, "{form:?} {name} seed {seed}: relative error {e:e}");
            }
        }
    }
}

#[test]
fn mnist_sized_network_on_sampled_coordinates() {
    let spec = ObjectiveSpec::mlp(vec![784, 200, 200, 10], 1e-3).unwrap();
    let mut rng = derive_stream(42, "mnist-oracle", 0);
    let mut theta = spec.init_params(&mut rng);
    theta.axpy_assign(1.0, &random_vec(&mut rng, spec.dim(), 0.01)).unwrap();
    let data = (0..4 * 784).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch = Batch::new(DenseMatrix::new(4, 784, data).unwrap(), vec![3, 1, 4, 1]).unwrap();
    let (_, g) = models::loss_and_grad(&spec, &theta, &batch).unwrap();
    // Sample across every weight and bias block.
    let coords: Vec<usize> = (0..60).map(|_| rng.random_range(0..spec.dim())).collect();
    let fd = models::finite_diff_grad(|p| models::loss_value(&spec, p, &batch), &theta, 1e-6, Some(&coords)).unwrap();
    let e = rel_err(&g, &fd, &coords);
    assert!(e < TOL, "relative error {e:e}");
}
