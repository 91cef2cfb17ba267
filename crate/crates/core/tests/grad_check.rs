//! Central finite-difference check of the exact per-example gradients,
//! over every parameter of a small model.

use domainpriv_core::corpus::TokenSequence;
use domainpriv_core::lm::{loss, per_example_grads, Batch, LmDims, TinyLmParams};
use domainpriv_core::seeding;
use domainpriv_core::vocab::DomainId;
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;

fn random_seq(len: usize, vocab: usize, seed: u64) -> TokenSequence {
    let mut rng = seeding::stream(seed, "fd-seq", 0);
    TokenSequence::new(
        (0..len)
            .map(|_| rng.random_range(0..vocab as u32))
            .collect(),
        DomainId(0),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn gradients_match_finite_differences_on_every_parameter() {
    let dims = LmDims {
        vocab: 30,
        window: 4,
        embed: 8,
        hidden: 16,
    };
    let mut params = TinyLmParams::init(dims, 42);
    let seqs = [random_seq(10, 30, 1), random_seq(10, 30, 2)];
    let batch = Batch::new(&seqs).unwrap();

    let grads = per_example_grads(&params, &batch).unwrap();
    let n = params.data.len();
    let mean_grad: Vec<f64> = (0..n)
        .map(|i| grads.iter().map(|g| g[i]).sum::<f64>() / grads.len() as f64)
        .collect();

    let mut worst = 0.0f64;
    let mut worst_idx = 0;
    for (i, &analytic) in mean_grad.iter().enumerate() {
        let orig = params.data[i];
        params.data[i] = orig + FD_STEP;
        let plus = loss(&params, &batch).unwrap();
        params.data[i] = orig - FD_STEP;
        let minus = loss(&params, &batch).unwrap();
        params.data[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_err(analytic, fd);
        if err > worst {
            worst = err;
            worst_idx = i;
        }
    }
    assert!(
        worst <= MAX_REL_ERR,
        "max relative error {worst} at parameter {worst_idx} (of {n})"
    );
}

#[test]
fn per_example_gradient_matches_finite_differences_of_its_own_loss() {
    // Same check at the granularity the DP optimizer consumes: one
    // example's gradient against that example's loss alone.
    let dims = LmDims {
        vocab: 20,
        window: 3,
        embed: 5,
        hidden: 7,
    };
    let mut params = TinyLmParams::init(dims, 7);
    let seqs = [random_seq(8, 20, 3)];
    let batch = Batch::new(&seqs).unwrap();
    let grad = &per_example_grads(&params, &batch).unwrap()[0];

    for i in (0..params.data.len()).step_by(3) {
        let orig = params.data[i];
        params.data[i] = orig + FD_STEP;
        let plus = loss(&params, &batch).unwrap();
        params.data[i] = orig - FD_STEP;
        let minus = loss(&params, &batch).unwrap();
        params.data[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        assert!(
            rel_err(grad[i], fd) <= MAX_REL_ERR,
            "param {i}: analytic {} vs fd {fd}",
            grad[i]
        );
    }
}
