//! Gradient verification suites.
//!
//! Two oracle comparisons over seeded random instances:
//! - analytic backprop against central finite differences over the
//!   parameters,
//! - the exact single-inner-step meta-gradient against central finite
//!   differences over the sample weights.
//!
//! Both must stay under the shared relative tolerance. `inject_fault`
//! deliberately corrupts one analytic value so harness failures are
//! detectable end to end.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::nn::{
    backward, finite_diff_grad, grad_rel_error, mlp_forward, weighted_ce_loss, LabeledBatch,
    MlpParams, SampleSource,
};
use crate::rng::{mix, seeded};
use crate::strategies::{meta_gradient, MetaGradMode, OmsiConfig, WeightVector};

pub const TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOutcome {
    pub instances: usize,
    pub backward_max_rel: f64,
    pub meta_max_rel: f64,
    pub tolerance: f64,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.backward_max_rel < self.tolerance && self.meta_max_rel < self.tolerance
    }
}

/// Runs both suites on `instances` random cases derived from `seed`.
pub fn verify_gradients(seed: u64, instances: usize, inject_fault: bool) -> Result<VerifyOutcome> {
    let mut backward_max = 0.0f64;
    let mut meta_max = 0.0f64;

    for i in 0..instances as u64 {
        let mut rng = seeded(mix(seed, 2 * i));
        let err = backward_instance(&mut rng, inject_fault && i == 0)?;
        backward_max = backward_max.max(err);

        let mut rng = seeded(mix(seed, 2 * i + 1));
        let err = meta_instance(&mut rng)?;
        meta_max = meta_max.max(err);
    }

    Ok(VerifyOutcome {
        instances,
        backward_max_rel: backward_max,
        meta_max_rel: meta_max,
        tolerance: TOLERANCE,
    })
}

fn random_sizes(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [
        rng.gen_range(2..=8),
        rng.gen_range(2..=16),
        rng.gen_range(2..=5),
    ]
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(n, d, data).expect("sized here")
}

fn backward_instance(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<f64> {
    let sizes = random_sizes(rng);
    let n = rng.gen_range(1..=8);
    let params = MlpParams::init(&sizes, rng)?;
    let inputs = random_inputs(rng, n, sizes[0]);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..sizes[2])).collect();
    // Weights cover the adapted regime too, where entries can go negative.
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, cache) = mlp_forward(&params, &inputs)?;
    let grads = backward(&params, &cache, &labels, &weights)?;
    let mut analytic = grads.flatten();
    if corrupt {
        analytic[0] += 1e-3;
    }

    let fd = finite_diff_grad(
        |p| {
            let (logits, _) = mlp_forward(p, &inputs).expect("same shapes");
            weighted_ce_loss(&logits, &labels, &weights).expect("same labels")
        },
        &params,
        FD_STEP,
    );

    let mut max_err = 0.0f64;
    for (a, r) in analytic.iter().zip(fd.flatten()) {
        max_err = max_err.max(grad_rel_error(*a, r));
    }
    Ok(max_err)
}

fn meta_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let sizes = random_sizes(rng);
    let combined_n = rng.gen_range(2..=8);
    let meta_n = rng.gen_range(2..=8);
    let params = MlpParams::init(&sizes, rng)?;
    let combined = LabeledBatch::new(
        random_inputs(rng, combined_n, sizes[0]),
        (0..combined_n).map(|_| rng.gen_range(0..sizes[2])).collect(),
        SampleSource::Stream,
    );
    let meta_batch = LabeledBatch::new(
        random_inputs(rng, meta_n, sizes[0]),
        (0..meta_n).map(|_| rng.gen_range(0..sizes[2])).collect(),
        SampleSource::Buffer,
    );
    let weights = WeightVector::uniform(combined_n);

    let exact_cfg = OmsiConfig::new(1.0, 1, 0.01, combined_n);
    let exact = meta_gradient(&params, &combined, &meta_batch, &weights, &exact_cfg)?;

    let mut fd_cfg = exact_cfg;
    fd_cfg.meta_grad_mode = MetaGradMode::FiniteDiff;
    let fd = meta_gradient(&params, &combined, &meta_batch, &weights, &fd_cfg)?;

    let mut max_err = 0.0f64;
    for (a, r) in exact.grad_w.iter().zip(&fd.grad_w) {
        max_err = max_err.max(grad_rel_error(*a, *r));
    }
    Ok(max_err)
}
