//! Shared fixtures for the step benchmarks.

use rand::Rng;

use omsi_core::buffer::ReservoirBuffer;
use omsi_core::matrix::Matrix;
use omsi_core::nn::{LabeledBatch, MlpParams, SampleSource};
use omsi_core::rng::seeded;

/// Benchmark-sized model: one hidden layer over a 64-feature input.
pub fn bench_params() -> MlpParams {
    MlpParams::init(&[64, 256, 10], &mut seeded(1)).unwrap()
}

/// A deterministic batch of `n` pseudo-random rows.
pub fn bench_batch(n: usize, seed: u64) -> LabeledBatch {
    let mut rng = seeded(seed);
    let data: Vec<f64> = (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    LabeledBatch::new(
        Matrix::new(n, 64, data).unwrap(),
        labels,
        SampleSource::Stream,
    )
}

/// A buffer pre-filled past its capacity.
pub fn bench_buffer(capacity: usize) -> ReservoirBuffer {
    let mut buffer = ReservoirBuffer::new(capacity, 2);
    for chunk in 0..(capacity / 10 + 2) {
        buffer.update(&bench_batch(10, 100 + chunk as u64), false);
    }
    buffer
}
