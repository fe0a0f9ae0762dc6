//! Online continual learning with meta-learned sample importance.
//!
//! The engine trains a small MLP over a class-incremental stream in which
//! every mini-batch is seen once. Besides plain fine-tuning and standard
//! experience replay, it implements a strategy that treats the per-sample
//! loss weights of each combined mini-batch as meta-parameters: a
//! simulated inner update followed by a proxy loss on buffer samples
//! yields a gradient on the weights, and the real update runs with the
//! adapted weights. Label-noise injection, clean-buffer bookkeeping, and
//! LA/RA evaluation support controlled robustness experiments.
//!
//! Modules follow the pipeline: [`matrix`] and [`nn`] provide the dense
//! math and exact gradients, [`streams`] builds noisy class-incremental
//! streams, [`buffer`] is the reservoir memory, [`strategies`] implements
//! the update rules and the stream runner, [`metrics`] evaluates, and
//! [`verify`] cross-checks every gradient path against finite differences.

pub mod buffer;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod strategies;
pub mod streams;
pub mod verify;

pub use buffer::ReservoirBuffer;
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use metrics::{ExperienceMetrics, RunRecord};
pub use nn::{GradientSet, LabeledBatch, MlpParams, PerSampleGrads, SampleSource};
pub use rng::Seeds;
pub use strategies::{
    FinalUpdateTarget, MetaGradMode, OmsiConfig, RunConfig, StepTrace, StrategyKind,
    WeightProjection, WeightVector,
};
pub use streams::{Dataset, Experience, NoiseSpec, NoisyParity, StreamSpec};
