//! Training strategies for the online stream.
//!
//! Three strategies share one SGD primitive:
//! - `naive`: uniform-weight step on the stream batch alone,
//! - `er`: uniform-weight step on the stream batch combined with a buffer
//!   draw (standard experience replay),
//! - `omsi`: before the real update, a simulated inner update on a copy of
//!   the model estimates how much each sample of the combined batch helps
//!   or hurts a proxy loss computed on buffer samples; the per-sample loss
//!   weights are moved against that meta-gradient and the real update then
//!   uses the adapted weights.
//!
//! The weight vector is reset to uniform `1/B` at every step; no weight
//! state crosses steps. The final update always starts from the pre-step
//! parameters, never from the inner-adapted copy.

use rand_chacha::ChaCha8Rng;

use crate::buffer::ReservoirBuffer;
use crate::error::{Error, Result};
use crate::metrics::{self, ExperienceMetrics, RunRecord};
use crate::nn::{
    backward, mlp_forward, per_sample_grads_cached, sgd_step, weighted_ce_loss, LabeledBatch,
    MlpParams, SampleSource,
};
use crate::rng::{mix, seeded, Seeds};
use crate::streams::{batch_iter, inject_label_noise, NoiseSpec, StreamSpec};

/// Tag that separates the meta-batch draw stream from the replay draw
/// stream. Keeping them apart means an `alpha = 0` OMSI run consumes the
/// shared streams exactly like ER does.
const META_STREAM_TAG: u64 = 0x6d65_7461;

/// Finite-difference step used by the meta-gradient oracle.
const META_FD_STEP: f64 = 1e-5;

/// Per-sample loss weights for one combined mini-batch. Reset to uniform
/// `1/B` at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "weight vector needs at least one sample");
        WeightVector {
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        WeightVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One SGD step on the weights: `w - alpha * grad`, then projection.
    pub fn meta_update(
        &self,
        grad: &[f64],
        alpha: f64,
        projection: WeightProjection,
    ) -> WeightVector {
        debug_assert_eq!(grad.len(), self.values.len());
        let values = self
            .values
            .iter()
            .zip(grad)
            .map(|(w, g)| {
                let v = w - alpha * g;
                match projection {
                    WeightProjection::None => v,
                    WeightProjection::ClampNonneg => v.max(0.0),
                }
            })
            .collect();
        WeightVector { values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalUpdateTarget {
    /// Update on the combined batch with the full adapted weight vector.
    Combined,
    /// Update on the stream batch only, slicing the adapted weights to the
    /// stream entries.
    StreamOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightProjection {
    None,
    /// Clamp adapted weights at zero so no sample's gradient is reversed.
    ClampNonneg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaGradMode {
    /// Exact derivative; valid only for a single inner step, where the
    /// adapted parameters are linear in the weights.
    ExactK1,
    /// First-order approximation for any number of inner steps.
    FirstOrder,
    /// Central differences over each weight, re-running the inner loop.
    /// Test oracle.
    FiniteDiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmsiConfig {
    /// Meta learning rate on the sample weights.
    pub alpha: f64,
    /// Number of simulated inner updates.
    pub k_inner: usize,
    /// Model learning rate, used by both the inner and the final update.
    pub lr: f64,
    /// Rows per buffer draw.
    pub buffer_draw: usize,
    pub final_update_target: FinalUpdateTarget,
    pub weight_projection: WeightProjection,
    pub meta_grad_mode: MetaGradMode,
}

impl OmsiConfig {
    pub fn new(alpha: f64, k_inner: usize, lr: f64, buffer_draw: usize) -> Self {
        OmsiConfig {
            alpha,
            k_inner,
            lr,
            buffer_draw,
            final_update_target: FinalUpdateTarget::Combined,
            weight_projection: WeightProjection::None,
            meta_grad_mode: if k_inner == 1 {
                MetaGradMode::ExactK1
            } else {
                MetaGradMode::FirstOrder
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.buffer_draw == 0 {
            return Err(Error::Config("buffer draw must be >= 1".to_string()));
        }
        if self.meta_grad_mode == MetaGradMode::ExactK1 && self.k_inner != 1 {
            return Err(Error::Config(format!(
                "exact meta-gradient requires exactly one inner step, got {}",
                self.k_inner
            )));
        }
        Ok(())
    }
}

/// Everything `omsi_step` records about one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub global_batch_index: usize,
    pub experience: usize,
    pub weights_before: Vec<f64>,
    pub weights_after: Vec<f64>,
    pub source_mask: Vec<SampleSource>,
    pub noisy: Vec<bool>,
    pub inner_losses: Vec<f64>,
    pub meta_loss: f64,
}

/// Receives step traces during a run.
pub trait TraceSink {
    fn record(&mut self, trace: StepTrace);
}

/// Discards everything.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: StepTrace) {}
}

impl TraceSink for Vec<StepTrace> {
    fn record(&mut self, trace: StepTrace) {
        self.push(trace);
    }
}

/// Result of the meta-gradient computation.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// Derivative of the meta-loss with respect to each sample weight.
    pub grad_w: Vec<f64>,
    /// Parameters after the simulated inner updates.
    pub adapted: MlpParams,
    /// Weighted loss on the combined batch at each inner step's entry.
    pub inner_losses: Vec<f64>,
    /// Mean cross-entropy of the adapted model on the meta-batch.
    pub meta_loss: f64,
}

/// One uniform-weight SGD step on the given batch.
pub fn naive_step(params: &MlpParams, batch: &LabeledBatch, lr: f64) -> Result<MlpParams> {
    let weights = WeightVector::uniform(batch.len());
    weighted_update(params, batch, weights.values(), lr)
}

/// Standard experience replay: one uniform-weight step on the stream batch
/// combined with a buffer draw, then the buffer absorbs the stream batch.
pub fn er_step(
    params: &MlpParams,
    stream_batch: &LabeledBatch,
    buffer: &mut ReservoirBuffer,
    draw: usize,
    lr: f64,
    clean_buffer: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MlpParams> {
    let replay = buffer.sample(draw, rng, params.input_dim());
    let combined = stream_batch.concat(&replay)?;
    let next = naive_step(params, &combined, lr)?;
    buffer.update(stream_batch, clean_buffer);
    Ok(next)
}

/// Runs the simulated inner updates and differentiates the resulting
/// meta-loss with respect to the sample weights.
///
/// The adapted parameters are a copy; the caller's parameters are never
/// touched. For a single inner step the adapted parameters are linear in
/// the weights, so `ExactK1` computes the exact derivative
/// `-lr * <grad meta-loss at adapted, per-sample gradient at entry>`.
pub fn meta_gradient(
    params: &MlpParams,
    combined: &LabeledBatch,
    meta_batch: &LabeledBatch,
    weights: &WeightVector,
    cfg: &OmsiConfig,
) -> Result<MetaGradient> {
    cfg.validate()?;
    if combined.is_empty() {
        return Err(Error::Config("combined batch is empty".to_string()));
    }
    if meta_batch.is_empty() {
        return Err(Error::Config("meta-batch is empty".to_string()));
    }
    if weights.len() != combined.len() {
        return Err(Error::Shape(format!(
            "{} weights for a combined batch of {}",
            weights.len(),
            combined.len()
        )));
    }

    let (adapted, inner_losses, entries) = inner_adapt(params, combined, weights.values(), cfg)?;
    let meta_loss = mean_ce(&adapted, meta_batch)?;

    let grad_w = match cfg.meta_grad_mode {
        MetaGradMode::ExactK1 | MetaGradMode::FirstOrder => {
            let meta_grad_flat = mean_ce_gradient(&adapted, meta_batch)?;
            let mut grad_w = vec![0.0; combined.len()];
            for entry in &entries {
                let (_, cache) = mlp_forward(entry, &combined.inputs)?;
                let rows = per_sample_grads_cached(entry, &cache, &combined.labels)?;
                for (k, slot) in grad_w.iter_mut().enumerate() {
                    let dot: f64 = rows
                        .grads
                        .row(k)
                        .iter()
                        .zip(&meta_grad_flat)
                        .map(|(g, m)| g * m)
                        .sum();
                    *slot -= cfg.lr * dot;
                }
            }
            grad_w
        }
        MetaGradMode::FiniteDiff => {
            let mut grad_w = vec![0.0; combined.len()];
            for (k, slot) in grad_w.iter_mut().enumerate() {
                let mut plus = weights.values().to_vec();
                plus[k] += META_FD_STEP;
                let (theta_plus, _, _) = inner_adapt(params, combined, &plus, cfg)?;
                let loss_plus = mean_ce(&theta_plus, meta_batch)?;

                let mut minus = weights.values().to_vec();
                minus[k] -= META_FD_STEP;
                let (theta_minus, _, _) = inner_adapt(params, combined, &minus, cfg)?;
                let loss_minus = mean_ce(&theta_minus, meta_batch)?;

                *slot = (loss_plus - loss_minus) / (2.0 * META_FD_STEP);
            }
            grad_w
        }
    };

    Ok(MetaGradient {
        grad_w,
        adapted,
        inner_losses,
        meta_loss,
    })
}

/// Position of a step within the run, carried into traces.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub global_batch_index: usize,
    pub experience: usize,
}

/// One full OMSI iteration on a stream batch.
///
/// Draws the replay batch, estimates the meta-gradient against a fresh
/// proxy draw, adapts the weights, applies the final update from the
/// pre-step parameters, and lets the buffer absorb the stream batch. With
/// an empty buffer the step degrades to a plain uniform step.
#[allow(clippy::too_many_arguments)]
pub fn omsi_step(
    params: &MlpParams,
    stream_batch: &LabeledBatch,
    buffer: &mut ReservoirBuffer,
    cfg: &OmsiConfig,
    clean_buffer: bool,
    sampling_rng: &mut ChaCha8Rng,
    meta_rng: &mut ChaCha8Rng,
    step: StepInfo,
    trace_sink: &mut dyn TraceSink,
) -> Result<MlpParams> {
    cfg.validate()?;
    let replay = buffer.sample(cfg.buffer_draw, sampling_rng, params.input_dim());
    let next = if replay.is_empty() {
        naive_step(params, stream_batch, cfg.lr)?
    } else {
        let combined = stream_batch.concat(&replay)?;
        let weights = WeightVector::uniform(combined.len());

        let proxy = buffer.sample(cfg.buffer_draw, meta_rng, params.input_dim());
        let meta_batch = replay.concat(&proxy)?;
        let meta = meta_gradient(params, &combined, &meta_batch, &weights, cfg)?;
        let w_star = weights.meta_update(&meta.grad_w, cfg.alpha, cfg.weight_projection);

        let next = match cfg.final_update_target {
            FinalUpdateTarget::Combined => {
                weighted_update(params, &combined, w_star.values(), cfg.lr)?
            }
            FinalUpdateTarget::StreamOnly => weighted_update(
                params,
                stream_batch,
                &w_star.values()[..stream_batch.len()],
                cfg.lr,
            )?,
        };

        trace_sink.record(StepTrace {
            global_batch_index: step.global_batch_index,
            experience: step.experience,
            weights_before: weights.values().to_vec(),
            weights_after: w_star.values().to_vec(),
            source_mask: combined.source_mask.clone(),
            noisy: combined.noisy_flags(),
            inner_losses: meta.inner_losses,
            meta_loss: meta.meta_loss,
        });
        next
    };
    buffer.update(stream_batch, clean_buffer);
    Ok(next)
}

/// Which strategy drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Naive,
    Er,
    Omsi,
}

/// Full configuration of a single training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub strategy: StrategyKind,
    pub omsi: OmsiConfig,
    /// Hidden layer widths; the input and output widths come from the data.
    pub hidden_sizes: Vec<usize>,
    pub buffer_capacity: usize,
    /// Store pre-noise labels in the buffer (the controlled-experiment
    /// assumption).
    pub clean_buffer: bool,
    pub collect_traces: bool,
    pub seeds: Seeds,
    /// Carried verbatim into the run record.
    pub config_snapshot: String,
}

impl RunConfig {
    pub fn new(strategy: StrategyKind, omsi: OmsiConfig, buffer_capacity: usize, seeds: Seeds) -> Self {
        RunConfig {
            strategy,
            omsi,
            hidden_sizes: vec![256],
            buffer_capacity,
            clean_buffer: false,
            collect_traces: false,
            seeds,
            config_snapshot: String::new(),
        }
    }
}

/// Trains over the whole stream, one pass per configuration, evaluating
/// learning accuracy and retained accuracy after each experience.
pub fn run_stream(
    spec: &StreamSpec,
    noise: &NoiseSpec,
    cfg: &RunConfig,
    mut eval_hook: Option<&mut dyn FnMut(&ExperienceMetrics)>,
) -> Result<RunRecord> {
    cfg.omsi.validate()?;
    let start = std::time::Instant::now();
    let class_count = spec.class_count();
    let mut layer_sizes = vec![spec.feature_dim()];
    layer_sizes.extend_from_slice(&cfg.hidden_sizes);
    layer_sizes.push(class_count);

    let mut params = MlpParams::init(&layer_sizes, &mut seeded(cfg.seeds.model_init))?;
    let mut buffer = ReservoirBuffer::new(cfg.buffer_capacity, cfg.seeds.buffer);
    let mut sampling_rng = seeded(cfg.seeds.sampling);
    let mut meta_rng = seeded(mix(cfg.seeds.sampling, META_STREAM_TAG));

    let mut traces: Vec<StepTrace> = Vec::new();
    let mut per_experience = Vec::with_capacity(spec.experiences.len());

    for exp_index in 0..spec.experiences.len() {
        for (global, raw_batch) in batch_iter(spec, exp_index)? {
            let batch = inject_label_noise(&raw_batch, global, noise, class_count);
            params = match cfg.strategy {
                StrategyKind::Naive => naive_step(&params, &batch, cfg.omsi.lr)?,
                StrategyKind::Er => er_step(
                    &params,
                    &batch,
                    &mut buffer,
                    cfg.omsi.buffer_draw,
                    cfg.omsi.lr,
                    cfg.clean_buffer,
                    &mut sampling_rng,
                )?,
                StrategyKind::Omsi => {
                    let info = StepInfo {
                        global_batch_index: global,
                        experience: exp_index,
                    };
                    if cfg.collect_traces {
                        omsi_step(
                            &params,
                            &batch,
                            &mut buffer,
                            &cfg.omsi,
                            cfg.clean_buffer,
                            &mut sampling_rng,
                            &mut meta_rng,
                            info,
                            &mut traces,
                        )?
                    } else {
                        omsi_step(
                            &params,
                            &batch,
                            &mut buffer,
                            &cfg.omsi,
                            cfg.clean_buffer,
                            &mut sampling_rng,
                            &mut meta_rng,
                            info,
                            &mut NullSink,
                        )?
                    }
                }
            };
        }

        let la = metrics::learning_accuracy(&params, &spec.experiences[exp_index])?;
        let ra = metrics::retained_accuracy(&params, &spec.experiences[..=exp_index])?;
        let entry = ExperienceMetrics {
            experience: exp_index,
            la,
            ra,
        };
        if let Some(hook) = eval_hook.as_deref_mut() {
            hook(&entry);
        }
        per_experience.push(entry);
    }

    Ok(RunRecord {
        per_experience,
        step_traces: traces,
        config_snapshot: cfg.config_snapshot.clone(),
        seeds: cfg.seeds,
        duration: start.elapsed(),
    })
}

/// Forward, weighted backward, SGD; shared by every strategy.
fn weighted_update(
    params: &MlpParams,
    batch: &LabeledBatch,
    weights: &[f64],
    lr: f64,
) -> Result<MlpParams> {
    let (_, cache) = mlp_forward(params, &batch.inputs)?;
    let grads = backward(params, &cache, &batch.labels, weights)?;
    Ok(sgd_step(params, &grads, lr))
}

/// Simulated inner loop: `k_inner` weighted SGD steps on a copy.
/// Returns the adapted copy, the loss at each step's entry, and the entry
/// parameters themselves (needed by the first-order meta-gradient).
fn inner_adapt(
    params: &MlpParams,
    combined: &LabeledBatch,
    weights: &[f64],
    cfg: &OmsiConfig,
) -> Result<(MlpParams, Vec<f64>, Vec<MlpParams>)> {
    let mut theta = params.clone();
    let mut inner_losses = Vec::with_capacity(cfg.k_inner);
    let mut entries = Vec::with_capacity(cfg.k_inner);
    for _ in 0..cfg.k_inner {
        let (logits, cache) = mlp_forward(&theta, &combined.inputs)?;
        inner_losses.push(weighted_ce_loss(&logits, &combined.labels, weights)?);
        let grads = backward(&theta, &cache, &combined.labels, weights)?;
        let next = sgd_step(&theta, &grads, cfg.lr);
        entries.push(theta);
        theta = next;
    }
    Ok((theta, inner_losses, entries))
}

fn mean_ce(params: &MlpParams, batch: &LabeledBatch) -> Result<f64> {
    let (logits, _) = mlp_forward(params, &batch.inputs)?;
    let n = batch.len();
    weighted_ce_loss(&logits, &batch.labels, &vec![1.0 / n as f64; n])
}

fn mean_ce_gradient(params: &MlpParams, batch: &LabeledBatch) -> Result<Vec<f64>> {
    let (_, cache) = mlp_forward(params, &batch.inputs)?;
    let n = batch.len();
    let grads = backward(params, &cache, &batch.labels, &vec![1.0 / n as f64; n])?;
    Ok(grads.flatten())
}
