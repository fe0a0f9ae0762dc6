//! Builds streams from a configuration and executes the repetitions.

use anyhow::{Context, Result};
use rayon::prelude::*;

use omsi_core::strategies::{run_stream, OmsiConfig, RunConfig};
use omsi_core::streams::{
    load_idx, make_synthetic_blobs, split_by_classes, NoiseSpec, StreamSpec,
};
use omsi_core::{Dataset, RunRecord, Seeds, StrategyKind};

use crate::config::{DatasetSource, ExperimentConfig};

/// Train and test splits an experiment draws from.
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    match &cfg.dataset {
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)
                .with_context(|| format!("loading {}", train_images.display()))?;
            let test = load_idx(test_images, test_labels)
                .with_context(|| format!("loading {}", test_images.display()))?;
            Ok(ExperimentData { train, test })
        }
        DatasetSource::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            dims,
            separation,
            seed,
        } => {
            let all = make_synthetic_blobs(
                *classes,
                train_per_class + test_per_class,
                *dims,
                *separation,
                *seed,
            );
            let (train, test) = all.split_train_test(*test_per_class, seed.wrapping_add(1))?;
            Ok(ExperimentData { train, test })
        }
    }
}

/// Stream and noise spec for one repetition.
pub fn build_stream(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    rep_seeds: &Seeds,
) -> Result<(StreamSpec, NoiseSpec)> {
    let train = if cfg.train_per_class > 0 {
        data.train
            .subsample_per_class(cfg.train_per_class, cfg.subsample_seed(rep_seeds))?
    } else {
        data.train.clone()
    };
    let mut experiences =
        split_by_classes(&train, &data.test, cfg.classes_per_exp, rep_seeds.class_order)?;
    if cfg.experiences_limit > 0 {
        experiences.truncate(cfg.experiences_limit);
    }
    let spec = StreamSpec::new(experiences, cfg.batch_size, cfg.passes, rep_seeds.shuffle)?;
    let noise = NoiseSpec::new(cfg.noise_fraction, cfg.noisy_parity, rep_seeds.noise)?;
    Ok((spec, noise))
}

fn run_config(cfg: &ExperimentConfig, rep_seeds: Seeds) -> RunConfig {
    let mut omsi = OmsiConfig::new(
        cfg.alpha,
        cfg.k_inner,
        cfg.lr,
        cfg.resolved_buffer_draw(),
    );
    omsi.final_update_target = cfg.final_update_target;
    omsi.weight_projection = cfg.weight_projection;
    omsi.meta_grad_mode = cfg.meta_grad_mode;
    RunConfig {
        strategy: cfg.strategy,
        omsi,
        hidden_sizes: cfg.hidden_sizes.clone(),
        buffer_capacity: cfg.buffer_capacity,
        clean_buffer: cfg.clean_buffer,
        collect_traces: cfg.trace_weights && cfg.strategy == StrategyKind::Omsi,
        seeds: rep_seeds,
        config_snapshot: cfg.snapshot(),
    }
}

/// Executes all repetitions, in parallel when a rayon pool is installed.
/// Record order matches repetition order regardless of scheduling.
pub fn execute(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<RunRecord>> {
    (0..cfg.repetitions as u64)
        .into_par_iter()
        .map(|rep| {
            let rep_seeds = cfg.seeds.for_repetition(rep);
            let (spec, noise) = build_stream(cfg, data, &rep_seeds)?;
            let record = run_stream(&spec, &noise, &run_config(cfg, rep_seeds), None)?;
            Ok(record)
        })
        .collect()
}
