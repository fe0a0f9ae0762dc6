//! Flat `key = value` experiment configuration.
//!
//! One file fully determines a run. Every default is materialized back
//! into the emitted snapshot, so the snapshot alone reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use omsi_core::rng::mix;
use omsi_core::strategies::{FinalUpdateTarget, MetaGradMode, StrategyKind, WeightProjection};
use omsi_core::streams::NoisyParity;
use omsi_core::Seeds;

/// Where the train/test data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// IDX image/label file pairs (the MNIST distribution format).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Seeded Gaussian blobs.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dims: usize,
        separation: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Classes per experience; the class count must divide evenly.
    pub classes_per_exp: usize,
    /// Keep only the first N experiences (0 = all).
    pub experiences_limit: usize,
    /// Subsample the train split to this many samples per class (0 = all).
    pub train_per_class: usize,
    pub batch_size: usize,
    pub passes: usize,
    pub hidden_sizes: Vec<usize>,
    pub lr: f64,
    pub strategy: StrategyKind,
    pub buffer_capacity: usize,
    /// Rows per buffer draw (0 = stream batch size).
    pub buffer_draw: usize,
    pub alpha: f64,
    pub k_inner: usize,
    pub final_update_target: FinalUpdateTarget,
    pub weight_projection: WeightProjection,
    pub meta_grad_mode: MetaGradMode,
    pub noise_fraction: f64,
    pub noisy_parity: NoisyParity,
    pub clean_buffer: bool,
    pub trace_weights: bool,
    pub repetitions: usize,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got `{raw}`", lineno + 1);
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if pairs.insert(key.clone(), value).is_some() {
                bail!("line {}: duplicate key `{key}`", lineno + 1);
            }
        }
        Self::from_pairs(pairs, base_dir)
    }

    fn from_pairs(mut pairs: BTreeMap<String, String>, base_dir: &Path) -> Result<Self> {
        let mut take = |key: &str| pairs.remove(key);
        let dataset_kind = take("dataset").unwrap_or_else(|| "idx".to_string());
        let dataset = match dataset_kind.as_str() {
            "idx" => {
                let mut path_of = |key: &str| -> Result<PathBuf> {
                    let raw = take(key).with_context(|| format!("missing `{key}` for dataset = idx"))?;
                    let p = base_dir.join(raw);
                    if !p.exists() {
                        bail!("{key} file {} does not exist", p.display());
                    }
                    Ok(p)
                };
                DatasetSource::Idx {
                    train_images: path_of("train_images")?,
                    train_labels: path_of("train_labels")?,
                    test_images: path_of("test_images")?,
                    test_labels: path_of("test_labels")?,
                }
            }
            "synthetic" => DatasetSource::Synthetic {
                classes: parse_or(&mut take, "synthetic_classes", 4)?,
                train_per_class: parse_or(&mut take, "synthetic_train_per_class", 50)?,
                test_per_class: parse_or(&mut take, "synthetic_test_per_class", 10)?,
                dims: parse_or(&mut take, "synthetic_dims", 8)?,
                separation: parse_or(&mut take, "synthetic_separation", 6.0)?,
                seed: parse_or(&mut take, "synthetic_seed", 1)?,
            },
            other => bail!("dataset must be `idx` or `synthetic`, got `{other}`"),
        };

        let base_seed: u64 = parse_or(&mut take, "seed", 0)?;
        let derived = Seeds::from_base(base_seed);
        let seeds = Seeds {
            model_init: parse_or(&mut take, "seed_model_init", derived.model_init)?,
            shuffle: parse_or(&mut take, "seed_shuffle", derived.shuffle)?,
            noise: parse_or(&mut take, "seed_noise", derived.noise)?,
            buffer: parse_or(&mut take, "seed_buffer", derived.buffer)?,
            sampling: parse_or(&mut take, "seed_sampling", derived.sampling)?,
            class_order: parse_or(&mut take, "seed_class_order", derived.class_order)?,
        };

        let hidden_sizes = match take("hidden_sizes") {
            None => vec![256],
            Some(raw) if raw.is_empty() => Vec::new(),
            Some(raw) => raw
                .split(',')
                .map(|s| s.trim().parse::<usize>().context("bad hidden size"))
                .collect::<Result<Vec<_>>>()?,
        };

        let cfg = ExperimentConfig {
            dataset,
            classes_per_exp: parse_or(&mut take, "classes_per_exp", 2)?,
            experiences_limit: parse_or(&mut take, "experiences_limit", 0)?,
            train_per_class: parse_or(&mut take, "train_per_class", 0)?,
            batch_size: parse_or(&mut take, "batch_size", 10)?,
            passes: parse_or(&mut take, "passes", 1)?,
            hidden_sizes,
            lr: parse_or(&mut take, "lr", 0.01)?,
            strategy: parse_strategy(&take("strategy").unwrap_or_else(|| "er".to_string()))?,
            buffer_capacity: parse_or(&mut take, "buffer_capacity", 200)?,
            buffer_draw: parse_or(&mut take, "buffer_draw", 0)?,
            alpha: parse_or(&mut take, "alpha", 0.0)?,
            k_inner: parse_or(&mut take, "k_inner", 1)?,
            final_update_target: parse_target(
                &take("final_update_target").unwrap_or_else(|| "combined".to_string()),
            )?,
            weight_projection: parse_projection(
                &take("weight_projection").unwrap_or_else(|| "none".to_string()),
            )?,
            meta_grad_mode: parse_mode(
                &take("meta_grad_mode").unwrap_or_else(|| "exact_k1".to_string()),
            )?,
            noise_fraction: parse_or(&mut take, "noise_fraction", 0.0)?,
            noisy_parity: parse_parity(&take("noisy_parity").unwrap_or_else(|| "none".to_string()))?,
            clean_buffer: parse_or(&mut take, "clean_buffer", false)?,
            trace_weights: parse_or(&mut take, "trace_weights", false)?,
            repetitions: parse_or(&mut take, "repetitions", 1)?,
            seeds,
            output_dir: base_dir.join(take("output_dir").unwrap_or_else(|| "out".to_string())),
        };

        if let Some(unknown) = pairs.keys().next() {
            bail!("unknown configuration key `{unknown}`");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!("batch_size must be >= 1");
        }
        if self.passes == 0 {
            bail!("passes must be >= 1");
        }
        if self.repetitions == 0 {
            bail!("repetitions must be >= 1");
        }
        if self.classes_per_exp == 0 {
            bail!("classes_per_exp must be >= 1");
        }
        if self.lr <= 0.0 {
            bail!("lr must be > 0");
        }
        if self.alpha < 0.0 {
            bail!("alpha must be >= 0");
        }
        if self.buffer_capacity == 0 {
            bail!("buffer_capacity must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            bail!("noise_fraction must lie in [0, 1]");
        }
        if self.meta_grad_mode == MetaGradMode::ExactK1 && self.k_inner != 1 {
            bail!("meta_grad_mode = exact_k1 requires k_inner = 1");
        }
        if let DatasetSource::Synthetic { classes, dims, .. } = &self.dataset {
            if *classes < 2 {
                bail!("synthetic_classes must be >= 2");
            }
            if dims < classes {
                bail!("synthetic_dims must be >= synthetic_classes");
            }
        }
        Ok(())
    }

    /// Buffer draw size with the default applied.
    pub fn resolved_buffer_draw(&self) -> usize {
        if self.buffer_draw == 0 {
            self.batch_size
        } else {
            self.buffer_draw
        }
    }

    /// Seed for the per-repetition train subsample.
    pub fn subsample_seed(&self, rep_seeds: &Seeds) -> u64 {
        mix(rep_seeds.shuffle, 0x7375_6273)
    }

    /// The fully materialized configuration, every key explicit.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        match &self.dataset {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                writeln!(s, "dataset = idx").unwrap();
                writeln!(s, "train_images = {}", train_images.display()).unwrap();
                writeln!(s, "train_labels = {}", train_labels.display()).unwrap();
                writeln!(s, "test_images = {}", test_images.display()).unwrap();
                writeln!(s, "test_labels = {}", test_labels.display()).unwrap();
            }
            DatasetSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                dims,
                separation,
                seed,
            } => {
                writeln!(s, "dataset = synthetic").unwrap();
                writeln!(s, "synthetic_classes = {classes}").unwrap();
                writeln!(s, "synthetic_train_per_class = {train_per_class}").unwrap();
                writeln!(s, "synthetic_test_per_class = {test_per_class}").unwrap();
                writeln!(s, "synthetic_dims = {dims}").unwrap();
                writeln!(s, "synthetic_separation = {separation}").unwrap();
                writeln!(s, "synthetic_seed = {seed}").unwrap();
            }
        }
        writeln!(s, "classes_per_exp = {}", self.classes_per_exp).unwrap();
        writeln!(s, "experiences_limit = {}", self.experiences_limit).unwrap();
        writeln!(s, "train_per_class = {}", self.train_per_class).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "passes = {}", self.passes).unwrap();
        let hidden: Vec<String> = self.hidden_sizes.iter().map(|h| h.to_string()).collect();
        writeln!(s, "hidden_sizes = {}", hidden.join(",")).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "strategy = {}", strategy_name(self.strategy)).unwrap();
        writeln!(s, "buffer_capacity = {}", self.buffer_capacity).unwrap();
        writeln!(s, "buffer_draw = {}", self.buffer_draw).unwrap();
        writeln!(s, "alpha = {}", self.alpha).unwrap();
        writeln!(s, "k_inner = {}", self.k_inner).unwrap();
        writeln!(
            s,
            "final_update_target = {}",
            match self.final_update_target {
                FinalUpdateTarget::Combined => "combined",
                FinalUpdateTarget::StreamOnly => "stream_only",
            }
        )
        .unwrap();
        writeln!(
            s,
            "weight_projection = {}",
            match self.weight_projection {
                WeightProjection::None => "none",
                WeightProjection::ClampNonneg => "clamp_nonneg",
            }
        )
        .unwrap();
        writeln!(
            s,
            "meta_grad_mode = {}",
            match self.meta_grad_mode {
                MetaGradMode::ExactK1 => "exact_k1",
                MetaGradMode::FirstOrder => "first_order",
                MetaGradMode::FiniteDiff => "finite_diff",
            }
        )
        .unwrap();
        writeln!(s, "noise_fraction = {}", self.noise_fraction).unwrap();
        writeln!(
            s,
            "noisy_parity = {}",
            match self.noisy_parity {
                NoisyParity::Even => "even",
                NoisyParity::Odd => "odd",
                NoisyParity::None => "none",
            }
        )
        .unwrap();
        writeln!(s, "clean_buffer = {}", self.clean_buffer).unwrap();
        writeln!(s, "trace_weights = {}", self.trace_weights).unwrap();
        writeln!(s, "repetitions = {}", self.repetitions).unwrap();
        writeln!(s, "seed_model_init = {}", self.seeds.model_init).unwrap();
        writeln!(s, "seed_shuffle = {}", self.seeds.shuffle).unwrap();
        writeln!(s, "seed_noise = {}", self.seeds.noise).unwrap();
        writeln!(s, "seed_buffer = {}", self.seeds.buffer).unwrap();
        writeln!(s, "seed_sampling = {}", self.seeds.sampling).unwrap();
        writeln!(s, "seed_class_order = {}", self.seeds.class_order).unwrap();
        writeln!(s, "output_dir = {}", self.output_dir.display()).unwrap();
        s
    }
}

fn strategy_name(s: StrategyKind) -> &'static str {
    match s {
        StrategyKind::Naive => "naive",
        StrategyKind::Er => "er",
        StrategyKind::Omsi => "omsi",
    }
}

fn parse_strategy(raw: &str) -> Result<StrategyKind> {
    match raw {
        "naive" => Ok(StrategyKind::Naive),
        "er" => Ok(StrategyKind::Er),
        "omsi" => Ok(StrategyKind::Omsi),
        other => bail!("strategy must be naive | er | omsi, got `{other}`"),
    }
}

fn parse_target(raw: &str) -> Result<FinalUpdateTarget> {
    match raw {
        "combined" => Ok(FinalUpdateTarget::Combined),
        "stream_only" => Ok(FinalUpdateTarget::StreamOnly),
        other => bail!("final_update_target must be combined | stream_only, got `{other}`"),
    }
}

fn parse_projection(raw: &str) -> Result<WeightProjection> {
    match raw {
        "none" => Ok(WeightProjection::None),
        "clamp_nonneg" => Ok(WeightProjection::ClampNonneg),
        other => bail!("weight_projection must be none | clamp_nonneg, got `{other}`"),
    }
}

fn parse_mode(raw: &str) -> Result<MetaGradMode> {
    match raw {
        "exact_k1" => Ok(MetaGradMode::ExactK1),
        "first_order" => Ok(MetaGradMode::FirstOrder),
        "finite_diff" => Ok(MetaGradMode::FiniteDiff),
        other => bail!("meta_grad_mode must be exact_k1 | first_order | finite_diff, got `{other}`"),
    }
}

fn parse_parity(raw: &str) -> Result<NoisyParity> {
    match raw {
        "even" => Ok(NoisyParity::Even),
        "odd" => Ok(NoisyParity::Odd),
        "none" => Ok(NoisyParity::None),
        other => bail!("noisy_parity must be even | odd | none, got `{other}`"),
    }
}

fn parse_or<T: std::str::FromStr>(
    take: &mut impl FnMut(&str) -> Option<String>,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    match take(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .with_context(|| format!("invalid value for `{key}`: `{raw}`")),
    }
}
