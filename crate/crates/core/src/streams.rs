//! Data streams for online class-incremental training.
//!
//! A stream is an ordered list of experiences, each holding a train and a
//! test split over a disjoint subset of classes. Training sees every
//! mini-batch exactly once (unless extra passes are requested); there are
//! no task labels. Label noise, when enabled, hits batches of one parity
//! and always records the pre-noise ground truth.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{LabeledBatch, SampleSource};
use crate::rng::{mix, seeded};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// A labeled dataset: `inputs` is `M x d`, labels index into
/// `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::Consistency("empty dataset".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label: bad,
                class_count,
            });
        }
        Ok(Dataset {
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

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows whose label passes the filter, preserving order.
    fn filter_by_class(&self, keep: &BTreeSet<usize>) -> Option<Dataset> {
        let idx: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| keep.contains(l))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return None;
        }
        Some(Dataset {
            inputs: self.inputs.gather_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Keeps at most `per_class` samples of each class, chosen uniformly
    /// under `seed`. Used to shrink benchmarks to desk scale.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::Config("per-class subsample must be >= 1".to_string()));
        }
        let mut rng = seeded(seed);
        let mut chosen = Vec::new();
        for class in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            idx.sort_unstable();
            chosen.extend(idx);
        }
        chosen.sort_unstable();
        Dataset::new(
            self.inputs.gather_rows(&chosen),
            chosen.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    /// Splits off `test_per_class` samples of each class into a test set,
    /// leaving the rest as train.
    pub fn split_train_test(&self, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut rng = seeded(seed);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for class in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            if idx.len() <= test_per_class {
                return Err(Error::Config(format!(
                    "class {class} has {} samples, cannot hold out {test_per_class}",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            test_idx.extend(idx.drain(..test_per_class));
            train_idx.extend(idx);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let gather = |idx: &[usize]| {
            Dataset::new(
                self.inputs.gather_rows(idx),
                idx.iter().map(|&i| self.labels[i]).collect(),
                self.class_count,
            )
        };
        Ok((gather(&train_idx)?, gather(&test_idx)?))
    }
}

/// One segment of the stream: a train/test pair over a class subset.
#[derive(Debug, Clone)]
pub struct Experience {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: BTreeSet<usize>,
    pub index: usize,
}

/// The full stream definition.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub experiences: Vec<Experience>,
    pub batch_size: usize,
    pub passes: usize,
    pub shuffle_seed: u64,
}

impl StreamSpec {
    pub fn new(
        experiences: Vec<Experience>,
        batch_size: usize,
        passes: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".to_string()));
        }
        if passes == 0 {
            return Err(Error::Config("pass count must be >= 1".to_string()));
        }
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for exp in &experiences {
            for &c in &exp.classes {
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "class {c} appears in more than one experience"
                    )));
                }
            }
        }
        Ok(StreamSpec {
            experiences,
            batch_size,
            passes,
            shuffle_seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.experiences[0].train.feature_dim()
    }

    pub fn class_count(&self) -> usize {
        self.experiences[0].train.class_count
    }

    /// Number of batches one pass over an experience produces.
    fn batches_per_pass(&self, experience: usize) -> usize {
        let n = self.experiences[experience].train.len();
        n.div_ceil(self.batch_size)
    }

    /// Global index of the first batch of an experience.
    fn batch_base(&self, experience: usize) -> usize {
        (0..experience)
            .map(|e| self.batches_per_pass(e) * self.passes)
            .sum()
    }
}

/// Label-noise policy for a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Ratio of corrupted samples within each noisy batch.
    pub fraction: f64,
    pub noisy_parity: NoisyParity,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisyParity {
    Even,
    Odd,
    None,
}

impl NoiseSpec {
    pub fn new(fraction: f64, noisy_parity: NoisyParity, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "noise fraction must lie in [0, 1], got {fraction}"
            )));
        }
        Ok(NoiseSpec {
            fraction,
            noisy_parity,
            seed,
        })
    }

    /// A spec that never corrupts anything.
    pub fn disabled() -> Self {
        NoiseSpec {
            fraction: 0.0,
            noisy_parity: NoisyParity::None,
            seed: 0,
        }
    }

    fn applies_to(&self, global_batch_index: usize) -> bool {
        match self.noisy_parity {
            NoisyParity::Even => global_batch_index.is_multiple_of(2),
            NoisyParity::Odd => global_batch_index % 2 == 1,
            NoisyParity::None => false,
        }
    }
}

/// Reads a dataset from a pair of IDX files (the MNIST distribution
/// format): big-endian magic, big-endian dimension sizes, raw bytes.
/// Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let mut img = IdxReader::new(&images);
    let magic = img.read_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let count = img.read_u32()? as usize;
    let height = img.read_u32()? as usize;
    let width = img.read_u32()? as usize;
    let pixels = img.read_bytes(count * height * width)?;

    let mut lab = IdxReader::new(&labels);
    let magic = lab.read_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let label_count = lab.read_u32()? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let raw_labels = lab.read_bytes(count)?;

    let data: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::new(count, height * width, data)?, labels, class_count)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        IdxReader { bytes, pos: 0 }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        let mut slice = self
            .bytes
            .get(self.pos..)
            .ok_or_else(truncated_err)?;
        slice.read_exact(&mut buf).map_err(|_| truncated_err())?;
        self.pos += 4;
        Ok(u32::from_be_bytes(buf))
    }

    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(truncated_err());
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn truncated_err() -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        "truncated IDX payload",
    ))
}

/// Serializes a dataset back into IDX bytes, the inverse of [`load_idx`].
/// Pixel values are clamped to `[0, 1]` and quantized to bytes. Intended
/// for fixtures and for exporting synthetic data.
pub fn write_idx(dataset: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != dataset.feature_dim() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} grid does not match {} features",
            dataset.feature_dim()
        )));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.inputs.data().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in dataset.inputs.data() {
        images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Isotropic Gaussian blobs: `classes` clusters of `per_class` points in
/// `d` dimensions, unit variance, class means pairwise `separation` apart.
/// Requires `d >= classes` so the means can sit on orthogonal axes.
pub fn make_synthetic_blobs(
    classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    assert!(classes >= 2, "need at least two classes");
    assert!(per_class >= 1, "need at least one sample per class");
    assert!(d >= classes, "need d >= classes to place equidistant means");
    let mut rng = seeded(seed);
    // Means at scaled basis vectors: |m_i - m_j| = separation for i != j.
    let scale = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        for _ in 0..per_class {
            for dim in 0..d {
                let mean = if dim == class { scale } else { 0.0 };
                data.push(mean + standard_normal(&mut rng));
            }
            labels.push(class);
        }
    }
    Dataset {
        inputs: Matrix::new(n, d, data).expect("sized above"),
        labels,
        class_count: classes,
    }
}

/// Box-Muller draw; two uniforms per normal keeps the stream simple and
/// version-stable.
fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Partitions classes into experiences of `classes_per_exp` each, in an
/// order permuted by `class_order_seed`, and carries the train/test split
/// of the source through to every experience.
pub fn split_by_classes(
    train: &Dataset,
    test: &Dataset,
    classes_per_exp: usize,
    class_order_seed: u64,
) -> Result<Vec<Experience>> {
    if train.class_count != test.class_count {
        return Err(Error::Consistency(format!(
            "train has {} classes, test has {}",
            train.class_count, test.class_count
        )));
    }
    let class_count = train.class_count;
    if classes_per_exp == 0 || !class_count.is_multiple_of(classes_per_exp) {
        return Err(Error::Config(format!(
            "{class_count} classes cannot split into experiences of {classes_per_exp}"
        )));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    order.shuffle(&mut seeded(class_order_seed));

    let mut experiences = Vec::new();
    for (index, group) in order.chunks(classes_per_exp).enumerate() {
        let classes: BTreeSet<usize> = group.iter().copied().collect();
        let train_part = train.filter_by_class(&classes).ok_or_else(|| {
            Error::Consistency(format!("no train samples for classes {classes:?}"))
        })?;
        let test_part = test.filter_by_class(&classes).ok_or_else(|| {
            Error::Consistency(format!("no test samples for classes {classes:?}"))
        })?;
        experiences.push(Experience {
            train: train_part,
            test: test_part,
            classes,
            index,
        });
    }
    Ok(experiences)
}

/// Iterates one experience's train set as `(global_batch_index, batch)`
/// pairs: one seeded shuffle, then fixed-size chunks with the short final
/// batch kept. Extra passes repeat the same chunk sequence while the
/// global counter keeps advancing.
pub fn batch_iter<'a>(spec: &'a StreamSpec, experience_index: usize) -> Result<BatchIter<'a>> {
    let experience = spec
        .experiences
        .get(experience_index)
        .ok_or_else(|| Error::Config(format!("no experience {experience_index}")))?;
    let mut order: Vec<usize> = (0..experience.train.len()).collect();
    order.shuffle(&mut seeded(mix(spec.shuffle_seed, experience_index as u64)));
    Ok(BatchIter {
        spec,
        train: &experience.train,
        order,
        next_global: spec.batch_base(experience_index),
        pass: 0,
        offset: 0,
    })
}

pub struct BatchIter<'a> {
    spec: &'a StreamSpec,
    train: &'a Dataset,
    order: Vec<usize>,
    next_global: usize,
    pass: usize,
    offset: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (usize, LabeledBatch);

    fn next(&mut self) -> Option<Self::Item> {
        if self.offset >= self.order.len() {
            self.pass += 1;
            self.offset = 0;
        }
        if self.pass >= self.spec.passes {
            return None;
        }
        let end = (self.offset + self.spec.batch_size).min(self.order.len());
        let idx = &self.order[self.offset..end];
        self.offset = end;
        let batch = LabeledBatch::new(
            self.train.inputs.gather_rows(idx),
            idx.iter().map(|&i| self.train.labels[i]).collect(),
            SampleSource::Stream,
        );
        let global = self.next_global;
        self.next_global += 1;
        Some((global, batch))
    }
}

/// Applies the noise policy to one batch.
///
/// On a noisy-parity batch, exactly `round(fraction * n)` rows (chosen
/// without replacement under the batch-specific seed) get their label
/// resampled uniformly from the wrong classes. `clean_labels` is always
/// populated with the pre-noise labels, so a clean buffer can be kept.
pub fn inject_label_noise(
    batch: &LabeledBatch,
    global_batch_index: usize,
    noise: &NoiseSpec,
    class_count: usize,
) -> LabeledBatch {
    assert!(
        batch.clean_labels.is_none(),
        "noise must be injected only once"
    );
    let mut out = batch.clone();
    let clean = out.labels.clone();
    if noise.applies_to(global_batch_index) && noise.fraction > 0.0 && !batch.is_empty() {
        let n = batch.len();
        let flip_count = (noise.fraction * n as f64).round() as usize;
        let mut rng = seeded(mix(noise.seed, global_batch_index as u64));
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        rows.truncate(flip_count);
        for row in rows {
            let truth = out.labels[row];
            // Uniform over the other C-1 classes.
            let draw = rng.gen_range(0..class_count - 1);
            out.labels[row] = if draw >= truth { draw + 1 } else { draw };
        }
    }
    out.clean_labels = Some(clean);
    out
}
