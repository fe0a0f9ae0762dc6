//! Fixed-capacity replay memory with reservoir-sampling updates.
//!
//! Every item ever offered has inclusion probability `capacity / seen`,
//! the classic single-pass reservoir guarantee. Retrieval draws uniformly
//! without replacement within a call; separate calls are independent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::nn::{LabeledBatch, SampleSource};
use crate::rng::seeded;

/// One stored sample. `clean_label` is the pre-noise ground truth when the
/// inserting batch carried one, otherwise it mirrors `label`.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferItem {
    pub input: Vec<f64>,
    pub label: usize,
    pub clean_label: usize,
}

impl BufferItem {
    pub fn is_clean(&self) -> bool {
        self.label == self.clean_label
    }
}

#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<BufferItem>,
    seen_count: usize,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ReservoirBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen_count: 0,
            rng: seeded(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of samples ever offered.
    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn items(&self) -> &[BufferItem] {
        &self.items
    }

    /// Offers every sample of the batch to the reservoir, one at a time.
    ///
    /// With `use_clean_labels` set, the stored label is the batch's clean
    /// label, so the buffer holds only correct supervision even when the
    /// stream batch was corrupted.
    pub fn update(&mut self, batch: &LabeledBatch, use_clean_labels: bool) {
        for row in 0..batch.len() {
            let clean = batch
                .clean_labels
                .as_ref()
                .map_or(batch.labels[row], |c| c[row]);
            let label = if use_clean_labels {
                clean
            } else {
                batch.labels[row]
            };
            let item = BufferItem {
                input: batch.inputs.row(row).to_vec(),
                label,
                clean_label: clean,
            };
            self.offer(item);
        }
    }

    fn offer(&mut self, item: BufferItem) {
        self.seen_count += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let slot = self.rng.gen_range(0..self.seen_count);
            if slot < self.capacity {
                self.items[slot] = item;
            }
        }
    }

    /// Draws `min(n, len)` distinct slots uniformly at random and returns
    /// them as a batch with `source_mask = buffer`. An empty buffer yields
    /// an empty batch.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng, feature_dim: usize) -> LabeledBatch {
        let k = n.min(self.items.len());
        if k == 0 {
            return LabeledBatch::empty(feature_dim);
        }
        // Partial Fisher-Yates over the slot indices.
        let mut slots: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..k {
            let j = rng.gen_range(i..slots.len());
            slots.swap(i, j);
        }
        slots.truncate(k);

        let d = self.items[0].input.len();
        let mut data = Vec::with_capacity(k * d);
        let mut labels = Vec::with_capacity(k);
        let mut clean_labels = Vec::with_capacity(k);
        for &s in &slots {
            data.extend_from_slice(&self.items[s].input);
            labels.push(self.items[s].label);
            clean_labels.push(self.items[s].clean_label);
        }
        LabeledBatch {
            inputs: Matrix::new(k, d, data).expect("sized above"),
            labels,
            clean_labels: Some(clean_labels),
            source_mask: vec![SampleSource::Buffer; k],
        }
    }
}
