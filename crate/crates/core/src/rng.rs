//! Seed plumbing.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from one
//! of the named seeds below, so a run is fully determined by its seed set.
//! ChaCha8 is stable across platforms and rand versions, which keeps output
//! files byte-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The named seeds that determine a single run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Model parameter initialization.
    pub model_init: u64,
    /// Per-experience train-set shuffling.
    pub shuffle: u64,
    /// Label-noise injection.
    pub noise: u64,
    /// Reservoir replacement decisions inside the buffer.
    pub buffer: u64,
    /// Buffer retrieval draws (the batches combined with the stream).
    pub sampling: u64,
    /// Class-to-experience assignment.
    pub class_order: u64,
}

impl Seeds {
    /// All streams keyed off one base value; convenient for tests.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            model_init: mix(base, 1),
            shuffle: mix(base, 2),
            noise: mix(base, 3),
            buffer: mix(base, 4),
            sampling: mix(base, 5),
            class_order: mix(base, 6),
        }
    }

    /// Derives the seed set for repetition `rep` of a multi-run experiment.
    pub fn for_repetition(&self, rep: u64) -> Self {
        Seeds {
            model_init: mix(self.model_init, rep),
            shuffle: mix(self.shuffle, rep),
            noise: mix(self.noise, rep),
            buffer: mix(self.buffer, rep),
            sampling: mix(self.sampling, rep),
            class_order: mix(self.class_order, rep),
        }
    }
}

/// SplitMix64 finalizer; decorrelates `seed` and `tag` into a fresh seed.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic generator for the given seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
