//! Stable seed derivation.
//!
//! Every random stream is keyed by `(master seed, trial, tag, extra...)` through
//! a SplitMix64 finalizer, so a single trial can be replayed without running the
//! ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which random stream a seed feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Sketch,
    Prior,
    Data,
}

impl StreamTag {
    fn code(self) -> u64 {
        match self {
            StreamTag::Sketch => 0x736b_6574_6368,
            StreamTag::Prior => 0x0070_7269_6f72,
            StreamTag::Data => 0x6461_7461,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Seed of trial `trial` under `master`.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    mix(&[master, trial])
}

/// Seed of one tagged stream inside a trial, optionally keyed further
/// (for instance by `M` or `(M, N)`).
pub fn stream_seed(trial_seed: u64, tag: StreamTag, keys: &[u64]) -> u64 {
    let mut words = Vec::with_capacity(keys.len() + 2);
    words.push(trial_seed);
    words.push(tag.code());
    words.extend_from_slice(keys);
    mix(&words)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
