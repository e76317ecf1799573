//! Seeded random streams.
//!
//! Every experiment owns a single root seed. Each randomized component
//! (weight init, dropout, shuffling, scenario generation, ...) draws from
//! its own stream derived from that root, so the behaviour of one
//! component never depends on how often another one consumed randomness.
//!
//! Streams are derived by mixing the root seed with a stream tag (and an
//! optional index such as an epoch number or Monte Carlo repeat) through
//! SplitMix64, then seeding a ChaCha8 generator with the result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The randomized components of an experiment, each with a fixed tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Network weight initialization.
    Init,
    /// Dropout masks during training.
    Dropout,
    /// Mini-batch shuffling.
    Shuffle,
    /// Synthetic scenario generation.
    Scenario,
    /// Group-level dataset splitting.
    Split,
    /// Monte Carlo dropout repeats.
    MonteCarlo,
    /// Random buffer storage (ablations, MIR).
    RandomStorage,
    /// Random buffer acquisition (ablations, MIR candidates).
    RandomAcquisition,
    /// Task-order permutation.
    TaskOrder,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::Dropout => 0x02,
            Stream::Shuffle => 0x03,
            Stream::Scenario => 0x04,
            Stream::Split => 0x05,
            Stream::MonteCarlo => 0x06,
            Stream::RandomStorage => 0x07,
            Stream::RandomAcquisition => 0x08,
            Stream::TaskOrder => 0x09,
        }
    }
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix two 64-bit values into one derived seed.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Derive the generator for `stream` under `root_seed`.
pub fn derive(root_seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root_seed, stream.tag()))
}

/// Derive the generator for `stream` at a given index (epoch, repeat, ...).
///
/// Indexed streams make per-epoch and per-repeat randomness independent of
/// the order in which earlier epochs or repeats consumed their generators.
pub fn derive_indexed(root_seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(root_seed, stream.tag()), index))
}
