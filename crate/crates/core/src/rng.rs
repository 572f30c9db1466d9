use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness stages. Each stage draws from its own ChaCha
/// stream of the run seed, so adding draws to one stage never perturbs
/// another (embedding init stays identical when, say, the noise schedule
/// changes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Embedding table initialization.
    Init = 0,
    /// Per-layer propagation noise.
    Noise = 1,
    /// Batch and negative sampling.
    Sampling = 2,
    /// MF factor initialization.
    Mf = 3,
    /// Randomized SVD test matrix.
    Svd = 4,
    /// Train/valid/test assignment.
    Split = 5,
    /// User subsampling.
    Subsample = 6,
}

/// A deterministic generator for one (seed, stage) pair.
pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
