use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` under `seed`.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate, kept distinct so that e.g. shuffling and
/// weight init never share randomness under the same seed.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const SHUFFLE_BASE: u64 = 1 << 32;
    pub const DROPOUT_BASE: u64 = 2 << 32;
    pub const PERMUTATION_BASE: u64 = 3 << 32;
    pub const SPLIT: u64 = 4;
}
