//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream names used across the crate.
pub mod stream {
    pub const DATASET: &str = "dataset";
    pub const INIT: &str = "init";
    pub const MASKING: &str = "masking";
    pub const GUMBEL: &str = "gumbel";
    pub const EVAL_PAIRS: &str = "eval-pairs";
    pub const EVAL_KEYFRAMES: &str = "eval-keyframes";
    pub const TOKENIZER_TRAIN: &str = "tokenizer-train";
    pub const CONTROL_TRAIN: &str = "control-train";
}

/// Deterministic generator for `(seed, name)`. Distinct names give
/// statistically independent streams.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
