//! Seed derivation: one user-facing `u64` seed per run, split into
//! independent streams by consumer label.
//!
//! Every randomized stage derives its own stream as
//! `derive_seed(base, "label")`, so adding a consumer never perturbs the
//! streams of existing ones. Labels in use include `"init"`, `"shuffle:{e}"`,
//! `"edits:{e}:{id}"`, `"negatives"`, `"split"`, `"causal:{id}"`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hashing::{fnv1a64, mix64};

/// Derive an independent stream seed from a base seed and a consumer label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    mix64(base ^ fnv1a64(base.rotate_left(17), label.as_bytes()))
}

/// The crate-wide deterministic generator (counter-based, portable).
pub type Rng = ChaCha8Rng;

/// Construct the generator for one derived stream.
pub fn rng_for(base: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(base, label))
}
