//! Seed derivation.
//!
//! Every random stream in a run is derived from one top-level seed by adding a
//! fixed per-role offset, so two runs with the same seed draw identical
//! streams regardless of which stages they execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role offsets added to the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    World = 0,
    Split = 1_000,
    Embed = 2_000,
    Init = 3_000,
    Batches = 4_000,
    Negatives = 5_000,
}

pub fn derive(seed: u64, role: Role) -> u64 {
    seed.wrapping_add(role as u64)
}

pub fn rng(seed: u64, role: Role) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, role))
}
