//! Seed plumbing: one 64-bit seed fans out into independent named streams so
//! every subsystem (data, init, chains, sampling) is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable stream identifiers. Adding a stream never perturbs existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    DataSampling = 1,
    ParamInit = 2,
    Chains = 3,
    PositivePhase = 4,
    Generation = 5,
    Inpainting = 6,
    Monitor = 7,
}

/// splitmix64 finalizer; decorrelates structured seed material.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Independent generator for a (stream, index) pair, e.g. one per chain.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(index)));
    rng.set_stream(stream as u64);
    rng
}

/// Per-item generator for batched work: deterministic regardless of the
/// thread that ends up running the item.
pub fn item_rng(seed: u64, stream: Stream, step: u64, item: u64) -> ChaCha8Rng {
    indexed_rng(seed, stream, mix(step).wrapping_add(item))
}
