//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by the run seed plus a label, so results never depend on iteration
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of integer keys.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, k| splitmix64(acc ^ splitmix64(*k)))
}

/// Generator for the stream named `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, &[fnv1a(label.as_bytes())]))
}

/// Generator for `label` with additional integer keys (epoch, index, ...).
pub fn stream_with(seed: u64, label: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(keys.len() + 1);
    all.push(fnv1a(label.as_bytes()));
    all.extend_from_slice(keys);
    ChaCha8Rng::seed_from_u64(derive(seed, &all))
}

/// Runs `f` inside a rayon pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
