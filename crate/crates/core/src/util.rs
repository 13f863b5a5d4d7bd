use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

/// Deterministic stream cipher RNG; the same seed yields the same stream on
/// every platform.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic subsample of `0..n`: identity when `n <= max`, otherwise a
/// seeded choice of `max` indices, returned sorted.
pub fn subsample_indices(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = seeded_rng(seed);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    let mut picked: Vec<usize> = all.into_iter().take(max).collect();
    picked.sort_unstable();
    picked
}

/// Evenly strided subset of `0..n` with at most `max` entries, always
/// containing index 0.
pub fn strided_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let stride = n.div_ceil(max);
    (0..n).step_by(stride).collect()
}

pub fn hash_f64s(frame: usize, values: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    frame.hash(&mut h);
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Small sharded memo map used by objective closures to skip re-evaluating
/// unchanged per-frame terms during finite-difference probes. Values must be
/// a pure function of the key; the cache never changes results, only cost.
pub struct Memo<V> {
    shards: Vec<Mutex<HashMap<u64, V>>>,
}

impl<V: Clone> Memo<V> {
    pub fn new() -> Self {
        Memo {
            shards: (0..16).map(|_| Mutex::new(HashMap::new())).collect(),
        }
    }

    pub fn get_or_insert_with(&self, key: u64, f: impl FnOnce() -> V) -> V {
        let shard = &self.shards[(key % 16) as usize];
        {
            let guard = shard.lock().unwrap();
            if let Some(v) = guard.get(&key) {
                return v.clone();
            }
        }
        let v = f();
        let mut guard = shard.lock().unwrap();
        if guard.len() > 50_000 {
            guard.clear();
        }
        guard.insert(key, v.clone());
        v
    }
}

impl<V: Clone> Default for Memo<V> {
    fn default() -> Self {
        Self::new()
    }
}
