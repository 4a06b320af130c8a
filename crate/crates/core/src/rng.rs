//! Splittable, counter-based random streams.
//!
//! A stream is addressed by a root seed and a path of integers (replica id,
//! particle id, purpose tag, ...). The path is hashed into a ChaCha key, so
//! every address owns an independent keystream and replaying the same
//! `(seed, path)` reproduces the same draws bit for bit. Children are derived
//! from the address, never from the parent's consumed state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Purpose tags used when deriving child streams.
pub mod purpose {
    pub const INITIAL: u64 = 0x1000;
    pub const DYNAMICS: u64 = 0x2000;
    pub const INTERNAL_MARKS: u64 = 0x3000;
    pub const VOTER_MARKS: u64 = 0x4000;
    pub const COUPLING: u64 = 0x5000;
    pub const REPLICA: u64 = 0x6000;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
    core: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    pub fn at(seed: u64, path: Vec<u64>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"qsd-stream");
        hasher.update(seed.to_le_bytes());
        hasher.update((path.len() as u64).to_le_bytes());
        for id in &path {
            hasher.update(id.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Self {
            seed,
            path,
            core: ChaCha12Rng::from_seed(key),
        }
    }

    /// Stream at `path ++ [id]`.
    pub fn child(&self, id: u64) -> Self {
        let mut path = self.path.clone();
        path.push(id);
        Self::at(self.seed, path)
    }

    /// Stream at `path ++ ids`.
    pub fn descend(&self, ids: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(ids);
        Self::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.core.random::<f64>()
    }

    /// Exponential waiting time with the given rate; infinite for rate 0.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        self.core.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.core.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.core.fill_bytes(dst)
    }
}
