//! Seeded generation of matrix content.
//!
//! All draws come from ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output
//! stream is fixed for a given seed and stream id on every platform. Values
//! are converted with explicit bit manipulation instead of distribution
//! helpers so the mapping cannot drift between crate versions:
//!
//! * uniform `f32` in `[-1, 1)`: `(x >> 8) * 2^-23 - 1` for a `u32` draw `x`
//! * bounded integer in `[0, n)`: `(x * n) >> 64` for a `u64` draw `x`

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::matrix::DenseMatrix;

/// Independent stream ids, so A, B and masks never share draws.
pub const STREAM_A: u64 = 1;
pub const STREAM_B: u64 = 2;
pub const STREAM_MASK: u64 = 3;

pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[-1, 1)`.
    #[inline]
    pub fn uniform_pm1(&mut self) -> f32 {
        let x = self.0.next_u32() >> 8;
        x as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
    }

    /// Uniform in `[0, bound)`. `bound` must be nonzero.
    #[inline]
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.0.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// `count` distinct values from `[0, bound)`, sorted ascending.
    pub fn distinct_sorted(&mut self, bound: usize, count: usize) -> Vec<usize> {
        debug_assert!(count <= bound);
        let mut pool: Vec<usize> = (0..bound).collect();
        // partial Fisher-Yates
        for i in 0..count {
            let j = i + self.below(bound - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool.sort_unstable();
        pool
    }
}

/// Dense matrix with entries uniform in `[-1, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> DenseMatrix {
    let mut rng = SeededRng::new(seed, stream);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.uniform_pm1())
}
