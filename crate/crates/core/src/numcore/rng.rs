use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use super::Tensor2;
use crate::error::{invalid, Result};

/// Seeded random stream. Children derived with [`child`](Self::child) depend
/// only on `(seed, key)`, never on how many draws the parent has made.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha12Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Words consumed so far from the underlying stream.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn child(&self, key: u64) -> Self {
        Self::new(splitmix64(
            splitmix64(self.seed) ^ splitmix64(key.wrapping_add(0x5851_F42D)),
        ))
    }

    /// Child keyed by a string label (used for named sub-streams).
    pub fn child_named(&self, label: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.child(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn exponential(&mut self) -> f64 {
        Exp1.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// Standard normal conditioned on `|x| <= 2`, scaled by `std`.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let x = self.normal();
            if x.abs() <= 2.0 {
                return x * std;
            }
        }
    }

    pub fn uniform_tensor(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| self.uniform_range(lo, hi))
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| std * self.normal())
    }
}

/// Standard deviation of the standard normal truncated to `[-2, 2]`.
pub const TRUNC_NORMAL_STD_RATIO: f64 = 0.879_625_661_034_239_8;

/// I.i.d. truncated normal entries (pre-truncation std `std`, cut at two std).
pub fn trunc_normal_init(rows: usize, cols: usize, std: f64, rng: &mut RngState) -> Result<Tensor2> {
    if !(std > 0.0) || !std.is_finite() {
        return invalid(format!("truncated normal std must be positive, got {std}"));
    }
    Ok(Tensor2::from_fn(rows, cols, |_, _| rng.trunc_normal(std)))
}
