//! Seeded, resumable random numbers.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Serialized size of [`Rng::to_bytes`].
pub const RNG_STATE_BYTES: usize = 56;

/// ChaCha8 stream. Its position is fully described by seed, stream id and
/// word position, so it can be saved and resumed exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for the same seed.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { inner }
    }

    pub fn to_bytes(&self) -> [u8; RNG_STATE_BYTES] {
        let mut out = [0u8; RNG_STATE_BYTES];
        out[..32].copy_from_slice(&self.inner.get_seed());
        out[32..40].copy_from_slice(&self.inner.get_stream().to_le_bytes());
        out[40..].copy_from_slice(&self.inner.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != RNG_STATE_BYTES {
            return Err(Error::invalid(format!(
                "rng state is {} bytes, expected {RNG_STATE_BYTES}",
                bytes.len()
            )));
        }
        let seed: [u8; 32] = bytes[..32].try_into().expect("length checked");
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(u64::from_le_bytes(bytes[32..40].try_into().expect("length checked")));
        inner.set_word_pos(u128::from_le_bytes(bytes[40..].try_into().expect("length checked")));
        Ok(Rng { inner })
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Tensor of i.i.d. standard normal samples.
pub fn randn(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as Float).collect())
}

/// Tensor of i.i.d. samples from `[lo, hi)`.
pub fn rand_uniform(rng: &mut Rng, shape: &[usize], lo: Float, hi: Float) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("rand_uniform: lo {lo} >= hi {hi}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = lo + (hi - lo) * rng.next_f64() as Float;
            // Rounding in f32 can land exactly on `hi`.
            if v >= hi {
                lo
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
