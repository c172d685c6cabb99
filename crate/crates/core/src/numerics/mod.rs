//! Dense tensors and the tape-based reverse-mode differentiation engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod tape;
mod tensor;

pub use tape::{masked_softmax_values, rel_shift_values, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;

/// LayerNorm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Causal mask over `[memory ∘ segment]`: query `i` may attend key `j`
/// iff `j <= i + mem_len`.
pub fn causal_mask(seg_len: usize, mem_len: usize) -> Vec<bool> {
    let klen = seg_len + mem_len;
    let mut mask = vec![false; seg_len * klen];
    for i in 0..seg_len {
        for j in 0..=(i + mem_len) {
            mask[i * klen + j] = true;
        }
    }
    mask
}

/// Inverted dropout driven by its own seeded generator.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Zeroes each element with probability `rate` and rescales survivors.
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(shape, data)?)?;
        tape.mul(x, mask)
    }
}
