use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relattn::Encoding;

/// Which positions of a segment contribute to the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Every position.
    Full,
    /// Positions `ceil(L'/2)..L'`; a length-1 segment keeps its only position.
    Half,
}

impl LossMode {
    /// Per-position flags for a segment of `len` positions.
    pub fn active(self, len: usize) -> Vec<bool> {
        match self {
            LossMode::Full => vec![true; len],
            LossMode::Half => {
                let start = len.div_ceil(2).min(len.saturating_sub(1));
                (0..len).map(|i| i >= start).collect()
            }
        }
    }
}

/// Train and eval use different memory lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub segment_len: usize,
    pub mem_len_train: usize,
    pub mem_len_eval: usize,
    pub encoding: Encoding,
    pub recurrence: bool,
    pub loss_mode: LossMode,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_head: 16,
            d_ff: 64,
            segment_len: 16,
            mem_len_train: 16,
            mem_len_eval: 64,
            encoding: Encoding::Relative,
            recurrence: true,
            loss_mode: LossMode::Full,
            dropout: 0.0,
            tie_embeddings: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "d_model ({}) must equal n_heads ({}) × d_head ({})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.segment_len == 0 {
            return fail("segment_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Memory length used in `mode`; always 0 without recurrence.
    pub fn mem_len(&self, mode: Mode) -> usize {
        if !self.recurrence {
            return 0;
        }
        match mode {
            Mode::Train => self.mem_len_train,
            Mode::Eval => self.mem_len_eval,
        }
    }

    /// Closed-form parameter count.
    ///
    /// `V·d` embedding, `d·V` output projection when untied, `V` output bias,
    /// and per layer: `5d² + 2d` (relative: W_q, W_{k,E}, W_{k,R}, W_v, W_o,
    /// u, v) or `4d²` (absolute), `2·d·d_ff + d_ff + d` feed-forward, `4d`
    /// for the two LayerNorms.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let attn = match self.encoding {
            Encoding::Relative => 5 * d * d + 2 * d,
            Encoding::Absolute => 4 * d * d,
        };
        let layer = attn + 2 * d * f + f + d + 4 * d;
        let out = if self.tie_embeddings { 0 } else { d * v };
        v * d + out + v + self.n_layers * layer
    }
}
