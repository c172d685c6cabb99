//! Top-k sampling with memory carry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, Model};

/// Longest seed consumed; older tokens are dropped.
pub const MAX_SEED: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_tokens: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_tokens: 100,
            top_k: 40,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// The candidate set and renormalized probabilities of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStep {
    pub candidates: Vec<usize>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub steps: Vec<SampleStep>,
    /// Largest memory length observed while decoding.
    pub max_memory: usize,
}

/// Temperature-scaled softmax restricted to the `k` most likely ids (ties
/// go to the lower id) and renormalized. Returns ids in descending
/// probability order.
pub fn top_k_distribution(logits: &[f64], k: usize, temperature: f64) -> (Vec<usize>, Vec<f64>) {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let mut idx: Vec<usize> = (0..scaled.len()).collect();
    idx.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scaled.len()));
    let max = scaled[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    (idx, weights.into_iter().map(|w| w / total).collect())
}

/// Feeds `seed` through the model in segments, then emits `cfg.n_tokens`
/// tokens one at a time, each fed back as a length-1 segment with the
/// memory carried. Models without recurrence instead re-read the last `L`
/// tokens at every step.
pub fn generate(model: &Model, seed: &[usize], cfg: &SampleConfig) -> Result<Generation> {
    if seed.is_empty() {
        return Err(Error::Config("seed must contain at least one token".into()));
    }
    if cfg.top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    let v = model.config.vocab_size;
    let k = if cfg.top_k > v {
        log::warn!("top_k {} exceeds the vocabulary size {v}; using {v}", cfg.top_k);
        v
    } else {
        cfg.top_k
    };
    let seed = &seed[seed.len().saturating_sub(MAX_SEED)..];
    let l = model.config.segment_len;
    let recurrent = model.config.recurrence;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history: Vec<usize> = seed.to_vec();
    let mut mem = model.empty_memory();
    let mut max_memory = 0;
    let mut last_logits: Vec<f64>;
    if recurrent {
        let mut out = None;
        for chunk in seed.chunks(l) {
            let o = model.forward_segment(chunk, &mem, Mode::Eval)?;
            mem = o.memory.clone();
            max_memory = max_memory.max(mem.len());
            out = Some(o);
        }
        let logits = out.expect("seed is non-empty").logits;
        last_logits = logits.row(logits.rows() - 1).to_vec();
    } else {
        last_logits = window_logits(model, &history)?;
    }

    let mut tokens = Vec::with_capacity(cfg.n_tokens);
    let mut steps = Vec::with_capacity(cfg.n_tokens);
    for _ in 0..cfg.n_tokens {
        let (candidates, probs) = top_k_distribution(&last_logits, k, cfg.temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = candidates.len() - 1;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        let chosen = candidates[pick];
        tokens.push(chosen);
        history.push(chosen);
        steps.push(SampleStep {
            candidates,
            probs,
            chosen,
        });
        if tokens.len() == cfg.n_tokens {
            break;
        }
        if recurrent {
            let o = model.forward_segment(&[chosen], &mem, Mode::Eval)?;
            mem = o.memory;
            max_memory = max_memory.max(mem.len());
            last_logits = o.logits.row(0).to_vec();
        } else {
            last_logits = window_logits(model, &history)?;
        }
    }
    Ok(Generation {
        tokens,
        steps,
        max_memory,
    })
}

fn window_logits(model: &Model, history: &[usize]) -> Result<Vec<f64>> {
    let l = model.config.segment_len;
    let ctx = &history[history.len().saturating_sub(l)..];
    let out = model.forward_segment(ctx, &model.empty_memory(), Mode::Eval)?;
    Ok(out.logits.row(ctx.len() - 1).to_vec())
}
