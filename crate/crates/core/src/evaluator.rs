//! Evaluation regimes, speed benchmarks and per-token loss export.
//!
//! Per-token losses are indexed by target position: entry `t - 1` is the
//! loss of predicting `stream[t]` for `t` in `1..stream.len()`.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{token_nll, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bpc: f64,
    pub ppl: f64,
    pub mean_nll: f64,
    pub nll: Vec<f64>,
    /// Wall-clock seconds spent in evaluation.
    pub seconds: f64,
}

impl EvalResult {
    fn from_nll(nll: Vec<f64>, seconds: f64) -> Result<Self> {
        if nll.is_empty() {
            return Err(Error::Config("stream needs at least two tokens to evaluate".into()));
        }
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        Ok(EvalResult {
            bpc: mean / std::f64::consts::LN_2,
            ppl: mean.exp(),
            mean_nll: mean,
            nll,
            seconds,
        })
    }

    pub fn tokens_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.nll.len() as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }

    /// Mean bits over the target positions where `mask[t]` is set (`mask`
    /// is indexed by stream position).
    pub fn masked_bpc(&self, mask: &[bool]) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (k, x) in self.nll.iter().enumerate() {
            if mask[k + 1] {
                s += x;
                n += 1;
            }
        }
        s / n.max(1) as f64 / std::f64::consts::LN_2
    }
}

/// Scores every position once, walking the stream in segments of
/// `seg_len` tokens and carrying `mem_len` positions of memory.
pub fn eval_segments(model: &Model, stream: &[usize], seg_len: usize, mem_len: usize) -> Result<Vec<f64>> {
    if seg_len == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    let mut mem = model.empty_memory();
    let mut nll = Vec::with_capacity(stream.len().saturating_sub(1));
    let mut pos = 0;
    while pos + 1 < stream.len() {
        let len = seg_len.min(stream.len() - 1 - pos);
        let out = model.forward_segment_with(&stream[pos..pos + len], &mem, mem_len, Some(&stream[pos + 1..pos + len + 1]))?;
        nll.extend(out.nll.expect("targets given"));
        mem = out.memory;
        pos += len;
    }
    Ok(nll)
}

/// Memory-reuse evaluation: consecutive segments of the training length
/// with `mem_len` cached positions.
pub fn eval_xl(model: &Model, stream: &[usize], mem_len: usize) -> Result<EvalResult> {
    let start = Instant::now();
    let nll = eval_segments(model, stream, model.config.segment_len, mem_len)?;
    EvalResult::from_nll(nll, start.elapsed().as_secs_f64())
}

/// Independent non-overlapping windows of `window` tokens, every position
/// scored.
pub fn eval_windows_score_all(model: &Model, stream: &[usize], window: usize) -> Result<EvalResult> {
    let start = Instant::now();
    let nll = eval_segments(model, stream, window, 0)?;
    EvalResult::from_nll(nll, start.elapsed().as_secs_f64())
}

fn sliding_one(model: &Model, stream: &[usize], window: usize, t: usize) -> Result<f64> {
    let ctx = &stream[t.saturating_sub(window)..t];
    let out = model.forward_segment_with(ctx, &model.empty_memory(), 0, None)?;
    let last = out.logits.slice_rows(ctx.len() - 1, 1)?;
    Ok(token_nll(&last, &[stream[t]])?[0])
}

/// Per-token sliding window: for each target a fresh forward over the
/// previous `window` tokens (fewer at the start of the stream), scoring only
/// the last position. `batched` spreads windows over the thread pool; the
/// values are identical either way.
pub fn eval_vanilla_sliding(model: &Model, stream: &[usize], window: usize, batched: bool) -> Result<EvalResult> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let start = Instant::now();
    let nll = if batched {
        (1..stream.len())
            .into_par_iter()
            .map(|t| sliding_one(model, stream, window, t))
            .collect::<Result<Vec<_>>>()?
    } else {
        (1..stream.len())
            .map(|t| sliding_one(model, stream, window, t))
            .collect::<Result<Vec<_>>>()?
    };
    EvalResult::from_nll(nll, start.elapsed().as_secs_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub context: usize,
    pub xl_sec_per_token: f64,
    pub vanilla_sec_per_token: f64,
    /// vanilla / xl.
    pub slowdown: f64,
}

/// Per-token wall-clock time of memory-reuse evaluation (memory length
/// `context`) against unbatched sliding windows of `context` tokens, on the
/// first `tokens + 1` tokens of `stream`. A short warmup pass precedes each
/// measurement.
pub fn bench_speed(model: &Model, stream: &[usize], contexts: &[usize], tokens: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(contexts.len());
    for &c in contexts {
        let need = (tokens + 1).max(c + 2);
        if stream.len() < need {
            return Err(Error::Config(format!("benchmark needs {need} tokens, stream has {}", stream.len())));
        }
        let warm = (c + 2 * model.config.segment_len).min(stream.len());
        eval_xl(model, &stream[..warm], c)?;
        eval_vanilla_sliding(model, &stream[..c + 2], c, false)?;

        let xl = eval_xl(model, &stream[..need], c)?;
        let van = eval_vanilla_sliding(model, &stream[..tokens + 1], c, false)?;
        let xl_t = xl.seconds / xl.nll.len() as f64;
        let van_t = van.seconds / van.nll.len() as f64;
        rows.push(BenchRow {
            context: c,
            xl_sec_per_token: xl_t,
            vanilla_sec_per_token: van_t,
            slowdown: van_t / xl_t,
        });
    }
    Ok(rows)
}

/// Per-token losses of one model at several context lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTable {
    pub model_id: String,
    pub stream_id: String,
    pub contexts: Vec<usize>,
    /// `losses[k][t - 1]` is the loss on `stream[t]` at `contexts[k]`.
    pub losses: Vec<Vec<f64>>,
}

const TABLE_MAGIC: &[u8; 8] = b"SEGRECLT";
const TABLE_VERSION: u32 = 1;

impl LossTable {
    pub fn count(&self) -> usize {
        self.losses.first().map_or(0, Vec::len)
    }

    pub fn at(&self, c: usize) -> Option<&[f64]> {
        self.contexts.iter().position(|&x| x == c).map(|k| self.losses[k].as_slice())
    }

    /// Header: magic, u32 version, u32-prefixed model id and stream id,
    /// u32 context count, u64 contexts, u64 token count. Then one
    /// little-endian f64 array per context, in context order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        for s in [&self.model_id, &self.stream_id] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&(self.contexts.len() as u32).to_le_bytes())?;
        for &c in &self.contexts {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        w.write_all(&(self.count() as u64).to_le_bytes())?;
        for row in &self.losses {
            let mut buf = Vec::with_capacity(row.len() * 8);
            for x in row {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format("not a loss table".into()));
        }
        let version = read_u32(r)?;
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported loss table version {version}")));
        }
        let mut strings = Vec::new();
        for _ in 0..2 {
            let n = read_u32(r)? as usize;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            strings.push(String::from_utf8(buf).map_err(|_| Error::Format("id is not UTF-8".into()))?);
        }
        let n_ctx = read_u32(r)? as usize;
        let contexts = (0..n_ctx).map(|_| read_u64(r).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let count = read_u64(r)? as usize;
        let mut losses = Vec::with_capacity(n_ctx);
        for _ in 0..n_ctx {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            losses.push(
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        let stream_id = strings.pop().expect("two ids");
        let model_id = strings.pop().expect("two ids");
        Ok(LossTable {
            model_id,
            stream_id,
            contexts,
            losses,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        LossTable::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Per-token losses at context length `c`. Recurrent models use segments
/// of `min(L, c)` tokens with `c - min(L, c)` positions of memory; models
/// without recurrence use a sliding window of `c` tokens.
pub fn losses_at_context(model: &Model, stream: &[usize], c: usize) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(Error::Config("context length must be at least 1".into()));
    }
    if model.config.recurrence {
        let seg = model.config.segment_len.min(c);
        eval_segments(model, stream, seg, c - seg)
    } else {
        Ok(eval_vanilla_sliding(model, stream, c, true)?.nll)
    }
}

/// Loss table over ascending context lengths, computed in parallel across
/// lengths.
pub fn export_losses(model: &Model, stream: &[usize], contexts: &[usize], model_id: &str, stream_id: &str) -> Result<LossTable> {
    if contexts.is_empty() || contexts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("context lengths must be non-empty and strictly ascending".into()));
    }
    let losses = contexts
        .par_iter()
        .map(|&c| losses_at_context(model, stream, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossTable {
        model_id: model_id.to_string(),
        stream_id: stream_id.to_string(),
        contexts: contexts.to_vec(),
        losses,
    })
}
