//! Training with carried memory: forward per lane, loss, backward, global
//! norm clipping, Adam, learning-rate schedule, checkpoints and metrics.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{BatcherCursor, SegmentBatch, SegmentBatcher, Vocab};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{update_memory, MemoryState, Mode, Model};
use crate::numerics::{Dropout, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Number of parallel lanes B.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr·wd·p`.
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Linear warmup length; `None` means 5% of `steps`.
    pub warmup_steps: Option<usize>,
    pub schedule: Schedule,
    pub log_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            warmup_steps: None,
            schedule: Schedule::Cosine,
            log_interval: 10,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("Adam needs β1, β2 in [0, 1) and eps > 0".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps as f64 * 0.05).round() as usize)
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup();
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
            }
        }
    }
}

/// Global L2 norm over all gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Everything besides the weights that a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub step: usize,
    pub adam: AdamState,
    pub memory: Vec<MemoryState>,
}

impl TrainerState {
    pub fn new(model: &Model, lanes: usize) -> Self {
        let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
        TrainerState {
            step: 0,
            adam: AdamState::new(&sizes),
            memory: vec![model.empty_memory(); lanes],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub bpc: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Dropout seed for one lane of one step, so a resumed run draws the same
/// masks as an uninterrupted one.
fn dropout_seed(seed: u64, step: usize, lane: usize) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for part in [step as u64, lane as u64] {
        x = (x ^ part).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// Forward on every lane, mean loss over lanes, backward. Returns the loss,
/// the gradients in parameter storage order and each lane's new hidden
/// states (layer inputs) for the memory update.
pub fn loss_and_grads(
    model: &Model,
    memory: &[MemoryState],
    batch: &SegmentBatch,
    dropout: Option<(u64, usize)>,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true)?;
    let lanes = batch.lanes();
    let active = model.config.loss_mode.active(batch.seg_len());
    let mut total: Option<Var> = None;
    let mut hidden = Vec::with_capacity(lanes);
    for b in 0..lanes {
        let mem: Vec<Var> = if batch.continuation[b] && !memory[b].is_empty() {
            memory[b]
                .layers()
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut drop = match dropout {
            Some((seed, step)) if model.config.dropout > 0.0 => {
                Some(Dropout::new(model.config.dropout, dropout_seed(seed, step, b)))
            }
            _ => None,
        };
        let fwd = model.forward_on_tape(&mut tape, &vars, &batch.inputs[b], &mem, drop.as_mut())?;
        let loss = tape.cross_entropy(fwd.logits, &batch.targets[b], &active)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
        hidden.push(fwd.hidden.iter().map(|&h| tape.value(h).clone()).collect());
    }
    let total = total.ok_or_else(|| Error::InvalidLoss("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / lanes as f64)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    tape.backward(loss)?;
    let grads = vars
        .named()
        .iter()
        .map(|(_, &v)| {
            tape.take_grad(v)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();
    Ok((value, grads, hidden))
}

/// One optimization step: loss, backward, clip, Adam, memory update.
pub fn train_step(model: &mut Model, state: &mut TrainerState, batch: &SegmentBatch, cfg: &TrainConfig) -> Result<StepStats> {
    if batch.lanes() != state.memory.len() {
        return Err(Error::dim(
            "train_step",
            format!("{} lanes in batch, {} memory slots", batch.lanes(), state.memory.len()),
        ));
    }
    let (loss, mut grads, hidden) = loss_and_grads(model, &state.memory, batch, Some((cfg.seed, state.step)))?;
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient" });
    }
    let lr = cfg.lr_at(state.step);
    state.adam.update(&mut model.params.values_mut(), &grads, lr, cfg);
    if !model.params.is_finite() {
        return Err(Error::NonFinite { op: "parameter update" });
    }
    let m = model.config.mem_len(Mode::Train);
    for (b, h) in hidden.into_iter().enumerate() {
        let prev = if batch.continuation[b] {
            std::mem::replace(&mut state.memory[b], model.empty_memory())
        } else {
            model.empty_memory()
        };
        state.memory[b] = if model.config.recurrence {
            update_memory(&prev, &h, m)?
        } else {
            prev
        };
    }
    let stats = StepStats {
        step: state.step,
        loss,
        bpc: loss / std::f64::consts::LN_2,
        lr,
        grad_norm,
        tokens: batch.lanes() * batch.seg_len(),
    };
    state.step += 1;
    Ok(stats)
}

/// Trainer metadata stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerMeta {
    pub step: usize,
    pub adam_t: u64,
    pub cursor: BatcherCursor,
    pub config: TrainConfig,
}

/// A model, its optimizer state and the batcher feeding it.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainerState,
    pub batcher: SegmentBatcher,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, stream: &[usize]) -> Result<Self> {
        config.validate()?;
        let batcher = SegmentBatcher::new(stream, config.batch_size, model.config.segment_len)?;
        let state = TrainerState::new(&model, config.batch_size);
        Ok(Trainer {
            model,
            config,
            state,
            batcher,
        })
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.batcher.next_batch_cyclic();
        train_step(&mut self.model, &mut self.state, &batch, &self.config)
    }

    /// Runs until `config.steps` updates have been made. Writes a JSON line
    /// per `log_interval` steps (and for the last step) to `metrics`, and
    /// periodic plus final checkpoints when `checkpoint` is given.
    pub fn run(&mut self, metrics: Option<&mut dyn Write>, checkpoint: Option<&Path>, vocab: Option<&Vocab>) -> Result<Vec<StepStats>> {
        self.run_until(self.config.steps, metrics, checkpoint, vocab)
    }

    /// As [`Trainer::run`] but stops after `stop` updates (capped at
    /// `config.steps`) without changing the schedule.
    pub fn run_until(
        &mut self,
        stop: usize,
        mut metrics: Option<&mut dyn Write>,
        checkpoint: Option<&Path>,
        vocab: Option<&Vocab>,
    ) -> Result<Vec<StepStats>> {
        let stop = stop.min(self.config.steps);
        let mut all = Vec::new();
        let mut window_start = Instant::now();
        let mut window_tokens = 0usize;
        while self.state.step < stop {
            let stats = self.step()?;
            window_tokens += stats.tokens;
            let done = self.state.step;
            let log_now = self.config.log_interval > 0 && (done % self.config.log_interval == 0 || done == stop);
            if log_now {
                let secs = window_start.elapsed().as_secs_f64();
                let line = serde_json::json!({
                    "step": done,
                    "loss": stats.loss,
                    "bpc": stats.bpc,
                    "lr": stats.lr,
                    "grad_norm": stats.grad_norm,
                    "tokens_per_sec": if secs > 0.0 { window_tokens as f64 / secs } else { 0.0 },
                });
                log::info!("step {} loss {:.4} bpc {:.4}", stats.step, stats.loss, stats.bpc);
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{line}")?;
                }
                window_start = Instant::now();
                window_tokens = 0;
            }
            if let Some(path) = checkpoint {
                if self.config.checkpoint_interval > 0 && done % self.config.checkpoint_interval == 0 && done < stop {
                    self.checkpoint(vocab.cloned()).save(path)?;
                }
            }
            all.push(stats);
        }
        if let Some(path) = checkpoint {
            self.checkpoint(vocab.cloned()).save(path)?;
        }
        Ok(all)
    }

    /// Weights, Adam moments, per-lane memory and the batcher cursor.
    pub fn checkpoint(&self, vocab: Option<Vocab>) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, vocab);
        let meta = TrainerMeta {
            step: self.state.step,
            adam_t: self.state.adam.t,
            cursor: self.batcher.cursor(),
            config: self.config.clone(),
        };
        ck.header.trainer = Some(serde_json::to_value(meta).expect("trainer meta serializes"));
        let names: Vec<String> = self.model.params.named().into_iter().map(|(n, _)| n).collect();
        for (k, (name, t)) in self.model.params.named().into_iter().enumerate() {
            let shape = t.shape().to_vec();
            ck.tensors.push((
                format!("optim.m.{name}"),
                Tensor::new(shape.clone(), self.state.adam.m[k].clone()).expect("moment shape"),
            ));
            ck.tensors.push((
                format!("optim.v.{name}"),
                Tensor::new(shape, self.state.adam.v[k].clone()).expect("moment shape"),
            ));
        }
        debug_assert_eq!(names.len(), self.state.adam.m.len());
        for (b, mem) in self.state.memory.iter().enumerate() {
            for (n, t) in mem.layers().iter().enumerate() {
                ck.tensors.push((format!("memory.lane{b}.layer{n}"), t.clone()));
            }
        }
        ck
    }

    /// Restores a run from a checkpoint written by [`Trainer::checkpoint`].
    /// `config` overrides the stored training config when given (only the
    /// step budget should normally change).
    pub fn resume(ck: &Checkpoint, stream: &[usize], config: Option<TrainConfig>) -> Result<Self> {
        let model = ck.model()?;
        let meta: TrainerMeta = match &ck.header.trainer {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Format("checkpoint has no trainer state".into())),
        };
        let config = config.unwrap_or(meta.config);
        let mut trainer = Trainer::new(model, config, stream)?;
        trainer.batcher.set_cursor(meta.cursor);
        trainer.state.step = meta.step;
        trainer.state.adam.t = meta.adam_t;
        let tensors: HashMap<&str, &Tensor> = ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let names: Vec<String> = trainer.model.params.named().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            for (prefix, dst) in [("m", &mut trainer.state.adam.m[k]), ("v", &mut trainer.state.adam.v[k])] {
                let key = format!("optim.{prefix}.{name}");
                let t = tensors
                    .get(key.as_str())
                    .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Format(format!("tensor {key} has the wrong size")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        let n_layers = trainer.model.config.n_layers;
        let d = trainer.model.config.d_model;
        for b in 0..trainer.state.memory.len() {
            let layers = (0..n_layers)
                .map(|n| {
                    let key = format!("memory.lane{b}.layer{n}");
                    tensors
                        .get(key.as_str())
                        .map(|t| (*t).clone())
                        .ok_or_else(|| Error::Format(format!("missing tensor {key}")))
                })
                .collect::<Result<Vec<_>>>()?;
            trainer.state.memory[b] = MemoryState::from_layers(layers, d)?;
        }
        Ok(trainer)
    }
}
