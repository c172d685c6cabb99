//! The layer stack, the logit head and segment-level recurrence.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Dropout, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::relattn::{attention_sublayer, sinusoid_table, AttnShape, Encoding, SinusoidTable};

pub mod checkpoint;
mod config;
mod memory;
mod params;

pub use config::{LossMode, Mode, ModelConfig};
pub use memory::{update_memory, MemoryState};
pub use params::{randomize, LayerParams, ModelParams, ModelVars, INIT_STD};

/// Result of running one segment.
#[derive(Clone, Debug)]
pub struct LMOutput {
    /// `[L' × V]`.
    pub logits: Tensor,
    pub memory: MemoryState,
    /// Per-position negative log-likelihood in nats, when targets were given.
    pub nll: Option<Vec<f64>>,
}

/// Tape handles produced by [`Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// `hidden[n]` is the input of layer `n` (so `hidden[0]` is the scaled
    /// embedding). These are what the memory caches.
    pub hidden: Vec<Var>,
}

/// A configuration together with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    table: SinusoidTable,
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, seed)
}

impl Model {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config, config.seed)?;
        Model::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let reference = ModelParams::init(&config, 0)?;
        let expected: Vec<_> = reference.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let got: Vec<_> = params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected != got {
            return Err(Error::Config("parameters do not match the model configuration".into()));
        }
        let rows = config.segment_len + config.mem_len_train.max(config.mem_len_eval);
        let table = sinusoid_table(rows, config.d_model)?;
        Ok(Model { config, params, table })
    }

    pub fn empty_memory(&self) -> MemoryState {
        MemoryState::empty(self.config.n_layers, self.config.d_model)
    }

    fn table_for(&self, rows: usize) -> Result<Cow<'_, SinusoidTable>> {
        if rows <= self.table.len() {
            Ok(Cow::Borrowed(&self.table))
        } else {
            Ok(Cow::Owned(sinusoid_table(rows, self.config.d_model)?))
        }
    }

    /// Builds the forward pass for one segment on `tape`.
    ///
    /// `mems` holds one matrix per layer (or is empty for no memory). They
    /// pass through a stop-gradient inside the attention sublayer, so callers
    /// may hand in tape values that still carry history. With recurrence off
    /// `mems` is ignored.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[usize],
        mems: &[Var],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<TapeForward> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::dim("forward", "empty segment"));
        }
        if cfg.recurrence && !mems.is_empty() && mems.len() != cfg.n_layers {
            return Err(Error::dim(
                "forward",
                format!("{} memory layers for {} model layers", mems.len(), cfg.n_layers),
            ));
        }
        let use_mem = cfg.recurrence && !mems.is_empty();
        let seg = tokens.len();
        let mem_len = if use_mem { tape.value(mems[0]).rows() } else { 0 };
        let table = self.table_for(seg + mem_len)?;

        let emb = tape.embedding(vars.embedding, tokens)?;
        let mut h = tape.scale(emb, (cfg.d_model as f64).sqrt())?;
        if cfg.encoding == Encoding::Absolute {
            // segment-local positions; memory rows carry the same table rows
            let pos = tape.constant(table.prefix(seg)?)?;
            h = tape.add(h, pos)?;
        }

        let shape = AttnShape {
            n_heads: cfg.n_heads,
            d_head: cfg.d_head,
        };
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for (n, layer) in vars.layers.iter().enumerate() {
            hidden.push(h);
            let mem = use_mem.then(|| mems[n]);
            let a = attention_sublayer(
                tape,
                h,
                mem,
                &layer.attn,
                layer.ln1_gain,
                layer.ln1_bias,
                shape,
                &table,
                dropout.as_deref_mut(),
            )?;
            let inner = tape.matmul(a, layer.ff_w1)?;
            let inner = tape.add_row(inner, layer.ff_b1)?;
            let mut inner = tape.relu(inner)?;
            if let Some(dr) = dropout.as_deref_mut() {
                inner = dr.apply(tape, inner)?;
            }
            let ff = tape.matmul(inner, layer.ff_w2)?;
            let ff = tape.add_row(ff, layer.ff_b2)?;
            let res = tape.add(ff, a)?;
            h = tape.layer_norm(res, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
        }

        let logits = match vars.out_proj {
            Some(w) => tape.matmul(h, w)?,
            None => tape.matmul_nt(h, vars.embedding)?,
        };
        let logits = tape.add_row(logits, vars.out_bias)?;
        Ok(TapeForward { logits, hidden })
    }

    /// Runs one segment without gradients and returns logits plus the
    /// updated memory (length capped at the memory length for `mode`).
    pub fn forward_segment(&self, tokens: &[usize], mem: &MemoryState, mode: Mode) -> Result<LMOutput> {
        self.forward_segment_with(tokens, mem, self.config.mem_len(mode), None)
    }

    /// As [`Model::forward_segment`] with an explicit memory length and
    /// optional next-token targets.
    pub fn forward_segment_with(
        &self,
        tokens: &[usize],
        mem: &MemoryState,
        mem_len: usize,
        targets: Option<&[usize]>,
    ) -> Result<LMOutput> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let mem_vars = if self.config.recurrence && !mem.is_empty() {
            mem.layers()
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let fwd = self.forward_on_tape(&mut tape, &vars, tokens, &mem_vars, None)?;
        let logits = tape.value(fwd.logits).clone();
        let memory = if self.config.recurrence {
            let hidden: Vec<Tensor> = fwd.hidden.iter().map(|&v| tape.value(v).clone()).collect();
            update_memory(mem, &hidden, mem_len)?
        } else {
            self.empty_memory()
        };
        let nll = match targets {
            Some(t) => Some(token_nll(&logits, t)?),
            None => None,
        };
        Ok(LMOutput { logits, memory, nll })
    }
}

/// Per-row negative log-likelihood of `targets` under `logits`.
pub fn token_nll(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let (rows, v) = logits.require_matrix("token_nll")?;
    if targets.len() != rows {
        return Err(Error::dim("token_nll", format!("{} targets for {rows} rows", targets.len())));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t >= v {
                return Err(Error::Vocab { token: t, vocab: v });
            }
            let row = logits.row(i);
            Ok(log_sum_exp(row) - row[t])
        })
        .collect()
}

/// Mean negative log-likelihood over the positions selected by `mode`.
pub fn segment_loss(output: &LMOutput, targets: &[usize], mode: LossMode) -> Result<Tensor> {
    let nll = match &output.nll {
        Some(n) if n.len() == targets.len() => Cow::Borrowed(n),
        _ => Cow::Owned(token_nll(&output.logits, targets)?),
    };
    let active = mode.active(targets.len());
    let picked: Vec<f64> = nll.iter().zip(&active).filter(|(_, &a)| a).map(|(x, _)| *x).collect();
    if picked.is_empty() {
        return Err(Error::InvalidLoss("no active positions".into()));
    }
    Ok(Tensor::scalar(picked.iter().sum::<f64>() / picked.len() as f64))
}

#[cfg(test)]
mod tests;
