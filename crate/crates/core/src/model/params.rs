use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::relattn::{AbsAttnParams, AttnParams, Encoding, RelAttnParams};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub attn: AttnParams<T>,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ff_w1: T,
    pub ff_b1: T,
    pub ff_w2: T,
    pub ff_b2: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

/// All learned weights. With tied embeddings the output projection is the
/// transposed embedding table and `out_proj` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embedding: T,
    pub out_proj: Option<T>,
    pub out_bias: T,
    pub layers: Vec<LayerParams<T>>,
}

/// Weights bound to a tape as leaves.
pub type ModelVars = ModelParams<Var>;

impl<T> ModelParams<T> {
    /// `(name, value)` for every weight in a fixed storage order. Checkpoints,
    /// optimizer moments and gradient vectors all follow this order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(p) = &self.out_proj {
            out.push(("out_proj".to_string(), p));
        }
        out.push(("out_bias".to_string(), &self.out_bias));
        for (n, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.attn.named() {
                out.push((format!("layers.{n}.attn.{name}"), t));
            }
            let rest = [
                ("ln1.gain", &layer.ln1_gain),
                ("ln1.bias", &layer.ln1_bias),
                ("ff.w1", &layer.ff_w1),
                ("ff.b1", &layer.ff_b1),
                ("ff.w2", &layer.ff_w2),
                ("ff.b2", &layer.ff_b2),
                ("ln2.gain", &layer.ln2_gain),
                ("ln2.bias", &layer.ln2_bias),
            ];
            for (name, t) in rest {
                out.push((format!("layers.{n}.{name}"), t));
            }
        }
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embedding];
        if let Some(p) = &mut self.out_proj {
            out.push(p);
        }
        out.push(&mut self.out_bias);
        for layer in &mut self.layers {
            out.extend(layer.attn.named_mut());
            out.extend([
                &mut layer.ln1_gain,
                &mut layer.ln1_bias,
                &mut layer.ff_w1,
                &mut layer.ff_b1,
                &mut layer.ff_w2,
                &mut layer.ff_b2,
                &mut layer.ln2_gain,
                &mut layer.ln2_bias,
            ]);
        }
        out
    }

    /// Builds a same-shaped structure, visiting weights in storage order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let embedding = f("embedding", &self.embedding)?;
        let out_proj = match &self.out_proj {
            Some(p) => Some(f("out_proj", p)?),
            None => None,
        };
        let out_bias = f("out_bias", &self.out_bias)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (n, layer) in self.layers.iter().enumerate() {
            let attn = layer.attn.try_map(|name, t| f(&format!("layers.{n}.attn.{name}"), t))?;
            let mut g = |name: &str, t: &T| f(&format!("layers.{n}.{name}"), t);
            layers.push(LayerParams {
                attn,
                ln1_gain: g("ln1.gain", &layer.ln1_gain)?,
                ln1_bias: g("ln1.bias", &layer.ln1_bias)?,
                ff_w1: g("ff.w1", &layer.ff_w1)?,
                ff_b1: g("ff.b1", &layer.ff_b1)?,
                ff_w2: g("ff.w2", &layer.ff_w2)?,
                ff_b2: g("ff.b2", &layer.ff_b2)?,
                ln2_gain: g("ln2.gain", &layer.ln2_gain)?,
                ln2_bias: g("ln2.bias", &layer.ln2_bias)?,
            });
        }
        Ok(ModelParams {
            embedding,
            out_proj,
            out_bias,
            layers,
        })
    }
}

impl ModelParams<Tensor> {
    /// Deterministic initialization: projections and embeddings from a
    /// normal with std 0.02 truncated at ±2σ, LayerNorm gains 1, all biases
    /// (including `u` and `v`) 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Config(e.to_string()))?;
        let mut trunc = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break x;
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let embedding = trunc(&[v, d]);
        let out_proj = (!config.tie_embeddings).then(|| trunc(&[d, v]));
        let out_bias = Tensor::zeros(&[v]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = match config.encoding {
                Encoding::Relative => AttnParams::Relative(RelAttnParams {
                    w_q: trunc(&[d, d]),
                    w_k_e: trunc(&[d, d]),
                    w_k_r: trunc(&[d, d]),
                    w_v: trunc(&[d, d]),
                    w_o: trunc(&[d, d]),
                    u: Tensor::zeros(&[d]),
                    v: Tensor::zeros(&[d]),
                }),
                Encoding::Absolute => AttnParams::Absolute(AbsAttnParams {
                    w_q: trunc(&[d, d]),
                    w_k: trunc(&[d, d]),
                    w_v: trunc(&[d, d]),
                    w_o: trunc(&[d, d]),
                }),
            };
            layers.push(LayerParams {
                attn,
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ff_w1: trunc(&[d, f]),
                ff_b1: Tensor::zeros(&[f]),
                ff_w2: trunc(&[f, d]),
                ff_b2: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            });
        }
        Ok(ModelParams {
            embedding,
            out_proj,
            out_bias,
            layers,
        })
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Registers every weight as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<ModelVars> {
        self.try_map(|_, t| tape.leaf(t.clone(), requires_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Builds parameters for `config` from named tensors, checking names and
    /// shapes against a fresh initialization.
    pub fn from_named(config: &ModelConfig, mut tensors: std::collections::HashMap<String, Tensor>) -> Result<Self> {
        let template = ModelParams::init(config, 0)?;
        template.try_map(|name, t| {
            let found = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if found.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
            Ok(found)
        })
    }
}

/// Uniform in `[-scale, scale]`; used by tests and tools that need non-zero
/// values for weights that initialize at zero.
pub fn randomize(params: &mut ModelParams, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.values_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}
