//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SEGRECKP"
//! version  u32      1
//! header   u64 length + UTF-8 JSON {"model": ModelConfig, "vocab": Vocab?, "trainer": any?}
//! count    u32      number of tensors
//! tensor*  u32 name length, name bytes, u8 dtype (1 = f64), u32 ndim,
//!          u64 per dimension, then the f64 values
//! ```
//!
//! Model weights use the names from [`ModelParams::named`]: `embedding`,
//! `out_proj` (untied only), `out_bias`, `layers.{n}.attn.{w_q,w_k_e,w_k_r,w_v,w_o,u,v}`
//! for relative attention or `layers.{n}.attn.{w_q,w_k,w_v,w_o}` for absolute,
//! `layers.{n}.ln1.{gain,bias}`, `layers.{n}.ff.{w1,b1,w2,b2}`,
//! `layers.{n}.ln2.{gain,bias}`. Trainer checkpoints add `optim.m.<name>`,
//! `optim.v.<name>` and `memory.lane{b}.layer{n}`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"SEGRECKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default)]
    pub vocab: Option<Vocab>,
    #[serde(default)]
    pub trainer: Option<serde_json::Value>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: Option<Vocab>) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                vocab,
                trainer: None,
            },
            tensors: model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model, ignoring any non-weight tensors.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.header.model.clone();
        let names: Vec<String> = ModelParams::init(&cfg, 0)?.named().into_iter().map(|(n, _)| n).collect();
        let map: HashMap<String, Tensor> = self
            .tensors
            .iter()
            .filter(|(n, _)| names.contains(n))
            .cloned()
            .collect();
        let params = ModelParams::from_named(&cfg, map)?;
        Model::from_params(cfg, params)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u64(r)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&read_bytes(r, header_len)?)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::Format(format!("tensor {name}: unknown dtype {}", dtype[0])));
            }
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_bytes(r, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        // write-then-rename so a crash never leaves a truncated checkpoint
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
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

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("unexpected end of file".into()));
    }
    Ok(buf)
}
