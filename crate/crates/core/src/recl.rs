//! Relative effective context length over a group of loss tables.
//!
//! For a context length `c` the group baseline is the per-token minimum
//! loss over all models (the evaluated model included). The positions with
//! the largest baseline loss form the set `T`, and a model's relative loss
//! at a longer context `c'` is the mean over `T` of
//! `min(b(c, t), l_i(c', t))`. The search grows `c` in steps of `Δ` while
//! the relative perplexity gain stays at or above the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::LossTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReclConfig {
    /// Fraction of hardest positions kept, in `(0, 1]`.
    pub r: f64,
    pub delta: usize,
    pub initial_c: usize,
    pub threshold: f64,
    pub max_c: usize,
}

impl Default for ReclConfig {
    fn default() -> Self {
        ReclConfig {
            r: 0.1,
            delta: 16,
            initial_c: 16,
            threshold: 0.01,
            max_c: 512,
        }
    }
}

impl ReclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Config(format!("r must lie in (0, 1], got {}", self.r)));
        }
        if self.delta == 0 {
            return Err(Error::Config("Δ must be at least 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config("threshold must be positive".into()));
        }
        if self.initial_c == 0 || self.initial_c > self.max_c {
            return Err(Error::Config("need 1 ≤ initial c ≤ max c".into()));
        }
        Ok(())
    }

    /// Context lengths the search may visit.
    pub fn grid(&self) -> Vec<usize> {
        (self.initial_c..=self.max_c).step_by(self.delta).collect()
    }
}

/// Loss tables of several models over the same tokens.
#[derive(Clone, Debug)]
pub struct ModelGroup {
    tables: Vec<LossTable>,
}

impl ModelGroup {
    pub fn new(tables: Vec<LossTable>) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::Config("empty model group".into()))?;
        for t in &tables {
            if t.count() != first.count() || t.contexts != first.contexts {
                return Err(Error::Config(format!(
                    "table {} does not cover the same positions and context lengths as {}",
                    t.model_id, first.model_id
                )));
            }
            if t.losses.iter().any(|row| row.len() != t.count()) {
                return Err(Error::Config(format!("table {} has ragged rows", t.model_id)));
            }
        }
        Ok(ModelGroup { tables })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn tables(&self) -> &[LossTable] {
        &self.tables
    }

    pub fn index_of(&self, model_id: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.model_id == model_id)
    }

    fn losses(&self, i: usize, c: usize) -> Result<&[f64]> {
        let t = self
            .tables
            .get(i)
            .ok_or_else(|| Error::Config(format!("no model {i} in group")))?;
        t.at(c)
            .ok_or_else(|| Error::Config(format!("model {} has no losses at context {c}", t.model_id)))
    }

    /// `b(c, t)`: per-position minimum over the group.
    pub fn baseline(&self, c: usize) -> Result<Vec<f64>> {
        let mut b = self.losses(0, c)?.to_vec();
        for i in 1..self.tables.len() {
            for (x, &y) in b.iter_mut().zip(self.losses(i, c)?) {
                *x = x.min(y);
            }
        }
        Ok(b)
    }

    /// `f_i(c, c')` over the positions `set`.
    pub fn relative_loss(&self, i: usize, c: usize, c_next: usize, set: &[usize]) -> Result<f64> {
        let b = self.baseline(c)?;
        let l = self.losses(i, c_next)?;
        Ok(relative_loss(&b, l, set))
    }
}

/// The `ceil(r·n)` positions with the largest baseline loss, ties going to
/// the lower index. Returned in ascending index order.
pub fn top_r_positions(b: &[f64], r: f64) -> Vec<usize> {
    let k = ((r * b.len() as f64).ceil() as usize).min(b.len());
    let mut idx: Vec<usize> = (0..b.len()).collect();
    idx.sort_by(|&x, &y| b[y].total_cmp(&b[x]).then(x.cmp(&y)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mean over `set` of `min(b[t], l[t])`.
pub fn relative_loss(b: &[f64], l: &[f64], set: &[usize]) -> f64 {
    set.iter().map(|&t| b[t].min(l[t])).sum::<f64>() / set.len().max(1) as f64
}

/// `(exp f(c,c) − exp f(c,c')) / exp f(c,c)`.
pub fn relative_gain(f_same: f64, f_next: f64) -> f64 {
    let base = f_same.exp();
    (base - f_next.exp()) / base
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclStep {
    pub c: usize,
    pub c_next: usize,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclReport {
    pub model: String,
    pub r: f64,
    pub delta: usize,
    pub trace: Vec<ReclStep>,
    pub recl: usize,
    /// False when the search hit `max_c` without the gain dropping below
    /// the threshold.
    pub saturated: bool,
}

/// Grows `c` by `Δ` while `g_i(c, c + Δ) ≥ threshold`.
pub fn recl_search(group: &ModelGroup, i: usize, cfg: &ReclConfig) -> Result<ReclReport> {
    cfg.validate()?;
    let model = group
        .tables
        .get(i)
        .ok_or_else(|| Error::Config(format!("no model {i} in group")))?
        .model_id
        .clone();
    let mut trace = Vec::new();
    let mut c = cfg.initial_c;
    loop {
        let c_next = c + cfg.delta;
        if c_next > cfg.max_c {
            return Ok(ReclReport {
                model,
                r: cfg.r,
                delta: cfg.delta,
                trace,
                recl: c,
                saturated: false,
            });
        }
        let b = group.baseline(c)?;
        let set = top_r_positions(&b, cfg.r);
        let f_same = relative_loss(&b, group.losses(i, c)?, &set);
        let f_next = relative_loss(&b, group.losses(i, c_next)?, &set);
        let gain = relative_gain(f_same, f_next);
        trace.push(ReclStep { c, c_next, gain });
        if gain < cfg.threshold {
            return Ok(ReclReport {
                model,
                r: cfg.r,
                delta: cfg.delta,
                trace,
                recl: c,
                saturated: true,
            });
        }
        c = c_next;
    }
}
