//! Attention with relative positional encodings.
//!
//! Scores between query `i` (a position in the current segment) and key `j`
//! (a position in `[memory ∘ segment]`) are the sum of four terms:
//! content addressing `qᵢ·kⱼ`, a content-dependent positional bias
//! `qᵢ·(W_R R_{i+M-j})`, a global content bias `u·kⱼ` and a global positional
//! bias `v·(W_R R_{i+M-j})`.
//!
//! Two implementations exist. [`rel_scores_naive`] projects the sinusoid row
//! separately for every `(i, j)` pair. [`rel_scores_fast`] projects each of
//! the `M+L` distinct distances once, in reversed order, and recovers the
//! per-pair layout with [`rel_shift`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{causal_mask, Dropout, Tape, Tensor, Var, LAYER_NORM_EPS};

pub use crate::numerics::rel_shift_values as rel_shift;

/// Parameter-free sinusoid rows; row `i` encodes distance (or position) `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidTable {
    table: Tensor,
}

/// `R[i, 2j] = sin(i / 10000^(2j/d))`, `R[i, 2j+1] = cos(i / 10000^(2j/d))`.
pub fn sinusoid_table(max_dist: usize, d: usize) -> Result<SinusoidTable> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("sinusoid width must be even and positive, got {d}")));
    }
    let mut data = Vec::with_capacity(max_dist * d);
    for i in 0..max_dist {
        let pos = i as f64;
        for j in 0..d / 2 {
            let inv_freq = 1.0 / 10000f64.powf((2 * j) as f64 / d as f64);
            data.push((pos * inv_freq).sin());
            data.push((pos * inv_freq).cos());
        }
    }
    Ok(SinusoidTable {
        table: Tensor::new(vec![max_dist, d], data)?,
    })
}

impl SinusoidTable {
    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.table.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.table
    }

    /// Rows `0..n`, used as the absolute position table.
    pub fn prefix(&self, n: usize) -> Result<Tensor> {
        self.table.slice_rows(0, n)
    }

    /// Rows for distances `klen-1, klen-2, …, 0`.
    pub fn reversed(&self, klen: usize) -> Result<Tensor> {
        if klen > self.len() {
            return Err(Error::dim(
                "SinusoidTable::reversed",
                format!("need {klen} rows, table has {}", self.len()),
            ));
        }
        let d = self.width();
        let mut data = Vec::with_capacity(klen * d);
        for dist in (0..klen).rev() {
            data.extend_from_slice(self.row(dist));
        }
        Tensor::new(vec![klen, d], data)
    }
}

/// Weights of one relative attention layer. `u` and `v` hold the per-head
/// global biases concatenated head by head. `T` is `Tensor` for owned
/// weights and `Var` once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RelAttnParams<T = Tensor> {
    pub w_q: T,
    pub w_k_e: T,
    pub w_k_r: T,
    pub w_v: T,
    pub w_o: T,
    pub u: T,
    pub v: T,
}

/// Weights of one absolute-encoding attention layer. The position table is
/// added to the embeddings before the first layer, so it is not stored here.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsAttnParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttnParams<T = Tensor> {
    Relative(RelAttnParams<T>),
    Absolute(AbsAttnParams<T>),
}

impl<T> AttnParams<T> {
    /// Weights in storage order with their short names.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        match self {
            AttnParams::Relative(p) => vec![
                ("w_q", &p.w_q),
                ("w_k_e", &p.w_k_e),
                ("w_k_r", &p.w_k_r),
                ("w_v", &p.w_v),
                ("w_o", &p.w_o),
                ("u", &p.u),
                ("v", &p.v),
            ],
            AttnParams::Absolute(p) => vec![
                ("w_q", &p.w_q),
                ("w_k", &p.w_k),
                ("w_v", &p.w_v),
                ("w_o", &p.w_o),
            ],
        }
    }

    pub fn named_mut(&mut self) -> Vec<&mut T> {
        match self {
            AttnParams::Relative(p) => vec![
                &mut p.w_q,
                &mut p.w_k_e,
                &mut p.w_k_r,
                &mut p.w_v,
                &mut p.w_o,
                &mut p.u,
                &mut p.v,
            ],
            AttnParams::Absolute(p) => vec![&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o],
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U, E>) -> Result<AttnParams<U>, E> {
        Ok(match self {
            AttnParams::Relative(p) => AttnParams::Relative(RelAttnParams {
                w_q: f("w_q", &p.w_q)?,
                w_k_e: f("w_k_e", &p.w_k_e)?,
                w_k_r: f("w_k_r", &p.w_k_r)?,
                w_v: f("w_v", &p.w_v)?,
                w_o: f("w_o", &p.w_o)?,
                u: f("u", &p.u)?,
                v: f("v", &p.v)?,
            }),
            AttnParams::Absolute(p) => AttnParams::Absolute(AbsAttnParams {
                w_q: f("w_q", &p.w_q)?,
                w_k: f("w_k", &p.w_k)?,
                w_v: f("w_v", &p.w_v)?,
                w_o: f("w_o", &p.w_o)?,
            }),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Relative,
    Absolute,
}

/// Quadratic reference: projects `R_{i+M-j}` through `w_kr` for every valid
/// pair. Entries with `j > i+M` are left at zero and must be masked.
///
/// `q` is `L×dh`, `keys` is `(M+L)×dh`, `w_kr` is `d×dh`.
pub fn rel_scores_naive(
    q: &Tensor,
    keys: &Tensor,
    table: &SinusoidTable,
    w_kr: &Tensor,
    u: &[f64],
    v: &[f64],
) -> Result<Tensor> {
    let (l, dh) = q.require_matrix("rel_scores_naive")?;
    let (klen, kdh) = keys.require_matrix("rel_scores_naive")?;
    let (d, wdh) = w_kr.require_matrix("rel_scores_naive")?;
    if kdh != dh || wdh != dh || u.len() != dh || v.len() != dh || table.width() != d || klen < l {
        return Err(Error::dim("rel_scores_naive", "inconsistent head dimensions"));
    }
    let m = klen - l;
    let mut out = Tensor::zeros(&[l, klen]);
    let mut proj = vec![0.0; dh];
    for i in 0..l {
        for j in 0..=(i + m) {
            project_row(table.row(i + m - j), w_kr, &mut proj);
            let k = keys.row(j);
            let qi = q.row(i);
            let mut s = 0.0;
            for c in 0..dh {
                s += qi[c] * k[c] + qi[c] * proj[c] + u[c] * k[c] + v[c] * proj[c];
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

/// Positional terms (b)+(d) only, one projection per pair.
pub fn positional_terms_naive(
    q: &Tensor,
    mem_len: usize,
    table: &SinusoidTable,
    w_kr: &Tensor,
    v: &[f64],
) -> Result<Tensor> {
    let (l, dh) = q.require_matrix("positional_terms_naive")?;
    let klen = l + mem_len;
    let mut out = Tensor::zeros(&[l, klen]);
    let mut proj = vec![0.0; dh];
    for i in 0..l {
        let qi = q.row(i);
        for j in 0..=(i + mem_len) {
            project_row(table.row(i + mem_len - j), w_kr, &mut proj);
            let s: f64 = (0..dh).map(|c| (qi[c] + v[c]) * proj[c]).sum();
            out.set(i, j, s);
        }
    }
    Ok(out)
}

/// Positional terms (b)+(d) through the reversed projection and the shift.
pub fn positional_terms_fast(
    q: &Tensor,
    mem_len: usize,
    table: &SinusoidTable,
    w_kr: &Tensor,
    v: &[f64],
) -> Result<Tensor> {
    let l = q.rows();
    let klen = l + mem_len;
    let rel_keys = table.reversed(klen)?.matmul(w_kr)?;
    let b = rel_shift(&q.matmul_nt(&rel_keys)?)?;
    let d_row = Tensor::new(vec![1, v.len()], v.to_vec())?.matmul_nt(&rel_keys)?;
    let mut out = b;
    for i in 0..l {
        let shift = l - 1 - i;
        for k in 0..=(mem_len + i) {
            let val = out.get(i, k) + d_row.data()[k + shift];
            out.set(i, k, val);
        }
    }
    Ok(out)
}

fn project_row(r: &[f64], w: &Tensor, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (p, &rp) in r.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o += rp * wv;
        }
    }
}

/// Linear-cost scores on the tape.
///
/// `rel_keys` holds the projected distances in reversed order
/// (`rel_keys[k] = W_R R_{M+L-1-k}`); `u_row` and `v_row` are `1×dh`.
/// Terms (a)+(c) come from one product of `q + u` with the keys, term (b)
/// from `q · rel_keysᵀ` followed by the shift, and term (d) from the single
/// row `(rel_keys · v)ᵀ` repeated and shifted.
pub fn rel_scores_fast(tape: &mut Tape, q: Var, keys: Var, rel_keys: Var, u_row: Var, v_row: Var) -> Result<Var> {
    let l = tape.value(q).rows();
    let qu = tape.add_row(q, u_row)?;
    let content = tape.matmul_nt(qu, keys)?;
    let b_tilde = tape.matmul_nt(q, rel_keys)?;
    let b = tape.rel_shift(b_tilde)?;
    let d_tilde = tape.matmul_nt(v_row, rel_keys)?;
    let d_rows = tape.repeat_rows(d_tilde, l)?;
    let d = tape.rel_shift(d_rows)?;
    let cb = tape.add(content, b)?;
    tape.add(cb, d)
}

/// [`rel_scores_fast`] on plain tensors, with the same arguments as
/// [`rel_scores_naive`].
pub fn rel_scores_fast_values(
    q: &Tensor,
    keys: &Tensor,
    table: &SinusoidTable,
    w_kr: &Tensor,
    u: &[f64],
    v: &[f64],
) -> Result<Tensor> {
    let klen = keys.rows();
    let mut tape = Tape::new();
    let rel = table.reversed(klen)?.matmul(w_kr)?;
    let q = tape.constant(q.clone())?;
    let keys = tape.constant(keys.clone())?;
    let rel = tape.constant(rel)?;
    let u = tape.constant(Tensor::new(vec![1, u.len()], u.to_vec())?)?;
    let v = tape.constant(Tensor::new(vec![1, v.len()], v.to_vec())?)?;
    let out = rel_scores_fast(&mut tape, q, keys, rel, u, v)?;
    Ok(tape.value(out).clone())
}

/// Single-head absolute-encoding scores `(x_q W_q)(x_k W_k)ᵀ` where the inputs
/// already include their position rows.
pub fn abs_scores(q_in: &Tensor, ext_in: &Tensor, w_q: &Tensor, w_k: &Tensor) -> Result<Tensor> {
    let q = q_in.matmul(w_q)?;
    let k = ext_in.matmul(w_k)?;
    q.matmul_nt(&k)
}

/// The four terms of the absolute score, content/position split explicitly:
/// `(a) E_q·E_k`, `(b) E_q·U_k`, `(c) U_q·E_k`, `(d) U_q·U_k`, all through
/// `W_q` and `W_k`.
pub fn abs_score_terms(
    e_q: &Tensor,
    u_q: &Tensor,
    e_k: &Tensor,
    u_k: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
) -> Result<[Tensor; 4]> {
    let qe = e_q.matmul(w_q)?;
    let qu = u_q.matmul(w_q)?;
    let ke = e_k.matmul(w_k)?;
    let ku = u_k.matmul(w_k)?;
    Ok([
        qe.matmul_nt(&ke)?,
        qe.matmul_nt(&ku)?,
        qu.matmul_nt(&ke)?,
        qu.matmul_nt(&ku)?,
    ])
}

/// Static shape information for one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub n_heads: usize,
    pub d_head: usize,
}

/// One attention sublayer: queries from `h`, keys and values from
/// `[SG(mem) ∘ h]`, causal masking, output projection, residual and
/// LayerNorm.
#[allow(clippy::too_many_arguments)]
pub fn attention_sublayer(
    tape: &mut Tape,
    h: Var,
    mem: Option<Var>,
    params: &AttnParams<Var>,
    ln_gain: Var,
    ln_bias: Var,
    shape: AttnShape,
    table: &SinusoidTable,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let l = tape.value(h).rows();
    let ext = match mem {
        Some(m) if tape.value(m).rows() > 0 => {
            let sg = tape.stop_gradient(m)?;
            tape.concat_rows(&[sg, h])?
        }
        _ => h,
    };
    let klen = tape.value(ext).rows();
    let mem_len = klen - l;
    let mask: Arc<[bool]> = causal_mask(l, mem_len).into();
    let scale = 1.0 / (shape.d_head as f64).sqrt();
    let dh = shape.d_head;

    let (q, k, val, w_o, rel) = match params {
        AttnParams::Relative(p) => {
            let q = tape.matmul(h, p.w_q)?;
            let k = tape.matmul(ext, p.w_k_e)?;
            let val = tape.matmul(ext, p.w_v)?;
            let r = tape.constant(table.reversed(klen)?)?;
            let rk = tape.matmul(r, p.w_k_r)?;
            let u = tape.reshape(p.u, &[shape.n_heads, dh])?;
            let v = tape.reshape(p.v, &[shape.n_heads, dh])?;
            (q, k, val, p.w_o, Some((rk, u, v)))
        }
        AttnParams::Absolute(p) => {
            let q = tape.matmul(h, p.w_q)?;
            let k = tape.matmul(ext, p.w_k)?;
            let val = tape.matmul(ext, p.w_v)?;
            (q, k, val, p.w_o, None)
        }
    };

    let mut heads = Vec::with_capacity(shape.n_heads);
    for hd in 0..shape.n_heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(val, hd * dh, dh)?;
        let raw = match rel {
            Some((rk, u, v)) => {
                let rkh = tape.slice_cols(rk, hd * dh, dh)?;
                let uh = tape.slice_rows(u, hd, 1)?;
                let vbh = tape.slice_rows(v, hd, 1)?;
                rel_scores_fast(tape, qh, kh, rkh, uh, vbh)?
            }
            None => tape.matmul_nt(qh, kh)?,
        };
        let scores = tape.scale(raw, scale)?;
        let mut probs = tape.masked_softmax(scores, mask.clone())?;
        if let Some(dr) = dropout.as_deref_mut() {
            probs = dr.apply(tape, probs)?;
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    let attn = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.matmul(attn, w_o)?;
    let res = tape.add(out, h)?;
    tape.layer_norm(res, ln_gain, ln_bias, LAYER_NORM_EPS)
}
