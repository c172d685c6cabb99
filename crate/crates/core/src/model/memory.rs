use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cached hidden states, one matrix per layer. Layer `n` holds the inputs
/// `h^{n}` that layer `n` consumed on previous segments, so layer 0 caches
/// embeddings. Plain tensors carry no tape, which is what makes the cache a
/// stop-gradient boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    layers: Vec<Tensor>,
    width: usize,
}

impl MemoryState {
    pub fn empty(n_layers: usize, d_model: usize) -> Self {
        MemoryState {
            layers: vec![Tensor::zeros(&[0, d_model]); n_layers],
            width: d_model,
        }
    }

    /// Builds memory from explicit per-layer matrices, which must agree in
    /// shape.
    pub fn from_layers(layers: Vec<Tensor>, d_model: usize) -> Result<Self> {
        let rows = layers.first().map_or(0, |t| t.rows());
        for t in &layers {
            let (r, c) = t.require_matrix("MemoryState")?;
            if r != rows || c != d_model {
                return Err(Error::dim("MemoryState", format!("layer shape {:?}, expected [{rows}, {d_model}]", t.shape())));
            }
        }
        Ok(MemoryState { layers, width: d_model })
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layer(&self, n: usize) -> &Tensor {
        &self.layers[n]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    /// Keeps only the most recent `m` positions.
    pub fn truncate_front(&self, m: usize) -> MemoryState {
        let len = self.len();
        if m >= len {
            return self.clone();
        }
        let layers = self
            .layers
            .iter()
            .map(|t| t.slice_rows(len - m, m).expect("rows in range"))
            .collect();
        MemoryState { layers, width: self.width }
    }
}

/// New memory for each layer is the last `m_target` rows of `[old ∘ new]`.
/// `m_target` may exceed the segment length, in which case the cache spans
/// several past segments.
pub fn update_memory(old: &MemoryState, new_hidden: &[Tensor], m_target: usize) -> Result<MemoryState> {
    if new_hidden.len() != old.n_layers() {
        return Err(Error::dim(
            "update_memory",
            format!("{} hidden layers for {} memory layers", new_hidden.len(), old.n_layers()),
        ));
    }
    let mut layers = Vec::with_capacity(new_hidden.len());
    for (prev, new) in old.layers.iter().zip(new_hidden) {
        if m_target == 0 {
            layers.push(Tensor::zeros(&[0, old.width]));
            continue;
        }
        let (new_rows, c) = new.require_matrix("update_memory")?;
        if c != old.width {
            return Err(Error::dim("update_memory", format!("hidden width {c}, memory width {}", old.width)));
        }
        let prev_rows = prev.shape()[0];
        let total = prev_rows + new_rows;
        let keep = m_target.min(total);
        let skip = total - keep;
        let mut data = Vec::with_capacity(keep * c);
        if skip < prev_rows {
            data.extend_from_slice(&prev.data()[skip * c..]);
            data.extend_from_slice(new.data());
        } else {
            data.extend_from_slice(&new.data()[(skip - prev_rows) * c..]);
        }
        layers.push(Tensor::new(vec![keep, c], data)?);
    }
    Ok(MemoryState {
        layers,
        width: old.width,
    })
}
