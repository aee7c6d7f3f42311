use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use super::{attention_pool, FOODSPACE_DIM};
use crate::{Error, Result};

/// Right-padded token batch.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub tokens: Tensor,
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

/// Pads index sequences with `pad` to the longest length. Every sequence
/// must be non-empty.
pub fn pad_sequences(seqs: &[Vec<usize>], pad: usize, dtype: DType) -> Result<PaddedBatch> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
    if seqs.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("ingredient sequence of length 0".into()));
    }
    let mut tokens = Vec::with_capacity(seqs.len() * t);
    let mut mask = Vec::with_capacity(seqs.len() * t);
    for s in seqs {
        for i in 0..t {
            tokens.push(s.get(i).copied().unwrap_or(pad) as u32);
            mask.push(if i < s.len() { 1f32 } else { 0.0 });
        }
    }
    let dev = Device::Cpu;
    Ok(PaddedBatch {
        tokens: Tensor::from_vec(tokens, (seqs.len(), t), &dev)?,
        mask: Tensor::from_vec(mask, (seqs.len(), t), &dev)?.to_dtype(dtype)?,
        lengths: seqs.iter().map(Vec::len).collect(),
    })
}

struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl Lstm {
    fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let init = Init::Uniform { lo: -bound, up: bound };
        Ok(Self {
            w_ih: vb.get_with_hints((4 * hidden, input), "w_ih", init)?,
            w_hh: vb.get_with_hints((4 * hidden, hidden), "w_hh", init)?,
            bias: vb.get_with_hints(4 * hidden, "bias", init)?,
            hidden,
        })
    }

    /// Runs over `x: [B, T, E]`; padded steps (mask 0) carry the state
    /// through unchanged. Returns `[B, T, H]`.
    fn run(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, e) = x.dims3()?;
        let h4 = 4 * self.hidden;
        let xg = x
            .reshape((b * t, e))?
            .matmul(&self.w_ih.t()?)?
            .broadcast_add(&self.bias)?
            .reshape((b, t, h4))?;
        let w_hh_t = self.w_hh.t()?;
        let mut h = Tensor::zeros((b, self.hidden), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = (xg.narrow(1, step, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
            let chunk = |k: usize| gates.narrow(1, k * self.hidden, self.hidden);
            let i = candle_nn::ops::sigmoid(&chunk(0)?)?;
            let f = candle_nn::ops::sigmoid(&chunk(1)?)?;
            let g = chunk(2)?.tanh()?;
            let o = candle_nn::ops::sigmoid(&chunk(3)?)?;
            let c_new = ((f * &c)? + (i * g)?)?;
            let h_new = (o * c_new.tanh()?)?;
            let m = mask.narrow(1, step, 1)?;
            let keep = (1.0 - &m)?;
            c = (c_new.broadcast_mul(&m)? + c.broadcast_mul(&keep)?)?;
            h = (h_new.broadcast_mul(&m)? + h.broadcast_mul(&keep)?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// Indices that reverse each sequence within its own length, leaving the
/// padding in place. The map is its own inverse.
fn reversal_index(lengths: &[usize], t: usize) -> Result<Tensor> {
    let mut idx = Vec::with_capacity(lengths.len() * t);
    for (b, &n) in lengths.iter().enumerate() {
        for i in 0..t {
            let src = if i < n { n - 1 - i } else { i };
            idx.push((b * t + src) as u32);
        }
    }
    Ok(Tensor::from_vec(idx, lengths.len() * t, &Device::Cpu)?)
}

/// Embedding table, bidirectional LSTM, attention pooling and projection.
pub struct TextEncoder {
    embedding: Tensor,
    forward: Lstm,
    backward: Lstm,
    context: Tensor,
    proj: Linear,
    attention: bool,
    rows: usize,
}

pub struct TextOutput {
    pub p: Tensor,
    pub states: Tensor,
    pub pooled: Tensor,
    pub weights: Option<Tensor>,
}

impl TextEncoder {
    pub fn new(rows: usize, embedding_dim: usize, hidden_per_direction: usize, attention: bool, vb: VarBuilder) -> Result<Self> {
        let hidden = 2 * hidden_per_direction;
        Ok(Self {
            embedding: vb.get_with_hints((rows, embedding_dim), "embedding", Init::Randn { mean: 0.0, stdev: 0.1 })?,
            forward: Lstm::new(embedding_dim, hidden_per_direction, vb.pp("lstm_fwd"))?,
            backward: Lstm::new(embedding_dim, hidden_per_direction, vb.pp("lstm_bwd"))?,
            context: vb.get_with_hints(hidden, "context", Init::Uniform { lo: -0.1, up: 0.1 })?,
            proj: candle_nn::linear(hidden, FOODSPACE_DIM, vb.pp("proj"))?,
            attention,
            rows,
        })
    }

    pub fn context(&self) -> &Tensor {
        &self.context
    }

    pub fn forward(&self, seqs: &[Vec<usize>]) -> Result<TextOutput> {
        if let Some(&bad) = seqs.iter().flatten().find(|&&i| i >= self.rows) {
            return Err(Error::TokenOutOfRange {
                index: bad,
                size: self.rows,
            });
        }
        let batch = pad_sequences(seqs, self.rows - 1, self.embedding.dtype())?;
        let (b, t) = batch.tokens.dims2()?;
        let e = self.embedding.dim(1)?;
        let flat = self.embedding.index_select(&batch.tokens.flatten_all()?, 0)?;
        let x = flat.reshape((b, t, e))?;
        let fwd = self.forward.run(&x, &batch.mask)?;
        let rev = reversal_index(&batch.lengths, t)?;
        let x_rev = flat.index_select(&rev, 0)?.reshape((b, t, e))?;
        let h = self.backward.hidden;
        let bwd = self
            .backward
            .run(&x_rev, &batch.mask)?
            .reshape((b * t, h))?
            .index_select(&rev, 0)?
            .reshape((b, t, h))?;
        let states = Tensor::cat(&[&fwd, &bwd], D::Minus1)?;
        let (pooled, weights) = if self.attention {
            let (p, w) = attention_pool(&states, &self.context, Some(&batch.mask))?;
            (p, Some(w))
        } else {
            // Final forward state (carried to the last step) and the
            // backward state at the first real position.
            let last_fwd = fwd.narrow(1, t - 1, 1)?.squeeze(1)?;
            let first_bwd = bwd.narrow(1, 0, 1)?.squeeze(1)?;
            (Tensor::cat(&[&last_fwd, &first_bwd], D::Minus1)?, None)
        };
        Ok(TextOutput {
            p: self.proj.forward(&pooled)?,
            states,
            pooled,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn encoder(attention: bool, dtype: DType) -> (ParamStore, TextEncoder) {
        let store = ParamStore::with_dtype(3, dtype);
        let enc = TextEncoder::new(6, 8, 5, attention, store.var_builder().pp("text")).unwrap();
        (store, enc)
    }

    #[test]
    fn padding_does_not_change_encodings() {
        for attention in [true, false] {
            let (_, enc) = encoder(attention, DType::F64);
            let alone: Vec<f64> = enc.forward(&[vec![1, 2]]).unwrap().p.flatten_all().unwrap().to_vec1().unwrap();
            let batched: Vec<Vec<f64>> = enc.forward(&[vec![1, 2], vec![3, 4, 0, 1]]).unwrap().p.to_vec2().unwrap();
            for (a, b) in alone.iter().zip(&batched[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shapes_and_single_token_attention() {
        let (_, enc) = encoder(true, DType::F32);
        let out = enc.forward(&[vec![2], vec![0, 1, 3]]).unwrap();
        assert_eq!(out.p.dims(), &[2, FOODSPACE_DIM]);
        assert_eq!(out.states.dims(), &[2, 3, 10]);
        let w: Vec<Vec<f32>> = out.weights.unwrap().to_vec2().unwrap();
        assert_eq!(w[0], vec![1.0, 0.0, 0.0]);
        assert!((w[1].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reversal_is_an_involution() {
        let idx: Vec<u32> = reversal_index(&[2, 3], 3).unwrap().to_vec1().unwrap();
        assert_eq!(idx, vec![1, 0, 2, 5, 4, 3]);
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let (_, enc) = encoder(true, DType::F32);
        assert!(matches!(enc.forward(&[vec![6]]), Err(Error::TokenOutOfRange { index: 6, size: 6 })));
        assert!(enc.forward(&[vec![]]).is_err());
    }
}
