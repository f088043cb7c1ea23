//! Parameterized layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass onto a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = fan_in_bound(in_dim);
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng)?;
        let bias = if bias {
            Some(store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x[.., in] -> [.., out]`
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let table = store.add_uniform(format!("{name}.table"), &[rows, dim], fan_in_bound(rows), rng)?;
        Ok(Self { table, rows, dim })
    }

    /// Looks up `ids` laid out as `shape`; output shape is `shape ++ [dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = g.param(self.table)?;
        let e = g.embedding(t, ids)?;
        let mut out_shape = shape.to_vec();
        out_shape.push(self.dim);
        g.reshape(e, &out_shape)
    }
}

/// Gated recurrent unit with reset gate applied to the hidden projection:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = n + z * (h - n)
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // gates use the hidden size as fan-in, as is customary for GRUs
        let bound = fan_in_bound(hidden_dim);
        let mk = |store: &mut ParamStore<T>, part: &str, rows: usize, rng: &mut ChaCha8Rng| -> Result<Linear> {
            let weight = store.add_uniform(format!("{name}.{part}.weight"), &[rows, 3 * hidden_dim], bound, rng)?;
            let bias = store.add_uniform(format!("{name}.{part}.bias"), &[3 * hidden_dim], bound, rng)?;
            Ok(Linear {
                weight,
                bias: Some(bias),
                in_dim: rows,
                out_dim: 3 * hidden_dim,
            })
        };
        let input = mk(store, "input", in_dim, rng)?;
        let hidden = mk(store, "hidden", hidden_dim, rng)?;
        Ok(Self {
            input,
            hidden,
            in_dim,
            hidden_dim,
        })
    }

    /// One step: `x[B, in]`, `h[B, H]` -> `h'[B, H]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        if g.shape(h).last() != Some(&hd) || g.shape(x).last() != Some(&self.in_dim) {
            return shape_err("gru_cell", format!("x {:?}, h {:?}", g.shape(x), g.shape(h)));
        }
        let gi = self.input.forward(g, x)?;
        let gh = self.hidden.forward(g, h)?;
        let (ir, iz, inn) = (
            g.slice_last(gi, 0, hd)?,
            g.slice_last(gi, hd, hd)?,
            g.slice_last(gi, 2 * hd, hd)?,
        );
        let (hr, hz, hn) = (
            g.slice_last(gh, 0, hd)?,
            g.slice_last(gh, hd, hd)?,
            g.slice_last(gh, 2 * hd, hd)?,
        );
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z)?;
        let rh = g.mul(r, hn)?;
        let n = g.add(inn, rh)?;
        let n = g.tanh(n)?;
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    pub fn num_params(in_dim: usize, hidden_dim: usize) -> usize {
        3 * hidden_dim * (in_dim + hidden_dim + 2)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add_const(format!("{name}.gamma"), &[dim], 1.0)?;
        let beta = store.add_const(format!("{name}.beta"), &[dim], 0.0)?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma)?, g.param(self.beta)?);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Scaled dot-product attention over `heads` heads with input and output
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return shape_err("multi_head_attention", format!("{heads} heads do not divide {dim}"));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `query_in[B, Tq, D]` attends over `memory[B, Tk, D]`. `mask` is an
    /// additive `[B, Tq, Tk]` tensor (0 to keep, a large negative to block).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query_in: Var,
        memory: Var,
        mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, query_in, memory, mask, dropout)?.0)
    }

    /// Like [`MultiHeadAttention::forward`], also returning the
    /// `[B * heads, Tq, Tk]` attention weights.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query_in: Var,
        memory: Var,
        mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, query_in)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let dh = self.dim / self.heads;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let weights = g.softmax_masked(scores, mask, self.heads)?;
        let dropped = g.dropout(weights, dropout)?;
        let ctx = g.batch_matmul(dropped, v, false)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        Ok((self.output.forward(g, ctx)?, weights))
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim, true)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, dropout)?;
        self.outer.forward(g, h)
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        Linear::num_params(dim, hidden, true) + Linear::num_params(hidden, dim, true)
    }
}

/// Additive attention mask `[B, Tq, Tk]`: blocks padded keys and, when
/// `causal`, keys after the query position.
pub fn attention_mask<T: Real>(key_pad: &[Vec<bool>], query_len: usize, causal: bool) -> Tensor<T> {
    let blocked = T::lit(-1e9);
    let b = key_pad.len();
    let tk = key_pad.first().map_or(0, |r| r.len());
    let mut data = vec![T::zero(); b * query_len * tk];
    for (bi, pads) in key_pad.iter().enumerate() {
        for q in 0..query_len {
            for (k, &is_pad) in pads.iter().enumerate() {
                if is_pad || (causal && k > q) {
                    data[(bi * query_len + q) * tk + k] = blocked;
                }
            }
        }
    }
    Tensor::new(&[b, query_len, tk], data).expect("mask shape")
}
