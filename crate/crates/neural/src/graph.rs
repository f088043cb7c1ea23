//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Every op appends one node
//! holding its value; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for parameters and for inputs created with
//! [`Graph::input`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NeuralError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulRows {
        x: Var,
        factors: Vec<T>,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    SelectStep {
        x: Var,
        t: usize,
    },
    StackSteps(Vec<Var>),
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Recip(Var),
    Sum(Var),
    Dot {
        x: Var,
        w: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::MulRows { .. } => "mul_rows",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectStep { .. } => "select_step",
            Op::StackSteps(_) => "stack_steps",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Recip(_) => "recip",
            Op::Sum(_) => "sum",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node, if any flowed into it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, indexed by [`ParamId`].
    pub fn params(&self) -> &[Option<Tensor<T>>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    negate_grad_of: Option<Var>,
}

impl<'s, T: Real> Graph<'s, T> {
    /// Inference graph: dropout is the identity.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            dropout_rng: None,
            negate_grad_of: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(store: &'s ParamStore<T>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mutation hook for gradient-check canaries: flips the sign of the
    /// gradient leaving `var` during backward.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, var: Var) {
        self.negate_grad_of = Some(var);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NeuralError::NonFiniteValue { op: op.name() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (gradient reported by [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), true)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// `a[.., k] x b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        }
        let (rows, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, ng)
    }

    /// Batched `a[B, m, k] x b[B, k, n]`, or `b[B, n, k]` transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("batch_matmul", format!("{sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.len() != n {
            return shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push(t, Op::AddBias { x, bias }, ng)
    }

    /// Multiplies row `i` of `x` by the constant `factors[i]`.
    pub fn mul_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return shape_err("mul_rows", format!("{} factors for {:?}", factors.len(), xv.shape()));
        }
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for (row, &f) in data.chunks_mut(n).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::MulRows { x, factors }, ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None, 1)
    }

    /// Softmax over the last dimension after adding a constant additive mask.
    ///
    /// `x` is `[B * heads, q, k]` and `mask` is `[B, q, k]`, shared by the
    /// `heads` consecutive blocks of each batch entry.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&Tensor<T>>, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        if let Some(mask) = mask {
            let s = xv.shape();
            let block = if s.len() >= 2 { s[s.len() - 2] * n } else { n };
            if block == 0 || mask.len() * heads != data.len() || mask.len() % block != 0 {
                return shape_err(
                    "softmax_masked",
                    format!("x {:?}, mask {:?}, heads {heads}", s, mask.shape()),
                );
            }
            for (bi, chunk) in data.chunks_mut(block).enumerate() {
                let m = &mask.data()[(bi / heads) * block..(bi / heads + 1) * block];
                for (v, &mv) in chunk.iter_mut().zip(m) {
                    *v += mv;
                }
            }
        }
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// the affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n || bv.len() != n {
            return shape_err("layer_norm", format!("x {:?}, gamma {:?}", xv.shape(), gv.shape()));
        }
        let eps = T::lit(eps);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Gathers rows of `table[V, d]`; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return shape_err("embedding", format!("table {:?}", tv.shape()));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NeuralError::InvalidArgument {
                    op: "embedding",
                    detail: format!("id {id} out of range for {v} rows"),
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let ng = self.ng(table);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// `[B, T, H * dh]` to `[B * H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return shape_err("split_heads", format!("{s:?} into {heads} heads"));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let tns = Tensor::new(&[b * heads, t, dh], out)?;
        let ng = self.ng(x);
        self.push(tns, Op::SplitHeads { x, heads }, ng)
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return shape_err("merge_heads", format!("{s:?} from {heads} heads"));
        }
        let (b, t, dh) = (s[0] / heads, s[1], s[2]);
        let d = dh * heads;
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let dst = (bi * t + ti) * d + h * dh;
                    let src = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let tns = Tensor::new(&[b, t, d], out)?;
        let ng = self.ng(x);
        self.push(tns, Op::MergeHeads { x, heads }, ng)
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return shape_err("concat", format!("{s:?} vs leading {lead:?}"));
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if start + len > n {
            return shape_err("slice", format!("{start}+{len} of {n}"));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out)?, Op::Slice { x, start }, ng)
    }

    /// `x[:, t, :]` of a `[B, T, E]` tensor.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || t >= s[1] {
            return shape_err("select_step", format!("step {t} of {s:?}"));
        }
        let (b, tt, e) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * e);
        for bi in 0..b {
            let off = (bi * tt + t) * e;
            out.extend_from_slice(&xv.data()[off..off + e]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, e], out)?, Op::SelectStep { x, t }, ng)
    }

    /// Stacks `T` tensors of shape `[B, E]` into `[B, T, E]`.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("stack_steps", "no inputs");
        }
        let s0 = self.value(parts[0]).shape().to_vec();
        if s0.len() != 2 || parts.iter().any(|&p| self.value(p).shape() != &s0[..]) {
            return shape_err("stack_steps", format!("inconsistent step shapes, first {s0:?}"));
        }
        let (b, e, tt) = (s0[0], s0[1], parts.len());
        let mut out = vec![T::zero(); b * tt * e];
        for (t, &p) in parts.iter().enumerate() {
            let pv = self.value(p).data();
            for bi in 0..b {
                let dst = (bi * tt + t) * e;
                out[dst..dst + e].copy_from_slice(&pv[bi * e..(bi + 1) * e]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[b, tt, e], out)?, Op::StackSteps(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Inverted dropout; identity on inference graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NeuralError::InvalidArgument {
                op: "dropout",
                detail: format!("probability {p}"),
            });
        }
        let n = self.value(x).len();
        let keep = T::lit(1.0 / (1.0 - p));
        let rng = self.dropout_rng.as_mut().unwrap();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    /// Mean categorical cross-entropy of `softmax(logits)` against `targets`,
    /// over the rows where `mask` is true. Returns a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.last_dim());
        if targets.len() != rows || mask.len() != rows {
            return shape_err(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
            );
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, row) in lv.data().chunks(v).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_sum = sum.ln() + max;
            for &x in row {
                probs.push((x - log_sum).exp());
            }
            if mask[r] {
                let t = targets[r];
                if t >= v {
                    return Err(NeuralError::InvalidArgument {
                        op: "cross_entropy",
                        detail: format!("target {t} out of range {v}"),
                    });
                }
                total += (log_sum - row[t]).to_f64().unwrap();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(T::lit(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Elementwise `1 / (x + eps)`.
    pub fn recip(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let t = self.value(x).map(|v| T::one() / (v + eps));
        let ng = self.ng(x);
        self.push(t, Op::Recip(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `sum(x * w)` for a constant weight tensor of the same size.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != w.len() {
            return shape_err("dot", format!("{:?} . {:?}", xv.shape(), w.shape()));
        }
        let s = xv.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                w: w.data().to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a `[1]`-shaped loss.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.negate_grad_of == Some(Var(i)) {
                g = g.map(|v| -v);
            }
            let mut contrib: Vec<(Var, Tensor<T>)> = Vec::new();
            self.local_backward(&node.op, &node.value, &g, &mut contrib)?;
            for (v, cg) in contrib {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&cg),
                    slot => *slot = Some(cg),
                }
            }
            if let Op::Param(pid) = &node.op {
                param_grads[pid.index()] = Some(g.clone());
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn local_backward(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        contrib: &mut Vec<(Var, Tensor<T>)>,
    ) -> Result<()> {
        let val = |v: Var| self.value(v);
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (rows, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); rows * k];
                    T::gemm(rows, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    contrib.push((*a, Tensor::new(av.shape(), ga)?));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, av.data(), true, g.data(), false, &mut gb, false);
                    contrib.push((*b, Tensor::new(bv.shape(), gb)?));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    contrib.push((*a, Tensor::new(av.shape(), ga)?));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        let as_ = &av.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gs, true, as_, false, dst, false);
                        } else {
                            T::gemm(k, m, n, as_, true, gs, false, dst, false);
                        }
                    }
                    contrib.push((*b, Tensor::new(bv.shape(), gb)?));
                }
            }
            Op::Add(a, b) => {
                contrib.push((*a, g.clone()));
                contrib.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                contrib.push((*a, g.clone()));
                contrib.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    contrib.push((*a, Tensor::new(g.shape(), d)?));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    contrib.push((*b, Tensor::new(g.shape(), d)?));
                }
            }
            Op::AddBias { x, bias } => {
                contrib.push((*x, g.clone()));
                if self.ng(*bias) {
                    let n = g.last_dim();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    contrib.push((*bias, Tensor::new(val(*bias).shape(), gb)?));
                }
            }
            Op::MulRows { x, factors } => {
                let n = g.last_dim();
                let mut d = g.data().to_vec();
                for (row, &f) in d.chunks_mut(n).zip(factors) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                contrib.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Scale { x, c } => contrib.push((*x, g.map(|v| v * *c))),
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                contrib.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                contrib.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                contrib.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let mut d = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - dot)));
                }
                contrib.push((*x, Tensor::new(out.shape(), d)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.last_dim();
                let nf = T::from_usize(n).unwrap();
                let gam = val(*gamma).data();
                let mut dx = Vec::with_capacity(out.len());
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for (r, (gr, hr)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        dx.push(rstd[r] * (dh - mean_d - hr[j] * mean_dh));
                    }
                }
                contrib.push((*x, Tensor::new(out.shape(), dx)?));
                contrib.push((*gamma, Tensor::new(val(*gamma).shape(), dgamma)?));
                contrib.push((*beta, Tensor::new(val(*beta).shape(), dbeta)?));
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut gt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data()[r * d + j];
                    }
                }
                contrib.push((*table, Tensor::new(tv.shape(), gt)?));
            }
            Op::SplitHeads { x, heads } => {
                let s = out.shape();
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let (b, d) = (bh / heads, dh * heads);
                let mut dx = vec![T::zero(); out.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let dst = (bi * t + ti) * d + h * dh;
                            let src = ((bi * heads + h) * t + ti) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                contrib.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            Op::MergeHeads { x, heads } => {
                let s = out.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut dx = vec![T::zero(); out.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let src = (bi * t + ti) * d + h * dh;
                            let dst = ((bi * heads + h) * t + ti) * dh;
                            dx[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                contrib.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        contrib.push((p, Tensor::new(val(p).shape(), d)?));
                    }
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let xv = val(*x);
                let (n, len) = (xv.last_dim(), out.last_dim());
                let mut d = vec![T::zero(); xv.len()];
                for (r, gr) in g.data().chunks(len).enumerate() {
                    d[r * n + start..r * n + start + len].copy_from_slice(gr);
                }
                contrib.push((*x, Tensor::new(xv.shape(), d)?));
            }
            Op::SelectStep { x, t } => {
                let xv = val(*x);
                let s = xv.shape();
                let (b, tt, e) = (s[0], s[1], s[2]);
                let mut d = vec![T::zero(); xv.len()];
                for bi in 0..b {
                    let off = (bi * tt + t) * e;
                    d[off..off + e].copy_from_slice(&g.data()[bi * e..(bi + 1) * e]);
                }
                contrib.push((*x, Tensor::new(s, d)?));
            }
            Op::StackSteps(parts) => {
                let s = out.shape();
                let (b, tt, e) = (s[0], s[1], s[2]);
                for (t, &p) in parts.iter().enumerate() {
                    if !self.ng(p) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(b * e);
                    for bi in 0..b {
                        let off = (bi * tt + t) * e;
                        d.extend_from_slice(&g.data()[off..off + e]);
                    }
                    contrib.push((p, Tensor::new(&[b, e], d)?));
                }
            }
            Op::Reshape(x) => {
                contrib.push((*x, g.clone().reshaped(val(*x).shape())?));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                contrib.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = val(*logits);
                let v = lv.last_dim();
                let mut d = vec![T::zero(); lv.len()];
                if *count > 0 {
                    let scale = g.data()[0] / T::from_usize(*count).unwrap();
                    for r in 0..lv.rows() {
                        if !mask[r] {
                            continue;
                        }
                        for j in 0..v {
                            let one_hot = if j == targets[r] { T::one() } else { T::zero() };
                            d[r * v + j] = (probs[r * v + j] - one_hot) * scale;
                        }
                    }
                }
                contrib.push((*logits, Tensor::new(lv.shape(), d)?));
            }
            Op::Recip(x) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| -gv * y * y).collect();
                contrib.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Sum(x) => {
                contrib.push((*x, Tensor::full(val(*x).shape(), g.data()[0])));
            }
            Op::Dot { x, w } => {
                let gv = g.data()[0];
                let d = w.iter().map(|&wv| wv * gv).collect();
                contrib.push((*x, Tensor::new(val(*x).shape(), d)?));
            }
        }
        Ok(())
    }
}
