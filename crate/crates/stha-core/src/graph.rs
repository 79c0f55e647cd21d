//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`]; leaves registered as frozen
//! never receive gradients, and nothing downstream of only-frozen inputs is
//! differentiated.

use alloc::borrow::Cow;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::memory::{self, sigmoid, AttentionKernel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces every tensor; shapes must match the existing layout.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch {
                context: "ParamStore::load count",
                expected: vec![self.tensors.len()],
                actual: vec![tensors.len()],
            });
        }
        for (old, new) in self.tensors.iter().zip(&tensors) {
            ensure_shape("ParamStore::load", old.shape(), new.shape())?;
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How the diversity term treats inter-block pattern distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Mean of `max(0, γ − ‖k − k′‖)` over inter-block pairs.
    #[default]
    HingeNegative,
    /// Mean of `‖k − k′‖` over inter-block pairs.
    Literal,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvT2 {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ConcatChannels(Vec<Var>),
    ToQueries(Var),
    FromQueries(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MemoryRead {
        q: Var,
        k: Var,
        kernel: AttentionKernel,
    },
    CosineRows(Var, Var),
    RowNormSum(Var),
    Sum(Var),
    Diversity {
        banks: Vec<Var>,
        margin: f64,
        mode: DiversityMode,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A parameter leaf borrowing from `store`. Frozen leaves act as constants.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId, trainable: bool) -> Var {
        let op = if trainable { Op::Param(id) } else { Op::Leaf };
        self.push(Cow::Borrowed(store.get(id)), op, trainable)
    }

    /// A differentiable leaf owning its value, reported under `id` in gradients.
    pub fn param_owned(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                expected: vec![
                    xs.first().copied().unwrap_or(0),
                    ws.get(1).copied().unwrap_or(0),
                    0,
                    0,
                ],
                actual: xs.to_vec(),
            });
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (batch, co) = (xs[0], ws[0]);
        ensure_shape("conv2d bias", &[co], self.shape(b))?;
        let out = kernels::conv2d(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            self.value(b).data(),
            co,
        );
        let t = Tensor::from_vec(&[batch, co, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push_op(t, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// 2×2 stride-2 transposed convolution; `w` is `[ci, co, 2, 2]`.
    pub fn conv_t2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::ShapeMismatch {
                context: "conv_t2",
                expected: vec![xs.get(1).copied().unwrap_or(0), 0, 2, 2],
                actual: ws.to_vec(),
            });
        }
        let co = ws[1];
        ensure_shape("conv_t2 bias", &[co], self.shape(b))?;
        let out = kernels::conv_t2(
            self.value(x).data(),
            xs[0],
            xs[1],
            xs[2],
            xs[3],
            self.value(w).data(),
            self.value(b).data(),
            co,
        );
        let t = Tensor::from_vec(&[xs[0], co, 2 * xs[2], 2 * xs[3]], out)?;
        Ok(self.push_op(t, Op::ConvT2 { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push_op(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push_op(t, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_shape("add", self.shape(a), self.shape(b))?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_shape("sub", self.shape(a), self.shape(b))?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push_op(t, Op::Scale(a, factor), &[a])
    }

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels",
                    expected: first,
                    actual: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let (batch, plane) = (first[0], first[2] * first[3]);
        let mut out = Vec::with_capacity(batch * channels * plane);
        for b in 0..batch {
            for &p in parts {
                out.extend_from_slice(self.value(p).sample(b));
            }
        }
        let t = Tensor::from_vec(&[batch, channels, first[2], first[3]], out)?;
        Ok(self.push_op(t, Op::ConcatChannels(parts.to_vec()), parts))
    }

    /// `[B, C, H, W]` → `[B·H·W, C]`, one row per spatial position.
    pub fn to_queries(&mut self, x: Var) -> Var {
        let t = nchw_to_rows(self.value(x));
        self.push_op(t, Op::ToQueries(x), &[x])
    }

    /// Inverse of [`Graph::to_queries`] given the target `[B, C, H, W]` shape.
    pub fn from_queries(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = shape;
        ensure_shape("from_queries", &[b * h * w, c], self.shape(x))?;
        let t = rows_to_nchw(self.value(x), shape);
        Ok(self.push_op(t, Op::FromQueries(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// `x·w + b` with `x: [R, F]`, `w: [F, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                context: "linear",
                expected: vec![
                    xs.first().copied().unwrap_or(0),
                    ws.first().copied().unwrap_or(0),
                ],
                actual: xs,
            });
        }
        let (r, f, o) = (xs[0], xs[1], ws[1]);
        ensure_shape("linear bias", &[o], self.shape(b))?;
        let mut out = Tensor::zeros(&[r, o]);
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(o) {
            row.copy_from_slice(bias);
        }
        kernels::gemm(
            r,
            f,
            o,
            self.value(x).data(),
            f as isize,
            1,
            self.value(w).data(),
            o as isize,
            1,
            out.data_mut(),
            1.0,
        );
        Ok(self.push_op(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Attention read of pattern bank `k` (`[N, C]`) by queries `q` (`[M, C]`).
    pub fn memory_read(&mut self, q: Var, k: Var, kernel: AttentionKernel) -> Result<Var> {
        let (out, _) = memory::read(self.value(k), self.value(q), kernel)?;
        Ok(self.push_op(out, Op::MemoryRead { q, k, kernel }, &[q, k]))
    }

    /// Row-wise cosine similarity of two `[R, F]` tensors, giving `[R]`.
    /// A zero-norm row yields similarity 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_shape("cosine_rows", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let rows = va.dim(0);
        let mut out = Tensor::zeros(&[rows]);
        for r in 0..rows {
            out[r] = cosine(va.row(r), vb.row(r));
        }
        Ok(self.push_op(out, Op::CosineRows(a, b), &[a, b]))
    }

    /// `Σ_r ‖x_r‖₂` over the leading axis.
    pub fn row_norm_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let rows = v.dim(0);
        let total = (0..rows).map(|r| l2(v.sample(r))).sum();
        self.push_op(Tensor::scalar(total), Op::RowNormSum(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean inter-bank pattern term over all pattern pairs drawn from different banks.
    pub fn diversity(&mut self, banks: &[Var], margin: f64, mode: DiversityMode) -> Result<Var> {
        let tensors: Vec<&Tensor> = banks.iter().map(|&b| self.value(b)).collect();
        let value = diversity_value(&tensors, margin, mode)?;
        Ok(self.push_op(
            Tensor::scalar(value),
            Op::Diversity {
                banks: banks.to_vec(),
                margin,
                mode,
            },
            banks,
        ))
    }

    /// `Σ w_i · x_i` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = Tensor::zeros(self.shape(terms[0].0));
        for &(v, w) in terms {
            ensure_shape("weighted_sum", acc.shape(), self.shape(v))?;
            for (a, x) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push_op(acc, Op::WeightedSum(terms.to_vec()), &vars))
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        ensure_shape("backward root", &[1], &[self.value(root).len()])?;
        self.backward_with(root, Tensor::full(self.shape(root), 1.0))
    }

    /// Back-propagates a seed gradient from an arbitrary node.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        ensure_shape("backward seed", self.shape(root), seed.shape())?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients {
                params,
                nodes: grads,
            });
        }
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(
        &self,
        node: &Node<'a>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Vec<(ParamId, Tensor)>,
    ) -> Result<()> {
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.push((*id, g.clone())),
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dx, dw, db) = kernels::conv2d_backward(
                    xv.data(),
                    xv.dim(0),
                    geom,
                    wv.data(),
                    wv.dim(0),
                    g.data(),
                    self.needs_grad(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_vec(xv.shape(), dx)?, grads);
                }
                acc(*w, Tensor::from_vec(wv.shape(), dw)?, grads);
                acc(*b, Tensor::from_vec(&[wv.dim(0)], db)?, grads);
            }
            Op::ConvT2 { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let s = xv.shape();
                let (dx, dw, db) = kernels::conv_t2_backward(
                    xv.data(),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                    wv.data(),
                    wv.dim(1),
                    g.data(),
                    self.needs_grad(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_vec(s, dx)?, grads);
                }
                acc(*w, Tensor::from_vec(wv.shape(), dw)?, grads);
                acc(*b, Tensor::from_vec(&[wv.dim(1)], db)?, grads);
            }
            Op::Relu(x) => {
                let t = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 });
                acc(*x, t, grads);
            }
            Op::Sigmoid(x) => {
                let t = node.value.zip_map(g, |y, gv| gv * y * (1.0 - y));
                acc(*x, t, grads);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f), grads),
            Op::ConcatChannels(parts) => {
                let out_shape = node.value.shape();
                let (batch, plane) = (out_shape[0], out_shape[2] * out_shape[3]);
                let total_c = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let c = ps[1];
                    if self.needs_grad(p) {
                        let mut t = Vec::with_capacity(batch * c * plane);
                        for b in 0..batch {
                            let start = (b * total_c + offset) * plane;
                            t.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        acc(p, Tensor::from_vec(&ps, t)?, grads);
                    }
                    offset += c;
                }
            }
            Op::ToQueries(x) => {
                let s = self.shape(*x);
                acc(*x, rows_to_nchw(g, [s[0], s[1], s[2], s[3]]), grads);
            }
            Op::FromQueries(x) => acc(*x, nchw_to_rows(g), grads),
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (r, f, o) = (xv.dim(0), xv.dim(1), wv.dim(1));
                if self.needs_grad(*x) {
                    // dx[r, f] = g[r, o] · w^T[o, f]
                    let mut dx = Tensor::zeros(&[r, f]);
                    kernels::gemm(
                        r,
                        o,
                        f,
                        g.data(),
                        o as isize,
                        1,
                        wv.data(),
                        1,
                        o as isize,
                        dx.data_mut(),
                        0.0,
                    );
                    acc(*x, dx, grads);
                }
                if self.needs_grad(*w) {
                    // dw[f, o] = x^T[f, r] · g[r, o]
                    let mut dw = Tensor::zeros(&[f, o]);
                    kernels::gemm(
                        f,
                        r,
                        o,
                        xv.data(),
                        1,
                        f as isize,
                        g.data(),
                        o as isize,
                        1,
                        dw.data_mut(),
                        0.0,
                    );
                    acc(*w, dw, grads);
                }
                if self.needs_grad(*b) {
                    let mut db = Tensor::zeros(&[o]);
                    for row in g.data().chunks(o) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, db, grads);
                }
            }
            Op::MemoryRead { q, k, kernel } => {
                let (gq, gk) = memory::read_backward(self.value(*k), self.value(*q), *kernel, g)?;
                acc(*q, gq, grads);
                acc(*k, gk, grads);
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.dim(1);
                let mut ga = Tensor::zeros(va.shape());
                let mut gb = Tensor::zeros(vb.shape());
                for r in 0..va.dim(0) {
                    let (x, y) = (va.row(r), vb.row(r));
                    let (nx, ny) = (l2(x), l2(y));
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let cos = node.value[r];
                    for t in 0..cols {
                        ga[r * cols + t] = g[r] * (y[t] / (nx * ny) - cos * x[t] / (nx * nx));
                        gb[r * cols + t] = g[r] * (x[t] / (nx * ny) - cos * y[t] / (ny * ny));
                    }
                }
                acc(*a, ga, grads);
                acc(*b, gb, grads);
            }
            Op::RowNormSum(x) => {
                let xv = self.value(*x);
                let rows = xv.dim(0);
                let per = xv.len() / rows;
                let mut t = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    let row = xv.sample(r);
                    let n = l2(row);
                    if n > 0.0 {
                        for (d, v) in t.data_mut()[r * per..(r + 1) * per].iter_mut().zip(row) {
                            *d = g.item() * v / n;
                        }
                    }
                }
                acc(*x, t, grads);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item()), grads),
            Op::Diversity {
                banks,
                margin,
                mode,
            } => {
                let tensors: Vec<&Tensor> = banks.iter().map(|&b| self.value(b)).collect();
                let bank_grads = diversity_grad(&tensors, *margin, *mode, g.item());
                for (&b, t) in banks.iter().zip(bank_grads) {
                    acc(b, t, grads);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, g.map(|x| x * w), grads);
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter, summed over all of its leaves in the graph.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut out {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    /// Gradient reaching an intermediate node, if any.
    pub fn node(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// All parameter gradients, accumulated per parameter, in id order.
    pub fn into_param_grads(self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        let mut params = self.params;
        params.sort_by_key(|(id, _)| *id);
        for (id, g) in params {
            match out.last_mut() {
                Some((last, acc)) if *last == id => acc.add_assign(&g),
                _ => out.push((id, g)),
            }
        }
        out
    }
}

pub(crate) fn l2(x: &[f64]) -> f64 {
    Float::sqrt(x.iter().map(|v| v * v).sum::<f64>())
}

/// Cosine similarity; zero-norm vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm embedding in cosine similarity; score defined as 0");
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn nchw_to_rows(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[b * plane, c]);
    let (src, dst) = (x.data(), out.data_mut());
    for bi in 0..b {
        for ch in 0..c {
            for p in 0..plane {
                dst[(bi * plane + p) * c + ch] = src[(bi * c + ch) * plane + p];
            }
        }
    }
    out
}

fn rows_to_nchw(x: &Tensor, shape: [usize; 4]) -> Tensor {
    let [b, c, h, w] = shape;
    let plane = h * w;
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (x.data(), out.data_mut());
    for bi in 0..b {
        for ch in 0..c {
            for p in 0..plane {
                dst[(bi * c + ch) * plane + p] = src[(bi * plane + p) * c + ch];
            }
        }
    }
    out
}

fn inter_bank_pairs(banks: &[&Tensor]) -> usize {
    let sizes: Vec<usize> = banks.iter().map(|b| b.dim(0)).collect();
    let mut pairs = 0;
    for i in 0..sizes.len() {
        for j in i + 1..sizes.len() {
            pairs += sizes[i] * sizes[j];
        }
    }
    pairs
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    Float::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

pub(crate) fn diversity_value(banks: &[&Tensor], margin: f64, mode: DiversityMode) -> Result<f64> {
    if banks.len() < 2 {
        log::warn!("diversity term needs at least two pattern banks; returning 0");
        return Ok(0.0);
    }
    let c = banks[0].dim(1);
    for b in banks {
        ensure_shape("diversity bank dimension", &[b.dim(0), c], b.shape())?;
    }
    let mut total = 0.0;
    for i in 0..banks.len() {
        for j in i + 1..banks.len() {
            for p in 0..banks[i].dim(0) {
                for q in 0..banks[j].dim(0) {
                    let d = pair_distance(banks[i].row(p), banks[j].row(q));
                    total += match mode {
                        DiversityMode::HingeNegative => {
                            if d > margin {
                                0.0
                            } else {
                                margin - d
                            }
                        }
                        DiversityMode::Literal => d,
                    };
                }
            }
        }
    }
    Ok(total / inter_bank_pairs(banks) as f64)
}

fn diversity_grad(
    banks: &[&Tensor],
    margin: f64,
    mode: DiversityMode,
    upstream: f64,
) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = banks.iter().map(|b| Tensor::zeros(b.shape())).collect();
    if banks.len() < 2 {
        return out;
    }
    let c = banks[0].dim(1);
    let scale = upstream / inter_bank_pairs(banks) as f64;
    for i in 0..banks.len() {
        for j in i + 1..banks.len() {
            for p in 0..banks[i].dim(0) {
                for q in 0..banks[j].dim(0) {
                    let (a, b) = (banks[i].row(p), banks[j].row(q));
                    let d = pair_distance(a, b);
                    if d == 0.0 {
                        continue;
                    }
                    // ∂d/∂a = (a − b)/d
                    let coef = match mode {
                        DiversityMode::HingeNegative if d < margin => -scale / d,
                        DiversityMode::HingeNegative => continue,
                        DiversityMode::Literal => scale / d,
                    };
                    for t in 0..c {
                        let diff = coef * (a[t] - b[t]);
                        out[i][p * c + t] += diff;
                        out[j][q * c + t] -= diff;
                    }
                }
            }
        }
    }
    out
}
