//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are stored in
//! creation order, which is a topological order, so `backward` simply walks
//! the tape in reverse and visits each node once.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims2, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        spans: Option<Vec<Range<usize>>>,
        probs: Vec<T>,
    },
    GatherRows(NodeId, Vec<usize>),
    Gather(NodeId, Vec<Option<usize>>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. One graph per forward pass; graphs are cheap to
/// create and are dropped after `backward`.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: BTreeMap<ParamId, NodeId>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
            grads: Vec::new(),
        }
    }

    /// A graph that never tracks gradients. Attention probabilities and
    /// other backward caches are not kept.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(&[0]))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Inserts a stored parameter. Repeated calls with the same id return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.params.get(&id) {
            return Ok(node);
        }
        let p = store.get(id);
        let value = p.value.cast::<T>();
        let node = self.push(value, Op::Param, p.trainable, "param")?;
        self.params.insert(id, node);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::shape(
                op,
                format!(
                    "shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a `[D]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let d = self.value(a).last_dim();
        if self.value(row).numel() != d {
            return Err(TensorError::shape(
                "add_row",
                format!(
                    "row has {} values, rows are {d} wide",
                    self.value(row).numel()
                ),
            ));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_exact_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, |x| {
            let x64 = x.as_f64();
            let u = SQRT_2_OVER_PI * (x64 + GELU_C * x64 * x64 * x64);
            T::from_f64(0.5 * x64 * (1.0 + u.tanh()))
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, |x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, |x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "feature width {d}, gamma {}, beta {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        let vx = self.value(x);
        let rows = vx.rows();
        let mut out = Tensor::zeros(vx.shape());
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = 1.0 / d as f64;
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_d;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                * inv_d;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::from_f64(rs);
            let o = out.row_mut(r);
            for j in 0..d {
                let h = T::from_f64((row[j].as_f64() - mean) * rs);
                xhat[r * d + j] = h;
                o[j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg && self.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Scaled dot-product attention over `heads` heads, without projections.
    ///
    /// `q` is `[Nq, D]`, `k` and `v` are `[Nk, D]`. When `spans` is given,
    /// query row `i` attends only to key rows `spans[i]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        spans: Option<Vec<Range<usize>>>,
    ) -> Result<NodeId> {
        let (nq, d) = dims2(self.value(q), "attention")?;
        let (nk, dk) = dims2(self.value(k), "attention")?;
        let (nv, dv) = dims2(self.value(v), "attention")?;
        if dk != d || dv != d || nv != nk {
            return Err(TensorError::shape(
                "attention",
                format!("q [{nq}, {d}], k [{nk}, {dk}], v [{nv}, {dv}]"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::shape(
                "attention",
                format!("width {d} is not divisible by {heads} heads"),
            ));
        }
        if nk == 0 {
            return Err(TensorError::shape("attention", "no keys"));
        }
        if let Some(sp) = &spans {
            if sp.len() != nq {
                return Err(TensorError::shape(
                    "attention",
                    format!("{} spans for {nq} queries", sp.len()),
                ));
            }
            if let Some(bad) = sp.iter().find(|r| r.is_empty() || r.end > nk) {
                return Err(TensorError::shape(
                    "attention",
                    format!("span {bad:?} is empty or exceeds {nk} keys"),
                ));
            }
        }
        let rg = self.rg(&[q, k, v]);
        let keep = rg && self.grad_enabled;
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            nq,
            nk,
            d,
            heads,
            spans.as_deref(),
            keep,
        );
        let out = Tensor::new(vec![nq, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                probs,
            },
            rg,
            "attention",
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        let rows = va.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let out = va.select_rows(&idx);
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows(a, idx), rg, "gather_rows")
    }

    /// Element gather from the flattened input; `None` entries produce zero.
    pub fn gather(
        &mut self,
        a: NodeId,
        idx: Vec<Option<usize>>,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let va = self.value(a).data();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= va.len()) {
            return Err(TensorError::shape(
                "gather",
                format!("index {bad} out of range for {} values", va.len()),
            ));
        }
        let data = idx.iter().map(|i| i.map_or(T::zero(), |i| va[i])).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Gather(a, idx), rg, "gather")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let d = match parts.first() {
            Some(&p) => self.value(p).last_dim(),
            None => return Err(TensorError::shape("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.last_dim() != d {
                return Err(TensorError::shape(
                    "concat_rows",
                    format!("row widths {d} and {} differ", vp.last_dim()),
                ));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let n = T::from_f64(va.numel().max(1) as f64);
        let s = va.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg, "mean")
    }

    /// Reverse pass from a scalar node. Gradients are available through
    /// [`Graph::grad`] and [`Graph::param_grads`] afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter used in this graph, in
    /// parameter-id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(&pid, &node)| self.grad(node).map(|g| (pid, g.clone())))
            .collect()
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let need = |id: NodeId| nodes[id.0].requires_grad;
        let val = |id: NodeId| &nodes[id.0].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if need(a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    // dA = dC · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        val(b).data(),
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    accumulate(grads, a, da);
                }
                if need(b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    // dB = Aᵀ · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        val(a).data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if need(a) {
                    accumulate(grads, a, g.clone());
                }
                if need(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if need(a) {
                    accumulate(grads, a, g.clone());
                }
                if need(b) {
                    accumulate(grads, b, map_tensor(g, |x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if need(a) {
                    accumulate(grads, a, zip_tensor(g, val(b), |x, y| x * y));
                }
                if need(b) {
                    accumulate(grads, b, zip_tensor(g, val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                if need(a) {
                    accumulate(grads, a, g.clone());
                }
                if need(row) {
                    let d = val(a).last_dim();
                    let mut dr = vec![T::zero(); d];
                    for chunk in g.data().chunks_exact(d) {
                        for (acc, &x) in dr.iter_mut().zip(chunk) {
                            *acc = *acc + x;
                        }
                    }
                    let dr = Tensor::new(val(row).shape().to_vec(), dr).expect("row shape");
                    accumulate(grads, row, dr);
                }
            }
            &Op::Scale(a, c) => {
                if need(a) {
                    accumulate(grads, a, map_tensor(g, |x| x * c));
                }
            }
            &Op::Gelu(a) => {
                if need(a) {
                    let d = zip_tensor(g, val(a), |gy, x| {
                        let x = x.as_f64();
                        let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        gy * T::from_f64(dy)
                    });
                    accumulate(grads, a, d);
                }
            }
            &Op::Relu(a) => {
                if need(a) {
                    let d = zip_tensor(
                        g,
                        val(a),
                        |gy, x| if x > T::zero() { gy } else { T::zero() },
                    );
                    accumulate(grads, a, d);
                }
            }
            &Op::Sigmoid(a) => {
                if need(a) {
                    let y = &nodes[i].value;
                    let d = zip_tensor(g, y, |gy, y| gy * y * (T::one() - y));
                    accumulate(grads, a, d);
                }
            }
            &Op::Softmax(a) => {
                if need(a) {
                    let y = &nodes[i].value;
                    let d = y.last_dim();
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                        for ((o, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(grads, a, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*x).last_dim();
                let rows = val(*x).rows();
                let gam = val(*gamma).data();
                if need(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                    let dg = Tensor::new(val(*gamma).shape().to_vec(), dg).expect("gamma shape");
                    accumulate(grads, *gamma, dg);
                }
                if need(*beta) {
                    let mut db = vec![T::zero(); d];
                    for chunk in g.data().chunks_exact(d) {
                        for (acc, &v) in db.iter_mut().zip(chunk) {
                            *acc = *acc + v;
                        }
                    }
                    let db = Tensor::new(val(*beta).shape().to_vec(), db).expect("beta shape");
                    accumulate(grads, *beta, db);
                }
                if need(*x) {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    let inv_d = T::from_f64(1.0 / d as f64);
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        let mean_dh = sum_dh * inv_d;
                        let mean_dh_h = sum_dh_h * inv_d;
                        let o = dx.row_mut(r);
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            o[j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                probs,
            } => {
                let (nq, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let nk = val(*k).shape()[0];
                let (dq, dk, dv) = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    g.data(),
                    probs,
                    nq,
                    nk,
                    d,
                    *heads,
                    spans.as_deref(),
                );
                if need(*q) {
                    accumulate(grads, *q, Tensor::new(vec![nq, d], dq).expect("q shape"));
                }
                if need(*k) {
                    accumulate(grads, *k, Tensor::new(vec![nk, d], dk).expect("k shape"));
                }
                if need(*v) {
                    accumulate(grads, *v, Tensor::new(vec![nk, d], dv).expect("v shape"));
                }
            }
            Op::GatherRows(a, idx) => {
                if need(*a) {
                    let mut da = Tensor::zeros(val(*a).shape());
                    let d = da.last_dim();
                    for (r, &src) in idx.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        for (o, &x) in da.row_mut(src).iter_mut().zip(gr) {
                            *o = *o + x;
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Gather(a, idx) => {
                if need(*a) {
                    let mut da = Tensor::zeros(val(*a).shape());
                    let dd = da.data_mut();
                    for (o, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            dd[*s] = dd[*s] + g.data()[o];
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if need(p) {
                        let part =
                            Tensor::new(val(p).shape().to_vec(), g.data()[off..off + n].to_vec())
                                .expect("part shape");
                        accumulate(grads, p, part);
                    }
                    off += n;
                }
            }
            &Op::Sum(a) => {
                if need(a) {
                    accumulate(grads, a, Tensor::filled(val(a).shape(), g.data()[0]));
                }
            }
            &Op::Mean(a) => {
                if need(a) {
                    let n = T::from_f64(val(a).numel().max(1) as f64);
                    accumulate(grads, a, Tensor::filled(val(a).shape(), g.data()[0] / n));
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + x;
            }
        }
        slot => *slot = Some(g),
    }
}

fn map_tensor<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn zip_tensor<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Offsets of each query's probability block in the packed span layout.
fn span_offsets(spans: &[Range<usize>]) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(spans.len());
    let mut total = 0;
    for s in spans {
        offs.push(total);
        total += s.len();
    }
    (offs, total)
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    spans: Option<&[Range<usize>]>,
    keep_probs: bool,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); nq * d];
    match spans {
        None => {
            let block = nq * nk;
            let mut probs = if keep_probs {
                vec![T::zero(); heads * block]
            } else {
                Vec::new()
            };
            let mut scratch = if keep_probs {
                Vec::new()
            } else {
                vec![T::zero(); block]
            };
            for h in 0..heads {
                let off = h * dh;
                let p: &mut [T] = if keep_probs {
                    &mut probs[h * block..(h + 1) * block]
                } else {
                    &mut scratch
                };
                // S = scale · Q_h · K_hᵀ
                T::gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    &q[off..],
                    d as isize,
                    1,
                    &k[off..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    nk as isize,
                    1,
                );
                for row in p.chunks_exact_mut(nk) {
                    softmax_in_place(row);
                }
                // O_h = P · V_h
                T::gemm(
                    nq,
                    nk,
                    dh,
                    T::one(),
                    p,
                    nk as isize,
                    1,
                    &v[off..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[off..],
                    d as isize,
                    1,
                );
            }
            (out, probs)
        }
        Some(spans) => {
            let (offs, total) = span_offsets(spans);
            let mut probs = vec![T::zero(); heads * total];
            for h in 0..heads {
                let off = h * dh;
                for (i, span) in spans.iter().enumerate() {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let p = &mut probs[h * total + offs[i]..h * total + offs[i] + span.len()];
                    for (pj, j) in p.iter_mut().zip(span.clone()) {
                        let kj = &k[j * d + off..j * d + off + dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for (&pj, j) in p.iter().zip(span.clone()) {
                        let vj = &v[j * d + off..j * d + off + dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc = *oc + pj * vc;
                        }
                    }
                }
            }
            if !keep_probs {
                probs = Vec::new();
            }
            (out, probs)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    probs: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    spans: Option<&[Range<usize>]>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    match spans {
        None => {
            let block = nq * nk;
            let mut ds = vec![T::zero(); block];
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[h * block..(h + 1) * block];
                // dP = dO_h · V_hᵀ
                T::gemm(
                    nq,
                    dh,
                    nk,
                    T::one(),
                    &dout[off..],
                    d as isize,
                    1,
                    &v[off..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut ds,
                    nk as isize,
                    1,
                );
                // dV_h += Pᵀ · dO_h
                T::gemm(
                    nk,
                    nq,
                    dh,
                    T::one(),
                    p,
                    1,
                    nk as isize,
                    &dout[off..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dv[off..],
                    d as isize,
                    1,
                );
                for (dsr, pr) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                    let s = dot(dsr, pr);
                    for (x, &pj) in dsr.iter_mut().zip(pr) {
                        *x = pj * (*x - s);
                    }
                }
                // dQ_h += scale · dS · K_h
                T::gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    &ds,
                    nk as isize,
                    1,
                    &k[off..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dq[off..],
                    d as isize,
                    1,
                );
                // dK_h += scale · dSᵀ · Q_h
                T::gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    &ds,
                    1,
                    nk as isize,
                    &q[off..],
                    d as isize,
                    1,
                    T::one(),
                    &mut dk[off..],
                    d as isize,
                    1,
                );
            }
        }
        Some(spans) => {
            let (offs, total) = span_offsets(spans);
            let mut dp = Vec::new();
            for h in 0..heads {
                let off = h * dh;
                for (i, span) in spans.iter().enumerate() {
                    let p = &probs[h * total + offs[i]..h * total + offs[i] + span.len()];
                    let go = &dout[i * d + off..i * d + off + dh];
                    dp.clear();
                    for (&pj, j) in p.iter().zip(span.clone()) {
                        let vj = &v[j * d + off..j * d + off + dh];
                        dp.push(dot(go, vj));
                        for (acc, &x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                            *acc = *acc + pj * x;
                        }
                    }
                    let s = dot(&dp, p);
                    let qi = &q[i * d + off..i * d + off + dh];
                    for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(span.clone()) {
                        let dsj = pj * (dpj - s) * scale;
                        let kj = &k[j * d + off..j * d + off + dh];
                        for (acc, &x) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                            *acc = *acc + dsj * x;
                        }
                        for (acc, &x) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                            *acc = *acc + dsj * x;
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
