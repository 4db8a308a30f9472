//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from named inputs, named parameters and
//! constants, then evaluated many times against a [`ParamStore`]. The
//! forward pass keeps every node's value in an [`Activations`] record, which
//! [`Graph::backward`] replays in reverse order to accumulate gradients.
//!
//! All reductions run sequentially in row-major order, so repeated
//! evaluations with identical inputs are bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, iterated in name order.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone)]
enum Op<T> {
    Input { name: String, stop_grad: bool },
    Param(String),
    Const(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    MatMul(NodeId, NodeId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    LeakyRelu(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    MeanRows(NodeId),
    SliceCols { x: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    StopGradient(NodeId),
    Conv3x3 { x: NodeId, kernel: NodeId, bias: NodeId, height: usize, width: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::StopGradient(_) => "stop_gradient",
            Op::Conv3x3 { .. } => "conv3x3",
        }
    }
}

/// An append-only list of operations. Node ids are only handed out for
/// nodes already present, so the node list is always topologically ordered.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    id: u64,
    ops: Vec<Op<T>>,
    inputs: HashMap<String, NodeId>,
    params: HashMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward values for every node of one evaluation.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    graph_id: u64,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node.0]
    }

    pub fn take(mut self, node: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.values[node.0], Tensor::scalar(T::zero()))
    }
}

/// Gradients of a scalar seed with respect to every parameter and input of
/// the graph. Stop-gradient inputs always carry exact zeros.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    pub inputs: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor<T>> {
        self.inputs.get(name)
    }

    /// Adds `scale * other` into `self` for every parameter present in both.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (name, g) in self.params.iter_mut() {
            if let Some(o) = other.params.get(name) {
                for (a, &b) in g.data_mut().iter_mut().zip(o.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(node: usize, op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.len() == 1 {
        Ok(Bcast::Scalar)
    } else if a.shape().len() == 2 && b.rows() == 1 && b.cols() == a.cols() {
        Ok(Bcast::Row)
    } else {
        Err(Error::NodeShape {
            node,
            op,
            detail: format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()),
        })
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Scalar => 0,
    }
}

fn require_rank2(node: usize, op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::NodeShape {
            node,
            op,
            detail: format!("expected a rank-2 tensor, got {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            ops: Vec::new(),
            inputs: HashMap::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.ops.push(op);
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
        NodeId(self.ops.len() - 1)
    }

    /// A named input. Requesting the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.input_impl(name, false)
    }

    /// A named input whose gradient is forced to exactly zero.
    pub fn input_no_grad(&mut self, name: &str) -> NodeId {
        self.input_impl(name, true)
    }

    fn input_impl(&mut self, name: &str, stop_grad: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            stop_grad,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Const(t))
    }

    /// Elementwise sum; `b` may be a single row or a single value broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `x · w + b` with `b` a `[1, out]` row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        self.push(Op::LeakyRelu(a, slope))
    }

    /// Sum of all elements, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Per-row sums: `[n, c] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumCols(a))
    }

    /// Column means over the batch: `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanRows(a))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGradient(a))
    }

    /// Same-padded 3×3 convolution of single-channel `height × width`
    /// images (`[n, h*w]`) with `kernel: [c, 9]`, `bias: [1, c]`, giving
    /// channel-major `[n, c*h*w]`.
    pub fn conv3x3(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, height: usize, width: usize) -> NodeId {
        self.push(Op::Conv3x3 {
            x,
            kernel,
            bias,
            height,
            width,
        })
    }

    /// Names of every parameter the graph reads.
    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.params.keys().cloned().collect();
        v.sort();
        v
    }

    /// Runs the forward pass. `inputs` binds every named input.
    pub fn evaluate(&self, params: &ParamStore<T>, inputs: &[(&str, &Tensor<T>)]) -> Result<Activations<T>> {
        self.evaluate_with(&[params], inputs)
    }

    /// Like [`Graph::evaluate`] with parameters looked up in several stores,
    /// first match wins.
    pub fn evaluate_with(&self, params: &[&ParamStore<T>], inputs: &[(&str, &Tensor<T>)]) -> Result<Activations<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = self.forward_op(i, op, &values, params, inputs)?;
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            values.push(v);
        }
        Ok(Activations {
            graph_id: self.id,
            values,
        })
    }

    fn forward_op(
        &self,
        i: usize,
        op: &Op<T>,
        vals: &[Tensor<T>],
        params: &[&ParamStore<T>],
        inputs: &[(&str, &Tensor<T>)],
    ) -> Result<Tensor<T>> {
        let name = op.name();
        Ok(match op {
            Op::Input { name, .. } => inputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| (*t).clone())
                .ok_or_else(|| Error::MissingInput(name.clone()))?,
            Op::Param(p) => params
                .iter()
                .find_map(|store| store.get(p))
                .cloned()
                .ok_or_else(|| Error::MissingParam(p.clone()))?,
            Op::Const(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (&vals[a.0], &vals[b.0]);
                let kind = broadcast_kind(i, name, a, b)?;
                let cols = a.cols();
                let bd = b.data();
                let data: Vec<T> = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let y = bd[bidx(kind, j, cols)];
                        match op {
                            Op::Add(..) => x + y,
                            Op::Sub(..) => x - y,
                            _ => x * y,
                        }
                    })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => vals[a.0].map(|x| x * *c),
            Op::AddScalar(a, c) => vals[a.0].map(|x| x + *c),
            Op::MatMul(a, b) => {
                let (a, b) = (&vals[a.0], &vals[b.0]);
                let (m, k) = require_rank2(i, name, a)?;
                let (k2, n) = require_rank2(i, name, b)?;
                if k != k2 {
                    return Err(Error::NodeShape {
                        node: i,
                        op: name,
                        detail: format!("[{m},{k}] x [{k2},{n}]"),
                    });
                }
                let mut out = vec![T::zero(); m * n];
                matmul_into(a.data(), b.data(), &mut out, m, k, n);
                Tensor::from_rows(m, n, out)?
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (&vals[x.0], &vals[w.0], &vals[b.0]);
                let (m, k) = require_rank2(i, name, x)?;
                let (k2, n) = require_rank2(i, name, w)?;
                if k != k2 || b.len() != n {
                    return Err(Error::NodeShape {
                        node: i,
                        op: name,
                        detail: format!("x [{m},{k}], w [{k2},{n}], b {:?}", b.shape()),
                    });
                }
                let mut out = vec![T::zero(); m * n];
                matmul_into(x.data(), w.data(), &mut out, m, k, n);
                for row in out.chunks_mut(n) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_rows(m, n, out)?
            }
            Op::Tanh(a) => vals[a.0].map(|x| x.tanh()),
            Op::Sigmoid(a) => vals[a.0].map(|x| x.sigmoid()),
            Op::Exp(a) => vals[a.0].map(|x| x.exp()),
            Op::Log(a) => vals[a.0].map(|x| x.ln()),
            Op::Softplus(a) => vals[a.0].map(|x| x.softplus()),
            Op::LeakyRelu(a, s) => vals[a.0].map(|x| if x > T::zero() { x } else { x * *s }),
            Op::Sum(a) => Tensor::scalar(vals[a.0].data().iter().copied().sum()),
            Op::Mean(a) => {
                let t = &vals[a.0];
                let s: T = t.data().iter().copied().sum();
                Tensor::scalar(s / T::from_f64(t.len() as f64))
            }
            Op::SumCols(a) => {
                let t = &vals[a.0];
                let (r, _) = require_rank2(i, name, t)?;
                let data = (0..r).map(|j| t.row_slice(j).iter().copied().sum()).collect();
                Tensor::from_rows(r, 1, data)?
            }
            Op::MeanRows(a) => {
                let t = &vals[a.0];
                let (r, c) = require_rank2(i, name, t)?;
                // Each column is summed in sorted order.
                let inv = T::one() / T::from_f64(r as f64);
                let mut col = Vec::with_capacity(r);
                let mut data = Vec::with_capacity(c);
                for k in 0..c {
                    col.clear();
                    col.extend((0..r).map(|j| t.data()[j * c + k]));
                    col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    data.push(col.iter().fold(T::zero(), |s, &v| s + v) * inv);
                }
                Tensor::from_rows(1, c, data)?
            }
            Op::SliceCols { x, start, end } => {
                let t = &vals[x.0];
                let (r, c) = require_rank2(i, name, t)?;
                if start >= end || *end > c {
                    return Err(Error::NodeShape {
                        node: i,
                        op: name,
                        detail: format!("slice {start}..{end} of {c} columns"),
                    });
                }
                let mut data = Vec::with_capacity(r * (end - start));
                for j in 0..r {
                    data.extend_from_slice(&t.row_slice(j)[*start..*end]);
                }
                Tensor::from_rows(r, end - start, data)?
            }
            Op::ConcatCols(parts) => {
                let first = &vals[parts[0].0];
                let (r, _) = require_rank2(i, name, first)?;
                let mut total = 0;
                for p in parts {
                    let (pr, pc) = require_rank2(i, name, &vals[p.0])?;
                    if pr != r {
                        return Err(Error::NodeShape {
                            node: i,
                            op: name,
                            detail: format!("row counts {pr} vs {r}"),
                        });
                    }
                    total += pc;
                }
                let mut data = Vec::with_capacity(r * total);
                for j in 0..r {
                    for p in parts {
                        data.extend_from_slice(vals[p.0].row_slice(j));
                    }
                }
                Tensor::from_rows(r, total, data)?
            }
            Op::StopGradient(a) => vals[a.0].clone(),
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                height,
                width,
            } => {
                let (x, k, b) = (&vals[x.0], &vals[kernel.0], &vals[bias.0]);
                let (n, hw) = require_rank2(i, name, x)?;
                let (c, nine) = require_rank2(i, name, k)?;
                if hw != height * width || nine != 9 || b.len() != c {
                    return Err(Error::NodeShape {
                        node: i,
                        op: name,
                        detail: format!("x {:?}, kernel {:?}, bias {:?}", x.shape(), k.shape(), b.shape()),
                    });
                }
                let mut out = vec![T::zero(); n * c * hw];
                for s in 0..n {
                    let img = x.row_slice(s);
                    for ch in 0..c {
                        let kr = k.row_slice(ch);
                        let base = s * c * hw + ch * hw;
                        for r in 0..*height {
                            for q in 0..*width {
                                let mut acc = b.data()[ch];
                                for (t, &kv) in kr.iter().enumerate() {
                                    let rr = r as isize + (t / 3) as isize - 1;
                                    let qq = q as isize + (t % 3) as isize - 1;
                                    if rr >= 0 && qq >= 0 && (rr as usize) < *height && (qq as usize) < *width {
                                        acc += kv * img[rr as usize * width + qq as usize];
                                    }
                                }
                                out[base + r * width + q] = acc;
                            }
                        }
                    }
                }
                Tensor::from_rows(n, c * hw, out)?
            }
        })
    }

    /// Accumulates d`seed`/d(every parameter and input). `seed` must be a
    /// scalar node of the evaluation in `acts`.
    pub fn backward(&self, acts: &Activations<T>, seed: NodeId) -> Result<Gradients<T>> {
        if acts.graph_id != self.id || acts.values.len() != self.ops.len() {
            return Err(Error::NotEvaluated);
        }
        if !acts.values[seed.0].is_scalar() {
            return Err(Error::SeedNotScalar(seed.0));
        }
        let vals = &acts.values;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.ops.len()];
        grads[seed.0] = Some(Tensor::full(vals[seed.0].shape(), T::one()));

        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.ops[i];
            match op {
                Op::Input { name, stop_grad } => {
                    let g = if *stop_grad { Tensor::zeros(g.shape()) } else { g };
                    out.inputs.insert(name.clone(), g);
                }
                Op::Param(name) => {
                    out.params.insert(name.clone(), g);
                }
                Op::Const(_) | Op::StopGradient(_) => {}
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let kind = broadcast_kind(i, op.name(), av, bv)?;
                    let cols = av.cols();
                    {
                        let ga = acc(&mut grads, *a, av.shape());
                        for (j, (o, &gv)) in ga.iter_mut().zip(g.data()).enumerate() {
                            *o += match op {
                                Op::Mul(..) => gv * bv.data()[bidx(kind, j, cols)],
                                _ => gv,
                            };
                        }
                    }
                    let gb = acc(&mut grads, *b, bv.shape());
                    for (j, &gv) in g.data().iter().enumerate() {
                        let t = bidx(kind, j, cols);
                        gb[t] += match op {
                            Op::Add(..) => gv,
                            Op::Sub(..) => -gv,
                            _ => gv * av.data()[j],
                        };
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut grads, *a, vals[a.0].shape());
                    for (o, &gv) in ga.iter_mut().zip(g.data()) {
                        *o += gv * *c;
                    }
                }
                Op::AddScalar(a, _) => {
                    let ga = acc(&mut grads, *a, vals[a.0].shape());
                    for (o, &gv) in ga.iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    matmul_nt_acc(g.data(), bv.data(), acc(&mut grads, *a, av.shape()), m, k, n);
                    matmul_tn_acc(av.data(), g.data(), acc(&mut grads, *b, bv.shape()), m, k, n);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (&vals[x.0], &vals[w.0]);
                    let (m, k) = (xv.rows(), xv.cols());
                    let n = wv.cols();
                    matmul_nt_acc(g.data(), wv.data(), acc(&mut grads, *x, xv.shape()), m, k, n);
                    matmul_tn_acc(xv.data(), g.data(), acc(&mut grads, *w, wv.shape()), m, k, n);
                    let gb = acc(&mut grads, *b, vals[b.0].shape());
                    for row in g.data().chunks(n) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
                Op::Tanh(a) | Op::Sigmoid(a) | Op::Exp(a) => {
                    let y = &vals[i];
                    let ga = acc(&mut grads, *a, vals[a.0].shape());
                    for ((o, &gv), &yv) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv
                            * match op {
                                Op::Tanh(_) => T::one() - yv * yv,
                                Op::Sigmoid(_) => yv * (T::one() - yv),
                                _ => yv,
                            };
                    }
                }
                Op::Log(a) | Op::Softplus(a) | Op::LeakyRelu(a, _) => {
                    let x = &vals[a.0];
                    let ga = acc(&mut grads, *a, x.shape());
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gv
                            * match op {
                                Op::Log(_) => T::one() / xv,
                                Op::Softplus(_) => xv.sigmoid(),
                                Op::LeakyRelu(_, s) => {
                                    if xv > T::zero() {
                                        T::one()
                                    } else {
                                        *s
                                    }
                                }
                                _ => unreachable!(),
                            };
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let x = &vals[a.0];
                    let gv = match op {
                        Op::Mean(_) => g.item() / T::from_f64(x.len() as f64),
                        _ => g.item(),
                    };
                    for o in acc(&mut grads, *a, x.shape()) {
                        *o += gv;
                    }
                }
                Op::SumCols(a) => {
                    let x = &vals[a.0];
                    let c = x.cols();
                    let ga = acc(&mut grads, *a, x.shape());
                    for (row, &gv) in ga.chunks_mut(c).zip(g.data()) {
                        for o in row {
                            *o += gv;
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let x = &vals[a.0];
                    let c = x.cols();
                    let inv = T::one() / T::from_f64(x.rows() as f64);
                    let ga = acc(&mut grads, *a, x.shape());
                    for row in ga.chunks_mut(c) {
                        for (o, &gv) in row.iter_mut().zip(g.data()) {
                            *o += gv * inv;
                        }
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = &vals[x.0];
                    let c = xv.cols();
                    let w = end - start;
                    let ga = acc(&mut grads, *x, xv.shape());
                    for (row, grow) in ga.chunks_mut(c).zip(g.data().chunks(w)) {
                        for (o, &gv) in row[*start..*end].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = &vals[p.0];
                        let pc = pv.cols();
                        let gp = acc(&mut grads, *p, pv.shape());
                        for (row, grow) in gp.chunks_mut(pc).zip(g.data().chunks(total)) {
                            for (o, &gv) in row.iter_mut().zip(&grow[offset..offset + pc]) {
                                *o += gv;
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Conv3x3 {
                    x,
                    kernel,
                    bias,
                    height,
                    width,
                } => {
                    let (xv, kv) = (&vals[x.0], &vals[kernel.0]);
                    let n = xv.rows();
                    let hw = height * width;
                    let c = kv.rows();
                    let mut gx = vec![T::zero(); xv.len()];
                    let mut gk = vec![T::zero(); kv.len()];
                    let mut gb = vec![T::zero(); c];
                    for s in 0..n {
                        let img = xv.row_slice(s);
                        for ch in 0..c {
                            let base = s * c * hw + ch * hw;
                            for r in 0..*height {
                                for q in 0..*width {
                                    let go = g.data()[base + r * width + q];
                                    gb[ch] += go;
                                    for t in 0..9 {
                                        let rr = r as isize + (t / 3) as isize - 1;
                                        let qq = q as isize + (t % 3) as isize - 1;
                                        if rr >= 0 && qq >= 0 && (rr as usize) < *height && (qq as usize) < *width {
                                            let pix = rr as usize * width + qq as usize;
                                            gk[ch * 9 + t] += go * img[pix];
                                            gx[s * hw + pix] += go * kv.data()[ch * 9 + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_into(acc(&mut grads, *x, xv.shape()), &gx);
                    add_into(acc(&mut grads, *kernel, kv.shape()), &gk);
                    add_into(acc(&mut grads, *bias, vals[bias.0].shape()), &gb);
                }
            }
        }

        // Unreached parameters and inputs get explicit zeros.
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                Op::Param(name) if !out.params.contains_key(name) => {
                    out.params.insert(name.clone(), Tensor::zeros(vals[i].shape()));
                }
                Op::Input { name, .. } if !out.inputs.contains_key(name) => {
                    out.inputs.insert(name.clone(), Tensor::zeros(vals[i].shape()));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]) -> &'a mut [T] {
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let w = g.param("w");
        let b = g.param("b");
        let y = g.affine(x, w, b);
        let mut p = ParamStore::new();
        p.insert("w".into(), Tensor::identity(2));
        p.insert("b".into(), Tensor::zeros(&[1, 2]));
        let xv = t(1, 2, &[1.0, 2.0]);
        let acts = g.evaluate(&p, &[("x", &xv)]).unwrap();
        assert_eq!(acts.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let y = g.sigmoid(x);
        let xv = Tensor::scalar(0.0);
        let acts = g.evaluate(&ParamStore::new(), &[("x", &xv)]).unwrap();
        assert_eq!(acts.value(y).item(), 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let y = g.mul(x, x);
        let xv = Tensor::scalar(3.0);
        let acts = g.evaluate(&ParamStore::new(), &[("x", &xv)]).unwrap();
        let grads = g.backward(&acts, y).unwrap();
        assert_eq!(grads.input("x").unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_sum_gradient_at_zero_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let h = g.tanh(x);
        let s = g.sum(h);
        let xv = Tensor::zeros(&[1, 5]);
        let acts = g.evaluate(&ParamStore::new(), &[("x", &xv)]).unwrap();
        let grads = g.backward(&acts, s).unwrap();
        assert_eq!(grads.input("x").unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let b = g.input("b");
        let _ = g.matmul(a, b);
        let av = Tensor::zeros(&[2, 3]);
        let bv = Tensor::zeros(&[2, 3]);
        match g.evaluate(&ParamStore::new(), &[("a", &av), ("b", &bv)]) {
            Err(Error::NodeShape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let _ = g.log(a);
        let av = Tensor::scalar(-1.0);
        match g.evaluate(&ParamStore::new(), &[("a", &av)]) {
            Err(Error::NonFinite { node: 1, op: "log" }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn seed_must_be_scalar_and_evaluated() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let b = g.tanh(a);
        let av = Tensor::zeros(&[2, 2]);
        let acts = g.evaluate(&ParamStore::new(), &[("a", &av)]).unwrap();
        assert!(matches!(g.backward(&acts, b), Err(Error::SeedNotScalar(_))));

        let mut other = Graph::<f64>::new();
        let x = other.input("a");
        let y = other.tanh(x);
        let _ = other.sum(y);
        let s = NodeId(2);
        assert!(matches!(other.backward(&acts, s), Err(Error::NotEvaluated)));
    }

    #[test]
    fn stop_gradient_input_is_exactly_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a");
        let e = g.input_no_grad("e");
        let m = g.mul(a, e);
        let s = g.sum(m);
        let av = t(1, 2, &[1.0, 2.0]);
        let ev = t(1, 2, &[3.0, 4.0]);
        let acts = g.evaluate(&ParamStore::new(), &[("a", &av), ("e", &ev)]).unwrap();
        let grads = g.backward(&acts, s).unwrap();
        assert_eq!(grads.input("a").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.input("e").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn missing_bindings() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let w = g.param("w");
        let _ = g.matmul(x, w);
        let xv = Tensor::zeros(&[1, 1]);
        assert!(matches!(
            g.evaluate(&ParamStore::new(), &[]),
            Err(Error::MissingInput(_))
        ));
        assert!(matches!(
            g.evaluate(&ParamStore::new(), &[("x", &xv)]),
            Err(Error::MissingParam(_))
        ));
    }
}
