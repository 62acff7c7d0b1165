//! Small double-precision reverse-mode autodiff engine with the layers the
//! fusion model needs: dense, mean-aggregation GraphSAGE, pooling, losses
//! and Adam.
//!
//! A [`Tape`] records one forward pass. Parameters live in a [`ParamStore`]
//! and enter the tape as leaves; [`Tape::backward`] returns one gradient per
//! stored parameter.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraints::{kc_term_with_grad, ConstraintContext, KcWeights};
use crate::grid::AdjacencyMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Row-major dense tensor. Every op in this module works on rank-2 data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![v] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(NnError::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(NnError::NonFinite(op))
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// C = A·B for row-major A (m×k) and B (k×n).
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: slice lengths match the declared row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// C = A·Bᵀ for A (m×k) and B (n×k).
fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: Bᵀ is addressed through swapped strides of the n×k buffer.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// C = Aᵀ·B for A (m×k) and B (m×n).
fn gemm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: Aᵀ is addressed through swapped strides of the m×k buffer.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Tanh => v.tanh(),
            Self::Identity => v,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Self::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - y * y,
            Self::Identity => 1.0,
        }
    }
}

/// Row-level graph structure for a batch of graphs stacked vertically.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    /// Neighbour rows of each stacked row, in ascending order.
    pub neighbors: Vec<Vec<usize>>,
    /// (first row, node count) of every graph.
    pub segments: Vec<(usize, usize)>,
}

impl GraphBatch {
    /// Stacks graphs given as per-graph neighbour lists.
    pub fn stack<'a>(graphs: impl IntoIterator<Item = &'a [Vec<usize>]>) -> Self {
        let mut neighbors = Vec::new();
        let mut segments = Vec::new();
        for g in graphs {
            let start = neighbors.len();
            segments.push((start, g.len()));
            neighbors.extend(g.iter().map(|list| {
                let mut l: Vec<usize> = list.iter().map(|j| j + start).collect();
                l.sort_unstable();
                l
            }));
        }
        Self { neighbors, segments }
    }

    /// `count` copies of one graph.
    pub fn repeat(graph: &[Vec<usize>], count: usize) -> Self {
        Self::stack(std::iter::repeat_n(graph, count))
    }

    pub fn from_adjacency(adj: &AdjacencyMatrix) -> Self {
        Self::stack([adj.neighbor_lists().as_slice()])
    }

    pub fn rows(&self) -> usize {
        self.neighbors.len()
    }
}

pub type Var = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Act(Var, Activation),
    ConcatCols(Var, Var),
    NeighborMean(Var, Arc<GraphBatch>),
    SegmentMean(Var, Arc<GraphBatch>),
    Reshape(Var),
    Add(Var, Var),
    /// Scalar loss whose gradient with respect to its input was computed
    /// during the forward pass.
    Loss(Var, Tensor),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.params[id].value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, w) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.cols() != w.rows() {
            return Err(NnError::ShapeMismatch(format!("matmul {:?} · {:?}", x.shape, w.shape)));
        }
        let (m, k, n) = (x.rows(), x.cols(), w.cols());
        let out = Tensor { shape: vec![m, n], data: gemm(&x.data, &w.data, m, k, n) }.check_finite("matmul")?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (&self.nodes[a].value, &self.nodes[bias].value);
        if b.numel() != x.cols() {
            return Err(NnError::ShapeMismatch(format!("bias {:?} for {:?}", b.shape, x.shape)));
        }
        let c = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += b.data[i % c];
        }
        let out = out.check_finite("add_bias")?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Result<Var> {
        if f == Activation::Identity {
            return Ok(a);
        }
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|v| *v = f.apply(*v));
        let out = out.check_finite("activation")?;
        Ok(self.push(out, Op::Act(a, f)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.rows() != y.rows() {
            return Err(NnError::ShapeMismatch(format!("concat {:?} with {:?}", x.shape, y.shape)));
        }
        let (ca, cb) = (x.cols(), y.cols());
        let mut data = Vec::with_capacity(x.rows() * (ca + cb));
        for i in 0..x.rows() {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let out = Tensor { shape: vec![x.rows(), ca + cb], data };
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Row i becomes the mean of its neighbours' rows (zero if isolated).
    pub fn neighbor_mean(&mut self, a: Var, g: &Arc<GraphBatch>) -> Result<Var> {
        let x = &self.nodes[a].value;
        if x.rows() != g.rows() {
            return Err(NnError::ShapeMismatch(format!("{} rows for a {}-node batch", x.rows(), g.rows())));
        }
        let c = x.cols();
        let mut out = Tensor::zeros(x.rows(), c);
        for (i, nb) in g.neighbors.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            let dst = &mut out.data[i * c..(i + 1) * c];
            for &j in nb {
                for (d, s) in dst.iter_mut().zip(x.row(j)) {
                    *d += s;
                }
            }
            let inv = 1.0 / nb.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.push(out, Op::NeighborMean(a, g.clone())))
    }

    /// Mean over the rows of each graph segment: one output row per graph.
    pub fn segment_mean(&mut self, a: Var, g: &Arc<GraphBatch>) -> Result<Var> {
        let x = &self.nodes[a].value;
        if x.rows() != g.rows() {
            return Err(NnError::ShapeMismatch("segment mean rows".into()));
        }
        let c = x.cols();
        let mut out = Tensor::zeros(g.segments.len(), c);
        for (s, &(start, len)) in g.segments.iter().enumerate() {
            let dst = &mut out.data[s * c..(s + 1) * c];
            for r in start..start + len {
                for (d, v) in dst.iter_mut().zip(x.row(r)) {
                    *d += v;
                }
            }
            let inv = 1.0 / len.max(1) as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.push(out, Op::SegmentMean(a, g.clone())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = &self.nodes[a].value;
        if rows * cols != x.numel() {
            return Err(NnError::ShapeMismatch(format!("reshape {:?} to [{rows}, {cols}]", x.shape)));
        }
        let out = Tensor { shape: vec![rows, cols], data: x.data.clone() };
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        x.same_shape(y, "add")?;
        let mut out = x.clone();
        out.add_assign(y);
        let out = out.check_finite("add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// (1/B) Σ_i Σ_o m_io (ŷ_io − y_io)², with an optional 0/1 mask.
    pub fn mse(&mut self, pred: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
        let p = &self.nodes[pred].value;
        p.same_shape(target, "mse target")?;
        if let Some(m) = mask {
            p.same_shape(m, "mse mask")?;
        }
        let b = p.rows().max(1) as f64;
        let mut grad = Tensor::zeros(p.rows(), p.cols());
        let mut loss = 0.0;
        for i in 0..p.numel() {
            let w = mask.map_or(1.0, |m| m.data[i]);
            let diff = p.data[i] - target.data[i];
            loss += w * diff * diff;
            grad.data[i] = 2.0 * w * diff / b;
        }
        let out = Tensor::scalar(loss / b).check_finite("mse")?;
        Ok(self.push(out, Op::Loss(pred, grad)))
    }

    /// (1/B) Σ_i Σ_j α_j e_ij² on normalised six-output predictions,
    /// de-normalised with `stats` before the residuals are evaluated.
    pub fn kc_loss(
        &mut self,
        pred: Var,
        stats: &Standardizer,
        ctxs: &[ConstraintContext],
        weights: &KcWeights,
    ) -> Result<Var> {
        let p = &self.nodes[pred].value;
        if p.cols() != 6 || p.rows() != ctxs.len() {
            return Err(NnError::ShapeMismatch(format!("kc loss on {:?} with {} contexts", p.shape, ctxs.len())));
        }
        let b = p.rows().max(1) as f64;
        let mut grad = Tensor::zeros(p.rows(), 6);
        let mut loss = 0.0;
        for (i, ctx) in ctxs.iter().enumerate() {
            let phys = stats.denormalize(p.row(i));
            let (v, g) = kc_term_with_grad(&phys, ctx, weights);
            loss += v;
            for o in 0..6 {
                grad.data[i * 6 + o] = g[o] * stats.std[o] / b;
            }
        }
        let out = Tensor::scalar(loss / b).check_finite("kc_loss")?;
        Ok(self.push(out, Op::Loss(pred, grad)))
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient per parameter
    /// of `store` (zeros for parameters that did not take part).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Vec<Tensor>> {
        let lv = &self.nodes[loss].value;
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });
        let mut out: Vec<Tensor> = store.params.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (x, w) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (x.rows(), x.cols(), w.cols());
                    let dx = Tensor { shape: x.shape.clone(), data: gemm_bt(&g.data, &w.data, m, n, k) };
                    let dw = Tensor { shape: w.shape.clone(), data: gemm_at(&x.data, &g.data, m, k, n) };
                    accumulate(&mut grads[*a], dx);
                    accumulate(&mut grads[*b], dw);
                }
                Op::AddBias(a, bias) => {
                    let b = &self.nodes[*bias].value;
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data.iter().enumerate() {
                        db[i % c] += v;
                    }
                    accumulate(&mut grads[*bias], Tensor { shape: b.shape.clone(), data: db });
                    accumulate(&mut grads[*a], g);
                }
                Op::Act(a, f) => {
                    let mut d = g;
                    for (dv, y) in d.data.iter_mut().zip(&node.value.data) {
                        *dv *= f.grad_from_output(*y);
                    }
                    accumulate(&mut grads[*a], d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let rows = g.rows();
                    let (mut da, mut db) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                    for i in 0..rows {
                        let r = g.row(i);
                        da.extend_from_slice(&r[..ca]);
                        db.extend_from_slice(&r[ca..]);
                    }
                    accumulate(&mut grads[*a], Tensor { shape: vec![rows, ca], data: da });
                    accumulate(&mut grads[*b], Tensor { shape: vec![rows, cb], data: db });
                }
                Op::NeighborMean(a, gb) => {
                    let c = g.cols();
                    let mut d = Tensor::zeros(g.rows(), c);
                    for (i, nb) in gb.neighbors.iter().enumerate() {
                        if nb.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / nb.len() as f64;
                        for &j in nb {
                            let (src, dst) = (g.row(i), &mut d.data[j * c..(j + 1) * c]);
                            for (dv, s) in dst.iter_mut().zip(src) {
                                *dv += s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], d);
                }
                Op::SegmentMean(a, gb) => {
                    let c = g.cols();
                    let mut d = Tensor::zeros(gb.rows(), c);
                    for (s, &(start, len)) in gb.segments.iter().enumerate() {
                        let inv = 1.0 / len.max(1) as f64;
                        for r in start..start + len {
                            for (dv, gv) in d.data[r * c..(r + 1) * c].iter_mut().zip(g.row(s)) {
                                *dv = gv * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*a], d);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[*a].value.shape.clone();
                    accumulate(&mut grads[*a], Tensor { shape, data: g.data });
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*b], g.clone());
                    accumulate(&mut grads[*a], g);
                }
                Op::Loss(a, local) => {
                    let s = g.data[0];
                    let mut d = local.clone();
                    d.data.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads[*a], d);
                }
            }
        }
        for t in &out {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("backward"));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered parameter storage shared by every layer of a model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param { name: name.into(), value });
        self.params.len() - 1
    }

    /// Uniform ±√(6/(in+out)) initialisation.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor { shape: vec![rows, cols], data })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self, ids: impl IntoIterator<Item = usize>) -> usize {
        ids.into_iter().map(|i| self.params[i].value.numel()).sum()
    }

    /// SHA-256 over the names, shapes and exact bit patterns of `ids`.
    pub fn hash(&self, ids: impl IntoIterator<Item = usize>) -> String {
        let mut h = Sha256::new();
        for i in ids {
            let p = &self.params[i];
            h.update(p.name.as_bytes());
            for s in &p.value.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Graphsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// A layer bound to its parameters in a [`ParamStore`]. Dense layers own a
/// weight and a bias; GraphSAGE layers own a self weight and a neighbour
/// weight and no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: [usize; 2],
}

impl Layer {
    pub fn new(spec: LayerSpec, name: &str, store: &mut ParamStore, rng: &mut ChaCha20Rng) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(NnError::InvalidSpec(format!("{name}: dimensions must be positive")));
        }
        let params = match spec.kind {
            LayerKind::Dense => [
                store.add_glorot(format!("{name}.w"), spec.in_dim, spec.out_dim, rng),
                store.add(format!("{name}.b"), Tensor::zeros(1, spec.out_dim)),
            ],
            LayerKind::Graphsage => [
                store.add_glorot(format!("{name}.w_self"), spec.in_dim, spec.out_dim, rng),
                store.add_glorot(format!("{name}.w_neigh"), spec.in_dim, spec.out_dim, rng),
            ],
        };
        Ok(Self { spec, params })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, graph: Option<&Arc<GraphBatch>>) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.spec.in_dim {
            return Err(NnError::ShapeMismatch(format!("layer expects {} inputs, got {cols}", self.spec.in_dim)));
        }
        let w0 = tape.param(store, self.params[0]);
        let w1 = tape.param(store, self.params[1]);
        let pre = match self.spec.kind {
            LayerKind::Dense => {
                let h = tape.matmul(x, w0)?;
                tape.add_bias(h, w1)?
            }
            LayerKind::Graphsage => {
                let g = graph.ok_or_else(|| NnError::InvalidSpec("graphsage layer needs a graph".into()))?;
                let own = tape.matmul(x, w0)?;
                let agg = tape.neighbor_mean(x, g)?;
                let nb = tape.matmul(agg, w1)?;
                tape.add(own, nb)?
            }
        };
        tape.act(pre, self.spec.activation)
    }
}

/// Runs a stack of layers.
pub fn run_layers(
    layers: &[Layer],
    tape: &mut Tape,
    store: &ParamStore,
    mut x: Var,
    graph: Option<&Arc<GraphBatch>>,
) -> Result<Var> {
    for l in layers {
        x = l.forward(tape, store, x, graph)?;
    }
    Ok(x)
}

/// y_i = σ(W₁ x_i + W₂ mean_{j∈N(i)} x_j) without recording gradients.
/// Weights are (in × out); rows of `x` are nodes.
pub fn graphsage_forward(x: &Tensor, adj: &AdjacencyMatrix, w1: &Tensor, w2: &Tensor, act: Activation) -> Result<Tensor> {
    if x.rows() != adj.n() {
        return Err(NnError::ShapeMismatch(format!("{} feature rows for {} nodes", x.rows(), adj.n())));
    }
    if w1.shape != w2.shape || w1.rows() != x.cols() {
        return Err(NnError::ShapeMismatch(format!("weights {:?}/{:?} for input {:?}", w1.shape, w2.shape, x.shape)));
    }
    let graph = Arc::new(GraphBatch::from_adjacency(adj));
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let a = tape.input(w1.clone());
    let b = tape.input(w2.clone());
    let own = tape.matmul(xv, a)?;
    let agg = tape.neighbor_mean(xv, &graph)?;
    let nb = tape.matmul(agg, b)?;
    let sum = tape.add(own, nb)?;
    let y = tape.act(sum, act)?;
    Ok(tape.value(y).clone())
}

/// Affine + activation composition; each layer is (W: in × out, b: 1 × out).
pub fn mlp_forward(x: &Tensor, layers: &[(Tensor, Tensor, Activation)]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut v = tape.input(x.clone());
    for (w, b, act) in layers {
        let wv = tape.input(w.clone());
        let bv = tape.input(b.clone());
        let h = tape.matmul(v, wv)?;
        let h = tape.add_bias(h, bv)?;
        v = tape.act(h, *act)?;
    }
    Ok(tape.value(v).clone())
}

/// Per-output affine normalisation: z = (y − mean) / std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = v[o] * self.std[o] + self.mean[o];
        }
        out
    }

    pub fn denormalize_vec(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn adam(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update of the parameters selected by `trainable`; the rest are
/// left untouched, moments included.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimState, trainable: &[bool]) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || trainable.len() != store.len() {
        return Err(NnError::ShapeMismatch("adam: parameter, gradient and state counts differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, p) in store.params.iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        p.value.same_shape(&grads[i], "adam gradient")?;
        let (m, v) = (&mut state.m[i].data, &mut state.v[i].data);
        for (j, w) in p.value.data.iter_mut().enumerate() {
            let g = grads[i].data[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn graphsage_identity_and_neighbor_examples() {
        let x = t(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0]]);
        let adj = AdjacencyMatrix::from_pairs(3, &[(0, 1), (1, 2)]);
        let id = Tensor::identity(2);
        let zero = Tensor::zeros(2, 2);
        assert_eq!(graphsage_forward(&x, &adj, &id, &zero, Activation::Identity).unwrap(), x);

        let pair = AdjacencyMatrix::from_pairs(2, &[(0, 1)]);
        let x2 = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = graphsage_forward(&x2, &pair, &zero, &id, Activation::Identity).unwrap();
        assert_eq!(y, t(&[&[3.0, 4.0], &[1.0, 2.0]]));

        let bad = Tensor::zeros(3, 2);
        assert!(matches!(graphsage_forward(&bad, &pair, &id, &id, Activation::Tanh), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn isolated_nodes_use_zero_neighbor_mean() {
        let x = t(&[&[1.0], &[2.0]]);
        let adj = AdjacencyMatrix::from_pairs(2, &[]);
        let y = graphsage_forward(&x, &adj, &Tensor::zeros(1, 1), &Tensor::identity(1), Activation::Identity).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_examples() {
        let x = t(&[&[-1.0, 2.0]]);
        let id = (Tensor::identity(2), Tensor::zeros(1, 2), Activation::Identity);
        assert_eq!(mlp_forward(&x, std::slice::from_ref(&id)).unwrap(), x);
        let constant = (Tensor::zeros(2, 2), t(&[&[0.5, -3.0]]), Activation::Identity);
        assert_eq!(mlp_forward(&x, &[constant]).unwrap().data, vec![0.5, -3.0]);
        let relu = (Tensor::identity(2), Tensor::zeros(1, 2), Activation::Relu);
        assert_eq!(mlp_forward(&x, &[relu]).unwrap().data, vec![0.0, 2.0]);
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut store = ParamStore::default();
        let x = store.add("x", t(&[&[1.5, -2.0, 0.25]]));
        let unused = store.add("unused", Tensor::scalar(4.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        // ½‖x‖² = (1/B)Σ(x − 0)² with B = 1 scaled by ½ through the target trick.
        let loss = tape.mse(xv, &Tensor::zeros(1, 3), None).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        let half: Vec<f64> = g[x].data.iter().map(|v| v * 0.5).collect();
        assert_eq!(half, store.params[x].value.data);
        assert_eq!(g[unused].data, vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::default();
        let mut tape = Tape::new();
        let v = tape.input(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(v, &store), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_trip() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[&[f64::MAX]]));
        let b = tape.input(t(&[&[f64::MAX]]));
        assert_eq!(tape.add(a, b), Err(NnError::NonFinite("add")));
    }

    fn small_net(seed: u64) -> (ParamStore, Vec<Layer>, Vec<Layer>, Layer) {
        let mut rng = seeded_rng(seed, 0);
        let mut store = ParamStore::default();
        let gs = vec![
            Layer::new(LayerSpec { kind: LayerKind::Graphsage, in_dim: 3, out_dim: 4, activation: Activation::Tanh }, "g0", &mut store, &mut rng).unwrap(),
            Layer::new(LayerSpec { kind: LayerKind::Graphsage, in_dim: 4, out_dim: 4, activation: Activation::Tanh }, "g1", &mut store, &mut rng).unwrap(),
        ];
        let mlp = vec![Layer::new(LayerSpec { kind: LayerKind::Dense, in_dim: 2, out_dim: 3, activation: Activation::Relu }, "m0", &mut store, &mut rng).unwrap()];
        let head = Layer::new(LayerSpec { kind: LayerKind::Dense, in_dim: 7, out_dim: 2, activation: Activation::Identity }, "h", &mut store, &mut rng).unwrap();
        for p in store.params.iter_mut() {
            if p.name.ends_with(".b") {
                p.value.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 + 1.0));
            }
        }
        (store, gs, mlp, head)
    }

    fn small_loss(store: &ParamStore, gs: &[Layer], mlp: &[Layer], head: &Layer) -> (Tape, Var) {
        let graph = Arc::new(GraphBatch::repeat(&[vec![1], vec![0, 2], vec![1], vec![]], 2));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![8, 3], (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap());
        let g = tape.input(t(&[&[0.3, -0.7], &[1.1, 0.2]]));
        let h = run_layers(gs, &mut tape, store, x, Some(&graph)).unwrap();
        let pooled = tape.segment_mean(h, &graph).unwrap();
        let m = run_layers(mlp, &mut tape, store, g, None).unwrap();
        let cat = tape.concat_cols(pooled, m).unwrap();
        let out = head.forward(&mut tape, store, cat, None).unwrap();
        let loss = tape.mse(out, &t(&[&[0.5, -0.2], &[0.1, 0.9]]), None).unwrap();
        (tape, loss)
    }

    #[test]
    fn gradients_match_central_differences() {
        let (mut store, gs, mlp, head) = small_net(3);
        let (tape, loss) = small_loss(&store, &gs, &mlp, &head);
        let grads = tape.backward(loss, &store).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for p in 0..store.len() {
            for j in 0..store.params[p].value.numel() {
                let orig = store.params[p].value.data[j];
                store.params[p].value.data[j] = orig + h;
                let (t1, l1) = small_loss(&store, &gs, &mlp, &head);
                store.params[p].value.data[j] = orig - h;
                let (t2, l2) = small_loss(&store, &gs, &mlp, &head);
                store.params[p].value.data[j] = orig;
                let fd = (t1.value(l1).data[0] - t2.value(l2).data[0]) / (2.0 * h);
                let an = grads[p].data[j];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adam_behaviour() {
        let mut store = ParamStore::default();
        let w = store.add("w", Tensor::scalar(1.0));
        let mut st = OptimState::adam(0.05, &store);
        adam_step(&mut store, &[Tensor::scalar(0.0)], &mut st, &[true]).unwrap();
        assert_eq!(store.params[w].value.data[0], 1.0);
        assert_eq!(st.step, 1);

        let run = || {
            let mut store = ParamStore::default();
            store.add("w", Tensor::scalar(1.0));
            let mut st = OptimState::adam(0.01, &store);
            let mut path = Vec::new();
            for _ in 0..200 {
                let g = 2.0 * store.params[0].value.data[0];
                adam_step(&mut store, &[Tensor::scalar(g)], &mut st, &[true]).unwrap();
                path.push(store.params[0].value.data[0]);
            }
            path
        };
        let path = run();
        assert!(path.windows(2).skip(5).all(|p| p[1].abs() < p[0].abs()));
        assert_eq!(path, run());
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let (mut store, ..) = small_net(1);
        let before = store.hash([0, 1]);
        let grads: Vec<Tensor> = store.params.iter().map(|p| Tensor { shape: p.value.shape.clone(), data: vec![1.0; p.value.numel()] }).collect();
        let mut st = OptimState::adam(0.1, &store);
        let mut trainable = vec![true; store.len()];
        trainable[0] = false;
        trainable[1] = false;
        adam_step(&mut store, &grads, &mut st, &trainable).unwrap();
        assert_eq!(store.hash([0, 1]), before);
        assert_ne!(store.hash([2]), small_net(1).0.hash([2]));
    }

    #[test]
    fn store_json_round_trip_is_lossless() {
        let (store, ..) = small_net(11);
        let text = serde_json::to_string(&store).unwrap();
        let back: ParamStore = serde_json::from_str(&text).unwrap();
        assert_eq!(back.hash(0..back.len()), store.hash(0..store.len()));
    }

    proptest! {
        #[test]
        fn graphsage_is_relabel_equivariant(
            n in 2usize..7,
            pairs in proptest::collection::vec((0usize..7, 0usize..7), 0..12),
            seed in 0u64..1000,
        ) {
            let pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(a, b)| (a % n, b % n)).collect();
            let adj = AdjacencyMatrix::from_pairs(n, &pairs);
            let mut rng = seeded_rng(seed, 1);
            let x = Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let w1 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let w2 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let perm: Vec<usize> = { let mut p: Vec<usize> = (0..n).collect(); p.rotate_left(seed as usize % n); p };
            let mut px = Tensor::zeros(n, 3);
            for i in 0..n { px.data[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(x.row(i)); }
            let y = graphsage_forward(&x, &adj, &w1, &w2, Activation::Tanh).unwrap();
            let py = graphsage_forward(&px, &adj.permuted(&perm), &w1, &w2, Activation::Tanh).unwrap();
            for i in 0..n {
                for c in 0..2 {
                    prop_assert!((y.get(i, c) - py.get(perm[i], c)).abs() < 1e-12);
                }
            }
        }
    }
}
