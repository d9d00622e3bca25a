use std::sync::Arc;

use super::ops::{self, ConvGeom, ResizeGeom};
use super::{gemm, Tensor};
use crate::error::{contract_err, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBiasRows { x: Var, b: Var },
    AddBiasChannels { x: Var, b: Var },
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Resize { x: Var, geom: ResizeGeom },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose { x: Var, m: usize, n: usize },
    Sum(Var),
    MeanRows { x: Var, m: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// A recording tape keeps each op's inputs so [`Tape::backward`] can replay
/// the chain rule in reverse. A [`Tape::no_grad`] tape only holds values, for
/// inference and finite-difference evaluation. Tapes are single-threaded;
/// build one per worker and drop it after the step.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let grad = self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, grad });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, deps: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite result from op");
        let grad = self.recording && deps.iter().any(|d| self.nodes[d.0].grad);
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `root`. Nodes are visited once each
    /// in reverse creation order, which is a reverse topological order.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Grads { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                // C = op(A)·op(B); dop(A) = dC·op(B)ᵀ, dop(B) = op(A)ᵀ·dC.
                if let Some(ga) = self.acc(grads, a) {
                    if ta {
                        // A is k×m: dA = op(B)·dCᵀ
                        gemm(k, n, m, val(b), tb, gy, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, gy, false, val(b), !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if tb {
                        // B is n×k: dB = dCᵀ·op(A)
                        gemm(n, m, k, gy, true, val(a), ta, 1.0, gb);
                    } else {
                        gemm(k, m, n, val(a), !ta, gy, false, 1.0, gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    add_into(g, gy);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(g) = self.acc(grads, a) {
                    let bv = val(b);
                    g.iter_mut().zip(gy).zip(bv).for_each(|((g, d), y)| *g += d * y);
                }
                if let Some(g) = self.acc(grads, b) {
                    let av = val(a);
                    g.iter_mut().zip(gy).zip(av).for_each(|((g, d), x)| *g += d * x);
                }
            }
            &Op::Scale(x, s) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += s * d);
                }
            }
            &Op::AddBiasRows { x, b } => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    let n = g.len();
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                }
            }
            &Op::AddBiasChannels { x, b } => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, b) {
                    let inner = gy.len() / g.len();
                    for (gc, chunk) in g.iter_mut().zip(gy.chunks(inner)) {
                        *gc += chunk.iter().sum::<f64>();
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(g) = self.acc(grads, x) {
                    let xv = val(x);
                    for ((g, d), &x) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d * ops::gelu_grad(x);
                    }
                }
            }
            &Op::Softmax(x) => {
                if let Some(g) = self.acc(grads, x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    for ((g, y), d) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.value(*gamma).numel();
                if let Some(g) = self.acc(grads, *gamma) {
                    for (xh, d) in xhat.chunks(c).zip(gy.chunks(c)) {
                        for j in 0..c {
                            g[j] += d[j] * xh[j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for d in gy.chunks(c) {
                        add_into(g, d);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let gam = val(*gamma);
                    let cf = c as f64;
                    for (r, ((g, xh), d)) in
                        g.chunks_mut(c).zip(xhat.chunks(c)).zip(gy.chunks(c)).enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let dxh = d[j] * gam[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        for j in 0..c {
                            let dxh = d[j] * gam[j];
                            g[j] += inv_std[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Conv2d { x, k, geom } => {
                let kcols = geom.ci * geom.kh * geom.kw;
                let npos = geom.ho * geom.wo;
                if let Some(g) = self.acc(grads, k) {
                    let cols = ops::im2col(val(x), &geom);
                    gemm(geom.co, npos, kcols, gy, false, &cols, true, 1.0, g);
                }
                if let Some(g) = self.acc(grads, x) {
                    let mut dcols = vec![0.0; kcols * npos];
                    gemm(kcols, geom.co, npos, val(k), true, gy, false, 0.0, &mut dcols);
                    ops::col2im_add(&dcols, &geom, g);
                }
            }
            &Op::Resize { x, geom } => {
                if let Some(g) = self.acc(grads, x) {
                    ops::resize_backward(gy, &geom, g);
                }
            }
            Op::Gather { x, idx } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (&j, d) in idx.iter().zip(gy) {
                        g[j] += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(g) = self.acc(grads, p) {
                        add_into(g, &gy[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, x) {
                    add_into(g, gy);
                }
            }
            &Op::Transpose { x, m, n } => {
                if let Some(g) = self.acc(grads, x) {
                    // y is n×m, x is m×n
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            &Op::MeanRows { x, m } => {
                if let Some(g) = self.acc(grads, x) {
                    let n = gy.len();
                    let inv = 1.0 / m as f64;
                    for row in g.chunks_mut(n) {
                        row.iter_mut().zip(gy).for_each(|(g, d)| *g += d * inv);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(g) = self.acc(grads, *logits) {
                    let rows = targets.len();
                    let c = probs.len() / rows;
                    let s = gy[0] / rows as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// `None` when `v` does not influence the root or does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when it is unreached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
