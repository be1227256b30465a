use std::sync::Arc;

use super::{CsrMatrix, ParamId, ParamStore, Tensor};
use crate::error::{CsaError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

#[derive(Debug, Clone)]
pub(super) enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// Constant sparse left operand.
    SparseMatMul(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a fixed mask (dropout).
    MaskMul(Var, Vec<f64>),
    Sum(Var),
    LeakyRelu(Var, f64),
    Elu(Var, f64),
    Relu(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    SegmentSoftmax {
        input: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
    },
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        segments: Arc<[usize]>,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        mask: Arc<[usize]>,
        /// Row-wise softmax of the masked rows, saved for the backward pass.
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub(super) struct Node {
    pub(super) shape: Vec<usize>,
    pub(super) value: Vec<f64>,
    pub(super) op: Op,
    /// True when some requires-grad leaf is reachable from this node.
    pub(super) tracked: bool,
}

/// Ordered record of the operations of one forward pass.
///
/// Nodes are appended in execution order; `backward` walks them in exact
/// reverse. A tape is meant to be used for a single forward/backward pass and
/// then dropped.
#[derive(Debug, Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub(super) fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Constant, false)
    }

    /// Records a free leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a parameter; its gradient is accumulated into `store` by `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of parameter leaves are *added* to the gradient buffers in
    /// `store`; call [`ParamStore::zero_grad`] between optimisation steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(CsaError::shape("backward", &root.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                store.get_mut(id).accumulate_grad(&g);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (an, bn) = (self.node(*a), self.node(*b));
                let (m, k, n) = (an.shape[0], an.shape[1], bn.shape[1]);
                if an.tracked {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bn.value[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if bn.tracked {
                    // dB = A^T G, skipping structural zeros of A
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = an.value[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, x)| *d += aip * x);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SparseMatMul(a, b) => {
                let bn = self.node(*b);
                if bn.tracked {
                    let n = bn.shape[1];
                    let mut db = vec![0.0; bn.value.len()];
                    for i in 0..a.rows() {
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, aip) in a.row(i) {
                            let dst = &mut db[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, x)| *d += aip * x);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::MaskMul(a, mask) => {
                self.accumulate(grads, *a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
            }
            Op::Sum(a) => {
                let n = self.node(*a).value.len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::LeakyRelu(a, slope) => {
                let xv = &self.node(*a).value;
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { gi * slope })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Elu(a, alpha) => {
                let xv = &self.node(*a).value;
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { gi * alpha * x.exp() })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let xv = &self.node(*a).value;
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.node(*p).shape[1];
                    if self.is_tracked(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let an = self.node(*a);
                if an.tracked {
                    let width = node.shape[1];
                    let mut d = vec![0.0; an.value.len()];
                    for (e, &r) in idx.iter().enumerate() {
                        let src = &g[e * width..(e + 1) * width];
                        d[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::SegmentSoftmax {
                input,
                segments,
                num_segments,
            } => {
                let y = &node.value;
                let mut dot = vec![0.0; *num_segments];
                for ((s, gi), yi) in segments.iter().zip(g).zip(y) {
                    dot[*s] += gi * yi;
                }
                let d = segments
                    .iter()
                    .zip(g)
                    .zip(y)
                    .map(|((s, gi), yi)| yi * (gi - dot[*s]))
                    .collect();
                self.accumulate(grads, *input, d);
            }
            Op::SegmentWeightedSum {
                weights,
                values,
                segments,
            } => {
                let (wn, vn) = (self.node(*weights), self.node(*values));
                let width = vn.shape[1];
                if wn.tracked {
                    let d = segments
                        .iter()
                        .enumerate()
                        .map(|(e, &s)| {
                            let gs = &g[s * width..(s + 1) * width];
                            let ve = &vn.value[e * width..(e + 1) * width];
                            gs.iter().zip(ve).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    self.accumulate(grads, *weights, d);
                }
                if vn.tracked {
                    let mut d = vec![0.0; vn.value.len()];
                    for (e, &s) in segments.iter().enumerate() {
                        let w = wn.value[e];
                        let gs = &g[s * width..(s + 1) * width];
                        d[e * width..(e + 1) * width]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(d, x)| *d = w * x);
                    }
                    self.accumulate(grads, *values, d);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
            } => {
                let ln = self.node(*logits);
                let c = ln.shape[1];
                let scale = g[0] / mask.len() as f64;
                let mut d = vec![0.0; ln.value.len()];
                for (k, &i) in mask.iter().enumerate() {
                    let p = &probs[k * c..(k + 1) * c];
                    let row = &mut d[i * c..(i + 1) * c];
                    for j in 0..c {
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        row[j] += scale * (p[j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}
