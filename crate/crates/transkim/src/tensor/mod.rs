//! Dense tensor substrate with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op pushes one node recording its inputs and
//! enough saved state for the local gradient rule. [`Graph::backward`] walks
//! the tape in exact reverse creation order. Values are flat row-major `Vec`s;
//! shapes are checked at op boundaries, not construction.
//!
//! The tape also carries a forward FLOP counter (multiply-add counted as 2)
//! used by the cost-accounting oracle; backward passes do not count.

pub mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use kernels::{
    broadcast_copy, gelu_grad, gelu_value, gemm_into, inverse_perm, layer_norm_rows,
    log_softmax_rows, numel, permute_copy, reduce_from_broadcast, softmax_rows,
};

enum Op<S: Scalar> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    MulScalar(usize, S),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_is_2d: bool,
    },
    Softmax {
        x: usize,
        width: usize,
    },
    LogSoftmax {
        x: usize,
        width: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        width: usize,
        stats: Vec<(S, S)>,
    },
    Gelu(usize),
    GatherRows {
        x: usize,
        keep: Vec<usize>,
        in_rows: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
        dim: usize,
    },
    BroadcastTo {
        x: usize,
        from: Vec<usize>,
    },
    SumAll(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    // The input id is kept for tape readability; backward never follows it.
    Detach(#[allow(dead_code)] usize),
    SelectLastDim {
        x: usize,
        index: usize,
        width: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        width: usize,
        counted: usize,
    },
}

struct Node<S: Scalar> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
}

struct GraphInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// Accumulated gradients for leaf nodes (indexed by node id).
    leaf_grads: Vec<Option<Vec<S>>>,
    /// Forward scalar-op counter; multiply-add counts as 2.
    flops: u64,
}

/// Shared handle to a tape. Cloning is cheap; the tape itself is worker-local.
pub struct Graph<S: Scalar> {
    inner: Rc<RefCell<GraphInner<S>>>,
}

impl<S: Scalar> Clone for Graph<S> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<S: Scalar> {
    graph: Graph<S>,
    id: usize,
    shape: Vec<usize>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                leaf_grads: Vec::new(),
                flops: 0,
            })),
        }
    }

    fn push(&self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, requires_grad: bool) -> Tensor<S> {
        debug_assert_eq!(value.len(), numel(&shape), "value length must match shape");
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            shape: shape.clone(),
            op,
            requires_grad,
        });
        inner.leaf_grads.push(None);
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    fn add_flops(&self, n: u64) {
        self.inner.borrow_mut().flops += n;
    }

    /// A differentiable leaf (model parameter).
    pub fn leaf(&self, data: Vec<S>, shape: &[usize]) -> Tensor<S> {
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    /// A constant: no gradient ever flows into or through it.
    pub fn constant(&self, data: Vec<S>, shape: &[usize]) -> Tensor<S> {
        self.push(data, shape.to_vec(), Op::Constant, false)
    }

    pub fn full(&self, v: S, shape: &[usize]) -> Tensor<S> {
        self.constant(vec![v; numel(shape)], shape)
    }

    pub fn scalar(&self, v: S) -> Tensor<S> {
        self.constant(vec![v], &[1])
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(&self, table: &Tensor<S>, ids: &[u32]) -> Result<Tensor<S>> {
        if table.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "embedding",
                shape: table.shape.clone(),
                what: "table must be 2-D".into(),
            });
        }
        let (vocab, dim) = (table.shape[0], table.shape[1]);
        let inner = self.inner.borrow();
        let tv = &inner.nodes[table.id].value;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let idx = id as usize;
            if idx >= vocab {
                return Err(Error::VocabError { id, vocab });
            }
            out.extend_from_slice(&tv[idx * dim..(idx + 1) * dim]);
        }
        let requires = inner.nodes[table.id].requires_grad;
        drop(inner);
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
                dim,
            },
            requires,
        ))
    }

    /// Total forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.inner.borrow().flops
    }

    pub fn reset_flops(&self) {
        self.inner.borrow_mut().flops = 0;
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grads(&self) {
        for g in self.inner.borrow_mut().leaf_grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse pass from a scalar root. Walks the tape in exact reverse
    /// creation order; leaf gradients accumulate (`+=`) across calls until
    /// [`Graph::zero_grads`].
    pub fn backward(&self, root: &Tensor<S>) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let n = root.id + 1;
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.id] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            if !inner.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &inner.nodes[i].op {
                Op::Leaf => {
                    let slot = &mut inner.leaf_grads[i];
                    match slot {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(g.iter()) {
                                *a += *v;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate_into(&mut grads, &inner, a, &g);
                    accumulate_into(&mut grads, &inner, b, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate_into(&mut grads, &inner, a, &g);
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    accumulate_into(&mut grads, &inner, b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<S> = g
                        .iter()
                        .zip(inner.nodes[b].value.iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let gb: Vec<S> = g
                        .iter()
                        .zip(inner.nodes[a].value.iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    accumulate_into(&mut grads, &inner, a, &ga);
                    accumulate_into(&mut grads, &inner, b, &gb);
                }
                Op::Neg(a) => {
                    let a = *a;
                    let ga: Vec<S> = g.iter().map(|&v| -v).collect();
                    accumulate_into(&mut grads, &inner, a, &ga);
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    let ga: Vec<S> = g.iter().map(|&v| v * s).collect();
                    accumulate_into(&mut grads, &inner, a, &ga);
                }
                Op::Matmul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n: nn,
                    b_is_2d,
                } => {
                    let (a, b, batch, m, k, nn, b_is_2d) = (*a, *b, *batch, *m, *k, *nn, *b_is_2d);
                    let av = &inner.nodes[a].value;
                    let bv = &inner.nodes[b].value;
                    let mut ga = vec![S::zero(); av.len()];
                    let mut gb = vec![S::zero(); bv.len()];
                    if b_is_2d {
                        // dA = g @ B^T over folded rows, dB = A_fold^T @ g_fold.
                        let rows = batch * m;
                        gemm_into(
                            rows, nn, k, &g, 0, nn as isize, 1, bv, 0, 1, nn as isize, &mut ga, 0,
                        );
                        gemm_into(
                            k, rows, nn, av, 0, 1, k as isize, &g, 0, nn as isize, 1, &mut gb, 0,
                        );
                    } else {
                        for bi in 0..batch {
                            let (ao, bo, go) = (bi * m * k, bi * k * nn, bi * m * nn);
                            gemm_into(
                                m, nn, k, &g, go, nn as isize, 1, bv, bo, 1, nn as isize, &mut ga,
                                ao,
                            );
                            gemm_into(
                                k, m, nn, av, ao, 1, k as isize, &g, go, nn as isize, 1, &mut gb,
                                bo,
                            );
                        }
                    }
                    accumulate_into(&mut grads, &inner, a, &ga);
                    accumulate_into(&mut grads, &inner, b, &gb);
                }
                Op::Softmax { x, width } => {
                    let (x, width) = (*x, *width);
                    let y = &inner.nodes[i].value;
                    let mut gx = vec![S::zero(); y.len()];
                    for ((yr, gr), o) in y
                        .chunks(width)
                        .zip(g.chunks(width))
                        .zip(gx.chunks_mut(width))
                    {
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                            dot += yv * gv;
                        }
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *ov = yv * (gv - dot);
                        }
                    }
                    accumulate_into(&mut grads, &inner, x, &gx);
                }
                Op::LogSoftmax { x, width } => {
                    let (x, width) = (*x, *width);
                    let y = &inner.nodes[i].value;
                    let mut gx = vec![S::zero(); y.len()];
                    for ((yr, gr), o) in y
                        .chunks(width)
                        .zip(g.chunks(width))
                        .zip(gx.chunks_mut(width))
                    {
                        let mut gsum = S::zero();
                        for &gv in gr {
                            gsum += gv;
                        }
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *ov = gv - yv.exp() * gsum;
                        }
                    }
                    accumulate_into(&mut grads, &inner, x, &gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    width,
                    stats,
                } => {
                    let (x, gain, bias, width) = (*x, *gain, *bias, *width);
                    let stats = stats.clone();
                    let xv = &inner.nodes[x].value;
                    let gv = &inner.nodes[gain].value;
                    let d = S::from_f64(width as f64);
                    let mut gx = vec![S::zero(); xv.len()];
                    let mut ggain = vec![S::zero(); width];
                    let mut gbias = vec![S::zero(); width];
                    for (pos, (xr, gr)) in xv.chunks(width).zip(g.chunks(width)).enumerate() {
                        let (mean, inv) = stats[pos];
                        let mut sum_gg = S::zero();
                        let mut sum_ggx = S::zero();
                        for (j, (&xvj, &grj)) in xr.iter().zip(gr.iter()).enumerate() {
                            let xhat = (xvj - mean) * inv;
                            let gg = grj * gv[j];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                            ggain[j] += grj * xhat;
                            gbias[j] += grj;
                        }
                        let mean_gg = sum_gg / d;
                        let mean_ggx = sum_ggx / d;
                        let o = &mut gx[pos * width..(pos + 1) * width];
                        for (j, (&xvj, &grj)) in xr.iter().zip(gr.iter()).enumerate() {
                            let xhat = (xvj - mean) * inv;
                            let gg = grj * gv[j];
                            o[j] = inv * (gg - mean_gg - xhat * mean_ggx);
                        }
                    }
                    accumulate_into(&mut grads, &inner, x, &gx);
                    accumulate_into(&mut grads, &inner, gain, &ggain);
                    accumulate_into(&mut grads, &inner, bias, &gbias);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let ga: Vec<S> = g
                        .iter()
                        .zip(inner.nodes[a].value.iter())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    accumulate_into(&mut grads, &inner, a, &ga);
                }
                Op::GatherRows { x, keep, in_rows } => {
                    let (x, in_rows) = (*x, *in_rows);
                    let keep = keep.clone();
                    let cols = if inner.nodes[i].shape.len() == 2 {
                        inner.nodes[i].shape[1]
                    } else {
                        0
                    };
                    let mut gx = vec![S::zero(); in_rows * cols];
                    for (r, &src) in keep.iter().enumerate() {
                        gx[src * cols..(src + 1) * cols]
                            .copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accumulate_into(&mut grads, &inner, x, &gx);
                }
                Op::Embedding { table, ids, dim } => {
                    let (table, dim) = (*table, *dim);
                    let ids = ids.clone();
                    let mut gt = vec![S::zero(); inner.nodes[table].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let base = id as usize * dim;
                        for j in 0..dim {
                            gt[base + j] += g[r * dim + j];
                        }
                    }
                    accumulate_into(&mut grads, &inner, table, &gt);
                }
                Op::BroadcastTo { x, from } => {
                    let x = *x;
                    let from = from.clone();
                    let to = inner.nodes[i].shape.clone();
                    let gx = reduce_from_broadcast(&g, &from, &to);
                    accumulate_into(&mut grads, &inner, x, &gx);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let ga = vec![g[0]; inner.nodes[a].value.len()];
                    accumulate_into(&mut grads, &inner, a, &ga);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    accumulate_into(&mut grads, &inner, a, &g);
                }
                Op::Permute { x, perm } => {
                    let x = *x;
                    let perm = perm.clone();
                    let (gx, _) = permute_copy(&g, &inner.nodes[i].shape, &inverse_perm(&perm));
                    accumulate_into(&mut grads, &inner, x, &gx);
                }
                Op::Detach(_) => {}
                Op::SelectLastDim { x, index, width } => {
                    let (x, index, width) = (*x, *index, *width);
                    let mut gx = vec![S::zero(); inner.nodes[x].value.len()];
                    for (r, &gv) in g.iter().enumerate() {
                        gx[r * width + index] = gv;
                    }
                    accumulate_into(&mut grads, &inner, x, &gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    width,
                    counted,
                } => {
                    let (logits, width, counted) = (*logits, *width, *counted);
                    let targets = targets.clone();
                    let lv = &inner.nodes[logits].value;
                    let scale = g[0] / S::from_f64(counted as f64);
                    let mut gl = vec![S::zero(); lv.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let row = &lv[r * width..(r + 1) * width];
                        let mut mx = S::neg_infinity();
                        for &v in row {
                            if v > mx {
                                mx = v;
                            }
                        }
                        let mut sum = S::zero();
                        let o = &mut gl[r * width..(r + 1) * width];
                        for (ov, &v) in o.iter_mut().zip(row.iter()) {
                            let e = (v - mx).exp();
                            *ov = e;
                            sum += e;
                        }
                        for (c, ov) in o.iter_mut().enumerate() {
                            let mut p = *ov / sum;
                            if c == t as usize {
                                p -= S::one();
                            }
                            *ov = p * scale;
                        }
                    }
                    accumulate_into(&mut grads, &inner, logits, &gl);
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `g` into the pending gradient buffer of node `id`, skipping
/// nodes that do not require grad (gradient flow stops there).
fn accumulate_into<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    inner: &GraphInner<S>,
    id: usize,
    g: &[S],
) {
    if !inner.nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g.iter()) {
                *a += *v;
            }
        }
        None => grads[id] = Some(g.to_vec()),
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn graph(&self) -> &Graph<S> {
        &self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copy the node value out of the tape.
    pub fn data(&self) -> Vec<S> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.graph.inner.borrow().nodes[self.id].value[0]
    }

    /// Accumulated gradient, populated on leaves after `backward`.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.graph.inner.borrow().leaf_grads[self.id].clone()
    }

    fn same_graph(&self, other: &Tensor<S>) {
        debug_assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }

    fn binary_shape_check(&self, other: &Tensor<S>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_graph(other);
        self.binary_shape_check(other, "add")?;
        let inner = self.graph.inner.borrow();
        let out: Vec<S> = inner.nodes[self.id]
            .value
            .iter()
            .zip(inner.nodes[other.id].value.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let req = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
        drop(inner);
        self.graph.add_flops(self.numel() as u64);
        Ok(self
            .graph
            .push(out, self.shape.clone(), Op::Add(self.id, other.id), req))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_graph(other);
        self.binary_shape_check(other, "sub")?;
        let inner = self.graph.inner.borrow();
        let out: Vec<S> = inner.nodes[self.id]
            .value
            .iter()
            .zip(inner.nodes[other.id].value.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let req = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
        drop(inner);
        self.graph.add_flops(self.numel() as u64);
        Ok(self
            .graph
            .push(out, self.shape.clone(), Op::Sub(self.id, other.id), req))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_graph(other);
        self.binary_shape_check(other, "mul")?;
        let inner = self.graph.inner.borrow();
        let out: Vec<S> = inner.nodes[self.id]
            .value
            .iter()
            .zip(inner.nodes[other.id].value.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let req = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
        drop(inner);
        self.graph.add_flops(self.numel() as u64);
        Ok(self
            .graph
            .push(out, self.shape.clone(), Op::Mul(self.id, other.id), req))
    }

    pub fn neg(&self) -> Tensor<S> {
        let inner = self.graph.inner.borrow();
        let out: Vec<S> = inner.nodes[self.id].value.iter().map(|&a| -a).collect();
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.graph.add_flops(self.numel() as u64);
        self.graph
            .push(out, self.shape.clone(), Op::Neg(self.id), req)
    }

    pub fn mul_scalar(&self, s: S) -> Tensor<S> {
        let inner = self.graph.inner.borrow();
        let out: Vec<S> = inner.nodes[self.id].value.iter().map(|&a| a * s).collect();
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.graph.add_flops(self.numel() as u64);
        self.graph
            .push(out, self.shape.clone(), Op::MulScalar(self.id, s), req)
    }

    /// Matrix product over the trailing two dims. The rhs is either 2-D
    /// (shared across all leading batches) or has identical leading dims.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_graph(other);
        let (ls, rs) = (&self.shape, &other.shape);
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let lead_a = &ls[..ls.len() - 2];
        let lead_b = &rs[..rs.len() - 2];
        let b_is_2d = lead_b.is_empty();
        if k != k2 || (!b_is_2d && lead_a != lead_b) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let inner = self.graph.inner.borrow();
        let av = &inner.nodes[self.id].value;
        let bv = &inner.nodes[other.id].value;
        let mut out = vec![S::zero(); batch * m * n];
        if b_is_2d {
            gemm_into(
                batch * m,
                k,
                n,
                av,
                0,
                k as isize,
                1,
                bv,
                0,
                n as isize,
                1,
                &mut out,
                0,
            );
        } else {
            for bi in 0..batch {
                gemm_into(
                    m,
                    k,
                    n,
                    av,
                    bi * m * k,
                    k as isize,
                    1,
                    bv,
                    bi * k * n,
                    n as isize,
                    1,
                    &mut out,
                    bi * m * n,
                );
            }
        }
        let req = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
        drop(inner);
        self.graph
            .add_flops(2 * (batch * m * n * k) as u64);
        Ok(self.graph.push(
            out,
            out_shape,
            Op::Matmul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                b_is_2d,
            },
            req,
        ))
    }

    /// Softmax over the last dim. `-inf` is the additive mask sentinel and
    /// maps to exactly 0; a fully `-inf` row is a degenerate-row error.
    pub fn softmax_lastdim(&self) -> Result<Tensor<S>> {
        let width = *self.shape.last().ok_or_else(|| Error::BadShape {
            op: "softmax_lastdim",
            shape: self.shape.clone(),
            what: "needs at least one dim".into(),
        })?;
        let inner = self.graph.inner.borrow();
        let out = softmax_rows(&inner.nodes[self.id].value, width)?;
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        // Per element: max-subtract, exp, sum-accumulate, divide.
        self.graph.add_flops(4 * self.numel() as u64);
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            Op::Softmax {
                x: self.id,
                width,
            },
            req,
        ))
    }

    pub fn log_softmax_lastdim(&self) -> Result<Tensor<S>> {
        let width = *self.shape.last().ok_or_else(|| Error::BadShape {
            op: "log_softmax_lastdim",
            shape: self.shape.clone(),
            what: "needs at least one dim".into(),
        })?;
        let inner = self.graph.inner.borrow();
        let out = log_softmax_rows(&inner.nodes[self.id].value, width)?;
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        let rows = (self.numel() / width) as u64;
        self.graph.add_flops(4 * self.numel() as u64 + rows);
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            Op::LogSoftmax {
                x: self.id,
                width,
            },
            req,
        ))
    }

    /// Layer norm over the last dim only; statistics are per position, so
    /// pruning a position never disturbs any other.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        self.same_graph(gain);
        self.same_graph(bias);
        let width = *self.shape.last().ok_or_else(|| Error::BadShape {
            op: "layer_norm",
            shape: self.shape.clone(),
            what: "needs at least one dim".into(),
        })?;
        if gain.shape != [width] || bias.shape != [width] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let inner = self.graph.inner.borrow();
        let (out, stats) = layer_norm_rows(
            &inner.nodes[self.id].value,
            &inner.nodes[gain.id].value,
            &inner.nodes[bias.id].value,
            width,
            eps,
        );
        let req = inner.nodes[self.id].requires_grad
            || inner.nodes[gain.id].requires_grad
            || inner.nodes[bias.id].requires_grad;
        drop(inner);
        let positions = (self.numel() / width) as u64;
        // mean d+1, variance 3d+1, inv_std 3, normalize+affine 4d per position.
        self.graph.add_flops(8 * self.numel() as u64 + 5 * positions);
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                width,
                stats,
            },
            req,
        ))
    }

    /// Exact Gaussian-CDF GeLU.
    pub fn gelu(&self) -> Tensor<S> {
        let inner = self.graph.inner.borrow();
        let out: Vec<S> = inner.nodes[self.id]
            .value
            .iter()
            .map(|&v| gelu_value(v))
            .collect();
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        // scale, erf, add, halve, multiply per element.
        self.graph.add_flops(5 * self.numel() as u64);
        self.graph
            .push(out, self.shape.clone(), Op::Gelu(self.id), req)
    }

    /// Row subset of a 2-D tensor; `keep` must be strictly increasing and in
    /// range. An empty `keep` yields a `0 x d` tensor.
    pub fn gather_rows(&self, keep: &[usize]) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                what: "expects a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        for (i, &k) in keep.iter().enumerate() {
            if k >= rows {
                return Err(Error::BadIndex {
                    op: "gather_rows",
                    what: format!("index {k} out of range for {rows} rows"),
                });
            }
            if i > 0 && keep[i - 1] >= k {
                return Err(Error::BadIndex {
                    op: "gather_rows",
                    what: format!("indices must be strictly increasing, got {:?}", keep),
                });
            }
        }
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        let mut out = Vec::with_capacity(keep.len() * cols);
        for &k in keep {
            out.extend_from_slice(&v[k * cols..(k + 1) * cols]);
        }
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            out,
            vec![keep.len(), cols],
            Op::GatherRows {
                x: self.id,
                keep: keep.to_vec(),
                in_rows: rows,
            },
            req,
        ))
    }

    /// Numpy-style broadcast to a larger shape (right-aligned dims).
    pub fn broadcast_to(&self, to: &[usize]) -> Result<Tensor<S>> {
        let inner = self.graph.inner.borrow();
        let out = broadcast_copy(&inner.nodes[self.id].value, &self.shape, to)?;
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            out,
            to.to_vec(),
            Op::BroadcastTo {
                x: self.id,
                from: self.shape.clone(),
            },
            req,
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let inner = self.graph.inner.borrow();
        let mut sum = S::zero();
        for &v in &inner.nodes[self.id].value {
            sum += v;
        }
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.graph.add_flops(self.numel() as u64);
        self.graph.push(vec![sum], vec![1], Op::SumAll(self.id), req)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: self.shape.clone(),
                what: format!("cannot reshape to {:?}", shape),
            });
        }
        let inner = self.graph.inner.borrow();
        let out = inner.nodes[self.id].value.clone();
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self
            .graph
            .push(out, shape.to_vec(), Op::Reshape(self.id), req))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<S>> {
        if perm.len() != self.shape.len() {
            return Err(Error::BadShape {
                op: "permute",
                shape: self.shape.clone(),
                what: format!("perm {:?} rank mismatch", perm),
            });
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::BadIndex {
                    op: "permute",
                    what: format!("invalid permutation {:?}", perm),
                });
            }
            seen[p] = true;
        }
        let inner = self.graph.inner.borrow();
        let (out, new_shape) = permute_copy(&inner.nodes[self.id].value, &self.shape, perm);
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            out,
            new_shape,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            req,
        ))
    }

    /// Same value, gradient flow stops here.
    pub fn detach(&self) -> Tensor<S> {
        let inner = self.graph.inner.borrow();
        let out = inner.nodes[self.id].value.clone();
        drop(inner);
        self.graph
            .push(out, self.shape.clone(), Op::Detach(self.id), false)
    }

    /// Select one channel along the last dim: `[.., w] -> [..]`.
    pub fn select_lastdim(&self, index: usize) -> Result<Tensor<S>> {
        let width = *self.shape.last().ok_or_else(|| Error::BadShape {
            op: "select_lastdim",
            shape: self.shape.clone(),
            what: "needs at least one dim".into(),
        })?;
        if index >= width {
            return Err(Error::BadIndex {
                op: "select_lastdim",
                what: format!("channel {index} out of {width}"),
            });
        }
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        let out: Vec<S> = v.chunks(width).map(|c| c[index]).collect();
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        let out_shape = self.shape[..self.shape.len() - 1].to_vec();
        Ok(self.graph.push(
            out,
            out_shape,
            Op::SelectLastDim {
                x: self.id,
                index,
                width,
            },
            req,
        ))
    }

    /// Mean cross-entropy of 2-D logits `[rows, classes]` against integer
    /// targets; `-1` marks rows excluded from both numerator and denominator.
    pub fn cross_entropy(&self, targets: &[i64]) -> Result<Tensor<S>> {
        if self.shape.len() != 2 {
            return Err(Error::BadShape {
                op: "cross_entropy",
                shape: self.shape.clone(),
                what: "expects 2-D logits".into(),
            });
        }
        let (rows, width) = (self.shape[0], self.shape[1]);
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let counted = targets.iter().filter(|&&t| t >= 0).count();
        if counted == 0 {
            return Err(Error::EmptyInput(
                "cross_entropy: no counted rows".into(),
            ));
        }
        let inner = self.graph.inner.borrow();
        let lv = &inner.nodes[self.id].value;
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            if t as usize >= width {
                return Err(Error::BadIndex {
                    op: "cross_entropy",
                    what: format!("target {t} out of {width} classes"),
                });
            }
            let row = &lv[r * width..(r + 1) * width];
            let mut mx = S::neg_infinity();
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for &v in row {
                sum += (v - mx).exp();
            }
            total += sum.ln() - (row[t as usize] - mx);
        }
        let loss = total / S::from_f64(counted as f64);
        let req = inner.nodes[self.id].requires_grad;
        drop(inner);
        self.graph
            .add_flops((counted * (3 * width + 3)) as u64 + 1);
        Ok(self.graph.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                width,
                counted,
            },
            req,
        ))
    }

    /// `x @ w + b` with the bias broadcast over leading dims.
    pub fn linear(&self, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.matmul(w)?;
        let bb = b.broadcast_to(y.shape())?;
        y.add(&bb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let g = g64();
        let i = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = g.constant(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        assert_eq!(i.matmul(&b).unwrap().data(), vec![3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(vec![1.0, 2.0], &[1, 2]);
        let c = g.constant(vec![3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&c).unwrap().data(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let g = g64();
        let a = g.constant(vec![0.0; 6], &[2, 3]);
        let b = g.constant(vec![0.0; 4], &[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_hand_result() {
        // d sum(A@B) / dA at A=[[1,2]], B=[[3],[4]] is [[3,4]].
        let g = g64();
        let a = g.leaf(vec![1.0, 2.0], &[1, 2]);
        let b = g.constant(vec![3.0, 4.0], &[2, 1]);
        let loss = a.matmul(&b).unwrap().sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn batched_matmul_matches_loop() {
        let g = g64();
        let a = g.constant((0..12).map(|v| v as f64).collect(), &[2, 2, 3]);
        let b = g.constant((0..18).map(|v| 0.5 * v as f64).collect(), &[2, 3, 3]);
        let c = a.matmul(&b).unwrap();
        let (av, bv, cv) = (a.data(), b.data(), c.data());
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut want = 0.0;
                    for k in 0..3 {
                        want += av[bi * 6 + i * 3 + k] * bv[bi * 9 + k * 3 + j];
                    }
                    assert!((cv[bi * 6 + i * 3 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = g64();
        let w = g.leaf(vec![1.0, 2.0, 3.0], &[3]);
        let loss = w.sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_and_accumulation() {
        let g = g64();
        let w = g.leaf(vec![1.0, 2.0], &[2]);
        let loss = w.mul(&w).unwrap().sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
        // Second backward without zeroing accumulates.
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
        g.zero_grads();
        assert!(w.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = g64();
        let w = g.leaf(vec![1.0, 2.0], &[2]);
        let err = g.backward(&w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gather_rows_cases() {
        let g = g64();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        assert_eq!(x.gather_rows(&[0, 2]).unwrap().data(), vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(x.gather_rows(&[0, 1, 2]).unwrap().data(), x.data());
        let empty = x.gather_rows(&[]).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
        assert!(x.gather_rows(&[3]).is_err());
        assert!(x.gather_rows(&[1, 1]).is_err());
        assert!(x.gather_rows(&[2, 0]).is_err());
    }

    #[test]
    fn gather_then_scatter_is_row_mask() {
        let g = g64();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let kept = x.gather_rows(&[0, 2]).unwrap();
        let loss = kept.mul(&kept).unwrap().sum_all().mul_scalar(0.5);
        g.backward(&loss).unwrap();
        // Gradient is x on kept rows, zero on the dropped row.
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn embedding_lookup_and_vocab_error() {
        let g = g64();
        let table = g.leaf(vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0], &[3, 2]);
        let e = g.embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.data(), vec![20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let loss = e.sum_all();
        g.backward(&loss).unwrap();
        // Dup rows accumulate.
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            g.embedding(&table, &[3]).unwrap_err(),
            Error::VocabError { id: 3, vocab: 3 }
        ));
    }

    #[test]
    fn softmax_minus_inf_column_is_exact_zero() {
        let g = g64();
        let x = g.constant(vec![0.0, f64::NEG_INFINITY], &[1, 2]);
        assert_eq!(x.softmax_lastdim().unwrap().data(), vec![1.0, 0.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let g = g64();
        let w = g.leaf(vec![2.0], &[1]);
        let st = w.detach().add(&w).unwrap(); // value 4, grad only via direct path
        let loss = st.sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(loss.item(), 4.0);
        assert_eq!(w.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn select_lastdim_scatter_grad() {
        let g = g64();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let keep = x.select_lastdim(1).unwrap();
        assert_eq!(keep.data(), vec![2.0, 4.0]);
        let loss = keep.sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let g = g64();
        let x = g.leaf(vec![1.0, 2.0, 0.0, 0.0], &[2, 2]);
        let loss = x.cross_entropy(&[1, -1]).unwrap();
        let want = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp())).ln();
        assert!((loss.item() - want).abs() < 1e-12);
        g.backward(&loss).unwrap();
        let grad = x.grad().unwrap();
        // Ignored row has zero grad.
        assert_eq!(&grad[2..], &[0.0, 0.0]);
    }

    #[test]
    fn flop_counter_counts_forward_only() {
        let g = g64();
        let a = g.constant(vec![1.0; 6], &[2, 3]);
        let b = g.constant(vec![1.0; 12], &[3, 4]);
        g.reset_flops();
        let c = a.matmul(&b).unwrap();
        assert_eq!(g.flops(), 2 * 2 * 3 * 4);
        let s = c.sum_all();
        assert_eq!(g.flops(), 2 * 2 * 3 * 4 + 8);
        drop(s);
    }
}
