//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels;
use super::{RngState, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive bias applied to masked softmax logits before stabilization.
const MASK_FILL: f64 = -1e9;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    RowScale(usize, usize),
    RowMask(usize, Rc<Vec<bool>>),
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        inputs: Vec<usize>,
        widths: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        src_width: usize,
    },
    Transpose(usize),
    Reshape(usize),
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Sum(usize),
    FrobeniusSq(usize),
    Cosine {
        a: usize,
        b: usize,
        // Per row: 1/denominator, squared norms, and whether eps clamped the denominator.
        inv: Vec<T>,
        na2: Vec<T>,
        nb2: Vec<T>,
        clamped: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<Option<usize>>,
        count: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: usize,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded computation graph.
///
/// `backward` may be called once; a second call returns
/// [`Error::GraphConsumed`] instead of accumulating into existing gradients.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    consumed: Cell<bool>,
    relu_margin: Cell<f64>,
    relu_pattern: RefCell<Vec<bool>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            relu_margin: Cell::new(f64::INFINITY),
            relu_pattern: RefCell::new(Vec::new()),
        }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest |input| seen by any ReLU so far. Finite-difference probes
    /// with a step larger than this may straddle a kink.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin.get()
    }

    /// Sign (`input > 0`) of every ReLU input evaluated so far, in order.
    /// Two evaluations of the same computation share a pattern exactly when
    /// no ReLU changed side.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relu_pattern.borrow().clone()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the last backward pass with respect to `var`.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.value_of(var.id).shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let loss_value = self.value_of(loss.id);
        if loss_value.numel() != 1 {
            return Err(Error::shape("backward", loss_value.shape(), &[]));
        }
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, delta: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let da = kernels::matmul_nt(g, bv.data(), m, n, k);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = kernels::matmul_tn(av.data(), g, m, k, n);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da = g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
            let db = g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *b, db);
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.to_vec());
            let d = val(*b).numel();
            let mut db = vec![T::zero(); d];
            for row in g.chunks(d) {
                db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
            }
            accumulate(nodes, grads, *b, db);
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, g.iter().map(|&v| v * *c).collect());
        }
        Op::ScaleBy(x, s) => {
            let sv = val(*s).item();
            accumulate(nodes, grads, *x, g.iter().map(|&v| v * sv).collect());
            let xv = val(*x);
            let ds: T = g.iter().zip(xv.data()).map(|(&g, &x)| g * x).sum();
            accumulate(nodes, grads, *s, vec![ds]);
        }
        Op::RowScale(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let d = xv.last_dim();
            let mut dx = vec![T::zero(); g.len()];
            let mut ds = vec![T::zero(); sv.numel()];
            for (r, (grow, xrow)) in g.chunks(d).zip(xv.data().chunks(d)).enumerate() {
                let s = sv.data()[r];
                for c in 0..d {
                    dx[r * d + c] = grow[c] * s;
                    ds[r] += grow[c] * xrow[c];
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *s, ds);
        }
        Op::RowMask(x, keep) => {
            let d = out.last_dim();
            let dx = g
                .iter()
                .enumerate()
                .map(|(i, &v)| if keep[i / d] { v } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Relu(x) => {
            let xv = val(*x);
            let dx = g
                .iter()
                .zip(xv.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Softmax(x) => {
            let d = out.last_dim();
            let mut dx = vec![T::zero(); g.len()];
            for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                for c in 0..d {
                    drow[c] = yrow[c] * (grow[c] - dot);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = out.last_dim();
            let gv = val(*gain);
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            let mut dx = vec![T::zero(); g.len()];
            let dn = T::of(d as f64);
            for r in 0..g.len() / d {
                let grow = &g[r * d..(r + 1) * d];
                let hrow = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for c in 0..d {
                    dgain[c] += grow[c] * hrow[c];
                    dbias[c] += grow[c];
                    let dh = grow[c] * gv.data()[c];
                    sum_dh += dh;
                    sum_dh_h += dh * hrow[c];
                }
                let scale = inv_std[r] / dn;
                for c in 0..d {
                    let dh = grow[c] * gv.data()[c];
                    dx[r * d + c] = scale * (dn * dh - sum_dh - hrow[c] * sum_dh_h);
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gain, dgain);
            accumulate(nodes, grads, *bias, dbias);
        }
        Op::Concat { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&input, &w) in inputs.iter().zip(widths) {
                let mut dx = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                accumulate(nodes, grads, input, dx);
                offset += w;
            }
        }
        Op::SliceCols { x, start, src_width } => {
            let w = out.last_dim();
            let rows = g.len() / w.max(1);
            let mut dx = vec![T::zero(); rows * src_width];
            for r in 0..rows {
                dx[r * src_width + start..r * src_width + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Transpose(x) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            accumulate(nodes, grads, *x, kernels::transpose(g, m, n));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Dropout { x, mask } => {
            accumulate(nodes, grads, *x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
        }
        Op::Sum(x) => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0]; n]);
        }
        Op::FrobeniusSq(x) => {
            let two = T::of(2.0);
            let dx = val(*x).data().iter().map(|&v| two * v * g[0]).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Cosine {
            a,
            b,
            inv,
            na2,
            nb2,
            clamped,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let d = av.last_dim();
            let mut da = vec![T::zero(); av.numel()];
            let mut db = vec![T::zero(); bv.numel()];
            for r in 0..inv.len() {
                let cos = out.data()[r];
                let arow = &av.data()[r * d..(r + 1) * d];
                let brow = &bv.data()[r * d..(r + 1) * d];
                for c in 0..d {
                    if clamped[r] {
                        da[r * d + c] = g[r] * brow[c] * inv[r];
                        db[r * d + c] = g[r] * arow[c] * inv[r];
                    } else {
                        da[r * d + c] = g[r] * (brow[c] * inv[r] - cos * arow[c] / na2[r]);
                        db[r * d + c] = g[r] * (arow[c] * inv[r] - cos * brow[c] / nb2[r]);
                    }
                }
            }
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *b, db);
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            count,
        } => {
            let c = val(*logits).last_dim();
            let scale = g[0] / T::of(*count as f64);
            let mut dx = vec![T::zero(); probs.len()];
            for (r, label) in labels.iter().enumerate() {
                if let Some(label) = *label {
                    for k in 0..c {
                        let onehot = if k == label { T::one() } else { T::zero() };
                        dx[r * c + k] = (probs[r * c + k] - onehot) * scale;
                    }
                }
            }
            accumulate(nodes, grads, *logits, dx);
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            let dx = g
                .iter()
                .zip(xv.data())
                .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let d = xv.last_dim();
            let mut dx = vec![T::zero(); xv.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..d {
                    dx[src * d + c] += g[r * d + c];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ScatterRows { x, idx } => {
            let d = out.last_dim();
            let mut dx = Vec::with_capacity(idx.len() * d);
            for &dst in idx {
                dx.extend_from_slice(&g[dst * d..(dst + 1) * d]);
            }
            accumulate(nodes, grads, *x, dx);
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.grad(*self)
    }

    fn derive(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'g, T> {
        let rg = inputs.iter().any(|&i| self.graph.needs(i));
        self.graph.push(value, op, rg)
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs combined"
        );
    }

    pub fn matmul(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.derive(v, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    fn zip_same(&self, rhs: Var<'g, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_same(rhs, "add", |a, b| a + b)?;
        Ok(self.derive(v, Op::Add(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn sub(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_same(rhs, "sub", |a, b| a - b)?;
        Ok(self.derive(v, Op::Sub(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn mul(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = self.zip_same(rhs, "mul", |a, b| a * b)?;
        Ok(self.derive(v, Op::Mul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Adds a `[d]` vector to every last-axis row.
    pub fn add_bias(&self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&bias);
        let (x, b) = (self.value(), bias.value());
        if b.rank() != 1 || x.last_dim() != b.numel() {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let d = b.numel();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % d])
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derive(v, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// `x · W + b` with `W: [in×out]`, `b: [out]`.
    pub fn linear(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn scale(&self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let x = self.value();
        let data = x.data().iter().map(|&v| v * c).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.derive(v, Op::Scale(self.id, c), &[self.id])
    }

    /// Multiply every element by a one-element tensor.
    pub fn scale_by(&self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&s);
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", self.value().shape(), sv.shape()));
        }
        let x = self.value();
        let c = sv.item();
        let v = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect())?;
        Ok(self.derive(v, Op::ScaleBy(self.id, s.id), &[self.id, s.id]))
    }

    /// Multiply row `r` of `[N×d]` by `s[r]`.
    pub fn row_scale(&self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&s);
        let (x, sv) = (self.value(), s.value());
        if sv.numel() != x.outer() {
            return Err(Error::shape("row_scale", x.shape(), sv.shape()));
        }
        let d = x.last_dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[i / d])
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derive(v, Op::RowScale(self.id, s.id), &[self.id, s.id]))
    }

    /// Zero every last-axis row whose `keep` flag is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Var<'g, T>> {
        let x = self.value();
        if keep.len() != x.outer() {
            return Err(Error::shape("mask_rows", x.shape(), &[keep.len()]));
        }
        let d = x.last_dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[i / d] { v } else { T::zero() })
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derive(v, Op::RowMask(self.id, Rc::new(keep.to_vec())), &[self.id]))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let x = self.value();
        let mut margin = self.graph.relu_margin.get();
        for &v in x.data() {
            margin = margin.min(v.abs().f64());
        }
        self.graph.relu_margin.set(margin);
        self.graph
            .relu_pattern
            .borrow_mut()
            .extend(x.data().iter().map(|&v| v > T::zero()));
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.derive(v, Op::Relu(self.id), &[self.id])
    }

    /// Softmax over the last axis.
    ///
    /// Masked entries (`mask[i] == false`) get an additive large negative
    /// before max-subtraction and are then set to exactly zero. A row with
    /// no unmasked entry is an error.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Var<'g, T>> {
        let x = self.value();
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::shape("softmax_rows", x.shape(), &[m.len()]));
            }
        }
        let d = x.last_dim();
        let fill = T::of(MASK_FILL);
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.outer() {
            let keep = |c: usize| mask.is_none_or(|m| m[r * d + c]);
            if !(0..d).any(keep) {
                return Err(Error::Masking { row: r });
            }
            let row = &x.data()[r * d..(r + 1) * d];
            let shifted: Vec<T> = (0..d)
                .map(|c| if keep(c) { row[c] } else { row[c] + fill })
                .collect();
            let max = shifted.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..d {
                let e = (shifted[c] - max).exp();
                out[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                out[r * d + c] = if keep(c) { out[r * d + c] / sum } else { T::zero() };
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.derive(v, Op::Softmax(self.id), &[self.id]))
    }

    /// Normalize each last-axis row to zero mean / unit (biased) variance,
    /// then apply `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = x.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let rows = x.outer();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.derive(v, op, &[self.id, gain.id, bias.id]))
    }

    /// Concatenate 2-D tensors along the feature axis.
    pub fn concat_cols(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let rows = values[0].outer();
        for v in &values {
            if v.rank() != 2 || v.outer() != rows {
                return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat {
            inputs: ids.clone(),
            widths,
        };
        Ok(first.derive(v, op, &ids))
    }

    /// Columns `start..start+width` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let src = x.last_dim();
        if x.rank() != 2 || start + width > src {
            return Err(Error::shape("slice_cols", x.shape(), &[start, width]));
        }
        let rows = x.outer();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let v = Tensor::new(vec![rows, width], data)?;
        let op = Op::SliceCols {
            x: self.id,
            start,
            src_width: src,
        };
        Ok(self.derive(v, op, &[self.id]))
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape("transpose", x.shape(), &[2]));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let v = Tensor::new(vec![n, m], kernels::transpose(x.data(), m, n))?;
        Ok(self.derive(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.derive(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut RngState) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derive(v, Op::Dropout { x: self.id, mask }, &[self.id]))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s = self.value().data().iter().copied().sum();
        self.derive(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> Var<'g, T> {
        let s = self.value().data().iter().map(|&v| v * v).sum();
        self.derive(Tensor::scalar(s), Op::FrobeniusSq(self.id), &[self.id])
    }

    /// Row-wise cosine similarity of two `[N×d]` tensors, giving `[N]`.
    ///
    /// With `eps = None` a zero-norm row is an error naming the row. With
    /// `Some(eps)` the denominator is `max(|a||b|, eps)`.
    pub fn cosine_rows(&self, other: Var<'g, T>, eps: Option<f64>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
        }
        let rows = a.outer();
        let mut out = Vec::with_capacity(rows);
        let (mut inv, mut na2, mut nb2, mut clamped) = (vec![], vec![], vec![], vec![]);
        for r in 0..rows {
            let (ar, br) = (a.row(r), b.row(r));
            let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            let sa: T = ar.iter().map(|&x| x * x).sum();
            let sb: T = br.iter().map(|&x| x * x).sum();
            let denom = sa.sqrt() * sb.sqrt();
            let (den, clamp) = match eps {
                None if denom == T::zero() => {
                    return Err(Error::Numeric(format!("zero-norm vector in cosine similarity at row {r}")))
                }
                None => (denom, false),
                Some(e) if denom < T::of(e) => (T::of(e), true),
                Some(_) => (denom, false),
            };
            out.push(dot / den);
            inv.push(den.recip());
            na2.push(sa);
            nb2.push(sb);
            clamped.push(clamp);
        }
        let v = Tensor::new(vec![rows], out)?;
        let op = Op::Cosine {
            a: self.id,
            b: other.id,
            inv,
            na2,
            nb2,
            clamped,
        };
        Ok(self.derive(v, op, &[self.id, other.id]))
    }

    /// Mean of `-log softmax(logits)[label]` over rows with a label.
    pub fn cross_entropy_mean(&self, labels: &[Option<usize>]) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = x.last_dim();
        if labels.len() != x.outer() {
            return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
        }
        let count = labels.iter().flatten().count();
        if count == 0 {
            return Err(Error::Validation("cross entropy over zero labeled rows".into()));
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut total = T::zero();
        for (r, label) in labels.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
            if let Some(l) = *label {
                if l >= c {
                    return Err(Error::Index { index: l, bound: c });
                }
                total += lse - row[l];
            }
        }
        let v = Tensor::scalar(total / T::of(count as f64));
        let op = Op::CrossEntropy {
            logits: self.id,
            probs,
            labels: labels.to_vec(),
            count,
        };
        Ok(self.derive(v, op, &[self.id]))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let x = self.value();
        let data = x.data().iter().map(|&v| v.max(lo).min(hi)).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.derive(v, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    /// Select last-axis rows by index into a `[idx.len()×d]` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.outer()) {
            return Err(Error::Index {
                index: bad,
                bound: x.outer(),
            });
        }
        let v = x.gather_rows(idx);
        let op = Op::GatherRows {
            x: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.derive(v, op, &[self.id]))
    }

    /// Place row `i` at `idx[i]` in a zero `[total×d]` tensor.
    pub fn scatter_rows(&self, idx: &[usize], total: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if idx.len() != x.outer() {
            return Err(Error::shape("scatter_rows", x.shape(), &[idx.len()]));
        }
        let d = x.last_dim();
        let mut data = vec![T::zero(); total * d];
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= total {
                return Err(Error::Index { index: dst, bound: total });
            }
            data[dst * d..(dst + 1) * d].copy_from_slice(x.row(r));
        }
        let v = Tensor::new(vec![total, d], data)?;
        let op = Op::ScatterRows {
            x: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.derive(v, op, &[self.id]))
    }
}
