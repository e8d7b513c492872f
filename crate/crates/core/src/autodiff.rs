//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. [`Tensor`] is a
//! cheap `Copy` handle into that tape. Each operation records a local gradient
//! rule, and [`Tape::backward`] walks the records in reverse to populate the
//! gradient of a scalar loss with respect to every reachable tensor.
//!
//! ```
//! use ntil::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let loss = x.mul(x).unwrap().sum(None).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```
//!
//! Conventions at non-differentiable points: `abs` has subgradient 0 at 0, and
//! `max_elem`/`min_elem` route the gradient to the first operand on ties.
//!
//! Broadcasting is limited to a one-element tensor combined with any tensor.
//! Row-vector bias addition is a separate op ([`Tensor::add_row`]).

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("{op}: value {value} outside the domain of the operation")]
    Domain { op: &'static str, value: f64 },
    #[error("backward already ran on this tape; call zero_grad before running it again")]
    BackwardRepeated,
    #[error("tensors recorded on different tapes")]
    ForeignTape,
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

fn contract(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Contract {
        op,
        detail: detail.into(),
    }
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Max(usize, usize),
    Min(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Abs(usize),
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize, Option<usize>),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Reshape(usize),
    AddRow(usize, usize),
    GatherRows(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Recording of every operation in one forward pass.
///
/// Confined to one thread; independent tapes may run on separate threads.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f.debug_struct("Tensor")
            .field("tape_id", &self.tape.id)
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("value", &node.value)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(contract(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(contract(op, format!("expected a rank-2 tensor, got {shape:?}"))),
    }
}

/// `c = a · b` for row-major `a` (m×k) and `b` (k×n), with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are sized m*k, k*n and m*n by every caller; strides match
    // row-major storage of the (possibly transposed) operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

fn log_softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|j| (x[idx(j)] - max).exp()).sum::<f64>().ln();
            for j in 0..len {
                out[idx(j)] = x[idx(j)] - lse;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner::default()),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Number of recorded tensors.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_>> {
        if numel(shape) != values.len() {
            return Err(contract(
                "leaf",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// A differentiable leaf (model parameter or loss input).
    pub fn param(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(values, shape, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor { tape: self, id }
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in &mut inner.nodes {
            node.grad = None;
        }
        inner.backward_done = false;
    }

    /// Propagates d`loss`/d(tensor) to every tensor that requires a gradient
    /// and that `loss` depends on.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::ForeignTape);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(AutodiffError::BackwardRepeated);
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", inner.nodes[loss.id].shape),
            ));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        for (node, g) in inner.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        inner.backward_done = true;
        Ok(())
    }
}

/// Adds `contrib(grad_buffer)` into the gradient slot of `target`.
fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    contrib: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].requires_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    contrib(slot);
}

/// Accumulates an elementwise gradient `g[i] * local(i)` into `target`, summing
/// when `target` is a broadcast scalar.
fn accumulate_elementwise(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    let broadcast = nodes[target].value.len() == 1 && g.len() != 1;
    accumulate(nodes, grads, target, |slot| {
        if broadcast {
            slot[0] += g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum::<f64>();
        } else {
            for (i, (s, gi)) in slot.iter_mut().zip(g).enumerate() {
                *s += gi * local(i);
            }
        }
    });
}

/// Value of a possibly-broadcast operand at output index `i`.
#[inline]
fn bval(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_elementwise(nodes, grads, *a, g, |_| 1.0);
            accumulate_elementwise(nodes, grads, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            accumulate_elementwise(nodes, grads, *a, g, |_| 1.0);
            accumulate_elementwise(nodes, grads, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate_elementwise(nodes, grads, *a, g, |i| bval(vb, i));
            accumulate_elementwise(nodes, grads, *b, g, |i| bval(va, i));
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate_elementwise(nodes, grads, *a, g, |i| 1.0 / bval(vb, i));
            accumulate_elementwise(nodes, grads, *b, g, |i| {
                let d = bval(vb, i);
                -bval(va, i) / (d * d)
            });
        }
        Op::Max(a, b) | Op::Min(a, b) => {
            let is_max = matches!(node.op, Op::Max(..));
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let first = |i: usize| {
                let (x, y) = (bval(va, i), bval(vb, i));
                if is_max {
                    x >= y
                } else {
                    x <= y
                }
            };
            accumulate_elementwise(nodes, grads, *a, g, |i| if first(i) { 1.0 } else { 0.0 });
            accumulate_elementwise(nodes, grads, *b, g, |i| if first(i) { 0.0 } else { 1.0 });
        }
        Op::Neg(a) => accumulate_elementwise(nodes, grads, *a, g, |_| -1.0),
        Op::Scale(a, c) => accumulate_elementwise(nodes, grads, *a, g, |_| *c),
        Op::Offset(a) => accumulate_elementwise(nodes, grads, *a, g, |_| 1.0),
        Op::Abs(a) => {
            let va = &nodes[*a].value;
            accumulate_elementwise(nodes, grads, *a, g, |i| {
                let x = va[i];
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Log(a) => {
            let va = &nodes[*a].value;
            accumulate_elementwise(nodes, grads, *a, g, |i| 1.0 / va[i]);
        }
        Op::Exp(a) => {
            let y = &node.value;
            accumulate_elementwise(nodes, grads, *a, g, |i| y[i]);
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate_elementwise(nodes, grads, *a, g, |i| y[i] * (1.0 - y[i]));
        }
        Op::Tanh(a) => {
            let y = &node.value;
            accumulate_elementwise(nodes, grads, *a, g, |i| 1.0 - y[i] * y[i]);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            // dA = G · Bᵀ, dB = Aᵀ · G
            accumulate(nodes, grads, *a, |slot| gemm(m, n, k, g, false, vb, true, slot, true));
            accumulate(nodes, grads, *b, |slot| gemm(k, m, n, va, true, g, false, slot, true));
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            accumulate(nodes, grads, *a, |slot| {
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Sum(a, axis) => {
            let shape = &nodes[*a].shape;
            match axis {
                None => accumulate_elementwise(nodes, grads, *a, &vec![g[0]; nodes[*a].value.len()], |_| 1.0),
                Some(axis) => {
                    let (outer, len, inner) = (
                        shape[..*axis].iter().product::<usize>(),
                        shape[*axis],
                        shape[axis + 1..].iter().product::<usize>(),
                    );
                    accumulate(nodes, grads, *a, |slot| {
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    slot[(o * len + j) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
        }
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            let is_log = matches!(node.op, Op::LogSoftmax(..));
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let y = &node.value;
            accumulate(nodes, grads, *a, |slot| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        if is_log {
                            // dx = g - softmax * Σg
                            let gsum: f64 = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                slot[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gsum;
                            }
                        } else {
                            // dx = y ⊙ (g - Σ g⊙y)
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                slot[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate_elementwise(nodes, grads, *a, g, |_| 1.0),
        Op::AddRow(a, bias) => {
            accumulate_elementwise(nodes, grads, *a, g, |_| 1.0);
            let cols = nodes[*bias].value.len();
            accumulate(nodes, grads, *bias, |slot| {
                for row in g.chunks_exact(cols) {
                    for (s, gi) in slot.iter_mut().zip(row) {
                        *s += gi;
                    }
                }
            });
        }
        Op::GatherRows(a, rows) => {
            let cols = nodes[*a].shape[1];
            accumulate(nodes, grads, *a, |slot| {
                for (out_row, &src) in rows.iter().enumerate() {
                    let dst = &mut slot[src * cols..(src + 1) * cols];
                    for (d, gi) in dst.iter_mut().zip(&g[out_row * cols..(out_row + 1) * cols]) {
                        *d += gi;
                    }
                }
            });
        }
        Op::SelectCols(a, cols) => {
            let src_cols = nodes[*a].shape[1];
            let n = cols.len();
            accumulate(nodes, grads, *a, |slot| {
                for (r, grow) in g.chunks_exact(n).enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        slot[r * src_cols + c] += grow[j];
                    }
                }
            });
        }
        Op::Pick(a, cols) => {
            let src_cols = nodes[*a].shape[1];
            accumulate(nodes, grads, *a, |slot| {
                for (r, &c) in cols.iter().enumerate() {
                    slot[r * src_cols + c] += g[r];
                }
            });
        }
        Op::SliceCols(a, start) => {
            let src_cols = nodes[*a].shape[1];
            let n = node.shape[1];
            accumulate(nodes, grads, *a, |slot| {
                for (r, grow) in g.chunks_exact(n).enumerate() {
                    let base = r * src_cols + start;
                    for (s, gi) in slot[base..base + n].iter_mut().zip(grow) {
                        *s += gi;
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(nodes, grads, p, |slot| {
                    for (s, gi) in slot.iter_mut().zip(&g[offset..offset + len]) {
                        *s += gi;
                    }
                });
                offset += len;
            }
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.node().value.clone()
    }

    /// Borrowed view of the forward value.
    pub fn values(&self) -> Ref<'t, [f64]> {
        Ref::map(self.node(), |n| n.value.as_slice())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let node = self.node();
        assert_eq!(node.value.len(), 1, "item() on tensor of shape {:?}", node.shape);
        node.value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Gradient populated by the last `backward`, if this tensor was reached.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node().grad.clone()
    }

    fn same_tape(&self, other: &Tensor<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignTape)
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor<'t> {
        let (shape, value, rg) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), n.requires_grad)
        };
        self.tape.push(shape, value, rg, op)
    }

    fn binary(
        &self,
        other: Tensor<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor<'t>> {
        self.same_tape(&other)?;
        let (shape, value, rg) = {
            let a = self.node();
            let b = other.node();
            let (la, lb) = (a.value.len(), b.value.len());
            let shape = if a.shape == b.shape || lb == 1 {
                a.shape.clone()
            } else if la == 1 {
                b.shape.clone()
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            };
            let n = la.max(lb);
            let value = (0..n).map(|i| f(bval(&a.value, i), bval(&b.value, i))).collect();
            (shape, value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, op))
    }

    pub fn add(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        if let Some(&z) = other.values().iter().find(|v| **v == 0.0) {
            return Err(AutodiffError::Domain { op: "div", value: z });
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Elementwise maximum; the gradient goes to `self` on ties.
    pub fn max_elem(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "max_elem", Op::Max(self.id, other.id), |a, b| {
            if a >= b {
                a
            } else {
                b
            }
        })
    }

    /// Elementwise minimum; the gradient goes to `self` on ties.
    pub fn min_elem(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, "min_elem", Op::Min(self.id, other.id), |a, b| {
            if a <= b {
                a
            } else {
                b
            }
        })
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    /// Adds a constant to every element.
    pub fn offset(&self, c: f64) -> Tensor<'t> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn abs(&self) -> Tensor<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor<'t>> {
        if let Some(&bad) = self.values().iter().find(|v| !(**v > 0.0)) {
            return Err(AutodiffError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn exp(&self) -> Tensor<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Tensor<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&other)?;
        let (value, shape, rg) = {
            let a = self.node();
            let b = other.node();
            let (m, k) = as_matrix("matmul", &a.shape)?;
            let (k2, n) = as_matrix("matmul", &b.shape)?;
            if k != k2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &a.value, false, &b.value, false, &mut out, false);
            (out, vec![m, n], a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            let (r, c) = as_matrix("transpose", &a.shape)?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.value[i * c + j];
                }
            }
            (out, vec![c, r], a.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::Transpose(self.id)))
    }

    /// Sum over one axis (removing it), or over everything when `axis` is `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            match axis {
                None => (vec![a.value.iter().sum()], Vec::new(), a.requires_grad),
                Some(axis) => {
                    let (outer, len, inner) = axis_layout("sum", &a.shape, axis)?;
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += a.value[(o * len + j) * inner + i];
                            }
                        }
                    }
                    let mut shape = a.shape.clone();
                    shape.remove(axis);
                    (out, shape, a.requires_grad)
                }
            }
        };
        Ok(self.tape.push(shape, value, rg, Op::Sum(self.id, axis)))
    }

    pub fn mean(&self) -> Result<Tensor<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(contract("mean", "empty tensor"));
        }
        Ok(self.sum(None)?.scale(1.0 / n as f64))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            let (outer, len, inner) = axis_layout("softmax", &a.shape, axis)?;
            (softmax_forward(&a.value, outer, len, inner), a.shape.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            let (outer, len, inner) = axis_layout("log_softmax", &a.shape, axis)?;
            (log_softmax_forward(&a.value, outer, len, inner), a.shape.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::LogSoftmax(self.id, axis)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let a = self.node();
            if numel(shape) != a.value.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (a.value.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, rg, Op::Reshape(self.id)))
    }

    /// Adds a length-`cols` vector to every row of a rows×cols matrix.
    pub fn add_row(&self, bias: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&bias)?;
        let (value, shape, rg) = {
            let a = self.node();
            let b = bias.node();
            let (_, cols) = as_matrix("add_row", &a.shape)?;
            if b.value.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_row",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let mut out = a.value.clone();
            for row in out.chunks_exact_mut(cols) {
                for (x, bi) in row.iter_mut().zip(&b.value) {
                    *x += bi;
                }
            }
            (out, a.shape.clone(), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::AddRow(self.id, bias.id)))
    }

    /// Rows `rows[i]` of a matrix, in order (repeats allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            let (r, c) = as_matrix("gather_rows", &a.shape)?;
            let mut out = Vec::with_capacity(rows.len() * c);
            for &row in rows {
                if row >= r {
                    return Err(contract("gather_rows", format!("row {row} out of range {r}")));
                }
                out.extend_from_slice(&a.value[row * c..(row + 1) * c]);
            }
            (out, vec![rows.len(), c], a.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::GatherRows(self.id, rows.to_vec())))
    }

    /// Contiguous rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(&rows)
    }

    /// Columns `cols[j]` of a matrix, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            let (r, c) = as_matrix("select_cols", &a.shape)?;
            if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
                return Err(contract("select_cols", format!("column {bad} out of range {c}")));
            }
            let mut out = Vec::with_capacity(r * cols.len());
            for row in a.value.chunks_exact(c) {
                out.extend(cols.iter().map(|&j| row[j]));
            }
            (out, vec![r, cols.len()], a.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::SelectCols(self.id, cols.to_vec())))
    }

    /// Contiguous columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let (value, shape, rg) = {
            let a = self.node();
            let (_, c) = as_matrix("slice_cols", &a.shape)?;
            if start > end || end > c {
                return Err(contract("slice_cols", format!("range {start}..{end} out of {c}")));
            }
            let mut out = Vec::new();
            for row in a.value.chunks_exact(c) {
                out.extend_from_slice(&row[start..end]);
            }
            (out, vec![a.shape[0], end - start], a.requires_grad)
        };
        Ok(self.tape.push(shape, value, rg, Op::SliceCols(self.id, start)))
    }

    /// One element per row: `out[r] = self[r, cols[r]]`.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let a = self.node();
            let (r, c) = as_matrix("pick", &a.shape)?;
            if cols.len() != r {
                return Err(contract("pick", format!("{} indices for {r} rows", cols.len())));
            }
            let mut out = Vec::with_capacity(r);
            for (row, &j) in cols.iter().enumerate() {
                if j >= c {
                    return Err(contract("pick", format!("column {j} out of range {c}")));
                }
                out.push(a.value[row * c + j]);
            }
            (out, a.requires_grad)
        };
        let n = value.len();
        Ok(self.tape.push(vec![n], value, rg, Op::Pick(self.id, cols.to_vec())))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        let first = parts.first().ok_or_else(|| contract("concat_rows", "no inputs"))?;
        let tape = first.tape;
        let (value, shape, rg) = {
            let (_, cols) = as_matrix("concat_rows", &first.node().shape)?;
            let mut out = Vec::new();
            let mut rows = 0;
            let mut rg = false;
            for p in parts {
                first.same_tape(p)?;
                let n = p.node();
                let (r, c) = as_matrix("concat_rows", &n.shape)?;
                if c != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![rows, cols],
                        rhs: n.shape.clone(),
                    });
                }
                out.extend_from_slice(&n.value);
                rows += r;
                rg |= n.requires_grad;
            }
            (out, vec![rows, cols], rg)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(shape, value, rg, Op::ConcatRows(ids)))
    }
}
