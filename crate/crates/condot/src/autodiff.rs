//! Reverse-mode differentiation over matrix-valued expressions, with one
//! level of nesting: losses may contain input-gradients of network outputs,
//! and parameter gradients of such losses are still exact.
//!
//! The engine is a classic append-only tape. Every operation evaluates
//! eagerly and records an [`Op`] node; operands always sit at lower indices,
//! so a single reverse sweep in index order is a valid topological traversal.
//! The trick that buys second derivatives is that the backward sweep does not
//! write numbers into buffers, it *emits new tape nodes*. Differentiating the
//! emitted subgraph a second time is then just another reverse sweep.
//!
//! Nesting is deliberately capped at one level, which is all the dual and
//! semi-dual losses need: an inner [`Tape::grad`] refuses to run on a
//! subgraph that already contains nodes produced by a previous inner sweep.
//! The outer parameter sweep ([`Tape::gradients`]) has no such restriction
//! because nothing differentiates its output.
//!
//! Piecewise-linear primitives follow the usual almost-everywhere
//! convention: the ReLU subgradient at 0 is 0, and the masks emitted for
//! their backward rules are detached, encoding a zero second derivative.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor_core::DenseMatrix;

/// Errors from gradient construction.
#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("input-gradient nesting deeper than one level is not supported")]
    NestingTooDeep,
    #[error("unsupported primitive in differentiable expression: {0}")]
    UnsupportedPrimitive(String),
}

pub type AutodiffResult<T> = Result<T, AutodiffError>;

#[derive(Clone, Debug)]
enum Op {
    /// Differentiable input (parameter tensor or probe point).
    Leaf,
    /// Data that gradients do not flow into.
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    /// Elementwise `src * mul + add`.
    AffineElem { src: usize, mul: f64, add: f64 },
    /// Row `i` of `src` scaled by entry `i` of the column vector `col`.
    MulCol { src: usize, col: usize },
    /// n x m -> n x 1, summing within each row.
    RowSums(usize),
    /// n x m -> 1 x m, summing down each column.
    ColSums(usize),
    /// n x m -> 1 x 1.
    SumAll(usize),
    /// 1 x 1 -> rows x cols.
    BroadcastFull { src: usize, rows: usize, cols: usize },
    /// 1 x m -> rows x m, repeating the row.
    BroadcastRows { src: usize, rows: usize },
    /// n x 1 -> n x cols, repeating the column.
    BroadcastCols { src: usize, cols: usize },
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Recip(usize),
    Sqrt(usize),
    Relu(usize),
    LeakyRelu { src: usize, alpha: f64 },
    /// Detached indicator `src > 0` (0 at 0).
    StepMask(usize),
    /// Detached `1` where `src > 0`, `alpha` elsewhere.
    LeakyMask { src: usize, alpha: f64 },
    /// Detached n x 1 vector of row maxima (for shift-stable softmax).
    RowMaxDetached(usize),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    /// 0 for user-built nodes, >=1 for nodes emitted by backward sweeps.
    level: u8,
}

/// Numerically stable softplus: `max(z, 0) + log1p(exp(-|z|))`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Expression tape. Create one per loss evaluation, build the expression
/// through [`Var`] methods, then sweep with [`Tape::grad`] (inner,
/// differentiable) or [`Tape::gradients`] (outer, terminal).
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    emit_level: Cell<u8>,
}

/// Handle to one tape node. Copyable; all arithmetic goes through methods so
/// the tape stays append-only.
#[derive(Copy, Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// A [`Var`] holding a 1 x 1 value, by convention the result of a reduction.
pub type DiffScalar<'t> = Var<'t>;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            emit_level: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn shape(&self, id: usize) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        nodes[id].value.shape()
    }

    fn push(&self, op: Op) -> usize {
        let value = self.eval(&op);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            level: self.emit_level.get(),
        });
        nodes.len() - 1
    }

    fn eval(&self, op: &Op) -> DenseMatrix {
        let nodes = self.nodes.borrow();
        let v = |id: usize| &nodes[id].value;
        match *op {
            Op::Leaf | Op::Constant => unreachable!("leaf values are supplied at creation"),
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::Transpose(a) => v(a).transpose(),
            Op::Add(a, b) => v(a).add(v(b)),
            Op::Sub(a, b) => v(a).sub(v(b)),
            Op::Hadamard(a, b) => {
                let (x, y) = (v(a), v(b));
                assert_eq!(x.shape(), y.shape(), "hadamard shape mismatch");
                let data = x
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .map(|(p, q)| p * q)
                    .collect();
                DenseMatrix::from_vec(x.rows(), x.cols(), data).unwrap()
            }
            Op::Scale(a, k) => v(a).scale(k),
            Op::AffineElem { src, mul, add } => v(src).map(|z| z * mul + add),
            Op::MulCol { src, col } => {
                let (x, c) = (v(src), v(col));
                assert_eq!(c.cols(), 1);
                assert_eq!(c.rows(), x.rows(), "mul_col length mismatch");
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let s = c.get(r, 0);
                    for q in out.row_mut(r) {
                        *q *= s;
                    }
                }
                out
            }
            Op::RowSums(a) => {
                let x = v(a);
                let mut out = DenseMatrix::zeros(x.rows(), 1);
                for r in 0..x.rows() {
                    out.set(r, 0, x.row(r).iter().sum());
                }
                out
            }
            Op::ColSums(a) => {
                let x = v(a);
                let mut out = DenseMatrix::zeros(1, x.cols());
                for r in 0..x.rows() {
                    for (c, q) in x.row(r).iter().enumerate() {
                        out.set(0, c, out.get(0, c) + q);
                    }
                }
                out
            }
            Op::SumAll(a) => {
                let s: f64 = v(a).as_slice().iter().sum();
                DenseMatrix::from_vec(1, 1, vec![s]).unwrap()
            }
            Op::BroadcastFull { src, rows, cols } => {
                let x = v(src);
                assert_eq!(x.shape(), (1, 1));
                DenseMatrix::filled(rows, cols, x.get(0, 0))
            }
            Op::BroadcastRows { src, rows } => {
                let x = v(src);
                assert_eq!(x.rows(), 1, "broadcast_rows needs a row vector");
                let mut out = DenseMatrix::zeros(rows, x.cols());
                for r in 0..rows {
                    out.row_mut(r).copy_from_slice(x.row(0));
                }
                out
            }
            Op::BroadcastCols { src, cols } => {
                let x = v(src);
                assert_eq!(x.cols(), 1, "broadcast_cols needs a column vector");
                let mut out = DenseMatrix::zeros(x.rows(), cols);
                for r in 0..x.rows() {
                    let s = x.get(r, 0);
                    out.row_mut(r).fill(s);
                }
                out
            }
            Op::Softplus(a) => v(a).map(softplus),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Recip(a) => v(a).map(f64::recip),
            Op::Sqrt(a) => v(a).map(f64::sqrt),
            Op::Relu(a) => v(a).map(|z| if z > 0.0 { z } else { 0.0 }),
            Op::LeakyRelu { src, alpha } => {
                v(src).map(|z| if z > 0.0 { z } else { alpha * z })
            }
            Op::StepMask(a) => v(a).map(|z| if z > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyMask { src, alpha } => {
                v(src).map(|z| if z > 0.0 { 1.0 } else { alpha })
            }
            Op::RowMaxDetached(a) => {
                let x = v(a);
                let mut out = DenseMatrix::zeros(x.rows(), 1);
                for r in 0..x.rows() {
                    let m = x.row(r).iter().fold(f64::NEG_INFINITY, |acc, &q| acc.max(q));
                    out.set(r, 0, m);
                }
                out
            }
        }
    }

    fn push_valued(&self, value: DenseMatrix, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            level: self.emit_level.get(),
        });
        nodes.len() - 1
    }

    /// Record a differentiable input.
    pub fn leaf(&self, value: DenseMatrix) -> Var<'_> {
        let id = self.push_valued(value, Op::Leaf);
        Var { tape: self, id }
    }

    /// Record data that gradients must not flow into.
    pub fn constant(&self, value: DenseMatrix) -> Var<'_> {
        let id = self.push_valued(value, Op::Constant);
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(DenseMatrix::from_vec(1, 1, vec![v]).unwrap())
    }

    /// Gradient of `sum(output)` with respect to each listed input, as new
    /// differentiable nodes on the same tape. Because every network in this
    /// crate maps batch rows independently, the sum trick yields the per-row
    /// input gradients stacked into the input's shape.
    ///
    /// Fails with [`AutodiffError::NestingTooDeep`] if the subgraph under
    /// `output` already contains nodes emitted by a previous `grad` call.
    pub fn grad<'t>(&'t self, output: Var<'t>, inputs: &[Var<'t>]) -> AutodiffResult<Vec<Var<'t>>> {
        debug_assert!(std::ptr::eq(output.tape, self));
        let seed = if self.shape(output.id) == (1, 1) {
            output.id
        } else {
            self.push(Op::SumAll(output.id))
        };
        // Refuse to differentiate a subgraph that already contains emitted
        // gradient nodes: that would be a second nesting level.
        {
            let nodes = self.nodes.borrow();
            let mut reach = vec![false; seed + 1];
            reach[seed] = true;
            for i in (0..=seed).rev() {
                if !reach[i] {
                    continue;
                }
                if nodes[i].level >= 1 {
                    return Err(AutodiffError::NestingTooDeep);
                }
                for dep in op_deps(&nodes[i].op) {
                    reach[dep] = true;
                }
            }
        }
        let grads = self.backward(seed, 1);
        Ok(inputs
            .iter()
            .map(|input| {
                debug_assert!(std::ptr::eq(input.tape, self));
                match grads.get(input.id).copied().flatten() {
                    Some(id) => Var { tape: self, id },
                    None => {
                        let (r, c) = self.shape(input.id);
                        self.constant(DenseMatrix::zeros(r, c))
                    }
                }
            })
            .collect())
    }

    /// Terminal parameter sweep: gradient values of the scalar `loss` with
    /// respect to each listed node. The result is plain matrices; nothing on
    /// the tape differentiates them again.
    pub fn gradients<'t>(&'t self, loss: Var<'t>, params: &[Var<'t>]) -> Vec<DenseMatrix> {
        debug_assert!(std::ptr::eq(loss.tape, self));
        assert_eq!(
            self.shape(loss.id),
            (1, 1),
            "outer sweep expects a scalar loss"
        );
        let grads = self.backward(loss.id, 2);
        params
            .iter()
            .map(|p| match grads.get(p.id).copied().flatten() {
                Some(id) => self.nodes.borrow()[id].value.clone(),
                None => {
                    let (r, c) = self.shape(p.id);
                    DenseMatrix::zeros(r, c)
                }
            })
            .collect()
    }

    /// Reverse sweep from `seed`, emitting gradient nodes at `pass_level`.
    /// Returns, for every node index <= seed, the id of its gradient node if
    /// any gradient reached it.
    fn backward(&self, seed: usize, pass_level: u8) -> Vec<Option<usize>> {
        let saved = self.emit_level.get();
        self.emit_level.set(pass_level);
        let mut grads: Vec<Option<usize>> = vec![None; seed + 1];
        let (sr, sc) = self.shape(seed);
        let seed_grad = self.push_valued(DenseMatrix::filled(sr, sc, 1.0), Op::Constant);
        grads[seed] = Some(seed_grad);
        for i in (0..=seed).rev() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes.borrow()[i].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let bt = self.push(Op::Transpose(b));
                    let ga = self.push(Op::MatMul(g, bt));
                    self.accumulate(&mut grads, a, ga);
                    let at = self.push(Op::Transpose(a));
                    let gb = self.push(Op::MatMul(at, g));
                    self.accumulate(&mut grads, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.push(Op::Transpose(g));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    self.accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    let neg = self.push(Op::Scale(g, -1.0));
                    self.accumulate(&mut grads, b, neg);
                }
                Op::Hadamard(a, b) => {
                    let ga = self.push(Op::Hadamard(g, b));
                    self.accumulate(&mut grads, a, ga);
                    let gb = self.push(Op::Hadamard(g, a));
                    self.accumulate(&mut grads, b, gb);
                }
                Op::Scale(a, k) => {
                    let ga = self.push(Op::Scale(g, k));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::AffineElem { src, mul, .. } => {
                    let ga = self.push(Op::Scale(g, mul));
                    self.accumulate(&mut grads, src, ga);
                }
                Op::MulCol { src, col } => {
                    let gs = self.push(Op::MulCol { src: g, col });
                    self.accumulate(&mut grads, src, gs);
                    let prod = self.push(Op::Hadamard(g, src));
                    let gc = self.push(Op::RowSums(prod));
                    self.accumulate(&mut grads, col, gc);
                }
                Op::RowSums(a) => {
                    let cols = self.shape(a).1;
                    let ga = self.push(Op::BroadcastCols { src: g, cols });
                    self.accumulate(&mut grads, a, ga);
                }
                Op::ColSums(a) => {
                    let rows = self.shape(a).0;
                    let ga = self.push(Op::BroadcastRows { src: g, rows });
                    self.accumulate(&mut grads, a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(a);
                    let ga = self.push(Op::BroadcastFull { src: g, rows, cols });
                    self.accumulate(&mut grads, a, ga);
                }
                Op::BroadcastFull { src, .. } => {
                    let gs = self.push(Op::SumAll(g));
                    self.accumulate(&mut grads, src, gs);
                }
                Op::BroadcastRows { src, .. } => {
                    let gs = self.push(Op::ColSums(g));
                    self.accumulate(&mut grads, src, gs);
                }
                Op::BroadcastCols { src, .. } => {
                    let gs = self.push(Op::RowSums(g));
                    self.accumulate(&mut grads, src, gs);
                }
                Op::Softplus(a) => {
                    let s = self.push(Op::Sigmoid(a));
                    let ga = self.push(Op::Hadamard(g, s));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    // s' = s (1 - s), reusing the forward node i as s.
                    let one_minus = self.push(Op::AffineElem {
                        src: i,
                        mul: -1.0,
                        add: 1.0,
                    });
                    let sp = self.push(Op::Hadamard(i, one_minus));
                    let ga = self.push(Op::Hadamard(g, sp));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.push(Op::Hadamard(g, i));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.push(Op::Hadamard(i, i));
                    let neg = self.push(Op::Scale(sq, -1.0));
                    let ga = self.push(Op::Hadamard(g, neg));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Sqrt(a) => {
                    // d sqrt/da = 1 / (2 sqrt(a)), reusing node i as sqrt(a).
                    let denom = self.push(Op::Scale(i, 2.0));
                    let inv = self.push(Op::Recip(denom));
                    let ga = self.push(Op::Hadamard(g, inv));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.push(Op::StepMask(a));
                    let ga = self.push(Op::Hadamard(g, mask));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::LeakyRelu { src, alpha } => {
                    let mask = self.push(Op::LeakyMask { src, alpha });
                    let ga = self.push(Op::Hadamard(g, mask));
                    self.accumulate(&mut grads, src, ga);
                }
                Op::StepMask(_) | Op::LeakyMask { .. } | Op::RowMaxDetached(_) => {}
            }
        }
        self.emit_level.set(saved);
        grads
    }

    fn accumulate(&self, grads: &mut [Option<usize>], target: usize, incoming: usize) {
        grads[target] = Some(match grads[target] {
            Some(existing) => self.push(Op::Add(existing, incoming)),
            None => incoming,
        });
    }
}

fn op_deps(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => vec![a, b],
        Op::MulCol { src, col } => vec![src, col],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::RowSums(a)
        | Op::ColSums(a)
        | Op::SumAll(a)
        | Op::Softplus(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Recip(a)
        | Op::Sqrt(a)
        | Op::Relu(a)
        | Op::StepMask(a)
        | Op::RowMaxDetached(a) => vec![a],
        Op::AffineElem { src, .. }
        | Op::BroadcastFull { src, .. }
        | Op::BroadcastRows { src, .. }
        | Op::BroadcastCols { src, .. }
        | Op::LeakyRelu { src, .. }
        | Op::LeakyMask { src, .. } => vec![src],
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> DenseMatrix {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.shape(), (1, 1), "scalar_value on non-scalar node");
        v.get(0, 0)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, op: Op) -> Var<'t> {
        Var {
            tape: self.tape,
            id: self.tape.push(op),
        }
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(Op::Sub(self.id, other.id))
    }

    pub fn hadamard(&self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.unary(Op::Hadamard(self.id, other.id))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k))
    }

    pub fn affine(&self, mul: f64, add: f64) -> Var<'t> {
        self.unary(Op::AffineElem {
            src: self.id,
            mul,
            add,
        })
    }

    /// Scale row `i` by entry `i` of `col` (an n x 1 var).
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        self.same_tape(&col);
        self.unary(Op::MulCol {
            src: self.id,
            col: col.id,
        })
    }

    pub fn row_sums(&self) -> Var<'t> {
        self.unary(Op::RowSums(self.id))
    }

    pub fn col_sums(&self) -> Var<'t> {
        self.unary(Op::ColSums(self.id))
    }

    pub fn sum_all(&self) -> Var<'t> {
        self.unary(Op::SumAll(self.id))
    }

    pub fn broadcast_full(&self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(Op::BroadcastFull {
            src: self.id,
            rows,
            cols,
        })
    }

    pub fn broadcast_rows(&self, rows: usize) -> Var<'t> {
        self.unary(Op::BroadcastRows {
            src: self.id,
            rows,
        })
    }

    pub fn broadcast_cols(&self, cols: usize) -> Var<'t> {
        self.unary(Op::BroadcastCols {
            src: self.id,
            cols,
        })
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id))
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(Op::Recip(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, alpha: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu {
            src: self.id,
            alpha,
        })
    }

    /// Mean of all entries as a 1 x 1 var.
    pub fn mean_all(&self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum_all().scale(1.0 / (r * c) as f64)
    }

    /// Row-wise softmax, shift-stabilized with a detached row max. The
    /// detachment is exact for gradients because softmax is shift-invariant.
    pub fn softmax_rows(&self) -> Var<'t> {
        let cols = self.shape().1;
        let m = self.unary(Op::RowMaxDetached(self.id));
        let shifted = self.sub(m.broadcast_cols(cols));
        let e = shifted.exp();
        let inv = e.row_sums().recip();
        e.mul_col(inv)
    }
}

/// One named tensor inside a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names, shapes, and offsets of the tensors packed into a flat parameter
/// vector. Entries tile the vector exactly: offsets are consecutive with no
/// gaps or overlap, and names are unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl<'de> Deserialize<'de> for ParamLayout {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Shadow {
            entries: Vec<LayoutEntry>,
            total: usize,
        }
        let s = Shadow::deserialize(deserializer)?;
        let mut offset = 0;
        for e in &s.entries {
            if e.offset != offset {
                return Err(serde::de::Error::custom(format!(
                    "layout entry {} at offset {}, expected {offset}",
                    e.name, e.offset
                )));
            }
            offset += e.len();
        }
        if offset != s.total {
            return Err(serde::de::Error::custom(format!(
                "layout total {} does not match entries ({offset})",
                s.total
            )));
        }
        let mut layout = ParamLayout {
            entries: s.entries,
            total: s.total,
            by_name: HashMap::new(),
        };
        layout.reindex();
        Ok(layout)
    }
}

impl ParamLayout {
    pub fn build(shapes: &[(&str, usize, usize)]) -> Self {
        let mut entries = Vec::with_capacity(shapes.len());
        let mut by_name = HashMap::with_capacity(shapes.len());
        let mut offset = 0;
        for &(name, rows, cols) in shapes {
            let prev = by_name.insert(name.to_string(), entries.len());
            assert!(prev.is_none(), "duplicate parameter name {name}");
            entries.push(LayoutEntry {
                name: name.to_string(),
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        }
        ParamLayout {
            entries,
            total: offset,
            by_name,
        }
    }

    fn reindex(&mut self) {
        self.by_name = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }
}

/// Flat parameter vector plus the layout describing its named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.total_len()];
        ParamVector { layout, data }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), layout.total_len(), "parameter length mismatch");
        ParamVector { layout, data }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> DenseMatrix {
        let e = self
            .layout
            .entry(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        DenseMatrix::from_vec(
            e.rows,
            e.cols,
            self.data[e.offset..e.offset + e.len()].to_vec(),
        )
        .unwrap()
    }

    pub fn set_tensor(&mut self, name: &str, value: &DenseMatrix) {
        let e = self
            .layout
            .entry(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(value.shape(), (e.rows, e.cols), "tensor shape for {name}");
        self.data[e.offset..e.offset + e.len()].copy_from_slice(value.as_slice());
    }

    /// Mutable view of one named tensor's backing slice (row-major).
    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let e = self
            .layout
            .entry(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        &mut self.data[e.offset..e.offset + e.len()]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Tape bindings for every tensor of a parameter vector, by name.
pub struct BoundParams<'t> {
    layout: Arc<ParamLayout>,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let e = self
            .layout
            .entry(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let idx = self
            .layout
            .entries()
            .iter()
            .position(|q| q.name == e.name)
            .unwrap();
        self.vars[idx]
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Run the outer sweep of `loss` and pack the per-tensor gradients back
    /// into a flat vector matching this binding's layout.
    pub fn collect_grads(&self, tape: &'t Tape, loss: Var<'t>) -> ParamVector {
        let mats = tape.gradients(loss, &self.vars);
        let mut out = ParamVector::zeros(self.layout.clone());
        for (e, m) in self.layout.entries().iter().zip(mats) {
            out.data[e.offset..e.offset + e.len()].copy_from_slice(m.as_slice());
        }
        out
    }
}

/// Bind every tensor of `theta` to `tape` as a differentiable leaf.
pub fn bind<'t>(tape: &'t Tape, theta: &ParamVector) -> BoundParams<'t> {
    let vars = theta
        .layout
        .entries()
        .iter()
        .map(|e| tape.leaf(theta.tensor(&e.name)))
        .collect();
    BoundParams {
        layout: theta.layout.clone(),
        vars,
    }
}

/// Gradient of a scalar-valued map with respect to its point argument.
///
/// `f` receives the tape, the point bound as a 1 x d differentiable leaf,
/// the raw context as a 1 x k constant, and the bound parameters; it must
/// return a scalar (or per-row scalar column) var.
pub fn grad_wrt_input<F>(
    f: F,
    x: &[f64],
    c: &[f64],
    theta: &ParamVector,
) -> AutodiffResult<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, Var<'t>, &BoundParams<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let xv = tape.leaf(DenseMatrix::row_vector(x));
    let cv = tape.constant(DenseMatrix::row_vector(c));
    let bound = bind(&tape, theta);
    let out = f(&tape, xv, cv, &bound);
    let grads = tape.grad(out, &[xv])?;
    Ok(grads[0].value().into_vec())
}

/// Gradient of a scalar loss with respect to every parameter tensor. The
/// loss closure may itself call [`Tape::grad`] once (input-gradients inside
/// the loss); deeper nesting is refused.
pub fn grad_wrt_params<L>(loss: L, theta: &ParamVector) -> AutodiffResult<ParamVector>
where
    L: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> AutodiffResult<Var<'t>>,
{
    let tape = Tape::new();
    let bound = bind(&tape, theta);
    let out = loss(&tape, &bound)?;
    Ok(bound.collect_grads(&tape, out))
}

/// Result of [`finite_diff_check`]: the worst relative disagreement between
/// analytic and central-difference derivatives over the probed coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Flat index into the parameter vector where the worst error occurred.
    pub worst_coordinate: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub probes: usize,
}

/// Compare the analytic parameter gradient of `loss` against central finite
/// differences at `n_probe` coordinates chosen by a seeded generator.
///
/// Steps are scaled per coordinate, `h = 1e-5 * (1 + |theta_i|)`. Relative
/// error uses a floor of `1e-6 * max(1, ||grad||_inf)` so exact zeros do not
/// divide by zero.
pub fn finite_diff_check<L>(
    loss: L,
    theta: &ParamVector,
    n_probe: usize,
    seed: u64,
) -> AutodiffResult<FdReport>
where
    L: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> AutodiffResult<Var<'t>>,
{
    assert!(n_probe >= 1, "need at least one probe");
    let analytic = grad_wrt_params(&loss, theta)?;
    let eval = |t: &ParamVector| -> AutodiffResult<f64> {
        let tape = Tape::new();
        let bound = bind(&tape, t);
        Ok(loss(&tape, &bound)?.scalar_value())
    };

    let dim = theta.len();
    let mut coords: Vec<usize> = (0..dim).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first n_probe slots become a uniform draw
    // without replacement.
    let take = n_probe.min(dim);
    for i in 0..take {
        let j = rng.gen_range(i..dim);
        coords.swap(i, j);
    }
    coords.truncate(take);

    let floor = 1e-6 * analytic.max_abs().max(1.0);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coordinate: coords[0],
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        probes: take,
    };
    let mut work = theta.clone();
    for &i in &coords {
        let base = theta.as_slice()[i];
        let h = 1e-5 * (1.0 + base.abs());
        work.as_mut_slice()[i] = base + h;
        let up = eval(&work)?;
        work.as_mut_slice()[i] = base - h;
        let down = eval(&work)?;
        work.as_mut_slice()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coordinate = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn simple_layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::build(&[("w", 2, 2), ("b", 1, 2)]))
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let l = simple_layout();
        assert_eq!(l.total_len(), 6);
        assert_eq!(l.entry("w").unwrap().offset, 0);
        assert_eq!(l.entry("b").unwrap().offset, 4);
        assert!(l.entry("nope").is_none());
    }

    #[test]
    fn quadratic_input_gradient() {
        let theta = ParamVector::zeros(Arc::new(ParamLayout::build(&[])));
        let g = grad_wrt_input(
            |_tape, x, _c, _p| x.hadamard(x).sum_all().scale(0.5),
            &[3.0, -4.0],
            &[],
            &theta,
        )
        .unwrap();
        assert_eq!(g, vec![3.0, -4.0]);
    }

    #[test]
    fn input_gradient_of_constant_is_zero() {
        let theta = ParamVector::zeros(Arc::new(ParamLayout::build(&[])));
        let g = grad_wrt_input(
            |tape, _x, _c, _p| tape.scalar(7.0),
            &[1.0, 2.0, 3.0],
            &[],
            &theta,
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_gradient_of_squared_norm_is_theta() {
        let layout = simple_layout();
        let mut theta = ParamVector::zeros(layout);
        theta
            .as_mut_slice()
            .copy_from_slice(&[1.0, -2.0, 3.0, 0.5, -0.25, 4.0]);
        let grad = grad_wrt_params(
            |_tape, p| {
                let w = p.var("w");
                let b = p.var("b");
                Ok(w.hadamard(w).sum_all().add(b.hadamard(b).sum_all()).scale(0.5))
            },
            &theta,
        )
        .unwrap();
        assert_eq!(grad.as_slice(), theta.as_slice());
    }

    #[test]
    fn param_gradient_of_independent_loss_is_zero() {
        let theta = ParamVector::zeros(simple_layout());
        let grad = grad_wrt_params(|tape, _p| Ok(tape.scalar(1.5)), &theta).unwrap();
        assert!(grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let layout = simple_layout();
        let mut theta = ParamVector::zeros(layout);
        theta
            .as_mut_slice()
            .copy_from_slice(&[0.3, 1.7, -0.9, 0.2, 0.8, -1.1]);
        fn l1<'t>(_tape: &'t Tape, p: &BoundParams<'t>) -> AutodiffResult<Var<'t>> {
            Ok(p.var("w").hadamard(p.var("w")).sum_all())
        }
        fn l2<'t>(_tape: &'t Tape, p: &BoundParams<'t>) -> AutodiffResult<Var<'t>> {
            Ok(p.var("w").softplus().sum_all())
        }
        let (a, b) = (2.5, -1.25);
        let combined = grad_wrt_params(
            |tape, p| {
                let x = l1(tape, p)?.scale(a);
                let y = l2(tape, p)?.scale(b);
                Ok(x.add(y))
            },
            &theta,
        )
        .unwrap();
        let g1 = grad_wrt_params(l1, &theta).unwrap();
        let g2 = grad_wrt_params(l2, &theta).unwrap();
        for i in 0..theta.len() {
            let want = a * g1.as_slice()[i] + b * g2.as_slice()[i];
            assert!((combined.as_slice()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_gradient_matches_closed_form() {
        // Inner: y(x) = softplus(w x) at fixed x; dy/dx = sigmoid(w x) * w.
        // Outer: L(w) = dy/dx, so dL/dw = sigmoid'(w x) x w + sigmoid(w x).
        let layout = Arc::new(ParamLayout::build(&[("w", 1, 1)]));
        let mut theta = ParamVector::zeros(layout);
        theta.as_mut_slice()[0] = 0.8;
        let x0 = 1.3_f64;
        let grad = grad_wrt_params(
            |tape, p| {
                let x = tape.leaf(DenseMatrix::from_vec(1, 1, vec![x0]).unwrap());
                let y = x.matmul(p.var("w")).softplus();
                let dy_dx = tape.grad(y, &[x])?;
                Ok(dy_dx[0].sum_all())
            },
            &theta,
        )
        .unwrap();
        let w = 0.8_f64;
        let s = sigmoid(w * x0);
        let want = s * (1.0 - s) * x0 * w + s;
        assert!(
            (grad.as_slice()[0] - want).abs() < 1e-12,
            "got {}, want {want}",
            grad.as_slice()[0]
        );
    }

    #[test]
    fn double_inner_grad_is_refused() {
        let layout = Arc::new(ParamLayout::build(&[("w", 1, 1)]));
        let mut theta = ParamVector::zeros(layout);
        theta.as_mut_slice()[0] = 0.5;
        let result = grad_wrt_params(
            |tape, p| {
                let x = tape.leaf(DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap());
                let y = x.matmul(p.var("w")).softplus();
                let dy = tape.grad(y, &[x])?;
                let ddy = tape.grad(dy[0], &[x])?; // second nesting level
                Ok(ddy[0].sum_all())
            },
            &theta,
        );
        assert!(matches!(result, Err(AutodiffError::NestingTooDeep)));
    }

    #[test]
    fn independent_inner_grads_coexist() {
        // Two separate inner sweeps on disjoint level-0 subgraphs are the
        // dual-loss pattern and must not trip the nesting guard.
        let layout = Arc::new(ParamLayout::build(&[("w", 2, 2)]));
        let mut theta = ParamVector::zeros(layout);
        theta.as_mut_slice().copy_from_slice(&[1.0, 0.2, -0.3, 0.7]);
        let result = grad_wrt_params(
            |tape, p| {
                let x1 = tape.leaf(DenseMatrix::row_vector(&[0.5, -1.0]));
                let x2 = tape.leaf(DenseMatrix::row_vector(&[2.0, 0.25]));
                let w = p.var("w");
                let y1 = x1.matmul(w).softplus().sum_all();
                let y2 = x2.matmul(w).softplus().sum_all();
                let g1 = tape.grad(y1, &[x1])?;
                let g2 = tape.grad(y2, &[x2])?;
                Ok(g1[0].hadamard(g2[0]).sum_all())
            },
            &theta,
        );
        assert!(result.is_ok());
    }

    #[test]
    fn finite_diff_on_composite_network() {
        let layout = Arc::new(ParamLayout::build(&[("w0", 3, 2), ("b0", 1, 3), ("w1", 1, 3)]));
        let mut theta = ParamVector::zeros(layout);
        let vals: Vec<f64> = (0..theta.len())
            .map(|i| ((i as f64) * 0.37).sin() * 0.8)
            .collect();
        theta.as_mut_slice().copy_from_slice(&vals);
        let x = DenseMatrix::from_rows(&[vec![0.4, -1.2], vec![1.5, 0.3], vec![-0.7, 0.9]]).unwrap();
        let report = finite_diff_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let h = xv
                    .matmul(p.var("w0").transpose())
                    .add(p.var("b0").broadcast_rows(3))
                    .softplus();
                Ok(h.matmul(p.var("w1").transpose()).sigmoid().mean_all())
            },
            &theta,
            theta.len(),
            11,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-7,
            "max_rel_err {} at {}",
            report.max_rel_err,
            report.worst_coordinate
        );
    }

    #[test]
    fn finite_diff_on_nested_loss() {
        // Loss contains an input-gradient: L = <v, grad_x softplus-net(x)>.
        let layout = Arc::new(ParamLayout::build(&[("w0", 4, 2), ("w1", 1, 4)]));
        let mut theta = ParamVector::zeros(layout);
        let vals: Vec<f64> = (0..theta.len())
            .map(|i| ((i as f64) * 0.61).cos() * 0.9)
            .collect();
        theta.as_mut_slice().copy_from_slice(&vals);
        let report = finite_diff_check(
            |tape, p| {
                let x = tape.leaf(DenseMatrix::row_vector(&[0.7, -0.4]));
                let v = tape.constant(DenseMatrix::row_vector(&[1.5, -2.0]));
                let y = x
                    .matmul(p.var("w0").transpose())
                    .softplus()
                    .matmul(p.var("w1").transpose())
                    .sum_all();
                let gx = tape.grad(y, &[x])?;
                Ok(gx[0].hadamard(v).sum_all())
            },
            &theta,
            theta.len(),
            5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max_rel_err {} at {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_coordinate,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // Negative control: evaluate the loss with one parameter's
        // contribution doubled relative to what the analytic gradient sees.
        // Implemented by checking a loss against probes of a DIFFERENT loss:
        // here we simply verify that an intentionally wrong analytic value
        // yields a large relative error through the same formula.
        let layout = Arc::new(ParamLayout::build(&[("w", 1, 3)]));
        let mut theta = ParamVector::zeros(layout);
        theta.as_mut_slice().copy_from_slice(&[0.2, -0.5, 1.1]);
        // Honest check first.
        let honest = finite_diff_check(
            |_tape, p| Ok(p.var("w").hadamard(p.var("w")).sum_all()),
            &theta,
            3,
            3,
        )
        .unwrap();
        assert!(honest.max_rel_err < 1e-8);
        // Corrupted: loss evaluates w^2 + w (extra term the "analytic"
        // quadratic gradient would miss if we computed it by hand as 2w).
        let analytic_wrong = [2.0 * 0.2 + 0.0, 2.0 * -0.5, 2.0 * 1.1]; // misses +1
        let eval = |t: &ParamVector| {
            let w = t.as_slice();
            w.iter().map(|v| v * v + v).sum::<f64>()
        };
        let mut worst = 0.0_f64;
        for i in 0..3 {
            let h = 1e-5 * (1.0 + theta.as_slice()[i].abs());
            let mut up = theta.clone();
            up.as_mut_slice()[i] += h;
            let mut dn = theta.clone();
            dn.as_mut_slice()[i] -= h;
            let numeric = (eval(&up) - eval(&dn)) / (2.0 * h);
            let rel = (analytic_wrong[i] - numeric).abs()
                / analytic_wrong[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst > 1e-2, "corruption went undetected: {worst}");
    }

    #[test]
    fn softmax_rows_sums_to_one_and_matches_grad() {
        let tape = Tape::new();
        let x = tape.leaf(DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]).unwrap());
        let s = x.softmax_rows();
        let v = s.value();
        for r in 0..2 {
            let sum: f64 = v.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // d/dx_j sum_i softmax_i = 0 (softmax rows are normalized).
        let g = tape.grad(s, &[x]).unwrap();
        assert!(g[0].value().max_abs() < 1e-12);
    }

    #[test]
    fn sqrt_gradient_including_second_order() {
        // First order: d sqrt(a)/da = 0.5 / sqrt(a).
        let tape = Tape::new();
        let a = tape.leaf(DenseMatrix::row_vector(&[4.0, 0.25]));
        let y = a.sqrt().sum_all();
        let g = tape.grad(y, &[a]).unwrap();
        let gv = g[0].value();
        assert!((gv.get(0, 0) - 0.25).abs() < 1e-14);
        assert!((gv.get(0, 1) - 1.0).abs() < 1e-14);
        // Second order through the nested sweep: L(w) = d/dx sqrt(w x) at
        // fixed x has closed form; check its w-derivative by FD.
        let layout = Arc::new(ParamLayout::build(&[("w", 1, 1)]));
        let mut theta = ParamVector::zeros(layout);
        theta.as_mut_slice()[0] = 2.0;
        let report = finite_diff_check(
            |tape, p| {
                let x = tape.leaf(DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap());
                let y = x.matmul(p.var("w")).sqrt();
                let dy = tape.grad(y, &[x])?;
                Ok(dy[0].sum_all())
            },
            &theta,
            1,
            2,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel {}", report.max_rel_err);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(DenseMatrix::row_vector(&[0.0, -1.0, 2.0]));
        let y = x.relu().sum_all();
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(g[0].value().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn param_vector_named_access_round_trips() {
        let layout = simple_layout();
        let mut theta = ParamVector::zeros(layout);
        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        theta.set_tensor("w", &w);
        assert_eq!(theta.tensor("w"), w);
        assert_eq!(theta.as_slice()[..4], [1.0, 2.0, 3.0, 4.0]);
        theta.tensor_mut("b")[1] = 9.0;
        assert_eq!(theta.tensor("b").get(0, 1), 9.0);
    }
}
