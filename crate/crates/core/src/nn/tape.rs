//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a row-major 2-D matrix (a batch of row vectors).
//! Operations append nodes; [`Tape::backward`] walks the tape once in reverse
//! and returns the gradient of a scalar loss with respect to every node that
//! requires a gradient.
//!
//! Second-order quantities are obtained by building first-order derivatives
//! out of ordinary tape operations (see `BoundMlp::input_gradient`), so a
//! single reverse sweep is enough for the gradient penalty.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::Activation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Offset(usize),
    MaskMul(usize, Arc<Array2<S>>),
    Act(usize, Activation),
    Exp(usize),
    Tanh(usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Permute(usize, Vec<usize>),
    SqDist(usize, usize),
}

struct Node<S> {
    value: Arc<Array2<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `var`; `None` if the loss does not
    /// depend on it or it does not require a gradient.
    pub fn get(&self, var: Var<'_, S>) -> Option<&Array2<S>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when unreachable.
    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Array2<S> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.shape()),
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        self.push_rc(Arc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Arc<Array2<S>>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf holding a constant (no gradient).
    pub fn constant(&self, value: Array2<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that requires a gradient.
    pub fn variable(&self, value: Array2<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing storage with a model parameter.
    pub fn parameter(&self, value: &Arc<Array2<S>>, requires_grad: bool) -> Var<'_, S> {
        self.push_rc(Arc::clone(value), Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn value(&self, id: usize) -> Ref<'_, Array2<S>> {
        Ref::map(self.nodes.borrow(), |n| &*n[id].value)
    }

    fn rc(&self, id: usize) -> Arc<Array2<S>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                root.value.dim()
            )));
        }
        if !root.value[[0, 0]].is_finite() {
            return Err(Error::Domain("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Array2<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array2::from_elem((1, 1), S::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| -> &Array2<S> { &nodes[i].value };
            let req = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, delta: Array2<S>| match &mut grads[i] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if req(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if req(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if req(*a) {
                        acc(*a, g.dot(val(*b)));
                    }
                    if req(*b) {
                        acc(*b, g.t().dot(val(*a)));
                    }
                }
                Op::AddBias(a, b) => {
                    if req(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if req(*a) {
                        acc(*a, g);
                    }
                }
                Op::Add(a, b) => {
                    if req(*b) {
                        acc(*b, g.clone());
                    }
                    if req(*a) {
                        acc(*a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if req(*b) {
                        acc(*b, g.mapv(|x| -x));
                    }
                    if req(*a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if req(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if req(*b) {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::Scale(a, c) => acc(*a, g.mapv(|x| x * *c)),
                Op::Offset(a) => acc(*a, g),
                Op::MaskMul(a, m) => acc(*a, &g * &**m),
                Op::Act(a, act) => {
                    let d = activation_backward(*act, val(*a), &node.value, &g);
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * &*node.value),
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&*node.value)
                        .for_each(|d, &y| *d *= S::one() - y * y);
                    acc(*a, d);
                }
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*node.value).for_each(|d, &y| {
                        *d = if y > S::zero() {
                            *d / (y + y)
                        } else {
                            S::zero()
                        }
                    });
                    acc(*a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| *d *= x + x);
                    acc(*a, d);
                }
                Op::Recip(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&*node.value)
                        .for_each(|d, &y| *d = -*d * y * y);
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let dim = val(*a).dim();
                    let n = S::c((dim.0 * dim.1) as f64);
                    acc(*a, Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::RowSum(a) => {
                    let dim = val(*a).dim();
                    let d = Array2::from_shape_fn(dim, |(i, _)| g[[i, 0]]);
                    acc(*a, d);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if req(p) {
                            acc(p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::Slice(a, start) => {
                    let (n, m) = val(*a).dim();
                    let mut d = Array2::zeros((n, m));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::Permute(a, perm) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (j, &src) in perm.iter().enumerate() {
                        d.column_mut(src).assign(&g.column(j));
                    }
                    acc(*a, d);
                }
                Op::SqDist(a, b) => {
                    let two = S::c(2.0);
                    if req(*a) {
                        let rows = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let d = (val(*a) * &rows - g.dot(val(*b))) * two;
                        acc(*a, d);
                    }
                    if req(*b) {
                        let cols = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                        let d = (val(*b) * &cols - g.t().dot(val(*a))) * two;
                        acc(*b, d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn activation_backward<S: Scalar>(
    act: Activation,
    input: &Array2<S>,
    output: &Array2<S>,
    upstream: &Array2<S>,
) -> Array2<S> {
    let mut d = upstream.clone();
    match act {
        Activation::Linear => {}
        Activation::Relu => Zip::from(&mut d).and(input).for_each(|d, &x| {
            if x <= S::zero() {
                *d = S::zero()
            }
        }),
        Activation::LeakyRelu(alpha) => {
            let alpha = S::c(alpha);
            Zip::from(&mut d).and(input).for_each(|d, &x| {
                if x <= S::zero() {
                    *d *= alpha
                }
            })
        }
        Activation::Selu => {
            let lambda = S::c(super::SELU_LAMBDA);
            let la = S::c(super::SELU_LAMBDA * super::SELU_ALPHA);
            Zip::from(&mut d)
                .and(input)
                .and(output)
                .for_each(|d, &x, &y| {
                    *d = if x > S::zero() {
                        *d * lambda
                    } else {
                        *d * (y + la)
                    }
                })
        }
        Activation::Sigmoid => Zip::from(&mut d)
            .and(output)
            .for_each(|d, &y| *d = *d * y * (S::one() - y)),
        Activation::Tanh => Zip::from(&mut d)
            .and(output)
            .for_each(|d, &y| *d *= S::one() - y * y),
        Activation::Softmax => {
            for (mut drow, yrow) in d.outer_iter_mut().zip(output.outer_iter()) {
                let dot = drow
                    .iter()
                    .zip(yrow.iter())
                    .fold(S::zero(), |acc, (&g, &y)| acc + g * y);
                Zip::from(&mut drow)
                    .and(&yrow)
                    .for_each(|g, &y| *g = y * (*g - dot));
            }
        }
    }
    d
}

#[allow(clippy::should_implement_trait)]
impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Arc<Array2<S>> {
        self.tape.rc(self.id)
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> S {
        self.tape.value(self.id)[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value(self.id).dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, value: Array2<S>, op: Op<S>) -> Self {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Self, value: Array2<S>, op: Op<S>) -> Self {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(self, other: Self, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: operand shapes differ"
        );
    }

    /// `self · other`.
    pub fn matmul(self, other: Self) -> Self {
        let v = self.tape.value(self.id).dot(&*self.tape.value(other.id));
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Self) -> Self {
        let v = self.tape.value(self.id).dot(&self.tape.value(other.id).t());
        self.binary(other, v, Op::MatMulT(self.id, other.id))
    }

    /// Adds a `1 × m` row to every row.
    pub fn add_bias(self, bias: Self) -> Self {
        let v = &*self.tape.value(self.id) + &*self.tape.value(bias.id);
        self.binary(bias, v, Op::AddBias(self.id, bias.id))
    }

    pub fn add(self, other: Self) -> Self {
        self.same_shape(other, "add");
        let v = &*self.tape.value(self.id) + &*self.tape.value(other.id);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        self.same_shape(other, "sub");
        let v = &*self.tape.value(self.id) - &*self.tape.value(other.id);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        self.same_shape(other, "mul");
        let v = &*self.tape.value(self.id) * &*self.tape.value(other.id);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: S) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Self {
        self.scale(-S::one())
    }

    pub fn add_scalar(self, c: S) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mask(self, m: Array2<S>) -> Self {
        assert_eq!(self.shape(), m.dim(), "mask: shapes differ");
        let v = &*self.tape.value(self.id) * &m;
        self.unary(v, Op::MaskMul(self.id, Arc::new(m)))
    }

    pub fn activate(self, act: Activation) -> Self {
        let v = act.apply(&self.tape.value(self.id));
        self.unary(v, Op::Act(self.id, act))
    }

    pub fn exp(self) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn tanh(self) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sqrt(self) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x.sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn recip(self) -> Self {
        let v = self.tape.value(self.id).mapv(|x| x.recip());
        self.unary(v, Op::Recip(self.id))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(self) -> Self {
        let v = Array2::from_elem((1, 1), self.tape.value(self.id).sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean of all entries, as a `1 × 1` node.
    pub fn mean(self) -> Self {
        let value = self.tape.value(self.id);
        let n = S::c(value.len() as f64);
        let v = Array2::from_elem((1, 1), value.sum() / n);
        drop(value);
        self.unary(v, Op::Mean(self.id))
    }

    /// Per-row sum, `n × m → n × 1`.
    pub fn row_sum(self) -> Self {
        let v = self
            .tape
            .value(self.id)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.unary(v, Op::RowSum(self.id))
    }

    /// Columns `start..end`.
    pub fn columns(self, start: usize, end: usize) -> Self {
        let v = self.tape.value(self.id).slice(s![.., start..end]).to_owned();
        self.unary(v, Op::Slice(self.id, start))
    }

    /// Column permutation: output column `j` is input column `perm[j]`.
    pub fn permute(self, perm: &[usize]) -> Self {
        let value = self.tape.value(self.id);
        assert_eq!(value.ncols(), perm.len(), "permute: width differs");
        let v = value.select(Axis(1), perm);
        drop(value);
        self.unary(v, Op::Permute(self.id, perm.to_vec()))
    }

    /// Matrix of squared Euclidean distances between the rows of `self` and `other`.
    pub fn sq_dist(self, other: Self) -> Self {
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        assert_eq!(a.ncols(), b.ncols(), "sq_dist: widths differ");
        let v = Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
            a.row(i)
                .iter()
                .zip(b.row(j).iter())
                .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        });
        drop((a, b));
        self.binary(other, v, Op::SqDist(self.id, other.id))
    }
}

/// Concatenates nodes with equal row counts along the column axis.
pub fn concat<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Var<'t, S> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
    let rg = parts.iter().any(|p| p.requires_grad());
    tape.push(v, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
}
