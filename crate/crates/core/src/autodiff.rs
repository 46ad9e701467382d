//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every reverse rule is itself written with tape primitives, so the adjoints
//! returned by [`Tape::grad`] are ordinary [`Var`]s that can be differentiated
//! again. This is how gradients flow through inner-loop adaptation steps.
//!
//! A tape is single-threaded. Nodes are appended in evaluation order, which is
//! a topological order, and the reverse sweep walks indices downwards with a
//! fixed parent order, so accumulation is deterministic.

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Default limit on how many `grad` calls may be stacked on one another.
pub const DEFAULT_MAX_DEPTH: u32 = 8;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    Sum(usize),
    Expand(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Softplus(usize),
    Selu(usize),
    LeakyRelu(usize),
    ClampMin(usize, T),
    Reshape(usize),
    Slice { a: usize, start: usize },
    Embed { a: usize, start: usize },
}

impl<T> Op<T> {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul { a, b, .. } => [Some(a), Some(b)],
            Scale(a, _) | Shift(a) | SumRows(a) | BroadcastRows(a) | SumCols(a)
            | BroadcastCols(a) | Sum(a) | Expand(a) | Sin(a) | Cos(a) | Sigmoid(a) | Tanh(a)
            | Exp(a) | Log(a) | Sqrt(a) | Recip(a) | Softplus(a) | Selu(a) | LeakyRelu(a)
            | ClampMin(a, _) | Reshape(a) | Slice { a, .. } | Embed { a, .. } => [Some(a), None],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    /// Constants never receive adjoints.
    constant: bool,
    level: u32,
}

pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: RefCell<Option<(String, usize)>>,
    level: Cell<u32>,
    max_depth: u32,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_max_depth(DEFAULT_MAX_DEPTH)
    }

    pub fn with_max_depth(max_depth: u32) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            fault: RefCell::new(None),
            level: Cell::new(0),
            max_depth,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, 0)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, 0)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// First non-finite value produced on this tape, if any.
    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            None => Ok(()),
            Some((op, node)) => Err(Error::NumericFault {
                op: op.clone(),
                location: format!("tape node {node}"),
            }),
        }
    }

    fn node_value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, constant: bool, level: u32) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some((op_name(&op).to_string(), id));
            }
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            constant,
            level: level.max(self.level.get()),
        });
        Var { tape: self, id }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let (constant, level) = {
            let nodes = self.nodes.borrow();
            let mut constant = true;
            let mut level = 0;
            for p in op.parents().into_iter().flatten() {
                constant &= nodes[p].constant;
                level = level.max(nodes[p].level);
            }
            (constant, level)
        };
        self.push(value, op, constant, level)
    }

    fn at(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `output` with respect to `wrt`, as new
    /// differentiable nodes on this tape. Inputs the output does not depend on
    /// get zero gradients.
    pub fn grad<'t>(&'t self, output: Var<'t, T>, wrt: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if !output.value().shape().is_empty() {
            return Err(Error::contract(format!(
                "grad needs a 0-dim output, got shape {:?}",
                output.value().shape()
            )));
        }
        self.check()?;
        let new_level = self.nodes.borrow()[output.id].level + 1;
        if new_level > self.max_depth {
            return Err(Error::Config(format!(
                "differentiation nesting depth {new_level} exceeds the limit of {}",
                self.max_depth
            )));
        }

        let n = output.id + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if depends[i] || nodes[i].constant {
                    continue;
                }
                depends[i] = nodes[i]
                    .op
                    .parents()
                    .into_iter()
                    .flatten()
                    .any(|p| depends[p]);
            }
        }

        let saved_level = self.level.replace(new_level);
        let mut adjoint: Vec<Option<Var<'t, T>>> = vec![None; n];
        adjoint[output.id] = Some(self.constant(Tensor::scalar(T::one())));
        for i in (0..n).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            for (p, contrib) in self.vjp(i, &op, g, &depends) {
                adjoint[p] = Some(match adjoint[p] {
                    None => contrib,
                    Some(acc) => acc + contrib,
                });
            }
        }
        self.level.set(saved_level);

        let out = wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect();
        self.check()?;
        Ok(out)
    }

    /// Like [`grad`](Self::grad) but returns plain tensors and discards the
    /// nodes the reverse sweep recorded.
    pub fn gradients(&self, output: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let mark = self.len();
        let result = self
            .grad(output, wrt)
            .map(|gs| gs.iter().map(|g| (*g.value()).clone()).collect());
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    fn vjp<'t>(
        &'t self,
        id: usize,
        op: &Op<T>,
        g: Var<'t, T>,
        depends: &[bool],
    ) -> Vec<(usize, Var<'t, T>)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'t, T>| {
            if depends[p] {
                out.push((p, f()));
            }
        };
        let y = self.at(id);
        match *op {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| -g);
            }
            Mul(a, b) => {
                emit(a, &|| g * self.at(b));
                emit(b, &|| g * self.at(a));
            }
            Scale(a, c) => emit(a, &|| g.scale(c)),
            Shift(a) => emit(a, &|| g),
            MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.at(a), self.at(b));
                emit(a, &|| {
                    if ta {
                        bv.matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(bv, false, !tb)
                    }
                });
                emit(b, &|| {
                    if tb {
                        g.matmul_t(av, true, ta)
                    } else {
                        av.matmul_t(g, !ta, false)
                    }
                });
            }
            SumRows(a) => {
                let m = self.node_value(a).rows();
                emit(a, &|| g.broadcast_rows(m));
            }
            BroadcastRows(a) => emit(a, &|| g.sum_rows()),
            SumCols(a) => {
                let c = self.node_value(a).cols();
                emit(a, &|| g.broadcast_cols(c));
            }
            BroadcastCols(a) => emit(a, &|| g.sum_cols()),
            Sum(a) => {
                let shape = self.node_value(a).shape().to_vec();
                emit(a, &|| g.expand(&shape));
            }
            Expand(a) => emit(a, &|| g.sum()),
            Sin(a) => emit(a, &|| g * self.at(a).cos()),
            Cos(a) => emit(a, &|| -(g * self.at(a).sin())),
            Sigmoid(a) => emit(a, &|| g * (y * (-y).shift(T::one()))),
            Tanh(a) => emit(a, &|| g * (-(y * y)).shift(T::one())),
            Exp(a) => emit(a, &|| g * y),
            Log(a) => emit(a, &|| g * self.at(a).recip()),
            Sqrt(a) => emit(a, &|| (g * y.recip()).scale(T::of(0.5))),
            Recip(a) => emit(a, &|| -(g * (y * y))),
            Softplus(a) => emit(a, &|| g * self.at(a).sigmoid()),
            Selu(a) => emit(a, &|| {
                // selu'(x) = lambda for x > 0, selu(x) + lambda*alpha otherwise
                let x = self.node_value(a);
                let lam = T::of(SELU_LAMBDA);
                let pos = self.constant(x.map(|v| if v > T::zero() { lam } else { T::zero() }));
                let neg = self.constant(x.map(|v| if v > T::zero() { T::zero() } else { T::one() }));
                g * (pos + neg * y.shift(T::of(SELU_LAMBDA * SELU_ALPHA)))
            }),
            LeakyRelu(a) => emit(a, &|| {
                let x = self.node_value(a);
                let slope = T::of(LEAKY_RELU_SLOPE);
                g * self.constant(x.map(|v| if v > T::zero() { T::one() } else { slope }))
            }),
            ClampMin(a, lo) => emit(a, &|| {
                let x = self.node_value(a);
                g * self.constant(x.map(|v| if v > lo { T::one() } else { T::zero() }))
            }),
            Reshape(a) => {
                let shape = self.node_value(a).shape().to_vec();
                emit(a, &|| g.reshape(&shape));
            }
            Slice { a, start } => {
                let av = self.node_value(a);
                let (total, shape) = (av.len(), av.shape().to_vec());
                emit(a, &|| g.embed(start, total, &shape));
            }
            Embed { a, start } => {
                let shape = self.node_value(a).shape().to_vec();
                emit(a, &|| g.slice(start, &shape));
            }
        }
        out
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    use Op::*;
    match op {
        Leaf => "leaf",
        Add(..) => "add",
        Sub(..) => "sub",
        Mul(..) => "mul",
        Scale(..) => "scale",
        Shift(..) => "shift",
        MatMul { .. } => "matmul",
        SumRows(_) => "sum_rows",
        BroadcastRows(_) => "broadcast_rows",
        SumCols(_) => "sum_cols",
        BroadcastCols(_) => "broadcast_cols",
        Sum(_) => "sum",
        Expand(_) => "expand",
        Sin(_) => "sin",
        Cos(_) => "cos",
        Sigmoid(_) => "sigmoid",
        Tanh(_) => "tanh",
        Exp(_) => "exp",
        Log(_) => "log",
        Sqrt(_) => "sqrt",
        Recip(_) => "recip",
        Softplus(_) => "softplus",
        Selu(_) => "selu",
        LeakyRelu(_) => "leaky_relu",
        ClampMin(..) => "clamp_min",
        Reshape(_) => "reshape",
        Slice { .. } => "slice",
        Embed { .. } => "embed",
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "contract violation: `{op}` shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn selu<T: Real>(x: T) -> T {
    let lam = T::of(SELU_LAMBDA);
    if x > T::zero() {
        lam * x
    } else {
        lam * T::of(SELU_ALPHA) * x.exp_m1()
    }
}

pub fn leaky_relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(LEAKY_RELU_SLOPE)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let v = self.value().map(f);
        self.tape.record(v, op)
    }

    pub fn matmul(self, rhs: Self) -> Self {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)` with optional transposes.
    pub fn matmul_t(self, rhs: Self, ta: bool, tb: bool) -> Self {
        let v = Tensor::matmul(&self.value(), &rhs.value(), ta, tb);
        self.tape.record(v, Op::MatMul { a: self.id, b: rhs.id, ta, tb })
    }

    pub fn scale(self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn shift(self, c: T) -> Self {
        self.unary(Op::Shift(self.id), |x| x + c)
    }

    /// `[m, n]` → `[n]`, summing over rows.
    pub fn sum_rows(self) -> Self {
        let x = self.value();
        let (m, n) = x.dims2();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
        self.tape.record(Tensor::new([n], out), Op::SumRows(self.id))
    }

    /// `[n]` → `[m, n]`, repeating the vector as every row.
    pub fn broadcast_rows(self, m: usize) -> Self {
        let x = self.value();
        assert_eq!(x.rank(), 1, "contract violation: broadcast_rows needs a vector, got {:?}", x.shape());
        let n = x.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(x.data());
        }
        self.tape.record(Tensor::new([m, n], out), Op::BroadcastRows(self.id))
    }

    /// `[m, n]` → `[m]`, summing each row.
    pub fn sum_cols(self) -> Self {
        let x = self.value();
        let (m, _) = x.dims2();
        let out = (0..m).map(|i| x.row(i).iter().fold(T::zero(), |a, &b| a + b)).collect();
        self.tape.record(Tensor::new([m], out), Op::SumCols(self.id))
    }

    /// `[m]` → `[m, n]`, repeating each entry across its row.
    pub fn broadcast_cols(self, n: usize) -> Self {
        let x = self.value();
        assert_eq!(x.rank(), 1, "contract violation: broadcast_cols needs a vector, got {:?}", x.shape());
        let m = x.len();
        let mut out = Vec::with_capacity(m * n);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, n));
        }
        self.tape.record(Tensor::new([m, n], out), Op::BroadcastCols(self.id))
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Single-element tensor → `shape`.
    pub fn expand(self, shape: &[usize]) -> Self {
        let v = self.item();
        self.tape.record(Tensor::full(shape.to_vec(), v), Op::Expand(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn sin(self) -> Self {
        self.unary(Op::Sin(self.id), T::sin)
    }

    pub fn cos(self) -> Self {
        self.unary(Op::Cos(self.id), T::cos)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), T::tanh)
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), T::exp)
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Log(self.id), T::ln)
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), T::sqrt)
    }

    pub fn recip(self) -> Self {
        self.unary(Op::Recip(self.id), T::recip)
    }

    pub fn softplus(self) -> Self {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn selu(self) -> Self {
        self.unary(Op::Selu(self.id), selu)
    }

    pub fn leaky_relu(self) -> Self {
        self.unary(Op::LeakyRelu(self.id), leaky_relu)
    }

    pub fn clamp_min(self, lo: T) -> Self {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshaped(shape.to_vec());
        self.tape.record(v, Op::Reshape(self.id))
    }

    /// Contiguous flat range `[start, start + prod(shape))` viewed as `shape`.
    pub fn slice(self, start: usize, shape: &[usize]) -> Self {
        let x = self.value();
        let len: usize = shape.iter().product();
        assert!(
            start + len <= x.len(),
            "contract violation: slice {start}..{} of {} values",
            start + len,
            x.len()
        );
        let v = Tensor::new(shape.to_vec(), x.data()[start..start + len].to_vec());
        self.tape.record(v, Op::Slice { a: self.id, start })
    }

    /// Places this tensor's values at `start` inside a zero tensor of `shape`.
    pub fn embed(self, start: usize, total: usize, shape: &[usize]) -> Self {
        let x = self.value();
        assert!(start + x.len() <= total, "contract violation: embed out of range");
        let mut out = vec![T::zero(); total];
        out[start..start + x.len()].copy_from_slice(x.data());
        self.tape.record(Tensor::new(shape.to_vec(), out), Op::Embed { a: self.id, start })
    }

    /// Row-wise layer normalisation without affine parameters. Accepts a
    /// vector (one instance) or a matrix (one instance per row).
    pub fn layer_norm(self) -> Self {
        let shape = self.shape();
        assert!(
            !shape.is_empty() && shape.iter().product::<usize>() > 0,
            "contract violation: layer_norm needs at least one element"
        );
        let x = if shape.len() == 1 { self.reshape(&[1, shape[0]]) } else { self };
        let (_, n) = x.value().dims2();
        let inv_n = T::one() / T::of(n as f64);
        let mean = x.sum_cols().scale(inv_n).broadcast_cols(n);
        let centered = x - mean;
        let var = centered.square().sum_cols().scale(inv_n);
        let inv_std = var.shift(T::of(LAYER_NORM_EPS)).sqrt().recip().broadcast_cols(n);
        let y = centered * inv_std;
        if shape.len() == 1 {
            y.reshape(&shape)
        } else {
            y
        }
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(self, target: Self) -> Self {
        (self - target).square().mean()
    }

    /// `[m, n] + [n]` with the bias repeated for every row.
    pub fn add_bias(self, bias: Self) -> Self {
        let m = self.value().rows();
        self + bias.broadcast_rows(m)
    }
}

impl<'t, T: Real> ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        same_shape("add", &a, &b);
        self.tape.record(a.zip_map(&b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }
}

impl<'t, T: Real> ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        same_shape("sub", &a, &b);
        self.tape.record(a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }
}

impl<'t, T: Real> ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        same_shape("mul", &a, &b);
        self.tape.record(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }
}

impl<'t, T: Real> ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::<f64>::new();
        assert_eq!(tape.var(Tensor::scalar(0.0)).sigmoid().item(), 0.5);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let tape = Tape::<f64>::new();
        let y = tape.var(Tensor::new([3], vec![3.0, 3.0, 3.0])).layer_norm();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn selu_of_one() {
        let tape = Tape::<f64>::new();
        let y = tape.var(Tensor::scalar(1.0)).selu().item();
        assert!((y - 1.050700987).abs() < 1e-9);
    }

    #[test]
    fn derivative_of_scaled_sine_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.scale(30.0).sin();
        let g = tape.gradients(y, &[x]).unwrap();
        assert!((g[0].item() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_quadratic() {
        let tape = Tape::<f64>::new();
        let phi = tape.var(Tensor::scalar(0.0));
        let loss = phi.shift(-2.0).square();
        assert_eq!(tape.gradients(loss, &[phi]).unwrap()[0].item(), -4.0);
    }

    fn adapted_loss_grad(target: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let phi0 = tape.var(Tensor::scalar(0.0));
        let inner = phi0.shift(-2.0).square();
        let g = tape.grad(inner, &[phi0]).unwrap()[0];
        let phi = phi0 - g.scale(0.25);
        assert_eq!(phi.item(), 1.0);
        let outer = phi.shift(-target).square();
        tape.gradients(outer, &[phi0]).unwrap()[0].item()
    }

    #[test]
    fn second_order_through_one_adaptation_step() {
        assert_eq!(adapted_loss_grad(1.0), 0.0);
        assert_eq!(adapted_loss_grad(0.0), 1.0);
    }

    #[test]
    fn untouched_inputs_get_zero_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::new([2], vec![1.0, 2.0]));
        let b = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let g = tape.gradients(a.square().sum(), &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::new([2], vec![1.0, 2.0]));
        assert!(matches!(tape.gradients(a, &[a]), Err(Error::Contract(_))));
    }

    #[test]
    fn nesting_depth_limit() {
        let tape = Tape::<f64>::with_max_depth(2);
        let x = tape.var(Tensor::scalar(0.5));
        let mut y = x.sin();
        for _ in 0..2 {
            y = tape.grad(y, &[x]).unwrap()[0];
        }
        assert!(matches!(tape.grad(y, &[x]), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_values_fault() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.recip().sum();
        match tape.gradients(y, &[x]) {
            Err(Error::NumericFault { op, .. }) => assert_eq!(op, "recip"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn gradients_leave_tape_length_unchanged() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]));
        let y = x.sin().square().sum();
        let before = tape.len();
        let _ = tape.gradients(y, &[x]).unwrap();
        assert_eq!(tape.len(), before);
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn shape_mismatch_panics() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::new([2], vec![1.0, 2.0]));
        let b = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let _ = a + b;
    }
}
