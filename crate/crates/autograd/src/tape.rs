//! Reverse-mode tape. Every vector-Jacobian product is itself recorded as tape
//! operations, so gradients can be differentiated again (`create_graph`).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::Tensor;
use crate::ShapeError;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BroadcastTo(usize),
    SumTo(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow { x: usize, axis: usize, start: usize },
    Pad { x: usize, axis: usize, before: usize },
    Concat(Vec<usize>, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Neg(x) | Scale(x, _) | Offset(x) | Exp(x) | Ln(x) | Tanh(x) | Relu(x) | Sqrt(x)
            | BroadcastTo(x) | SumTo(x) | Reshape(x) | Permute(x, _) => vec![*x],
            Narrow { x, .. } | Pad { x, .. } => vec![*x],
            Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. One tape per forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let parents = op.parents();
        let requires_grad = if parents.is_empty() {
            false
        } else {
            self.grad_enabled.get() && {
                let nodes = self.nodes.borrow();
                parents.iter().any(|&p| nodes[p].requires_grad)
            }
        };
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad: true });
        Var { tape: self, id }
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad: false });
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Runs `f` with recording disabled; everything created inside is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.grad_enabled.replace(false);
        let out = f();
        self.grad_enabled.set(prev);
        out
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the sum of `y` with respect to each of `xs`.
    ///
    /// With `create_graph` the returned gradients are themselves differentiable
    /// functions of every tape input; without it they are constants. Inputs with
    /// no path to `y` get a zero gradient.
    pub fn grad<'t>(&'t self, y: Var<'t>, xs: &[Var<'t>], create_graph: bool) -> Vec<Var<'t>> {
        let end = y.id + 1;
        let lo = xs.iter().map(|x| x.id).min().unwrap_or(end);
        let mut needed = vec![false; end];
        let mut is_target = vec![false; end];
        for x in xs {
            if x.id < end {
                is_target[x.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lo..end {
                needed[i] = is_target[i]
                    || (nodes[i].requires_grad
                        && nodes[i].op.parents().iter().any(|&p| p >= lo && needed[p]));
            }
        }
        let prev = self.grad_enabled.replace(create_graph);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        if needed[y.id] {
            let seed = Tensor::full(y.value().shape(), 1.0);
            grads[y.id] = Some(self.constant(seed));
        }
        for i in (lo..end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let need = |p: usize| p >= lo && needed[p];
            for (p, gp) in self.vjp(i, &op, g, need) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc.add(gp),
                    None => gp,
                });
            }
        }
        let out = xs
            .iter()
            .map(|x| match grads.get(x.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(x.value().shape())),
            })
            .collect();
        self.grad_enabled.set(prev);
        out
    }

    /// Adjoint contributions to the parents of node `id` for which `need` holds.
    fn vjp<'t>(&'t self, id: usize, op: &Op, g: Var<'t>, need: impl Fn(usize) -> bool) -> Vec<(usize, Var<'t>)> {
        let y = self.at(id);
        let mut out = Vec::with_capacity(2);
        let mut put = |p: usize, f: &dyn Fn() -> Var<'t>| {
            if need(p) {
                // binary ops broadcast implicitly; reduce back to the parent's shape
                out.push((p, f().sum_to(self.value(p).shape())));
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                put(a, &|| g);
                put(b, &|| g);
            }
            Op::Sub(a, b) => {
                put(a, &|| g);
                put(b, &|| g.neg());
            }
            Op::Mul(a, b) => {
                put(a, &|| g.mul(self.at(b)));
                put(b, &|| g.mul(self.at(a)));
            }
            Op::Div(a, b) => {
                let bv = self.at(b);
                put(a, &|| g.div(bv));
                put(b, &|| g.mul(y).div(bv).neg());
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.at(a), self.at(b));
                put(a, &|| if ta { bv.matmul_t(g, tb, true) } else { g.matmul_t(bv, false, !tb) });
                put(b, &|| if tb { g.matmul_t(av, true, ta) } else { av.matmul_t(g, !ta, false) });
            }
            Op::Concat(ref xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).shape()[axis];
                    let s0 = start;
                    put(x, &|| g.narrow(axis, s0, len));
                    start += len;
                }
            }
            _ if op.parents().iter().any(|&p| need(p)) => {
                for (p, gp) in self.vjp_unary(id, op, g) {
                    if need(p) {
                        out.push((p, gp));
                    }
                }
            }
            _ => {}
        }
        out
    }

    fn vjp_unary<'t>(&'t self, id: usize, op: &Op, g: Var<'t>) -> Vec<(usize, Var<'t>)> {
        let y = self.at(id);
        match *op {
            Op::Neg(x) => vec![(x, g.neg())],
            Op::Scale(x, c) => vec![(x, g.scale(c))],
            Op::Offset(x) => vec![(x, g)],
            Op::Exp(x) => vec![(x, g.mul(y))],
            Op::Ln(x) => vec![(x, g.div(self.at(x)))],
            Op::Tanh(x) => vec![(x, g.sub(g.mul(y).mul(y)))],
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(x, g.mul(self.constant(mask)))]
            }
            Op::Sqrt(x) => vec![(x, g.div(y).scale(0.5))],
            Op::BroadcastTo(x) => vec![(x, g.sum_to(self.value(x).shape()))],
            Op::SumTo(x) => vec![(x, g.broadcast_to(self.value(x).shape()))],
            Op::Reshape(x) => vec![(x, g.reshape(self.value(x).shape()))],
            Op::Permute(x, ref axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(x, g.permute(&inv))]
            }
            Op::Narrow { x, axis, start } => {
                let full = self.value(x).shape()[axis];
                let len = g.shape()[axis];
                vec![(x, g.pad(axis, start, full - start - len))]
            }
            Op::Pad { x, axis, before } => {
                let len = self.value(x).shape()[axis];
                vec![(x, g.narrow(axis, before, len))]
            }
            _ => unreachable!("binary ops are handled in vjp"),
        }
    }
}

fn shape_panic(e: ShapeError) -> ! {
    panic!("{e}")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Var<'t> {
        let v = self.value().zip_broadcast(&other.value(), f).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, op(self.id, other.id))
    }

    pub fn add(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a / b, Op::Div)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Ln(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.neg().exp().offset(1.0).powi_neg1()
    }

    fn powi_neg1(&self) -> Var<'t> {
        let one = self.tape.scalar(1.0);
        one.div(*self)
    }

    pub fn matmul(&self, o: Var<'t>) -> Var<'t> {
        self.matmul_t(o, false, false)
    }

    /// `op(self) · op(o)`. A rank ≥ 3 left operand against a rank-2 right operand
    /// is applied row-wise over all leading axes.
    pub fn matmul_t(&self, o: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let (sa, sb) = (self.shape(), o.shape());
        if sa.len() > 2 && sb.len() == 2 && !ta && !(sa.len() == 3 && sb.len() == 3) {
            let k = *sa.last().unwrap();
            let rows = sa.iter().product::<usize>() / k.max(1);
            let flat = self.reshape(&[rows, k]);
            let out = flat.matmul_t(o, false, tb);
            let n = out.shape()[1];
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return out.reshape(&shape);
        }
        let v = Tensor::matmul(&self.value(), &o.value(), ta, tb).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, Op::MatMul { a: self.id, b: o.id, ta, tb })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'t> {
        if self.shape() == shape {
            return *self;
        }
        let v = self.value().broadcast_to(shape).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, Op::BroadcastTo(self.id))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var<'t> {
        if self.shape() == shape {
            return *self;
        }
        let v = self.value().sum_to(shape).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, Op::SumTo(self.id))
    }

    /// Sum along `axis` (kept as size 1).
    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let mut s = self.shape();
        s[axis] = 1;
        self.sum_to(&s)
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        if self.shape() == shape {
            return *self;
        }
        let v = self.value().reshape(shape).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let v = self.value().permute(axes).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, Op::Permute(self.id, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Var<'t> {
        let r = self.shape().len();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value().narrow(axis, start, len).unwrap_or_else(|e| shape_panic(e));
        self.tape.push(v, Op::Narrow { x: self.id, axis, start })
    }

    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Var<'t> {
        let v = self.value().pad(axis, before, after);
        self.tape.push(v, Op::Pad { x: self.id, axis, before })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis).unwrap_or_else(|e| shape_panic(e));
        tape.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Log-softmax along the last axis. The max shift is a constant and cancels
    /// in the derivative.
    pub fn log_softmax(&self) -> Var<'t> {
        let shape = self.shape();
        let last = shape.len() - 1;
        let v = self.value();
        let n = shape[last];
        let mut m = v.sum_axis(last);
        for (row, mx) in v.data().chunks(n).zip(m.data_mut()) {
            *mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let shift = self.tape.constant(m);
        let z = self.sub(shift);
        let lse = z.exp().sum_axis(last).ln();
        z.sub(lse)
    }

    pub fn softmax(&self) -> Var<'t> {
        self.log_softmax().exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::from_vec(shape, d.to_vec())
    }

    #[test]
    fn polynomial_first_and_second_derivative() {
        // z = (dy/dx)^3 + y with y = x^2 at x = 2: dz/dx = 24x^2 + 2x = 100
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.square();
        let gx = tape.grad(y, &[x], true)[0];
        assert_eq!(gx.item(), 4.0);
        let z = gx.mul(gx).mul(gx).add(y);
        let dz = tape.grad(z, &[x], false)[0];
        assert!((dz.item() - 100.0).abs() < 1e-10);
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        let tape = Tape::new();
        let a = tape.var(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.var(t(&[3, 2], &[1., 0., 0., 1., 1., 1.]));
        let loss = a.matmul(b).sum();
        let g = tape.grad(loss, &[a, b], false);
        // d/da sum(AB) = 1 · B^T row sums
        assert_eq!(g[0].value().data(), &[1., 1., 2., 1., 1., 2.]);
        assert_eq!(g[1].value().data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn no_path_gives_zero() {
        let tape = Tape::new();
        let a = tape.var(Tensor::scalar(1.0));
        let b = tape.var(Tensor::scalar(3.0));
        let g = tape.grad(a.scale(2.0), &[b], false);
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(!c.exp().requires_grad());
        let v = tape.var(Tensor::scalar(1.0));
        assert!(v.exp().requires_grad());
        assert!(!tape.no_grad(|| v.exp()).requires_grad());
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let tape = Tape::new();
        let x = tape.var(t(&[2, 3], &[1., 2., 3., -1., 0., 1000.]));
        let p = x.softmax();
        let v = p.value();
        assert!((v.data()[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v.data()[5] - 1.0).abs() < 1e-12);
    }
}
