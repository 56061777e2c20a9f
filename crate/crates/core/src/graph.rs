//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only record of operations. Every operation on a
//! [`Var`] appends a node holding its value and the ids of its inputs, so the
//! append order is a valid topological order and [`Tape::backward`] can walk
//! it once in reverse.
//!
//! ```
//! use maskunet::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
//! ```
//!
//! Broadcasting is limited to two cases: a single-element operand against any
//! tensor, and an operand whose shape is a suffix of the other's (leading-batch
//! expansion such as `C_out×C_in` against `B×C_out×C_in`, or a bias vector
//! against a batch of rows). Gradients of a broadcast operand are summed over
//! the expanded axes.

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor, PAR_THRESHOLD};

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    AddScalar(Id),
    Relu(Id),
    Sigmoid(Id),
    Exp(Id),
    Log(Id),
    MatMul(Id, Id),
    MatMulNt(Id, Id),
    Bmm(Id, Id),
    Sum(Id),
    Mean(Id),
    SumLast(Id),
    LogSumExpLast(Id),
    Mse(Id, Id),
    Reshape(Id),
    GatherRows(Id, Vec<usize>),
    StraightThrough(Id),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated on `requires_grad` leaves.
    grad: Option<Tensor>,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a leaf that accumulates gradients on [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: Id) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: Id) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op: &'static str, value: Tensor, kind: Op, inputs: &[Id]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates gradients from a single-element `loss` to every reachable
    /// `requires_grad` leaf. Repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut leaf_grads = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.numel() != 1 {
                return Err(Error::Contract(format!(
                    "backward from non-scalar of shape {:?}",
                    root.value.shape()
                )));
            }
            let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(Tensor::ones(root.value.shape()));
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                for (input, contribution) in local_grads(&nodes, node, &g)? {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => add_into(acc, &contribution),
                        slot => *slot = Some(contribution),
                    }
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            match &mut nodes[id].grad {
                Some(acc) => add_into(acc, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Output shape of a broadcast binary op, if the operands are compatible.
fn broadcast_shape(a: &Tensor, b: &Tensor) -> Option<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        Some(sa.to_vec())
    } else if b.numel() == 1 || (sb.len() < sa.len() && sa.ends_with(sb)) {
        Some(sa.to_vec())
    } else if a.numel() == 1 || (sa.len() < sb.len() && sb.ends_with(sa)) {
        Some(sb.to_vec())
    } else {
        None
    }
}

/// `f` over two operands where the shorter one repeats to the longer one's
/// length (the broadcasting rule of [`broadcast_shape`]).
fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    if n == 0 || a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    if a.len() == n {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// Sums `g` (output-shaped) down to an operand of `numel` elements whose
/// values repeat with period `numel` across the output.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n > 0 {
        for chunk in g.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }
    Tensor::new(shape, out).expect("reduced gradient shape")
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(Id, Tensor)>> {
    let val = |id: Id| &*nodes[id].value;
    let out = &*node.value;
    let grads = match node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (a, reduce_to(g, val(a).shape())),
            (b, reduce_to(g, val(b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (a, reduce_to(g, val(a).shape())),
            (b, reduce_to(&g.map(|x| -x), val(b).shape())),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let ga = Tensor::new(g.shape(), zip_broadcast(g.data(), bv.data(), |x, y| x * y))?;
            let gb = Tensor::new(g.shape(), zip_broadcast(g.data(), av.data(), |x, y| x * y))?;
            vec![(a, reduce_to(&ga, av.shape())), (b, reduce_to(&gb, bv.shape()))]
        }
        Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
        Op::AddScalar(a) => vec![(a, g.clone())],
        Op::Relu(a) => {
            let x = val(a);
            let d = Tensor::from_fn(g.shape(), |i| {
                if x.data()[i] > 0.0 {
                    g.data()[i]
                } else {
                    0.0
                }
            });
            vec![(a, d)]
        }
        Op::Sigmoid(a) => {
            let d = Tensor::from_fn(g.shape(), |i| {
                let y = out.data()[i];
                g.data()[i] * y * (1.0 - y)
            });
            vec![(a, d)]
        }
        Op::Exp(a) => vec![(a, Tensor::from_fn(g.shape(), |i| g.data()[i] * out.data()[i]))],
        Op::Log(a) => {
            let x = val(a);
            vec![(a, Tensor::from_fn(g.shape(), |i| g.data()[i] / x.data()[i]))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2("matmul")?;
            let n = bv.shape()[1];
            vec![
                (a, Tensor::new(&[m, k], matmul_nt(g.data(), bv.data(), m, n, k))?),
                (b, Tensor::new(&[k, n], matmul_tn(av.data(), g.data(), m, k, n))?),
            ]
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2("matmul_nt")?;
            let n = bv.shape()[0];
            vec![
                (a, Tensor::new(&[m, k], matmul_nn(g.data(), bv.data(), m, n, k))?),
                (b, Tensor::new(&[n, k], matmul_tn(g.data(), av.data(), m, n, k))?),
            ]
        }
        Op::Bmm(h, w) => {
            let (hv, wv) = (val(h), val(w));
            let (batch, rows, cin) = hv.dims3("bmm")?;
            let cout = wv.shape()[1];
            let gd = g.data();
            let (gh, gw): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..batch)
                .into_par_iter()
                .map(|b| {
                    let gb = &gd[b * rows * cout..(b + 1) * rows * cout];
                    let hb = &hv.data()[b * rows * cin..(b + 1) * rows * cin];
                    let wb = &wv.data()[b * cout * cin..(b + 1) * cout * cin];
                    (
                        matmul_nn(gb, wb, rows, cout, cin),
                        matmul_tn(gb, hb, rows, cout, cin),
                    )
                })
                .unzip();
            vec![
                (h, Tensor::new(hv.shape(), gh.concat())?),
                (w, Tensor::new(wv.shape(), gw.concat())?),
            ]
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            vec![(a, Tensor::full(val(a).shape(), s))]
        }
        Op::Mean(a) => {
            let x = val(a);
            let s = g.data()[0] / x.numel() as f64;
            vec![(a, Tensor::full(x.shape(), s))]
        }
        Op::SumLast(a) => {
            let x = val(a);
            let k = *x.shape().last().unwrap_or(&1);
            vec![(a, Tensor::from_fn(x.shape(), |i| g.data()[i / k]))]
        }
        Op::LogSumExpLast(a) => {
            let x = val(a);
            let k = *x.shape().last().unwrap_or(&1);
            let d = Tensor::from_fn(x.shape(), |i| {
                g.data()[i / k] * (x.data()[i] - out.data()[i / k]).exp()
            });
            vec![(a, d)]
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(a), val(b));
            let scale = 2.0 * g.data()[0] / av.numel() as f64;
            let ga = Tensor::from_fn(av.shape(), |i| scale * (av.data()[i] - bv.data()[i]));
            let gb = ga.map(|x| -x);
            vec![(a, ga), (b, gb)]
        }
        Op::Reshape(a) => vec![(a, g.reshape(val(a).shape())?)],
        Op::GatherRows(table, ref ids) => {
            let t = val(table);
            let width = t.shape()[1];
            let mut d = Tensor::zeros(t.shape());
            for (row, &id) in ids.iter().enumerate() {
                let src = &g.data()[row * width..(row + 1) * width];
                for (dst, s) in d.data_mut()[id * width..(id + 1) * width].iter_mut().zip(src) {
                    *dst += s;
                }
            }
            vec![(table, d)]
        }
        Op::StraightThrough(soft) => vec![(soft, g.clone())],
    };
    Ok(grads)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        kind: fn(Id, Id) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape =
            broadcast_shape(&a, &b).ok_or_else(|| Error::dim(op, a.shape(), b.shape()))?;
        let out = Tensor::new(&shape, zip_broadcast(a.data(), b.data(), f))?;
        self.tape.push(op, out, kind(self.id, other.id), &[self.id, other.id])
    }

    fn unary(self, op: &'static str, kind: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.value().map(f);
        self.tape.push(op, out, kind, &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    /// `self (m×k) · other (k×n)`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let out = Tensor::new(&[m, n], matmul_nn(a.data(), b.data(), m, k, n))?;
        self.tape
            .push("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self (m×k) · otherᵀ` for `other` stored `n×k`; the linear-layer product.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul_nt")?;
        let (n, k2) = b.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
        }
        let out = Tensor::new(&[m, n], matmul_nt(a.data(), b.data(), m, k, n))?;
        self.tape
            .push("matmul_nt", out, Op::MatMulNt(self.id, other.id), &[self.id, other.id])
    }

    /// Batched product of `self` (`B×N×C_in`) with per-sample weights
    /// (`B×C_out×C_in`): `out[b] = self[b] · w[b]ᵀ`.
    pub fn bmm(self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w);
        let (h, wv) = (self.value(), w.value());
        let (batch, rows, cin) = h.dims3("bmm")?;
        let (wb, cout, wcin) = wv.dims3("bmm")?;
        if batch != wb || cin != wcin {
            return Err(Error::dim("bmm", h.shape(), wv.shape()));
        }
        let (hd, wd) = (h.data(), wv.data());
        let one = |b: usize| {
            matmul_nt(
                &hd[b * rows * cin..(b + 1) * rows * cin],
                &wd[b * cout * cin..(b + 1) * cout * cin],
                rows,
                cin,
                cout,
            )
        };
        let parts: Vec<Vec<f64>> = if batch * rows * cin * cout >= PAR_THRESHOLD {
            (0..batch).into_par_iter().map(one).collect()
        } else {
            (0..batch).map(one).collect()
        };
        let out = Tensor::new(&[batch, rows, cout], parts.concat())?;
        self.tape.push("bmm", out, Op::Bmm(self.id, w.id), &[self.id, w.id])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape
            .push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape
            .push("mean", Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Reduces the last axis by summation.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let v = self.value();
        let (lead, k) = split_last(&v, "sum_last")?;
        let data = v.data().chunks(k).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&lead, data)?;
        self.tape.push("sum_last", out, Op::SumLast(self.id), &[self.id])
    }

    /// Numerically stable `log Σ exp` over the last axis.
    pub fn logsumexp_last(self) -> Result<Var<'t>> {
        let v = self.value();
        let (lead, k) = split_last(&v, "logsumexp_last")?;
        let data = v
            .data()
            .chunks(k)
            .map(|c| {
                let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + c.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let out = Tensor::new(&lead, data)?;
        self.tape
            .push("logsumexp_last", out, Op::LogSumExpLast(self.id), &[self.id])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim("mse", a.shape(), b.shape()));
        }
        let s = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        self.tape.push(
            "mse",
            Tensor::scalar(s),
            Op::Mse(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Selects rows of a `R×C` table; gradients scatter-add back.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let (rows, width) = t.dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let out = Tensor::new(&[ids.len(), width], data)?;
        self.tape.push(
            "gather_rows",
            out,
            Op::GatherRows(self.id, ids.to_vec()),
            &[self.id],
        )
    }

    /// Forward value `hard`, gradient routed unchanged to `self`.
    pub fn straight_through(self, hard: Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != hard.shape() {
            return Err(Error::dim("straight_through", v.shape(), hard.shape()));
        }
        self.tape
            .push("straight_through", hard, Op::StraightThrough(self.id), &[self.id])
    }
}

fn split_last(v: &Tensor, op: &'static str) -> Result<(Vec<usize>, usize)> {
    match v.shape().split_last() {
        Some((&k, lead)) if k > 0 => Ok((lead.to_vec(), k)),
        _ => Err(Error::Rank {
            op,
            shape: v.shape().to_vec(),
        }),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
