use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Records a forward pass for reverse-mode differentiation.
///
/// A tape is single-threaded and is meant to live for one forward/backward
/// pass; call [`Tape::reset`] (or drop it) before recording the next one.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Sum(usize),
    SumAxis(usize, usize, bool),
    Softmax(usize, usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    Square(usize),
    LayerNorm(usize, Vec<f64>),
    IndexSelect(usize, usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Bilinear(usize, usize),
}

/// Handle to a value recorded on a [`Tape`].
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
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        inner.leaf_grads.push(None);
        Var { tape: self, id }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and accumulated gradient.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.leaf_grads.clear();
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.inner.borrow().leaf_grads.get(var.id).cloned().flatten()
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(out, Op::Concat(ids, axis), rg))
    }

    /// Differentiable bilinear sampling of a `[H, W, C]` grid at `[K, 2]` `(x, y)`
    /// coordinates. Out-of-bounds rows are zero and flagged `false`.
    pub fn bilinear_sample<'t>(&'t self, grid: Var<'t>, coords: Var<'t>) -> Result<(Var<'t>, Vec<bool>)> {
        let s = kernels::bilinear_sample(&grid.value(), &coords.value())?;
        let rg = self.requires(&[grid.id, coords.id]);
        Ok((self.push(s.values, Op::Bilinear(grid.id, coords.id), rg), s.in_bounds))
    }

    /// Runs reverse accumulation from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let inner = self.inner.borrow();
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(loss_value.shape()));
        let mut leaf_updates = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| inner.nodes[i].value.as_ref();
            let mut send = |i: usize, gi: Tensor| {
                if !inner.nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            };
            match &node.op {
                Op::Leaf => leaf_updates.push((id, g)),
                Op::Constant => {}
                Op::Add(a, b) => {
                    send(*a, kernels::sum_to_shape(&g, val(*a).shape()));
                    send(*b, kernels::sum_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, kernels::sum_to_shape(&g, val(*a).shape()));
                    send(*b, kernels::sum_to_shape(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = kernels::broadcast_binary("mul", &g, vb, |x, y| x * y)?;
                    let gb = kernels::broadcast_binary("mul", &g, va, |x, y| x * y)?;
                    send(*a, kernels::sum_to_shape(&ga, va.shape()));
                    send(*b, kernels::sum_to_shape(&gb, vb.shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = kernels::broadcast_binary("div", &g, vb, |x, y| x / y)?;
                    // d(a/b)/db = -out / b
                    let gb = kernels::broadcast_binary("div", &g, &node.value, |x, y| -x * y)?;
                    let gb = kernels::broadcast_binary("div", &gb, vb, |x, y| x / y)?;
                    send(*a, kernels::sum_to_shape(&ga, va.shape()));
                    send(*b, kernels::sum_to_shape(&gb, vb.shape()));
                }
                Op::Neg(a) => send(*a, g.map(|x| -x)),
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::AddScalar(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), &g);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::Permute(a, perm) => {
                    send(*a, kernels::permute(&g, &kernels::inverse_permutation(perm))?)
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    send(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::SumAxis(a, axis, keepdim) => {
                    let shape = val(*a).shape().to_vec();
                    let mut kept = shape.clone();
                    kept[*axis] = 1;
                    let gk = if *keepdim { g } else { g.reshape(&kept)? };
                    send(*a, kernels::broadcast_binary("sum_axis", &Tensor::zeros(&shape), &gk, |_, y| y)?);
                }
                Op::Softmax(a, axis) => send(*a, kernels::softmax_backward(&node.value, &g, *axis)),
                Op::Exp(a) => send(*a, zip_map(&g, &node.value, |g, y| g * y)),
                Op::Log(a) => send(*a, zip_map(&g, val(*a), |g, x| g / x)),
                Op::Sqrt(a) => send(*a, zip_map(&g, &node.value, |g, y| 0.5 * g / y)),
                Op::Sin(a) => send(*a, zip_map(&g, val(*a), |g, x| g * x.cos())),
                Op::Cos(a) => send(*a, zip_map(&g, val(*a), |g, x| -g * x.sin())),
                Op::Relu(a) => send(*a, zip_map(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Square(a) => send(*a, zip_map(&g, val(*a), |g, x| 2.0 * g * x)),
                Op::LayerNorm(a, inv_std) => {
                    send(*a, kernels::layer_norm_backward(&node.value, inv_std, &g))
                }
                Op::IndexSelect(a, axis, idx) => {
                    send(*a, kernels::index_select_backward(val(*a).shape(), *axis, idx, &g))
                }
                Op::Concat(ids, axis) => {
                    let mut start = 0;
                    for &p in ids {
                        let extent = val(p).shape()[*axis];
                        let idx: Vec<usize> = (start..start + extent).collect();
                        send(p, kernels::index_select(&g, *axis, &idx)?);
                        start += extent;
                    }
                }
                Op::Bilinear(grid, coords) => {
                    let (gg, gc) = kernels::bilinear_backward(val(*grid), val(*coords), &g);
                    send(*grid, gg);
                    send(*coords, gc);
                }
            }
        }
        drop(inner);

        let mut inner = self.inner.borrow_mut();
        for (id, g) in leaf_updates {
            match &mut inner.leaf_grads[id] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = kernels::broadcast_binary(name, &self.value(), &other.value(), f)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.unary(Op::Neg(self.id), v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = kernels::permute(&self.value(), perm)?;
        Ok(self.unary(Op::Permute(self.id, perm.to_vec()), v))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let v = kernels::sum_axis(&self.value(), axis, keepdim)?;
        Ok(self.unary(Op::SumAxis(self.id, axis, keepdim), v))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = kernels::softmax(&self.value(), axis)?;
        Ok(self.unary(Op::Softmax(self.id, axis), v))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(f64::sqrt);
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn sin(self) -> Var<'t> {
        let v = self.value().map(f64::sin);
        self.unary(Op::Sin(self.id), v)
    }

    pub fn cos(self) -> Var<'t> {
        let v = self.value().map(f64::cos);
        self.unary(Op::Cos(self.id), v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    /// Normalizes over the last axis (no affine part).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let (v, inv_std) = kernels::layer_norm(&self.value(), eps)?;
        Ok(self.unary(Op::LayerNorm(self.id, inv_std), v))
    }

    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let v = kernels::index_select(&self.value(), axis, indices)?;
        Ok(self.unary(Op::IndexSelect(self.id, axis, indices.to_vec()), v))
    }
}
