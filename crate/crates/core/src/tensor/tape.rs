//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to a [`Tape`]. Nodes only reference
//! earlier nodes, so the tape is acyclic by construction and the backward
//! sweep is a single pass over node ids in decreasing order.
//!
//! Broadcasting is restricted to leading dimensions: in a binary op one
//! operand's shape must equal the other's or be a suffix of it (a scalar
//! `[]` is a suffix of every shape).

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::{mm, mm_at, mm_bt, sigmoid, silu, silu_grad, softplus, Tensor};
use crate::error::{Error, Result};

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Index of a node on its tape.
pub type NodeId = usize;

/// Vector-Jacobian product of an operation evaluated outside the tape.
pub trait CustomBackward {
    /// Gradient with respect to each input given the gradient of the output.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<NodeId>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: NodeId,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    IndexRows {
        x: NodeId,
        rows: Vec<usize>,
        width: usize,
    },
    NormL2(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        backward: Rc<dyn CustomBackward>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Tensor {
        match self.grads.get(id) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[id]),
        }
    }

    /// Raw gradient, `None` when untouched.
    pub fn try_get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || b.len() < a.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {a:?} with {b:?} (only leading dimensions broadcast)"),
        ))
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let small: usize = shape.iter().product();
    let mut out = vec![0.0; small];
    for (i, v) in g.data().iter().enumerate() {
        out[i % small] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation evaluated outside the tape whose backward pass is
    /// supplied by `backward`.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        backward: Rc<dyn CustomBackward>,
    ) -> Var<'t> {
        let tracked = inputs.iter().any(|v| v.is_tracked());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(
            output,
            Op::Custom {
                inputs: ids,
                backward,
            },
            tracked,
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let tracked = parts.iter().any(|p| p.is_tracked());
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                widths,
            },
            tracked,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let rows = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&rows, 0)
    }

    /// Applies a primitive by name.
    pub fn apply<'t>(&'t self, prim: &Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let arity = prim.arity();
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::Invalid(format!(
                    "{prim:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        }
        let x = inputs[0];
        Ok(match prim {
            Primitive::MatMul => x.matmul(inputs[1])?,
            Primitive::Add => x.add(inputs[1])?,
            Primitive::Sub => x.sub(inputs[1])?,
            Primitive::Mul => x.mul(inputs[1])?,
            Primitive::Div => x.div(inputs[1])?,
            Primitive::Maximum => x.maximum(inputs[1])?,
            Primitive::Concat { axis } => self.concat(inputs, *axis)?,
            Primitive::Slice { axis, start, end } => x.slice(*axis, *start, *end)?,
            Primitive::Sum => x.sum(),
            Primitive::Mean => x.mean(),
            Primitive::SumAxis { axis } => x.sum_axis(*axis)?,
            Primitive::Exp => x.exp(),
            Primitive::Log => x.log()?,
            Primitive::Tanh => x.tanh(),
            Primitive::Sigmoid => x.sigmoid(),
            Primitive::Softmax => x.softmax()?,
            Primitive::Silu => x.silu(),
            Primitive::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Primitive::Relu => x.relu(),
            Primitive::Softplus => x.softplus(),
            Primitive::LayerNorm => x.layer_norm(super::LAYER_NORM_EPS)?,
            Primitive::NormL1 => x.norm_l1(),
            Primitive::NormL2 => x.norm_l2(),
            Primitive::Transpose => x.transpose()?,
            Primitive::Neg => x.neg(),
            Primitive::Abs => x.abs(),
            Primitive::Sqrt => x.sqrt()?,
        })
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].tracked {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: NodeId| &nodes[i].value;
            let tracked = |i: NodeId| nodes[i].tracked;
            let send = |i: NodeId, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if tracked(i) {
                    accumulate(grads, i, t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, val(*a).shape()), &mut grads);
                    send(*b, reduce_to(&g, val(*b).shape()), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, val(*a).shape()), &mut grads);
                    send(*b, reduce_to(&g.map(|x| -x), val(*b).shape()), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if tracked(*a) {
                        let ga = zip_broadcast("mul", &g, bv, |x, y| x * y)?;
                        send(*a, reduce_to(&ga, av.shape()), &mut grads);
                    }
                    if tracked(*b) {
                        let gb = zip_broadcast("mul", &g, av, |x, y| x * y)?;
                        send(*b, reduce_to(&gb, bv.shape()), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if tracked(*a) {
                        let ga = zip_broadcast("div", &g, bv, |x, y| x / y)?;
                        send(*a, reduce_to(&ga, av.shape()), &mut grads);
                    }
                    if tracked(*b) {
                        // d(a/b)/db = -out / b
                        let q = zip_broadcast("div", out, bv, |o, y| -o / y)?;
                        let gb = zip_broadcast("div", &g, &q, |x, y| x * y)?;
                        send(*b, reduce_to(&gb, bv.shape()), &mut grads);
                    }
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let pick_a = zip_broadcast("maximum", av, bv, |x, y| f64::from(x >= y))?;
                    let ga = zip_broadcast("maximum", &g, &pick_a, |x, p| x * p)?;
                    let gb = zip_broadcast("maximum", &g, &pick_a, |x, p| x * (1.0 - p))?;
                    send(*a, reduce_to(&ga, av.shape()), &mut grads);
                    send(*b, reduce_to(&gb, bv.shape()), &mut grads);
                }
                Op::Neg(a) => send(*a, g.map(|x| -x), &mut grads),
                Op::Scale(a, c) => send(*a, g.map(|x| x * c), &mut grads),
                Op::Offset(a) => send(*a, g.clone(), &mut grads),
                Op::Exp(a) => send(*a, elementwise(&g, out, |gi, y| gi * y), &mut grads),
                Op::Log(a) => send(*a, elementwise(&g, val(*a), |gi, x| gi / x), &mut grads),
                Op::Tanh(a) => send(*a, elementwise(&g, out, |gi, y| gi * (1.0 - y * y)), &mut grads),
                Op::Sigmoid(a) => {
                    send(*a, elementwise(&g, out, |gi, y| gi * y * (1.0 - y)), &mut grads)
                }
                Op::Silu(a) => {
                    send(*a, elementwise(&g, val(*a), |gi, x| gi * silu_grad(x)), &mut grads)
                }
                Op::LeakyRelu(a, slope) => send(
                    *a,
                    elementwise(&g, val(*a), |gi, x| if x > 0.0 { gi } else { gi * slope }),
                    &mut grads,
                ),
                Op::Relu(a) => send(
                    *a,
                    elementwise(&g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
                    &mut grads,
                ),
                Op::Softplus(a) => {
                    send(*a, elementwise(&g, val(*a), |gi, x| gi * sigmoid(x)), &mut grads)
                }
                Op::Abs(a) => send(
                    *a,
                    elementwise(&g, val(*a), |gi, x| gi * x.signum() * f64::from(x != 0.0)),
                    &mut grads,
                ),
                Op::Sqrt(a) => send(
                    *a,
                    elementwise(&g, out, |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 }),
                    &mut grads,
                ),
                Op::MatMul { a, b, m, k, n } => {
                    let (av, bv) = (val(*a), val(*b));
                    if tracked(*a) {
                        let ga = mm_bt(g.data(), bv.data(), *m, *n, *k);
                        send(*a, Tensor::from_parts(av.shape().to_vec(), ga), &mut grads);
                    }
                    if tracked(*b) {
                        let gb = mm_at(av.data(), g.data(), *m, *k, *n);
                        send(*b, Tensor::from_parts(bv.shape().to_vec(), gb), &mut grads);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    send(*a, transpose_data(g.data(), r, c), &mut grads);
                }
                Op::Reshape(a) => {
                    let s = val(*a).shape().to_vec();
                    send(*a, Tensor::from_parts(s, g.data().to_vec()), &mut grads);
                }
                Op::Sum(a) => {
                    send(*a, Tensor::full(val(*a).shape(), g.item()), &mut grads);
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    send(*a, Tensor::full(av.shape(), g.item() / av.len() as f64), &mut grads);
                }
                Op::SumAxis { x, outer, len, inner } => {
                    let mut data = vec![0.0; outer * len * inner];
                    let gd = g.data();
                    for o in 0..*outer {
                        for l in 0..*len {
                            let dst = &mut data[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    send(*x, Tensor::from_parts(val(*x).shape().to_vec(), data), &mut grads);
                }
                Op::Softmax(a) => {
                    let w = *out.shape().last().unwrap();
                    let mut data = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in data
                        .chunks_mut(w)
                        .zip(g.data().chunks(w))
                        .zip(out.data().chunks(w))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = yi * (gi - dot);
                        }
                    }
                    send(*a, Tensor::from_parts(out.shape().to_vec(), data), &mut grads);
                }
                Op::LayerNorm { x, inv_std } => {
                    let w = *out.shape().last().unwrap();
                    let mut data = vec![0.0; g.len()];
                    for (r, ((drow, grow), yrow)) in data
                        .chunks_mut(w)
                        .zip(g.data().chunks(w))
                        .zip(out.data().chunks(w))
                        .enumerate()
                    {
                        let mg = grow.iter().sum::<f64>() / w as f64;
                        let mgy =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = inv_std[r] * (gi - mg - yi * mgy);
                        }
                    }
                    send(*x, Tensor::from_parts(out.shape().to_vec(), data), &mut grads);
                }
                Op::Concat { parts, outer, widths } => {
                    let total: usize = widths.iter().sum();
                    let gd = g.data();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        if tracked(p) {
                            let mut data = Vec::with_capacity(outer * w);
                            for o in 0..*outer {
                                let base = o * total + offset;
                                data.extend_from_slice(&gd[base..base + w]);
                            }
                            send(p, Tensor::from_parts(val(p).shape().to_vec(), data), &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::Slice { x, outer, full, start, len } => {
                    let mut data = vec![0.0; outer * full];
                    let gd = g.data();
                    for o in 0..*outer {
                        data[o * full + start..o * full + start + len]
                            .copy_from_slice(&gd[o * len..(o + 1) * len]);
                    }
                    send(*x, Tensor::from_parts(val(*x).shape().to_vec(), data), &mut grads);
                }
                Op::IndexRows { x, rows, width } => {
                    let xv = val(*x);
                    let mut data = vec![0.0; xv.len()];
                    let gd = g.data();
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..*width {
                            data[r * width + j] += gd[i * width + j];
                        }
                    }
                    send(*x, Tensor::from_parts(xv.shape().to_vec(), data), &mut grads);
                }
                Op::NormL2(a) => {
                    let norm = out.item();
                    let gi = g.item();
                    let av = val(*a);
                    let t = if norm > 0.0 {
                        av.map(|x| gi * x / norm)
                    } else {
                        Tensor::zeros(av.shape())
                    };
                    send(*a, t, &mut grads);
                }
                Op::Custom { inputs, backward } => {
                    let input_grads = backward.backward(&g)?;
                    if input_grads.len() != inputs.len() {
                        return Err(Error::Invalid(format!(
                            "custom op returned {} gradients for {} inputs",
                            input_grads.len(),
                            inputs.len()
                        )));
                    }
                    for (&i, gi) in inputs.iter().zip(input_grads) {
                        if let Some(gi) = gi {
                            if gi.shape() != val(i).shape() {
                                return Err(Error::shape(
                                    "custom backward",
                                    format!("{:?} vs {:?}", gi.shape(), val(i).shape()),
                                ));
                            }
                            send(i, gi, &mut grads);
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
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

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.is_tracked())
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value().map(f);
        self.unary(v, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let v = zip_broadcast(name, &self.value(), &other.value(), f)?;
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(v, op, tracked))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise division; a zero anywhere in the divisor is a domain error.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().iter().any(|&x| x == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "maximum", f64::max, Op::Maximum(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.map(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::Offset(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(x) = self.value().data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("argument {x} is not positive")));
        }
        Ok(self.map(f64::ln, Op::Log(self.id)))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(x) = self.value().data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::domain("sqrt", format!("argument {x} is negative")));
        }
        Ok(self.map(f64::sqrt, Op::Sqrt(self.id)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.map(silu, Op::Silu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.map(
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(softplus, Op::Softplus(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.map(f64::abs, Op::Abs(self.id))
    }

    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand a column vector; the promoted dimension is dropped again.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let (m, k, a_vec) = match av.shape() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            s => return Err(Error::shape("matmul", format!("left operand {s:?} is not 1-D or 2-D"))),
        };
        let (k2, n, b_vec) = match bv.shape() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            s => return Err(Error::shape("matmul", format!("right operand {s:?} is not 1-D or 2-D"))),
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}: inner dimensions differ", av.shape(), bv.shape()),
            ));
        }
        let data = mm(av.data(), bv.data(), m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        let [r, c] = v.shape() else {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", v.shape())));
        };
        let t = transpose_data(v.data(), *r, *c);
        Ok(self.unary(t, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::SumAxis {
                x: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries are exactly zero; a row with no allowed entry is all zero.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t>> {
        if mask.len() != self.value().len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for {:?}", mask.len(), self.shape()),
            ));
        }
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&w) = v.shape().last() else {
            return Err(Error::shape("softmax", "scalar input"));
        };
        let mut data = vec![0.0; v.len()];
        if w > 0 {
            for (r, (drow, xrow)) in data.chunks_mut(w).zip(v.data().chunks(w)).enumerate() {
                let allowed = |j: usize| mask.is_none_or(|m| m[r * w + j]);
                let mx = (0..w)
                    .filter(|&j| allowed(j))
                    .map(|j| xrow[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..w {
                    if allowed(j) {
                        drow[j] = (xrow[j] - mx).exp();
                        z += drow[j];
                    }
                }
                for d in drow.iter_mut() {
                    *d /= z;
                }
            }
        }
        Ok(self.unary(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Softmax(self.id),
        ))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let Some(&w) = v.shape().last() else {
            return Err(Error::shape("layer_norm", "scalar input"));
        };
        let mut data = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.len() / w.max(1));
        for (drow, xrow) in data.chunks_mut(w).zip(v.data().chunks(w)) {
            let mu = xrow.iter().sum::<f64>() / w as f64;
            let var = xrow.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, x) in drow.iter_mut().zip(xrow) {
                *d = (x - mu) * is;
            }
            inv_std.push(is);
        }
        Ok(self.unary(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::LayerNorm { x: self.id, inv_std },
        ))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() || start > end || end > v.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {:?}", v.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let full = len * inner;
        let (s, l) = (start * inner, (end - start) * inner);
        let mut data = Vec::with_capacity(outer * l);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[o * full + s..o * full + s + l]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Slice {
                x: self.id,
                outer,
                full,
                start: s,
                len: l,
            },
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let s = self.shape();
        self.slice(0, i, i + 1)?.reshape(&s[1..])
    }

    /// Gathers rows along the first axis (embedding lookup). Repeated indices
    /// accumulate gradient.
    pub fn index_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() == 0 {
            return Err(Error::shape("index_rows", "scalar input"));
        }
        let n = v.shape()[0];
        let width: usize = v.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("index_rows", format!("row {r} of {n}")));
            }
            data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::IndexRows {
                x: self.id,
                rows: rows.to_vec(),
                width,
            },
        ))
    }

    pub fn norm_l2(self) -> Var<'t> {
        let n = self.value().data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.unary(Tensor::scalar(n), Op::NormL2(self.id))
    }

    pub fn norm_l1(self) -> Var<'t> {
        self.abs().sum()
    }
}

/// Named primitives accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Sum,
    Mean,
    SumAxis { axis: usize },
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softmax,
    Silu,
    LeakyRelu,
    Relu,
    Softplus,
    LayerNorm,
    NormL1,
    NormL2,
    Transpose,
    Neg,
    Abs,
    Sqrt,
}

impl Primitive {
    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Maximum => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax().unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let x = tape.constant(Tensor::vector(vec![3.5, -1.25]));
        assert_eq!(i.matmul(x).unwrap().value().data(), &[3.5, -1.25]);
    }

    #[test]
    fn activations_at_zero() {
        let tape = Tape::new();
        let z = tape.scalar(0.0);
        assert_eq!(z.silu().item(), 0.0);
        assert_eq!(z.sigmoid().item(), 0.5);
        assert_eq!(z.tanh().item(), 0.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0));
        let g = tape.backward(w.sigmoid()).unwrap();
        assert_eq!(g.get(w).item(), 0.25);
    }

    #[test]
    fn softmax_cross_entropy_grad() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let p = logits.softmax().unwrap();
        let loss = p.slice(0, 0, 1).unwrap().log().unwrap().neg().sum();
        let g = tape.backward(loss).unwrap().get(logits);
        // frozen from central differences with step 1e-6
        assert!(close(g.data()[0], -0.5, 1e-9));
        assert!(close(g.data()[1], 0.5, 1e-9));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros(&[3, 2]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
        let one = tape.scalar(1.0);
        assert!(matches!(one.div(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn leading_dim_broadcast_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = a.add(b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = x
            .masked_softmax(&[true, false, true, false, false, false])
            .unwrap()
            .value();
        assert_eq!(y.data()[1], 0.0);
        assert!(close(y.data()[0] + y.data()[2], 1.0, 1e-15));
        assert!(y.data()[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 2.0, 9.0]).unwrap());
        let y = x.layer_norm(super::super::LAYER_NORM_EPS).unwrap().value();
        for r in 0..2 {
            let row = y.row(r);
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn index_rows_accumulates_repeated_rows() {
        let tape = Tape::new();
        let e = tape.leaf(Tensor::zeros(&[3, 2]));
        let y = e.index_rows(&[1, 1, 2]).unwrap().sum();
        let g = tape.backward(y).unwrap().get(e);
        assert_eq!(g.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.slice(1, 2, 3).unwrap();
        assert_eq!(back.value().data(), &[5.0, 6.0]);
        let g = tape.backward(back.sum()).unwrap();
        assert_eq!(g.get(a).data(), &[0.0; 4]);
        assert_eq!(g.get(b).data(), &[1.0, 1.0]);
    }
}
