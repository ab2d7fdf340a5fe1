//! Reverse-mode automatic differentiation on an eagerly built graph.
//!
//! Every operation records its inputs and enough metadata to compute a
//! vector-Jacobian product. Crucially, backward passes are themselves
//! expressed through these same differentiable operations, so the result of
//! [`grad`] is another graph node that can be differentiated again. That is
//! what lets a training loss contain a gradient-norm penalty.
//!
//! Graphs are single-threaded (`Rc`-linked) and freed iteratively, so very
//! deep recurrent graphs cannot overflow the stack on drop.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{self, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Operation tag used to dispatch the backward rule.
#[derive(Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f32),
    AddScalar,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Matmul,
    Transpose2,
    Conv3d { pad: [usize; 3] },
    ConvGradWeight { k: [usize; 3], pad: [usize; 3] },
    FlipKernel,
    AvgPool { f: [usize; 3], in_dims: [usize; 3] },
    AvgUnpool { f: [usize; 3] },
    Unpool2x,
    SumPool2x,
    SumAxes { in_shape: Vec<usize> },
    BroadcastTo { in_shape: Vec<usize> },
    Reshape { in_shape: Vec<usize> },
    IndexSelect { axis: usize, idx: Rc<Vec<usize>>, in_len: usize },
    IndexScatterAdd { axis: usize, idx: Rc<Vec<usize>> },
    Concat { axis: usize, sizes: Vec<usize> },
}

struct VarInner {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
    parents: Vec<Var>,
}

impl Drop for VarInner {
    fn drop(&mut self) {
        // Free the upstream graph iteratively; a recursive drop of a long
        // recurrent chain would exhaust the stack.
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(v.inner) {
                stack.append(&mut std::mem::take(&mut inner.parents));
            }
        }
    }
}

/// A node in the autodiff graph: a tensor value plus its provenance.
#[derive(Clone)]
pub struct Var {
    inner: Rc<VarInner>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.inner.id, self.shape())
    }
}

fn new_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Var {
    /// A trainable leaf: gradients flow into it.
    pub fn param(value: Tensor) -> Var {
        Var {
            inner: Rc::new(VarInner {
                id: new_id(),
                value,
                requires_grad: true,
                op: None,
                parents: Vec::new(),
            }),
        }
    }

    /// A constant leaf: treated as fixed data by differentiation.
    pub fn constant(value: Tensor) -> Var {
        Var {
            inner: Rc::new(VarInner {
                id: new_id(),
                value,
                requires_grad: false,
                op: None,
                parents: Vec::new(),
            }),
        }
    }

    pub fn scalar(v: f32) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Nothing upstream is trainable; keep the graph pruned.
            return Var::constant(value);
        }
        Var {
            inner: Rc::new(VarInner { id: new_id(), value, requires_grad, op: Some(op), parents }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> &Tensor {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Single element of a scalar node.
    pub fn item(&self) -> f32 {
        self.inner.value.item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.inner.value.clone())
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        let v = tensor::broadcast_zip(self.value(), other.value(), |a, b| a + b);
        Var::from_op(v, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = tensor::broadcast_zip(self.value(), other.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = tensor::broadcast_zip(self.value(), other.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = tensor::broadcast_zip(self.value(), other.value(), |a, b| a / b);
        Var::from_op(v, Op::Div, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|x| -x), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f32) -> Var {
        Var::from_op(self.value().scale(c), Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        Var::from_op(self.value().map(|x| x + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.value().map(|x| x.max(0.0)), Op::Relu, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f32::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(
            self.value().map(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Sigmoid,
            vec![self.clone()],
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self) -> Var {
        Var::from_op(
            self.value().map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p()),
            Op::Softplus,
            vec![self.clone()],
        )
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f32::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f32::ln), Op::Ln, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f32::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Var {
        let v = tensor::matmul(self.value(), other.value());
        Var::from_op(v, Op::Matmul, vec![self.clone(), other.clone()])
    }

    pub fn t(&self) -> Var {
        Var::from_op(tensor::transpose2(self.value()), Op::Transpose2, vec![self.clone()])
    }

    // -- convolution / pooling ---------------------------------------------

    /// Stride-1 zero-padded 3-D convolution; weight is (Co,Ci,kt,kh,kw).
    pub fn conv3d(&self, w: &Var, pad: [usize; 3]) -> Var {
        let v = tensor::conv3d(self.value(), w.value(), pad);
        Var::from_op(v, Op::Conv3d { pad }, vec![self.clone(), w.clone()])
    }

    pub fn avg_pool3d(&self, f: [usize; 3]) -> Var {
        let in_dims = [self.shape()[2], self.shape()[3], self.shape()[4]];
        let v = tensor::avg_pool3d(self.value(), f);
        Var::from_op(v, Op::AvgPool { f, in_dims }, vec![self.clone()])
    }

    pub fn unpool2x(&self) -> Var {
        Var::from_op(tensor::unpool2x(self.value()), Op::Unpool2x, vec![self.clone()])
    }

    pub fn sum_pool2x(&self) -> Var {
        Var::from_op(tensor::sum_pool2x(self.value()), Op::SumPool2x, vec![self.clone()])
    }

    // -- shape / reduction ---------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape().to_vec();
        let v = self.value().reshape(shape);
        Var::from_op(v, Op::Reshape { in_shape }, vec![self.clone()])
    }

    /// Sum over `axes`, keeping them as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        let in_shape = self.shape().to_vec();
        let v = tensor::sum_axes(self.value(), axes);
        Var::from_op(v, Op::SumAxes { in_shape }, vec![self.clone()])
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&ax| self.shape()[ax]).product();
        self.sum_axes(axes).scale(1.0 / count as f32)
    }

    /// Sum of all elements as a scalar node.
    pub fn sum_all(&self) -> Var {
        let n = self.value().len();
        self.reshape(&[n]).sum_axes(&[0]).reshape(&[])
    }

    pub fn mean_all(&self) -> Var {
        self.sum_all().scale(1.0 / self.value().len() as f32)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let in_shape = self.shape().to_vec();
        let v = tensor::broadcast_to(self.value(), shape);
        Var::from_op(v, Op::BroadcastTo { in_shape }, vec![self.clone()])
    }

    // -- indexing ------------------------------------------------------------

    pub fn index_select(&self, axis: usize, idx: &[usize]) -> Var {
        let in_len = self.shape()[axis];
        let v = tensor::index_select(self.value(), axis, idx);
        Var::from_op(
            v,
            Op::IndexSelect { axis, idx: Rc::new(idx.to_vec()), in_len },
            vec![self.clone()],
        )
    }

    /// Scatter-add into a zero tensor with `out_len` slots along `axis`.
    pub fn index_scatter_add(&self, axis: usize, idx: &[usize], out_len: usize) -> Var {
        let v = tensor::index_scatter_add(self.value(), axis, idx, out_len);
        Var::from_op(
            v,
            Op::IndexScatterAdd { axis, idx: Rc::new(idx.to_vec()) },
            vec![self.clone()],
        )
    }
}

/// Concatenate along `axis`.
pub fn concat(parts: &[Var], axis: usize) -> Var {
    let refs: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
    let v = tensor::concat(&refs, axis);
    let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
    Var::from_op(v, Op::Concat { axis, sizes }, parts.to_vec())
}

/// Sum gradient `g` down to `shape` after broadcasting (same rank).
fn reduce_to(g: &Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        return g.clone();
    }
    let axes: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(ax, &d)| d == 1 && g.shape()[ax] != 1)
        .map(|(ax, _)| ax)
        .collect();
    g.sum_axes(&axes)
}

/// Vector-Jacobian products for one node: gradient w.r.t. each parent.
/// `out` is the node itself (some rules reuse the forward output), `g` is the
/// gradient flowing in from downstream.
fn backward_step(out: &Var, g: &Var) -> Vec<Option<Var>> {
    let op = out.inner.op.as_ref().expect("backward_step on a leaf");
    let parents = &out.inner.parents;
    match op {
        Op::Add => vec![
            Some(reduce_to(g, parents[0].shape())),
            Some(reduce_to(g, parents[1].shape())),
        ],
        Op::Sub => vec![
            Some(reduce_to(g, parents[0].shape())),
            Some(reduce_to(&g.neg(), parents[1].shape())),
        ],
        Op::Mul => vec![
            Some(reduce_to(&g.mul(&parents[1]), parents[0].shape())),
            Some(reduce_to(&g.mul(&parents[0]), parents[1].shape())),
        ],
        Op::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            let ga = reduce_to(&g.div(b), a.shape());
            let gb = reduce_to(&g.mul(a).div(&b.mul(b)).neg(), b.shape());
            vec![Some(ga), Some(gb)]
        }
        Op::Neg => vec![Some(g.neg())],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Relu => {
            // 0/1 mask of the input sign; constant w.r.t. differentiation.
            let mask = Var::constant(parents[0].value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            vec![Some(g.mul(&mask))]
        }
        Op::Tanh => {
            let y2 = out.mul(out);
            vec![Some(g.mul(&y2.neg().add_scalar(1.0)))]
        }
        Op::Sigmoid => {
            let one_minus = out.neg().add_scalar(1.0);
            vec![Some(g.mul(&out.mul(&one_minus)))]
        }
        Op::Softplus => vec![Some(g.mul(&parents[0].sigmoid()))],
        Op::Exp => vec![Some(g.mul(out))],
        Op::Ln => vec![Some(g.div(&parents[0]))],
        Op::Sqrt => vec![Some(g.div(&out.scale(2.0)))],
        Op::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![Some(g.matmul(&b.t())), Some(a.t().matmul(g))]
        }
        Op::Transpose2 => vec![Some(g.t())],
        Op::Conv3d { pad } => {
            let (x, w) = (&parents[0], &parents[1]);
            let k = [w.shape()[2], w.shape()[3], w.shape()[4]];
            let ipad = [k[0] - 1 - pad[0], k[1] - 1 - pad[1], k[2] - 1 - pad[2]];
            let gx = g.conv3d(&flip_kernel(w), ipad);
            let gw = conv_grad_weight(x, g, k, *pad);
            vec![Some(gx), Some(gw)]
        }
        Op::ConvGradWeight { k, pad } => {
            // Node value is weight-shaped; g is weight-shaped too.
            let (x, gy) = (&parents[0], &parents[1]);
            let ipad = [k[0] - 1 - pad[0], k[1] - 1 - pad[1], k[2] - 1 - pad[2]];
            let gx = gy.conv3d(&flip_kernel(g), ipad);
            let ggy = x.conv3d(g, *pad);
            vec![Some(gx), Some(ggy)]
        }
        Op::FlipKernel => vec![Some(flip_kernel(g))],
        Op::AvgPool { f, in_dims } => {
            let v = tensor::avg_unpool3d(g.value(), *f, *in_dims);
            vec![Some(Var::from_op(v, Op::AvgUnpool { f: *f }, vec![g.clone()]))]
        }
        Op::AvgUnpool { f, .. } => vec![Some(g.avg_pool3d(*f))],
        Op::Unpool2x => vec![Some(g.sum_pool2x())],
        Op::SumPool2x => vec![Some(g.unpool2x())],
        Op::SumAxes { in_shape, .. } => vec![Some(g.broadcast_to(in_shape))],
        Op::BroadcastTo { in_shape } => vec![Some(reduce_to(g, in_shape))],
        Op::Reshape { in_shape } => vec![Some(g.reshape(in_shape))],
        Op::IndexSelect { axis, idx, in_len } => {
            vec![Some(g.index_scatter_add(*axis, idx, *in_len))]
        }
        Op::IndexScatterAdd { axis, idx } => vec![Some(g.index_select(*axis, idx))],
        Op::Concat { axis, sizes } => {
            let mut at = 0usize;
            let mut grads = Vec::with_capacity(sizes.len());
            for &s in sizes {
                let idx: Vec<usize> = (at..at + s).collect();
                grads.push(Some(g.index_select(*axis, &idx)));
                at += s;
            }
            grads
        }
    }
}

/// Differentiable kernel flip (see [`tensor::flip_kernel`]).
pub fn flip_kernel(w: &Var) -> Var {
    Var::from_op(tensor::flip_kernel(w.value()), Op::FlipKernel, vec![w.clone()])
}

/// Differentiable gradient-of-convolution-weight (see
/// [`tensor::conv3d_grad_weight`]). Exposed as an op so that backward passes
/// built from it remain differentiable.
pub fn conv_grad_weight(x: &Var, gy: &Var, k: [usize; 3], pad: [usize; 3]) -> Var {
    let v = tensor::conv3d_grad_weight(x.value(), gy.value(), k, pad);
    Var::from_op(v, Op::ConvGradWeight { k, pad }, vec![x.clone(), gy.clone()])
}

/// Gradients of a scalar `output` with respect to each entry of `wrt`.
///
/// The result nodes stay attached to the graph, so they can be combined into
/// further losses and differentiated again. Entries of `wrt` that the output
/// does not depend on get zero gradients.
pub fn grad(output: &Var, wrt: &[Var]) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad requires a scalar output, got {:?}", output.shape());

    // Post-order DFS over the requires-grad subgraph (seen marked at push;
    // valid for DAGs).
    let mut order: Vec<Var> = Vec::new();
    if output.requires_grad() {
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(output.clone(), 0)];
        seen.insert(output.id());
        while let Some((v, mut i)) = stack.pop() {
            let mut descended = false;
            while i < v.inner.parents.len() {
                let p = &v.inner.parents[i];
                i += 1;
                if p.requires_grad() && !seen.contains(&p.id()) {
                    seen.insert(p.id());
                    let child = p.clone();
                    stack.push((v.clone(), i));
                    stack.push((child, 0));
                    descended = true;
                    break;
                }
            }
            if !descended {
                order.push(v);
            }
        }
    }

    let wrt_ids: std::collections::HashMap<u64, usize> =
        wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
    let mut contributions: std::collections::HashMap<u64, Var> = std::collections::HashMap::new();
    contributions.insert(output.id(), Var::constant(Tensor::full(output.shape(), 1.0)));

    for v in order.iter().rev() {
        let g = match contributions.remove(&v.id()) {
            Some(g) => g,
            None => continue, // no downstream influence on the output
        };
        if let Some(&slot) = wrt_ids.get(&v.id()) {
            results[slot] = Some(g.clone());
        }
        if v.inner.op.is_none() {
            continue;
        }
        let pgrads = backward_step(v, &g);
        for (p, pg) in v.inner.parents.iter().zip(pgrads) {
            if !p.requires_grad() {
                continue;
            }
            if let Some(pg) = pg {
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                contributions
                    .entry(p.id())
                    .and_modify(|acc| *acc = acc.add(&pg))
                    .or_insert(pg);
            }
        }
    }

    results
        .into_iter()
        .zip(wrt)
        .map(|(r, v)| r.unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape()))))
        .collect()
}
