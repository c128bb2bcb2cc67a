//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in construction order; backward
//! walks the tape in reverse, so every node is visited after all of its
//! consumers. Leaves created with [`Graph::param`] accumulate gradients;
//! leaves created with [`Graph::input`] do not. Binding the same
//! parameter tensor twice returns the same leaf, so shared weights
//! accumulate correctly when a subnetwork is applied several times in
//! one graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Reduction flavors accepted by [`Var::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
    LogSumExp,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    AddScalar {
        a: usize,
    },
    MulScalar {
        a: usize,
        c: f64,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Conv2d {
        input: usize,
        kernels: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: usize,
        kernels: usize,
        stride: usize,
        pad: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        axis: Option<usize>,
        /// flat input index feeding each output slot (min/max only)
        arg: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        a: usize,
    },
    Gather {
        a: usize,
        coords: Vec<(usize, usize)>,
    },
    ReplicateSpatial {
        a: usize,
    },
    BilinearWarp {
        frame: usize,
        flow: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

struct GraphInner {
    nodes: Vec<Node>,
    bindings: HashMap<usize, usize>,
    backward_done: bool,
}

/// Computation tape. Confined to the thread that created it.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                bindings: HashMap::new(),
                backward_done: false,
            })),
        }
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Binds a parameter tensor as a differentiable leaf. Calling again
    /// with the same tensor storage returns the existing leaf.
    pub fn param(&self, value: &Tensor) -> Var {
        let key = value.storage_id();
        if let Some(&id) = self.inner.borrow().bindings.get(&key) {
            return Var {
                graph: self.clone(),
                id,
            };
        }
        let var = self.push(value.clone(), true, Op::Leaf);
        self.inner.borrow_mut().bindings.insert(key, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient accumulated on the leaf bound to this parameter tensor,
    /// if backward reached it.
    pub fn grad_for(&self, t: &Tensor) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let id = *inner.bindings.get(&t.storage_id())?;
        let node = &inner.nodes[id];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape matches value")
        })
    }

    /// Clears all gradients and re-arms backward.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for n in inner.nodes.iter_mut() {
            n.grad = None;
        }
        inner.backward_done = false;
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// The accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape matches value")
        })
    }

    /// Scalar convenience accessor.
    pub fn item(&self) -> f64 {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    fn unary(&self, kind: UnaryKind) -> Var {
        let value = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let data: Vec<f64> = node
                .value
                .data()
                .iter()
                .map(|&x| match kind {
                    UnaryKind::Neg => -x,
                    UnaryKind::Exp => x.exp(),
                    UnaryKind::Log => x.ln(),
                    UnaryKind::Relu => {
                        // propagate NaN so poisoned values reach the loss
                        if x > 0.0 || x.is_nan() {
                            x
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Softplus => kernels::softplus(x),
                })
                .collect();
            Tensor::from_vec(node.value.shape(), data).expect("unary keeps shape")
        };
        let rg = self.requires_grad();
        self.graph.push(value, rg, Op::Unary { kind, a: self.id })
    }

    pub fn neg(&self) -> Var {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(&self) -> Var {
        self.unary(UnaryKind::Exp)
    }
    pub fn log(&self) -> Var {
        self.unary(UnaryKind::Log)
    }
    pub fn relu(&self) -> Var {
        self.unary(UnaryKind::Relu)
    }
    pub fn softplus(&self) -> Var {
        self.unary(UnaryKind::Softplus)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let data: Vec<f64> = node.value.data().iter().map(|&x| x + c).collect();
            Tensor::from_vec(node.value.shape(), data).expect("shape kept")
        };
        let rg = self.requires_grad();
        self.graph.push(value, rg, Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let value = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let data: Vec<f64> = node.value.data().iter().map(|&x| x * c).collect();
            Tensor::from_vec(node.value.shape(), data).expect("shape kept")
        };
        let rg = self.requires_grad();
        self.graph.push(value, rg, Op::MulScalar { a: self.id, c })
    }

    fn binary(&self, other: &Var, kind: BinKind) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::usage("operands belong to different graphs"));
        }
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let side = broadcast_side(a.shape(), b.shape())?;
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            let (out_shape, data) = match side {
                Bcast::None => (
                    a.shape().to_vec(),
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| f(x, y))
                        .collect::<Vec<f64>>(),
                ),
                Bcast::RightSmall(block) => {
                    let bd = b.data();
                    (
                        a.shape().to_vec(),
                        a.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| f(x, bd[i / block]))
                            .collect(),
                    )
                }
                Bcast::LeftSmall(block) => {
                    let ad = a.data();
                    (
                        b.shape().to_vec(),
                        b.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &y)| f(ad[i / block], y))
                            .collect(),
                    )
                }
            };
            let rg = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
            (Tensor::from_vec(&out_shape, data)?, rg)
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Add)
    }
    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Sub)
    }
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Mul)
    }
    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Div)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    /// 2-d matrix product.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::usage("operands belong to different graphs"));
        }
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            if a.rank() != 2 || b.rank() != 2 {
                return Err(Error::shape(format!(
                    "matmul wants rank-2 operands, got {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul inner dims differ: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = kernels::matmul(a.data(), b.data(), m, k, n);
            let rg = inner.nodes[self.id].requires_grad || inner.nodes[other.id].requires_grad;
            (Tensor::from_vec(&[m, n], data)?, rg)
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Cross-correlation of `self` `[C_in,H,W]` with kernels
    /// `[C_out,C_in,kh,kw]`, zero padding, no kernel flip.
    pub fn conv2d(&self, kernels_var: &Var, stride: usize, pad: usize) -> Result<Var> {
        if !self.graph.same_graph(&kernels_var.graph) {
            return Err(Error::usage("operands belong to different graphs"));
        }
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let inp = &inner.nodes[self.id].value;
            let ker = &inner.nodes[kernels_var.id].value;
            let g = conv_geometry(inp.shape(), ker.shape(), stride, pad)?;
            let data = kernels::conv2d(inp.data(), ker.data(), &g);
            let rg =
                inner.nodes[self.id].requires_grad || inner.nodes[kernels_var.id].requires_grad;
            (Tensor::from_vec(&[g.co, g.oh, g.ow], data)?, rg)
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::Conv2d {
                input: self.id,
                kernels: kernels_var.id,
                stride,
                pad,
            },
        ))
    }

    /// Exact adjoint of [`Var::conv2d`] with the same kernels and
    /// hyperparameters: maps `[C_out,H',W']` back to `[C_in,H,W]`.
    pub fn conv_transpose2d(&self, kernels_var: &Var, stride: usize, pad: usize) -> Result<Var> {
        if !self.graph.same_graph(&kernels_var.graph) {
            return Err(Error::usage("operands belong to different graphs"));
        }
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let inp = &inner.nodes[self.id].value;
            let ker = &inner.nodes[kernels_var.id].value;
            let g = conv_transpose_geometry(inp.shape(), ker.shape(), stride, pad)?;
            let data = kernels::conv2d_adjoint_input(inp.data(), ker.data(), &g);
            let rg =
                inner.nodes[self.id].requires_grad || inner.nodes[kernels_var.id].requires_grad;
            (Tensor::from_vec(&[g.ci, g.h, g.w], data)?, rg)
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::ConvTranspose2d {
                input: self.id,
                kernels: kernels_var.id,
                stride,
                pad,
            },
        ))
    }

    /// Reduction over one axis, or over all elements when `axis` is None
    /// (result shape `[1]`). Min/max route gradient to the first
    /// achieving element; logsumexp is max-shifted.
    pub fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let (value, arg, rg) = {
            let inner = self.graph.inner.borrow();
            let t = &inner.nodes[self.id].value;
            let (outer, n, inner_sz, out_shape) = reduce_geometry(t.shape(), axis)?;
            if n == 0 {
                return Err(Error::domain("empty reduction"));
            }
            let x = t.data();
            let mut out = vec![0.0; outer * inner_sz];
            let mut arg = Vec::new();
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += x[(o * n + j) * inner_sz + i];
                            }
                            out[o * inner_sz + i] =
                                if kind == ReduceKind::Mean { s / n as f64 } else { s };
                        }
                    }
                }
                ReduceKind::Min | ReduceKind::Max => {
                    arg = vec![0usize; outer * inner_sz];
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let mut best = x[(o * n) * inner_sz + i];
                            let mut best_j = 0usize;
                            for j in 1..n {
                                let v = x[(o * n + j) * inner_sz + i];
                                let better = match kind {
                                    ReduceKind::Min => v < best,
                                    _ => v > best,
                                };
                                if better {
                                    best = v;
                                    best_j = j;
                                }
                            }
                            out[o * inner_sz + i] = best;
                            arg[o * inner_sz + i] = (o * n + best_j) * inner_sz + i;
                        }
                    }
                }
                ReduceKind::LogSumExp => {
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let mut m = f64::NEG_INFINITY;
                            for j in 0..n {
                                m = m.max(x[(o * n + j) * inner_sz + i]);
                            }
                            let mut s = 0.0;
                            for j in 0..n {
                                s += (x[(o * n + j) * inner_sz + i] - m).exp();
                            }
                            out[o * inner_sz + i] = m + s.ln();
                        }
                    }
                }
            }
            let rg = inner.nodes[self.id].requires_grad;
            (Tensor::from_vec(&out_shape, out)?, arg, rg)
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::Reduce {
                kind,
                a: self.id,
                axis,
                arg,
            },
        ))
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, axis)
    }
    pub fn mean(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, axis)
    }
    pub fn min(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Min, axis)
    }
    pub fn max(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, axis)
    }
    pub fn logsumexp(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::LogSumExp, axis)
    }

    /// Sum of squared elements, as a scalar.
    pub fn sum_squares(&self) -> Result<Var> {
        self.square()?.sum(None)
    }

    /// Concatenates variables along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero parts"))?;
        for p in parts {
            if !first.graph.same_graph(&p.graph) {
                return Err(Error::usage("operands belong to different graphs"));
            }
        }
        let (value, rg) = {
            let inner = first.graph.inner.borrow();
            let shapes: Vec<&[usize]> =
                parts.iter().map(|p| inner.nodes[p.id].value.shape()).collect();
            let rank = shapes[0].len();
            if axis >= rank {
                return Err(Error::shape(format!(
                    "concat axis {axis} out of range for rank {rank}"
                )));
            }
            let mut axis_total = 0usize;
            for s in &shapes {
                if s.len() != rank {
                    return Err(Error::shape("concat rank mismatch"));
                }
                for (d, (&a, &b)) in shapes[0].iter().zip(s.iter()).enumerate() {
                    if d != axis && a != b {
                        return Err(Error::shape(format!(
                            "concat extent mismatch at axis {d}: {:?} vs {:?}",
                            shapes[0], s
                        )));
                    }
                }
                axis_total += s[axis];
            }
            let mut out_shape = shapes[0].to_vec();
            out_shape[axis] = axis_total;
            let outer: usize = out_shape[..axis].iter().product();
            let inner_sz: usize = out_shape[axis + 1..].iter().product();
            let mut data = vec![0.0; outer * axis_total * inner_sz];
            for o in 0..outer {
                let mut off = 0usize;
                for (p, s) in parts.iter().zip(&shapes) {
                    let e = s[axis];
                    let src = inner.nodes[p.id].value.data();
                    let block = e * inner_sz;
                    data[(o * axis_total + off) * inner_sz..(o * axis_total + off) * inner_sz + block]
                        .copy_from_slice(&src[o * block..(o + 1) * block]);
                    off += e;
                }
            }
            let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
            (Tensor::from_vec(&out_shape, data)?, rg)
        };
        Ok(first.graph.push(
            value,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Restricts `axis` to `start..start+len`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let t = &inner.nodes[self.id].value;
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(Error::shape(format!(
                    "narrow axis {axis} out of range for shape {shape:?}"
                )));
            }
            if len == 0 || start + len > shape[axis] {
                return Err(Error::shape(format!(
                    "narrow {start}..{} outside axis extent {}",
                    start + len,
                    shape[axis]
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner_sz: usize = shape[axis + 1..].iter().product();
            let e = shape[axis];
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            let mut data = vec![0.0; outer * len * inner_sz];
            for o in 0..outer {
                let src = (o * e + start) * inner_sz;
                let dst = o * len * inner_sz;
                data[dst..dst + len * inner_sz]
                    .copy_from_slice(&t.data()[src..src + len * inner_sz]);
            }
            (
                Tensor::from_vec(&out_shape, data)?,
                inner.nodes[self.id].requires_grad,
            )
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::Narrow {
                a: self.id,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let t = &inner.nodes[self.id].value;
            (t.reshaped(shape)?, inner.nodes[self.id].requires_grad)
        };
        Ok(self.graph.push(value, rg, Op::Reshape { a: self.id }))
    }

    /// Gathers feature columns of a `[C,H,W]` map at (row, col)
    /// coordinates, producing `[J,C]`. Out-of-bounds coordinates are an
    /// input error, never clamped.
    pub fn gather_at(&self, coords: &[(usize, usize)]) -> Result<Var> {
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let t = &inner.nodes[self.id].value;
            let shape = t.shape();
            if shape.len() != 3 {
                return Err(Error::shape(format!(
                    "gather_at wants a [C,H,W] map, got {shape:?}"
                )));
            }
            if coords.is_empty() {
                return Err(Error::input("gather_at with no coordinates"));
            }
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            for &(r, q) in coords {
                if r >= h || q >= w {
                    return Err(Error::input(format!(
                        "gather coordinate ({r},{q}) outside {h}x{w} map"
                    )));
                }
            }
            let mut data = vec![0.0; coords.len() * c];
            for (j, &(r, q)) in coords.iter().enumerate() {
                for ch in 0..c {
                    data[j * c + ch] = t.data()[ch * h * w + r * w + q];
                }
            }
            (
                Tensor::from_vec(&[coords.len(), c], data)?,
                inner.nodes[self.id].requires_grad,
            )
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::Gather {
                a: self.id,
                coords: coords.to_vec(),
            },
        ))
    }

    /// Broadcasts a `[d]` vector to `[d,h,w]`, the same vector at every
    /// spatial location.
    pub fn replicate_spatial(&self, h: usize, w: usize) -> Result<Var> {
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let t = &inner.nodes[self.id].value;
            if t.rank() != 1 {
                return Err(Error::shape(format!(
                    "replicate_spatial wants a vector, got {:?}",
                    t.shape()
                )));
            }
            if h == 0 || w == 0 {
                return Err(Error::shape("replicate_spatial with zero extent"));
            }
            let d = t.shape()[0];
            let mut data = vec![0.0; d * h * w];
            for dd in 0..d {
                let v = t.data()[dd];
                for i in 0..h * w {
                    data[dd * h * w + i] = v;
                }
            }
            (
                Tensor::from_vec(&[d, h, w], data)?,
                inner.nodes[self.id].requires_grad,
            )
        };
        Ok(self
            .graph
            .push(value, rg, Op::ReplicateSpatial { a: self.id }))
    }

    /// Warps `self` (`[C,H,W]`) backward along `flow` (`[2,H,W]`, row and
    /// column displacements): each output pixel bilinearly samples the
    /// frame at its own position plus the flow, clamped to the border.
    pub fn bilinear_warp(&self, flow: &Var) -> Result<Var> {
        if !self.graph.same_graph(&flow.graph) {
            return Err(Error::usage("operands belong to different graphs"));
        }
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let frame = &inner.nodes[self.id].value;
            let fl = &inner.nodes[flow.id].value;
            let fs = frame.shape();
            if fs.len() != 3 {
                return Err(Error::shape(format!(
                    "bilinear_warp frame wants [C,H,W], got {fs:?}"
                )));
            }
            let (c, h, w) = (fs[0], fs[1], fs[2]);
            if fl.shape() != [2, h, w] {
                return Err(Error::shape(format!(
                    "flow shape {:?} does not match frame {fs:?}",
                    fl.shape()
                )));
            }
            let data = kernels::bilinear_warp(frame.data(), fl.data(), c, h, w);
            let rg = inner.nodes[self.id].requires_grad || inner.nodes[flow.id].requires_grad;
            (Tensor::from_vec(&[c, h, w], data)?, rg)
        };
        Ok(self.graph.push(
            value,
            rg,
            Op::BilinearWarp {
                frame: self.id,
                flow: flow.id,
            },
        ))
    }

    /// Propagates d(self)/d(leaf) into every parameter leaf. `self` must
    /// be scalar, and the graph must not have run backward since the
    /// last [`Graph::reset_grads`].
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.graph.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::usage(
                "backward already ran on this graph; call reset_grads first",
            ));
        }
        if inner.nodes[self.id].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar root, got shape {:?}",
                inner.nodes[self.id].value.shape()
            )));
        }
        inner.backward_done = true;
        if !inner.nodes[self.id].requires_grad {
            return Ok(());
        }
        inner.nodes[self.id].grad = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            if !inner.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = inner.nodes[id].grad.clone() else {
                continue;
            };
            let op = inner.nodes[id].op.clone();
            propagate(&mut inner.nodes, id, &g, &op);
        }
        Ok(())
    }
}

enum Bcast {
    None,
    /// rhs is the smaller operand, repeated over blocks of this size
    RightSmall(usize),
    /// lhs is the smaller operand
    LeftSmall(usize),
}

/// Shapes combine when equal, or when one operand matches a leading
/// prefix of the other and is extent-1 on every remaining (trailing)
/// axis. Anything else is a shape error.
fn broadcast_side(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::None);
    }
    if let Some(block) = trailing_block(a, b) {
        return Ok(Bcast::RightSmall(block));
    }
    if let Some(block) = trailing_block(b, a) {
        return Ok(Bcast::LeftSmall(block));
    }
    Err(Error::shape(format!(
        "shapes {a:?} and {b:?} neither match nor broadcast on trailing-1 axes"
    )))
}

/// If `small` equals `full` on a leading prefix and is 1 on all
/// remaining axes, returns the block size each `small` element covers.
fn trailing_block(full: &[usize], small: &[usize]) -> Option<usize> {
    if full.len() != small.len() {
        return None;
    }
    let mut split = full.len();
    for i in 0..full.len() {
        if full[i] != small[i] {
            split = i;
            break;
        }
    }
    if split == full.len() {
        return None; // equal shapes, handled earlier
    }
    if small[split..].iter().any(|&d| d != 1) {
        return None;
    }
    Some(full[split..].iter().product())
}

fn conv_geometry(inp: &[usize], ker: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::usage("conv stride must be >= 1"));
    }
    if inp.len() != 3 || ker.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d wants input [C,H,W] and kernels [Co,Ci,kh,kw], got {inp:?} and {ker:?}"
        )));
    }
    let (ci, h, w) = (inp[0], inp[1], inp[2]);
    let (co, kci, kh, kw) = (ker[0], ker[1], ker[2], ker[3]);
    if ci != kci {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {ci} vs kernels {kci}"
        )));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
        return Err(Error::shape(format!(
            "non-integral conv output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom {
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

fn conv_transpose_geometry(
    inp: &[usize],
    ker: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::usage("conv stride must be >= 1"));
    }
    if inp.len() != 3 || ker.len() != 4 {
        return Err(Error::shape(format!(
            "conv_transpose2d wants input [Co,H',W'] and kernels [Co,Ci,kh,kw], got {inp:?} and {ker:?}"
        )));
    }
    let (co_in, oh, ow) = (inp[0], inp[1], inp[2]);
    let (co, ci, kh, kw) = (ker[0], ker[1], ker[2], ker[3]);
    if co_in != co {
        return Err(Error::shape(format!(
            "conv_transpose2d channel mismatch: input {co_in} vs kernels {co}"
        )));
    }
    let h = (oh - 1) * stride + kh;
    let w = (ow - 1) * stride + kw;
    if h < 2 * pad + 1 || w < 2 * pad + 1 {
        return Err(Error::shape(
            "conv_transpose2d output collapses under this padding",
        ));
    }
    let (h, w) = (h - 2 * pad, w - 2 * pad);
    Ok(ConvGeom {
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Splits a shape around the reduction axis. Returns
/// (outer, n, inner, output shape).
fn reduce_geometry(
    shape: &[usize],
    axis: Option<usize>,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, vec![1])),
        Some(k) => {
            if k >= shape.len() {
                return Err(Error::shape(format!(
                    "reduce axis {k} out of range for shape {shape:?}"
                )));
            }
            let outer: usize = shape[..k].iter().product();
            let inner: usize = shape[k + 1..].iter().product();
            let mut out: Vec<usize> = shape.to_vec();
            out.remove(k);
            if out.is_empty() {
                out.push(1);
            }
            Ok((outer, shape[k], inner, out))
        }
    }
}

fn accumulate(nodes: &mut [Node], target: usize, contrib: Vec<f64>) {
    if !nodes[target].requires_grad {
        return;
    }
    match nodes[target].grad {
        Some(ref mut g) => {
            for (gi, ci) in g.iter_mut().zip(&contrib) {
                *gi += ci;
            }
        }
        None => nodes[target].grad = Some(contrib),
    }
}

fn propagate(nodes: &mut [Node], id: usize, g: &[f64], op: &Op) {
    match *op {
        Op::Leaf => {}
        Op::Unary { kind, a } => {
            let contrib: Vec<f64> = match kind {
                UnaryKind::Neg => g.iter().map(|&v| -v).collect(),
                UnaryKind::Exp => {
                    let out = nodes[id].value.data();
                    g.iter().zip(out).map(|(&gv, &ov)| gv * ov).collect()
                }
                UnaryKind::Log => {
                    let av = nodes[a].value.data();
                    g.iter().zip(av).map(|(&gv, &x)| gv / x).collect()
                }
                UnaryKind::Relu => {
                    let av = nodes[a].value.data();
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect()
                }
                UnaryKind::Softplus => {
                    let av = nodes[a].value.data();
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| gv * kernels::sigmoid(x))
                        .collect()
                }
            };
            accumulate(nodes, a, contrib);
        }
        Op::AddScalar { a } => accumulate(nodes, a, g.to_vec()),
        Op::MulScalar { a, c } => {
            accumulate(nodes, a, g.iter().map(|&v| v * c).collect());
        }
        Op::Binary { kind, a, b } => {
            let ashape = nodes[a].value.shape().to_vec();
            let bshape = nodes[b].value.shape().to_vec();
            let side = broadcast_side(&ashape, &bshape).expect("checked at forward");
            let (ga_full, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                BinKind::Add => (g.to_vec(), g.to_vec()),
                BinKind::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                BinKind::Mul => {
                    let av = expand(nodes[a].value.data(), &side, true, g.len());
                    let bv = expand(nodes[b].value.data(), &side, false, g.len());
                    (
                        g.iter().zip(&bv).map(|(&gv, &y)| gv * y).collect(),
                        g.iter().zip(&av).map(|(&gv, &x)| gv * x).collect(),
                    )
                }
                BinKind::Div => {
                    let av = expand(nodes[a].value.data(), &side, true, g.len());
                    let bv = expand(nodes[b].value.data(), &side, false, g.len());
                    (
                        g.iter().zip(&bv).map(|(&gv, &y)| gv / y).collect(),
                        g.iter()
                            .zip(av.iter().zip(&bv))
                            .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                            .collect(),
                    )
                }
            };
            accumulate(nodes, a, shrink(ga_full, &side, true));
            accumulate(nodes, b, shrink(gb_full, &side, false));
        }
        Op::Matmul { a, b } => {
            let (m, k) = {
                let s = nodes[a].value.shape();
                (s[0], s[1])
            };
            let n = nodes[b].value.shape()[1];
            let ga = kernels::matmul_nt(g, nodes[b].value.data(), m, n, k);
            let gb = kernels::matmul_tn(nodes[a].value.data(), g, k, m, n);
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Conv2d {
            input,
            kernels: ker,
            stride,
            pad,
        } => {
            let geom = conv_geometry(
                nodes[input].value.shape(),
                nodes[ker].value.shape(),
                stride,
                pad,
            )
            .expect("checked at forward");
            let gin = kernels::conv2d_adjoint_input(g, nodes[ker].value.data(), &geom);
            let gker = kernels::conv2d_grad_kernels(nodes[input].value.data(), g, &geom);
            accumulate(nodes, input, gin);
            accumulate(nodes, ker, gker);
        }
        Op::ConvTranspose2d {
            input,
            kernels: ker,
            stride,
            pad,
        } => {
            let geom = conv_transpose_geometry(
                nodes[input].value.shape(),
                nodes[ker].value.shape(),
                stride,
                pad,
            )
            .expect("checked at forward");
            let gin = kernels::conv2d(g, nodes[ker].value.data(), &geom);
            let gker = kernels::conv2d_grad_kernels(g, nodes[input].value.data(), &geom);
            accumulate(nodes, input, gin);
            accumulate(nodes, ker, gker);
        }
        Op::Reduce {
            kind,
            a,
            axis,
            ref arg,
        } => {
            let ashape = nodes[a].value.shape().to_vec();
            let (outer, n, inner_sz, _) = reduce_geometry(&ashape, axis).expect("checked");
            let mut contrib = vec![0.0; nodes[a].value.len()];
            match kind {
                ReduceKind::Sum => {
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let gv = g[o * inner_sz + i];
                            for j in 0..n {
                                contrib[(o * n + j) * inner_sz + i] += gv;
                            }
                        }
                    }
                }
                ReduceKind::Mean => {
                    let scale = 1.0 / n as f64;
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let gv = g[o * inner_sz + i] * scale;
                            for j in 0..n {
                                contrib[(o * n + j) * inner_sz + i] += gv;
                            }
                        }
                    }
                }
                ReduceKind::Min | ReduceKind::Max => {
                    for (slot, &src) in arg.iter().enumerate() {
                        contrib[src] += g[slot];
                    }
                }
                ReduceKind::LogSumExp => {
                    let x = nodes[a].value.data();
                    let out = nodes[id].value.data();
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let gv = g[o * inner_sz + i];
                            let ov = out[o * inner_sz + i];
                            for j in 0..n {
                                let idx = (o * n + j) * inner_sz + i;
                                contrib[idx] += gv * (x[idx] - ov).exp();
                            }
                        }
                    }
                }
            }
            accumulate(nodes, a, contrib);
        }
        Op::Concat { ref parts, axis } => {
            let shapes: Vec<Vec<usize>> = parts
                .iter()
                .map(|&p| nodes[p].value.shape().to_vec())
                .collect();
            let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
            let outer: usize = shapes[0][..axis].iter().product();
            let inner_sz: usize = shapes[0][axis + 1..].iter().product();
            let mut off = 0usize;
            for (&p, s) in parts.iter().zip(&shapes) {
                let e = s[axis];
                let mut contrib = vec![0.0; nodes[p].value.len()];
                for o in 0..outer {
                    let src = (o * total_axis + off) * inner_sz;
                    let dst = o * e * inner_sz;
                    contrib[dst..dst + e * inner_sz]
                        .copy_from_slice(&g[src..src + e * inner_sz]);
                }
                accumulate(nodes, p, contrib);
                off += e;
            }
        }
        Op::Narrow {
            a,
            axis,
            start,
            len,
        } => {
            let ashape = nodes[a].value.shape().to_vec();
            let outer: usize = ashape[..axis].iter().product();
            let inner_sz: usize = ashape[axis + 1..].iter().product();
            let e = ashape[axis];
            let mut contrib = vec![0.0; nodes[a].value.len()];
            for o in 0..outer {
                let dst = (o * e + start) * inner_sz;
                let src = o * len * inner_sz;
                contrib[dst..dst + len * inner_sz].copy_from_slice(&g[src..src + len * inner_sz]);
            }
            accumulate(nodes, a, contrib);
        }
        Op::Reshape { a } => accumulate(nodes, a, g.to_vec()),
        Op::Gather { a, ref coords } => {
            let shape = nodes[a].value.shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut contrib = vec![0.0; nodes[a].value.len()];
            for (j, &(r, q)) in coords.iter().enumerate() {
                for ch in 0..c {
                    contrib[ch * h * w + r * w + q] += g[j * c + ch];
                }
            }
            accumulate(nodes, a, contrib);
        }
        Op::ReplicateSpatial { a } => {
            let d = nodes[a].value.shape()[0];
            let hw = nodes[id].value.len() / d;
            let mut contrib = vec![0.0; d];
            for dd in 0..d {
                let mut s = 0.0;
                for i in 0..hw {
                    s += g[dd * hw + i];
                }
                contrib[dd] = s;
            }
            accumulate(nodes, a, contrib);
        }
        Op::BilinearWarp { frame, flow } => {
            let shape = nodes[frame].value.shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (gframe, gflow) = kernels::bilinear_warp_grads(
                nodes[frame].value.data(),
                nodes[flow].value.data(),
                g,
                c,
                h,
                w,
            );
            accumulate(nodes, frame, gframe);
            accumulate(nodes, flow, gflow);
        }
    }
}

/// Materializes one operand of a broadcast binary op at full length.
fn expand(data: &[f64], side: &Bcast, is_left: bool, full_len: usize) -> Vec<f64> {
    match (side, is_left) {
        (Bcast::None, _) | (Bcast::RightSmall(_), true) | (Bcast::LeftSmall(_), false) => {
            data.to_vec()
        }
        (Bcast::RightSmall(block), false) | (Bcast::LeftSmall(block), true) => {
            (0..full_len).map(|i| data[i / block]).collect()
        }
    }
}

/// Reduces a full-length gradient back to the broadcast operand's size.
fn shrink(g: Vec<f64>, side: &Bcast, is_left: bool) -> Vec<f64> {
    let block = match (side, is_left) {
        (Bcast::None, _) | (Bcast::RightSmall(_), true) | (Bcast::LeftSmall(_), false) => {
            return g
        }
        (Bcast::RightSmall(b), false) | (Bcast::LeftSmall(b), true) => *b,
    };
    let mut out = vec![0.0; g.len() / block];
    for (i, v) in g.iter().enumerate() {
        out[i / block] += v;
    }
    out
}
