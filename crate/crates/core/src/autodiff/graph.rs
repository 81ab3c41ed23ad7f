use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Shape rules:
///
/// * element-wise binary ops and `Dot` need identical shapes (use
///   `Broadcast` explicitly);
/// * `MatMul` is 2-d only, `Transpose` likewise;
/// * `SumAxis`, `L2Norm` and `LogSumExp` keep the reduced axis with extent 1;
/// * `Sum`, `Mean` and `Dot` produce a rank-0 scalar.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Neg,
    Scale(f64),
    Relu,
    Sin,
    Cos,
    Exp,
    Log,
    Square,
    Sqrt,
    Clamp01,
    Sum,
    Mean,
    SumAxis(usize),
    L2Norm(usize),
    LogSumExp(usize),
    Concat(usize),
    Reshape(Vec<usize>),
    Broadcast(Vec<usize>),
    Dot,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Clamp01 => "clamp01",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::L2Norm(_) => "l2norm",
            OpKind::LogSumExp(_) => "logsumexp",
            OpKind::Concat(_) => "concat",
            OpKind::Reshape(_) => "reshape",
            OpKind::Broadcast(_) => "broadcast",
            OpKind::Dot => "dot",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul | OpKind::Dot => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Constant,
    Input,
    Param,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    origin: Origin,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in creation order, so the node
/// list is already a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, origin: Origin, parents: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Origin::Constant, Vec::new(), false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// An unnamed differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Origin::Input, Vec::new(), true)
    }

    /// A named differentiable leaf; its gradient is reported by name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Origin::Param, Vec::new(), true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_of(&self, v: Var) -> Option<&OpKind> {
        match &self.nodes[v.0].origin {
            Origin::Op(k) => Some(k),
            _ => None,
        }
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Apply a primitive op to primal values.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid("concat of zero inputs"));
        }
        let value = self.compute(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Origin::Op(kind), inputs.to_vec(), requires_grad))
    }

    fn compute(&self, kind: &OpKind, inputs: &[Var]) -> Result<Tensor<T>> {
        let x = &self.nodes[inputs[0].0].value;
        let y = || &self.nodes[inputs[1].0].value;
        let out = match kind {
            OpKind::Add => x.add(y())?,
            OpKind::Sub => x.sub(y())?,
            OpKind::Mul => x.mul(y())?,
            OpKind::Div => x.zip_map(y(), "div", |a, b| a / b)?,
            OpKind::MatMul => x.matmul(y())?,
            OpKind::Transpose => x.transpose()?,
            OpKind::Neg => x.map(|&v| -v),
            OpKind::Scale(c) => x.scale(T::lit(*c)),
            OpKind::Relu => x.map(|&v| if v > T::zero() { v } else { T::zero() }),
            OpKind::Sin => x.map(|v| v.sin()),
            OpKind::Cos => x.map(|v| v.cos()),
            OpKind::Exp => x.map(|v| v.exp()),
            OpKind::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v > T::zero())) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.map(|v| v.ln())
            }
            OpKind::Square => x.map(|&v| v * v),
            OpKind::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v >= T::zero())) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                x.map(|v| v.sqrt())
            }
            OpKind::Clamp01 => x.map(|&v| v.max(T::zero()).min(T::one())),
            OpKind::Sum => Tensor::scalar(x.sum()),
            OpKind::Mean => Tensor::scalar(x.mean()),
            OpKind::SumAxis(ax) => x.sum_axis(*ax)?,
            OpKind::L2Norm(ax) => x.map(|&v| v * v).sum_axis(*ax)?.map(|v| v.sqrt()),
            OpKind::LogSumExp(ax) => logsumexp_axis(x, *ax)?,
            OpKind::Concat(ax) => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                Tensor::concat(&parts, *ax)?
            }
            OpKind::Reshape(shape) => x.reshape(shape)?,
            OpKind::Broadcast(shape) => x.broadcast_to(shape)?,
            OpKind::Dot => Tensor::scalar(
                x.mul(y())
                    .map_err(|_| Error::shape("dot", x.shape(), y().shape()))?
                    .sum(),
            ),
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::shape("backward (root must be scalar)", root_value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));
        let mut leaf_grads: BTreeMap<usize, Tensor<T>> = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let kind = match &node.origin {
                Origin::Op(k) => k,
                Origin::Input | Origin::Param => {
                    leaf_grads.insert(i, g);
                    continue;
                }
                Origin::Constant => continue,
            };
            let contributions = self.vjp(kind, node, &g)?;
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = leaf_grads
                    .get(&v.0)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            leaves: leaf_grads,
            params,
        })
    }

    /// Vector-Jacobian products of one node for each of its parents.
    fn vjp(&self, kind: &OpKind, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let needs = |k: usize| self.nodes[node.parents[k].0].requires_grad;
        let out = &node.value;
        let x = pv(0);
        let one = |t: Tensor<T>| vec![Some(t)];
        let res = match kind {
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), Some(g.map(|&v| -v))],
            OpKind::Mul => vec![
                needs(0).then(|| g.mul(pv(1))).transpose()?,
                needs(1).then(|| g.mul(x)).transpose()?,
            ],
            OpKind::Div => {
                let y = pv(1);
                vec![
                    needs(0).then(|| g.zip_map(y, "div", |a, b| a / b)).transpose()?,
                    needs(1)
                        .then(|| g.mul(out).and_then(|t| t.zip_map(y, "div", |a, b| -a / b)))
                        .transpose()?,
                ]
            }
            OpKind::MatMul => {
                let y = pv(1);
                vec![
                    needs(0).then(|| g.matmul(&y.transpose()?)).transpose()?,
                    needs(1).then(|| x.transpose()?.matmul(g)).transpose()?,
                ]
            }
            OpKind::Transpose => one(g.transpose()?),
            OpKind::Neg => one(g.map(|&v| -v)),
            OpKind::Scale(c) => one(g.scale(T::lit(*c))),
            OpKind::Relu => one(g.zip_map(x, "relu", |gv, xv| if xv > T::zero() { gv } else { T::zero() })?),
            OpKind::Sin => one(g.zip_map(x, "sin", |gv, xv| gv * xv.cos())?),
            OpKind::Cos => one(g.zip_map(x, "cos", |gv, xv| -gv * xv.sin())?),
            OpKind::Exp => one(g.mul(out)?),
            OpKind::Log => one(g.zip_map(x, "log", |gv, xv| gv / xv)?),
            OpKind::Square => one(g.zip_map(x, "square", |gv, xv| gv * (xv + xv))?),
            OpKind::Sqrt => one(g.zip_map(
                out,
                "sqrt",
                |gv, s| {
                    if s > T::zero() {
                        gv / (s + s)
                    } else {
                        T::zero()
                    }
                },
            )?),
            OpKind::Clamp01 => one(g.zip_map(x, "clamp01", |gv, xv| {
                if xv > T::zero() && xv < T::one() {
                    gv
                } else {
                    T::zero()
                }
            })?),
            OpKind::Sum => one(Tensor::full(x.shape(), g.item()?)),
            OpKind::Mean => {
                let n = T::from_usize(x.numel()).unwrap_or_else(T::one);
                one(Tensor::full(x.shape(), g.item()? / n))
            }
            OpKind::SumAxis(_) => one(g.broadcast_to(x.shape())?),
            OpKind::L2Norm(_) => {
                let ratio = g.zip_map(out, "l2norm", |gv, n| if n > T::zero() { gv / n } else { T::zero() })?;
                one(ratio.broadcast_to(x.shape())?.mul(x)?)
            }
            OpKind::LogSumExp(_) => {
                let gb = g.broadcast_to(x.shape())?;
                let ob = out.broadcast_to(x.shape())?;
                let soft = x.zip_map(&ob, "logsumexp", |xv, o| (xv - o).exp())?;
                one(gb.mul(&soft)?)
            }
            OpKind::Concat(ax) => {
                let extents: Vec<usize> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].value.shape()[*ax])
                    .collect();
                g.split(*ax, &extents)?.into_iter().map(Some).collect()
            }
            OpKind::Reshape(_) => one(g.reshape(x.shape())?),
            OpKind::Broadcast(_) => one(g.reduce_to(x.shape())?),
            OpKind::Dot => {
                let s = g.item()?;
                vec![needs(0).then(|| pv(1).scale(s)), needs(1).then(|| x.scale(s))]
            }
        };
        Ok(res)
    }

    // Convenience wrappers over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis(axis), &[a])
    }
    pub fn l2norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::L2Norm(axis), &[a])
    }
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::LogSumExp(axis), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat(axis), parts)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(OpKind::Broadcast(shape.to_vec()), &[a])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }

    /// `a + b` with `b` broadcast to `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    /// `a * b` with `b` broadcast to `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    /// `a / b` with `b` broadcast to `a`'s shape.
    pub fn div_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.div(a, bb)
    }
}

fn logsumexp_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("logsumexp", x.shape(), &[axis]));
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| d[(o * n + k) * inner + i];
            let m = (0..n).map(at).fold(T::neg_infinity(), T::max);
            let s: T = (0..n).map(|k| (at(k) - m).exp()).sum();
            out[o * inner + i] = m + s.ln();
        }
    }
    let mut oshape = shape.to_vec();
    oshape[axis] = 1;
    Tensor::new(&oshape, out)
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a differentiable leaf; `None` if the root
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradient with respect to a leaf, zeros if unreachable.
    pub fn wrt_or_zeros(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    }

    /// Every registered parameter's gradient, by name; unreachable
    /// parameters get zero tensors.
    pub fn by_name(&self) -> BTreeMap<String, Tensor<T>> {
        self.params.iter().cloned().collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
