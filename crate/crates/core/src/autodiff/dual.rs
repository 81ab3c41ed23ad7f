//! Forward-mode tangents recorded as graph nodes.
//!
//! A [`DualVar`] pairs a primal node with one optional tangent node per
//! direction. Tangents are built from ordinary graph ops, so a directional
//! derivative is itself a node and [`Graph::backward`] can differentiate it
//! with respect to parameters (forward-over-reverse).

use crate::autodiff::graph::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DualVar {
    pub primal: Var,
    pub tangents: Vec<Option<Var>>,
}

impl DualVar {
    /// No tangent information.
    pub fn primal(v: Var) -> Self {
        DualVar {
            primal: v,
            tangents: Vec::new(),
        }
    }

    /// A primal with `n` identically-zero tangents.
    pub fn constant(v: Var, n: usize) -> Self {
        DualVar {
            primal: v,
            tangents: vec![None; n],
        }
    }

    /// Seed `v` with explicit tangent values, one per direction.
    pub fn seeded<T: Real>(g: &mut Graph<T>, v: Var, directions: Vec<Tensor<T>>) -> Result<Self> {
        let mut tangents = Vec::with_capacity(directions.len());
        for d in directions {
            if d.shape() != g.shape(v) {
                return Err(Error::shape("jvp direction", g.shape(v), d.shape()));
            }
            tangents.push(Some(g.constant(d)));
        }
        Ok(DualVar { primal: v, tangents })
    }

    pub fn directions(&self) -> usize {
        self.tangents.len()
    }

    pub fn tangent(&self, k: usize) -> Option<Var> {
        self.tangents.get(k).copied().flatten()
    }

    /// Tangent `k` as a node, materializing zeros when absent.
    pub fn tangent_or_zero<T: Real>(&self, g: &mut Graph<T>, k: usize) -> Var {
        match self.tangent(k) {
            Some(t) => t,
            None => {
                let shape = g.shape(self.primal).to_vec();
                g.constant(Tensor::zeros(&shape))
            }
        }
    }
}

fn lift<T: Real>(
    g: &mut Graph<T>,
    a: Option<Var>,
    f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Option<Var>> {
    a.map(|t| f(g, t)).transpose()
}

fn sum_opt<T: Real>(g: &mut Graph<T>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, None) => a,
        (None, b) => b,
    })
}

fn mask<T: Real>(g: &mut Graph<T>, x: Var, keep: impl Fn(T) -> bool) -> Var {
    let m = g.value(x).map(|&v| if keep(v) { T::one() } else { T::zero() });
    g.constant(m)
}

impl<T: Real> Graph<T> {
    /// Apply `kind` to dual inputs: the primal through [`Graph::apply`],
    /// each tangent through the op's exact linearization.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[DualVar]) -> Result<DualVar> {
        let primals: Vec<Var> = inputs.iter().map(|d| d.primal).collect();
        let out = self.apply(kind.clone(), &primals)?;
        let dirs = inputs.iter().map(DualVar::directions).max().unwrap_or(0);
        let mut tangents = Vec::with_capacity(dirs);
        for k in 0..dirs {
            let ts: Vec<Option<Var>> = inputs.iter().map(|d| d.tangent(k)).collect();
            tangents.push(self.tangent_rule(&kind, &primals, out, &ts)?);
        }
        Ok(DualVar { primal: out, tangents })
    }

    fn tangent_rule(&mut self, kind: &OpKind, x: &[Var], out: Var, t: &[Option<Var>]) -> Result<Option<Var>> {
        if t.iter().all(Option::is_none) {
            return Ok(None);
        }
        let a = x[0];
        let ta = t[0];
        match kind {
            OpKind::Add => sum_opt(self, ta, t[1]),
            OpKind::Sub => {
                let nb = lift(self, t[1], |g, v| g.neg(v))?;
                sum_opt(self, ta, nb)
            }
            OpKind::Mul => {
                let b = x[1];
                let l = lift(self, ta, |g, v| g.mul(v, b))?;
                let r = lift(self, t[1], |g, v| g.mul(a, v))?;
                sum_opt(self, l, r)
            }
            OpKind::Div => {
                // (ta - out·tb) / b
                let b = x[1];
                let r = lift(self, t[1], |g, v| {
                    let p = g.mul(out, v)?;
                    g.neg(p)
                })?;
                let num = sum_opt(self, ta, r)?;
                lift(self, num, |g, v| g.div(v, b))
            }
            OpKind::MatMul => {
                let b = x[1];
                let l = lift(self, ta, |g, v| g.matmul(v, b))?;
                let r = lift(self, t[1], |g, v| g.matmul(a, v))?;
                sum_opt(self, l, r)
            }
            OpKind::Dot => {
                let b = x[1];
                let l = lift(self, ta, |g, v| g.dot(v, b))?;
                let r = lift(self, t[1], |g, v| g.dot(a, v))?;
                sum_opt(self, l, r)
            }
            OpKind::Transpose
            | OpKind::Neg
            | OpKind::Scale(_)
            | OpKind::Sum
            | OpKind::Mean
            | OpKind::SumAxis(_)
            | OpKind::Reshape(_)
            | OpKind::Broadcast(_) => lift(self, ta, |g, v| g.apply(kind.clone(), &[v])),
            OpKind::Relu => {
                let m = mask(self, a, |v| v > T::zero());
                lift(self, ta, |g, v| g.mul(v, m))
            }
            OpKind::Clamp01 => {
                let m = mask(self, a, |v| v > T::zero() && v < T::one());
                lift(self, ta, |g, v| g.mul(v, m))
            }
            OpKind::Sin => lift(self, ta, |g, v| {
                let c = g.apply(OpKind::Cos, &[a])?;
                g.mul(v, c)
            }),
            OpKind::Cos => lift(self, ta, |g, v| {
                let s = g.apply(OpKind::Sin, &[a])?;
                let p = g.mul(v, s)?;
                g.neg(p)
            }),
            OpKind::Exp => lift(self, ta, |g, v| g.mul(v, out)),
            OpKind::Log => lift(self, ta, |g, v| g.div(v, a)),
            OpKind::Square => lift(self, ta, |g, v| {
                let p = g.mul(a, v)?;
                g.scale(p, 2.0)
            }),
            OpKind::Sqrt => lift(self, ta, |g, v| {
                let d = g.scale(out, 2.0)?;
                g.div(v, d)
            }),
            OpKind::L2Norm(ax) => {
                let ax = *ax;
                lift(self, ta, |g, v| {
                    let p = g.mul(a, v)?;
                    let s = g.sum_axis(p, ax)?;
                    g.div(s, out)
                })
            }
            OpKind::LogSumExp(ax) => {
                let ax = *ax;
                lift(self, ta, |g, v| {
                    let shape = g.shape(a).to_vec();
                    let ob = g.broadcast(out, &shape)?;
                    let centered = g.sub(a, ob)?;
                    let soft = g.exp(centered)?;
                    let p = g.mul(soft, v)?;
                    g.sum_axis(p, ax)
                })
            }
            OpKind::Concat(ax) => {
                let mut parts = Vec::with_capacity(x.len());
                for (xi, ti) in x.iter().zip(t) {
                    parts.push(match ti {
                        Some(v) => *v,
                        None => {
                            let shape = self.shape(*xi).to_vec();
                            self.constant(Tensor::zeros(&shape))
                        }
                    });
                }
                Ok(Some(self.concat(&parts, *ax)?))
            }
        }
    }

    // Dual conveniences used by model code.

    pub fn d_add(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        self.forward_op(OpKind::Add, &[a.clone(), b.clone()])
    }

    pub fn d_mul(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        self.forward_op(OpKind::Mul, &[a.clone(), b.clone()])
    }

    pub fn d_div(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        self.forward_op(OpKind::Div, &[a.clone(), b.clone()])
    }

    pub fn d_matmul(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        self.forward_op(OpKind::MatMul, &[a.clone(), b.clone()])
    }

    pub fn d_unary(&mut self, kind: OpKind, a: &DualVar) -> Result<DualVar> {
        self.forward_op(kind, std::slice::from_ref(a))
    }

    pub fn d_broadcast(&mut self, a: &DualVar, shape: &[usize]) -> Result<DualVar> {
        if self.shape(a.primal) == shape {
            return Ok(a.clone());
        }
        self.d_unary(OpKind::Broadcast(shape.to_vec()), a)
    }

    /// `a + b` with `b` broadcast to `a`'s shape.
    pub fn d_add_bcast(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        let shape = self.shape(a.primal).to_vec();
        let bb = self.d_broadcast(b, &shape)?;
        self.d_add(a, &bb)
    }

    /// `a / b` with `b` broadcast to `a`'s shape.
    pub fn d_div_bcast(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        let shape = self.shape(a.primal).to_vec();
        let bb = self.d_broadcast(b, &shape)?;
        self.d_div(a, &bb)
    }

    /// `a * b` with `b` broadcast to `a`'s shape.
    pub fn d_mul_bcast(&mut self, a: &DualVar, b: &DualVar) -> Result<DualVar> {
        let shape = self.shape(a.primal).to_vec();
        let bb = self.d_broadcast(b, &shape)?;
        self.d_mul(a, &bb)
    }
}
