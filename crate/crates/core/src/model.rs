//! MLP encoder and projection head, parameter initialization, the cosine
//! learning-rate schedule and first-order optimizers.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, DualVar, Graph, OpKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::objectives::{Encoder, Projection};
use crate::rng::{stream, uniform, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub hidden_sizes: Vec<usize>,
    pub repr_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_shape: [3, 32, 32],
            hidden_sizes: vec![512, 256],
            repr_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: format!("encoder.{key}"),
                detail: detail.into(),
            })
        };
        if self.input_dim() == 0 {
            return bad("input_shape", "extents must be positive");
        }
        if self.hidden_sizes.is_empty() {
            return bad("hidden_sizes", "at least one hidden layer is required");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes", "layer widths must be positive");
        }
        if self.repr_dim < 2 {
            return bad("repr_dim", "must be at least 2");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 128,
            out_dim: 64,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config {
                key: "head.hidden".into(),
                detail: "must be positive".into(),
            });
        }
        if self.out_dim < 2 {
            return Err(Error::Config {
                key: "head.out_dim".into(),
                detail: "must be at least 2".into(),
            });
        }
        Ok(())
    }
}

/// Affine layers with ReLU between them (none after the last). Layer `i`
/// owns `{prefix}.{i}.w` (`in×out`) and `{prefix}.{i}.b` (`1×out`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            prefix: prefix.to_string(),
            sizes,
        })
    }

    pub fn encoder(cfg: &EncoderConfig) -> Self {
        let mut sizes = vec![cfg.input_dim()];
        sizes.extend(&cfg.hidden_sizes);
        sizes.push(cfg.repr_dim);
        Mlp {
            prefix: "enc".into(),
            sizes,
        }
    }

    pub fn head(cfg: &HeadConfig, repr_dim: usize) -> Self {
        Mlp {
            prefix: "head".into(),
            sizes: vec![repr_dim, cfg.hidden, cfg.out_dim],
        }
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, i: usize) -> String {
        format!("{}.{i}.w", self.prefix)
    }

    pub fn bias_name(&self, i: usize) -> String {
        format!("{}.{i}.b", self.prefix)
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    /// Weights `U(−1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn init(&self, store: &mut ParamStore<f64>, seed: u64, tag: u64) -> Result<()> {
        for i in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[i], self.sizes[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = stream(seed, Purpose::Init, tag, i as u64, 0);
            let w = Tensor::from_fn(&[fan_in, fan_out], |_| uniform(&mut rng, -bound, bound));
            store.insert(self.weight_name(i), w)?;
            store.insert(self.bias_name(i), Tensor::zeros(&[1, fan_out]))?;
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, d] if *d == self.in_dim() => Ok(()),
            other => Err(Error::shape("mlp input", other, &[0, self.in_dim()])),
        }
    }

    /// Forward pass on graph nodes, carrying tangents through every layer.
    pub fn forward(&self, g: &mut Graph<f64>, bound: &Bound, x: &DualVar) -> Result<DualVar> {
        self.check_input(g.shape(x.primal))?;
        let mut h = x.clone();
        for i in 0..self.layers() {
            let w = DualVar::primal(bound.get(&self.weight_name(i))?);
            let b = DualVar::primal(bound.get(&self.bias_name(i))?);
            let a = g.d_matmul(&h, &w)?;
            h = g.d_add_bcast(&a, &b)?;
            if i + 1 < self.layers() {
                h = g.d_unary(OpKind::Relu, &h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward pass for inference.
    pub fn apply(&self, params: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_input(x.shape())?;
        let get = |name: String| {
            params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let mut h = x.clone();
        for i in 0..self.layers() {
            let w = get(self.weight_name(i))?;
            let b = get(self.bias_name(i))?;
            h = h.matmul(w)?;
            let out = b.numel();
            if b.shape() != [1, out] || h.shape()[1] != out {
                return Err(Error::shape("mlp bias", b.shape(), h.shape()));
            }
            let relu = i + 1 < self.layers();
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += b.data()[j % out];
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(h)
    }
}

/// Encoder and head with their parameters bound in one graph.
pub struct BoundMlp<'a> {
    pub mlp: &'a Mlp,
    pub bound: &'a Bound,
}

impl Encoder<f64> for BoundMlp<'_> {
    fn encode(&self, g: &mut Graph<f64>, x: &DualVar) -> Result<DualVar> {
        self.mlp.forward(g, self.bound, x)
    }
}

impl Projection<f64> for BoundMlp<'_> {
    fn project(&self, g: &mut Graph<f64>, z: Var) -> Result<Var> {
        Ok(self.mlp.forward(g, self.bound, &DualVar::primal(z))?.primal)
    }
}

/// Encoder and projection head architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl Model {
    pub fn new(enc: &EncoderConfig, head: &HeadConfig) -> Result<Self> {
        enc.validate()?;
        head.validate()?;
        Ok(Model {
            encoder: Mlp::encoder(enc),
            head: Mlp::head(head, enc.repr_dim),
        })
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    /// Representations of a `K×D` batch (no projection head).
    pub fn embed(&self, params: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.encoder.apply(params, x)
    }
}

/// Encoder and head parameters, deterministic per seed.
pub fn init_params(enc: &EncoderConfig, head: &HeadConfig, seed: u64) -> Result<ParamStore<f64>> {
    let model = Model::new(enc, head)?;
    let mut store = ParamStore::new();
    model.encoder.init(&mut store, seed, 0)?;
    model.head.init(&mut store, seed, 1)?;
    Ok(store)
}

/// `0.5 · lr_max · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(0.5 * lr_max * (1.0 + (PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config {
                    key: format!("train.optimizer.{key}"),
                    detail: format!("must lie in [0, 1), got {v}"),
                })
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        unit("momentum", self.momentum)?;
        if !(self.eps > 0.0) {
            return Err(Error::Config {
                key: "train.optimizer.eps".into(),
                detail: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<f64>>,
    pub second: BTreeMap<String, Tensor<f64>>,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter. Gradients must be finite and shaped
    /// like their parameters; nothing is modified otherwise.
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &BTreeMap<String, Tensor<f64>>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer gradient", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name} at optimizer step {}", self.step + 1),
                });
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((pv, mv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *mv = c.momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for (((pv, mv), vv), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
