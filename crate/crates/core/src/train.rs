//! Contrastive training on rendered Spirograph views.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::{
    cosine_lr, init_params, BoundMlp, EncoderConfig, HeadConfig, Model, OptimizerConfig, OptimizerState,
};
use crate::objectives::{full_loss, sample_rademacher, LossBatch, PenaltyInputs, RegConfig, SimilarityConfig};
use crate::rng::{stream, Purpose};
use crate::spirograph::SpiroDataset;
use crate::tensor::Tensor;
use crate::transforms::Transform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub optimizer: OptimizerConfig,
    /// Store wall-clock time in metrics records. Off by default so that
    /// repeated runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 10,
            lr_max: 1e-3,
            optimizer: OptimizerConfig::default(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("train.{key}"),
                detail,
            })
        };
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max", format!("must be positive, got {}", self.lr_max));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub infonce: f64,
    /// Penalty value, absent when `λ = 0`.
    pub penalty: Option<f64>,
    pub penalty_clipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub reg: RegConfig,
    pub similarity: SimilarityConfig,
    pub seed: u64,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        self.reg.validate()?;
        self.similarity.validate()
    }
}

/// Called as training progresses; errors abort the run.
pub trait TrainObserver {
    fn record(&mut self, _r: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _epoch: usize, _params: &ParamStore<f64>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f64>,
    pub records: Vec<MetricsRecord>,
}

/// A run stopped early; `last_good` holds the parameters before the
/// failing step.
#[derive(Debug, Error)]
#[error("training aborted at step {step}: {source}")]
pub struct TrainAbort {
    pub step: u64,
    #[source]
    pub source: Error,
    pub last_good: ParamStore<f64>,
    pub records: Vec<MetricsRecord>,
}

/// Batches per epoch; a trailing partial batch is dropped.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size
}

/// Flattened view of sample `idx` for `(epoch, view)`, with its `α` and,
/// on request, `∂view/∂α`.
pub fn render_view(
    data: &SpiroDataset,
    idx: usize,
    epoch: usize,
    view: u64,
    seed: u64,
    with_jacobian: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let t = data.transform();
    let mut rng = stream(seed, Purpose::View, idx as u64, epoch as u64, view);
    let alpha = t.sample_alpha(&mut rng);
    let x = &data.factors[idx];
    if with_jacobian {
        let (img, jac) = t.apply_with_jacobian(x, &alpha, &())?;
        Ok((img.into_data(), alpha, jac.into_iter().map(Tensor::into_data).collect()))
    } else {
        Ok((t.apply_f64(x, &alpha, &())?.into_data(), alpha, Vec::new()))
    }
}

/// Both views of a batch plus the penalty inputs when `λ > 0`. The
/// penalty draws (`α′`, `e`) come from their own stream, so they never
/// perturb the views.
pub fn build_batch(data: &SpiroDataset, indices: &[usize], epoch: usize, setup: &TrainSetup) -> Result<LossBatch<f64>> {
    let k = indices.len();
    let d = data.grid.image_len();
    let penalize = setup.reg.lambda > 0.0;
    let t = data.transform();
    let c = t.alpha_dim();
    let l = setup.reg.l;
    let repr = setup.encoder.repr_dim;

    let mut v1 = Vec::with_capacity(k * d);
    let mut v2 = Vec::with_capacity(k * d);
    let mut tangents = vec![Vec::with_capacity(if penalize { k * d } else { 0 }); if penalize { c } else { 0 }];
    let mut deltas = Vec::with_capacity(if penalize { k * l * c } else { 0 });
    let mut e = Vec::with_capacity(if penalize { k * repr } else { 0 });
    for &idx in indices {
        let (img1, alpha, jac) = render_view(data, idx, epoch, 0, setup.seed, penalize)?;
        let (img2, _, _) = render_view(data, idx, epoch, 1, setup.seed, false)?;
        v1.extend(img1);
        v2.extend(img2);
        if penalize {
            for (dst, src) in tangents.iter_mut().zip(jac) {
                dst.extend(src);
            }
            let mut rng = stream(setup.seed, Purpose::Penalty, idx as u64, epoch as u64, 0);
            for _ in 0..l {
                let fresh = t.sample_alpha(&mut rng);
                deltas.extend(fresh.iter().zip(&alpha).map(|(b, a)| b - a));
            }
            e.extend(sample_rademacher(repr, &mut rng)?.into_vec());
        }
    }
    let penalty = if penalize {
        Some(PenaltyInputs {
            tangents: tangents
                .into_iter()
                .map(|t| Tensor::new(&[k, d], t))
                .collect::<Result<_>>()?,
            deltas: Tensor::new(&[k, l, c], deltas)?,
            e: Tensor::new(&[k, repr], e)?,
        })
    } else {
        None
    };
    Ok(LossBatch {
        view1: Tensor::new(&[k, d], v1)?,
        view2: Tensor::new(&[k, d], v2)?,
        penalty,
    })
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Model,
    params: &ParamStore<f64>,
    batch: &LossBatch<f64>,
    setup: &TrainSetup,
) -> Result<(
    crate::objectives::LossTerms,
    f64,
    std::collections::BTreeMap<String, Tensor<f64>>,
)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let enc = BoundMlp {
        mlp: &model.encoder,
        bound: &bound,
    };
    let head = BoundMlp {
        mlp: &model.head,
        bound: &bound,
    };
    let terms = full_loss(&mut g, &enc, &head, batch, &setup.similarity, &setup.reg)?;
    let loss = g.item(terms.loss)?;
    let grads = g.backward(terms.loss)?.by_name();
    Ok((terms, loss, grads))
}

/// Minimize InfoNCE plus the weighted gradient penalty over `data`.
pub fn train(
    data: &SpiroDataset,
    setup: &TrainSetup,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let fail = |step, source, last_good: &ParamStore<f64>, records: &[MetricsRecord]| TrainAbort {
        step,
        source,
        last_good: last_good.clone(),
        records: records.to_vec(),
    };
    let empty = ParamStore::new();
    let prepared = (|| {
        setup.validate()?;
        let [ch, h, w] = setup.encoder.input_shape;
        if [ch, h, w] != data.grid.image_shape() {
            return Err(Error::Config {
                key: "encoder.input_shape".into(),
                detail: format!(
                    "{:?} does not match rendered images {:?}",
                    setup.encoder.input_shape,
                    data.grid.image_shape()
                ),
            });
        }
        if data.len() < setup.train.batch_size {
            return Err(Error::invalid(format!(
                "dataset of {} samples is smaller than one batch of {}",
                data.len(),
                setup.train.batch_size
            )));
        }
        let model = Model::new(&setup.encoder, &setup.head)?;
        let params = init_params(&setup.encoder, &setup.head, setup.seed)?;
        Ok((model, params))
    })();
    let (model, mut params) = prepared.map_err(|e| fail(0, e, &empty, &[]))?;

    let k = setup.train.batch_size;
    let per_epoch = steps_per_epoch(data.len(), k);
    let total = per_epoch * setup.train.epochs;
    let mut opt = OptimizerState::new(setup.train.optimizer);
    let mut records = Vec::with_capacity(total);
    let mut step = 0usize;
    for epoch in 0..setup.train.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(setup.seed, Purpose::Shuffle, epoch as u64, 0, 0));
        for chunk in order.chunks_exact(k) {
            let started = Instant::now();
            let last_good = params.clone();
            let result = (|| -> Result<MetricsRecord> {
                let lr = cosine_lr(step, total, setup.train.lr_max)?;
                let batch = build_batch(data, chunk, epoch, setup)?;
                let (terms, loss, grads) = loss_and_grads(&model, &params, &batch, setup)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss at step {}", step + 1),
                    });
                }
                opt.step(&mut params, &grads, lr)?;
                Ok(MetricsRecord {
                    step: step as u64 + 1,
                    epoch,
                    lr,
                    infonce: terms.infonce,
                    penalty: terms.penalty.map(|p| p.value),
                    penalty_clipped: terms.penalty.is_some_and(|p| p.clipped),
                    wall_ms: setup
                        .train
                        .record_wall_time
                        .then(|| started.elapsed().as_millis() as u64),
                })
            })();
            let rec = match result {
                Ok(r) => r,
                Err(e) => return Err(fail(step as u64 + 1, e, &last_good, &records)),
            };
            if let Err(e) = observer.record(&rec) {
                return Err(fail(rec.step, e, &params, &records));
            }
            records.push(rec);
            step += 1;
        }
        if let Err(e) = observer.epoch_end(epoch, &params) {
            return Err(fail(step as u64, e, &params, &records));
        }
    }
    Ok(TrainOutcome { params, records })
}
