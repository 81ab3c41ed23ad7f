//! Representation quality: linear probes, feature averaging, α-recovery,
//! conditional variance and robustness sweeps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{nested_mc_condvar, sample_rademacher, Estimate};
use crate::rng::{stream, Purpose};
use crate::spirograph::{render_sample, sample_nuisance, Nuisance, SpiroDataset, SpiroSpecs};
use crate::tensor::Tensor;

/// Names of the four downstream regression tasks, in target column order.
pub const TASKS: [&str; 4] = ["m", "b", "sigma", "f_r"];

const EMBED_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureAvgConfig {
    /// Number of transformation draws averaged per sample.
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

impl Default for FeatureAvgConfig {
    fn default() -> Self {
        FeatureAvgConfig { m: 16, seed: 0 }
    }
}

impl FeatureAvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config {
                key: "feature_avg.M".into(),
                detail: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

fn flat(img: Tensor<f64>) -> Result<Tensor<f64>> {
    let n = img.numel();
    img.reshape(&[n])
}

/// Encodes images produced by `render(i)` for `i in 0..n`, in chunks.
fn embed_with<F>(model: &Model, params: &ParamStore<f64>, n: usize, mut render: F) -> Result<Tensor<f64>>
where
    F: FnMut(usize) -> Result<Tensor<f64>>,
{
    if n == 0 {
        return Err(Error::invalid("nothing to embed"));
    }
    let d = model.repr_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let imgs = (start..end).map(|i| flat(render(i)?)).collect::<Result<Vec<_>>>()?;
        let z = model.embed(params, &Tensor::stack(&imgs)?)?;
        out.extend_from_slice(z.data());
        start = end;
    }
    Tensor::new(&[n, d], out)
}

/// Representations of every sample rendered with its stored evaluation
/// nuisance.
pub fn embed(model: &Model, params: &ParamStore<f64>, data: &SpiroDataset) -> Result<Tensor<f64>> {
    embed_with(model, params, data.len(), |i| data.render_eval(i))
}

/// Representations under nuisances redrawn from the evaluation stream with
/// `specs`; with the dataset's own specs this equals [`embed`].
pub fn embed_under(
    model: &Model,
    params: &ParamStore<f64>,
    data: &SpiroDataset,
    specs: &SpiroSpecs,
) -> Result<Tensor<f64>> {
    embed_with(model, params, data.len(), |i| {
        render_sample(&data.factors[i], &data.eval_nuisance_under(i, specs)?, &data.grid)
    })
}

/// Nuisance of draw `m` in draw set `set` for sample `i`.
pub fn fa_nuisance(data: &SpiroDataset, i: usize, seed: u64, set: u64, m: usize) -> Result<Nuisance> {
    let mut rng = stream(seed, Purpose::FeatureAverage, data.stream_index(i), set, m as u64);
    sample_nuisance(&mut rng, &data.specs)
}

/// One `n×d` representation matrix per draw `m < M`.
pub fn view_embeddings(
    model: &Model,
    params: &ParamStore<f64>,
    data: &SpiroDataset,
    cfg: &FeatureAvgConfig,
    set: u64,
) -> Result<Vec<Tensor<f64>>> {
    cfg.validate()?;
    (0..cfg.m)
        .map(|m| {
            embed_with(model, params, data.len(), |i| {
                render_sample(&data.factors[i], &fa_nuisance(data, i, cfg.seed, set, m)?, &data.grid)
            })
        })
        .collect()
}

/// Elementwise mean of equally shaped matrices.
pub fn mean_of(views: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = views.first().ok_or_else(|| Error::invalid("mean of zero views"))?;
    let mut acc = first.clone();
    for v in &views[1..] {
        acc.add_assign(v)?;
    }
    Ok(acc.scale(1.0 / views.len() as f64))
}

/// `z⁽ᴹ⁾`: the average of `M` representations of independently transformed
/// copies of each sample.
pub fn feature_average(
    model: &Model,
    params: &ParamStore<f64>,
    data: &SpiroDataset,
    cfg: &FeatureAvgConfig,
    set: u64,
) -> Result<Tensor<f64>> {
    mean_of(&view_embeddings(model, params, data, cfg, set)?)
}

/// Linear regression from representations to targets. `weights` is
/// `targets × (d + 1)` with the bias in the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub weights: Tensor<f64>,
    pub weight_decay: f64,
}

impl ProbeModel {
    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[1] - 1
    }

    pub fn targets(&self) -> usize {
        self.weights.shape()[0]
    }

    /// `n×targets` predictions.
    pub fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let d = self.feature_dim();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::shape("probe features", x.shape(), &[0, d]));
        }
        let t = self.targets();
        let n = x.shape()[0];
        let w = self.weights.data();
        let mut out = Vec::with_capacity(n * t);
        for i in 0..n {
            let row = x.row(i);
            for k in 0..t {
                let wk = &w[k * (d + 1)..(k + 1) * (d + 1)];
                out.push(row.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>() + wk[d]);
            }
        }
        Tensor::new(&[n, t], out)
    }
}

fn column_means(x: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (a, v) in m.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// Ridge regression minimizing `MSE + wd·‖w‖²` per target, bias
/// unpenalized: `w = (XᵀX + n·wd·I)⁻¹Xᵀy` on centred data.
pub fn fit_linear_probe(x: &Tensor<f64>, y: &Tensor<f64>, weight_decay: f64) -> Result<ProbeModel> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape("probe fit", x.shape(), y.shape()));
    }
    let (n, d, t) = (x.shape()[0], x.shape()[1], y.shape()[1]);
    if n < 2 {
        return Err(Error::invalid(format!("probe fit needs at least 2 samples, got {n}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::invalid(format!(
            "weight decay must be non-negative, got {weight_decay}"
        )));
    }
    if !x.all_finite() || !y.all_finite() {
        return Err(Error::NonFinite {
            what: "probe inputs".into(),
        });
    }
    let xm = column_means(x);
    let ym = column_means(y);
    let xc = Tensor::from_fn(&[n, d], |k| x.data()[k] - xm[k % d]);
    let yc = Tensor::from_fn(&[n, t], |k| y.data()[k] - ym[k % t]);
    let xd = DMatrix::from_row_slice(n, d, xc.data());
    let mut gram = xd.transpose() * &xd;
    let diag_max = gram.diagonal().max();
    for j in 0..d {
        gram[(j, j)] += n as f64 * weight_decay;
    }
    let rhs = xd.transpose() * DMatrix::from_row_slice(n, t, yc.data());
    // A pivot at rounding level means the normal equations are singular.
    let tol = diag_max.max(f64::MIN_POSITIVE) * f64::EPSILON * d as f64;
    let chol = gram
        .cholesky()
        .filter(|c| c.l_dirty().diagonal().iter().all(|v| v * v > tol))
        .ok_or_else(|| Error::Domain {
            op: "linear probe",
            detail: if weight_decay == 0.0 {
                "singular normal equations; use a positive weight_decay".into()
            } else {
                format!("normal equations not positive definite at weight_decay {weight_decay}; increase it")
            },
        })?;
    let w = chol.solve(&rhs);
    let mut weights = Vec::with_capacity(t * (d + 1));
    for k in 0..t {
        let col: Vec<f64> = w.column(k).iter().copied().collect();
        let bias = ym[k] - col.iter().zip(&xm).map(|(a, b)| a * b).sum::<f64>();
        weights.extend(col);
        weights.push(bias);
    }
    let weights = Tensor::new(&[t, d + 1], weights)?;
    if !weights.all_finite() {
        return Err(Error::NonFinite {
            what: "probe weights".into(),
        });
    }
    Ok(ProbeModel { weights, weight_decay })
}

/// Per-sample, per-target squared residuals, `n×targets`.
pub fn squared_errors(probe: &ProbeModel, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let p = probe.predict(x)?;
    if p.shape() != y.shape() {
        return Err(Error::shape("probe targets", p.shape(), y.shape()));
    }
    p.zip_map(y, "squared error", |a, b| (a - b) * (a - b))
}

/// Mean squared residual per target.
pub fn probe_mse(probe: &ProbeModel, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Vec<f64>> {
    let e = squared_errors(probe, x, y)?;
    Ok(column_means(&e))
}

/// Per-task MSE of the four downstream probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMse {
    pub m: f64,
    pub b: f64,
    pub sigma: f64,
    pub f_r: f64,
}

impl TaskMse {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [m, b, sigma, f_r] => Ok(TaskMse { m, b, sigma, f_r }),
            _ => Err(Error::shape("task mse", &[v.len()], &[4])),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.m, self.b, self.sigma, self.f_r]
    }

    pub fn mean(&self) -> f64 {
        self.to_array().iter().sum::<f64>() / 4.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecovery {
    /// Test MSE averaged over the nuisance coordinates.
    pub loss: f64,
    pub per_coordinate: Vec<f64>,
    /// `Meanᵢ Var(αᵢ)`, the loss of the best constant predictor.
    pub reference: f64,
}

fn standardizer(y: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = column_means(y);
    let t = mean.len();
    let sq = Tensor::from_fn(y.shape(), |k| (y.data()[k] - mean[k % t]).powi(2));
    let sd = column_means(&sq)
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, sd)
}

/// Fits a probe predicting the nuisance parameters from representations of
/// the images they rendered, and reports its test loss in original units.
pub fn alpha_recovery(
    train_x: &Tensor<f64>,
    train_alpha: &Tensor<f64>,
    test_x: &Tensor<f64>,
    test_alpha: &Tensor<f64>,
    specs: &SpiroSpecs,
    weight_decay: f64,
) -> Result<AlphaRecovery> {
    let (mean, sd) = standardizer(train_alpha);
    let t = mean.len();
    let standard = Tensor::from_fn(train_alpha.shape(), |k| {
        (train_alpha.data()[k] - mean[k % t]) / sd[k % t]
    });
    let probe = fit_linear_probe(train_x, &standard, weight_decay)?;
    let pred = probe.predict(test_x)?;
    let pred = Tensor::from_fn(pred.shape(), |k| pred.data()[k] * sd[k % t] + mean[k % t]);
    if pred.shape() != test_alpha.shape() {
        return Err(Error::shape("alpha recovery", pred.shape(), test_alpha.shape()));
    }
    let per_coordinate = column_means(&pred.zip_map(test_alpha, "alpha error", |a, b| (a - b) * (a - b))?);
    Ok(AlphaRecovery {
        loss: per_coordinate.iter().sum::<f64>() / t as f64,
        per_coordinate,
        reference: specs.nuisance_reference_value()?,
    })
}

/// Nested Monte Carlo conditional variance of `e·z/‖z‖` under nuisance
/// redraws, over the dataset's factors.
pub fn condvar_report(
    model: &Model,
    params: &ParamStore<f64>,
    data: &SpiroDataset,
    l: usize,
    seed: u64,
) -> Result<Estimate> {
    let transform = data.transform();
    nested_mc_condvar(
        &data.factors,
        &transform,
        |batch| model.embed(params, batch),
        l,
        |i| stream(seed, Purpose::CondVar, data.stream_index(i), 0, 0),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Move the support by `S`.
    Shift,
    /// Extend the support by `S` on both sides.
    Widen,
}

/// A family of modified nuisance specs, one per value of `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Parameter or group name (`background`, `foreground`).
    pub name: String,
    pub mode: SweepMode,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn specs_at(&self, base: &SpiroSpecs, s: f64) -> Result<SpiroSpecs> {
        match self.mode {
            SweepMode::Shift => base.shift(&self.name, s),
            SweepMode::Widen => base.widen(&self.name, s),
        }
    }

    /// `h` mean shifts and background variance increases.
    pub fn defaults() -> Vec<SweepSpec> {
        vec![
            SweepSpec {
                name: "h".into(),
                mode: SweepMode::Shift,
                values: vec![-0.5, -0.3, -0.1, 0.0, 0.1, 0.3, 0.5],
            },
            SweepSpec {
                name: "background".into(),
                mode: SweepMode::Widen,
                values: vec![0.0, 0.2, 0.4],
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub s: f64,
    pub mse: TaskMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub name: String,
    pub mode: SweepMode,
    pub points: Vec<SweepPoint>,
}

impl RobustnessCurve {
    /// Mean over tasks of `MSE_S / MSE_0 − 1` at `s`.
    pub fn degradation(&self, s: f64) -> Result<f64> {
        let find = |v: f64| {
            self.points
                .iter()
                .find(|p| p.s == v)
                .ok_or_else(|| Error::invalid(format!("sweep {} has no point at {v}", self.name)))
        };
        let base = find(0.0)?.mse.to_array();
        let at = find(s)?.mse.to_array();
        Ok(at.iter().zip(&base).map(|(a, b)| a / b - 1.0).sum::<f64>() / 4.0)
    }
}

/// Probe MSE on test images re-rendered under each modified spec. Every
/// sample keeps its own evaluation stream, so `S = 0` reproduces the
/// unmodified evaluation exactly.
pub fn robustness_sweep(
    model: &Model,
    params: &ParamStore<f64>,
    probe: &ProbeModel,
    data: &SpiroDataset,
    sweep: &SweepSpec,
) -> Result<RobustnessCurve> {
    let y = data.factor_matrix();
    let points = sweep
        .values
        .iter()
        .map(|&s| {
            let specs = sweep.specs_at(&data.specs, s)?;
            let z = embed_under(model, params, data, &specs)?;
            Ok(SweepPoint {
                s,
                mse: TaskMse::from_slice(&probe_mse(probe, &z, &y)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessCurve {
        name: sweep.name.clone(),
        mode: sweep.mode,
        points,
    })
}

/// `(1/M) Σₘ probe(zₘ)` over the draws of [`view_embeddings`].
pub fn ensemble_predict(probe: &ProbeModel, views: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let preds = views.iter().map(|z| probe.predict(z)).collect::<Result<Vec<_>>>()?;
    mean_of(&preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaPoint {
    #[serde(rename = "M")]
    pub m: usize,
    pub mse: TaskMse,
}

/// Probes refit on `z⁽ᴹ⁾` for `M = 1, 2, 4, …` up to `cfg.M`. Prefix
/// averages of one set of draws are used, so the curve reuses renders.
pub fn feature_average_curve(
    model: &Model,
    params: &ParamStore<f64>,
    train: &SpiroDataset,
    test: &SpiroDataset,
    cfg: &FeatureAvgConfig,
    weight_decay: f64,
) -> Result<Vec<FaPoint>> {
    let train_views = view_embeddings(model, params, train, cfg, 0)?;
    let test_views = view_embeddings(model, params, test, cfg, 0)?;
    let (ytr, yte) = (train.factor_matrix(), test.factor_matrix());
    let mut out = Vec::new();
    let mut m = 1;
    while m <= cfg.m {
        let probe = fit_linear_probe(&mean_of(&train_views[..m])?, &ytr, weight_decay)?;
        let mse = probe_mse(&probe, &mean_of(&test_views[..m])?, &yte)?;
        out.push(FaPoint {
            m,
            mse: TaskMse::from_slice(&mse)?,
        });
        m *= 2;
    }
    Ok(out)
}

/// Variance of `e·z⁽ᴹ⁾` and of `e·z⁽¹⁾` across independent draw sets for
/// one sample; the first should be `1/M` of the second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragingVariance {
    pub single: f64,
    pub averaged: f64,
}

/// `sets` draw sets of `M` views of sample `i`, each projected on one
/// Rademacher direction.
pub fn averaging_variance(
    model: &Model,
    params: &ParamStore<f64>,
    data: &SpiroDataset,
    i: usize,
    cfg: &FeatureAvgConfig,
    sets: usize,
) -> Result<AveragingVariance> {
    cfg.validate()?;
    if sets < 2 {
        return Err(Error::invalid("averaging variance needs at least 2 draw sets"));
    }
    let e = sample_rademacher(
        model.repr_dim(),
        &mut stream(cfg.seed, Purpose::Rademacher, data.stream_index(i), 0, 0),
    )?;
    let total = sets * cfg.m;
    let z = embed_with(model, params, total, |k| {
        let nu = fa_nuisance(data, i, cfg.seed, (k / cfg.m) as u64, k % cfg.m)?;
        render_sample(&data.factors[i], &nu, &data.grid)
    })?;
    let proj: Vec<f64> = (0..total)
        .map(|k| z.row(k).iter().zip(e.as_slice()).map(|(a, b)| a * b).sum())
        .collect();
    let means: Vec<f64> = proj
        .chunks(cfg.m)
        .map(|c| c.iter().sum::<f64>() / cfg.m as f64)
        .collect();
    let var = |v: &[f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / (v.len() - 1) as f64
    };
    Ok(AveragingVariance {
        single: var(&proj),
        averaged: var(&means),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub weight_decay: f64,
    /// Test samples used for the conditional variance estimate.
    pub condvar_samples: usize,
    /// Nuisance draws per sample in the conditional variance estimate.
    pub condvar_l: usize,
    pub feature_avg: FeatureAvgConfig,
    pub sweeps: Vec<SweepSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            weight_decay: 1e-8,
            condvar_samples: 500,
            condvar_l: 100,
            feature_avg: FeatureAvgConfig::default(),
            sweeps: SweepSpec::defaults(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("eval.{key}"),
                detail,
            })
        };
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            );
        }
        if self.condvar_samples == 0 {
            return bad("condvar_samples", "must be positive".into());
        }
        if self.condvar_l < 2 {
            return bad("condvar_l", format!("must be at least 2, got {}", self.condvar_l));
        }
        self.feature_avg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe_mse: TaskMse,
    pub alpha_recovery: AlphaRecovery,
    pub condvar: Estimate,
    pub feature_averaging: Vec<FaPoint>,
    pub robustness: Vec<RobustnessCurve>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut vals = self.probe_mse.to_array().to_vec();
        vals.extend([
            self.alpha_recovery.loss,
            self.alpha_recovery.reference,
            self.condvar.mean,
        ]);
        vals.extend(self.feature_averaging.iter().flat_map(|p| p.mse.to_array()));
        vals.extend(
            self.robustness
                .iter()
                .flat_map(|c| c.points.iter().flat_map(|p| p.mse.to_array())),
        );
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: "evaluation report".into(),
            })
        }
    }
}

/// Evaluation of trained encoder parameters: probes fit on `train`,
/// reported on `test`.
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f64>,
    train: &SpiroDataset,
    test: &SpiroDataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if train.grid != test.grid || train.specs != test.specs {
        return Err(Error::invalid("train and test sets differ in grid or specs"));
    }
    let ztr = embed(model, params, train)?;
    let zte = embed(model, params, test)?;
    let probe = fit_linear_probe(&ztr, &train.factor_matrix(), cfg.weight_decay)?;
    let probe_mse = TaskMse::from_slice(&probe_mse(&probe, &zte, &test.factor_matrix())?)?;
    let alpha_recovery = alpha_recovery(
        &ztr,
        &train.nuisance_matrix(),
        &zte,
        &test.nuisance_matrix(),
        &train.specs,
        cfg.weight_decay,
    )?;
    let subset = subset(test, cfg.condvar_samples.min(test.len()));
    let condvar = condvar_report(model, params, &subset, cfg.condvar_l, train.seed)?;
    let feature_averaging = feature_average_curve(model, params, train, test, &cfg.feature_avg, cfg.weight_decay)?;
    let robustness = cfg
        .sweeps
        .iter()
        .map(|s| robustness_sweep(model, params, &probe, test, s))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        probe_mse,
        alpha_recovery,
        condvar,
        feature_averaging,
        robustness,
    };
    report.validate()?;
    Ok(report)
}

/// The first `n` samples, keeping their stream indices.
pub fn subset(data: &SpiroDataset, n: usize) -> SpiroDataset {
    SpiroDataset {
        factors: data.factors[..n].to_vec(),
        eval_nuisance: data.eval_nuisance[..n].to_vec(),
        ..data.clone()
    }
}
