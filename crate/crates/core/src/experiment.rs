//! End-to-end runs: generate, train, evaluate, and the paired
//! unregularized/regularized comparison.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, TaskMse};
use crate::io::{
    read_dataset, write_checkpoint, write_dataset, write_json, Checkpoint, MetricsWriter, Precision, Provenance,
};
use crate::model::Model;
use crate::spirograph::{generate_dataset, SpiroDataset};
use crate::train::{train, MetricsRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Train,
    Evaluate,
    Compare,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Compare => "compare",
        })
    }
}

#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Samples `start..start + len`, keeping their stream indices.
pub fn slice(data: &SpiroDataset, start: usize, len: usize) -> Result<SpiroDataset> {
    if start + len > data.len() || len == 0 {
        return Err(Error::invalid(format!(
            "samples {start}..{} outside a dataset of {}",
            start + len,
            data.len()
        )));
    }
    Ok(SpiroDataset {
        first_index: data.first_index + start as u64,
        factors: data.factors[start..start + len].to_vec(),
        eval_nuisance: data.eval_nuisance[start..start + len].to_vec(),
        ..data.clone()
    })
}

/// Train and test parts of a dataset holding `n_train + n_test` samples.
pub fn split(cfg: &ExperimentConfig, data: &SpiroDataset) -> Result<(SpiroDataset, SpiroDataset)> {
    Ok((
        slice(data, 0, cfg.data.n_train)?,
        slice(data, cfg.data.n_train, cfg.data.n_test)?,
    ))
}

pub fn generate_for(cfg: &ExperimentConfig) -> Result<SpiroDataset> {
    generate_dataset(
        cfg.data.n_train + cfg.data.n_test,
        cfg.seed,
        cfg.data.specs,
        cfg.data.grid()?,
    )
}

/// Checks that a loaded dataset is the one `cfg` describes.
pub fn check_dataset(cfg: &ExperimentConfig, data: &SpiroDataset) -> Result<()> {
    let mismatch = |key: &str, detail: String| {
        Err(Error::Config {
            key: key.into(),
            detail,
        })
    };
    if data.seed != cfg.seed {
        return mismatch("seed", format!("dataset seed {} differs from {}", data.seed, cfg.seed));
    }
    if data.grid != cfg.data.grid()? {
        return mismatch("data.resolution", format!("dataset grid {:?} differs", data.grid));
    }
    if data.specs != cfg.data.specs {
        return mismatch("data.specs", "dataset specs differ from the config".into());
    }
    if data.len() < cfg.data.n_train + cfg.data.n_test {
        return mismatch(
            "data.n_train",
            format!(
                "dataset holds {} samples, config needs {}",
                data.len(),
                cfg.data.n_train + cfg.data.n_test
            ),
        );
    }
    Ok(())
}

/// The configured dataset file if one is set, otherwise a fresh dataset
/// written to `out`.
pub fn load_or_generate(cfg: &ExperimentConfig, out: &Path) -> Result<(SpiroDataset, PathBuf)> {
    match &cfg.data.path {
        Some(p) => {
            let (data, _) = read_dataset(p)?;
            check_dataset(cfg, &data)?;
            Ok((data, p.clone()))
        }
        None => {
            let data = generate_for(cfg)?;
            write_dataset(out, &data, &Provenance::new(cfg))?;
            Ok((data, out.to_path_buf()))
        }
    }
}

/// Trains on the training part of `data`, streaming metrics to
/// `metrics`. The metrics file is kept even when training aborts.
pub fn train_stage(
    cfg: &ExperimentConfig,
    data: &SpiroDataset,
    metrics: &Path,
) -> Result<(ParamStore<f64>, Vec<MetricsRecord>)> {
    let (train_part, _) = split(cfg, data)?;
    let mut writer = MetricsWriter::create(metrics, &Provenance::new(cfg))?;
    let result = train(&train_part, &cfg.setup(), &mut writer);
    writer.finish()?;
    let outcome = result.map_err(|abort| Error::invalid(abort.to_string()))?;
    Ok((outcome.params, outcome.records))
}

pub fn evaluate_stage(cfg: &ExperimentConfig, params: &ParamStore<f64>, data: &SpiroDataset) -> Result<EvalReport> {
    let (train_part, test_part) = split(cfg, data)?;
    let model = Model::new(&cfg.encoder, &cfg.head)?;
    evaluate(&model, params, &train_part, &test_part, &cfg.eval)
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub params: ParamStore<f64>,
    pub records: Vec<MetricsRecord>,
    pub eval: EvalReport,
}

fn train_and_evaluate(
    cfg: &ExperimentConfig,
    data: &SpiroDataset,
    dataset: PathBuf,
    dir: &Path,
) -> std::result::Result<RunArtifacts, StageError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .at(Stage::Train)?;
    let prov = Provenance::new(cfg);
    let metrics = dir.join("metrics.jsonl");
    let checkpoint = dir.join("model.ckpt");
    let report = dir.join("report.json");
    let (params, records) = train_stage(cfg, data, &metrics).at(Stage::Train)?;
    let ckpt = Checkpoint {
        params,
        step: records.last().map_or(0, |r| r.step),
        provenance: prov.clone(),
    };
    write_checkpoint(&checkpoint, &ckpt, Precision::F64).at(Stage::Train)?;
    let eval = evaluate_stage(cfg, &ckpt.params, data).at(Stage::Evaluate)?;
    write_json(&report, "report", &prov, &eval).at(Stage::Evaluate)?;
    Ok(RunArtifacts {
        dataset,
        checkpoint,
        metrics,
        report,
        params: ckpt.params,
        records,
        eval,
    })
}

/// Generate (unless a dataset file is configured), train and evaluate,
/// writing every artifact under `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> std::result::Result<RunArtifacts, StageError> {
    cfg.validate().at(Stage::Generate)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .at(Stage::Generate)?;
    let (data, dataset) = load_or_generate(cfg, &dir.join("dataset.bin")).at(Stage::Generate)?;
    train_and_evaluate(cfg, &data, dataset, dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lambda: f64,
    /// Regularized over unregularized conditional variance.
    pub condvar_ratio: f64,
    /// Regularized minus unregularized probe MSE.
    pub mse_delta: TaskMse,
    pub alpha_recovery_delta: f64,
    pub unregularized: EvalReport,
    pub regularized: EvalReport,
}

impl Comparison {
    pub fn new(lambda: f64, unregularized: EvalReport, regularized: EvalReport) -> Self {
        let (u, r) = (unregularized.probe_mse.to_array(), regularized.probe_mse.to_array());
        let delta: Vec<f64> = r.iter().zip(&u).map(|(a, b)| a - b).collect();
        Comparison {
            lambda,
            condvar_ratio: regularized.condvar.mean / unregularized.condvar.mean,
            mse_delta: TaskMse::from_slice(&delta).expect("four tasks"),
            alpha_recovery_delta: regularized.alpha_recovery.loss - unregularized.alpha_recovery.loss,
            unregularized,
            regularized,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairArtifacts {
    pub unregularized: RunArtifacts,
    pub regularized: RunArtifacts,
    pub comparison: Comparison,
    pub comparison_path: PathBuf,
}

/// Runs `λ = 0` and the configured `λ > 0` on one dataset with the same
/// seed, so both see identical views, and writes a comparison report.
pub fn run_pair(cfg: &ExperimentConfig, dir: &Path) -> std::result::Result<PairArtifacts, StageError> {
    cfg.validate().at(Stage::Generate)?;
    if cfg.reg.lambda <= 0.0 {
        return Err(Error::Config {
            key: "reg.lambda".into(),
            detail: "a paired run needs a positive lambda".into(),
        })
        .at(Stage::Generate);
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .at(Stage::Generate)?;
    let (data, dataset) = load_or_generate(cfg, &dir.join("dataset.bin")).at(Stage::Generate)?;
    let mut base = cfg.clone();
    base.reg.lambda = 0.0;
    let unregularized = train_and_evaluate(&base, &data, dataset.clone(), &dir.join("lambda_0"))?;
    let regularized = train_and_evaluate(cfg, &data, dataset, &dir.join("regularized"))?;
    let comparison = Comparison::new(cfg.reg.lambda, unregularized.eval.clone(), regularized.eval.clone());
    let comparison_path = dir.join("comparison.json");
    write_json(&comparison_path, "comparison", &Provenance::new(cfg), &comparison).at(Stage::Compare)?;
    Ok(PairArtifacts {
        unregularized,
        regularized,
        comparison,
        comparison_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_override;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let over = [
            "data.n_train=24",
            "data.n_test=8",
            "data.resolution=8",
            "encoder.input_shape=[3,8,8]",
            "encoder.hidden_sizes=[16]",
            "encoder.repr_dim=8",
            "head.hidden=8",
            "head.out_dim=3",
            "train.batch_size=8",
            "train.epochs=1",
            "reg.L=2",
            "eval.condvar_samples=3",
            "eval.condvar_l=2",
            "eval.feature_avg.M=2",
            "seed=5",
        ]
        .iter()
        .map(|s| parse_override(s).unwrap())
        .collect::<Vec<_>>();
        ExperimentConfig::from_json_str("", &over).unwrap()
    }

    #[test]
    fn slices_keep_stream_indices() {
        let cfg = tiny_config();
        let data = generate_for(&cfg).unwrap();
        let (tr, te) = split(&cfg, &data).unwrap();
        assert_eq!((tr.len(), te.len(), te.first_index), (24, 8, 24));
        assert_eq!(te.eval_nuisance[0], data.eval_nuisance[24]);
        assert!(slice(&data, 30, 5).is_err());
    }

    #[test]
    fn pair_writes_all_artifacts_and_is_deterministic() {
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run_pair(&cfg, d1.path()).unwrap();
        let b = run_pair(&cfg, d2.path()).unwrap();
        for run in [&a.unregularized, &a.regularized] {
            for p in [&run.dataset, &run.checkpoint, &run.metrics, &run.report] {
                assert!(p.exists(), "{p:?}");
            }
        }
        assert!(a.unregularized.records.iter().all(|r| r.penalty.is_none()));
        assert!(a.regularized.records.iter().all(|r| r.penalty.is_some()));
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&a.comparison_path), read(&b.comparison_path));
        assert_eq!(read(&a.regularized.metrics), read(&b.regularized.metrics));
        let c = &a.comparison;
        assert_eq!(
            c.condvar_ratio,
            c.regularized.condvar.mean / c.unregularized.condvar.mean
        );
        assert_eq!(c.mse_delta.m, c.regularized.probe_mse.m - c.unregularized.probe_mse.m);
    }

    #[test]
    fn stage_failure_names_the_stage_and_keeps_artifacts() {
        let mut cfg = tiny_config();
        cfg.train.lr_max = 1e300;
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.stage, Stage::Train, "{err}");
        assert!(err.to_string().starts_with("stage train failed"));
        assert!(dir.path().join("dataset.bin").exists());
        assert!(dir.path().join("metrics.jsonl").exists());
        assert!(!dir.path().join("model.ckpt").exists());
    }

    #[test]
    fn configured_dataset_must_match() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &generate_for(&cfg).unwrap(), &Provenance::new(&cfg)).unwrap();
        let mut other = cfg.clone();
        other.data.path = Some(path.clone());
        assert!(load_or_generate(&other, &dir.path().join("unused.bin")).is_ok());
        other.seed = 6;
        let err = load_or_generate(&other, &dir.path().join("unused.bin")).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "seed"), "{err}");
    }

    #[test]
    fn pair_rejects_zero_lambda() {
        let mut cfg = tiny_config();
        cfg.reg.lambda = 0.0;
        let dir = tempfile::tempdir().unwrap();
        assert!(run_pair(&cfg, dir.path()).is_err());
    }
}
