use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use invclr::config::{load_config, parse_override, ExperimentConfig};
use invclr::eval::{SweepMode, SweepSpec};
use invclr::experiment::{check_dataset, evaluate_stage, run_experiment, run_pair, train_stage, Stage, StageError};
use invclr::io::{
    read_checkpoint, read_dataset, write_checkpoint, write_dataset, write_json, Checkpoint, Precision, Provenance,
};
use invclr::spirograph::generate_split;
use invclr::Error;

#[derive(Parser)]
#[command(
    name = "invclr",
    version,
    about = "Invariance-regularized contrastive learning on Spirograph images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set reg.lambda=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(String, Value)]) -> Result<ExperimentConfig, Error> {
        let mut over = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        over.extend_from_slice(extra);
        match &self.config {
            Some(p) => load_config(p, &over),
            None => ExperimentConfig::from_value(Value::Null, &over, "command line"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample factors and evaluation nuisances and write a dataset file.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of samples (default: n_train + n_test).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        /// Move a parameter's support, e.g. `--shift h=0.3`.
        #[arg(long, value_name = "NAME=S")]
        shift: Vec<String>,
        /// Extend a parameter's support on both sides, e.g. `--widen background=0.2`.
        #[arg(long, value_name = "NAME=S")]
        widen: Vec<String>,
    },
    /// Train an encoder and write a checkpoint and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file (generated from the config when absent).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Store checkpoint tensors as 32-bit floats.
        #[arg(long)]
        f32: bool,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Largest number of draws in the feature averaging curve.
        #[arg(long = "fa-max-M")]
        fa_max_m: Option<usize>,
        /// Robustness sweep `name:shift|widen:v1,v2,...`; replaces the defaults.
        #[arg(long)]
        sweep: Vec<String>,
        /// Override a key of the checkpoint's config, e.g. `--set eval.condvar_l=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train and evaluate with lambda = 0 and the configured lambda.
    Pair {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate, train and evaluate in one directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

struct Failure {
    stage: Option<Stage>,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { stage: None, error }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            stage: Some(e.stage),
            error: e.source,
        }
    }
}

fn at(stage: Stage) -> impl Fn(Error) -> Failure {
    move |error| Failure {
        stage: Some(stage),
        error,
    }
}

fn parse_sweep(s: &str) -> Result<SweepSpec, Error> {
    let bad = || Error::Config {
        key: "eval.sweeps".into(),
        detail: format!("sweep {s:?} is not name:shift|widen:v1,v2,..."),
    };
    let mut parts = s.splitn(3, ':');
    let (name, mode, values) = (parts.next(), parts.next(), parts.next());
    let (Some(name), Some(mode), Some(values)) = (name, mode, values) else {
        return Err(bad());
    };
    let mode = match mode {
        "shift" => SweepMode::Shift,
        "widen" => SweepMode::Widen,
        _ => return Err(bad()),
    };
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepSpec {
        name: name.to_string(),
        mode,
        values,
    })
}

fn spec_override(kind: &str, arg: &str) -> Result<(String, f64), Error> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::Config {
        key: kind.into(),
        detail: format!("{arg:?} is not name=value"),
    })?;
    let v = v.parse::<f64>().map_err(|_| Error::Config {
        key: format!("{kind}.{k}"),
        detail: format!("{v:?} is not a number"),
    })?;
    Ok((k.to_string(), v))
}

fn data_for(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<invclr::spirograph::SpiroDataset, Error> {
    match path {
        Some(p) => {
            let (data, _) = read_dataset(p)?;
            check_dataset(cfg, &data)?;
            Ok(data)
        }
        None => invclr::experiment::generate_for(cfg),
    }
}

fn run(cli: Cli) -> Result<Value, Failure> {
    match cli.command {
        Command::Generate {
            cfg,
            n,
            seed,
            out,
            resolution,
            first_index,
            shift,
            widen,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(("seed".to_string(), json!(s)));
            }
            if let Some(r) = resolution {
                extra.push(("data.resolution".into(), json!(r)));
                extra.push(("encoder.input_shape".into(), json!([3, r, r])));
            }
            let mut config = cfg.load(&extra)?;
            for arg in &shift {
                let (k, v) = spec_override("shift", arg)?;
                config.data.specs = config.data.specs.shift(&k, v)?;
            }
            for arg in &widen {
                let (k, v) = spec_override("widen", arg)?;
                config.data.specs = config.data.specs.widen(&k, v)?;
            }
            config.validate()?;
            let n = n.unwrap_or(config.data.n_train + config.data.n_test);
            let data = generate_split(n, config.seed, first_index, config.data.specs, config.data.grid()?)
                .map_err(at(Stage::Generate))?;
            write_dataset(&out, &data, &Provenance::new(&config)).map_err(at(Stage::Generate))?;
            Ok(json!({"dataset": out, "n": n, "seed": config.seed}))
        }
        Command::Train {
            cfg,
            data,
            out,
            metrics,
            f32,
        } => {
            let config = cfg.load(&[])?;
            let dataset = data_for(&config, data.as_deref()).map_err(at(Stage::Generate))?;
            let (params, records) = train_stage(&config, &dataset, &metrics).map_err(at(Stage::Train))?;
            let ckpt = Checkpoint {
                params,
                step: records.last().map_or(0, |r| r.step),
                provenance: Provenance::new(&config),
            };
            let precision = if f32 { Precision::F32 } else { Precision::F64 };
            write_checkpoint(&out, &ckpt, precision).map_err(at(Stage::Train))?;
            Ok(json!({"checkpoint": out, "metrics": metrics, "steps": ckpt.step, "seed": config.seed}))
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            fa_max_m,
            sweep,
            set,
        } => {
            let ckpt = read_checkpoint(&ckpt)?;
            let mut over = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
            if let Some(m) = fa_max_m {
                over.push(("eval.feature_avg.M".into(), json!(m)));
            }
            if !sweep.is_empty() {
                let sweeps = sweep.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>, _>>()?;
                over.push(("eval.sweeps".into(), serde_json::to_value(sweeps).map_err(Error::from)?));
            }
            let config = ExperimentConfig::from_value(ckpt.provenance.config.clone(), &over, "checkpoint config")?;
            let dataset = data_for(&config, data.as_deref()).map_err(at(Stage::Generate))?;
            let report = evaluate_stage(&config, &ckpt.params, &dataset).map_err(at(Stage::Evaluate))?;
            write_json(&out, "report", &Provenance::new(&config), &report).map_err(at(Stage::Evaluate))?;
            Ok(json!({"report": out, "probe_mse": report.probe_mse, "seed": config.seed}))
        }
        Command::Pair { cfg, out_dir } => {
            let config = cfg.load(&[])?;
            let pair = run_pair(&config, &out_dir)?;
            Ok(json!({
                "comparison": pair.comparison_path,
                "condvar_ratio": pair.comparison.condvar_ratio,
                "mse_delta": pair.comparison.mse_delta,
            }))
        }
        Command::Run { cfg, out_dir } => {
            let config = cfg.load(&[])?;
            let a = run_experiment(&config, &out_dir)?;
            Ok(json!({"report": a.report, "checkpoint": a.checkpoint, "metrics": a.metrics, "dataset": a.dataset}))
        }
    }
}

fn error_json(f: &Failure) -> Value {
    let mut err = json!({
        "kind": f.error.kind(),
        "message": f.error.to_string(),
    });
    if let Some(stage) = f.stage {
        err["stage"] = json!(stage);
    }
    match &f.error {
        Error::Config { key, .. } => err["key"] = json!(key),
        Error::Format { path, offset, .. } => {
            err["path"] = json!(path);
            err["offset"] = json!(offset);
        }
        Error::Io { path, .. } => err["path"] = json!(path),
        _ => {}
    }
    json!({ "error": err })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = json!({"error": {"kind": "usage", "message": e.to_string()}});
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", error_json(&f));
            ExitCode::FAILURE
        }
    }
}
