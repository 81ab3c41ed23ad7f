//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `INVCLR_SCALE=desk` trains the full-size configuration (about twenty
//! minutes per seed pair on one core); the default `ci` scale trains a
//! smaller encoder on 16×16 images. `INVCLR_ACCEPTANCE_STRICT=1` makes any
//! failure exit nonzero. `INVCLR_ACCEPTANCE_DIR` keeps the run artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use invclr::autodiff::{central_difference, finite_diff_check, jvp, Graph, OpKind, Var};
use invclr::config::{parse_override, ExperimentConfig};
use invclr::eval::{
    averaging_variance, embed, ensemble_predict, fit_linear_probe, mean_of, squared_errors, view_embeddings,
    FeatureAvgConfig, ProbeModel,
};
use invclr::experiment::{generate_for, run_experiment, run_pair, split, PairArtifacts};
use invclr::model::{init_params, Model};
use invclr::objectives::{
    condvar_from_table, pairwise_variance, penalty_from_directional, population_variance, rademacher_enumeration,
    Estimate,
};
use invclr::rng::{stream, uniform, Purpose, StreamRng};
use invclr::spirograph::{SpiroDataset, SpiroSpecs};
use invclr::train::{build_batch, loss_and_grads};
use invclr::transforms::colour::StrengthSpec;
use invclr::{ParamStore64, Tensor};

type Outcome = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];

fn rand_tensor(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| uniform(rng, lo, hi))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn op_cases(rng: &mut StreamRng) -> Vec<(OpKind, Vec<Tensor<f64>>)> {
    let m = |rng: &mut StreamRng, r, c| rand_tensor(rng, &[r, c], -1.0, 1.0);
    let pos = |rng: &mut StreamRng, r, c| rand_tensor(rng, &[r, c], 0.5, 2.0);
    // Away from the kinks of relu and clamp.
    let off_kink = |rng: &mut StreamRng, centre: f64| {
        Tensor::from_fn(&[3, 4], |_| {
            let v = uniform(rng, 0.1, 0.4);
            if rng_sign(rng) {
                centre + v
            } else {
                centre - v
            }
        })
    };
    let mut cases = vec![
        (OpKind::Add, vec![m(rng, 3, 4), m(rng, 3, 4)]),
        (OpKind::Sub, vec![m(rng, 3, 4), m(rng, 3, 4)]),
        (OpKind::Mul, vec![m(rng, 3, 4), m(rng, 3, 4)]),
        (OpKind::Div, vec![m(rng, 3, 4), pos(rng, 3, 4)]),
        (OpKind::MatMul, vec![m(rng, 3, 4), m(rng, 4, 2)]),
        (OpKind::Transpose, vec![m(rng, 3, 4)]),
        (OpKind::Neg, vec![m(rng, 3, 4)]),
        (OpKind::Scale(1.7), vec![m(rng, 3, 4)]),
        (OpKind::Relu, vec![off_kink(rng, 0.0)]),
        (OpKind::Sin, vec![m(rng, 3, 4)]),
        (OpKind::Cos, vec![m(rng, 3, 4)]),
        (OpKind::Exp, vec![m(rng, 3, 4)]),
        (OpKind::Log, vec![pos(rng, 3, 4)]),
        (OpKind::Square, vec![m(rng, 3, 4)]),
        (OpKind::Sqrt, vec![pos(rng, 3, 4)]),
        (OpKind::Sum, vec![m(rng, 3, 4)]),
        (OpKind::Mean, vec![m(rng, 3, 4)]),
        (OpKind::SumAxis(0), vec![m(rng, 3, 4)]),
        (OpKind::SumAxis(1), vec![m(rng, 3, 4)]),
        (OpKind::L2Norm(1), vec![m(rng, 3, 4)]),
        (OpKind::LogSumExp(1), vec![m(rng, 3, 4)]),
        (OpKind::Concat(0), vec![m(rng, 3, 4), m(rng, 2, 4)]),
        (OpKind::Reshape(vec![4, 3]), vec![m(rng, 3, 4)]),
        (OpKind::Broadcast(vec![3, 4]), vec![m(rng, 1, 4)]),
        (OpKind::Dot, vec![m(rng, 3, 4), m(rng, 3, 4)]),
    ];
    let lo = off_kink(rng, 0.0);
    let hi = off_kink(rng, 1.0);
    let mid = Tensor::from_fn(&[3, 4], |_| uniform(rng, 0.1, 0.9));
    for t in [lo, hi, mid] {
        cases.push((OpKind::Clamp01, vec![t]));
    }
    cases
}

fn rng_sign(rng: &mut StreamRng) -> bool {
    uniform(rng, 0.0, 1.0) < 0.5
}

/// Worst reverse-mode and forward-mode relative error over every op.
fn op_errors() -> Result<(f64, f64, String), String> {
    let mut rng = stream(1, Purpose::Test, 1, 0, 0);
    let cases = op_cases(&mut rng);
    let (mut worst_rev, mut worst_fwd, mut worst_name) = (0.0f64, 0.0f64, String::new());
    for (kind, at) in cases {
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = at.iter().map(|x| g.constant(x.clone())).collect();
            let v = g.apply(kind.clone(), &vars).map_err(|e| e.to_string())?;
            g.shape(v).to_vec()
        };
        let weights = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
        let program = |g: &mut Graph<f64>, vars: &[Var]| {
            let out = g.apply(kind.clone(), vars)?;
            if g.shape(out).is_empty() {
                return Ok(out);
            }
            let w = g.constant(weights.clone());
            g.dot(out, w)
        };
        let rev = finite_diff_check(program, &at, 1e-6).map_err(|e| e.to_string())?;

        let dirs: Vec<Tensor<f64>> = at.iter().map(|x| rand_tensor(&mut rng, x.shape(), -1.0, 1.0)).collect();
        let mut g = Graph::new();
        let (_, deriv) = jvp(&mut g, &at, &dirs, |g, xs| g.forward_op(kind.clone(), xs)).map_err(|e| e.to_string())?;
        let analytic = g.value(deriv).clone();
        let value_at = |s: f64| -> Result<Tensor<f64>, String> {
            let mut g = Graph::new();
            let vars: Vec<Var> = at
                .iter()
                .zip(&dirs)
                .map(|(x, d)| g.constant(x.add(&d.scale(s)).unwrap()))
                .collect();
            let v = g.apply(kind.clone(), &vars).map_err(|e| e.to_string())?;
            Ok(g.value(v).clone())
        };
        let h = 1e-6;
        let (up, down) = (value_at(h)?, value_at(-h)?);
        let mut fwd = 0.0f64;
        for j in 0..up.numel() {
            let numeric = (up.data()[j] - down.data()[j]) / (2.0 * h);
            fwd = fwd.max((analytic.data()[j] - numeric).abs() / (numeric.abs() + h));
        }
        if rev.max(fwd) > worst_rev.max(worst_fwd) {
            worst_name = kind.name().to_string();
        }
        worst_rev = worst_rev.max(rev);
        worst_fwd = worst_fwd.max(fwd);
    }
    Ok((worst_rev, worst_fwd, worst_name))
}

fn gradient_cfg() -> ExperimentConfig {
    let over: Vec<_> = [
        "data.n_train=4",
        "data.n_test=2",
        "data.resolution=8",
        "encoder.input_shape=[3,8,8]",
        "encoder.hidden_sizes=[2]",
        "encoder.repr_dim=2",
        "head.hidden=8",
        "head.out_dim=4",
        "train.batch_size=2",
        "reg.lambda=1.0",
        "reg.L=2",
        "seed=3",
    ]
    .iter()
    .map(|s| parse_override(s).unwrap())
    .collect();
    ExperimentConfig::from_json_str("", &over).unwrap()
}

fn criterion_1() -> Outcome {
    let (rev, fwd, name) = op_errors()?;
    let cfg = gradient_cfg();
    let setup = cfg.setup();
    let data = generate_for(&cfg).map_err(|e| e.to_string())?;
    let model = Model::new(&cfg.encoder, &cfg.head).map_err(|e| e.to_string())?;
    let batch = build_batch(&data, &[0, 1], 0, &setup).map_err(|e| e.to_string())?;
    // First initialization whose two hidden units are active on every image,
    // so no difference step crosses a ReLU kink at a dead unit.
    let active = |p: &ParamStore64| -> bool {
        let hidden = |x: &Tensor<f64>| {
            let w = p.get("enc.0.w").unwrap();
            x.matmul(w).unwrap()
        };
        [&batch.view1, &batch.view2]
            .iter()
            .all(|x| hidden(x).data().iter().all(|&v| v > 1e-3))
    };
    let params = (0..1000)
        .map(|s| init_params(&cfg.encoder, &cfg.head, s).unwrap())
        .find(|p| active(p))
        .ok_or("no initialization with live hidden units")?;
    let (terms, _, grads) = loss_and_grads(&model, &params, &batch, &setup).map_err(|e| e.to_string())?;
    if terms.penalty.is_none() {
        return Err("penalty missing from the loss".into());
    }
    let analytic: Vec<f64> = grads.values().flat_map(|t| t.data().to_vec()).collect();
    let loss = |flat: &[f64]| -> invclr::Result<f64> {
        let p = params.with_flat(flat)?;
        Ok(loss_and_grads(&model, &p, &batch, &setup)?.1)
    };
    let numeric = central_difference(loss, &params.flatten(), 1e-6).map_err(|e| e.to_string())?;
    let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let pipeline = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-6 * scale.max(1.0)))
        .fold(0.0f64, f64::max);
    check(
        pipeline < 1e-3 && rev < 1e-6 && fwd < 1e-6,
        format!(
            "pipeline rel err {pipeline:.2e} over {} params; op checks reverse {rev:.2e}, forward {fwd:.2e} (worst {name})",
            analytic.len()
        ),
    )
}

// ---------------------------------------------------------------- 2, 3, 4, 5

fn criterion_2() -> Outcome {
    let mut rng = stream(2, Purpose::Test, 0, 0, 0);
    let f: Vec<f64> = (0..1000).map(|_| uniform(&mut rng, -3.0, 5.0)).collect();
    // Two-pass population variance as the oracle.
    let mean = f.iter().sum::<f64>() / 1000.0;
    let oracle = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
    let err = (pairwise_variance(&f) - population_variance(&f))
        .abs()
        .max((pairwise_variance(&f) - oracle).abs());
    check(err < 1e-12, format!("max error {err:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = stream(3, Purpose::Test, 0, 0, 0);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let d = 1 + t % 10;
        let a = rand_tensor(&mut rng, &[d, d], -1.0, 1.0);
        let sigma = a.matmul(&a.transpose().unwrap()).unwrap();
        let trace: f64 = (0..d).map(|i| sigma.data()[i * d + i]).sum();
        let e = rademacher_enumeration(&sigma).map_err(|e| e.to_string())?;
        worst = worst.max((e - trace).abs() / trace.max(1.0));
    }
    check(
        worst < 1e-12,
        format!("100 matrices, d <= 10, max rel error {worst:.2e}"),
    )
}

fn criterion_4() -> Outcome {
    // F linear in the six Spirograph nuisance parameters.
    let specs = SpiroSpecs::default().nuisance();
    let w = [0.8, -1.1, 0.6, 1.4, -0.9, 0.5];
    let (k, l) = (10_000, 4);
    let mut rng = stream(4, Purpose::Test, 0, 0, 0);
    let draw = |rng: &mut StreamRng| -> Vec<f64> { specs.iter().map(|s| s.sample(rng).unwrap()).collect() };
    let mut table = Vec::with_capacity(k);
    let mut deltas = Vec::with_capacity(k * l * 6);
    for _ in 0..k {
        table.push(
            (0..l)
                .map(|_| draw(&mut rng).iter().zip(w).map(|(a, w)| a * w).sum())
                .collect::<Vec<f64>>(),
        );
        let a = draw(&mut rng);
        for _ in 0..l {
            let b = draw(&mut rng);
            deltas.extend(b.iter().zip(&a).map(|(b, a)| b - a));
        }
    }
    let nested = condvar_from_table(&table).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let fdot = g.constant(Tensor::from_fn(&[k, 6], |i| w[i % 6]));
    let deltas = Tensor::new(&[k, l, 6], deltas).unwrap();
    let pen = penalty_from_directional(&mut g, fdot, &deltas, f64::INFINITY).map_err(|e| e.to_string())?;
    let per_sample: Vec<f64> = deltas
        .data()
        .chunks(l * 6)
        .map(|dd| {
            dd.chunks(6)
                .map(|d| d.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().powi(2))
                .sum::<f64>()
                / (2.0 * l as f64)
        })
        .collect();
    let est = Estimate::from_terms(&per_sample);
    let se = (nested.std_err.powi(2) + est.std_err.powi(2)).sqrt();
    let gap = (nested.mean - pen.value).abs();
    check(
        gap <= 3.0 * se && (est.mean - pen.value).abs() < 1e-10,
        format!(
            "nested {:.5} vs penalty {:.5}, |diff| {gap:.2e} <= 3 s.e. {:.2e}",
            nested.mean,
            pen.value,
            3.0 * se
        ),
    )
}

fn criterion_5() -> Outcome {
    let spiro = SpiroSpecs::default()
        .nuisance_reference_value()
        .map_err(|e| e.to_string())?;
    let v = StrengthSpec::default().variances();
    let colour = v.iter().sum::<f64>() / 4.0;
    // (1/6)(2²/12 + 2·0.6²/12 + 3·0.6²/12) and (1/4)(3·0.8²/12 + 0.2²/12).
    let spiro_exact = 29.0 / 360.0;
    let colour_exact = 49.0 / 1200.0;
    let printed = (format!("{spiro:.4}"), format!("{colour:.4}"));
    check(
        (spiro - spiro_exact).abs() < 1e-15
            && (colour - colour_exact).abs() < 1e-15
            && (colour - 0.040833).abs() < 5e-7
            && printed == ("0.0806".into(), "0.0408".into()),
        format!(
            "spirograph {spiro:.6}, colour {colour:.6}, printed {} and {}",
            printed.0, printed.1
        ),
    )
}

// ---------------------------------------------------------------- trained runs

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Ci,
    Desk,
}

fn scale() -> Scale {
    match std::env::var("INVCLR_SCALE").as_deref() {
        Ok("desk") => Scale::Desk,
        _ => Scale::Ci,
    }
}

fn scaled_config(scale: Scale, seed: u64) -> ExperimentConfig {
    let mut over: Vec<String> = match scale {
        Scale::Desk => vec![],
        Scale::Ci => [
            "data.n_train=2000",
            "data.n_test=500",
            "data.resolution=16",
            "encoder.input_shape=[3,16,16]",
            "encoder.hidden_sizes=[256,128]",
            "encoder.repr_dim=64",
            "head.hidden=64",
            "head.out_dim=32",
            "train.batch_size=128",
            "eval.condvar_samples=200",
            "eval.condvar_l=50",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    };
    over.push(format!("seed={seed}"));
    let over: Vec<_> = over.iter().map(|s| parse_override(s).unwrap()).collect();
    ExperimentConfig::from_json_str("", &over).unwrap()
}

struct Runs {
    scale: Scale,
    root: PathBuf,
    pairs: Vec<PairArtifacts>,
}

impl Runs {
    fn train(scale: Scale, root: &Path) -> Result<Self, String> {
        let mut pairs = Vec::new();
        for seed in SEEDS {
            let t = Instant::now();
            let cfg = scaled_config(scale, seed);
            let pair = run_pair(&cfg, &root.join(format!("seed_{seed}"))).map_err(|e| e.to_string())?;
            eprintln!("  trained seed {seed} pair in {:.0} s", t.elapsed().as_secs_f64());
            pairs.push(pair);
        }
        Ok(Runs {
            scale,
            root: root.to_path_buf(),
            pairs,
        })
    }

    fn data(&self, seed: u64) -> Result<(SpiroDataset, SpiroDataset), String> {
        let cfg = scaled_config(self.scale, seed);
        let data = generate_for(&cfg).map_err(|e| e.to_string())?;
        split(&cfg, &data).map_err(|e| e.to_string())
    }
}

fn criterion_6(runs: &Runs) -> Outcome {
    let c = &runs.pairs[0].comparison;
    check(
        c.condvar_ratio <= 0.2,
        format!(
            "conditional variance {:.5} (lambda 0) vs {:.5} (lambda {}), ratio {:.3} (need <= 0.2)",
            c.unregularized.condvar.mean, c.regularized.condvar.mean, c.lambda, c.condvar_ratio
        ),
    )
}

fn criterion_7(runs: &Runs) -> Outcome {
    let c = &runs.pairs[0].comparison;
    let (u, r) = (&c.unregularized.alpha_recovery, &c.regularized.alpha_recovery);
    check(
        r.loss >= 0.95 * r.reference && u.loss < r.loss,
        format!(
            "alpha recovery unregularized {:.4}, regularized {:.4}, reference {:.4} (need regularized >= {:.4})",
            u.loss,
            r.loss,
            r.reference,
            0.95 * r.reference
        ),
    )
}

fn criterion_8(runs: &Runs) -> Outcome {
    let n = runs.pairs.len() as f64;
    let mut u = [0.0; 4];
    let mut r = [0.0; 4];
    for p in &runs.pairs {
        for t in 0..4 {
            u[t] += p.comparison.unregularized.probe_mse.to_array()[t] / n;
            r[t] += p.comparison.regularized.probe_mse.to_array()[t] / n;
        }
    }
    let wins = (0..4).filter(|&t| r[t] <= u[t]).count();
    let names = ["m", "b", "sigma", "f_r"];
    let detail = (0..4)
        .map(|t| format!("{} {:.4}/{:.4}", names[t], r[t], u[t]))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        wins >= 3,
        format!("regularized/unregularized probe MSE over 3 seeds: {detail}; {wins} of 4 tasks"),
    )
}

fn fail(e: impl ToString) -> String {
    e.to_string()
}

/// Mean over tasks of squared error scaled by the train variance of the
/// task, one value per sample.
fn scaled_errors(probe: &ProbeModel, z: &Tensor<f64>, y: &Tensor<f64>, var: &[f64; 4]) -> Result<Vec<f64>, String> {
    let se = squared_errors(probe, z, y).map_err(fail)?;
    Ok((0..z.shape()[0])
        .map(|i| se.row(i).iter().zip(var).map(|(e, v)| e / v).sum::<f64>() / 4.0)
        .collect())
}

fn column_vars(y: &Tensor<f64>) -> [f64; 4] {
    let n = y.shape()[0] as f64;
    let mut out = [0.0; 4];
    for (t, o) in out.iter_mut().enumerate() {
        let col: Vec<f64> = (0..y.shape()[0]).map(|i| y.row(i)[t]).collect();
        let mu = col.iter().sum::<f64>() / n;
        *o = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    }
    out
}

fn criterion_9(runs: &Runs) -> Outcome {
    let cfg = scaled_config(runs.scale, 0);
    let model = Model::new(&cfg.encoder, &cfg.head).map_err(fail)?;
    let params: &ParamStore64 = &runs.pairs[0].unregularized.params;
    let (train, test) = runs.data(0)?;
    let wd = cfg.eval.weight_decay;
    let (ytr, yte) = (train.factor_matrix(), test.factor_matrix());
    let var = column_vars(&ytr);

    // (a) probe fit once on single-view train representations.
    let probe = fit_linear_probe(&embed(&model, params, &train).map_err(fail)?, &ytr, wd).map_err(fail)?;
    let sub = invclr::eval::subset(&test, 50.min(test.len()));
    let ysub = sub.factor_matrix();
    let fa8 = FeatureAvgConfig { m: 8, seed: 1 };
    let mut diffs = Vec::with_capacity(200);
    for set in 0..200 {
        let views = view_embeddings(&model, params, &sub, &fa8, set).map_err(fail)?;
        let loss = |m: usize| -> Result<f64, String> {
            let e = scaled_errors(&probe, &mean_of(&views[..m]).map_err(fail)?, &ysub, &var)?;
            Ok(e.iter().sum::<f64>() / e.len() as f64)
        };
        diffs.push(loss(8)? - loss(2)?);
    }
    let a = Estimate::from_terms(&diffs);
    let a_ok = a.mean <= 3.0 * a.std_err;

    // (b) probes refit on averaged train representations.
    let fa16 = FeatureAvgConfig { m: 16, seed: 0 };
    let tr_views = view_embeddings(&model, params, &train, &fa16, 0).map_err(fail)?;
    let te_views = view_embeddings(&model, params, &test, &fa16, 0).map_err(fail)?;
    let mut curve = Vec::new();
    for m in [1, 2, 4, 8, 16] {
        let p = fit_linear_probe(&mean_of(&tr_views[..m]).map_err(fail)?, &ytr, wd).map_err(fail)?;
        curve.push(scaled_errors(&p, &mean_of(&te_views[..m]).map_err(fail)?, &yte, &var)?);
    }
    let mut b_ok = true;
    let mut b_detail = Vec::new();
    for w in curve.windows(2) {
        let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(x, y)| x - y).collect();
        let e = Estimate::from_terms(&d);
        b_ok &= e.mean <= 3.0 * e.std_err;
    }
    for c in &curve {
        b_detail.push(format!("{:.4}", c.iter().sum::<f64>() / c.len() as f64));
    }

    // (c) Var[e·z⁽⁸⁾] against Var[e·z⁽¹⁾]/8 per input.
    let ratios = (0..20)
        .map(|i| {
            let v = averaging_variance(&model, params, &test, i, &FeatureAvgConfig { m: 8, seed: 2 }, 200)?;
            Ok(v.averaged / v.single - 1.0 / 8.0)
        })
        .collect::<invclr::Result<Vec<f64>>>()
        .map_err(fail)?;
    let c = Estimate::from_terms(&ratios);
    let c_ok = c.mean.abs() <= 3.0 * c.std_err;

    check(
        a_ok && b_ok && c_ok,
        format!(
            "(a) loss(M=8) - loss(M=2) = {:.2e} +- {:.1e} {}; (b) refit curve [{}] {}; (c) Var ratio - 1/8 = {:.4} +- {:.4} {}",
            a.mean,
            a.std_err,
            ok_word(a_ok),
            b_detail.join(", "),
            ok_word(b_ok),
            c.mean,
            c.std_err,
            ok_word(c_ok)
        ),
    )
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn criterion_10(runs: &Runs) -> Outcome {
    let cfg = scaled_config(runs.scale, 0);
    let model = Model::new(&cfg.encoder, &cfg.head).map_err(fail)?;
    let params = &runs.pairs[0].unregularized.params;
    let (train, _) = runs.data(0)?;
    let data = invclr::eval::subset(&train, 1000.min(train.len()));
    let probe = fit_linear_probe(
        &embed(&model, params, &train).map_err(fail)?,
        &train.factor_matrix(),
        1e-8,
    )
    .map_err(fail)?;
    let views = view_embeddings(&model, params, &data, &FeatureAvgConfig { m: 4, seed: 7 }, 0).map_err(fail)?;
    let ens = ensemble_predict(&probe, &views).map_err(fail)?;
    let fa = probe.predict(&mean_of(&views).map_err(fail)?).map_err(fail)?;
    let diff = ens
        .data()
        .iter()
        .zip(fa.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    check(
        diff < 1e-10,
        format!("{} samples, M = 4, max |difference| {diff:.2e}", data.len()),
    )
}

fn criterion_11(runs: &Runs) -> Outcome {
    let degradation = |reg: bool| -> Result<f64, String> {
        let mut total = 0.0;
        for p in &runs.pairs {
            let report = if reg {
                &p.comparison.regularized
            } else {
                &p.comparison.unregularized
            };
            let curve = report
                .robustness
                .iter()
                .find(|c| c.name == "background")
                .ok_or("no background sweep in the report")?;
            total += curve.degradation(0.4).map_err(fail)?;
        }
        Ok(total / runs.pairs.len() as f64)
    };
    let (u, r) = (degradation(false)?, degradation(true)?);
    check(
        r <= u,
        format!(
            "mean degradation at S = 0.4 over 3 seeds: regularized {:+.3}, unregularized {:+.3}",
            r, u
        ),
    )
}

fn criterion_12(runs: &Runs) -> Outcome {
    let mut cfg = scaled_config(runs.scale, 0);
    cfg.reg.lambda = 0.0;
    let again = run_experiment(&cfg, &runs.root.join("repeat")).map_err(fail)?;
    let first = &runs.pairs[0].unregularized;
    let same = |a: &Path, b: &Path| std::fs::read(a).ok() == std::fs::read(b).ok() && a.exists();
    let files = [
        ("metrics", same(&first.metrics, &again.metrics)),
        ("report", same(&first.report, &again.report)),
        ("checkpoint", same(&first.checkpoint, &again.checkpoint)),
    ];
    let differing: Vec<&str> = files.iter().filter(|f| !f.1).map(|f| f.0).collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            "repeated lambda 0 run: metrics, report and checkpoint are byte-identical".into()
        } else {
            format!("repeated run differs in {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let scale = scale();
    let keep = std::env::var_os("INVCLR_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    println!(
        "acceptance at {} scale",
        if scale == Scale::Desk { "desk" } else { "ci" }
    );

    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", criterion_1()),
        (2, "variance identity", criterion_2()),
        (3, "Rademacher trace identity", criterion_3()),
        (4, "estimator equivalence", criterion_4()),
        (5, "reference values", criterion_5()),
    ];
    for r in &results {
        report(r);
    }

    let trained = Runs::train(scale, &root);
    let later: Vec<(usize, &str, fn(&Runs) -> Outcome)> = vec![
        (6, "invariance effect", criterion_6),
        (7, "alpha recovery", criterion_7),
        (8, "downstream ordering", criterion_8),
        (9, "feature averaging", criterion_9),
        (10, "ensembling coincidence", criterion_10),
        (11, "robustness trend", criterion_11),
        (12, "determinism", criterion_12),
    ];
    for (n, name, f) in later {
        let outcome = match &trained {
            Ok(runs) => f(runs),
            Err(e) => Err(format!("training failed: {e}")),
        };
        let r = (n, name, outcome);
        report(&r);
        results.push(r);
    }

    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("INVCLR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn report((n, name, outcome): &(usize, &str, Outcome)) {
    match outcome {
        Ok(d) => println!("criterion {n:>2} {name}: PASS ({d})"),
        Err(d) => println!("criterion {n:>2} {name}: FAIL ({d})"),
    }
}
