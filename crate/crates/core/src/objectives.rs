//! Contrastive loss, the scalar projection `F`, the nested Monte Carlo
//! conditional variance and the gradient penalty built from directional
//! derivatives of `F` with respect to the transformation parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualVar, Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transforms::Transform;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub tau: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig { tau: 0.5 }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config {
                key: "similarity.tau".into(),
                detail: format!("must be positive, got {}", self.tau),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub lambda: f64,
    /// Inner sample count `L` of fresh `α′` per batch element.
    #[serde(rename = "L")]
    pub l: usize,
    pub clip: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda: 0.01,
            l: 100,
            clip: 1000.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("reg.{key}"),
                detail,
            })
        };
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("must be a non-negative number, got {}", self.lambda));
        }
        if self.l < 1 {
            return bad("L", "must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return bad("clip", format!("must be positive, got {}", self.clip));
        }
        Ok(())
    }
}

/// A map from representations (or images) to representations, applied
/// row-wise to a batch and propagating forward-mode tangents.
pub trait Encoder<T: Real> {
    fn encode(&self, g: &mut Graph<T>, x: &DualVar) -> Result<DualVar>;
}

/// The projection head `g_φ`, applied to primal representations only.
pub trait Projection<T: Real> {
    fn project(&self, g: &mut Graph<T>, z: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Real> Encoder<T> for Identity {
    fn encode(&self, _g: &mut Graph<T>, x: &DualVar) -> Result<DualVar> {
        Ok(x.clone())
    }
}

impl<T: Real> Projection<T> for Identity {
    fn project(&self, _g: &mut Graph<T>, z: Var) -> Result<Var> {
        Ok(z)
    }
}

fn check_rows<T: Real>(g: &Graph<T>, v: Var, what: &'static str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [k, d] => Ok((*k, *d)),
        other => Err(Error::shape(what, other, &[0, 0])),
    }
}

/// Row norms of `x` (`K×d → K×1`), rejecting zero rows.
fn row_norms<T: Real>(g: &mut Graph<T>, x: Var, what: &str) -> Result<Var> {
    let n = g.l2norm(x, 1)?;
    if let Some(i) = g.value(n).data().iter().position(|v| !(*v > T::zero())) {
        return Err(Error::Domain {
            op: "normalize",
            detail: format!("{what} row {i} has zero norm"),
        });
    }
    Ok(n)
}

fn normalize_rows<T: Real>(g: &mut Graph<T>, x: Var, what: &str) -> Result<Var> {
    let n = row_norms(g, x, what)?;
    g.div_bcast(x, n)
}

/// `cos(g_φ(z), g_φ(z′)) / τ` for single representations (`1×d` or `d`).
pub fn similarity<T: Real, P: Projection<T>>(
    g: &mut Graph<T>,
    z: Var,
    z2: Var,
    head: &P,
    cfg: &SimilarityConfig,
) -> Result<Var> {
    if g.shape(z) != g.shape(z2) {
        return Err(Error::shape("similarity", g.shape(z), g.shape(z2)));
    }
    let as_row = |g: &mut Graph<T>, v: Var| {
        let d = g.value(v).numel();
        g.reshape(v, &[1, d])
    };
    let (a, b) = (as_row(g, z)?, as_row(g, z2)?);
    let (pa, pb) = (head.project(g, a)?, head.project(g, b)?);
    let na = normalize_rows(g, pa, "projected representation")?;
    let nb = normalize_rows(g, pb, "projected representation")?;
    let c = g.dot(na, nb)?;
    g.scale(c, 1.0 / cfg.tau)
}

/// InfoNCE over `K` matched rows of already projected vectors:
/// `−mean_i s(h_i, h′_i) + mean_i log Σ_j exp s(h_i, h′_j)`.
pub fn infonce<T: Real>(g: &mut Graph<T>, h1: Var, h2: Var, cfg: &SimilarityConfig) -> Result<Var> {
    let (k, d) = check_rows(g, h1, "infonce")?;
    if g.shape(h2) != [k, d] {
        return Err(Error::shape("infonce", &[k, d], g.shape(h2)));
    }
    if k == 0 {
        return Err(Error::invalid("infonce needs at least one pair"));
    }
    let a = normalize_rows(g, h1, "projected representation")?;
    let b = normalize_rows(g, h2, "projected representation")?;
    let bt = g.transpose(b)?;
    let cos = g.matmul(a, bt)?;
    let s = g.scale(cos, 1.0 / cfg.tau)?;
    let lse = g.logsumexp(s, 1)?;
    let contrast = g.mean(lse)?;
    let ab = g.mul(a, b)?;
    let diag = g.sum(ab)?;
    let matched = g.scale(diag, -1.0 / (cfg.tau * k as f64))?;
    g.add(matched, contrast)
}

/// InfoNCE applied after the projection head.
pub fn infonce_with_head<T: Real, P: Projection<T>>(
    g: &mut Graph<T>,
    z1: Var,
    z2: Var,
    head: &P,
    cfg: &SimilarityConfig,
) -> Result<Var> {
    let h1 = head.project(g, z1)?;
    let h2 = head.project(g, z2)?;
    infonce(g, h1, h2, cfg)
}

/// Row-wise `F_i = e_i · z_i / ‖z_i‖` (`K×d → K×1`) with tangents.
pub fn scalar_projection<T: Real>(g: &mut Graph<T>, z: &DualVar, e: Var) -> Result<DualVar> {
    let (k, d) = check_rows(g, z.primal, "scalar projection")?;
    if g.shape(e) != [k, d] {
        return Err(Error::shape("scalar projection e", &[k, d], g.shape(e)));
    }
    row_norms(g, z.primal, "representation")?;
    let norm = g.d_unary(OpKind::L2Norm(1), z)?;
    let unit = g.d_div_bcast(z, &norm)?;
    let proj = g.d_mul(&unit, &DualVar::primal(e))?;
    g.d_unary(OpKind::SumAxis(1), &proj)
}

/// The penalty of one batch and whether it hit the clip.
#[derive(Clone, Copy, Debug)]
pub struct PenaltyTerm {
    pub var: Var,
    pub value: f64,
    pub clipped: bool,
}

/// `(1/K) Σ_i (1/2L) Σ_j (Σ_c Ḟ_ic Δ_ijc)²`, clipped from above.
///
/// `fdot` is `K×C` (the derivative of `F_i` along each coordinate of `α`)
/// and `deltas` is `K×L×C` with `Δ_ij = α′_ij − α_i`. Above the clip the
/// value is replaced by the constant `clip`, which carries no gradient.
pub fn penalty_from_directional<T: Real>(
    g: &mut Graph<T>,
    fdot: Var,
    deltas: &Tensor<T>,
    clip: f64,
) -> Result<PenaltyTerm> {
    let (k, c) = check_rows(g, fdot, "penalty")?;
    let l = match deltas.shape() {
        [dk, l, dc] if *dk == k && *dc == c => *l,
        other => return Err(Error::shape("penalty deltas", &[k, 0, c], other)),
    };
    if l == 0 {
        return Err(Error::invalid("penalty needs at least one inner sample"));
    }
    let f3 = g.reshape(fdot, &[k, 1, c])?;
    let fb = g.broadcast(f3, &[k, l, c])?;
    let d = g.constant(deltas.clone());
    let prod = g.mul(fb, d)?;
    let dd = g.sum_axis(prod, 2)?;
    let sq = g.square(dd)?;
    let total = g.sum(sq)?;
    let pen = g.scale(total, 1.0 / (2.0 * (l * k) as f64))?;
    let value = g.item(pen)?.as_f64();
    if value > clip {
        let var = g.scalar(T::lit(clip));
        return Ok(PenaltyTerm {
            var,
            value: clip,
            clipped: true,
        });
    }
    Ok(PenaltyTerm {
        var: pen,
        value,
        clipped: false,
    })
}

/// Inputs of the gradient penalty for one batch.
#[derive(Clone, Debug)]
pub struct PenaltyInputs<T> {
    /// `C` tensors of shape `K×D`: `∂t(x_i, α_i, β_i)/∂α_c` in row `i`.
    pub tangents: Vec<Tensor<T>>,
    /// `K×L×C` offsets `α′_ij − α_i`.
    pub deltas: Tensor<T>,
    /// `K×d` Rademacher directions.
    pub e: Tensor<T>,
}

/// Encode `images` (`K×D`) carrying one tangent per coordinate of `α`.
pub fn encode_with_tangents<T: Real, E: Encoder<T>>(
    g: &mut Graph<T>,
    encoder: &E,
    images: &Tensor<T>,
    tangents: &[Tensor<T>],
) -> Result<DualVar> {
    let x = g.constant(images.clone());
    let dx = DualVar::seeded(g, x, tangents.to_vec())?;
    encoder.encode(g, &dx)
}

/// Gradient penalty from representations that already carry `∂z/∂α_c`.
pub fn grad_penalty_from_encoding<T: Real>(
    g: &mut Graph<T>,
    z: &DualVar,
    inputs: &PenaltyInputs<T>,
    cfg: &RegConfig,
) -> Result<PenaltyTerm> {
    let c = inputs.tangents.len();
    if z.directions() != c {
        return Err(Error::invalid(format!(
            "representation carries {} tangents, expected {c}",
            z.directions()
        )));
    }
    let e = g.constant(inputs.e.clone());
    let f = scalar_projection(g, z, e)?;
    let cols: Vec<Var> = (0..c).map(|k| f.tangent_or_zero(g, k)).collect();
    let fdot = g.concat(&cols, 1)?;
    penalty_from_directional(g, fdot, &inputs.deltas, cfg.clip)
}

/// Gradient penalty for a batch of images with their `α`-tangents.
pub fn grad_penalty<T: Real, E: Encoder<T>>(
    g: &mut Graph<T>,
    encoder: &E,
    images: &Tensor<T>,
    inputs: &PenaltyInputs<T>,
    cfg: &RegConfig,
) -> Result<PenaltyTerm> {
    let z = encode_with_tangents(g, encoder, images, &inputs.tangents)?;
    grad_penalty_from_encoding(g, &z, inputs, cfg)
}

/// Both views of a training batch, flattened to `K×D`.
#[derive(Clone, Debug)]
pub struct LossBatch<T> {
    pub view1: Tensor<T>,
    pub view2: Tensor<T>,
    /// Penalty inputs linearized at the first view's `α`; unused when
    /// `λ = 0`.
    pub penalty: Option<PenaltyInputs<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    pub infonce: f64,
    pub penalty: Option<PenaltyTerm>,
}

/// `InfoNCE + λ · penalty`. With `λ = 0` the penalty is not built and the
/// loss node is the InfoNCE node itself.
pub fn full_loss<T: Real, E: Encoder<T>, P: Projection<T>>(
    g: &mut Graph<T>,
    encoder: &E,
    head: &P,
    batch: &LossBatch<T>,
    sim: &SimilarityConfig,
    reg: &RegConfig,
) -> Result<LossTerms> {
    let penalize = reg.lambda > 0.0;
    let pen_inputs = match (&batch.penalty, penalize) {
        (Some(p), true) => Some(p),
        (None, true) => return Err(Error::invalid("lambda > 0 but no penalty inputs were provided")),
        _ => None,
    };
    let tangents = pen_inputs.map(|p| p.tangents.as_slice()).unwrap_or(&[]);
    let z1 = encode_with_tangents(g, encoder, &batch.view1, tangents)?;
    let x2 = g.constant(batch.view2.clone());
    let z2 = encoder.encode(g, &DualVar::primal(x2))?;
    let nce = infonce_with_head(g, z1.primal, z2.primal, head, sim)?;
    let infonce_value = g.item(nce)?.as_f64();
    let Some(inputs) = pen_inputs else {
        return Ok(LossTerms {
            loss: nce,
            infonce: infonce_value,
            penalty: None,
        });
    };
    let pen = grad_penalty_from_encoding(g, &z1, inputs, reg)?;
    let weighted = g.scale(pen.var, reg.lambda)?;
    let loss = g.add(nce, weighted)?;
    Ok(LossTerms {
        loss,
        infonce: infonce_value,
        penalty: Some(pen),
    })
}

/// A vector of independent ±1 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RademacherVector(Vec<f64>);

impl RademacherVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn sample_rademacher<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<RademacherVector> {
    if dim == 0 {
        return Err(Error::invalid("Rademacher dimension must be at least 1"));
    }
    Ok(RademacherVector(
        (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
    ))
}

/// Mean of `eᵀ Σ e` over all `2^d` sign vectors.
pub fn rademacher_enumeration(sigma: &Tensor<f64>) -> Result<f64> {
    let d = match sigma.shape() {
        [a, b] if a == b => *a,
        other => return Err(Error::shape("rademacher_enumeration", other, &[0, 0])),
    };
    if d == 0 || d > 20 {
        return Err(Error::invalid(format!(
            "enumeration over dimension {d} is not supported"
        )));
    }
    let s = sigma.data();
    let mut total = 0.0;
    for mask in 0u32..(1 << d) {
        let sign = |i: usize| if mask >> i & 1 == 1 { -1.0 } else { 1.0 };
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += sign(i) * s[i * d + j] * sign(j);
            }
        }
        total += q;
    }
    Ok(total / (1u64 << d) as f64)
}

/// Population variance `(1/n) Σ (F_i − mean)²`.
pub fn population_variance(f: &[f64]) -> f64 {
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// `(1/2n²) Σ_i Σ_j (F_i − F_j)²`, the pairwise form of the population
/// variance.
pub fn pairwise_variance(f: &[f64]) -> f64 {
    let n = f.len() as f64;
    let mut s = 0.0;
    for a in f {
        for b in f {
            s += (a - b) * (a - b);
        }
    }
    s / (2.0 * n * n)
}

/// Bessel-corrected sample variance in the form
/// `(1/(L−1)) Σ F² − (1/(L(L−1))) (Σ F)²`.
pub fn bessel_variance(f: &[f64]) -> Result<f64> {
    let l = f.len();
    if l < 2 {
        return Err(Error::invalid(format!("sample variance needs L >= 2, got {l}")));
    }
    let l = l as f64;
    let sq: f64 = f.iter().map(|v| v * v).sum();
    let s: f64 = f.iter().sum();
    Ok(sq / (l - 1.0) - s * s / (l * (l - 1.0)))
}

/// A mean with its standard error over independent terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_terms(terms: &[f64]) -> Self {
        let n = terms.len();
        let mean = terms.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            (terms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Estimate { mean, std_err, n }
    }
}

/// Nested Monte Carlo estimate of `E_x[Var_α(F)]` from a `K×L` table.
pub fn condvar_from_table(f: &[Vec<f64>]) -> Result<Estimate> {
    if f.is_empty() {
        return Err(Error::invalid("conditional variance of an empty batch"));
    }
    let terms = f.iter().map(|row| bessel_variance(row)).collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_terms(&terms))
}

/// Nested Monte Carlo conditional variance of `F` for each input: one
/// `(β_i, e_i)` per input and `L` fresh draws of `α`. `encode` maps an
/// `L×D` batch of flattened transformed inputs to `L×d` representations;
/// `rng_for(i)` gives the random stream of input `i`.
pub fn nested_mc_condvar<Tr, Enc, R, S>(
    xs: &[Tr::Input],
    transform: &Tr,
    mut encode: Enc,
    l: usize,
    mut rng_for: S,
) -> Result<Estimate>
where
    Tr: Transform,
    Enc: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    R: Rng,
    S: FnMut(usize) -> R,
{
    if l < 2 {
        return Err(Error::invalid(format!("nested Monte Carlo needs L >= 2, got {l}")));
    }
    let mut table = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        let mut rng = rng_for(i);
        let beta = transform.sample_beta(&mut rng);
        let mut views = Vec::with_capacity(l);
        for _ in 0..l {
            let alpha = transform.sample_alpha(&mut rng);
            let img = transform.apply_f64(x, &alpha, &beta)?;
            let n = img.numel();
            views.push(img.reshape(&[n])?);
        }
        let batch = Tensor::stack(&views)?;
        let z = encode(&batch)?;
        let d = match z.shape() {
            [rows, d] if *rows == l => *d,
            other => return Err(Error::shape("condvar encoding", other, &[l, 0])),
        };
        let e = sample_rademacher(d, &mut rng)?;
        let row = (0..l)
            .map(|j| projection_value(z.row(j), e.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        table.push(row);
    }
    condvar_from_table(&table)
}

/// `e · z / ‖z‖` on plain slices.
pub fn projection_value(z: &[f64], e: &[f64]) -> Result<f64> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Domain {
            op: "scalar projection",
            detail: "representation has zero norm".into(),
        });
    }
    Ok(z.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / norm)
}
