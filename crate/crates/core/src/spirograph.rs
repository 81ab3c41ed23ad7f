//! Differentiable Spirograph images.
//!
//! A sample is a hypotrochoid traced at 40 points, blurred into an intensity
//! field with a Gaussian kernel of width `sigma`, normalized to a maximum of
//! one, and coloured as a per-channel blend of a foreground and a background
//! colour. The factors of interest are `(m, b, sigma, f_r)`; the nuisance
//! parameters `(h, f_g, f_b, b_r, b_g, b_b)` play the role of the
//! transformation parameter α.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::{uniform_variance, Transform};

pub const CURVE_POINTS: usize = 40;
pub const FACTOR_NAMES: [&str; 4] = ["m", "b", "sigma", "f_r"];
pub const NUISANCE_NAMES: [&str; 6] = ["h", "f_g", "f_b", "b_r", "b_g", "b_b"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorsOfInterest {
    pub m: f64,
    pub b: f64,
    pub sigma: f64,
    pub f_r: f64,
}

impl FactorsOfInterest {
    pub fn to_array(self) -> [f64; 4] {
        [self.m, self.b, self.sigma, self.f_r]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        FactorsOfInterest {
            m: a[0],
            b: a[1],
            sigma: a[2],
            f_r: a[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub h: f64,
    pub f_g: f64,
    pub f_b: f64,
    pub b_r: f64,
    pub b_g: f64,
    pub b_b: f64,
}

impl Nuisance {
    pub fn to_array(self) -> [f64; 6] {
        [self.h, self.f_g, self.f_b, self.b_r, self.b_g, self.b_b]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Nuisance {
            h: a[0],
            f_g: a[1],
            f_b: a[2],
            b_r: a[3],
            b_g: a[4],
            b_b: a[5],
        }
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        let arr: [f64; 6] = a.try_into().map_err(|_| Error::shape("nuisance", &[6], &[a.len()]))?;
        Ok(Self::from_array(arr))
    }
}

/// Uniform distribution `U(low + shift − widen, high + shift + widen)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSpec {
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub widen: f64,
}

impl UniformSpec {
    pub const fn new(low: f64, high: f64) -> Self {
        UniformSpec {
            low,
            high,
            shift: 0.0,
            widen: 0.0,
        }
    }

    /// Effective support, validated.
    pub fn support(&self) -> Result<(f64, f64)> {
        let lo = self.low + self.shift - self.widen;
        let hi = self.high + self.shift + self.widen;
        if !(self.widen >= 0.0) {
            return Err(Error::invalid(format!(
                "widen must be non-negative, got {}",
                self.widen
            )));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("empty uniform support [{lo}, {hi}]")));
        }
        Ok((lo, hi))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let (lo, hi) = self.support()?;
        Ok(rng::uniform(rng, lo, hi))
    }

    pub fn mean(&self) -> Result<f64> {
        let (lo, hi) = self.support()?;
        Ok(0.5 * (lo + hi))
    }

    pub fn variance(&self) -> Result<f64> {
        let (lo, hi) = self.support()?;
        Ok(uniform_variance(lo, hi))
    }
}

/// Sampling distributions for every generative parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiroSpecs {
    pub m: UniformSpec,
    pub b: UniformSpec,
    pub sigma: UniformSpec,
    pub f_r: UniformSpec,
    pub h: UniformSpec,
    pub f_g: UniformSpec,
    pub f_b: UniformSpec,
    pub b_r: UniformSpec,
    pub b_g: UniformSpec,
    pub b_b: UniformSpec,
}

impl Default for SpiroSpecs {
    fn default() -> Self {
        SpiroSpecs {
            m: UniformSpec::new(2.0, 5.0),
            b: UniformSpec::new(0.1, 1.1),
            sigma: UniformSpec::new(0.25, 1.0),
            f_r: UniformSpec::new(0.4, 1.0),
            h: UniformSpec::new(0.5, 2.5),
            f_g: UniformSpec::new(0.4, 1.0),
            f_b: UniformSpec::new(0.4, 1.0),
            b_r: UniformSpec::new(0.0, 0.6),
            b_g: UniformSpec::new(0.0, 0.6),
            b_b: UniformSpec::new(0.0, 0.6),
        }
    }
}

impl SpiroSpecs {
    pub fn factors(&self) -> [UniformSpec; 4] {
        [self.m, self.b, self.sigma, self.f_r]
    }

    pub fn nuisance(&self) -> [UniformSpec; 6] {
        [self.h, self.f_g, self.f_b, self.b_r, self.b_g, self.b_b]
    }

    /// Mutable access by parameter name. `background` and `foreground`
    /// are accepted by [`SpiroSpecs::shift`] and [`SpiroSpecs::widen`] as
    /// group names.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut UniformSpec> {
        Ok(match name {
            "m" => &mut self.m,
            "b" => &mut self.b,
            "sigma" => &mut self.sigma,
            "f_r" => &mut self.f_r,
            "h" => &mut self.h,
            "f_g" => &mut self.f_g,
            "f_b" => &mut self.f_b,
            "b_r" => &mut self.b_r,
            "b_g" => &mut self.b_g,
            "b_b" => &mut self.b_b,
            other => return Err(Error::invalid(format!("unknown spirograph parameter {other}"))),
        })
    }

    fn expand(name: &str) -> Vec<&str> {
        match name {
            "background" => vec!["b_r", "b_g", "b_b"],
            "foreground" => vec!["f_r", "f_g", "f_b"],
            other => vec![other],
        }
    }

    pub fn shift(mut self, name: &str, s: f64) -> Result<Self> {
        for n in Self::expand(name) {
            self.get_mut(n)?.shift += s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn widen(mut self, name: &str, s: f64) -> Result<Self> {
        for n in Self::expand(name) {
            self.get_mut(n)?.widen += s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.factors().iter().chain(self.nuisance().iter()) {
            s.support()?;
        }
        let (blo, bhi) = self.b.support()?;
        if blo <= 0.0 && bhi >= 0.0 {
            return Err(Error::invalid("support of b must exclude 0"));
        }
        let (slo, _) = self.sigma.support()?;
        if slo <= 0.0 {
            return Err(Error::invalid("support of sigma must be positive"));
        }
        Ok(())
    }

    /// `Meanᵢ Var(αᵢ)` over the nuisance parameters: the loss of the best
    /// constant predictor of α.
    pub fn nuisance_reference_value(&self) -> Result<f64> {
        let vars = self
            .nuisance()
            .iter()
            .map(UniformSpec::variance)
            .collect::<Result<Vec<_>>>()?;
        Ok(vars.iter().sum::<f64>() / vars.len() as f64)
    }
}

pub fn sample_factors<R: Rng + ?Sized>(rng: &mut R, specs: &SpiroSpecs) -> Result<FactorsOfInterest> {
    let mut a = [0.0; 4];
    for (v, s) in a.iter_mut().zip(specs.factors()) {
        *v = s.sample(rng)?;
    }
    Ok(FactorsOfInterest::from_array(a))
}

pub fn sample_nuisance<R: Rng + ?Sized>(rng: &mut R, specs: &SpiroSpecs) -> Result<Nuisance> {
    let mut a = [0.0; 6];
    for (v, s) in a.iter_mut().zip(specs.nuisance()) {
        *v = s.sample(rng)?;
    }
    Ok(Nuisance::from_array(a))
}

/// Square pixel grid with centres equally spaced over `[−extent, extent]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderGrid {
    pub resolution: usize,
    pub extent: f64,
}

impl Default for RenderGrid {
    fn default() -> Self {
        RenderGrid {
            resolution: 32,
            extent: 5.0,
        }
    }
}

impl RenderGrid {
    pub fn new(resolution: usize, extent: f64) -> Result<Self> {
        let g = RenderGrid { resolution, extent };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !(self.extent > 0.0) {
            return Err(Error::invalid(format!(
                "render grid needs resolution > 0 and extent > 0, got {} / {}",
                self.resolution, self.extent
            )));
        }
        Ok(())
    }

    /// Pixel-centre coordinates along one axis.
    pub fn coords(&self) -> Vec<f64> {
        let n = self.resolution;
        if n == 1 {
            return vec![0.0];
        }
        let step = 2.0 * self.extent / (n - 1) as f64;
        (0..n).map(|k| -self.extent + step * k as f64).collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.resolution, self.resolution]
    }

    pub fn image_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }
}

/// `CURVE_POINTS` equally spaced curve parameters from 0 to 2π inclusive.
pub fn default_ts() -> Vec<f64> {
    let n = CURVE_POINTS;
    (0..n).map(|i| 2.0 * PI * i as f64 / (n - 1) as f64).collect()
}

/// Hypotrochoid points
/// `x = (m−h)cos t + h cos((m−h)t/b)`, `y = (m−h)sin t − h sin((m−h)t/b)`.
pub fn hypotrochoid_points<S: Scalar>(m: S, b: S, h: S, ts: &[f64]) -> Result<Vec<(S, S)>> {
    if b.primal() == 0.0 {
        return Err(Error::Domain {
            op: "hypotrochoid",
            detail: "b = 0".into(),
        });
    }
    if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
        return Err(Error::Domain {
            op: "hypotrochoid",
            detail: format!("non-finite t = {t}"),
        });
    }
    let r = m - h;
    let ratio = r / b;
    Ok(ts
        .iter()
        .map(|&t| {
            let ts = S::from_f64(t);
            let inner = ratio * ts;
            let x = r * ts.cos() + h * inner.cos();
            let y = r * ts.sin() - h * inner.sin();
            (x, y)
        })
        .collect())
}

/// Gaussian-blurred curve intensity on `grid`, normalized so its maximum is
/// one. Rows index `v`, columns index `u`. The normalizer is the first
/// maximal pixel in row-major order, and derivatives flow through it.
pub fn intensity_field<S: Scalar>(points: &[(S, S)], grid: &RenderGrid, sigma: S) -> Result<Tensor<S>> {
    if points.len() != CURVE_POINTS {
        return Err(Error::shape("intensity_field points", &[CURVE_POINTS], &[points.len()]));
    }
    if !(sigma.primal() > 0.0) {
        return Err(Error::Domain {
            op: "intensity_field",
            detail: format!("sigma must be positive, got {}", sigma.primal()),
        });
    }
    grid.validate()?;
    let coords = grid.coords();
    let n = grid.resolution;
    let inv_sigma = S::one() / sigma;

    // The kernel factorizes over axes: exp(-(du² + dv²)/σ) = exp(-du²/σ)·exp(-dv²/σ).
    let mut field = vec![S::zero(); n * n];
    let mut ku = vec![S::zero(); n];
    let mut kv = vec![S::zero(); n];
    for &(x, y) in points {
        for (k, &c) in coords.iter().enumerate() {
            let du = S::from_f64(c) - x;
            let dv = S::from_f64(c) - y;
            ku[k] = (-(du * du) * inv_sigma).exp();
            kv[k] = (-(dv * dv) * inv_sigma).exp();
        }
        for (row, &a) in kv.iter().enumerate() {
            for (col, &b) in ku.iter().enumerate() {
                field[row * n + col] += a * b;
            }
        }
    }
    let scale = S::from_f64(1.0 / CURVE_POINTS as f64);
    for v in field.iter_mut() {
        *v = *v * scale;
    }

    let mut arg = 0;
    for (i, v) in field.iter().enumerate() {
        if v.primal() > field[arg].primal() {
            arg = i;
        }
    }
    let max = field[arg];
    if !(max.primal() > 0.0) {
        return Err(Error::Domain {
            op: "intensity_field",
            detail: "intensity vanishes on the whole grid".into(),
        });
    }
    let normalized = field.into_iter().map(|v| v / max).collect();
    Tensor::new(&[n, n], normalized)
}

/// Full generative process. `factors = (m, b, sigma, f_r)`,
/// `nuisance = (h, f_g, f_b, b_r, b_g, b_b)`. Colours are clipped to
/// `[0, 1]` before blending, so shifted colour distributions still produce
/// valid images.
pub fn render<S: Scalar>(factors: &[S; 4], nuisance: &[S; 6], grid: &RenderGrid) -> Result<Tensor<S>> {
    let [m, b, sigma, f_r] = *factors;
    let [h, f_g, f_b, b_r, b_g, b_b] = *nuisance;
    let pts = hypotrochoid_points(m, b, h, &default_ts())?;
    let field = intensity_field(&pts, grid, sigma)?;
    let fg = [f_r, f_g, f_b].map(Scalar::clamp01);
    let bg = [b_r, b_g, b_b].map(Scalar::clamp01);
    let npx = field.numel();
    let i = field.data();
    let mut out = Vec::with_capacity(3 * npx);
    for ch in 0..3 {
        out.extend(i.iter().map(|&iv| iv * fg[ch] + (S::one() - iv) * bg[ch]));
    }
    Tensor::new(&grid.image_shape(), out)
}

pub fn render_sample(factors: &FactorsOfInterest, nuisance: &Nuisance, grid: &RenderGrid) -> Result<Tensor<f64>> {
    render(&factors.to_array(), &nuisance.to_array(), grid)
}

/// Rendering as a transformation `t(x, α)` with `x` the factors of interest
/// and `α` the nuisance parameters. There is no discrete part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpiroTransform {
    pub grid: RenderGrid,
    pub specs: SpiroSpecs,
}

impl SpiroTransform {
    pub fn new(grid: RenderGrid, specs: SpiroSpecs) -> Self {
        SpiroTransform { grid, specs }
    }
}

impl Transform for SpiroTransform {
    type Input = FactorsOfInterest;
    type Beta = ();

    fn alpha_dim(&self) -> usize {
        6
    }

    fn sample_alpha<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.specs
            .nuisance()
            .iter()
            .map(|s| s.sample(rng).expect("specs validated at construction"))
            .collect()
    }

    fn sample_beta<R: Rng + ?Sized>(&self, _rng: &mut R) {}

    fn alpha_differentiable(&self, _beta: &()) -> bool {
        true
    }

    fn apply<S: Scalar>(&self, x: &FactorsOfInterest, alpha: &[S], _beta: &()) -> Result<Tensor<S>> {
        let nuisance: [S; 6] = alpha
            .try_into()
            .map_err(|_| Error::shape("nuisance", &[6], &[alpha.len()]))?;
        let factors = x.to_array().map(S::from_f64);
        render(&factors, &nuisance, &self.grid)
    }

    fn alpha_variances(&self) -> Vec<f64> {
        self.specs
            .nuisance()
            .iter()
            .map(|s| s.variance().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Factor tuples plus one fixed evaluation nuisance draw per sample. Images
/// are rendered on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SpiroDataset {
    pub seed: u64,
    /// Stream index of the first sample; a test split starts after the
    /// training split so the two never share draws.
    pub first_index: u64,
    pub specs: SpiroSpecs,
    pub grid: RenderGrid,
    pub factors: Vec<FactorsOfInterest>,
    pub eval_nuisance: Vec<Nuisance>,
}

impl SpiroDataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn transform(&self) -> SpiroTransform {
        SpiroTransform::new(self.grid, self.specs)
    }

    /// Sample `i` rendered with its stored evaluation nuisance.
    pub fn render_eval(&self, i: usize) -> Result<Tensor<f64>> {
        render_sample(&self.factors[i], &self.eval_nuisance[i], &self.grid)
    }

    /// Stream index of sample `i`.
    pub fn stream_index(&self, i: usize) -> u64 {
        self.first_index + i as u64
    }

    /// The evaluation nuisance of sample `i` redrawn from its own stream
    /// under `specs`. With the dataset's own specs this is exactly the
    /// stored draw.
    pub fn eval_nuisance_under(&self, i: usize, specs: &SpiroSpecs) -> Result<Nuisance> {
        sample_nuisance(
            &mut rng::stream(self.seed, Purpose::EvalNuisance, self.stream_index(i), 0, 0),
            specs,
        )
    }

    /// Targets matrix `n×4` of the factors of interest.
    pub fn factor_matrix(&self) -> Tensor<f64> {
        let data = self.factors.iter().flat_map(|f| f.to_array()).collect();
        Tensor::new(&[self.len(), 4], data).expect("n×4")
    }

    pub fn nuisance_matrix(&self) -> Tensor<f64> {
        let data = self.eval_nuisance.iter().flat_map(|f| f.to_array()).collect();
        Tensor::new(&[self.len(), 6], data).expect("n×6")
    }
}

/// `n` samples, each drawn from its own counter-based stream so the result
/// does not depend on generation order.
pub fn generate_dataset(n: usize, seed: u64, specs: SpiroSpecs, grid: RenderGrid) -> Result<SpiroDataset> {
    generate_split(n, seed, 0, specs, grid)
}

/// Like [`generate_dataset`], drawing samples `first_index..first_index + n`.
pub fn generate_split(
    n: usize,
    seed: u64,
    first_index: u64,
    specs: SpiroSpecs,
    grid: RenderGrid,
) -> Result<SpiroDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    specs.validate()?;
    grid.validate()?;
    let mut factors = Vec::with_capacity(n);
    let mut eval_nuisance = Vec::with_capacity(n);
    for i in first_index..first_index + n as u64 {
        factors.push(sample_factors(
            &mut rng::stream(seed, Purpose::Factors, i, 0, 0),
            &specs,
        )?);
        eval_nuisance.push(sample_nuisance(
            &mut rng::stream(seed, Purpose::EvalNuisance, i, 0, 0),
            &specs,
        )?);
    }
    Ok(SpiroDataset {
        seed,
        first_index,
        specs,
        grid,
        factors,
        eval_nuisance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dual;

    fn fig_factors() -> (FactorsOfInterest, Nuisance) {
        (
            FactorsOfInterest {
                m: 4.0,
                b: 0.4,
                sigma: 1.0,
                f_r: 0.9,
            },
            Nuisance {
                h: 2.0,
                f_g: 0.8,
                f_b: 0.7,
                b_r: 0.3,
                b_g: 0.4,
                b_b: 0.5,
            },
        )
    }

    #[test]
    fn curve_start_and_half_turn() {
        let p = hypotrochoid_points::<f64>(3.3, 0.7, 1.1, &[0.0]).unwrap();
        assert_eq!(p[0], (3.3, 0.0));
        let p = hypotrochoid_points::<f64>(4.0, 0.4, 2.0, &[PI]).unwrap();
        assert!((p[0].0 + 4.0).abs() < 1e-12 && p[0].1.abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn curve_matches_high_precision_trace() {
        // 40-digit evaluation of the same curve, m=4, b=0.4, h=2.
        let expected = [
            (0, 4.0, 0.0),
            (7, 2.456_270_649_613_111, 3.008_385_397_696_722_3),
            (13, -2.0, 3.464_101_615_137_754_4),
            (26, -2.0, -3.464_101_615_137_754_4),
            (39, 4.0, 0.0),
        ];
        let pts = hypotrochoid_points::<f64>(4.0, 0.4, 2.0, &default_ts()).unwrap();
        assert_eq!(pts.len(), 40);
        for (i, x, y) in expected {
            assert!((pts[i].0 - x).abs() < 1e-12, "x[{i}] = {}", pts[i].0);
            assert!((pts[i].1 - y).abs() < 1e-12, "y[{i}] = {}", pts[i].1);
        }
    }

    #[test]
    fn zero_b_rejected() {
        assert!(hypotrochoid_points(4.0, 0.0, 2.0, &default_ts()).is_err());
    }

    #[test]
    fn default_ts_endpoints() {
        let ts = default_ts();
        assert_eq!(ts.len(), 40);
        assert_eq!(ts[0], 0.0);
        assert_eq!(ts[39], 2.0 * PI);
    }

    fn brute_force_field(pts: &[(f64, f64)], grid: &RenderGrid, sigma: f64) -> Vec<f64> {
        let n = grid.resolution;
        let c = grid.coords();
        let mut raw = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..n {
                let (u, v) = (c[col], c[row]);
                let mut acc = 0.0;
                for &(x, y) in pts {
                    acc += ((-(u - x) * (u - x) - (v - y) * (v - y)) / sigma).exp();
                }
                raw[row * n + col] = acc / 40.0;
            }
        }
        let max = raw.iter().cloned().fold(f64::MIN, f64::max);
        raw.iter().map(|v| v / max).collect()
    }

    #[test]
    fn intensity_matches_brute_force() {
        let grid = RenderGrid::new(32, 5.0).unwrap();
        let pts = hypotrochoid_points::<f64>(4.0, 0.4, 2.0, &default_ts()).unwrap();
        let field = intensity_field(&pts, &grid, 1.0).unwrap();
        let oracle = brute_force_field(&pts, &grid, 1.0);
        for (a, b) in field.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let max = field.data().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn coincident_points_on_pixel_centre() {
        let grid = RenderGrid::new(5, 2.0).unwrap();
        let c = grid.coords();
        let pts = vec![(c[1], c[3]); 40];
        let field = intensity_field(&pts, &grid, 0.5).unwrap();
        assert_eq!(field.data()[3 * 5 + 1], 1.0);
    }

    #[test]
    fn intensity_rejects_bad_inputs() {
        let grid = RenderGrid::default();
        let pts = vec![(0.0, 0.0); 40];
        assert!(intensity_field(&pts, &grid, 0.0).is_err());
        assert!(intensity_field(&pts[..39], &grid, 1.0).is_err());
    }

    #[test]
    fn intensity_is_permutation_invariant() {
        let grid = RenderGrid::new(16, 5.0).unwrap();
        let pts = hypotrochoid_points(3.1, 0.77, 1.3, &default_ts()).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        rev.rotate_left(11);
        let a = intensity_field(&pts, &grid, 0.6).unwrap();
        let b = intensity_field(&rev, &grid, 0.6).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn render_blends_foreground_and_background() {
        let (f, n) = fig_factors();
        let grid = RenderGrid::new(16, 5.0).unwrap();
        let img = render_sample(&f, &n, &grid).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        let pts = hypotrochoid_points(f.m, f.b, n.h, &default_ts()).unwrap();
        let i = intensity_field(&pts, &grid, f.sigma).unwrap();
        let fg = [f.f_r, n.f_g, n.f_b];
        let bg = [n.b_r, n.b_g, n.b_b];
        let px = 256;
        for (p, &iv) in i.data().iter().enumerate() {
            for ch in 0..3 {
                let v = img.data()[ch * px + p];
                assert!((0.0..=1.0).contains(&v));
                if iv == 1.0 {
                    assert_eq!(v, fg[ch]);
                }
                let expect = iv * fg[ch] + (1.0 - iv) * bg[ch];
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn derivative_in_background_red_is_one_minus_intensity() {
        let (f, n) = fig_factors();
        let grid = RenderGrid::new(12, 5.0).unwrap();
        let t = SpiroTransform::new(grid, SpiroSpecs::default());
        let (img, jac) = t.apply_with_jacobian(&f, &n.to_array(), &()).unwrap();
        let pts = hypotrochoid_points(f.m, f.b, n.h, &default_ts()).unwrap();
        let i = intensity_field(&pts, &grid, f.sigma).unwrap();
        let px = 144;
        let d_br = &jac[3];
        for p in 0..px {
            assert!((d_br.data()[p] - (1.0 - i.data()[p])).abs() < 1e-15);
            assert_eq!(d_br.data()[px + p], 0.0);
            assert_eq!(d_br.data()[2 * px + p], 0.0);
        }
        assert_eq!(img, render_sample(&f, &n, &grid).unwrap());
    }

    #[test]
    fn all_parameter_derivatives_match_finite_differences() {
        // Generic parameters: the symmetric figure has tied maxima, where
        // the normalizer is not differentiable.
        let grid = RenderGrid::new(10, 5.0).unwrap();
        let params = [4.3, 0.37, 0.9, 0.8, 1.7, 0.6, 0.45, 0.2, 0.35, 0.55];
        let base = render(
            &[params[0], params[1], params[2], params[3]],
            &[params[4], params[5], params[6], params[7], params[8], params[9]],
            &grid,
        )
        .unwrap();
        let mut red: Vec<f64> = base.data()[..100].to_vec();
        red.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(red[0] - red[1] > 1e-3, "near-tie in the maximum");
        type D = Dual<f64, 10>;
        let seeded: Vec<D> = params.iter().enumerate().map(|(k, &v)| D::variable(v, k)).collect();
        let fac: [D; 4] = seeded[..4].try_into().unwrap();
        let nui: [D; 6] = seeded[4..].try_into().unwrap();
        let img = render(&fac, &nui, &grid).unwrap();
        let h = 1e-6;
        for k in 0..10 {
            let eval = |delta: f64| {
                let mut p = params;
                p[k] += delta;
                render(&[p[0], p[1], p[2], p[3]], &[p[4], p[5], p[6], p[7], p[8], p[9]], &grid).unwrap()
            };
            let (up, down) = (eval(h), eval(-h));
            for (j, d) in img.data().iter().enumerate() {
                let fd = (up.data()[j] - down.data()[j]) / (2.0 * h);
                let err = (d.eps[k] - fd).abs() / (fd.abs() + 1e-6);
                assert!(err < 1e-5, "param {k} pixel {j}: ad {} fd {fd}", d.eps[k]);
            }
        }
    }

    #[test]
    fn spec_supports() {
        let h = SpiroSpecs::default().h;
        assert_eq!(h.support().unwrap(), (0.5, 2.5));
        let shifted = SpiroSpecs::default().shift("h", 0.1).unwrap().h.support().unwrap();
        assert!((shifted.0 - 0.6).abs() < 1e-15 && (shifted.1 - 2.6).abs() < 1e-15);
        let wide = SpiroSpecs::default().widen("h", 0.5).unwrap().h.support().unwrap();
        assert_eq!(wide, (0.0, 3.0));
        let bg = SpiroSpecs::default().widen("background", 0.4).unwrap();
        let (lo, hi) = bg.b_g.support().unwrap();
        assert!((lo + 0.4).abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
        assert!(UniformSpec::new(1.0, 0.5).support().is_err());
        assert!(SpiroSpecs::default().shift("h", -3.0).is_ok());
        assert!(SpiroSpecs::default().widen("h", -2.0).is_err());
        assert!(SpiroSpecs::default().shift("nope", 0.1).is_err());
    }

    #[test]
    fn default_draws_stay_in_range() {
        let specs = SpiroSpecs::default();
        let mut r = rng::stream(1, Purpose::Test, 0, 0, 0);
        for _ in 0..2000 {
            let f = sample_factors(&mut r, &specs).unwrap();
            let n = sample_nuisance(&mut r, &specs).unwrap();
            assert!((2.0..=5.0).contains(&f.m) && (0.1..=1.1).contains(&f.b));
            assert!((0.25..=1.0).contains(&f.sigma) && (0.4..=1.0).contains(&f.f_r));
            assert!((0.5..=2.5).contains(&n.h));
            assert!((0.4..=1.0).contains(&n.f_g) && (0.4..=1.0).contains(&n.f_b));
            for c in [n.b_r, n.b_g, n.b_b] {
                assert!((0.0..=0.6).contains(&c));
            }
            // the curve always fits in the default window
            assert!((f.m - n.h).abs() + n.h <= 5.0);
        }
    }

    #[test]
    fn shifted_mean_within_three_standard_errors() {
        let specs = SpiroSpecs::default().shift("h", 0.3).unwrap();
        let mut r = rng::stream(2, Purpose::Test, 0, 0, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| specs.h.sample(&mut r).unwrap()).sum::<f64>() / n as f64;
        let se = (specs.h.variance().unwrap() / n as f64).sqrt();
        assert!((mean - 1.8).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(5, 11, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        let b = generate_dataset(5, 11, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(5, 12, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        assert_ne!(a.factors, c.factors);
        assert!(generate_dataset(0, 1, SpiroSpecs::default(), RenderGrid::default()).is_err());
    }

    #[test]
    fn splits_continue_the_stream() {
        let all = generate_dataset(7, 4, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        let tail = generate_split(3, 4, 4, SpiroSpecs::default(), RenderGrid::default()).unwrap();
        assert_eq!(tail.factors, all.factors[4..]);
        assert_eq!(tail.eval_nuisance, all.eval_nuisance[4..]);
        for i in 0..3 {
            assert_eq!(tail.eval_nuisance_under(i, &tail.specs).unwrap(), tail.eval_nuisance[i]);
        }
        let shifted = tail.specs.shift("h", 0.3).unwrap();
        let moved = tail.eval_nuisance_under(1, &shifted).unwrap();
        assert!((moved.h - tail.eval_nuisance[1].h - 0.3).abs() < 1e-12);
    }

    #[test]
    fn reference_value_for_default_specs() {
        let r = SpiroSpecs::default().nuisance_reference_value().unwrap();
        assert!((r - 29.0 / 360.0).abs() < 1e-15);
    }
}
