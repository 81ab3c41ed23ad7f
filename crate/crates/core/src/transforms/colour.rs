//! Differentiable colour distortion: brightness, contrast, saturation and
//! hue (a rotation in YIQ space), plus greyscale conversion.
//!
//! Images are `3×H×W` tensors with values in `[0, 1]`. Each jitter stage is
//! followed by clipping to `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_variance, Transform};
use crate::error::{Error, Result};
use crate::rng::uniform;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB → YIQ, rounded constants as published with the method.
pub const T_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.5959, -0.2746, -0.3213],
    [0.2115, -0.5227, 0.3112],
];

/// YIQ → RGB. Only an approximate inverse of [`T_YIQ`].
pub const T_RGB: [[f64; 3]; 3] = [[1.0, 0.956, 0.619], [1.0, -0.272, -0.647], [1.0, -1.106, 1.703]];

/// `0.299r + 0.587g + 0.114b`, evaluated as `g + 0.299(r−g) + 0.114(b−g)`
/// so that grey input maps to itself exactly.
fn luma<S: Scalar>(r: S, g: S, b: S) -> S {
    g + S::from_f64(T_YIQ[0][0]) * (r - g) + S::from_f64(T_YIQ[0][2]) * (b - g)
}

/// Differentiable jitter parameters (α). `hue` is a fraction of a full
/// turn: the IQ rotation angle is `2π·hue`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColourParams<S = f64> {
    pub brightness: S,
    pub contrast: S,
    pub saturation: S,
    pub hue: S,
}

impl<S: Scalar> ColourParams<S> {
    pub fn identity() -> Self {
        ColourParams {
            brightness: S::one(),
            contrast: S::one(),
            saturation: S::one(),
            hue: S::zero(),
        }
    }

    pub fn from_slice(a: &[S]) -> Result<Self> {
        match a {
            [brightness, contrast, saturation, hue] => Ok(ColourParams {
                brightness: *brightness,
                contrast: *contrast,
                saturation: *saturation,
                hue: *hue,
            }),
            _ => Err(Error::shape("colour params", &[4], &[a.len()])),
        }
    }

    pub fn to_array(self) -> [S; 4] {
        [self.brightness, self.contrast, self.saturation, self.hue]
    }
}

/// Discrete switches (β), never differentiated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteParams {
    pub apply_jitter: bool,
    pub to_grey: bool,
    /// Pixel gathers drawn by extra β-stages, applied before jitter.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gathers: Vec<Vec<usize>>,
}

impl DiscreteParams {
    pub fn new(apply_jitter: bool, to_grey: bool) -> Self {
        DiscreteParams {
            apply_jitter,
            to_grey,
            gathers: Vec::new(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, p_jitter: f64, p_grey: f64) -> Self {
        let apply_jitter = rng.gen::<f64>() < p_jitter;
        let to_grey = rng.gen::<f64>() < p_grey;
        DiscreteParams::new(apply_jitter, to_grey)
    }
}

/// Distortion strength `S`: brightness, contrast and saturation factors are
/// drawn from `U(1 − 0.8S, 1 + 0.8S)` and hue from `U(−0.2S, 0.2S)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthSpec {
    pub s: f64,
}

impl Default for StrengthSpec {
    fn default() -> Self {
        StrengthSpec { s: 0.5 }
    }
}

impl StrengthSpec {
    pub fn scale_range(&self) -> (f64, f64) {
        (1.0 - 0.8 * self.s, 1.0 + 0.8 * self.s)
    }

    pub fn hue_range(&self) -> (f64, f64) {
        (-0.2 * self.s, 0.2 * self.s)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ColourParams {
        let (lo, hi) = self.scale_range();
        let (hlo, hhi) = self.hue_range();
        ColourParams {
            brightness: uniform(rng, lo, hi),
            contrast: uniform(rng, lo, hi),
            saturation: uniform(rng, lo, hi),
            hue: uniform(rng, hlo, hhi),
        }
    }

    /// Per-coordinate variances of the sampled [`ColourParams`].
    pub fn variances(&self) -> [f64; 4] {
        let (lo, hi) = self.scale_range();
        let (hlo, hhi) = self.hue_range();
        let v = uniform_variance(lo, hi);
        [v, v, v, uniform_variance(hlo, hhi)]
    }
}

fn check_rgb<S: Clone>(img: &Tensor<S>) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::shape("colour (expected 3×H×W)", other, &[3, 0, 0])),
    }
}

pub fn greyscale<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = check_rgb(img)?;
    let n = h * w;
    let d = img.data();
    let data = (0..n).map(|p| luma(d[p], d[n + p], d[2 * n + p])).collect();
    Tensor::new(&[1, h, w], data)
}

fn clip<S: Scalar>(img: Tensor<S>) -> Tensor<S> {
    img.map(|v| v.clamp01())
}

pub fn adjust_brightness<S: Scalar>(img: &Tensor<S>, a: S) -> Result<Tensor<S>> {
    check_rgb(img)?;
    Ok(clip(img.map(|&v| v * a)))
}

pub fn adjust_saturation<S: Scalar>(img: &Tensor<S>, a: S) -> Result<Tensor<S>> {
    let (h, w) = check_rgb(img)?;
    let n = h * w;
    let gs = greyscale(img)?;
    let rest = S::one() - a;
    let g = gs.data();
    Ok(clip(Tensor::from_fn(img.shape(), |i| {
        img.data()[i] * a + g[i % n] * rest
    })))
}

pub fn adjust_contrast<S: Scalar>(img: &Tensor<S>, a: S) -> Result<Tensor<S>> {
    let (h, w) = check_rgb(img)?;
    let gs = greyscale(img)?;
    let mut total = S::zero();
    for &v in gs.data() {
        total += v;
    }
    let mean = total / S::from_f64((h * w) as f64);
    let offset = mean * (S::one() - a);
    Ok(clip(img.map(|&v| v * a + offset)))
}

/// `T_RGB · R(2π·a) · T_YIQ` per pixel, without the final clip.
///
/// The luma and chroma rows are evaluated in difference form
/// (`Y = g + 0.299(r−g) + 0.114(b−g)`, and likewise for I and Q), which is
/// algebraically the published matrix and keeps grey pixels exactly grey.
pub fn hue_rotate_unclipped<S: Scalar>(img: &Tensor<S>, a: S) -> Result<Tensor<S>> {
    let (h, w) = check_rgb(img)?;
    let n = h * w;
    let theta = a.scale(2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let k = |v: f64| S::from_f64(v);
    let d = img.data();
    let mut out = vec![S::zero(); 3 * n];
    for p in 0..n {
        let (r, g, b) = (d[p], d[n + p], d[2 * n + p]);
        let (rg, bg, rb) = (r - g, b - g, r - b);
        let y = luma(r, g, b);
        let i = k(-T_YIQ[1][1]) * rg + k(-T_YIQ[1][2]) * rb;
        let q = k(T_YIQ[2][0]) * rg + k(T_YIQ[2][2]) * bg;
        let i2 = c * i - s * q;
        let q2 = s * i + c * q;
        for ch in 0..3 {
            out[ch * n + p] = k(T_RGB[ch][0]) * y + k(T_RGB[ch][1]) * i2 + k(T_RGB[ch][2]) * q2;
        }
    }
    Tensor::new(img.shape(), out)
}

pub fn adjust_hue<S: Scalar>(img: &Tensor<S>, a: S) -> Result<Tensor<S>> {
    Ok(clip(hue_rotate_unclipped(img, a)?))
}

fn gather<S: Scalar>(img: &Tensor<S>, index: &[usize]) -> Result<Tensor<S>> {
    let (h, w) = check_rgb(img)?;
    let n = h * w;
    if index.len() != n || index.iter().any(|&i| i >= n) {
        return Err(Error::invalid("pixel gather does not match image size"));
    }
    let d = img.data();
    Ok(Tensor::from_fn(img.shape(), |i| d[(i / n) * n + index[i % n]]))
}

/// Jitter (brightness → contrast → saturation → hue) when
/// `dp.apply_jitter`, then greyscale broadcast to three channels when
/// `dp.to_grey`.
pub fn colour_distort<S: Scalar>(img: &Tensor<S>, cp: &ColourParams<S>, dp: &DiscreteParams) -> Result<Tensor<S>> {
    check_rgb(img)?;
    let mut x = img.clone();
    for index in &dp.gathers {
        x = gather(&x, index)?;
    }
    if dp.apply_jitter {
        x = adjust_brightness(&x, cp.brightness)?;
        x = adjust_contrast(&x, cp.contrast)?;
        x = adjust_saturation(&x, cp.saturation)?;
        x = adjust_hue(&x, cp.hue)?;
    }
    if dp.to_grey {
        let gs = greyscale(&x)?;
        let n = gs.numel();
        let g = gs.data();
        x = Tensor::from_fn(x.shape(), |i| g[i % n]);
    }
    Ok(x)
}

/// Extra discrete (β) stage expressed as a pixel permutation/resampling,
/// e.g. a flip. Drawn once per image and applied before colour jitter.
pub trait PixelGather: Send + Sync {
    fn sample_index(&self, rng: &mut dyn RngCore, h: usize, w: usize) -> Vec<usize>;
}

/// The colour distortion pipeline as a [`Transform`] on RGB images.
#[derive(Clone)]
pub struct ColourTransform {
    pub strength: StrengthSpec,
    pub p_jitter: f64,
    pub p_grey: f64,
    pub image_hw: (usize, usize),
    pub extra: Vec<Arc<dyn PixelGather>>,
}

impl fmt::Debug for ColourTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ColourTransform")
            .field("strength", &self.strength)
            .field("p_jitter", &self.p_jitter)
            .field("p_grey", &self.p_grey)
            .field("image_hw", &self.image_hw)
            .field("extra_stages", &self.extra.len())
            .finish()
    }
}

impl ColourTransform {
    pub fn new(strength: StrengthSpec, image_hw: (usize, usize)) -> Self {
        ColourTransform {
            strength,
            p_jitter: 0.8,
            p_grey: 0.2,
            image_hw,
            extra: Vec::new(),
        }
    }
}

impl Transform for ColourTransform {
    type Input = Tensor<f64>;
    type Beta = DiscreteParams;

    fn alpha_dim(&self) -> usize {
        4
    }

    fn sample_alpha<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.strength.sample(rng).to_array().to_vec()
    }

    fn sample_beta<R: Rng + ?Sized>(&self, rng: &mut R) -> DiscreteParams {
        let mut dp = DiscreteParams::sample(rng, self.p_jitter, self.p_grey);
        if !self.extra.is_empty() {
            let mut child = ChaCha8Rng::seed_from_u64(rng.gen());
            let (h, w) = self.image_hw;
            dp.gathers = self
                .extra
                .iter()
                .map(|stage| stage.sample_index(&mut child, h, w))
                .collect();
        }
        dp
    }

    fn alpha_differentiable(&self, beta: &DiscreteParams) -> bool {
        beta.apply_jitter
    }

    fn apply<S: Scalar>(&self, x: &Tensor<f64>, alpha: &[S], beta: &DiscreteParams) -> Result<Tensor<S>> {
        let cp = ColourParams::from_slice(alpha)?;
        let img = x.map(|&v| S::from_f64(v));
        colour_distort(&img, &cp, beta)
    }

    fn alpha_variances(&self) -> Vec<f64> {
        self.strength.variances().to_vec()
    }
}
