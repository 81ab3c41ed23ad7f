//! Parameterized input transformations `t(x, α, β)`.
//!
//! `α` is the differentiable parameter vector, `β` the discrete part. Every
//! transformation is written once, generically over [`Scalar`], so the same
//! code renders plain `f64` images and forward-mode [`Dual`] images whose
//! tangent slots hold `∂t/∂α_c`.

pub mod colour;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{Dual, Scalar};
use crate::tensor::Tensor;

pub use colour::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, colour_distort, greyscale, ColourParams,
    ColourTransform, DiscreteParams, PixelGather, StrengthSpec, T_RGB, T_YIQ,
};

/// Largest supported `α` dimension for tangent propagation.
pub const MAX_ALPHA: usize = 8;

/// Dual number used to push `∂/∂α` through a transformation.
pub type AlphaDual = Dual<f64, MAX_ALPHA>;

pub trait Transform {
    type Input: Clone;
    type Beta: Clone + std::fmt::Debug;

    fn alpha_dim(&self) -> usize;
    fn sample_alpha<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;
    fn sample_beta<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Beta;

    /// Whether `t` is differentiable in `α` under this `β`.
    fn alpha_differentiable(&self, beta: &Self::Beta) -> bool;

    fn apply<S: Scalar>(&self, x: &Self::Input, alpha: &[S], beta: &Self::Beta) -> Result<Tensor<S>>;

    /// `Var(α_c)` for each coordinate under the sampling distribution.
    fn alpha_variances(&self) -> Vec<f64>;

    fn apply_f64(&self, x: &Self::Input, alpha: &[f64], beta: &Self::Beta) -> Result<Tensor<f64>> {
        self.apply(x, alpha, beta)
    }

    /// The transformed input and `∂t/∂α_c` for every coordinate `c`.
    fn apply_with_jacobian(
        &self,
        x: &Self::Input,
        alpha: &[f64],
        beta: &Self::Beta,
    ) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
        let d = self.alpha_dim();
        if alpha.len() != d {
            return Err(Error::shape("alpha", &[d], &[alpha.len()]));
        }
        if d > MAX_ALPHA {
            return Err(Error::invalid(format!("alpha dimension {d} exceeds {MAX_ALPHA}")));
        }
        if !self.alpha_differentiable(beta) {
            return Err(Error::invalid(format!(
                "transformation is not differentiable in alpha under beta {beta:?}"
            )));
        }
        let seeded: Vec<AlphaDual> = alpha
            .iter()
            .enumerate()
            .map(|(c, &a)| AlphaDual::variable(a, c))
            .collect();
        let out = self.apply(x, &seeded, beta)?;
        let primal = out.map(|v| v.re);
        let jac = (0..d).map(|c| out.map(|v| v.eps[c])).collect();
        Ok((primal, jac))
    }
}

/// Population variance of `U(low, high)`.
pub fn uniform_variance(low: f64, high: f64) -> f64 {
    let w = high - low;
    w * w / 12.0
}
