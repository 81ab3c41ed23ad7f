//! Scalar abstractions.
//!
//! [`Real`] is the storage/arithmetic type of tensors and of the reverse-mode
//! graph (`f32` or `f64`). [`Scalar`] is the looser bound used by the image
//! generators and colour transforms, which also run on forward-mode [`Dual`]
//! numbers to obtain derivatives with respect to transformation parameters.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, One, Zero};

/// Floating point type usable as tensor storage: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + NumCast
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Tag written into file headers.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: slice lengths match the row-major strides passed in.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f64 impl.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Minimal numeric interface shared by plain floats and dual numbers.
///
/// Comparisons (`PartialOrd`) look at the primal value only.
pub trait Scalar:
    Copy
    + Debug
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    /// Primal value as `f64`.
    fn primal(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;

    /// Clip to `[0, 1]`; derivative 1 strictly inside, 0 elsewhere.
    fn clamp01(self) -> Self {
        let p = self.primal();
        if p > 0.0 && p < 1.0 {
            self
        } else if p <= 0.0 {
            Self::zero()
        } else {
            Self::one()
        }
    }

    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }
}

impl<T: Real> Scalar for T {
    fn from_f64(v: f64) -> Self {
        T::lit(v)
    }
    fn primal(&self) -> f64 {
        self.as_f64()
    }
    fn exp(self) -> Self {
        Float::exp(self)
    }
    fn ln(self) -> Self {
        Float::ln(self)
    }
    fn sin(self) -> Self {
        Float::sin(self)
    }
    fn cos(self) -> Self {
        Float::cos(self)
    }
    fn sqrt(self) -> Self {
        Float::sqrt(self)
    }
}

/// Forward-mode dual number carrying `N` independent tangent components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const N: usize> {
    pub re: T,
    pub eps: [T; N],
}

impl<T: Real, const N: usize> Dual<T, N> {
    pub fn constant(re: T) -> Self {
        Dual {
            re,
            eps: [T::zero(); N],
        }
    }

    /// Independent variable seeded along tangent slot `slot`.
    pub fn variable(re: T, slot: usize) -> Self {
        let mut d = Self::constant(re);
        d.eps[slot] = T::one();
        d
    }

    fn chain(self, re: T, dfdx: T) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= dfdx;
        }
        Dual { re, eps }
    }
}

impl<T: Real, const N: usize> PartialOrd for Dual<T, N> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<T: Real, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps) {
            *a += b;
        }
        self
    }
}

impl<T: Real, const N: usize> AddAssign for Dual<T, N> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<T: Real, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps) {
            *a -= b;
        }
        self
    }
}

impl<T: Real, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [T::zero(); N];
        for (k, e) in eps.iter_mut().enumerate() {
            *e = self.eps[k] * rhs.re + self.re * rhs.eps[k];
        }
        Dual {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<T: Real, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let re = self.re / rhs.re;
        let mut eps = [T::zero(); N];
        for (k, e) in eps.iter_mut().enumerate() {
            *e = (self.eps[k] - re * rhs.eps[k]) / rhs.re;
        }
        Dual { re, eps }
    }
}

impl<T: Real, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.re, -T::one())
    }
}

impl<T: Real, const N: usize> Zero for Dual<T, N> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.iter().all(|e| e.is_zero())
    }
}

impl<T: Real, const N: usize> One for Dual<T, N> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Real, const N: usize> Scalar for Dual<T, N> {
    fn from_f64(v: f64) -> Self {
        Self::constant(T::lit(v))
    }
    fn primal(&self) -> f64 {
        self.re.as_f64()
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::one() / (s + s))
    }
    fn scale(self, c: f64) -> Self {
        let c = T::lit(c);
        self.chain(self.re * c, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D2 = Dual<f64, 2>;

    #[test]
    fn product_rule() {
        let x = D2::variable(3.0, 0);
        let y = D2::variable(4.0, 1);
        let p = x * y;
        assert_eq!(p.re, 12.0);
        assert_eq!(p.eps, [4.0, 3.0]);
    }

    #[test]
    fn sin_at_zero() {
        let s = Scalar::sin(Dual::<f64, 1>::variable(0.0, 0));
        assert_eq!(s.re, 0.0);
        assert_eq!(s.eps[0], 1.0);
    }

    #[test]
    fn quotient_and_sqrt_match_closed_forms() {
        let x = D2::variable(2.0, 0);
        let q = D2::one() / x;
        assert!((q.eps[0] + 0.25).abs() < 1e-15);
        let r = Scalar::sqrt(x);
        assert!((r.eps[0] - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn clamp_subgradient() {
        let inside = Dual::<f64, 1>::variable(0.3, 0).clamp01();
        assert_eq!(inside.eps[0], 1.0);
        let above = Dual::<f64, 1>::variable(1.3, 0).clamp01();
        assert_eq!((above.re, above.eps[0]), (1.0, 0.0));
        let edge = Dual::<f64, 1>::variable(0.0, 0).clamp01();
        assert_eq!(edge.eps[0], 0.0);
    }

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let mut c32 = [0f32; 4];
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        f32::gemm(2, 3, 2, &a32, &b32, &mut c32);
        assert_eq!(c32, [4.0, 5.0, 10.0, 11.0]);
    }
}
