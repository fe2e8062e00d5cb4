//! Scalar abstraction shared by every numeric module.
//!
//! Geometry, losses and the network are written against [`Scalar`] so the same
//! code runs in `f32` (training, inference) and `f64` (gradient checks).
//! [`Jet`] is a forward-mode dual number that also implements
//! [`num_traits::Float`]; instantiating the geometry with it yields exact
//! Jacobians of the camera projection.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

/// Floating point element type of tensors and parameters.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column-major buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs.unsigned_abs() + (cols as isize - 1) as usize * cs.unsigned_abs() + 1
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too small");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too small");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dual number carrying `N` directional derivatives alongside the value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<T, const N: usize> {
    pub re: T,
    pub eps: [T; N],
}

impl<T: Float, const N: usize> Jet<T, N> {
    pub fn constant(re: T) -> Self {
        Self { re, eps: [T::zero(); N] }
    }

    /// Seeds the `i`-th derivative direction.
    pub fn variable(re: T, i: usize) -> Self {
        let mut eps = [T::zero(); N];
        eps[i] = T::one();
        Self { re, eps }
    }

    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = *e * df;
        }
        Self { re: f, eps }
    }
}

impl<T: Float, const N: usize> PartialOrd for Jet<T, N> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<T: Float, const N: usize> Add for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(o.eps) {
            *e = *e + b;
        }
        Self { re: self.re + o.re, eps }
    }
}

impl<T: Float, const N: usize> Sub for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(o.eps) {
            *e = *e - b;
        }
        Self { re: self.re - o.re, eps }
    }
}

impl<T: Float, const N: usize> Mul for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(o.eps) {
            *e = *e * o.re + self.re * b;
        }
        Self { re: self.re * o.re, eps }
    }
}

impl<T: Float, const N: usize> Div for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.re;
        let re = self.re * inv;
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(o.eps) {
            *e = (*e - re * b) * inv;
        }
        Self { re, eps }
    }
}

impl<T: Float, const N: usize> Rem for Jet<T, N> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        // d(a mod b) = da - trunc(a/b) db
        let q = (self.re / o.re).trunc();
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(o.eps) {
            *e = *e - q * b;
        }
        Self { re: self.re % o.re, eps }
    }
}

impl<T: Float, const N: usize> Neg for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.re, -T::one())
    }
}

impl<T: Float, const N: usize> Zero for Jet<T, N> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero()
    }
}

impl<T: Float, const N: usize> One for Jet<T, N> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Float, const N: usize> Num for Jet<T, N> {
    type FromStrRadixErr = T::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        T::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<T: Float, const N: usize> ToPrimitive for Jet<T, N> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<T: Float, const N: usize> NumCast for Jet<T, N> {
    fn from<P: ToPrimitive>(n: P) -> Option<Self> {
        T::from(n).map(Self::constant)
    }
}

impl<T: Float, const N: usize> Float for Jet<T, N> {
    fn nan() -> Self {
        Self::constant(T::nan())
    }
    fn infinity() -> Self {
        Self::constant(T::infinity())
    }
    fn neg_infinity() -> Self {
        Self::constant(T::neg_infinity())
    }
    fn neg_zero() -> Self {
        Self::constant(T::neg_zero())
    }
    fn min_value() -> Self {
        Self::constant(T::min_value())
    }
    fn min_positive_value() -> Self {
        Self::constant(T::min_positive_value())
    }
    fn max_value() -> Self {
        Self::constant(T::max_value())
    }
    fn is_nan(self) -> bool {
        self.re.is_nan() || self.eps.iter().any(|e| e.is_nan())
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite() || self.eps.iter().any(|e| e.is_infinite())
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.iter().all(|e| e.is_finite())
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        Self { re: self.re.fract(), eps: self.eps }
    }
    fn abs(self) -> Self {
        if self.re < T::zero() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.re.recip();
        self.chain(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let p = self.re.powi(n - 1);
        self.chain(p * self.re, T::from(n).unwrap() * p)
    }
    fn powf(self, n: Self) -> Self {
        // a^b = exp(b ln a)
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::one() / (s + s))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.chain(e, e * T::from(std::f64::consts::LN_2).unwrap())
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), (self.re * T::from(std::f64::consts::LN_2).unwrap()).recip())
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), (self.re * T::from(std::f64::consts::LN_10).unwrap()).recip())
    }
    fn max(self, other: Self) -> Self {
        if self.re >= other.re {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.re <= other.re {
            self
        } else {
            other
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.re > other.re {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        self.chain(c, (T::from(3.0).unwrap() * c * c).recip())
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, T::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), (T::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -(T::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), (T::one() + self.re * self.re).recip())
    }
    fn atan2(self, other: Self) -> Self {
        let d = self.re * self.re + other.re * other.re;
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(other.eps) {
            *e = (other.re * *e - self.re * b) / d;
        }
        Self { re: self.re.atan2(other.re), eps }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), (T::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, T::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), (self.re * self.re + T::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), (self.re * self.re - T::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), (T::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}
