//! Scalar abstraction shared by the plain `f64` simulation path and the
//! forward-mode dual numbers used for every Jacobian in the crate.
//!
//! All simulation code is written once, generic over [`Real`]. Running it on
//! `f64` gives the forward simulation; running it on [`Dual<N>`] propagates `N`
//! tangent directions alongside. The primal lane of a dual computation is
//! bit-identical to the `f64` computation: every transcendental routes through
//! the same `libm` call and derivatives are computed on the side.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number of tangent directions carried per dual value in Jacobian sweeps.
pub const CHUNK: usize = 8;

/// Dual number type used by the Jacobian routines.
pub type D8 = Dual<CHUNK>;

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// `true` for types that carry tangents.
    const HAS_TANGENTS: bool;

    fn cst(v: f64) -> Self;
    fn re(&self) -> f64;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    /// `self^p` for a constant exponent.
    fn powf(self, p: f64) -> Self;
    /// `self^p` for a differentiable exponent; `self` must be non-negative.
    fn pow(self, p: Self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(&self) -> bool;

    /// Value of `self`, tangents of `src`. This is `sg(self) + src - sg(src)`
    /// computed without rounding on the primal lane.
    fn with_tangents_of(self, src: Self) -> Self;

    /// `max(self, 0)` with a zero derivative at the kink.
    fn relu(self) -> Self {
        if self.re() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
    fn max(self, o: Self) -> Self {
        if self.re() >= o.re() {
            self
        } else {
            o
        }
    }
    fn min(self, o: Self) -> Self {
        if self.re() <= o.re() {
            self
        } else {
            o
        }
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
}

impl Real for f64 {
    const HAS_TANGENTS: bool = false;

    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        libm::log1p(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn sin(self) -> Self {
        libm::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        libm::cos(self)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        libm::pow(self, p)
    }
    #[inline]
    fn pow(self, p: Self) -> Self {
        libm::pow(self, p)
    }
    #[inline]
    fn abs(self) -> Self {
        libm::fabs(self)
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    #[inline]
    fn with_tangents_of(self, _src: Self) -> Self {
        self
    }
}

/// Forward-mode dual number with `N` tangent directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub const fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Value `re` with unit tangent in direction `dir`.
    pub fn seeded(re: f64, dir: usize) -> Self {
        let mut eps = [0.0; N];
        eps[dir] = 1.0;
        Dual { re, eps }
    }

    #[inline]
    fn chain(self, re: f64, d: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= d;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.re += o.re;
        for i in 0..N {
            self.eps[i] += o.eps[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.re -= o.re;
        for i in 0..N {
            self.eps[i] -= o.eps[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut eps = [0.0; N];
        for (i, e) in eps.iter_mut().enumerate() {
            *e = self.eps[i] * o.re + self.re * o.eps[i];
        }
        Dual { re: self.re * o.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let re = self.re / o.re;
        let inv = 1.0 / o.re;
        let mut eps = [0.0; N];
        for (i, e) in eps.iter_mut().enumerate() {
            *e = (self.eps[i] - re * o.eps[i]) * inv;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.re += o;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: f64) -> Self {
        self.re -= o;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, o: f64) -> Self {
        self.re *= o;
        for e in self.eps.iter_mut() {
            *e *= o;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(mut self, o: f64) -> Self {
        self.re /= o;
        for e in self.eps.iter_mut() {
            *e /= o;
        }
        self
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl<const N: usize> $tr for Dual<N> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

impl<const N: usize> Real for Dual<N> {
    const HAS_TANGENTS: bool = true;

    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn re(&self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let r = libm::sqrt(self.re);
        self.chain(r, 0.5 / r)
    }
    fn exp(self) -> Self {
        let r = libm::exp(self.re);
        self.chain(r, r)
    }
    fn ln(self) -> Self {
        self.chain(libm::log(self.re), 1.0 / self.re)
    }
    fn ln_1p(self) -> Self {
        self.chain(libm::log1p(self.re), 1.0 / (1.0 + self.re))
    }
    fn tanh(self) -> Self {
        let r = libm::tanh(self.re);
        self.chain(r, 1.0 - r * r)
    }
    fn sin(self) -> Self {
        self.chain(libm::sin(self.re), libm::cos(self.re))
    }
    fn cos(self) -> Self {
        self.chain(libm::cos(self.re), -libm::sin(self.re))
    }
    fn powf(self, p: f64) -> Self {
        let r = libm::pow(self.re, p);
        let d = if p == 0.0 {
            0.0
        } else if self.re == 0.0 {
            if p == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            p * libm::pow(self.re, p - 1.0)
        };
        self.chain(r, d)
    }
    fn pow(self, p: Self) -> Self {
        let base = self.powf(p.re);
        if self.re > 0.0 {
            let dp = base.re * libm::log(self.re);
            let mut out = base;
            for i in 0..N {
                out.eps[i] += dp * p.eps[i];
            }
            out
        } else {
            base
        }
    }
    fn abs(self) -> Self {
        if self.re < 0.0 {
            -self
        } else {
            self
        }
    }
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.eps.iter().all(|e| e.is_finite())
    }
    #[inline]
    fn with_tangents_of(self, src: Self) -> Self {
        Dual {
            re: self.re,
            eps: src.eps,
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    if x.re() > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x.re() >= 0.0 {
        T::one() / ((-x).exp() + 1.0)
    } else {
        let e = x.exp();
        e / (e + 1.0)
    }
}

/// `sqrt(|v|^2 + eps^2)`: the smoothed vector norm before the `- eps` offset.
pub fn smooth_hypot<T: Real>(sq: T, eps: f64) -> T {
    (sq + eps * eps).sqrt()
}
