//! Forward-mode dual numbers with `N` tangent directions.
//!
//! Used for small per-pixel kernels (HSV/HVI conversions) whose branches
//! make a hand-written Jacobian error prone: the kernel is written once over
//! [`Dual`] and yields both the value and its exact local derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const N: usize> {
    pub v: T,
    pub d: [T; N],
}

impl<T: Real, const N: usize> Dual<T, N> {
    pub fn cst(v: T) -> Self {
        Self { v, d: [T::zero(); N] }
    }

    /// Independent variable along tangent direction `i`.
    pub fn var(v: T, i: usize) -> Self {
        let mut d = [T::zero(); N];
        d[i] = T::one();
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: T, dv: T) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = *x * dv;
        }
        Self { v, d }
    }

    pub fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    pub fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn ln(self) -> Self {
        self.chain(self.v.ln(), T::one() / self.v)
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, T::c(0.5) / s)
    }

    /// `self ^ e` for positive `self`.
    pub fn pow(self, e: Self) -> Self {
        (e * self.ln()).exp()
    }

    pub fn atan2(self, x: Self) -> Self {
        // d atan2(y, x) = (x dy - y dx) / (x^2 + y^2)
        let r2 = self.v * self.v + x.v * x.v;
        let mut d = [T::zero(); N];
        for i in 0..N {
            d[i] = (x.v * self.d[i] - self.v * x.d[i]) / r2;
        }
        Self { v: self.v.atan2(x.v), d }
    }

    /// Drops tangents (the result is treated as locally constant).
    pub fn freeze(self) -> Self {
        Self::cst(self.v)
    }

    pub fn scale(self, s: T) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x = *x * s;
        }
        Self { v: self.v * s, d }
    }
}

impl<T: Real, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<T: Real, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<T: Real, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [T::zero(); N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<T: Real, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.v;
        let q = self.v * inv;
        let mut d = [T::zero(); N];
        for i in 0..N {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Self { v: q, d }
    }
}

impl<T: Real, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}
