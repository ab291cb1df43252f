//! Scalar abstraction shared by every differentiable computation.
//!
//! Every forward and backward pass in this crate is generic over [`Scalar`].
//! Running a hand-written reverse pass with [`Dual`] numbers, whose tangent
//! is seeded with a direction `v`, yields the directional derivative of the
//! gradient: a Hessian-vector product computed forward-over-reverse.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn scale(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }

    fn sigmoid(self) -> Self {
        // split on sign so exp never overflows
        if self.value() >= 0.0 {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    fn softplus(self) -> Self {
        if self.value() > 0.0 {
            self + (Self::one() + (-self).exp()).ln()
        } else {
            (Self::one() + self.exp()).ln()
        }
    }

    /// ReLU with the subgradient at 0 taken as 0.
    fn relu(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order forward-mode dual number `v + d·ε`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub const fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }

    pub const fn constant(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
}

/// Seed a primal vector with a tangent direction.
pub fn seed(values: &[f64], tangent: &[f64]) -> Vec<Dual> {
    assert_eq!(values.len(), tangent.len(), "tangent length mismatch");
    values
        .iter()
        .zip(tangent)
        .map(|(&v, &d)| Dual::new(v, d))
        .collect()
}

pub fn lift(values: &[f64]) -> Vec<Dual> {
    values.iter().map(|&v| Dual::constant(v)).collect()
}

pub fn tangents(xs: &[Dual]) -> Vec<f64> {
    xs.iter().map(|x| x.d).collect()
}

pub fn primals<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.value()).collect()
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.v -= o.v;
        self.d -= o.d;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual::new(self.v * k, self.d * k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_chain_rule() {
        // f(x) = exp(x) * x / (1 + x^2), checked against central differences
        let f = |x: Dual| x.exp() * x / (Dual::one() + x * x);
        let g = |x: f64| x.exp() * x / (1.0 + x * x);
        let x = 0.7;
        let d = f(Dual::new(x, 1.0)).d;
        let h = 1e-6;
        let fd = (g(x + h) - g(x - h)) / (2.0 * h);
        assert!((d - fd).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert!((800.0f64).sigmoid() <= 1.0);
        assert!((-800.0f64).sigmoid() >= 0.0);
        let s = Dual::new(1.3, 1.0).sigmoid();
        let v = 1.3f64.sigmoid();
        assert!((s.d - v * (1.0 - v)).abs() < 1e-14);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((0.0f64.softplus() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(800.0f64.softplus(), 800.0);
        assert!((-800.0f64).softplus() >= 0.0);
        let s = Dual::new(-0.4, 1.0).softplus();
        assert!((s.d - (-0.4f64).sigmoid()).abs() < 1e-14);
    }

    #[test]
    fn relu_kink_is_zero() {
        assert_eq!(Dual::new(0.0, 1.0).relu(), Dual::new(0.0, 0.0));
        assert_eq!(Dual::new(2.0, 3.0).relu(), Dual::new(2.0, 3.0));
    }
}
