//! Gradient, Hessian-vector and mixed second-order products for objectives
//! that expose a generic value-and-gradient routine.
//!
//! Second-order products are matrix-free: the reverse pass is executed on
//! dual numbers whose tangent carries the probe direction, so the tangent of
//! the returned gradient is `∇(⟨v, ∇L⟩) = H v`.

use crate::scalar::{lift, seed, tangents, Dual, Scalar};

/// A scalar objective over one flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;

    /// Loss value and its gradient with respect to `params`.
    fn value_and_grad<T: Scalar>(&self, params: &[T]) -> (T, Vec<T>);
}

/// A scalar objective over an outer block `φ` and an inner block `θ`.
pub trait JointObjective {
    fn outer_dim(&self) -> usize;
    fn inner_dim(&self) -> usize;

    /// Returns `(L, ∇_φ L, ∇_θ L)`.
    fn value_and_grads<T: Scalar>(&self, outer: &[T], inner: &[T]) -> (T, Vec<T>, Vec<T>);

    /// `(L, ∇_θ L)` with `φ` fixed; implementations may skip the `φ` reverse pass.
    fn inner_value_and_grad<T: Scalar>(&self, outer: &[f64], inner: &[T]) -> (T, Vec<T>) {
        let (v, _, g) = self.value_and_grads(&lift_as::<T>(outer), inner);
        (v, g)
    }
}

fn lift_as<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64(x)).collect()
}

pub fn value<O: Objective>(obj: &O, params: &[f64]) -> f64 {
    obj.value_and_grad(params).0
}

pub fn grad<O: Objective>(obj: &O, params: &[f64]) -> Vec<f64> {
    obj.value_and_grad(params).1
}

pub fn hessian_vector_product<O: Objective>(obj: &O, params: &[f64], v: &[f64]) -> Vec<f64> {
    let (_, g) = obj.value_and_grad(&seed(params, v));
    tangents(&g)
}

/// `(∂²L/∂θ²) v` at `(φ, θ)`.
pub fn inner_hvp<J: JointObjective>(obj: &J, outer: &[f64], inner: &[f64], v: &[f64]) -> Vec<f64> {
    let (_, g) = obj.inner_value_and_grad::<Dual>(outer, &seed(inner, v));
    tangents(&g)
}

/// `vᵀ (∂²L/∂φ∂θ)`: the `φ`-gradient of `⟨v, ∇_θ L⟩`.
pub fn mixed_vjp<J: JointObjective>(obj: &J, outer: &[f64], inner: &[f64], v: &[f64]) -> Vec<f64> {
    let (_, g_outer, _) = obj.value_and_grads(&lift(outer), &seed(inner, v));
    tangents(&g_outer)
}

pub fn joint_grads<J: JointObjective>(
    obj: &J,
    outer: &[f64],
    inner: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let (v, go, gi) = obj.value_and_grads(outer, inner);
    (v, go, gi)
}

pub fn inner_grad<J: JointObjective>(obj: &J, outer: &[f64], inner: &[f64]) -> (f64, Vec<f64>) {
    obj.inner_value_and_grad(outer, inner)
}
