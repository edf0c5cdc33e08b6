//! Physics and image operators wrapped as graph-linear maps.
//!
//! Images travel through the graph as `[B, 1, H, W]`, sinograms as
//! `[B, n_elements, n_samples]`.

use std::sync::Arc;

use pact_autodiff::{LinearMap, Real};
use pact_core::image_ops::{
    gradient_adjoint_flat, gradient_flat, haar_forward_flat, haar_inverse_flat, rotate90_flat,
    rotate_bilinear_adjoint_flat, rotate_bilinear_flat,
};
use pact_core::SystemMatrix;

/// `A`: image to sinogram. The adjoint is `A^T`.
pub struct Projector {
    a: Arc<SystemMatrix>,
}

impl Projector {
    pub fn new(a: Arc<SystemMatrix>) -> Self {
        Self { a }
    }
}

impl<T: Real> LinearMap<T> for Projector {
    fn in_shape(&self) -> Vec<usize> {
        let g = self.a.grid();
        vec![1, g.ny, g.nx]
    }
    fn out_shape(&self) -> Vec<usize> {
        let g = self.a.geometry();
        vec![g.n_elements, g.n_samples]
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        self.a.apply(x, y);
    }
    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        self.a.apply_adjoint(y, x);
    }
    fn name(&self) -> &'static str {
        "projector"
    }
}

/// Orthonormal 2-d Haar transform; the adjoint is the inverse.
pub struct Haar {
    pub n: usize,
    pub levels: usize,
}

impl<T: Real> LinearMap<T> for Haar {
    fn in_shape(&self) -> Vec<usize> {
        vec![1, self.n, self.n]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![1, self.n, self.n]
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        y.copy_from_slice(x);
        haar_forward_flat(y, self.n, self.levels);
    }
    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        x.copy_from_slice(y);
        haar_inverse_flat(x, self.n, self.levels);
    }
    fn name(&self) -> &'static str {
        "haar"
    }
}

/// Forward differences, horizontal then vertical: `[1, H, W] -> [2, H, W]`.
pub struct FiniteDifference {
    pub nx: usize,
    pub ny: usize,
}

impl<T: Real> LinearMap<T> for FiniteDifference {
    fn in_shape(&self) -> Vec<usize> {
        vec![1, self.ny, self.nx]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![2, self.ny, self.nx]
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        gradient_flat(x, self.nx, self.ny, y);
    }
    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        gradient_adjoint_flat(y, self.nx, self.ny, x);
    }
    fn name(&self) -> &'static str {
        "finite-difference"
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    /// Counterclockwise quarter turns.
    Exact90(usize),
    Bilinear(f64),
}

pub struct Rotate {
    pub n: usize,
    pub rotation: Rotation,
}

impl<T: Real> LinearMap<T> for Rotate {
    fn in_shape(&self) -> Vec<usize> {
        vec![1, self.n, self.n]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![1, self.n, self.n]
    }
    fn apply(&self, x: &[T], y: &mut [T]) {
        match self.rotation {
            Rotation::Exact90(k) => rotate90_flat(x, self.n, k % 4, y),
            Rotation::Bilinear(a) => rotate_bilinear_flat(x, self.n, a, y),
        }
    }
    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        match self.rotation {
            Rotation::Exact90(k) => rotate90_flat(y, self.n, (4 - k % 4) % 4, x),
            Rotation::Bilinear(a) => rotate_bilinear_adjoint_flat(y, self.n, a, x),
        }
    }
    fn name(&self) -> &'static str {
        "rotate"
    }
}
