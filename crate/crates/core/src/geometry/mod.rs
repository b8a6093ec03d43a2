//! Calibrated two-view geometry.
//!
//! Conventions: a scene point `X` seen by the first camera maps to the second
//! camera as `R X + t`, so the essential matrix is `E = [t]× R` and exact
//! correspondences satisfy `x′ᵀ E x = 0` with homogeneous image points
//! `x = (x, y, 1)` in camera-normalized coordinates.

pub mod diff;
mod eight_point;
mod epipolar;
mod pose;

pub use eight_point::{
    design_row, normal_matrix, smallest_eigenpairs, weighted_eight_point, EigenPairs, MIN_WEIGHT,
    RANK_GAP,
};
pub use epipolar::{
    epipolar_product, essential_from_pose, line_denominator, residuals, sym_epipolar_distance, EPIPOLAR_EPS,
};
pub use pose::{
    axis_angle, recover_pose, rotation_error, translation_error, triangulate_depths,
};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::numgrad::{NumError, Tensor};

/// Largest absolute coordinate accepted in a [`CorrespondenceSet`].
pub const COORD_BOUND: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("fewer than 8 usable weights ({0} above threshold)")]
    DegenerateWeights(usize),
    #[error("ambiguous null space: two smallest eigenvalues differ by {0:e}")]
    RankDeficient(f64),
    #[error("no inliers selected")]
    NoInliers,
    #[error("two pose candidates tie on cheirality ({0} points in front)")]
    AmbiguousCheirality(usize),
    #[error("invalid correspondences: {0}")]
    InvalidCorrespondences(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("length mismatch: {0} correspondences vs {1} values")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// `N` putative matches; row `i` is `(x, y, x′, y′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    rows: Vec<[f64; 4]>,
}

impl CorrespondenceSet {
    pub fn new(rows: Vec<[f64; 4]>) -> Result<Self, GeometryError> {
        if rows.is_empty() {
            return Err(GeometryError::InvalidCorrespondences("empty set".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite() || v.abs() > COORD_BOUND)) {
            return Err(GeometryError::InvalidCorrespondences(format!(
                "row {i} is non-finite or outside ±{COORD_BOUND}"
            )));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64; 4] {
        &self.rows[i]
    }

    /// Swaps the two views: `(x, y, x′, y′) → (x′, y′, x, y)`.
    pub fn reverse(&self) -> Self {
        Self { rows: self.rows.iter().map(reverse_row).collect() }
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { rows: perm.iter().map(|&p| self.rows[p]).collect() }
    }

    /// Subset of rows where `mask` is set.
    pub fn select(&self, mask: &[bool]) -> Vec<[f64; 4]> {
        self.rows.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect()
    }

    /// `N × 4` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows.len(), 4, self.rows.iter().flatten().copied().collect())
    }
}

pub fn reverse_row(r: &[f64; 4]) -> [f64; 4] {
    [r[2], r[3], r[0], r[1]]
}

/// Essential matrix with unit Frobenius norm and singular values `(1, 1, 0)/√2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    /// Projects an arbitrary 3 × 3 matrix onto the essential manifold.
    pub fn project(m: &Matrix3<f64>) -> Self {
        Self(eight_point::project_to_essential(m).0)
    }

    /// Wraps a matrix assumed to already satisfy the invariants.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn neg(&self) -> Self {
        Self(-self.0)
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Self {
        Self(Matrix3::from_row_slice(v))
    }

    /// `min(‖self − other‖_F, ‖self + other‖_F)`.
    pub fn sign_invariant_distance(&self, other: &EssentialMatrix) -> f64 {
        (self.0 - other.0).norm().min((self.0 + other.0).norm())
    }
}

/// Relative pose: rotation and unit translation direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    /// Validates orthonormality, `det(r) = 1` and `‖t‖ = 1` within 1e-9.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidPose(format!("rotation not orthonormal (err {ortho:e})")));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose("rotation determinant is not 1".into()));
        }
        if (t.norm() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose(format!("translation norm {} is not 1", t.norm())));
        }
        Ok(Self { r, t })
    }

    pub fn identity_forward() -> Self {
        Self { r: Matrix3::identity(), t: Vector3::z() }
    }
}

/// Per-correspondence non-negative epipolar residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector(pub Vec<f64>);

impl ResidualVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests;
