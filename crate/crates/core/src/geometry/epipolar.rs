use nalgebra::Matrix3;

use super::{CorrespondenceSet, EssentialMatrix, Pose, ResidualVector};

/// Denominator guard of [`sym_epipolar_distance`].
pub const EPIPOLAR_EPS: f64 = 1e-12;

pub fn skew(v: &nalgebra::Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `[t]× R`, Frobenius-normalized.
pub fn essential_from_pose(pose: &Pose) -> EssentialMatrix {
    let e = skew(&pose.t) * pose.r;
    EssentialMatrix::from_matrix_unchecked(e / e.norm())
}

/// `x′ᵀ E x` for row `(x, y, x′, y′)`.
///
/// Terms `E_kl · (x′_k x_l)` are summed diagonal first, then in mirrored
/// pairs, so the reversed row under `Eᵀ` yields a bit-identical value.
pub fn epipolar_product(c: &[f64; 4], e: &Matrix3<f64>) -> f64 {
    let x = [c[0], c[1], 1.0];
    let xp = [c[2], c[3], 1.0];
    let t = |k: usize, l: usize| e[(k, l)] * (xp[k] * x[l]);
    t(0, 0) + t(1, 1) + t(2, 2) + (t(0, 1) + t(1, 0)) + (t(0, 2) + t(2, 0)) + (t(1, 2) + t(2, 1))
}

/// First two entries of `E x` and of `Eᵀ x′`.
pub(crate) fn line_terms(c: &[f64; 4], e: &Matrix3<f64>) -> ([f64; 2], [f64; 2]) {
    let x = [c[0], c[1], 1.0];
    let xp = [c[2], c[3], 1.0];
    let ex = |k: usize| e[(k, 0)] * x[0] + e[(k, 1)] * x[1] + e[(k, 2)] * x[2];
    let etxp = |l: usize| e[(0, l)] * xp[0] + e[(1, l)] * xp[1] + e[(2, l)] * xp[2];
    ([ex(0), ex(1)], [etxp(0), etxp(1)])
}

/// `‖ρ(E x)‖² + ‖ρ(Eᵀ x′)‖² + ε`.
pub fn line_denominator(c: &[f64; 4], e: &Matrix3<f64>) -> f64 {
    let (a, b) = line_terms(c, e);
    (a[0] * a[0] + a[1] * a[1]) + (b[0] * b[0] + b[1] * b[1]) + EPIPOLAR_EPS
}

/// `(x′ᵀ E x)² / (‖ρ(E x)‖² + ‖ρ(Eᵀ x′)‖² + ε)` where `ρ` keeps two components.
pub fn sym_epipolar_distance(c: &[f64; 4], e: &Matrix3<f64>) -> f64 {
    let s = epipolar_product(c, e);
    s * s / line_denominator(c, e)
}

pub fn residuals(c: &CorrespondenceSet, e: &Matrix3<f64>) -> ResidualVector {
    ResidualVector(c.rows().iter().map(|r| sym_epipolar_distance(r, e)).collect())
}
