use nalgebra::{Matrix3, SMatrix, SVector};

use super::{CorrespondenceSet, EssentialMatrix, GeometryError};

/// Weights at or below this value do not count toward the 8 required.
pub const MIN_WEIGHT: f64 = 1e-8;
/// Minimum separation of the two smallest eigenvalues of `XᵀWX`.
pub const RANK_GAP: f64 = 1e-12;

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;

/// Row of the epipolar design matrix: `design_row(c) · vec(E) = x′ᵀ E x`
/// with `vec` in row-major order.
pub fn design_row(c: &[f64; 4]) -> [f64; 9] {
    let (x, y, xp, yp) = (c[0], c[1], c[2], c[3]);
    [xp * x, xp * y, xp, yp * x, yp * y, yp, x, y, 1.0]
}

/// `Σᵢ wᵢ Xᵢᵀ Xᵢ` for the given (already normalized) weights.
pub fn normal_matrix(rows: &[[f64; 4]], weights: &[f64]) -> Mat9 {
    let mut a = Mat9::zeros();
    for (r, &w) in rows.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let x = design_row(r);
        for i in 0..9 {
            let wi = w * x[i];
            for j in i..9 {
                a[(i, j)] += wi * x[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    a
}

/// Eigen-decomposition of a symmetric 9 × 9 matrix sorted by ascending eigenvalue.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: [f64; 9],
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: Mat9,
}

impl EigenPairs {
    pub fn smallest(&self) -> Vec9 {
        self.vectors.column(0).into_owned()
    }

    pub fn gap(&self) -> f64 {
        self.values[1] - self.values[0]
    }
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
pub(crate) fn canonical_sign(v: &mut Vec9) {
    let mut best = 0;
    for i in 1..9 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        *v = -*v;
    }
}

pub fn smallest_eigenpairs(a: &Mat9) -> EigenPairs {
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut values = [0.0; 9];
    let mut vectors = Mat9::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col: Vec9 = eig.eigenvectors.column(src).into_owned();
        col /= col.norm();
        if dst == 0 {
            canonical_sign(&mut col);
        }
        vectors.set_column(dst, &col);
    }
    EigenPairs { values, vectors }
}

/// SVD pieces of a projection, kept for differentiation.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionParts {
    pub u: Matrix3<f64>,
    pub v: Matrix3<f64>,
    pub singular: [f64; 3],
    /// Target singular values aligned with `singular`.
    pub target: [f64; 3],
}

/// Replaces the singular values of `m` with `(1, 1, 0)/√2`.
pub(crate) fn project_to_essential(m: &Matrix3<f64>) -> (Matrix3<f64>, ProjectionParts) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut smallest = 0;
    for i in 1..3 {
        if s[i] < s[smallest] {
            smallest = i;
        }
    }
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let mut target = [c; 3];
    target[smallest] = 0.0;
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::from(target));
    let out = u * d * v.transpose();
    (out, ProjectionParts { u, v, singular: [s[0], s[1], s[2]], target })
}

/// Validates weights and returns them normalized to sum 1.
pub(crate) fn normalized_weights(n: usize, weights: &[f64]) -> Result<Vec<f64>, GeometryError> {
    if weights.len() != n {
        return Err(GeometryError::LengthMismatch(n, weights.len()));
    }
    if n < 8 {
        return Err(GeometryError::TooFewCorrespondences(n));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GeometryError::DegenerateWeights(0));
    }
    let usable = weights.iter().filter(|&&w| w > MIN_WEIGHT).count();
    let total: f64 = weights.iter().sum();
    if usable < 8 || total <= 0.0 {
        return Err(GeometryError::DegenerateWeights(usable));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

pub(crate) fn reshape_row_major(v: &Vec9) -> Matrix3<f64> {
    Matrix3::from_row_slice(v.as_slice())
}

/// Weighted linear essential-matrix estimate: smallest eigenvector of `XᵀWX`
/// projected onto the essential manifold. Defined up to global sign.
pub fn weighted_eight_point(c: &CorrespondenceSet, weights: &[f64]) -> Result<EssentialMatrix, GeometryError> {
    let w = normalized_weights(c.len(), weights)?;
    let pairs = smallest_eigenpairs(&normal_matrix(c.rows(), &w));
    if pairs.gap() < RANK_GAP {
        return Err(GeometryError::RankDeficient(pairs.gap()));
    }
    let m = reshape_row_major(&pairs.smallest());
    Ok(EssentialMatrix::from_matrix_unchecked(project_to_essential(&m).0))
}
