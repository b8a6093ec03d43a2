//! Graph operations for the differentiable parts of the two-view solver.
//!
//! `weighted_eight_point_var` chains three custom nodes: the weighted normal
//! matrix `XᵀWX`, its smallest eigenvector, and the projection onto the
//! essential manifold. Each carries an analytic backward rule.

use nalgebra::Matrix3;

use super::eight_point::{
    normal_matrix, normalized_weights, project_to_essential, smallest_eigenpairs, Mat9, Vec9, RANK_GAP,
};
use super::epipolar::{epipolar_product, line_denominator, line_terms, sym_epipolar_distance};
use super::{design_row, CorrespondenceSet, GeometryError};
use crate::numgrad::{Graph, Tensor, Var};

/// Eigenvector gradients are zeroed when the two smallest eigenvalues of the
/// normal matrix are closer than this.
pub const SPECTRAL_GAP_GUARD: f64 = 1e-9;

fn mat3_from_tensor(t: &Tensor) -> Matrix3<f64> {
    Matrix3::from_row_slice(t.data())
}

fn mat3_to_tensor(m: &Matrix3<f64>) -> Tensor {
    let mut data = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(3, 3, data)
}

fn mat9_to_tensor(m: &Mat9) -> Tensor {
    let mut data = Vec::with_capacity(81);
    for i in 0..9 {
        for j in 0..9 {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(9, 9, data)
}

/// `Σᵢ (pᵢ / Σp) Xᵢᵀ Xᵢ` as a 9 × 9 node; `weights` is `N × 1`.
pub fn normal_matrix_var(g: &mut Graph, rows: &[[f64; 4]], weights: Var) -> Result<Var, GeometryError> {
    let p = g.value(weights).data().to_vec();
    let w = normalized_weights(rows.len(), &p)?;
    let a = normal_matrix(rows, &w);
    let total: f64 = p.iter().sum();
    let design: Vec<[f64; 9]> = rows.iter().map(design_row).collect();
    let value = mat9_to_tensor(&a);
    let n = rows.len();
    Ok(g.custom(
        &[weights],
        value,
        Box::new(move |grad, _parents, out| {
            let gd = grad.data();
            let inner: f64 = gd.iter().zip(out.data()).map(|(x, y)| x * y).sum();
            let mut gw = Vec::with_capacity(n);
            for x in &design {
                let mut quad = 0.0;
                for i in 0..9 {
                    let row = &gd[i * 9..(i + 1) * 9];
                    let mut acc = 0.0;
                    for j in 0..9 {
                        acc += row[j] * x[j];
                    }
                    quad += x[i] * acc;
                }
                gw.push((quad - inner) / total);
            }
            vec![Some(Tensor::matrix(n, 1, gw))]
        }),
    ))
}

/// Unit eigenvector (9 × 1) of the smallest eigenvalue of a symmetric 9 × 9 node,
/// with its largest-magnitude entry made positive.
pub fn smallest_eigenvector_var(g: &mut Graph, a: Var) -> Result<Var, GeometryError> {
    let am = Mat9::from_row_slice(g.value(a).data());
    let pairs = smallest_eigenpairs(&am);
    if pairs.gap() < RANK_GAP {
        return Err(GeometryError::RankDeficient(pairs.gap()));
    }
    let v = pairs.smallest();
    let value = Tensor::matrix(9, 1, v.as_slice().to_vec());
    Ok(g.custom(
        &[a],
        value,
        Box::new(move |grad, _parents, _out| {
            if pairs.gap() < SPECTRAL_GAP_GUARD {
                return vec![Some(Tensor::zeros(&[9, 9]))];
            }
            let gv = Vec9::from_column_slice(grad.data());
            // dv = Σⱼ uⱼ uⱼᵀ dA v / (λ₀ − λⱼ)  ⇒  ∂L/∂A = Σⱼ cⱼ uⱼ vᵀ
            let mut left = Vec9::zeros();
            for j in 1..9 {
                let uj = pairs.vectors.column(j);
                let cj = uj.dot(&gv) / (pairs.values[0] - pairs.values[j]);
                left += uj * cj;
            }
            let ga = left * v.transpose();
            vec![Some(mat9_to_tensor(&ga))]
        }),
    ))
}

/// Replaces the singular values of a 3 × 3 node with `(1, 1, 0)/√2`.
pub fn essential_projection_var(g: &mut Graph, m: Var) -> Var {
    let mm = mat3_from_tensor(g.value(m));
    let (out, parts) = project_to_essential(&mm);
    g.custom(
        &[m],
        mat3_to_tensor(&out),
        Box::new(move |grad, _parents, _out| {
            let (u, v, s, t) = (&parts.u, &parts.v, parts.singular, parts.target);
            let gr = u.transpose() * mat3_from_tensor(grad) * v;
            let mut h = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    if i == j {
                        continue;
                    }
                    let a = if t[i] == t[j] || s[i] == s[j] { 0.0 } else { (t[i] - t[j]) / (s[i] - s[j]) };
                    let sum = s[i] + s[j];
                    let b = if sum > 0.0 { (t[i] + t[j]) / sum } else { 0.0 };
                    h[(i, j)] = 0.5 * a * (gr[(i, j)] + gr[(j, i)]) + 0.5 * b * (gr[(i, j)] - gr[(j, i)]);
                }
            }
            vec![Some(mat3_to_tensor(&(u * h * v.transpose())))]
        }),
    )
}

/// Weighted eight-point estimate as a 3 × 3 node, differentiable w.r.t. the
/// `N × 1` weight node.
pub fn weighted_eight_point_var(g: &mut Graph, c: &CorrespondenceSet, weights: Var) -> Result<Var, GeometryError> {
    let a = normal_matrix_var(g, c.rows(), weights)?;
    let v = smallest_eigenvector_var(g, a)?;
    let m = g.reshape(v, &[3, 3])?;
    Ok(essential_projection_var(g, m))
}

/// `x′ᵢᵀ E xᵢ` for each row, as an `N × 1` node.
pub fn epipolar_products_var(g: &mut Graph, rows: &[[f64; 4]], e: Var) -> Var {
    let em = mat3_from_tensor(g.value(e));
    let value = Tensor::matrix(rows.len(), 1, rows.iter().map(|r| epipolar_product(r, &em)).collect());
    let design: Vec<[f64; 9]> = rows.iter().map(design_row).collect();
    g.custom(
        &[e],
        value,
        Box::new(move |grad, _parents, _out| {
            let mut ge = [0.0; 9];
            for (x, gi) in design.iter().zip(grad.data()) {
                for (acc, xv) in ge.iter_mut().zip(x) {
                    *acc += gi * xv;
                }
            }
            vec![Some(Tensor::matrix(3, 3, ge.to_vec()))]
        }),
    )
}

/// Symmetric epipolar residuals `h(C, E)` as an `N × 1` node.
pub fn residuals_var(g: &mut Graph, c: &CorrespondenceSet, e: Var) -> Var {
    let em = mat3_from_tensor(g.value(e));
    let rows = c.rows().to_vec();
    let value = Tensor::matrix(rows.len(), 1, rows.iter().map(|r| sym_epipolar_distance(r, &em)).collect());
    g.custom(
        &[e],
        value,
        Box::new(move |grad, _parents, _out| {
            let mut ge = Matrix3::zeros();
            for (r, &gi) in rows.iter().zip(grad.data()) {
                if gi == 0.0 {
                    continue;
                }
                let x = [r[0], r[1], 1.0];
                let xp = [r[2], r[3], 1.0];
                let s = epipolar_product(r, &em);
                let den = line_denominator(r, &em);
                let (a, b) = line_terms(r, &em);
                let num_scale = 2.0 * s / den;
                let den_scale = s * s / (den * den);
                for k in 0..3 {
                    for l in 0..3 {
                        let mut dden = 0.0;
                        if k < 2 {
                            dden += 2.0 * a[k] * x[l];
                        }
                        if l < 2 {
                            dden += 2.0 * b[l] * xp[k];
                        }
                        ge[(k, l)] += gi * (num_scale * xp[k] * x[l] - den_scale * dden);
                    }
                }
            }
            vec![Some(mat3_to_tensor(&ge))]
        }),
    )
}
