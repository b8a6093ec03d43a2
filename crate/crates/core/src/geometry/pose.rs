use nalgebra::{Matrix3, Unit, Vector3};

use super::{CorrespondenceSet, EssentialMatrix, GeometryError, Pose};

/// Rotation matrix for `angle_deg` degrees about `axis`.
pub fn axis_angle(axis: &Vector3<f64>, angle_deg: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_deg.to_radians()).into_inner()
}

/// Depths of one correspondence in both views for the candidate `(r, t)`.
///
/// Solves `z₂ x′ = z₁ R x + t` for `z₁` in least squares via the cross product
/// with `x′`; returns `None` when the rays are parallel.
pub fn triangulate_depths(c: &[f64; 4], r: &Matrix3<f64>, t: &Vector3<f64>) -> Option<(f64, f64)> {
    let x = Vector3::new(c[0], c[1], 1.0);
    let xp = Vector3::new(c[2], c[3], 1.0);
    let rx = r * x;
    let a = xp.cross(&rx);
    let b = xp.cross(t);
    let denom = a.norm_squared();
    if denom < 1e-18 {
        return None;
    }
    let z1 = -a.dot(&b) / denom;
    let z2 = (rx * z1 + t).z;
    Some((z1, z2))
}

fn pose_candidates(e: &EssentialMatrix) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.matrix().svd(true, true);
    let mut u = svd.u.expect("u requested");
    let mut v = svd.v_t.expect("v_t requested").transpose();
    // Sort so the smallest singular value is last.
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t = u.column(2).into_owned().normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Picks the decomposition of `e` that places the most masked
/// correspondences in front of both cameras.
pub fn recover_pose(e: &EssentialMatrix, c: &CorrespondenceSet, inlier_mask: &[bool]) -> Result<Pose, GeometryError> {
    if inlier_mask.len() != c.len() {
        return Err(GeometryError::LengthMismatch(c.len(), inlier_mask.len()));
    }
    let inliers = c.select(inlier_mask);
    if inliers.is_empty() {
        return Err(GeometryError::NoInliers);
    }
    let candidates = pose_candidates(e);
    let counts: Vec<usize> = candidates
        .iter()
        .map(|(r, t)| {
            inliers
                .iter()
                .filter(|row| matches!(triangulate_depths(row, r, t), Some((z1, z2)) if z1 > 0.0 && z2 > 0.0))
                .count()
        })
        .collect();
    let best = *counts.iter().max().expect("four candidates");
    if counts.iter().filter(|&&c| c == best).count() > 1 {
        return Err(GeometryError::AmbiguousCheirality(best));
    }
    let idx = counts.iter().position(|&c| c == best).expect("max exists");
    let (r, t) = candidates[idx];
    Ok(Pose { r, t })
}

/// Angle of `a.rᵀ b.r` in degrees.
pub fn rotation_error(a: &Pose, b: &Pose) -> f64 {
    let cos = ((a.r.transpose() * b.r).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Sign-invariant angle between translation directions, in degrees.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    a.t.dot(&b.t).abs().clamp(0.0, 1.0).acos().to_degrees()
}
