use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::diff::{
    epipolar_products_var, essential_projection_var, normal_matrix_var, residuals_var, smallest_eigenvector_var,
    weighted_eight_point_var,
};
use super::*;
use crate::numgrad::{finite_diff_check, Graph, ParamSet, ParamVars, Tensor, Var};

const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;

struct Scene {
    pose: Pose,
    rows: Vec<[f64; 4]>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Points in front of both cameras projected through an explicit pinhole model.
fn scene(seed: u64, n: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = axis_angle(&random_unit(&mut rng), rng.random_range(0.0..30.0));
    let t = random_unit(&mut rng);
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let x = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(2.0..6.0));
        let y = r * x + t;
        if y.z < 0.5 {
            continue;
        }
        let row = [x.x / x.z, x.y / x.z, y.x / y.z, y.y / y.z];
        if row.iter().all(|v| v.abs() <= 2.0) {
            rows.push(row);
        }
    }
    Scene { pose: Pose::new(r, t).unwrap(), rows }
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 4]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
}

fn singular_values_sorted(m: &Matrix3<f64>) -> [f64; 3] {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    [s[0], s[1], s[2]]
}

#[test]
fn essential_from_pose_examples() {
    let e = essential_from_pose(&Pose::identity_forward());
    let want = Matrix3::new(0.0, -S2, 0.0, S2, 0.0, 0.0, 0.0, 0.0, 0.0);
    assert!((e.matrix() - want).abs().max() < 1e-15);

    let e = essential_from_pose(&Pose::new(Matrix3::identity(), Vector3::x()).unwrap());
    let want = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -S2, 0.0, S2, 0.0);
    assert!((e.matrix() - want).abs().max() < 1e-15);
}

#[test]
fn essential_from_pose_annihilates_projections() {
    for seed in 0..20 {
        let s = scene(seed, 50);
        let e = essential_from_pose(&s.pose);
        assert!((e.matrix().norm() - 1.0).abs() < 1e-12);
        for r in &s.rows {
            assert!(epipolar_product(r, e.matrix()).abs() < 1e-12);
        }
    }
}

#[test]
fn sym_distance_examples() {
    let e = *essential_from_pose(&Pose::identity_forward()).matrix();
    let s = scene(3, 30);
    let es = essential_from_pose(&s.pose);
    for r in &s.rows {
        assert!(sym_epipolar_distance(r, es.matrix()) < 1e-12);
    }
    assert_eq!(sym_epipolar_distance(&[1.0, 0.0, 1.0, 0.0], &e), 0.0);
    // x at the epipole: the numerator vanishes.
    assert!(sym_epipolar_distance(&[0.0, 0.0, 1.0, 0.0], &e) < 1e-12);
    // x′ᵀEx = 1/√2, both image lines have squared length 1/2.
    let d = sym_epipolar_distance(&[1.0, 0.0, 0.0, 1.0], &e);
    assert!((d - 0.5).abs() < 1e-11, "{d}");
}

#[test]
fn sym_distance_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let e = random_matrix(&mut rng);
        let r = random_rows(&mut rng, 1)[0];
        let x = Vector3::new(r[0], r[1], 1.0);
        let xp = Vector3::new(r[2], r[3], 1.0);
        let num = xp.dot(&(e * x));
        let ex = e * x;
        let etx = e.transpose() * xp;
        let den = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y + 1e-12;
        let want = num * num / den;
        let got = sym_epipolar_distance(&r, &e);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn reciprocity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let e = random_matrix(&mut rng);
        let r = random_rows(&mut rng, 1)[0];
        assert_eq!(sym_epipolar_distance(&r, &e), sym_epipolar_distance(&reverse_row(&r), &e.transpose()));
    }
}

#[test]
fn residual_vector_examples() {
    let s = scene(4, 100);
    let c = CorrespondenceSet::new(s.rows.clone()).unwrap();
    let e = essential_from_pose(&s.pose);
    assert!(residuals(&c, e.matrix()).values().iter().all(|&v| v < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = CorrespondenceSet::new(random_rows(&mut rng, 64)).unwrap();
    let m = random_matrix(&mut rng);
    let fwd = residuals(&c, &m);
    assert_eq!(fwd, residuals(&c.reverse(), &m.transpose()));
    for (i, v) in fwd.values().iter().enumerate() {
        assert_eq!(*v, sym_epipolar_distance(c.row(i), &m));
        assert!(*v >= 0.0 && v.is_finite());
    }
}

#[test]
fn correspondence_validation() {
    assert!(matches!(CorrespondenceSet::new(vec![]), Err(GeometryError::InvalidCorrespondences(_))));
    assert!(CorrespondenceSet::new(vec![[0.0, 0.0, 11.0, 0.0]]).is_err());
    assert!(CorrespondenceSet::new(vec![[f64::NAN, 0.0, 0.0, 0.0]]).is_err());
    assert!(CorrespondenceSet::new(vec![[10.0, -10.0, 0.0, 0.0]]).is_ok());
}

#[test]
fn reverse_examples() {
    let c = CorrespondenceSet::new(vec![[1.0, 2.0, 3.0, 4.0]]).unwrap();
    assert_eq!(c.reverse().rows(), &[[3.0, 4.0, 1.0, 2.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = CorrespondenceSet::new(random_rows(&mut rng, 40)).unwrap();
    assert_eq!(c.reverse().reverse(), c);
}

#[test]
fn reversed_labels_agree() {
    let threshold = 1e-4;
    for seed in 0..10 {
        let s = scene(100 + seed, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = s.rows.clone();
        for r in rows.iter_mut().skip(30) {
            *r = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        }
        let c = CorrespondenceSet::new(rows).unwrap();
        let e = essential_from_pose(&s.pose);
        let fwd: Vec<bool> = residuals(&c, e.matrix()).values().iter().map(|&v| v < threshold).collect();
        let rev: Vec<bool> =
            residuals(&c.reverse(), e.transpose().matrix()).values().iter().map(|&v| v < threshold).collect();
        assert_eq!(fwd, rev);
        assert!(fwd[..30].iter().all(|&b| b));
    }
}

#[test]
fn eight_point_recovers_noise_free_scene() {
    let s = scene(21, 100);
    let c = CorrespondenceSet::new(s.rows).unwrap();
    let est = weighted_eight_point(&c, &vec![1.0; 100]).unwrap();
    let gt = essential_from_pose(&s.pose);
    assert!(est.sign_invariant_distance(&gt) < 1e-6);
}

#[test]
fn eight_point_errors() {
    let s = scene(22, 20);
    let c = CorrespondenceSet::new(s.rows.clone()).unwrap();
    assert!(matches!(weighted_eight_point(&c, &[0.0; 20]), Err(GeometryError::DegenerateWeights(_))));
    let mut w = vec![0.0; 20];
    w[..7].iter_mut().for_each(|v| *v = 1.0);
    assert!(matches!(weighted_eight_point(&c, &w), Err(GeometryError::DegenerateWeights(7))));
    let small = CorrespondenceSet::new(s.rows[..7].to_vec()).unwrap();
    assert!(matches!(weighted_eight_point(&small, &[1.0; 7]), Err(GeometryError::TooFewCorrespondences(7))));
    assert!(matches!(weighted_eight_point(&c, &[1.0; 19]), Err(GeometryError::LengthMismatch(20, 19))));
    // All points at the same image location: the null space is many-dimensional.
    let flat = CorrespondenceSet::new(vec![[0.1, 0.2, 0.3, 0.4]; 10]).unwrap();
    assert!(matches!(weighted_eight_point(&flat, &[1.0; 10]), Err(GeometryError::RankDeficient(_))));
}

#[test]
fn eight_point_permutation_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let s = scene(23, 60);
    let mut rows = s.rows.clone();
    for r in rows.iter_mut().skip(40) {
        *r = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    }
    let c = CorrespondenceSet::new(rows).unwrap();
    let w: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut perm: Vec<usize> = (0..60).collect();
    perm.reverse();
    perm.swap(3, 17);
    let wp: Vec<f64> = perm.iter().map(|&p| w[p]).collect();
    let a = weighted_eight_point(&c, &w).unwrap();
    let b = weighted_eight_point(&c.permuted(&perm), &wp).unwrap();
    assert!(a.sign_invariant_distance(&b) < 1e-10);
}

#[test]
fn eight_point_across_scenes_with_positive_weights() {
    for seed in 0..50 {
        let s = scene(1000 + seed, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..40).map(|_| rng.random_range(0.05..1.0)).collect();
        let c = CorrespondenceSet::new(s.rows).unwrap();
        let est = weighted_eight_point(&c, &w).unwrap();
        let gt = essential_from_pose(&s.pose);
        assert!(est.sign_invariant_distance(&gt) < 1e-6, "seed {seed}");
    }
}

#[test]
fn eight_point_output_on_essential_manifold() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..50 {
        let c = CorrespondenceSet::new(random_rows(&mut rng, 30)).unwrap();
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let e = weighted_eight_point(&c, &w).unwrap();
        let s = singular_values_sorted(e.matrix());
        assert!((s[0] - S2).abs() < 1e-9 && (s[1] - S2).abs() < 1e-9 && s[2] < 1e-9, "{s:?}");
    }
}

#[test]
fn projection_example() {
    let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0));
    let e = EssentialMatrix::project(&m);
    assert!((e.matrix() - Matrix3::from_diagonal(&Vector3::new(S2, S2, 0.0))).abs().max() < 1e-12);
}

#[test]
fn recover_pose_forward_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let truth = Pose::identity_forward();
    let rows: Vec<[f64; 4]> = (0..30)
        .map(|_| {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..5.0));
            let y = x + truth.t;
            [x.x / x.z, x.y / x.z, y.x / y.z, y.y / y.z]
        })
        .collect();
    let c = CorrespondenceSet::new(rows).unwrap();
    let e = essential_from_pose(&truth);
    let p = recover_pose(&e, &c, &[true; 30]).unwrap();
    assert!(rotation_error(&p, &truth) < 0.01);
    assert!(p.t.angle(&Vector3::z()).to_degrees() < 0.01);
}

#[test]
fn recover_pose_errors() {
    let s = scene(32, 12);
    let c = CorrespondenceSet::new(s.rows).unwrap();
    let e = essential_from_pose(&s.pose);
    assert_eq!(recover_pose(&e, &c, &[false; 12]), Err(GeometryError::NoInliers));
    assert_eq!(recover_pose(&e, &c, &[true; 3]), Err(GeometryError::LengthMismatch(12, 3)));
}

#[test]
fn recover_pose_round_trip() {
    for seed in 0..30 {
        let s = scene(500 + seed, 15);
        let c = CorrespondenceSet::new(s.rows).unwrap();
        let e = essential_from_pose(&s.pose);
        let p = recover_pose(&e, &c, &[true; 15]).unwrap();
        assert!(rotation_error(&p, &s.pose) < 0.01, "seed {seed}");
        assert!(translation_error(&p, &s.pose) < 0.01, "seed {seed}");
        assert!(essential_from_pose(&p).sign_invariant_distance(&e) < 1e-6);
    }
}

#[test]
fn pose_error_examples() {
    let id = Pose::identity_forward();
    assert_eq!((rotation_error(&id, &id), translation_error(&id, &id)), (0.0, 0.0));
    let flipped = Pose { r: id.r, t: -id.t };
    assert_eq!(translation_error(&id, &flipped), 0.0);
    let rz = Pose { r: axis_angle(&Vector3::z(), 10.0), t: id.t };
    assert!((rotation_error(&rz, &id) - 10.0).abs() < 1e-9);
    let tx = Pose { r: id.r, t: Vector3::x() };
    assert!((translation_error(&tx, &id) - 90.0).abs() < 1e-9);
}

#[test]
fn pose_validation() {
    assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::z()).is_err());
    assert!(Pose::new(-Matrix3::identity(), Vector3::z()).is_err());
    assert!(Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0)).is_err());
}

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let dims = g.dims(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let r = g.constant(Tensor::new(&dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let m = g.mul(v, r).unwrap();
    g.sum(m)
}

fn weight_params(n: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("w", Tensor::matrix(n, 1, (0..n).map(|_| rng.random_range(0.2..1.0)).collect()));
    p
}

#[test]
fn normal_matrix_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let rows = random_rows(&mut rng, 12);
    let report = finite_diff_check(
        |g: &mut Graph, v: &ParamVars| -> Result<Var, GeometryError> {
            let a = normal_matrix_var(g, &rows, v.var("w"))?;
            Ok(weighted_sum(g, a, 1))
        },
        &weight_params(12, 2),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn eigenvector_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let b = Tensor::matrix(9, 9, (0..81).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut p = ParamSet::new();
    p.insert("b", b);
    let report = finite_diff_check(
        |g: &mut Graph, v: &ParamVars| -> Result<Var, GeometryError> {
            let bt = g.transpose(v.var("b"))?;
            let a = g.matmul(bt, v.var("b"))?;
            let e = smallest_eigenvector_var(g, a)?;
            Ok(weighted_sum(g, e, 3))
        },
        &p,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn projection_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut p = ParamSet::new();
    p.insert("m", Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let report = finite_diff_check(
        |g: &mut Graph, v: &ParamVars| -> Result<Var, GeometryError> {
            let e = essential_projection_var(g, v.var("m"));
            Ok(weighted_sum(g, e, 4))
        },
        &p,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn epipolar_product_and_residual_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let rows = random_rows(&mut rng, 16);
    let c = CorrespondenceSet::new(rows.clone()).unwrap();
    let mut p = ParamSet::new();
    p.insert("e", Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let report = finite_diff_check(
        |g: &mut Graph, v: &ParamVars| -> Result<Var, GeometryError> {
            let prod = epipolar_products_var(g, &rows, v.var("e"));
            let res = residuals_var(g, &c, v.var("e"));
            let a = weighted_sum(g, prod, 5);
            let b = weighted_sum(g, res, 6);
            Ok(g.add(a, b)?)
        },
        &p,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
    let mut g = Graph::new();
    let e = g.constant(p.get("e").unwrap().clone());
    let res = residuals_var(&mut g, &c, e);
    let m = Matrix3::from_row_slice(p.get("e").unwrap().data());
    assert_eq!(g.value(res).data(), residuals(&c, &m).values());
}

#[test]
fn eight_point_chain_gradient() {
    let s = scene(45, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut rows = s.rows.clone();
    for r in rows.iter_mut().skip(20) {
        *r = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    }
    let c = CorrespondenceSet::new(rows).unwrap();
    let report = finite_diff_check(
        |g: &mut Graph, v: &ParamVars| -> Result<Var, GeometryError> {
            let e = weighted_eight_point_var(g, &c, v.var("w"))?;
            let res = residuals_var(g, &c, e);
            Ok(g.sum(res))
        },
        &weight_params(30, 7),
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");

    let mut g = Graph::new();
    let w = g.constant(weight_params(30, 7).get("w").unwrap().clone());
    let e = weighted_eight_point_var(&mut g, &c, w).unwrap();
    let direct = weighted_eight_point(&c, weight_params(30, 7).get("w").unwrap().data()).unwrap();
    let got = EssentialMatrix::from_row_major(g.value(e).data().try_into().unwrap());
    assert!(got.sign_invariant_distance(&direct) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reciprocity_property(r in prop::array::uniform4(-10.0f64..10.0), e in prop::array::uniform9(-5.0f64..5.0)) {
        let m = Matrix3::from_row_slice(&e);
        prop_assert_eq!(sym_epipolar_distance(&r, &m), sym_epipolar_distance(&reverse_row(&r), &m.transpose()));
        prop_assert!(sym_epipolar_distance(&r, &m) >= 0.0);
    }

    #[test]
    fn reverse_is_involution(rows in prop::collection::vec(prop::array::uniform4(-10.0f64..10.0), 1..20)) {
        let c = CorrespondenceSet::new(rows).unwrap();
        prop_assert_eq!(c.reverse().reverse(), c);
    }
}
