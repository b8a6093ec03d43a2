//! Synthetic two-view scenes with controlled outlier ratio and image noise.
//!
//! Each sample is generated from its own ChaCha8 stream selected by
//! `(seed, index)`, so any sample can be regenerated in isolation.

mod format;

pub use format::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::{
    axis_angle, essential_from_pose, sym_epipolar_distance, CorrespondenceSet, EssentialMatrix, GeometryError, Pose,
};

/// Both views see the square `[-IMAGE_EXTENT, IMAGE_EXTENT]²` in normalized coordinates.
pub const IMAGE_EXTENT: f64 = 1.0;
/// Scenes rejected this many times in a row abort generation.
pub const MAX_RESAMPLES: usize = 100;
/// Minimum number of correspondences labelled as inliers.
pub const MIN_LABELLED_INLIERS: usize = 8;
/// Baselines are drawn from `[BASELINE_FLOOR·max, max]`.
pub const BASELINE_FLOOR: f64 = 0.5;
const POINT_ATTEMPTS_PER_ROW: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("gave up after {0} rejected resamples")]
    GenerationExhausted(usize),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    VersionMismatch(u32),
    #[error("file truncated at byte {0}")]
    TruncatedFile(usize),
    #[error("corrupt record {index}: {source}")]
    CorruptRecord { index: usize, source: GeometryError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inlier threshold on the symmetric epipolar distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelThreshold(f64);

impl LabelThreshold {
    pub fn new(tau: f64) -> Result<Self, SynthError> {
        if tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(SynthError::InvalidConfig(format!("label threshold must be positive, got {tau}")))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for LabelThreshold {
    fn default() -> Self {
        Self(1e-4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub pairs: usize,
    /// Putative matches per pair.
    pub n: usize,
    pub outlier_ratio: f64,
    pub noise_sigma: f64,
    pub depth_range: (f64, f64),
    pub max_rotation_deg: f64,
    pub max_baseline: f64,
    pub threshold: LabelThreshold,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pairs: 2000,
            n: 256,
            outlier_ratio: 0.5,
            noise_sigma: 1e-3,
            depth_range: (2.0, 10.0),
            max_rotation_deg: 30.0,
            max_baseline: 1.0,
            threshold: LabelThreshold::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return bad(format!("outlier ratio {} outside [0, 1)", self.outlier_ratio));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and non-negative", self.noise_sigma));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("depth range ({lo}, {hi}) must satisfy 0 < min ≤ max"));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg < 180.0) {
            return bad(format!("max rotation {}° outside [0, 180)", self.max_rotation_deg));
        }
        if !(self.max_baseline > 0.0 && self.max_baseline.is_finite()) {
            return bad(format!("max baseline {} must be positive", self.max_baseline));
        }
        if self.n < MIN_LABELLED_INLIERS {
            return bad(format!("need at least {MIN_LABELLED_INLIERS} matches per pair, got {}", self.n));
        }
        Ok(())
    }

    /// Rows generated from true scene points.
    pub fn inlier_count(&self) -> usize {
        ((self.n as f64) * (1.0 - self.outlier_ratio)).ceil() as usize
    }
}

/// One image pair with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub corr: CorrespondenceSet,
    pub labels: Vec<bool>,
    pub e: EssentialMatrix,
    pub pose: Pose,
}

impl SampleRecord {
    pub fn inlier_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// `labels[i] = sym_epipolar_distance(c_i, e) < τ`.
pub fn label(c: &CorrespondenceSet, e: &EssentialMatrix, tau: LabelThreshold) -> Vec<bool> {
    c.rows().iter().map(|r| sym_epipolar_distance(r, e.matrix()) < tau.value()).collect()
}

fn sample_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn in_image(x: f64, y: f64) -> bool {
    x.abs() <= IMAGE_EXTENT && y.abs() <= IMAGE_EXTENT
}

/// One attempt at a scene; `None` when visible points could not be found.
fn try_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<SampleRecord> {
    let angle = rng.random_range(0.0..=cfg.max_rotation_deg);
    let r = axis_angle(&unit_vector(rng), angle);
    let t = unit_vector(rng);
    let baseline = cfg.max_baseline * rng.random_range(BASELINE_FLOOR..=1.0);
    let (dmin, dmax) = cfg.depth_range;

    let n_in = cfg.inlier_count();
    let mut rows = Vec::with_capacity(cfg.n);
    let mut attempts = 0;
    while rows.len() < cfg.n {
        attempts += 1;
        if attempts > POINT_ATTEMPTS_PER_ROW * cfg.n {
            return None;
        }
        let x = rng.random_range(-IMAGE_EXTENT..=IMAGE_EXTENT);
        let y = rng.random_range(-IMAGE_EXTENT..=IMAGE_EXTENT);
        let depth = rng.random_range(dmin..=dmax);
        let p2 = r * Vector3::new(x * depth, y * depth, depth) + t * baseline;
        if p2.z <= 1e-3 * dmin {
            continue;
        }
        let (u, v) = (p2.x / p2.z, p2.y / p2.z);
        if !in_image(u, v) {
            continue;
        }
        if rows.len() < n_in {
            rows.push([x, y, u, v]);
        } else {
            let u = rng.random_range(-IMAGE_EXTENT..=IMAGE_EXTENT);
            let v = rng.random_range(-IMAGE_EXTENT..=IMAGE_EXTENT);
            rows.push([x, y, u, v]);
        }
    }
    if cfg.noise_sigma > 0.0 {
        for row in rows.iter_mut() {
            for c in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *c += cfg.noise_sigma * z;
            }
        }
    }
    rows.shuffle(rng);

    let pose = Pose { r, t };
    let e = essential_from_pose(&pose);
    let corr = CorrespondenceSet::new(rows).ok()?;
    let labels = label(&corr, &e, cfg.threshold);
    Some(SampleRecord { corr, labels, e, pose })
}

/// Sample `index` of the dataset described by `cfg`; deterministic in `(cfg, index)`.
pub fn gen_scene(cfg: &SceneConfig, index: u64) -> Result<SampleRecord, SynthError> {
    cfg.validate()?;
    let mut rng = sample_stream(cfg.seed, index);
    for _ in 0..=MAX_RESAMPLES {
        if let Some(rec) = try_scene(cfg, &mut rng) {
            if rec.inlier_count() >= MIN_LABELLED_INLIERS {
                return Ok(rec);
            }
        }
    }
    Err(SynthError::GenerationExhausted(MAX_RESAMPLES))
}

/// Samples `0..cfg.pairs`.
pub fn gen_dataset(cfg: &SceneConfig) -> Result<Vec<SampleRecord>, SynthError> {
    (0..cfg.pairs as u64).map(|i| gen_scene(cfg, i)).collect()
}
