//! Metrics, checkpoints, configuration files and the ablation harness behind
//! the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod gradsuite;

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{recover_pose, rotation_error, translation_error, CorrespondenceSet, EssentialMatrix};
use crate::pipeline::{two_stage_forward, LossConfig, ModelParams, PipelineError, SiameseMode};
use crate::synthgen::{SampleRecord, SynthError};
use crate::trainer::{train, TrainError, TrainOutputs};

use self::checkpoint::CheckpointError;
use self::config::{GridConfig, RunConfig};

/// Pose accuracy threshold in degrees.
pub const POSE_THRESHOLD_DEG: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Predicted inliers: `logit > 0`, equivalently `p > 0`.
pub fn classify(p: &[f64], logits: &[f64]) -> Vec<bool> {
    assert_eq!(p.len(), logits.len(), "probability and logit lengths differ");
    classify_at(logits, 0.0)
}

pub fn classify_at(logits: &[f64], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&o| o > threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn of(pred: &[bool], labels: &[bool]) -> Self {
        assert_eq!(pred.len(), labels.len(), "prediction and label lengths differ");
        let mut c = Self::default();
        for (&p, &l) in pred.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> MatchMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let fscore = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        MatchMetrics { precision, recall, fscore }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchMetrics {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

pub fn match_metrics(pred: &[bool], labels: &[bool]) -> MatchMetrics {
    MatchCounts::of(pred, labels).metrics()
}

/// F-score of predicting every correspondence as an inlier when a fraction
/// `q` are inliers.
pub fn all_positive_fscore(q: f64) -> f64 {
    if q <= 0.0 {
        0.0
    } else {
        2.0 * q / (1.0 + q)
    }
}

/// Inlier mask and essential estimate for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub inliers: Vec<bool>,
    pub e_hat: EssentialMatrix,
}

pub trait Matcher {
    fn predict(&self, c: &CorrespondenceSet) -> Result<Prediction, PipelineError>;
}

impl Matcher for ModelParams {
    fn predict(&self, c: &CorrespondenceSet) -> Result<Prediction, PipelineError> {
        let (_, s2) = two_stage_forward(c, self)?;
        Ok(Prediction { inliers: classify(&s2.p, &s2.logits), e_hat: s2.e_hat })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseMetrics {
    pub map5: f64,
    /// Degrees; `∞` where no pose could be recovered.
    pub rotation_errors: Vec<f64>,
    pub translation_errors: Vec<f64>,
}

/// Fraction of pairs whose larger angular error is below 5°.
pub fn map5(rotation_errors: &[f64], translation_errors: &[f64]) -> f64 {
    assert_eq!(rotation_errors.len(), translation_errors.len());
    if rotation_errors.is_empty() {
        return 0.0;
    }
    let hits = rotation_errors
        .iter()
        .zip(translation_errors)
        .filter(|(r, t)| r.max(**t) < POSE_THRESHOLD_DEG)
        .count();
    hits as f64 / rotation_errors.len() as f64
}

/// Full evaluation of a matcher on a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Pooled over all test correspondences.
    pub matching: MatchMetrics,
    pub pose: PoseMetrics,
    /// Fraction of test correspondences labelled inliers.
    pub inlier_fraction: f64,
    pub failed_predictions: usize,
}

impl EvalReport {
    pub fn baseline_fscore(&self) -> f64 {
        all_positive_fscore(self.inlier_fraction)
    }
}

pub fn evaluate(model: &dyn Matcher, test: &[SampleRecord]) -> EvalReport {
    let mut counts = MatchCounts::default();
    let (mut rot, mut trans) = (Vec::with_capacity(test.len()), Vec::with_capacity(test.len()));
    let (mut inliers, mut total, mut failed) = (0usize, 0usize, 0usize);
    for rec in test {
        inliers += rec.inlier_count();
        total += rec.labels.len();
        let pred = match model.predict(&rec.corr) {
            Ok(p) => p,
            Err(_) => {
                failed += 1;
                counts.add(MatchCounts { fn_: rec.inlier_count(), ..MatchCounts::default() });
                rot.push(f64::INFINITY);
                trans.push(f64::INFINITY);
                continue;
            }
        };
        counts.add(MatchCounts::of(&pred.inliers, &rec.labels));
        match recover_pose(&pred.e_hat, &rec.corr, &pred.inliers) {
            Ok(pose) => {
                rot.push(rotation_error(&pose, &rec.pose));
                trans.push(translation_error(&pose, &rec.pose));
            }
            Err(_) => {
                rot.push(f64::INFINITY);
                trans.push(f64::INFINITY);
            }
        }
    }
    EvalReport {
        matching: counts.metrics(),
        pose: PoseMetrics { map5: map5(&rot, &trans), rotation_errors: rot, translation_errors: trans },
        inlier_fraction: if total == 0 { 0.0 } else { inliers as f64 / total as f64 },
        failed_predictions: failed,
    }
}

pub fn pose_metrics(model: &dyn Matcher, test: &[SampleRecord]) -> PoseMetrics {
    evaluate(model, test).pose
}

/// Trains one model from `run` and evaluates it on `test`.
pub fn train_and_evaluate(
    train_set: &[SampleRecord],
    test: &[SampleRecord],
    run: &RunConfig,
    out: &TrainOutputs,
) -> Result<(ModelParams, EvalReport, crate::trainer::TrainReport), EvalError> {
    let init = ModelParams::init(run.model_config(), run.init_seed)?;
    let report = train(train_set, init, &run.train, &run.loss, out)?;
    let eval = evaluate(&report.model, test);
    Ok((report.model.clone(), eval, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub lfc: bool,
    pub siamese: SiameseMode,
    pub k: usize,
    pub seed: u64,
    pub eval: EvalReport,
    pub final_loss: f64,
    pub skipped: usize,
}

/// Splits off the evaluation samples from the end of `dataset`.
pub fn holdout_split(dataset: &[SampleRecord], holdout: Option<usize>) -> Result<(&[SampleRecord], &[SampleRecord]), EvalError> {
    let h = holdout.unwrap_or(dataset.len() / 11);
    if h == 0 || h >= dataset.len() {
        return Err(EvalError::InvalidInput(format!("cannot hold out {h} of {} samples", dataset.len())));
    }
    Ok(dataset.split_at(dataset.len() - h))
}

/// Trains and evaluates every grid cell in `(lfc, siamese, k, seed)` order.
/// Each seed fixes both the initialization and the sample order.
pub fn run_ablation(dataset: &[SampleRecord], grid: &GridConfig) -> Result<Vec<AblationRow>, EvalError> {
    if grid.cell_count() == 0 {
        return Err(EvalError::Config("ablation grid is empty".into()));
    }
    let (train_set, test) = holdout_split(dataset, grid.holdout)?;
    let mut rows = Vec::with_capacity(grid.cell_count());
    for &lfc in &grid.lfc {
        for &siamese in &grid.siamese {
            for &k in &grid.k {
                for &seed in &grid.seeds {
                    let mut run = grid.run.clone();
                    run.backbone.lfc_enabled = lfc;
                    run.backbone.lfc_k = k;
                    run.loss = LossConfig { siamese, ..run.loss };
                    run.init_seed = seed;
                    run.train.seed = seed;
                    let (_, eval, report) = train_and_evaluate(train_set, test, &run, &TrainOutputs::default())?;
                    let tail = report.step_losses.len().min(100);
                    let final_loss = report.window_mean(report.step_losses.len() - tail..report.step_losses.len());
                    rows.push(AblationRow { lfc, siamese, k, seed, eval, final_loss, skipped: report.skipped });
                }
            }
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "lfc,siamese,k,seed,precision,recall,fscore,map5,baseline_fscore,final_loss,skipped";

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.eval.matching;
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            if r.lfc { "on" } else { "off" },
            r.siamese,
            r.k,
            r.seed,
            m.precision,
            m.recall,
            m.fscore,
            r.eval.pose.map5,
            r.eval.baseline_fscore(),
            r.final_loss,
            r.skipped
        );
    }
    s
}

pub const EVAL_HEADER: &str = "pairs,precision,recall,fscore,map5,baseline_fscore,failed";

pub fn eval_table(report: &EvalReport) -> String {
    let m = &report.matching;
    format!(
        "{EVAL_HEADER}\n{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
        report.pose.rotation_errors.len(),
        m.precision,
        m.recall,
        m.fscore,
        report.pose.map5,
        report.baseline_fscore(),
        report.failed_predictions
    )
}

pub const SIAMESE_HEADER: &str = "design,map5,precision,recall,fscore,seconds_per_step";

/// Trains the same run under Siamese designs (a) and (b) and tabulates pose
/// accuracy, matching scores and training cost per step.
pub fn siamese_comparison(train_set: &[SampleRecord], test: &[SampleRecord], run: &RunConfig) -> Result<String, EvalError> {
    let mut s = String::from(SIAMESE_HEADER);
    s.push('\n');
    for siamese in [SiameseMode::A, SiameseMode::B] {
        let mut r = run.clone();
        r.loss.siamese = siamese;
        let start = std::time::Instant::now();
        let (_, eval, report) = train_and_evaluate(train_set, test, &r, &TrainOutputs::default())?;
        let per_step = start.elapsed().as_secs_f64() / report.step_losses.len().max(1) as f64;
        let m = &eval.matching;
        let _ = writeln!(
            s,
            "({siamese}),{:.6},{:.6},{:.6},{:.6},{per_step:.4}",
            eval.pose.map5, m.precision, m.recall, m.fscore
        );
    }
    Ok(s)
}
