//! Deterministic Adam training over a dataset of image pairs.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evalcli::checkpoint::{write_checkpoint, Checkpoint, CheckpointError};
use crate::numgrad::{Graph, ParamSet};
use crate::pipeline::{model_objective, LossConfig, ModelParams, PipelineError};
use crate::synthgen::SampleRecord;

/// Steps between log rows.
pub const LOG_EVERY: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("parameter and gradient sets disagree at {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Pairs per step.
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 16, iterations: 5000, seed: 0, grad_clip: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
    /// Steps aborted on non-finite gradients.
    pub rejected: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, rejected: 0 }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves parameters and
/// moments untouched and is counted in `state.rejected`.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::ShapeMismatch(name.to_string()))?;
        if g.dims() != p.dims() {
            return Err(TrainError::ShapeMismatch(name.to_string()));
        }
        if !g.is_finite() {
            state.rejected += 1;
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::ShapeMismatch(name.to_string()))?.data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| TrainError::ShapeMismatch(name.to_string()))?.data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) {
    let norm = grads.iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Loss and parameter gradients of the configured objective on one sample,
/// plus the number of uniform-weight fallbacks taken.
pub fn sample_gradients(
    model: &ModelParams,
    rec: &SampleRecord,
    cfg: &LossConfig,
) -> Result<(f64, ParamSet, usize), PipelineError> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let lg = model_objective(&mut g, &model.config, &vars, &rec.corr, &rec.labels, &rec.e, cfg)?;
    let loss = g.value(lg.loss).item().expect("scalar loss");
    let grads = g.backward(lg.loss)?;
    Ok((loss, model.params.collect_grads(&vars, &grads), lg.fallbacks))
}

/// Where training artifacts go.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// Also checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Append-only `step,loss,seconds` log.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean step loss since the previous row.
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: ModelParams,
    pub log: Vec<LogRow>,
    /// Mean loss over the usable samples of each step.
    pub step_losses: Vec<f64>,
    pub draws: usize,
    /// Draws skipped for `DegenerateLabels` or `NoInliers`.
    pub skipped: usize,
    pub fallbacks: usize,
    pub rejected_steps: usize,
}

impl TrainReport {
    /// Mean of `step_losses` over `range`, clamped to the recorded steps.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.step_losses.len());
        let w = &self.step_losses[range.start.min(end)..end];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Shuffled epoch order over `n` samples, reshuffled at each pass.
struct EpochSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { rng, order: (0..n).collect(), pos: n }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn checkpoint_of(model: &ModelParams, lcfg: &LossConfig) -> Checkpoint {
    Checkpoint { model: model.clone(), lambda: lcfg.lambda, siamese: lcfg.siamese }
}

pub fn train(
    dataset: &[SampleRecord],
    mut model: ModelParams,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    out: &TrainOutputs,
) -> Result<TrainReport, TrainError> {
    tcfg.validate()?;
    lcfg.validate()?;
    model.config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut log_file = match &out.log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let start = Instant::now();
    let mut sampler = EpochSampler::new(dataset.len(), tcfg.seed);
    let mut state = OptimizerState::new(&model.params);
    let mut report = TrainReport {
        model: model.clone(),
        log: Vec::new(),
        step_losses: Vec::with_capacity(tcfg.iterations),
        draws: 0,
        skipped: 0,
        fallbacks: 0,
        rejected_steps: 0,
    };
    let mut since_log = Vec::new();
    for step in 1..=tcfg.iterations {
        let mut sum: Option<ParamSet> = None;
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for _ in 0..tcfg.batch_size {
            let rec = &dataset[sampler.next()];
            report.draws += 1;
            match sample_gradients(&model, rec, lcfg) {
                Ok((loss, grads, fallbacks)) => {
                    report.fallbacks += fallbacks;
                    loss_sum += loss;
                    used += 1;
                    match &mut sum {
                        None => sum = Some(grads),
                        Some(acc) => {
                            for (name, t) in acc.iter_mut() {
                                let g = grads.get(name).expect("same parameter set");
                                t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
                Err(e) if e.is_sample_defect() => report.skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
        if let Some(mut grads) = sum {
            let inv = 1.0 / used as f64;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            if let Some(c) = tcfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            match adam_step(&mut model.params, &grads, &mut state, tcfg) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient(_)) => {}
                Err(e) => return Err(e),
            }
            let mean = loss_sum / used as f64;
            report.step_losses.push(mean);
            since_log.push(mean);
        } else {
            report.step_losses.push(f64::NAN);
        }
        if step % LOG_EVERY == 0 {
            let row = LogRow {
                step,
                loss: since_log.iter().sum::<f64>() / since_log.len() as f64,
                seconds: start.elapsed().as_secs_f64(),
            };
            since_log.clear();
            if let Some(f) = &mut log_file {
                writeln!(f, "{},{},{:.3}", row.step, row.loss, row.seconds)?;
            }
            report.log.push(row);
        }
        if let (Some(path), Some(every)) = (&out.checkpoint, out.checkpoint_every) {
            if every > 0 && step % every == 0 {
                write_checkpoint(path, &checkpoint_of(&model, lcfg))?;
            }
        }
    }
    if let Some(path) = &out.checkpoint {
        write_checkpoint(path, &checkpoint_of(&model, lcfg))?;
    }
    report.rejected_steps = state.rejected;
    report.model = model;
    Ok(report)
}
