//! Two-stage matcher and its training objectives.
//!
//! Stage 1 classifies the raw correspondences `C` (`N × 4`). Its
//! probabilities weight an eight-point solve, and the residuals of that
//! estimate are appended to `C` together with the probabilities to form the
//! `N × 6` input of stage 2. Stage networks are passed around as closures
//! (see [`StageFn`]) so that oracle stages can stand in for the backbone.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{forward, BackboneConfig, BackboneError, Scope};
use crate::geometry::diff::{epipolar_products_var, residuals_var, weighted_eight_point_var};
use crate::geometry::{
    line_denominator, CorrespondenceSet, EssentialMatrix, GeometryError, ResidualVector,
};
use crate::numgrad::{Graph, NumError, ParamSet, ParamVars, Tensor, Var};

pub const STAGE1_INPUT: usize = 4;
pub const STAGE2_INPUT: usize = 6;
pub const STAGE1_PREFIX: &str = "s1.";
pub const STAGE2_PREFIX: &str = "s2.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("class balancing needs both inliers and outliers in a sample")]
    DegenerateLabels,
    #[error("sample has no ground-truth inliers")]
    NoInliers,
    #[error("{0} correspondences but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl PipelineError {
    /// Errors that make a single training sample unusable without pointing at
    /// a bug.
    pub fn is_sample_defect(&self) -> bool {
        matches!(self, PipelineError::DegenerateLabels | PipelineError::NoInliers)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SiameseMode {
    None,
    /// Both stages run again on the reversed set.
    A,
    /// Only stage 2 runs again, on the reversed set with stage-1 outputs.
    #[default]
    B,
}

impl SiameseMode {
    pub const ALL: [SiameseMode; 3] = [SiameseMode::None, SiameseMode::A, SiameseMode::B];

    pub fn code(self) -> u8 {
        match self {
            SiameseMode::None => 0,
            SiameseMode::A => 1,
            SiameseMode::B => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for SiameseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiameseMode::None => "none",
            SiameseMode::A => "a",
            SiameseMode::B => "b",
        })
    }
}

impl FromStr for SiameseMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SiameseMode::None),
            "a" => Ok(SiameseMode::A),
            "b" => Ok(SiameseMode::B),
            _ => Err(PipelineError::InvalidConfig(format!("unknown siamese mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
    pub siamese: SiameseMode,
    pub class_balance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5, siamese: SiameseMode::B, class_balance: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(PipelineError::InvalidConfig(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Architecture of both stages; they differ only in input width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stage1: BackboneConfig,
    pub stage2: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(&BackboneConfig::default())
    }
}

impl ModelConfig {
    /// Both stages shaped like `template`, with input widths 4 and 6.
    pub fn new(template: &BackboneConfig) -> Self {
        Self {
            stage1: BackboneConfig { in_channels: STAGE1_INPUT, ..template.clone() },
            stage2: BackboneConfig { in_channels: STAGE2_INPUT, ..template.clone() },
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stage1.in_channels != STAGE1_INPUT || self.stage2.in_channels != STAGE2_INPUT {
            return Err(PipelineError::InvalidConfig(format!(
                "stage input widths must be {STAGE1_INPUT} and {STAGE2_INPUT}, got {} and {}",
                self.stage1.in_channels, self.stage2.in_channels
            )));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    /// Prefixed names and dims of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let tag = |prefix: &str, shapes: Vec<(String, Vec<usize>)>| {
            shapes.into_iter().map(move |(n, d)| (format!("{prefix}{n}"), d)).collect::<Vec<_>>()
        };
        let mut out = tag(STAGE1_PREFIX, self.stage1.param_shapes());
        out.extend(tag(STAGE2_PREFIX, self.stage2.param_shapes()));
        out
    }
}

/// Parameters of both stages under the `s1.` and `s2.` prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        config.stage1.init_params(STAGE1_PREFIX, &mut rng, &mut params);
        config.stage2.init_params(STAGE2_PREFIX, &mut rng, &mut params);
        Ok(Self { config, params })
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }
}

/// A stage network mapping an `N × in` input node to `(logits, p)`, both `N × 1`.
pub type StageFn<'a> = dyn Fn(&mut Graph, Var) -> Result<(Var, Var), PipelineError> + 'a;

/// The backbone under `prefix` as a [`StageFn`].
pub fn backbone_stage<'a>(
    cfg: &'a BackboneConfig,
    vars: &'a ParamVars,
    prefix: &'a str,
) -> impl Fn(&mut Graph, Var) -> Result<(Var, Var), PipelineError> + 'a {
    move |g: &mut Graph, x: Var| {
        let out = forward(g, cfg, x, &Scope::new(vars, prefix))?;
        Ok((out.logits, out.p))
    }
}

/// The two stage networks of one model.
pub struct Stages<'a> {
    pub first: &'a StageFn<'a>,
    pub second: &'a StageFn<'a>,
}

/// Graph handles of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub logits: Var,
    pub p: Var,
    pub e_hat: Var,
    pub residual: Var,
    /// Whether the eight-point solve fell back to uniform weights.
    pub fallback: bool,
}

/// Weighted eight-point node. When the weights are degenerate the solve is
/// repeated with constant weights `1/N`; the flag reports the substitution.
pub fn solve_essential(g: &mut Graph, c: &CorrespondenceSet, p: Var) -> Result<(Var, bool), PipelineError> {
    match weighted_eight_point_var(g, c, p) {
        Ok(e) => Ok((e, false)),
        Err(GeometryError::DegenerateWeights(_)) | Err(GeometryError::RankDeficient(_)) => {
            let n = c.len();
            let uniform = g.constant(Tensor::filled(&[n, 1], 1.0 / n as f64));
            Ok((weighted_eight_point_var(g, c, uniform)?, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// Runs `net` on `x` and attaches the essential estimate and residuals.
pub fn run_stage(g: &mut Graph, net: &StageFn, x: Var, c: &CorrespondenceSet) -> Result<StageVars, PipelineError> {
    let (logits, p) = net(g, x)?;
    let (e_hat, fallback) = solve_essential(g, c, p)?;
    let residual = residuals_var(g, c, e_hat);
    Ok(StageVars { logits, p, e_hat, residual, fallback })
}

/// Stage-2 input `[C ‖ R₁ ‖ P₁]`.
fn stage2_input(g: &mut Graph, c: &CorrespondenceSet, residual: Var, p: Var) -> Result<Var, PipelineError> {
    let x = g.constant(c.to_tensor());
    Ok(g.concat_cols(&[x, residual, p])?)
}

pub fn two_stage_graph(
    g: &mut Graph,
    stages: &Stages,
    c: &CorrespondenceSet,
) -> Result<(StageVars, StageVars), PipelineError> {
    let x = g.constant(c.to_tensor());
    let s1 = run_stage(g, stages.first, x, c)?;
    let x2 = stage2_input(g, c, s1.residual, s1.p)?;
    let s2 = run_stage(g, stages.second, x2, c)?;
    Ok((s1, s2))
}

/// Values of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub logits: Vec<f64>,
    pub p: Vec<f64>,
    pub e_hat: EssentialMatrix,
    pub residual: ResidualVector,
    pub fallback: bool,
}

impl StageOutput {
    fn read(g: &Graph, s: &StageVars) -> Self {
        let e: [f64; 9] = g.value(s.e_hat).data().try_into().expect("3 × 3 estimate");
        Self {
            logits: g.value(s.logits).data().to_vec(),
            p: g.value(s.p).data().to_vec(),
            e_hat: EssentialMatrix::from_row_major(&e),
            residual: ResidualVector(g.value(s.residual).data().to_vec()),
            fallback: s.fallback,
        }
    }
}

/// Evaluates both stages of `model` on `c`.
pub fn two_stage_forward(c: &CorrespondenceSet, model: &ModelParams) -> Result<(StageOutput, StageOutput), PipelineError> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let first = backbone_stage(&model.config.stage1, &vars, STAGE1_PREFIX);
    let second = backbone_stage(&model.config.stage2, &vars, STAGE2_PREFIX);
    let (s1, s2) = two_stage_graph(&mut g, &Stages { first: &first, second: &second }, c)?;
    Ok((StageOutput::read(&g, &s1), StageOutput::read(&g, &s2)))
}

fn label_values(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy `softplus(o) − y·o`. With `balance`, positive and
/// negative terms each carry half the total weight.
pub fn loss_cls_var(g: &mut Graph, logits: Var, labels: &[bool], balance: bool) -> Result<Var, PipelineError> {
    let n = g.value(logits).len();
    if labels.len() != n {
        return Err(PipelineError::LengthMismatch(n, labels.len()));
    }
    let y = g.constant(Tensor::matrix(n, 1, label_values(labels)));
    let sp = g.softplus(logits);
    let yo = g.mul(y, logits)?;
    let terms = g.sub(sp, yo)?;
    if !balance {
        return Ok(g.mean(terms));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(PipelineError::DegenerateLabels);
    }
    let (wp, wn) = (0.5 / pos as f64, 0.5 / (n - pos) as f64);
    let w = g.constant(Tensor::matrix(n, 1, labels.iter().map(|&l| if l { wp } else { wn }).collect()));
    let weighted = g.mul(w, terms)?;
    Ok(g.sum(weighted))
}

/// Mean over ground-truth inliers of `(x′ᵀ Ê x)²` divided by the symmetric
/// line denominator of the ground-truth matrix.
pub fn loss_reg_var(
    g: &mut Graph,
    e_hat: Var,
    e_gt: &EssentialMatrix,
    c: &CorrespondenceSet,
    labels: &[bool],
) -> Result<Var, PipelineError> {
    if labels.len() != c.len() {
        return Err(PipelineError::LengthMismatch(c.len(), labels.len()));
    }
    let rows = c.select(labels);
    if rows.is_empty() {
        return Err(PipelineError::NoInliers);
    }
    let n = rows.len() as f64;
    let scale: Vec<f64> = rows.iter().map(|r| 1.0 / (line_denominator(r, e_gt.matrix()) * n)).collect();
    let s = epipolar_products_var(g, &rows, e_hat);
    let sq = g.mul(s, s)?;
    let w = g.constant(Tensor::matrix(rows.len(), 1, scale));
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted))
}

/// `loss_cls + λ·loss_reg` of one stage.
pub fn stage_loss_var(
    g: &mut Graph,
    s: &StageVars,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    cfg: &LossConfig,
) -> Result<Var, PipelineError> {
    let cls = loss_cls_var(g, s.logits, labels, cfg.class_balance)?;
    if cfg.lambda == 0.0 {
        return Ok(cls);
    }
    let reg = loss_reg_var(g, s.e_hat, e_gt, c, labels)?;
    let reg = g.scale(reg, cfg.lambda);
    Ok(g.add(cls, reg)?)
}

/// A loss node together with the stages that produced it.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub loss: Var,
    pub forward: (StageVars, StageVars),
    /// Uniform-weight substitutions made while building the graph.
    pub fallbacks: usize,
}

/// Sum of both stage losses on `(C, L, E)`.
pub fn loss_total_var(
    g: &mut Graph,
    stages: &Stages,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    cfg: &LossConfig,
) -> Result<LossGraph, PipelineError> {
    if labels.len() != c.len() {
        return Err(PipelineError::LengthMismatch(c.len(), labels.len()));
    }
    let (s1, s2) = two_stage_graph(g, stages, c)?;
    let l1 = stage_loss_var(g, &s1, c, labels, e_gt, cfg)?;
    let l2 = stage_loss_var(g, &s2, c, labels, e_gt, cfg)?;
    let loss = g.add(l1, l2)?;
    Ok(LossGraph { loss, forward: (s1, s2), fallbacks: s1.fallback as usize + s2.fallback as usize })
}

/// [`loss_total_var`] on `C` plus the same on `(reverse(C), L, Eᵀ)` with shared
/// stages.
pub fn siamese_loss_a_var(
    g: &mut Graph,
    stages: &Stages,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    cfg: &LossConfig,
) -> Result<LossGraph, PipelineError> {
    let fwd = loss_total_var(g, stages, c, labels, e_gt, cfg)?;
    let rev = loss_total_var(g, stages, &c.reverse(), labels, &e_gt.transpose(), cfg)?;
    let loss = g.add(fwd.loss, rev.loss)?;
    Ok(LossGraph { loss, forward: fwd.forward, fallbacks: fwd.fallbacks + rev.fallbacks })
}

/// Extra stage-2 pass on the reversed set: the residuals of `Ê₁ᵀ` on
/// `C′ = reverse(C)` and the forward `P₁` are appended to `C′`, and the output
/// is scored against `(L, Eᵀ)`.
pub fn reverse_branch_var(
    g: &mut Graph,
    second: &StageFn,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    first: &StageVars,
    cfg: &LossConfig,
) -> Result<(Var, StageVars), PipelineError> {
    let rev = c.reverse();
    let e_t = g.transpose(first.e_hat)?;
    let r = residuals_var(g, &rev, e_t);
    let x = stage2_input(g, &rev, r, first.p)?;
    let s = run_stage(g, second, x, &rev)?;
    let loss = stage_loss_var(g, &s, &rev, labels, &e_gt.transpose(), cfg)?;
    Ok((loss, s))
}

/// [`loss_total_var`] on `C` plus [`reverse_branch_var`].
pub fn siamese_loss_b_var(
    g: &mut Graph,
    stages: &Stages,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    cfg: &LossConfig,
) -> Result<LossGraph, PipelineError> {
    let fwd = loss_total_var(g, stages, c, labels, e_gt, cfg)?;
    let (extra, s) = reverse_branch_var(g, stages.second, c, labels, e_gt, &fwd.forward.0, cfg)?;
    let loss = g.add(fwd.loss, extra)?;
    Ok(LossGraph { loss, forward: fwd.forward, fallbacks: fwd.fallbacks + s.fallback as usize })
}

/// The objective selected by `cfg.siamese`.
pub fn objective_var(
    g: &mut Graph,
    stages: &Stages,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    cfg: &LossConfig,
) -> Result<LossGraph, PipelineError> {
    match cfg.siamese {
        SiameseMode::None => loss_total_var(g, stages, c, labels, e_gt, cfg),
        SiameseMode::A => siamese_loss_a_var(g, stages, c, labels, e_gt, cfg),
        SiameseMode::B => siamese_loss_b_var(g, stages, c, labels, e_gt, cfg),
    }
}

/// Builds the configured objective for `model` on a bound graph.
pub fn model_objective(
    g: &mut Graph,
    model: &ModelConfig,
    vars: &ParamVars,
    c: &CorrespondenceSet,
    labels: &[bool],
    e_gt: &EssentialMatrix,
    cfg: &LossConfig,
) -> Result<LossGraph, PipelineError> {
    let first = backbone_stage(&model.stage1, vars, STAGE1_PREFIX);
    let second = backbone_stage(&model.stage2, vars, STAGE2_PREFIX);
    objective_var(g, &Stages { first: &first, second: &second }, c, labels, e_gt, cfg)
}
