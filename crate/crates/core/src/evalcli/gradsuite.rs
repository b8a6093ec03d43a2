//! Finite-difference checks of every differentiable component on a small
//! instance: `N = 16`, `d = 8`, `k = 3`, two heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::lfc::{lfc_block, LfcVars};
use crate::numgrad::{finite_diff_check, GradReport, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::pipeline::{
    backbone_stage, loss_cls_var, loss_reg_var, model_objective, two_stage_graph, LossConfig, ModelConfig,
    ModelParams, PipelineError, SiameseMode, Stages, STAGE1_PREFIX, STAGE2_PREFIX,
};
use crate::synthgen::{gen_scene, SampleRecord, SceneConfig};

use super::EvalError;

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_N: usize = 16;

pub fn suite_model_config() -> ModelConfig {
    ModelConfig::new(&BackboneConfig { in_channels: 4, d: 8, blocks: 2, lfc_enabled: true, lfc_k: 3, lfc_heads: 2 })
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// A 16-correspondence scene and parameters for which no eight-point solve
/// falls back to uniform weights under any objective, so every loss is smooth
/// around the evaluation point.
pub fn suite_instance() -> Result<(SampleRecord, ModelParams), EvalError> {
    for seed in 0..100 {
        let scene = SceneConfig { seed: 100 + seed, pairs: 1, n: SUITE_N, ..SceneConfig::default() };
        let rec = gen_scene(&scene, 0)?;
        let model = ModelParams::init(suite_model_config(), seed)?;
        let clean = SiameseMode::ALL.into_iter().all(|siamese| {
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let cfg = LossConfig { siamese, ..LossConfig::default() };
            model_objective(&mut g, &model.config, &vars, &rec.corr, &rec.labels, &rec.e, &cfg)
                .is_ok_and(|lg| lg.fallbacks == 0)
        });
        if clean {
            return Ok((rec, model));
        }
    }
    Err(EvalError::InvalidInput("no smooth gradient-check instance found".into()))
}

fn check<F>(f: F, params: &ParamSet, tol: f64) -> Result<GradReport, EvalError>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var, PipelineError>,
{
    Ok(finite_diff_check(f, params, SUITE_STEP, tol)?)
}

fn lfc_report(tol: f64) -> Result<GradReport, EvalError> {
    let (d, k, heads) = (8, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut p = ParamSet::new();
    for h in 0..heads {
        p.insert(format!("w{h}"), random_tensor(&mut rng, 2 * d, d / heads));
    }
    p.insert("wout", random_tensor(&mut rng, d, d));
    p.insert("wprime", random_tensor(&mut rng, k, d));
    p.insert("f", random_tensor(&mut rng, SUITE_N, d));
    let r = random_tensor(&mut rng, SUITE_N, d);
    check(
        |g, v| {
            let vars = LfcVars { heads: (0..heads).map(|h| v.var(&format!("w{h}"))).collect(), wout: v.var("wout"), wprime: v.var("wprime") };
            let out = lfc_block(g, v.var("f"), &vars, k).map_err(crate::backbone::BackboneError::from)?;
            let rv = g.constant(r.clone());
            let m = g.mul(out, rv)?;
            Ok(g.sum(m))
        },
        &p,
        tol,
    )
}

/// Named reports for the LFC block, both loss terms, and the three objectives.
pub fn gradient_suite(tol: f64) -> Result<Vec<(String, GradReport)>, EvalError> {
    let mut out = vec![("lfc_block".to_string(), lfc_report(tol)?)];
    let (rec, model) = suite_instance()?;
    let cfg = LossConfig::default();
    let cfgm = &model.config;
    out.push((
        "loss_cls".into(),
        check(
            |g, v| {
                let first = backbone_stage(&cfgm.stage1, v, STAGE1_PREFIX);
                let second = backbone_stage(&cfgm.stage2, v, STAGE2_PREFIX);
                let (_, s2) = two_stage_graph(g, &Stages { first: &first, second: &second }, &rec.corr)?;
                loss_cls_var(g, s2.logits, &rec.labels, cfg.class_balance)
            },
            &model.params,
            tol,
        )?,
    ));
    out.push((
        "loss_reg".into(),
        check(
            |g, v| {
                let first = backbone_stage(&cfgm.stage1, v, STAGE1_PREFIX);
                let second = backbone_stage(&cfgm.stage2, v, STAGE2_PREFIX);
                let (_, s2) = two_stage_graph(g, &Stages { first: &first, second: &second }, &rec.corr)?;
                loss_reg_var(g, s2.e_hat, &rec.e, &rec.corr, &rec.labels)
            },
            &model.params,
            tol,
        )?,
    ));
    for (name, siamese) in [("loss_total", SiameseMode::None), ("siamese_loss_a", SiameseMode::A), ("siamese_loss_b", SiameseMode::B)] {
        let cfg = LossConfig { siamese, ..cfg };
        out.push((
            name.into(),
            check(|g, v| Ok(model_objective(g, cfgm, v, &rec.corr, &rec.labels, &rec.e, &cfg)?.loss), &model.params, tol)?,
        ));
    }
    Ok(out)
}
