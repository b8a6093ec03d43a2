//! End-to-end acceptance checks. Criteria run in order in a single test so
//! timing measurements are not disturbed by concurrent tests; each prints one
//! PASS/FAIL line on stderr.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twoview::backbone::BackboneConfig;
use twoview::evalcli::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use twoview::evalcli::config::{GridConfig, RunConfig};
use twoview::evalcli::gradsuite::gradient_suite;
use twoview::evalcli::{
    evaluate, run_ablation, siamese_comparison, AblationRow, ABLATION_HEADER, SIAMESE_HEADER,
};
use twoview::geometry::{
    recover_pose, rotation_error, sym_epipolar_distance, translation_error, weighted_eight_point, CorrespondenceSet,
};
use twoview::numgrad::{Graph, Tensor, Var};
use twoview::pipeline::{
    reverse_branch_var, LossConfig, ModelParams, PipelineError, SiameseMode, StageVars, STAGE2_INPUT,
};
use twoview::synthgen::{gen_dataset, label, read_dataset, write_dataset, SampleRecord, SceneConfig};
use twoview::geometry::diff::residuals_var;
use twoview::trainer::{train, TrainConfig, TrainOutputs};

struct Outcome {
    pass: bool,
    detail: String,
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome { pass: false, detail: format!("panicked: {msg}") }
    });
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} [{name}]: {} | {} | {:.1}s",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        start.elapsed().as_secs_f64()
    );
    outcome.pass
}

fn gradient_suite_criterion() -> Outcome {
    let start = Instant::now();
    let reports = gradient_suite(1e-4).expect("gradient suite");
    let secs = start.elapsed().as_secs_f64();
    let all = reports.iter().all(|(_, r)| r.pass);
    let worst = reports.iter().map(|(n, r)| format!("{n}={:.2e}", r.max_rel_error)).collect::<Vec<_>>().join(" ");
    Outcome { pass: all && reports.len() == 6 && secs < 120.0, detail: format!("{worst}; {secs:.1}s < 120s") }
}

fn eight_point_criterion() -> Outcome {
    let start = Instant::now();
    let cfg = SceneConfig { seed: 2024, pairs: 50, n: 100, outlier_ratio: 0.0, noise_sigma: 0.0, ..SceneConfig::default() };
    let data = gen_dataset(&cfg).expect("scenes");
    let (mut e_err, mut r_err, mut t_err) = (0.0f64, 0.0f64, 0.0f64);
    for rec in &data {
        let e = weighted_eight_point(&rec.corr, &vec![1.0; rec.corr.len()]).expect("eight-point");
        e_err = e_err.max(e.sign_invariant_distance(&rec.e));
        let pose = recover_pose(&e, &rec.corr, &vec![true; rec.corr.len()]).expect("pose");
        r_err = r_err.max(rotation_error(&pose, &rec.pose));
        t_err = t_err.max(translation_error(&pose, &rec.pose));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: e_err < 1e-6 && r_err < 0.01 && t_err < 0.01 && secs < 30.0,
        detail: format!("max ‖Ê∓E‖={e_err:.2e}, rot {r_err:.2e}°, trans {t_err:.2e}°, {secs:.2}s"),
    }
}

fn labels_to_stage(g: &mut Graph, labels: &[bool], e: Var, c: &CorrespondenceSet) -> StageVars {
    let n = labels.len();
    let logits = g.constant(Tensor::matrix(n, 1, labels.iter().map(|&l| if l { 40.0 } else { -40.0 }).collect()));
    let p = g.constant(Tensor::matrix(n, 1, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()));
    let residual = residuals_var(g, c, e);
    StageVars { logits, p, e_hat: e, residual, fallback: false }
}

/// Ground-truth stage 2: trusts the probability column it is fed.
fn oracle_stage2(g: &mut Graph, x: Var) -> Result<(Var, Var), PipelineError> {
    let xv = g.value(x);
    let p: Vec<f64> = (0..xv.rows()).map(|i| xv.at(i, STAGE2_INPUT - 1)).collect();
    let o = p.iter().map(|v| 40.0 * (2.0 * v - 1.0)).collect();
    let n = p.len();
    Ok((g.constant(Tensor::matrix(n, 1, o)), g.constant(Tensor::matrix(n, 1, p))))
}

fn reciprocity_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let row: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let e = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let rev = [row[2], row[3], row[0], row[1]];
        if sym_epipolar_distance(&row, &e).to_bits() != sym_epipolar_distance(&rev, &e.transpose()).to_bits() {
            mismatches += 1;
        }
    }

    let scenes = gen_dataset(&SceneConfig { seed: 11, pairs: 20, n: 128, ..SceneConfig::default() }).expect("scenes");
    let cfg = SceneConfig::default();
    let label_flips = scenes
        .iter()
        .filter(|r| label(&r.corr.reverse(), &r.e.transpose(), cfg.threshold) != r.labels)
        .count();

    // Noise-free: σ = 0 and no outlier falls under the label threshold.
    let clean: Vec<SampleRecord> =
        gen_dataset(&SceneConfig { seed: 12, pairs: 40, n: 128, noise_sigma: 0.0, ..SceneConfig::default() })
            .expect("scenes")
            .into_iter()
            .filter(|r| {
                r.corr.rows().iter().zip(&r.labels).all(|(c, &l)| !l || sym_epipolar_distance(c, r.e.matrix()) < 1e-20)
            })
            .take(10)
            .collect();
    let mut worst_extra = 0.0f64;
    for rec in &clean {
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(3, 3, rec.e.to_row_major().to_vec()));
        let s1 = labels_to_stage(&mut g, &rec.labels, e, &rec.corr);
        let (extra, _) =
            reverse_branch_var(&mut g, &oracle_stage2, &rec.corr, &rec.labels, &rec.e, &s1, &LossConfig::default())
                .expect("reverse branch");
        worst_extra = worst_extra.max(g.value(extra).item().expect("scalar"));
    }
    Outcome {
        pass: mismatches == 0 && label_flips == 0 && clean.len() == 10 && worst_extra < 1e-9,
        detail: format!(
            "{mismatches}/1000 distance mismatches, {label_flips}/20 label flips, max design-B extra term {worst_extra:.2e} over {} scenes",
            clean.len()
        ),
    }
}

fn shapes(m: &ModelParams) -> Vec<(String, Vec<usize>)> {
    m.params.iter().map(|(n, t)| (n.to_string(), t.dims().to_vec())).collect()
}

fn zero_parameter_criterion() -> Outcome {
    let data = gen_dataset(&SceneConfig { seed: 13, pairs: 2, n: 64, ..SceneConfig::default() }).expect("scenes");
    let mut seen = Vec::new();
    for siamese in SiameseMode::ALL {
        let run = RunConfig { loss: LossConfig { siamese, ..LossConfig::default() }, ..RunConfig::default() };
        let init = ModelParams::init(run.model_config(), 0).expect("init");
        let cfg = TrainConfig { iterations: 1, batch_size: 1, ..TrainConfig::default() };
        let trained = train(&data, init.clone(), &cfg, &run.loss, &TrainOutputs::default()).expect("train").model;
        assert_eq!(shapes(&init), shapes(&trained));
        seen.push((siamese, trained.scalar_count(), shapes(&trained)));
    }
    let same = seen.windows(2).all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
    let counts = seen.iter().map(|(m, c, s)| format!("{m}:{c} scalars/{} tensors", s.len())).collect::<Vec<_>>().join(", ");
    Outcome { pass: same, detail: counts }
}

fn smoothed(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

fn desk_training_criterion() -> Outcome {
    let train_set = gen_dataset(&SceneConfig { seed: 1, pairs: 2000, ..SceneConfig::default() }).expect("train set");
    let test = gen_dataset(&SceneConfig { seed: 2, pairs: 200, ..SceneConfig::default() }).expect("test set");
    let run = RunConfig::default();
    assert_eq!(run.loss.siamese, SiameseMode::B);
    assert!(run.backbone.lfc_enabled);
    assert_eq!((run.train.iterations, run.train.batch_size), (5000, 16));
    let start = Instant::now();
    let init = ModelParams::init(run.model_config(), run.init_seed).expect("init");
    let report = train(&train_set, init, &run.train, &run.loss, &TrainOutputs::default()).expect("train");
    let eval = evaluate(&report.model, &test);
    let secs = start.elapsed().as_secs_f64();
    let f = eval.matching.fscore;
    let baseline = eval.baseline_fscore();
    let (first, last) = smoothed(&report.step_losses, 200);
    let skipped = report.skipped as f64 / report.draws as f64;
    Outcome {
        pass: f > 0.70 && f > baseline && last < 0.5 * first && secs < 1800.0 && skipped < 0.01,
        detail: format!(
            "F={f:.4} (P={:.4} R={:.4}) vs all-positive {baseline:.4}, mAP5={:.3}, smoothed loss {first:.4}→{last:.4}, skipped {:.2}%, {} fallbacks, {:.0}s",
            eval.matching.precision,
            eval.matching.recall,
            eval.pose.map5,
            100.0 * skipped,
            report.fallbacks,
            secs
        ),
    }
}

/// Reduced ablation setting shared by the trend check.
fn ablation_grid() -> GridConfig {
    GridConfig {
        run: RunConfig {
            train: TrainConfig { iterations: 800, batch_size: 8, ..TrainConfig::default() },
            backbone: BackboneConfig { d: 32, blocks: 4, ..BackboneConfig::default() },
            ..RunConfig::default()
        },
        lfc: vec![false, true],
        siamese: vec![SiameseMode::None, SiameseMode::B],
        k: vec![9],
        seeds: vec![0, 1, 2],
        holdout: Some(200),
    }
}

fn mean_f(rows: &[AblationRow], lfc: bool, siamese: SiameseMode) -> f64 {
    let sel: Vec<f64> = rows.iter().filter(|r| r.lfc == lfc && r.siamese == siamese).map(|r| r.eval.matching.fscore).collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

fn ablation_trend_criterion() -> Outcome {
    let data = gen_dataset(&SceneConfig { seed: 3, pairs: 1000, ..SceneConfig::default() }).expect("data");
    let rows = run_ablation(&data, &ablation_grid()).expect("ablation");
    let base = mean_f(&rows, false, SiameseMode::None);
    let lfc = mean_f(&rows, true, SiameseMode::None);
    let siam = mean_f(&rows, false, SiameseMode::B);
    let both = mean_f(&rows, true, SiameseMode::B);
    Outcome {
        pass: both >= lfc.max(siam) - 0.01 && lfc >= base - 0.01 && both >= base + 0.01,
        detail: format!("mean F over 3 seeds: baseline {base:.4}, LFC {lfc:.4}, Siamese-B {siam:.4}, LFC+Siamese-B {both:.4}"),
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twoview"))
}

fn run_cli(args: &[&str]) {
    let out = cli().args(args).output().expect("spawn CLI");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn k_sweep_criterion() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("sweep.bin");
    run_cli(&["gen", "--seed", "5", "--pairs", "40", "--n", "128", "--out", p(&data)]);
    let grid = dir.path().join("grid.cfg");
    std::fs::write(&grid, "lfc=on\nsiamese=b\nk=3,6,9,12\nseeds=0\nholdout=8\niterations=10\nbatch_size=4\nd=16\nblocks=2\n")
        .expect("grid file");
    let (ra, rb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run_cli(&["ablate", "--data", p(&data), "--grid", p(&grid), "--report", p(&ra)]);
    run_cli(&["ablate", "--data", p(&data), "--grid", p(&grid), "--report", p(&rb)]);
    let (a, b) = (std::fs::read_to_string(&ra).expect("report"), std::fs::read_to_string(&rb).expect("report"));
    let lines: Vec<&str> = a.lines().collect();
    let fields = ABLATION_HEADER.split(',').count();
    let ks: Vec<&str> = lines.iter().skip(1).map(|l| l.split(',').nth(2).unwrap_or("")).collect();
    let well_formed = lines.first() == Some(&ABLATION_HEADER)
        && lines.len() == 5
        && lines.iter().all(|l| l.split(',').count() == fields)
        && ks == ["3", "6", "9", "12"];
    Outcome { pass: a == b && well_formed, detail: format!("identical reports: {}, rows for k={ks:?}", a == b) }
}

fn formats_criterion() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = |n: &str| dir.path().join(n);
    let gen = |out: &Path| run_cli(&["gen", "--seed", "8", "--pairs", "12", "--n", "64", "--outlier-ratio", "0.5", "--noise", "0.001", "--out", p(out)]);
    gen(&d("a.bin"));
    gen(&d("b.bin"));
    let same_data = std::fs::read(d("a.bin")).expect("a") == std::fs::read(d("b.bin")).expect("b");

    std::fs::write(d("run.cfg"), "iterations=15\nbatch_size=3\nd=8\nblocks=2\nheads=2\nseed=4\n").expect("cfg");
    let train_cli = |out: &Path| {
        run_cli(&["train", "--data", p(&d("a.bin")), "--config", p(&d("run.cfg")), "--siamese", "b", "--lfc", "on", "--k", "3", "--out", p(out)])
    };
    train_cli(&d("a.ckpt"));
    train_cli(&d("b.ckpt"));
    let same_ckpt = std::fs::read(d("a.ckpt")).expect("a") == std::fs::read(d("b.ckpt")).expect("b");

    let records: Vec<SampleRecord> = read_dataset(d("a.bin")).expect("dataset");
    write_dataset(d("c.bin"), &records).expect("write");
    let data_round_trip = read_dataset(d("c.bin")).expect("read") == records
        && std::fs::read(d("c.bin")).expect("c") == std::fs::read(d("a.bin")).expect("a");
    let ckpt: Checkpoint = read_checkpoint(&d("a.ckpt")).expect("checkpoint");
    write_checkpoint(&d("c.ckpt"), &ckpt).expect("write");
    let ckpt_round_trip = read_checkpoint(&d("c.ckpt")).expect("read") == ckpt
        && std::fs::read(d("c.ckpt")).expect("c") == std::fs::read(d("a.ckpt")).expect("a");

    let eval_report = d("eval.csv");
    run_cli(&["eval", "--data", p(&d("a.bin")), "--ckpt", p(&d("a.ckpt")), "--report", p(&eval_report)]);
    let eval_ok = std::fs::read_to_string(&eval_report).expect("eval report").lines().count() == 2;

    let all = gen_dataset(&SceneConfig { seed: 9, pairs: 60, n: 128, ..SceneConfig::default() }).expect("data");
    let run = RunConfig {
        train: TrainConfig { iterations: 40, batch_size: 4, ..TrainConfig::default() },
        backbone: BackboneConfig { d: 16, blocks: 2, ..BackboneConfig::default() },
        ..RunConfig::default()
    };
    let table = siamese_comparison(&all[..48], &all[48..], &run).expect("comparison");
    let _ = writeln!(std::io::stderr(), "{table}");
    let rows: Vec<&str> = table.lines().collect();
    let table_ok = rows.len() == 3 && rows[0] == SIAMESE_HEADER && rows[1].starts_with("(a),") && rows[2].starts_with("(b),");

    Outcome {
        pass: same_data && same_ckpt && data_round_trip && ckpt_round_trip && eval_ok && table_ok,
        detail: format!(
            "gen identical {same_data}, train identical {same_ckpt}, dataset round trip {data_round_trip}, checkpoint round trip {ckpt_round_trip}, eval report {eval_ok}, design table {table_ok}"
        ),
    }
}

#[test]
fn acceptance() {
    let results = [
        run_criterion(1, "gradient suite", gradient_suite_criterion),
        run_criterion(2, "eight-point exactness", eight_point_criterion),
        run_criterion(3, "reciprocity identities", reciprocity_criterion),
        run_criterion(4, "zero-parameter Siamese", zero_parameter_criterion),
        run_criterion(5, "desk-scale training", desk_training_criterion),
        run_criterion(6, "ablation trend", ablation_trend_criterion),
        run_criterion(7, "k-sweep harness", k_sweep_criterion),
        run_criterion(8, "determinism and formats", formats_criterion),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &ok)| !ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
