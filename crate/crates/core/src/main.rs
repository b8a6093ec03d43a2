use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use twoview::evalcli::checkpoint::read_checkpoint;
use twoview::evalcli::config::{parse_switch, GridConfig, RunConfig};
use twoview::evalcli::gradsuite::gradient_suite;
use twoview::evalcli::{ablation_table, eval_table, evaluate, run_ablation, EvalError};
use twoview::pipeline::{ModelParams, SiameseMode};
use twoview::synthgen::{gen_dataset, read_dataset, write_dataset, SceneConfig};
use twoview::trainer::{train, TrainOutputs};

#[derive(Parser)]
#[command(name = "twoview", about = "Two-view correspondence classification and relative pose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        outlier_ratio: f64,
        #[arg(long, default_value_t = 1e-3)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key=value` run settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        siamese: Option<SiameseMode>,
        #[arg(long, value_parser = parse_on_off)]
        lfc: Option<bool>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Append-only `step,loss,seconds` log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    parse_switch(s).ok_or_else(|| format!("expected on or off, got {s:?}"))
}

fn run(cli: Cli) -> Result<bool, EvalError> {
    match cli.command {
        Command::Gen { seed, pairs, n, outlier_ratio, noise, out } => {
            let cfg = SceneConfig { seed, pairs, n, outlier_ratio, noise_sigma: noise, ..SceneConfig::default() };
            let records = gen_dataset(&cfg)?;
            write_dataset(&out, &records)?;
            println!("wrote {} pairs to {}", records.len(), out.display());
        }
        Command::Train { data, config, siamese, lfc, k, out, log } => {
            let mut run = match config {
                Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = siamese {
                run.loss.siamese = s;
            }
            if let Some(l) = lfc {
                run.backbone.lfc_enabled = l;
            }
            if let Some(k) = k {
                run.backbone.lfc_k = k;
            }
            let dataset = read_dataset(&data)?;
            let init = ModelParams::init(run.model_config(), run.init_seed)?;
            let outputs = TrainOutputs { checkpoint: Some(out.clone()), checkpoint_every: run.checkpoint_every, log };
            let report = train(&dataset, init, &run.train, &run.loss, &outputs)?;
            for row in &report.log {
                println!("{},{:.6},{:.1}", row.step, row.loss, row.seconds);
            }
            println!(
                "trained {} steps, {} draws, {} skipped, {} fallbacks, {} rejected steps; checkpoint {}",
                report.step_losses.len(),
                report.draws,
                report.skipped,
                report.fallbacks,
                report.rejected_steps,
                out.display()
            );
        }
        Command::Eval { data, ckpt, report } => {
            let dataset = read_dataset(&data)?;
            let ckpt = read_checkpoint(&ckpt)?;
            let table = eval_table(&evaluate(&ckpt.model, &dataset));
            std::fs::write(&report, &table)?;
            print!("{table}");
        }
        Command::Gradcheck { tol } => {
            let mut ok = true;
            for (name, r) in gradient_suite(tol)? {
                println!("{} {name}: max relative error {:.3e}", if r.pass { "PASS" } else { "FAIL" }, r.max_rel_error);
                ok &= r.pass;
            }
            return Ok(ok);
        }
        Command::Ablate { data, grid, report } => {
            let dataset = read_dataset(&data)?;
            let grid = GridConfig::parse(&std::fs::read_to_string(grid)?)?;
            let table = ablation_table(&run_ablation(&dataset, &grid)?);
            std::fs::write(&report, &table)?;
            print!("{table}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
