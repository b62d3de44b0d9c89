use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hyperproto::gradcheck::run_suite;
use hyperproto::Trainer;

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::io::{read_json, save_dataset, write_json};
use crate::report::{
    losses_csv, radii_csv, radius_trace_csv, shot_sweep_csv, write_matrix_csv, write_metrics_csv, write_per_class_csv,
};
use crate::run::{evaluate_trainer, export_matrices, load_data, radius_dynamics, shot_sweep, train};
use crate::stats::pearson;

#[derive(Debug, Parser)]
#[command(name = "hyperproto", version, about = "Few-shot learning with region prototypes")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides `train.seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Evaluation threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train and test splits as JSONL.
    GenData,
    /// Train and write checkpoint.json, losses.csv and radii.csv.
    Train,
    /// Evaluate a checkpoint on the test classes and write metrics.csv.
    Eval {
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences.
    GradCheck {
        /// Accepted configurations per case.
        #[arg(long, default_value_t = 100)]
        configs: usize,
    },
    /// Track an anchor class's radius against the spread of its episodes.
    RadiusDynamics,
    /// Write distance, similarity and embedding matrices for sampled test instances.
    ExportMatrices {
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate hypersphere and vanilla prototypes for each shot count.
    ShotSweep,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Cli {
    fn context(&self) -> Result<Ctx> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| HarnessError::Usage("this subcommand needs --config <path>".into()))?;
        let cfg = RunConfig::load(path)?;
        let seed = self.seed.unwrap_or(cfg.train.seed);
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Ctx { cfg, seed, out })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn load_checkpoint(ctx: &Ctx, given: &Option<PathBuf>) -> Result<Trainer> {
    let path = given.clone().unwrap_or_else(|| ctx.out.join("checkpoint.json"));
    read_json(&path)
}

/// Runs one command; returns the lines to print on success.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    if cli.jobs == 0 {
        return Err(HarnessError::Usage("--jobs must be >= 1".into()));
    }
    let mut lines = Vec::new();
    match &cli.command {
        Command::GradCheck { configs } => {
            let reports = run_suite(cli.seed.unwrap_or(0), *configs);
            let mut csv = String::from("case,configs,redrawn,max_rel_err,tolerance,max_abs_err,passed\n");
            for r in &reports {
                lines.push(format!(
                    "{:<32} {} max rel {:.2e} (< {:.0e}) max abs {:.2e} over {} configs",
                    r.name,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.tolerance,
                    r.max_abs_err,
                    r.configs
                ));
                writeln!(
                    csv,
                    "{},{},{},{:e},{:e},{:e},{}",
                    r.name,
                    r.configs,
                    r.redrawn,
                    r.max_rel_err,
                    r.tolerance,
                    r.max_abs_err,
                    r.passed()
                )
                .unwrap();
            }
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(io_err(out))?;
                write(&out.join("grad_check.csv"), &csv)?;
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                for l in &lines {
                    println!("{l}");
                }
                return Err(HarnessError::Usage(format!(
                    "gradient check failed for {failed} case(s)"
                )));
            }
        }
        Command::GenData => {
            let ctx = cli.context()?;
            let data = load_data(&ctx.cfg.data, ctx.seed)?;
            save_dataset(&data.train, &ctx.out.join("train.jsonl"))?;
            save_dataset(&data.test, &ctx.out.join("test.jsonl"))?;
            lines.push(format!(
                "wrote {} train items ({} classes) and {} test items ({} classes) to {}",
                data.train.len(),
                data.train.num_classes(),
                data.test.len(),
                data.test.num_classes(),
                ctx.out.display()
            ));
        }
        Command::Train => {
            let ctx = cli.context()?;
            let data = load_data(&ctx.cfg.data, ctx.seed)?;
            let (trainer, losses) = train(&ctx.cfg.train, &ctx.cfg.encoder, &data.train, ctx.seed)?;
            write_json(&trainer, &ctx.out.join("checkpoint.json"))?;
            write(&ctx.out.join("losses.csv"), &losses_csv(&losses))?;
            write(
                &ctx.out.join("radii.csv"),
                &radii_csv(&trainer.store.scales(), data.train.true_spread()),
            )?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                lines.push(format!("trained {} steps, loss {first:.4} -> {last:.4}", losses.len()));
            }
        }
        Command::Eval { checkpoint } => {
            let ctx = cli.context()?;
            let trainer = load_checkpoint(&ctx, checkpoint)?;
            let data = load_data(&ctx.cfg.data, ctx.seed)?;
            let metrics = evaluate_trainer(&trainer, &data.test, ctx.seed, cli.jobs)?;
            write_metrics_csv(&metrics, &ctx.out.join("metrics.csv"))?;
            write_per_class_csv(&metrics.per_class, &ctx.out.join("per_class.csv"))?;
            lines.push(format!(
                "accuracy {:.4} ± {:.4} over {} episodes",
                metrics.accuracy, metrics.accuracy_ci95, metrics.n_episodes
            ));
        }
        Command::RadiusDynamics => {
            let ctx = cli.context()?;
            let data = load_data(&ctx.cfg.data, ctx.seed)?;
            let trace = radius_dynamics(&ctx.cfg, &data.train, ctx.seed)?;
            write(&ctx.out.join("radius_trace.csv"), &radius_trace_csv(&trace))?;
            let r = pearson(&trace.radii(), &trace.distances());
            lines.push(match r {
                Some(r) => format!("{} points, pearson(radius, mean distance) = {r:.4}", trace.points.len()),
                None => format!("{} points, correlation undefined (constant series)", trace.points.len()),
            });
        }
        Command::ExportMatrices { checkpoint } => {
            let ctx = cli.context()?;
            let trainer = load_checkpoint(&ctx, checkpoint)?;
            let data = load_data(&ctx.cfg.data, ctx.seed)?;
            let m = export_matrices(&trainer, &data.test, &ctx.cfg.exports, ctx.seed)?;
            let spec = &ctx.cfg.exports;
            if spec.distance {
                write_matrix_csv(&m.distance, &ctx.out.join("distance_matrix.csv"))?;
            }
            if spec.similarity {
                write_matrix_csv(&m.similarity, &ctx.out.join("similarity_matrix.csv"))?;
            }
            if spec.embeddings {
                write_matrix_csv(&m.embeddings, &ctx.out.join("embeddings.csv"))?;
            }
            lines.push(format!(
                "exported {} instances to {}",
                m.embeddings.len(),
                ctx.out.display()
            ));
        }
        Command::ShotSweep => {
            let ctx = cli.context()?;
            let data = load_data(&ctx.cfg.data, ctx.seed)?;
            let rows = shot_sweep(&ctx.cfg, &data, ctx.seed, cli.jobs)?;
            write(&ctx.out.join("shot_sweep.csv"), &shot_sweep_csv(&rows))?;
            for r in &rows {
                lines.push(format!(
                    "{:<17} {:>3}-shot accuracy {:.4}",
                    r.variant.to_string(),
                    r.shot,
                    r.metrics.accuracy
                ));
            }
        }
    }
    Ok(lines)
}
