use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sleepyco::config::{load_config, parse_config, RunConfig};
use sleepyco::eval::render_report;
use sleepyco::model::Model;
use sleepyco::pipeline::{self, fold_seed, select, splits};
use sleepyco::tensor::gradcheck::run_suite;

#[derive(Parser)]
#[command(name = "sleepyco", version, about = "Single-channel EEG sleep staging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key by dotted path, e.g. `train.phi=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FoldArg {
    /// Which cross-validation fold's subject split to use.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to the output directory.
    Synth(Common),
    /// Contrastive pretraining of the backbone.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArg,
        /// Start from the weights of an earlier pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sequence training of the classifier over a pretrained backbone.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArg,
        /// Pretraining checkpoint holding the backbone.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Start the classifier from an earlier sequence checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a sequence checkpoint on one split of a fold.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fold: FoldArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Full k-fold protocol with a pooled report.
    Crossval {
        #[command(flatten)]
        common: Common,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
}

fn setup(common: &Common) -> anyhow::Result<Run> {
    let cfg = match &common.config {
        Some(p) => load_config(p, &common.set)?,
        None => parse_config("{}", &common.set)?,
    };
    let out = common.out.clone().or_else(|| cfg.out.clone()).context("no output directory: pass --out or set `out`")?;
    let inputs = common.config.iter().cloned().collect();
    Ok(Run { cfg, out, inputs })
}

fn ensure_exists(p: &Path) -> anyhow::Result<()> {
    if !p.is_file() {
        bail!("checkpoint {} does not exist", p.display());
    }
    Ok(())
}

fn with_data(run: &mut Run) -> anyhow::Result<Vec<sleepyco::signal::Subject>> {
    let root = run.cfg.data_root()?;
    run.inputs.extend(pipeline::dataset_files(&root)?);
    Ok(pipeline::load_subjects(&run.cfg)?)
}

fn fold_subjects(
    cfg: &RunConfig,
    subjects: &[sleepyco::signal::Subject],
    fold: usize,
) -> anyhow::Result<(sleepyco::signal::FoldSplit, u64)> {
    let all = splits(cfg, subjects)?;
    let split = all.into_iter().nth(fold).with_context(|| format!("fold {fold} out of range (k = {})", cfg.crossval.k))?;
    Ok((split, fold_seed(cfg.seed, fold)))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let run = setup(&common)?;
            pipeline::write_provenance(&run.cfg, &run.out, "synth", &run.inputs)?;
            let ids = pipeline::write_synth_dataset(&run.cfg, &run.out)?;
            eprintln!("wrote {} subjects to {}", ids.len(), run.out.display());
        }
        Command::Pretrain { common, fold, resume } => {
            let mut run = setup(&common)?;
            let subjects = with_data(&mut run)?;
            let (split, seed) = fold_subjects(&run.cfg, &subjects, fold.fold)?;
            let mut model = Model::new(run.cfg.model.clone(), seed)?;
            if let Some(p) = &resume {
                ensure_exists(p)?;
                pipeline::load_backbone(&mut model, p)?;
                run.inputs.push(p.clone());
            }
            pipeline::write_provenance(&run.cfg, &run.out, "pretrain", &run.inputs)?;
            let train = select(&subjects, &split.train)?;
            let val = select(&subjects, &split.validation)?;
            let o = pipeline::pretrain(&run.cfg, &mut model, &train, &val, seed, &run.out)?;
            eprintln!("best validation loss {:.5} at iteration {}", o.best_val_loss, o.best_iteration);
        }
        Command::Finetune {
            common,
            fold,
            checkpoint,
            resume,
        } => {
            let mut run = setup(&common)?;
            ensure_exists(&checkpoint)?;
            let subjects = with_data(&mut run)?;
            let (split, seed) = fold_subjects(&run.cfg, &subjects, fold.fold)?;
            let mut model = Model::new(run.cfg.model.clone(), seed)?;
            pipeline::load_backbone(&mut model, &checkpoint)?;
            run.inputs.push(checkpoint.clone());
            if let Some(p) = &resume {
                ensure_exists(p)?;
                pipeline::load_sequence_model(&mut model, p)?;
                run.inputs.push(p.clone());
            }
            pipeline::write_provenance(&run.cfg, &run.out, "finetune", &run.inputs)?;
            let train = select(&subjects, &split.train)?;
            let val = select(&subjects, &split.validation)?;
            let o = pipeline::finetune(&run.cfg, &mut model, &train, &val, seed, &run.out)?;
            eprintln!(
                "best validation loss {:.5} (accuracy {:.4}) at iteration {}",
                o.best_val_loss, o.best_val_accuracy, o.best_iteration
            );
        }
        Command::Evaluate {
            common,
            fold,
            checkpoint,
            split,
        } => {
            let mut run = setup(&common)?;
            ensure_exists(&checkpoint)?;
            let subjects = with_data(&mut run)?;
            let (fs, seed) = fold_subjects(&run.cfg, &subjects, fold.fold)?;
            let mut model = Model::new(run.cfg.model.clone(), seed)?;
            pipeline::load_sequence_model(&mut model, &checkpoint)?;
            run.inputs.push(checkpoint.clone());
            pipeline::write_provenance(&run.cfg, &run.out, "evaluate", &run.inputs)?;
            let (ids, name) = match split {
                Split::Train => (&fs.train, "train"),
                Split::Validation => (&fs.validation, "validation"),
                Split::Test => (&fs.test, "test"),
            };
            let chosen = select(&subjects, ids)?;
            let result = pipeline::score(&run.cfg, &model, &chosen, name)?;
            let r = render_report(&[result], &run.out)?;
            println!("acc {:.4} mf1 {:.4} kappa {:.4}", r.acc, r.mf1, r.kappa);
        }
        Command::Crossval { common, jobs } => {
            let mut run = setup(&common)?;
            let subjects = with_data(&mut run)?;
            pipeline::write_provenance(&run.cfg, &run.out, "crossval", &run.inputs)?;
            let r = pipeline::crossval(&run.cfg, &subjects, &run.out, jobs)?;
            println!("acc {:.4} mf1 {:.4} kappa {:.4}", r.acc, r.mf1, r.kappa);
        }
        Command::Gradcheck {
            common,
            instances,
            tolerance,
        } => {
            let run = setup(&common)?;
            pipeline::write_provenance(&run.cfg, &run.out, "gradcheck", &run.inputs)?;
            let reports = run_suite(run.cfg.seed, instances, 1e-5, tolerance)?;
            let path = run.out.join("gradcheck.json");
            std::fs::write(&path, serde_json::to_string_pretty(&reports)?).with_context(|| path.display().to_string())?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            for r in &reports {
                println!("{:<20} {:.3e} {}", r.op, r.max_relative_error, if r.passed { "ok" } else { "FAIL" });
            }
            if !failed.is_empty() {
                bail!("gradient check failed for: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
