use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use noisebench::experiment::{cmd_hpo, cmd_landscape, cmd_ood, cmd_rank, cmd_train, ExperimentConfig, OutputOptions};
use noisebench::{Error, Result};

#[derive(Parser)]
#[command(
    name = "noisebench",
    version,
    about = "Noise-injection training and evaluation for tabular MLPs"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the seed list (train), study seed (hpo) or corruption seed (ood).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over its seeds.
    Train(Common),
    /// Run a hyperparameter study.
    Hpo {
        #[command(flatten)]
        common: Common,
        /// Continue the study recorded in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Calibrate and write corrupted test sets.
    Ood(Common),
    /// Rank methods against a baseline from training reports.
    Rank {
        /// Glob(s) matching `reports.json` files.
        #[arg(long = "results", required = true)]
        results: Vec<String>,
        #[arg(long, default_value = "no_noise")]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Loss landscapes around a trained run.
    Landscape {
        /// Artifact directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Which seed's trajectory to use (first configured seed by default).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, OutputOptions)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set `output`".into()))?;
    Ok((
        cfg,
        OutputOptions {
            out,
            force: common.force,
        },
    ))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure {n} workers: {e}")))?;
    }
    match cli.command {
        Command::Train(common) => {
            let (mut cfg, opts) = load(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let art = cmd_train(&cfg, &opts)?;
            println!("wrote {} files to {}", art.manifest.files.len(), art.dir.display());
        }
        Command::Hpo { common, resume } => {
            let (mut cfg, opts) = load(&common)?;
            if let Some(s) = common.seed {
                cfg.hpo.seed = s;
            }
            let (art, study) = cmd_hpo(&cfg, &opts, resume)?;
            println!(
                "{} trials, {} epochs, best trial {:?}; results in {}",
                study.trials.len(),
                study.total_epochs(),
                study.best,
                art.dir.display()
            );
        }
        Command::Ood(common) => {
            let (mut cfg, opts) = load(&common)?;
            if let Some(s) = common.seed {
                cfg.ood.seed = s;
            }
            let art = cmd_ood(&cfg, &opts)?;
            println!("wrote {} files to {}", art.manifest.files.len(), art.dir.display());
        }
        Command::Rank {
            results,
            baseline,
            out,
            force,
        } => {
            let r = cmd_rank(&results, &baseline, &OutputOptions { out, force })?;
            for a in &r.table.averages {
                println!(
                    "{:<32} {:<28} rank {:>6.3} delta {:>+6.3}",
                    a.metric, a.method, a.mean_rank, a.mean_delta
                );
            }
        }
        Command::Landscape { run, seed, out, force } => {
            let art = cmd_landscape(&run, seed, &OutputOptions { out, force })?;
            println!("wrote {} files to {}", art.manifest.files.len(), art.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
