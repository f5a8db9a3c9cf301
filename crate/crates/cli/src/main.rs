use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shiftlab::pipeline;
use shiftlab::store::{DirLock, RunLayout};
use shiftlab::{CliError, CliResult, ExperimentConfig};
use shiftlab_core::ssl::Objective;

/// Output root used when neither --out nor the config names one.
const DEFAULT_OUT: &str = "shiftlab-out";

#[derive(Debug, Parser)]
#[command(name = "shiftlab", version, about = "Self-supervised stability experiments on a synthetic causal model")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each seed gets its own `seed-<N>` directory inside.
    #[arg(long, global = true, env = "SHIFTLAB_OUT")]
    out: Option<PathBuf>,
    /// Overrides the SSL objective (simclr, moco, byol, simsiam, barlow).
    #[arg(long, global = true)]
    objective: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the dataset splits and write them with the SCM and generator.
    Generate,
    /// Train an encoder, checkpointing every epoch.
    Train {
        /// Continue from this encoder checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit the linear probe on frozen train representations.
    Probe,
    /// Stability sweeps, remedies and the identifiability fit.
    Evaluate,
    /// Linear identifiability fit only.
    Identify,
    /// Aggregate per-seed stability reports into report.csv.
    Report,
    /// Check that an encoder checkpoint round-trips byte-identically.
    Verify { checkpoint: PathBuf },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn effective_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.objective {
        cfg.ssl.objective = name.parse::<Objective>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Verify { checkpoint } = &cli.command {
        pipeline::verify_checkpoint(checkpoint)?;
        println!("{}: round trip identical", checkpoint.display());
        return Ok(());
    }
    let cfg = effective_config(cli)?;
    let out = out_root(cli, &cfg);
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    if let Command::Report = cli.command {
        let _lock = DirLock::acquire(&out)?;
        let (path, rows) = pipeline::report(&out)?;
        println!("{} rows -> {}", rows.len(), path.display());
        return Ok(());
    }
    let layout = RunLayout::new(&out, cfg.seed);
    let _lock = DirLock::acquire(&layout.root)?;
    let objective = cfg.objective();
    match &cli.command {
        Command::Generate => {
            let files = pipeline::generate(&cfg, &layout)?;
            println!("wrote {} files to {}", files.len(), layout.data_dir().display());
        }
        Command::Train { resume } => {
            let s = pipeline::train(&cfg, &layout, resume.as_deref(), None)?;
            let loss = s.final_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}"));
            println!("{objective}: {} epochs, final loss {loss} -> {}", s.epochs_done, s.checkpoint.display());
        }
        Command::Probe => {
            pipeline::probe(&cfg, &layout)?;
            println!("{objective}: probe -> {}", layout.probe(objective).display());
        }
        Command::Evaluate => {
            let s = pipeline::evaluate(&cfg, &layout)?;
            println!(
                "{objective}: seen accuracy {:.4}, hold-out accuracy {:.4}, {} report rows -> {}",
                s.seen_accuracy,
                s.holdout_accuracy,
                s.rows.len(),
                layout.stability(objective).display()
            );
        }
        Command::Identify => {
            let r = pipeline::identify(&cfg, &layout)?;
            println!(
                "{objective}: mean R2 {:.4}, gram deviation {:.4}, scale {:.4}",
                r.mean_r2, r.gram_deviation, r.scale
            );
            if let Some(ns) = r.nullspace {
                println!("nullspace ratio {:.4} (aug {:.4}, hold-out {:.4})", ns.ratio, ns.r_aug, ns.r_hold);
            }
        }
        Command::Report | Command::Verify { .. } | Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_failure(&e),
    }
}

fn report_failure(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
