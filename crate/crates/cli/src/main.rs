use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evifuse::net::Fusion;
use evifuse_cli::{cmd_eval, cmd_phantom, cmd_report, cmd_train, CliError, RunConfig, Subset};

#[derive(Parser)]
#[command(name = "evifuse", version, about = "Evidential multi-phase segmentation with opinion fusion")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-phase dataset.
    Phantom {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, loss.csv and train.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes metrics.csv and metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// noise:<var> | blur:<var>,<k> | missing:<count> | none (repeatable)
        #[arg(long)]
        perturb: Vec<String>,
        /// mems | average
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot metric CSVs against perturbation magnitude.
    Report {
        /// Metrics CSVs written by `eval`.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Comma-separated metric columns to plot.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Phantom { count, size, out } => {
            if let Some(c) = count {
                cfg.phantom.count = c;
            }
            if let Some(s) = size {
                cfg.phantom.size = s;
            }
            let cfg = cfg.resolve()?;
            let manifest = cmd_phantom(&cfg, &out)?;
            println!("wrote {} samples to {}", manifest.count, out.display());
        }
        Command::Train {
            data,
            epochs,
            subset,
            out,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let cfg = cfg.resolve()?;
            let outcome = cmd_train(&cfg, &data, subset, &out)?;
            if let Some(last) = outcome.curve.last() {
                println!("epoch {} loss {:.4}", last.epoch, last.total);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            perturb,
            fusion,
            subset,
            out,
        } => {
            if !perturb.is_empty() {
                cfg.eval.perturb = perturb;
            }
            if let Some(f) = fusion {
                cfg.eval.fusion = f.parse::<Fusion>()?;
            }
            let cfg = cfg.resolve()?;
            for e in cmd_eval(&cfg, &checkpoint, &data, subset, &out)? {
                let r = &e.report;
                println!(
                    "{} {} {}: dgs {:.4} dcs {:.4} ece {:.4} ueo {:.4} u {:.4}",
                    r.fusion, r.perturb_kind, r.perturb_param, r.dgs, r.dcs, r.ece, r.ueo, r.mean_u_fused
                );
            }
        }
        Command::Report { csvs, metrics, out } => {
            let outcome = cmd_report(&csvs, &metrics, &out)?;
            print!("{}", outcome.summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evifuse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
