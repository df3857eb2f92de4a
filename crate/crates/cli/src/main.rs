use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use minmaxgap::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, threads_from_env, RunOptions};
use minmaxgap_core::data::Split;

#[derive(Parser)]
#[command(
    name = "minmaxgap",
    version,
    about = "Fairness-regularized training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSONL manifest from a synthetic spec and print its counts.
    GenData {
        /// Synthetic spec (JSON).
        #[arg(long, alias = "spec")]
        config: PathBuf,
        /// Manifest to write.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Variant to generate; defaults to the spec's `variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train each variant of an experiment and write checkpoints, histories and reports.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest (JSONL).
        #[arg(long)]
        dataset: PathBuf,
        /// train, valid or test.
        #[arg(long)]
        split: Split,
        /// Directory for `<split>-report.{md,csv}`; tables go to stdout regardless.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the lambda / penalty-power sweep and write the consolidated table.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this variant.
    #[arg(long)]
    variant: Option<String>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            seed: self.seed,
            variant: self.variant.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            variant,
        } => {
            let summary = cmd_gen_data(&config, &out, seed, variant.as_deref())?;
            print!("{summary}");
        }
        Command::Train(args) => {
            for path in cmd_train(&args.config, &args.options())? {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let (md, _) = cmd_eval(&checkpoint, &dataset, split, out.as_deref())?;
            print!("{md}");
        }
        Command::Ablate(args) => {
            let md = cmd_ablate(&args.config, &args.options(), threads_from_env()?)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
