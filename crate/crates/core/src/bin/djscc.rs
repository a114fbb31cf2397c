use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepjscc_wz::experiments::{
    cmd_eval, cmd_inspect_checkpoint, cmd_synth_data, cmd_train, compare, exit_code, CompareInput,
    ExperimentConfig, CHECKPOINT_FILE,
};
use deepjscc_wz::Result;

/// Train and evaluate SNR-adaptive image codecs with decoder side information.
#[derive(Parser)]
#[command(name = "djscc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant; writes checkpoint, log and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Sweep the evaluation SNR grid and write psnr/msssim/lpips CSVs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the run directory's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<run_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot evaluation CSVs and tabulate per-SNR deltas against a baseline.
    Compare {
        /// Label of the reference curve.
        #[arg(long)]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
        /// LABEL=CSV pairs.
        #[arg(required = true)]
        inputs: Vec<CompareInput>,
    },
    /// Export the synthetic dataset of a config as PNGs and a manifest.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's header as JSON.
    InspectCheckpoint { path: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, force } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let out = cmd_train(&cfg, force)?;
            println!("{}", out.run_dir.display());
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.run_dir().join(CHECKPOINT_FILE));
            let res = cmd_eval(&ckpt, &cfg, out.as_deref())?;
            for p in res.csvs {
                println!("{}", p.display());
            }
        }
        Command::Compare { baseline, out, inputs } => {
            let res = compare(&inputs, &baseline, &out)?;
            print!("{}", res.summary_csv);
        }
        Command::SynthData { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            println!("{}", cmd_synth_data(&cfg, &out)?.display());
        }
        Command::InspectCheckpoint { path } => print!("{}", cmd_inspect_checkpoint(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
