//! `odformer`: train, infer, eval, gradcheck, synth.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odformer_core::Error;

#[derive(Parser)]
#[command(name = "odformer", version, about = "Optic nerve head segmentation with ODFormer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest and keep the checkpoint with the best validation IoU.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Config file, or a preset name (`desk`, `paper`).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment one P6 image into a P5 mask (255 = optic nerve head).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Metric table destination; `.csv` selects CSV, anything else markdown.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient suite over every op and the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = odformer_core::gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = odformer_core::gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic corpus with an 80/20 train/val manifest.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A check ran to completion and reported failure.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Format { .. } | Error::Manifest { .. }) => 3,
        Some(Error::Diverged { .. }) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            manifest,
            config,
            out,
            steps,
            lr,
            seed,
        } => commands::train(&manifest, &config, &out, steps, lr, seed),
        Command::Infer { ckpt, image, out } => commands::infer(&ckpt, &image, &out),
        Command::Eval {
            ckpt,
            manifest,
            split,
            report,
        } => commands::eval(&ckpt, &manifest, &split, &report),
        Command::Gradcheck { tol, eps, seed } => commands::gradcheck(tol, eps, seed),
        Command::Synth { count, size, out, seed } => commands::synth(count, size, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
