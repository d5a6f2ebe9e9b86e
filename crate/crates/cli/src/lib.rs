//! Command-line front end for the anti-purification laboratory.

pub mod commands;
pub mod config;
pub mod imageio;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(
    name = "antipure",
    version,
    about = "Anti-purification perturbations against toy diffusion purifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; a `run.conf` snapshot is written there.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural image set (the split chosen by `data.split`).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a denoiser from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of training images.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Perturb images with PGD against a denoiser.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Purify images with GrIDPure or DiffPure.
    Purify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Continue training a denoiser on an image set.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Draw samples by running the full reverse chain.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
    },
    /// Per-block activation MSE between paired image sets.
    ProbeBlocks {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// First set of the pairs (usually clean images).
        #[arg(long, value_name = "DIR")]
        a: PathBuf,
        /// Second set of the pairs (usually perturbed images).
        #[arg(long, value_name = "DIR")]
        b: PathBuf,
    },
    /// Patch DCT energy spectra and HF ratios.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Perturb, purify, fine-tune, sample and score every arm.
    RunPc {
        #[command(flatten)]
        common: Common,
        /// Purifier checkpoint; trained from scratch when omitted.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Image metrics, optionally against a reference set and a model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Attack { common, .. }
            | Command::Purify { common, .. }
            | Command::Finetune { common, .. }
            | Command::Sample { common, .. }
            | Command::ProbeBlocks { common, .. }
            | Command::Spectra { common, .. }
            | Command::RunPc { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.command.common())?;
    let out: &Path = &cli.command.common().out;
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, out),
        Command::Train { data, .. } => commands::train_cmd(&cfg, data, out),
        Command::Attack { model, input, .. } => commands::attack(&cfg, model, input, out),
        Command::Purify { model, input, .. } => commands::purify(&cfg, model, input, out),
        Command::Finetune { model, data, .. } => commands::finetune(&cfg, model, data, out),
        Command::Sample { model, .. } => commands::sample_cmd(&cfg, model, out),
        Command::ProbeBlocks { model, a, b, .. } => commands::probe_blocks(&cfg, model, a, b, out),
        Command::Spectra { input, .. } => commands::spectra(&cfg, input, out),
        Command::RunPc { model, .. } => commands::run_pc_cmd(&cfg, model.as_deref(), out),
        Command::Eval {
            input,
            reference,
            model,
            ..
        } => commands::eval(&cfg, input, reference.as_deref(), model.as_deref(), out),
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 for usage and configuration errors, 1 otherwise.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            if e.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) {
                2
            } else {
                1
            }
        }
    }
}
