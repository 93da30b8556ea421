use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msdamil::train::Mode;
use msdamil::tensor::ALL_KINDS;
use msdamil::{Error, OpKind, Result};
use msdamil_cli::commands;
use msdamil_cli::config::{RawConfig, RunConfig};

#[derive(Parser)]
#[command(name = "msdamil", version, about = "Multi-scale domain-adversarial MIL for slide classification")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `corpus_dir`.
    Synth,
    /// Train one stage and write checkpoints and loss history.
    Train {
        #[arg(long, default_value_t = 1)]
        stage: u8,
        /// Restrict stage 1 to one scale.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Score the test split and write predictions and metrics.
    Eval {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw attention heatmaps of one slide.
    Heatmap {
        #[arg(long)]
        slide: String,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Perturb the backward pass of one operation.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn parse_fault(name: &str) -> Result<OpKind> {
    OpKind::parse(name).ok_or_else(|| {
        let known: Vec<&str> = ALL_KINDS.iter().map(|k| k.name()).collect();
        Error::Config(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for o in &cli.overrides {
        raw.set(o)?;
    }
    RunConfig::from_raw(&raw)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Gradcheck { inject_fault } = &cli.command {
        let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
        println!("{}", commands::gradcheck(fault)?);
        return Ok(());
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => println!("{}", commands::synth(&cfg)?),
        Command::Train { stage, scale, mode } => {
            cfg.mode = mode.unwrap_or(cfg.mode);
            for line in commands::train(&cfg, stage, scale)? {
                println!("{line}");
            }
        }
        Command::Eval { mode, scale, checkpoint } => {
            let mode = mode.unwrap_or(cfg.mode);
            print!("{}", commands::eval(&cfg, mode, scale, checkpoint.as_deref())?);
        }
        Command::Heatmap { slide, mode, scale } => {
            let mode = mode.unwrap_or(cfg.mode);
            let files = commands::heatmap(&cfg, &slide, mode, scale)?;
            println!("wrote {} files for slide {slide}", files.len());
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
