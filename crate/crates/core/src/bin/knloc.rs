// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch front end: `knloc [--config run.toml] [--set key=value].. <command>`.
//!
//! Exit code 0 when no fact failed, 1 when some did, 2 on a fatal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use knloc::editing::{EditMode, Selection};
use knloc::model::{generate_toy_checkpoint, ModelConfig};
use knloc::pipeline::{self, InterveneTarget, RunConfig, RunContext, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "knloc", version, about = "Knowledge-neuron localization and editing experiments")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable: `--set steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory relative output directories resolve against.
    #[arg(long, env = OUTPUT_ROOT_ENV, global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Erase,
    Update,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    #[value(name = "n_i")]
    NI,
    #[value(name = "n_u")]
    NU,
    Cas,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Neurons,
    Synapses,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Attribution maps and knowledge-neuron sets for every query.
    Localize,
    /// Consistency tables, per-fact listings and the threshold sweep.
    Consistency,
    /// Per-fact (or sequential) edits with evaluation and restore.
    Edit {
        #[arg(long, value_enum, default_value = "erase")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "n_i")]
        selection: SelectionArg,
        #[arg(long)]
        sequential: bool,
    },
    /// Neuron-set and knowledge-synapse interventions.
    Intervene {
        #[arg(long, value_enum, default_value = "both")]
        target: TargetArg,
    },
    /// Fraction of facts at or below each consistency threshold.
    Sweep {
        #[arg(long, default_value_t = 0.04)]
        lo: f64,
        #[arg(long, default_value_t = 0.80)]
        hi: f64,
        #[arg(long, default_value_t = 0.02)]
        step: f64,
    },
    /// Markdown summary of the tables written so far.
    Report,
    /// Writes a seeded toy checkpoint bundle.
    ToyCheckpoint {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("override {s:?} is not KEY=VALUE"))
        })
        .collect()
}

fn run(cli: Cli) -> Result<i32, Box<dyn std::error::Error>> {
    if let Command::ToyCheckpoint { out, seed } = &cli.command {
        generate_toy_checkpoint(&ModelConfig::toy(), *seed, out)?;
        println!("{}", out.display());
        return Ok(0);
    }
    let overrides = parse_overrides(&cli.overrides)?;
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cfg.resolved_output_dir(cli.output_root.as_deref());
    let mut ctx = RunContext::open(cfg, out)?;
    let summary = match cli.command {
        Command::Localize => pipeline::cmd_localize(&ctx)?,
        Command::Consistency => pipeline::cmd_consistency(&ctx)?,
        Command::Edit {
            mode,
            selection,
            sequential,
        } => {
            let mode = match mode {
                ModeArg::Erase => EditMode::Erase,
                ModeArg::Update => EditMode::Update,
            };
            let selection = match selection {
                SelectionArg::NI => Selection::NI,
                SelectionArg::NU => Selection::NU,
                SelectionArg::Cas => Selection::Cas,
            };
            pipeline::cmd_edit(&mut ctx, mode, selection, sequential)?
        }
        Command::Intervene { target } => {
            let t = match target {
                TargetArg::Neurons => InterveneTarget::Neurons,
                TargetArg::Synapses => InterveneTarget::Synapses,
                TargetArg::Both => InterveneTarget::Both,
            };
            pipeline::cmd_intervene(&ctx, t)?
        }
        Command::Sweep { lo, hi, step } => pipeline::cmd_sweep(&ctx, lo, hi, step)?,
        Command::Report => pipeline::cmd_report(&ctx)?,
        Command::ToyCheckpoint { .. } => unreachable!("handled above"),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(summary.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("knloc: {e}");
            ExitCode::from(2)
        }
    }
}
