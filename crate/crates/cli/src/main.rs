use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stc_core::harness::{
    analyze_redundancy, bench, render_report, run_pipeline, OutputFormat, RunConfig,
};
use stc_core::stream::{generate_stream, write_tensor_file, StreamConfig};
use stc_core::{Encoder, StcError};

#[derive(Parser)]
#[command(name = "stc", version, about = "Streaming token compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a stream and report FLOP, latency and fidelity metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip the full-forward fidelity oracle.
        #[arg(long)]
        no_fidelity: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<OutputFormat>,
    },
    /// Write a synthetic stream in STC1 format.
    Gen {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        sigma: f64,
        /// Plant an event every P frames; 0 disables events.
        #[arg(long)]
        event_period: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = StreamConfig::default().event_tokens)]
        event_tokens: usize,
        #[arg(long, default_value_t = StreamConfig::default().background)]
        background: f64,
    },
    /// Per-layer adjacent-frame cosine similarity of encoder outputs.
    Redundancy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median latency of the full and compressed encoder paths.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn finish_json(result: serde_json::Result<String>) -> stc_core::Result<String> {
    let mut s = result.map_err(|e| StcError::State(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_output(path: Option<&Path>, text: &str) -> stc_core::Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn execute(command: Command) -> stc_core::Result<()> {
    match command {
        Command::Run {
            config,
            no_fidelity,
            out,
            format,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if no_fidelity {
                cfg.fidelity = false;
            }
            if let Some(f) = format {
                cfg.format = f;
            }
            if out.is_some() {
                cfg.output = out;
            }
            let report = run_pipeline(&cfg)?;
            write_output(cfg.output.as_deref(), &render_report(&report, cfg.format)?)
        }
        Command::Gen {
            frames,
            tokens,
            dim,
            rho,
            sigma,
            event_period,
            seed,
            out,
            event_tokens,
            background,
        } => {
            let stream = generate_stream(&StreamConfig {
                num_frames: frames,
                token_count: tokens,
                dim,
                redundancy: rho,
                drift: sigma,
                event_period,
                event_tokens,
                background,
                seed,
            })?;
            write_tensor_file(&out, &stream.frames)
        }
        Command::Redundancy {
            config,
            stride,
            out,
        } => {
            let cfg = RunConfig::from_file(&config)?;
            let encoder = Encoder::new(cfg.encoder.clone())?;
            let profile = analyze_redundancy(&cfg.load_frames()?, &encoder, stride)?;
            fs::write(out, finish_json(serde_json::to_string_pretty(&profile))?)?;
            Ok(())
        }
        Command::Bench { config, repeats } => {
            let cfg = RunConfig::from_file(&config)?;
            write_output(
                None,
                &finish_json(serde_json::to_string_pretty(&bench(&cfg, repeats)?))?,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
