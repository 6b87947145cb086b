//! `ddpc`: encode, decode and evaluate dynamic point cloud sequences.

mod commands;
mod config;
mod failure;
mod manifest;
mod rdcsv;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::{Failure, EXIT_FAILURE};

#[derive(Parser, Debug)]
#[command(name = "ddpc", version, about = "Learned dynamic point cloud geometry codec")]
struct Cli {
    /// key=value file supplying alpha, lambda, plan, gop, precision, seed,
    /// transmit_c3, latent_carry or workers; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Options every coding command shares.
#[derive(Args, Debug, Clone)]
pub struct CodecArgs {
    /// Weight file (DPCW); falls back to $DDPC_WEIGHTS.
    #[arg(long, env = "DDPC_WEIGHTS")]
    pub weights: Option<PathBuf>,
    /// Rate-point tag: 3, 4, 5, 7 or 10.
    #[arg(long)]
    pub lambda: Option<u8>,
    /// Interpolation weight cap (default 3).
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a sequence: frame 0 intra, then predicted frames.
    Encode(commands::EncodeArgs),
    /// Decode a manifest or a list of .ddpc frames into PLY files.
    Decode(commands::DecodeArgs),
    /// Append bpp, D1 and D2 rows for a decoded sequence to a CSV.
    Eval(commands::EvalArgs),
    /// BD-rate of a test RD curve against an anchor, with an optional SVG plot.
    Rdcsv(commands::RdcsvArgs),
    /// Run the built-in fixture checks.
    Selftest(commands::SelftestArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Write seeded surrogate weights with zero-peaked entropy tables.
    GenWeights(commands::GenWeightsArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => config::FileConfig::load(p)?,
        None => config::FileConfig::default(),
    };
    if let Some(n) = cli.workers.or(cfg.workers) {
        if n == 0 {
            return Err(Failure::input("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot start workers: {e}")))?;
    }
    match cli.command {
        Command::Encode(a) => commands::encode(&a, &cfg),
        Command::Decode(a) => commands::decode(&a, &cfg),
        Command::Eval(a) => commands::eval(&a),
        Command::Rdcsv(a) => commands::rdcsv(&a),
        Command::Selftest(a) => commands::selftest(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::GenWeights(a) => commands::gen_weights(&a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors must not collide with the missing-weights code
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
