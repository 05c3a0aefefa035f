//! `hbmx`: train, run, and measure the codec from the shell.
//!
//! Exit codes: 0 success, 1 usage or any other failure, 2 I/O or file
//! format, 3 model/stream mismatch, 4 corrupted bitstream.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hbmx_core::Error;

#[derive(Parser)]
#[command(name = "hbmx", version, about = "Learned dynamic point cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic PLY sequence
    Synth {
        /// Motion pattern: rigid-translate, rigid-rotate,
        /// two-blob-articulate or breathing-sphere
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Surface samples per frame, before duplicate removal
        #[arg(long, default_value_t = 2000)]
        points: usize,
        #[arg(long, default_value_t = 10)]
        bit_depth: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write ASCII PLY instead of binary
        #[arg(long)]
        ascii: bool,
        /// Output directory for frame-NNNN.ply
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML recipe
    Train {
        /// Recipe with [model], [train], [data] and [out] sections
        #[arg(long)]
        config: PathBuf,
    },
    /// Encode a directory of PLY frames into one bitstream
    Encode {
        /// Directory of .ply frames, coded in file-name order
        #[arg(long)]
        input: PathBuf,
        /// Weight file produced by train
        #[arg(long)]
        model: PathBuf,
        /// Intra period: 0 codes only frame 0 intra, 1 codes every frame
        /// intra
        #[arg(long, default_value_t = 0)]
        gop: usize,
        /// Output bitstream path
        #[arg(long)]
        out: PathBuf,
        /// Rate-weight label for the first CSV column
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Also write the per-frame table to this file
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Decode a bitstream into PLY frames
    Decode {
        /// Bitstream path
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output directory for frame-NNNN.ply
        #[arg(long)]
        out: PathBuf,
        /// Write ASCII PLY instead of binary
        #[arg(long)]
        ascii: bool,
        /// Re-encode the decoded frames and check the closed loop
        #[arg(long)]
        verify: bool,
    },
    /// BD-rate between two rate-distortion CSV files
    Eval {
        /// Baseline CSV, as printed by encode
        #[arg(long)]
        anchor: PathBuf,
        /// Candidate CSV
        #[arg(long)]
        test: PathBuf,
    },
    /// Range coder round-trip throughput check
    Bench {
        #[arg(long, default_value_t = 100)]
        tables: usize,
        /// Symbols per table
        #[arg(long, default_value_t = 1_000_000)]
        symbols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a decoded motion field as a colored point cloud
    Flowviz {
        /// Bitstream path
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Inter frame index
        #[arg(long)]
        frame: usize,
        /// Which stage's field: low or high
        #[arg(long, default_value = "low")]
        stage: String,
        /// Output PLY path
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> hbmx_core::Result<()> {
    match cli.cmd {
        Cmd::Synth {
            kind,
            frames,
            points,
            bit_depth,
            seed,
            ascii,
            out,
        } => commands::synth(&kind, frames, points, bit_depth, seed, ascii, &out),
        Cmd::Train { config } => commands::train(&config),
        Cmd::Encode {
            input,
            model,
            gop,
            out,
            lambda,
            csv,
        } => commands::encode(&input, &model, gop, &out, lambda, csv.as_deref()),
        Cmd::Decode {
            input,
            model,
            out,
            ascii,
            verify,
        } => commands::decode(&input, &model, &out, ascii, verify),
        Cmd::Eval { anchor, test } => commands::eval(&anchor, &test),
        Cmd::Bench {
            tables,
            symbols,
            seed,
        } => commands::bench(tables, symbols, seed),
        Cmd::Flowviz {
            input,
            model,
            frame,
            stage,
            out,
        } => commands::flowviz(&input, &model, frame, &stage, &out),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 2,
        Error::ModelMismatch(_) => 3,
        Error::Checksum(_) | Error::Bitstream(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not failures.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
