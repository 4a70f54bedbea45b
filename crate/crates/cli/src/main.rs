//! `starglow` — command-line workflows for star-field image enhancement
//! with a conditional denoising-diffusion model.
//!
//! Subcommands: `gen-data` (synthetic paired dataset), `train` (cascaded
//! training), `enhance` (sampling), `eval` (metrics and the corruption
//! ablation). Every command writes its fully resolved configuration into the
//! output directory before doing work, and `(resolved config, seed)` fully
//! determines every output byte.

use clap::{Parser, Subcommand};

mod common;
mod enhance;
mod eval;
mod gen_data;
mod train;

#[derive(Parser)]
#[command(
    name = "starglow",
    version,
    about = "Star-field image enhancement with a conditional diffusion model",
    after_help = "Output directories default to subdirectories of the output root, \
                  which is `./starglow-out` unless the STARGLOW_OUT_ROOT environment \
                  variable overrides it."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired star-field dataset with a manifest.
    GenData(gen_data::Args),
    /// Train the diffusion denoiser with the cascaded patch curriculum.
    Train(train::Args),
    /// Enhance PNG images using a trained checkpoint.
    Enhance(enhance::Args),
    /// Compute PSNR/SSIM reports, or run the corruption-ablation study.
    Eval(eval::Args),
}

/// Collapse a (possibly multi-line) error rendering into the single-line
/// `error: ...` contract every command follows.
fn error_line(message: &str) -> String {
    let flat = message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ");
    flat.strip_prefix("error: ").unwrap_or(&flat).to_string()
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            // Keep only the diagnosis line; clap's usage block is multi-line.
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            eprintln!("error: {}", error_line(&first));
            std::process::exit(2);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train::run(args),
        Command::Enhance(args) => enhance::run(args),
        Command::Eval(args) => eval::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", error_line(&format!("{e:#}")));
        std::process::exit(1);
    }
}
