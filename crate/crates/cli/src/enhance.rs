//! `starglow enhance` — sample enhanced images from a trained checkpoint.
//!
//! Inputs of any size are accepted: images are reflect-padded up to the
//! network's size multiple, enhanced, and cropped back, so output dimensions
//! always equal input dimensions.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use starglow_core::checkpoint;
use starglow_core::corrupt::CorruptionSpec;
use starglow_core::dataio::{load_png, save_png};
use starglow_core::denoiser::DenoiserConfig;
use starglow_core::rng::sub_rng;
use starglow_core::schedule::ScheduleConfig;

use crate::common::{self, Provenance};

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint file, or a training output directory (latest phase wins).
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Input PNG file, or a directory whose PNGs are all processed.
    #[arg(long)]
    pub input: PathBuf,

    /// Output directory [default: <out root>/enhanced].
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Sampling seed; each image derives its stream from (seed, file name),
    /// so per-image results do not depend on processing order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Re-corrupt the condition with this preset before every reverse step
    /// (mirrors training-time conditioning; off by default).
    #[arg(long)]
    pub step_corruption: Option<String>,
}

#[derive(Serialize)]
struct Resolved {
    command: &'static str,
    checkpoint: String,
    input: String,
    seed: u64,
    step_corruption: Option<String>,
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    phases_completed: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

pub fn run(args: Args) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| common::default_out("enhanced"));
    let ckpt_path = common::resolve_checkpoint(&args.checkpoint)?;
    let (net, meta) = checkpoint::load(&ckpt_path)?;
    let schedule = meta.schedule.build()?;
    let step_corruption = args
        .step_corruption
        .as_deref()
        .map(CorruptionSpec::preset)
        .transpose()
        .context("--step-corruption")?;

    let files: Vec<PathBuf> = if args.input.is_dir() {
        common::png_files_in(&args.input)?
    } else if args.input.is_file() {
        if !args.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            bail!("input {} is not a PNG file", args.input.display());
        }
        vec![args.input.clone()]
    } else {
        bail!("input {} does not exist", args.input.display());
    };

    common::write_resolved(
        &out,
        "enhance-config.json",
        &Resolved {
            command: "enhance",
            checkpoint: ckpt_path.display().to_string(),
            input: args.input.display().to_string(),
            seed: args.seed,
            step_corruption: args.step_corruption.clone(),
            denoiser: meta.denoiser.clone(),
            schedule: meta.schedule,
            phases_completed: meta.phases_completed,
            provenance: common::provenance(),
        },
    )?;

    for file in &files {
        let name = file
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .with_context(|| format!("unreadable file name {}", file.display()))?;
        let image = load_png(file)?;
        let mut rng = sub_rng(args.seed, &format!("enhance/{name}"));
        let enhanced =
            common::enhance_one(&net, &schedule, &image, step_corruption.as_ref(), &mut rng)
                .with_context(|| format!("enhancing {}", file.display()))?;
        let dest = out.join(&name);
        save_png(&dest, &enhanced)?;
        println!("enhanced {} -> {}", file.display(), dest.display());
    }
    Ok(())
}
