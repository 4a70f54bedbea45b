//! `starglow train` — cascaded training with per-phase checkpoints, loss
//! logs, and a run manifest tying outputs back to code and data.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use starglow_core::checkpoint;
use starglow_core::config::RunConfig;
use starglow_core::denoiser::Denoiser;
use starglow_core::rng::sub_rng;

use crate::common::{self, Provenance};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset manifest file, or a dataset directory containing one.
    #[arg(long)]
    pub data: PathBuf,

    /// Output directory [default: <out root>/train].
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Scale preset for schedule, network, and cascade.
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"], conflicts_with = "config")]
    pub preset: String,

    /// Corruption preset applied to conditioning images while training.
    #[arg(long, default_value = "paper", conflicts_with = "config")]
    pub corruption: String,

    /// Master seed; every subsystem derives its stream from (seed, label).
    #[arg(long, default_value_t = 0, conflicts_with = "config")]
    pub seed: u64,

    /// Full run-config JSON file; replaces the preset/corruption/seed flags.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Continue from the latest phase checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,

    /// Train only the first K phases of the cascade (staged runs).
    #[arg(long)]
    pub max_phases: Option<usize>,
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'static str,
    config: &'a RunConfig,
    data_manifest: String,
    data_manifest_sha256: String,
    resume_from_phase: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

/// Build the run configuration from either a config file or the flag set.
pub fn resolve_config(args: &Args) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text)?
        }
        None => {
            let corruption = common::parse_corruption(&args.corruption)?;
            match args.preset.as_str() {
                "desk" => RunConfig::desk(corruption, args.seed),
                "paper" => RunConfig::paper(corruption, args.seed),
                other => bail!("unknown preset {other:?}"),
            }
        }
    };
    common::apply_max_phases(&mut config, args.max_phases)?;
    config.validate()?;
    Ok(config)
}

pub fn run(args: Args) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| common::default_out("train"));
    let config = resolve_config(&args)?;

    let manifest_path = common::resolve_manifest_path(&args.data);
    let manifest = common::load_manifest(&args.data)?;

    // Warm-start state: either a fresh network or the latest checkpoint.
    let (mut net, phases_done) = if args.resume {
        resume_state(&out, &config)?
    } else {
        (Denoiser::init(&config.denoiser, &mut sub_rng(config.train.seed, "net-init"))?, 0)
    };
    if phases_done >= config.train.phases.len() {
        println!(
            "nothing to do: all {} configured phases already complete",
            config.train.phases.len()
        );
        return Ok(());
    }

    common::write_resolved(
        &out,
        "run-config.json",
        &Resolved {
            command: "train",
            config: &config,
            data_manifest: manifest_path.display().to_string(),
            data_manifest_sha256: common::sha256_hex(&manifest_path)?,
            resume_from_phase: phases_done,
            provenance: common::provenance(),
        },
    )?;

    let schedule = config.schedule.build()?;
    let pairs = manifest.load_pairs()?;
    println!(
        "training on {} pairs, {} phases (starting at phase {}), {} parameters",
        pairs.len(),
        config.train.phases.len(),
        phases_done + 1,
        net.param_count()
    );
    let start = Instant::now();
    let records =
        common::run_cascade_with_artifacts(&out, &mut net, &pairs, &config, &schedule, phases_done)?;
    println!(
        "training complete: {} steps in {:.1}s; final loss {:.6}",
        records.len(),
        start.elapsed().as_secs_f64(),
        records.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Load the newest phase checkpoint and verify it matches the resolved
/// configuration so a resumed run cannot silently change architecture.
fn resume_state(out: &Path, config: &RunConfig) -> Result<(Denoiser<f32>, usize)> {
    let Some((phase, path)) = common::latest_checkpoint(out)? else {
        bail!("--resume found no phase-*.ckpt in {}", out.display());
    };
    let (net, meta) = checkpoint::load(&path)?;
    if meta.phases_completed != phase {
        bail!(
            "checkpoint {} records {} completed phases but is named phase-{phase}",
            path.display(),
            meta.phases_completed
        );
    }
    if meta.denoiser != config.denoiser {
        bail!("checkpoint {} was trained with a different network configuration", path.display());
    }
    if meta.schedule != config.schedule {
        bail!("checkpoint {} was trained with a different noise schedule", path.display());
    }
    println!("resuming after phase {phase} from {}", path.display());
    Ok((net, phase))
}
