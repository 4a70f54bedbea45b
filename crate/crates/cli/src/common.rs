//! Helpers shared by the subcommands: output-root resolution, resolved-config
//! serialization, checkpoint discovery, and the pad/sample/crop enhancement
//! wrapper.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use starglow_core::checkpoint::{self, CheckpointMeta};
use starglow_core::config::RunConfig;
use starglow_core::corrupt::CorruptionSpec;
use starglow_core::dataio::{
    self, crop, from_model_range, next_multiple, pad_reflect, to_model_range, DatasetManifest,
    ImagePair,
};
use starglow_core::denoiser::{Denoiser, SIZE_MULTIPLE};
use starglow_core::diffusion;
use starglow_core::trainer::{loss_history_csv, train_cascade, LossRecord};
use starglow_core::{ImageTensor, NoiseSchedule};

/// Environment variable holding the default output root. It influences
/// nothing but where outputs land when `--out` is omitted.
pub const OUT_ROOT_ENV: &str = "STARGLOW_OUT_ROOT";

/// Content hash of the source tree, embedded at build time.
pub const CODE_HASH: &str = env!("STARGLOW_CODE_HASH");

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default output directory for a command: `<out root>/<sub>`.
pub fn default_out(sub: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("starglow-out"));
    root.join(sub)
}

/// Provenance fields every resolved-config file carries.
#[derive(Serialize)]
pub struct Provenance {
    pub tool_version: &'static str,
    pub code_hash: &'static str,
}

pub fn provenance() -> Provenance {
    Provenance { tool_version: TOOL_VERSION, code_hash: CODE_HASH }
}

/// Serialize `value` to `dir/name` (creating `dir`), returning the path.
/// Commands call this before any real work so results are always traceable.
pub fn write_resolved<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let mut text =
        serde_json::to_string_pretty(value).context("serializing resolved configuration")?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Accept either a manifest file or a dataset directory containing one.
pub fn resolve_manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(DatasetManifest::FILE_NAME)
    } else {
        data.to_path_buf()
    }
}

pub fn load_manifest(data: &Path) -> Result<DatasetManifest> {
    let path = resolve_manifest_path(data);
    Ok(DatasetManifest::load(&path)?)
}

pub fn checkpoint_path(dir: &Path, phase: usize) -> PathBuf {
    dir.join(format!("phase-{phase}.ckpt"))
}

/// Find the `phase-K.ckpt` with the highest `K` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(k) = name
            .strip_prefix("phase-")
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|num| num.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| k > *b) {
            best = Some((k, path));
        }
    }
    Ok(best)
}

/// Resolve a `--checkpoint` argument: a file is used as-is; a directory
/// means "its latest phase checkpoint".
pub fn resolve_checkpoint(arg: &Path) -> Result<PathBuf> {
    if arg.is_file() {
        return Ok(arg.to_path_buf());
    }
    if arg.is_dir() {
        return match latest_checkpoint(arg)? {
            Some((_, path)) => Ok(path),
            None => bail!("no phase-*.ckpt checkpoints in {}", arg.display()),
        };
    }
    bail!("checkpoint {} does not exist", arg.display())
}

pub fn parse_corruption(name: &str) -> Result<CorruptionSpec> {
    Ok(CorruptionSpec::preset(name)?)
}

/// Truncate the cascade to the first `max_phases` phases, validating bounds.
pub fn apply_max_phases(config: &mut RunConfig, max_phases: Option<usize>) -> Result<()> {
    let Some(k) = max_phases else {
        return Ok(());
    };
    let total = config.train.phases.len();
    if k == 0 {
        bail!("--max-phases must be at least 1");
    }
    if k > total {
        bail!("--max-phases {k} exceeds the configured {total} phases");
    }
    config.train.phases.truncate(k);
    Ok(())
}

/// Enhance one unit-range image: reflect-pad to the size multiple the
/// network requires, sample, and crop back to the original size. With a
/// corruption spec, the condition is freshly re-corrupted before every
/// reverse step instead of being used as-is.
pub fn enhance_one(
    net: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    image: &ImageTensor,
    step_corruption: Option<&CorruptionSpec>,
    rng: &mut starglow_core::rng::Rng,
) -> Result<ImageTensor> {
    let (h, w, _) = image.shape();
    let padded =
        pad_reflect(image, next_multiple(h, SIZE_MULTIPLE), next_multiple(w, SIZE_MULTIPLE))?;
    let model_out = match step_corruption {
        Some(spec) => diffusion::enhance_each_step_corrupted(&padded, spec, net, schedule, rng)?,
        None => diffusion::enhance(&to_model_range(&padded)?, net, schedule, rng)?,
    };
    let unit = from_model_range(&model_out)?;
    Ok(crop(&unit, 0, 0, h, w))
}

/// Run the cascade from `phases_done`, writing `phase-K.ckpt` and
/// `loss-phase-K.csv` into `out` at every phase boundary and printing a
/// one-line progress summary per phase.
pub fn run_cascade_with_artifacts(
    out: &Path,
    net: &mut Denoiser<f32>,
    pairs: &[ImagePair],
    config: &RunConfig,
    schedule: &NoiseSchedule,
    phases_done: usize,
) -> Result<Vec<LossRecord>> {
    let mut written = 0usize;
    let records =
        train_cascade(net, pairs, &config.train, schedule, phases_done, |phase, net, records| {
            let meta = CheckpointMeta {
                denoiser: config.denoiser.clone(),
                schedule: config.schedule,
                phases_completed: phase,
            };
            let ckpt = checkpoint_path(out, phase);
            checkpoint::save(&ckpt, net, &meta)?;
            let phase_records = &records[written..];
            written = records.len();
            let csv_path = out.join(format!("loss-phase-{phase}.csv"));
            fs::write(&csv_path, loss_history_csv(phase_records))
                .map_err(|e| starglow_core::Error::Io { path: csv_path.clone(), source: e })?;
            let mean_loss = phase_records.iter().map(|r| r.loss).sum::<f64>()
                / phase_records.len().max(1) as f64;
            println!(
                "phase {phase} complete: {} steps, mean loss {mean_loss:.6}, checkpoint {}",
                phase_records.len(),
                ckpt.display()
            );
            Ok(())
        })?;
    Ok(records)
}

/// List the PNG files in a directory (sorted), warning about everything
/// else. Errors when the directory contains no PNG at all.
pub fn png_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            continue;
        }
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        } else {
            eprintln!("warning: skipping non-PNG {}", path.display());
        }
    }
    if files.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    Ok(files)
}

/// Load a unit-range image pair by paths, with pair context on errors.
pub fn load_eval_pair(id: &str, a: &Path, b: &Path) -> Result<(ImageTensor, ImageTensor)> {
    let left = dataio::load_png(a).with_context(|| format!("pair {id}"))?;
    let right = dataio::load_png(b).with_context(|| format!("pair {id}"))?;
    Ok((left, right))
}
