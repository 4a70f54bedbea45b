//! `starglow eval` — PSNR/SSIM reports for enhanced/reference image sets,
//! plus the four-arm corruption-ablation driver.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use starglow_core::config::RunConfig;
use starglow_core::dataio::save_png;
use starglow_core::denoiser::Denoiser;
use starglow_core::metrics::{psnr, ssim, MetricReport, PairMetrics};
use starglow_core::rng::sub_rng;

use crate::common::{self, Provenance};

/// The corruption arms of the ablation study, in report order.
const ABLATION_ARMS: [&str; 4] = ["none", "paper-noise", "paper-blur", "paper-cutout"];

#[derive(clap::Args)]
pub struct Args {
    /// Directory of enhanced PNGs, paired with --reference by file name.
    #[arg(long, requires = "reference")]
    pub enhanced: Option<PathBuf>,

    /// Directory of reference PNGs.
    #[arg(long)]
    pub reference: Option<PathBuf>,

    /// Dataset manifest: evaluate each entry's input against its reference
    /// (baseline numbers for untreated inputs).
    #[arg(long, conflicts_with = "enhanced")]
    pub manifest: Option<PathBuf>,

    /// Output directory [default: <out root>/eval].
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Train and evaluate the four corruption arms (none/noise/blur/cutout)
    /// instead of scoring existing images.
    #[arg(long, conflicts_with_all = ["enhanced", "manifest"])]
    pub ablation: bool,

    /// Training manifest for the ablation arms.
    #[arg(long, requires = "ablation")]
    pub data: Option<PathBuf>,

    /// Held-out manifest the ablation evaluates after each arm trains.
    #[arg(long, requires = "ablation")]
    pub eval_data: Option<PathBuf>,

    /// Master seed shared by all ablation arms (identical initialization and
    /// sampling noise; only the corruption differs between arms).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Cascade phases each ablation arm trains.
    #[arg(long, default_value_t = 2)]
    pub max_phases: usize,

    /// Run-config JSON overriding the desk preset for the ablation arms.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| common::default_out("eval"));
    if args.ablation {
        return run_ablation(&args, &out);
    }
    match (&args.enhanced, &args.reference, &args.manifest) {
        (Some(enh), Some(reference), None) => run_directory_eval(&out, enh, reference),
        (None, None, Some(manifest)) => run_manifest_eval(&out, manifest),
        _ => bail!(
            "expected either --enhanced with --reference, or --manifest, or --ablation"
        ),
    }
}

#[derive(Serialize)]
struct ResolvedEval {
    command: &'static str,
    enhanced: Option<String>,
    reference: Option<String>,
    manifest: Option<String>,
    #[serde(flatten)]
    provenance: Provenance,
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    let csv = out.join("metrics.csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{}", report.table());
    println!("report written to {}", csv.display());
    Ok(())
}

/// Score enhanced images against same-named references.
fn run_directory_eval(out: &Path, enhanced: &Path, reference: &Path) -> Result<()> {
    common::write_resolved(
        out,
        "eval-config.json",
        &ResolvedEval {
            command: "eval",
            enhanced: Some(enhanced.display().to_string()),
            reference: Some(reference.display().to_string()),
            manifest: None,
            provenance: common::provenance(),
        },
    )?;
    let mut rows = Vec::new();
    for file in common::png_files_in(enhanced)? {
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let ref_path = reference.join(&name);
        if !ref_path.is_file() {
            bail!("no reference image for {name} in {}", reference.display());
        }
        let (a, b) = common::load_eval_pair(&name, &file, &ref_path)?;
        rows.push(PairMetrics {
            id: name.trim_end_matches(".png").to_string(),
            psnr_db: psnr(&a, &b).with_context(|| format!("pair {name}"))?,
            ssim: ssim(&a, &b).with_context(|| format!("pair {name}"))?,
        });
    }
    write_report(out, &MetricReport::from_pairs(rows))
}

/// Score each manifest entry's input against its reference.
fn run_manifest_eval(out: &Path, manifest_arg: &Path) -> Result<()> {
    common::write_resolved(
        out,
        "eval-config.json",
        &ResolvedEval {
            command: "eval",
            enhanced: None,
            reference: None,
            manifest: Some(common::resolve_manifest_path(manifest_arg).display().to_string()),
            provenance: common::provenance(),
        },
    )?;
    let manifest = common::load_manifest(manifest_arg)?;
    let mut rows = Vec::new();
    for (i, entry) in manifest.entries().iter().enumerate() {
        let (a, b) = common::load_eval_pair(
            &entry.id,
            &manifest.input_path(i),
            &manifest.reference_path(i),
        )?;
        rows.push(PairMetrics {
            id: entry.id.clone(),
            psnr_db: psnr(&a, &b).with_context(|| format!("pair {}", entry.id))?,
            ssim: ssim(&a, &b).with_context(|| format!("pair {}", entry.id))?,
        });
    }
    write_report(out, &MetricReport::from_pairs(rows))
}

#[derive(Serialize)]
struct ResolvedAblation<'a> {
    command: &'static str,
    arms: [&'static str; 4],
    base_config: &'a RunConfig,
    data_manifest: String,
    data_manifest_sha256: String,
    eval_manifest: String,
    eval_manifest_sha256: String,
    max_phases: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Serialize)]
struct ArmResult {
    corruption: String,
    mean_psnr_db: f64,
    mean_ssim: f64,
}

/// Train one arm per corruption preset under otherwise identical settings,
/// score each on the held-out set, and print a four-row table.
fn run_ablation(args: &Args, out: &Path) -> Result<()> {
    let (Some(data), Some(eval_data)) = (&args.data, &args.eval_data) else {
        bail!("--ablation requires --data and --eval-data");
    };
    let mut base = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::desk(common::parse_corruption("none")?, args.seed),
    };
    common::apply_max_phases(&mut base, Some(args.max_phases))?;
    base.validate()?;

    let data_path = common::resolve_manifest_path(data);
    let eval_path = common::resolve_manifest_path(eval_data);
    common::write_resolved(
        out,
        "ablation-config.json",
        &ResolvedAblation {
            command: "eval --ablation",
            arms: ABLATION_ARMS,
            base_config: &base,
            data_manifest: data_path.display().to_string(),
            data_manifest_sha256: common::sha256_hex(&data_path)?,
            eval_manifest: eval_path.display().to_string(),
            eval_manifest_sha256: common::sha256_hex(&eval_path)?,
            max_phases: args.max_phases,
            provenance: common::provenance(),
        },
    )?;

    let train_pairs = common::load_manifest(data)?.load_pairs()?;
    let eval_manifest = common::load_manifest(eval_data)?;
    let eval_pairs = eval_manifest.load_pairs()?;
    let schedule = base.schedule.build()?;

    let mut results = Vec::new();
    for arm in ABLATION_ARMS {
        println!("=== arm {arm} ===");
        let mut config = base.clone();
        config.train.corruption = common::parse_corruption(arm)?;
        let arm_dir = out.join(format!("arm-{arm}"));
        fs::create_dir_all(&arm_dir).with_context(|| format!("creating {}", arm_dir.display()))?;

        // Same init stream for every arm: only the corruption differs.
        let mut net = Denoiser::init(&config.denoiser, &mut sub_rng(config.train.seed, "net-init"))?;
        common::run_cascade_with_artifacts(&arm_dir, &mut net, &train_pairs, &config, &schedule, 0)?;

        let enhanced_dir = arm_dir.join("enhanced");
        fs::create_dir_all(&enhanced_dir)
            .with_context(|| format!("creating {}", enhanced_dir.display()))?;
        let mut rows = Vec::new();
        for (i, pair) in eval_pairs.iter().enumerate() {
            let id = eval_manifest.entries()[i].id.clone();
            // The sampling stream depends on (seed, image) but not the arm,
            // so arms are compared under identical sampling noise.
            let mut rng = sub_rng(config.train.seed, &format!("enhance/{id}"));
            let enhanced = common::enhance_one(&net, &schedule, &pair.input, None, &mut rng)?;
            save_png(&enhanced_dir.join(format!("{id}.png")), &enhanced)?;
            rows.push(PairMetrics {
                id: id.clone(),
                psnr_db: psnr(&enhanced, &pair.reference).with_context(|| format!("pair {id}"))?,
                ssim: ssim(&enhanced, &pair.reference).with_context(|| format!("pair {id}"))?,
            });
        }
        let report = MetricReport::from_pairs(rows);
        let csv = arm_dir.join("metrics.csv");
        fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        println!("arm {arm}: mean psnr {:.4} dB, mean ssim {:.4}", report.mean_psnr_db, report.mean_ssim);
        results.push(ArmResult {
            corruption: arm.to_string(),
            mean_psnr_db: report.mean_psnr_db,
            mean_ssim: report.mean_ssim,
        });
    }

    let mut csv = String::from("corruption,mean_psnr_db,mean_ssim\n");
    for r in &results {
        csv.push_str(&format!("{},{:.6},{:.6}\n", r.corruption, r.mean_psnr_db, r.mean_ssim));
    }
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;

    println!("{:<14} {:>12} {:>10}", "corruption", "mean_psnr_db", "mean_ssim");
    for r in &results {
        println!("{:<14} {:>12.4} {:>10.4}", r.corruption, r.mean_psnr_db, r.mean_ssim);
    }
    println!("ablation table written to {}", csv_path.display());
    Ok(())
}
