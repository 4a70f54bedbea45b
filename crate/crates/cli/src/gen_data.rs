//! `starglow gen-data` — synthetic paired star-field dataset generation.

use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::Serialize;

use starglow_core::dataio::DatasetManifest;
use starglow_core::stargen::{generate_dataset, SpecRanges};

use crate::common::{self, Provenance};

#[derive(clap::Args)]
pub struct Args {
    /// Number of input/reference pairs to generate.
    #[arg(long)]
    pub pairs: usize,

    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,

    /// Dataset seed; pair k derives its random stream from (seed, pair id).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory [default: <out root>/dataset].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'static str,
    pairs: usize,
    size: usize,
    seed: u64,
    out: &'a std::path::Path,
    ranges: &'a SpecRanges,
    #[serde(flatten)]
    provenance: Provenance,
}

pub fn run(args: Args) -> Result<()> {
    if args.pairs == 0 {
        bail!("--pairs must be at least 1");
    }
    if args.size == 0 {
        bail!("--size must be positive");
    }
    let out = args.out.clone().unwrap_or_else(|| common::default_out("dataset"));
    let ranges = SpecRanges::desk(args.size);
    common::write_resolved(
        &out,
        "gen-config.json",
        &Resolved {
            command: "gen-data",
            pairs: args.pairs,
            size: args.size,
            seed: args.seed,
            out: &out,
            ranges: &ranges,
            provenance: common::provenance(),
        },
    )?;
    let manifest = generate_dataset(&out, args.pairs, &ranges, args.seed)?;
    println!(
        "wrote {} pairs; manifest at {}",
        manifest.len(),
        out.join(DatasetManifest::FILE_NAME).display()
    );
    Ok(())
}
