//! Procedural star-field scenes: renders paired dark/bright images of the
//! same sky (shared star positions and horizon) so the enhancement task has
//! aligned supervision.
//!
//! A scene is a vertical sky gradient, a set of Gaussian point-spread stars
//! with power-law fluxes, and a flat-luminance landscape below a random-walk
//! horizon. The reference rendering is brighter, uses a softer star PSF,
//! adds a wide halo around the brightest quartile of stars with a slight
//! warm tint, and is noise-free; the input rendering is globally dimmed by
//! an exposure ratio and carries sensor-style Gaussian noise.

use std::fs;
use std::path::Path;

use rand::{Rng as _, RngCore as _, SeedableRng as _};
use serde::{Deserialize, Serialize};

use crate::corrupt::add_gaussian_noise;
use crate::dataio::{save_png, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng::{subseed, Rng};
use crate::tensor::{ImageTensor, Range};

/// Which half of a pair to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Input,
    Reference,
}

/// Full procedural description of one scene. All luminances are unit range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub star_count: usize,
    /// Power-law exponent of the star flux distribution.
    pub brightness_exponent: f64,
    /// Truncation bounds of the flux distribution.
    pub flux_range: (f64, f64),
    pub psf_sigma_input: f64,
    pub psf_sigma_reference: f64,
    /// Width of the additive glow around bright stars (reference only).
    pub halo_sigma: f64,
    /// Glow mass as a fraction of the star's flux.
    pub halo_gain: f64,
    /// Per-channel warm tint strength applied to reference stars.
    pub warmth: f64,
    /// Sky luminance at the top row and at the bottom row.
    pub sky_gradient: (f32, f32),
    pub landscape_seed: u64,
    pub landscape_luminance_input: f32,
    pub landscape_luminance_reference: f32,
    /// Global dimming factor of the input rendering, in (0, 1).
    pub exposure_ratio: f32,
    /// Input sensor noise variance in 8-bit units squared.
    pub noise_var_input: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            star_count: 90,
            brightness_exponent: -1.5,
            flux_range: (0.3, 12.0),
            psf_sigma_input: 0.7,
            psf_sigma_reference: 1.2,
            halo_sigma: 4.0,
            halo_gain: 0.8,
            warmth: 0.03,
            sky_gradient: (0.02, 0.12),
            landscape_seed: 0,
            landscape_luminance_input: 0.22,
            landscape_luminance_reference: 0.45,
            exposure_ratio: 0.25,
            noise_var_input: 20.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("scene dimensions must be positive".into()));
        }
        if self.psf_sigma_reference < self.psf_sigma_input {
            return Err(Error::InvalidConfig(
                "reference PSF must be at least as wide as the input PSF".into(),
            ));
        }
        if self.landscape_luminance_reference < self.landscape_luminance_input {
            return Err(Error::InvalidConfig(
                "reference landscape must be at least as bright as the input".into(),
            ));
        }
        if !(self.exposure_ratio > 0.0 && self.exposure_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "exposure ratio {} outside (0, 1)",
                self.exposure_ratio
            )));
        }
        let (flo, fhi) = self.flux_range;
        if !(flo > 0.0 && flo <= fhi) {
            return Err(Error::InvalidConfig(format!("flux range [{flo}, {fhi}] invalid")));
        }
        if !(self.psf_sigma_input > 0.0 && self.halo_sigma > 0.0) {
            return Err(Error::InvalidConfig("PSF and halo sigmas must be positive".into()));
        }
        if self.halo_gain < 0.0 || self.noise_var_input < 0.0 || self.warmth < 0.0 {
            return Err(Error::InvalidConfig(
                "halo gain, warmth, and noise variance must be non-negative".into(),
            ));
        }
        for &v in &[self.sky_gradient.0, self.sky_gradient.1] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("sky luminance {v} outside unit range")));
            }
        }
        Ok(())
    }
}

/// Fraction of the image height that stars may occupy: they stay strictly
/// above the lowest possible horizon so every star survives compositing.
const STAR_ROW_FRACTION: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
struct Star {
    x: f64,
    y: f64,
    flux: f64,
    /// Per-channel tint with mean exactly 1.
    color: [f64; 3],
}

/// Draw star positions, fluxes, and tints. The draw count per star is fixed,
/// so input and reference renders from clones of one RNG see identical
/// stars.
fn sample_stars(spec: &SceneSpec, rng: &mut Rng) -> Vec<Star> {
    let (flo, fhi) = spec.flux_range;
    let a1 = spec.brightness_exponent + 1.0;
    let mut stars = Vec::with_capacity(spec.star_count);
    for _ in 0..spec.star_count {
        let x = rng.random::<f64>() * spec.width as f64;
        let y = rng.random::<f64>() * spec.height as f64 * STAR_ROW_FRACTION;
        let u = rng.random::<f64>();
        // Inverse CDF of a truncated power law f^a on [flo, fhi].
        let flux = if a1.abs() < 1e-9 {
            flo * (fhi / flo).powf(u)
        } else {
            (flo.powf(a1) + u * (fhi.powf(a1) - flo.powf(a1))).powf(1.0 / a1)
        };
        let temp = (rng.random::<f64>() * 2.0 - 1.0) * 0.06;
        stars.push(Star { x, y, flux, color: [1.0 + temp, 1.0, 1.0 - temp] });
    }
    stars
}

/// Add `mass * color` as a discrete Gaussian splat centered at (cx, cy).
/// Weights are normalized over the full window, so the whole mass lands on
/// the image whenever the window fits inside it.
fn splat_gaussian(
    buf: &mut [f64],
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    sigma: f64,
    mass: f64,
    color: [f64; 3],
) {
    let r = (3.0 * sigma).ceil() as isize + 1;
    let icx = cx.floor() as isize;
    let icy = cy.floor() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    let mut total = 0.0f64;
    for iy in icy - r..=icy + r {
        for ix in icx - r..=icx + r {
            let d2 = (ix as f64 - cx).powi(2) + (iy as f64 - cy).powi(2);
            let wgt = (-d2 * inv).exp();
            weights.push(wgt);
            total += wgt;
        }
    }
    let mut wi = 0usize;
    for iy in icy - r..=icy + r {
        for ix in icx - r..=icx + r {
            let wgt = weights[wi] / total;
            wi += 1;
            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                continue;
            }
            let base = ((iy as usize) * w + ix as usize) * 3;
            for ch in 0..3 {
                buf[base + ch] += mass * wgt * color[ch];
            }
        }
    }
}

/// Render the sky (gradient plus stars) for one role, clamped to [0, 1].
///
/// The reference role widens the PSF, adds a halo of mass
/// `halo_gain * flux` around the brightest quartile of stars, and tints
/// stars warm; none of that changes the random draws, so roles rendered
/// from the same RNG state share star positions exactly.
pub fn render_starfield(spec: &SceneSpec, rng: &mut Rng, role: Role) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let stars = sample_stars(spec, rng);

    let mut star_layer = vec![0.0f64; h * w * 3];
    let psf_sigma = match role {
        Role::Input => spec.psf_sigma_input,
        Role::Reference => spec.psf_sigma_reference,
    };
    for s in &stars {
        splat_gaussian(&mut star_layer, h, w, s.x, s.y, psf_sigma, s.flux, s.color);
    }
    if role == Role::Reference && spec.halo_gain > 0.0 && !stars.is_empty() {
        let mut fluxes: Vec<f64> = stars.iter().map(|s| s.flux).collect();
        fluxes.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let quartile = fluxes.len().div_ceil(4);
        let threshold = fluxes[quartile - 1];
        for s in stars.iter().filter(|s| s.flux >= threshold) {
            splat_gaussian(
                &mut star_layer,
                h,
                w,
                s.x,
                s.y,
                spec.halo_sigma,
                spec.halo_gain * s.flux,
                s.color,
            );
        }
    }

    let tint = match role {
        Role::Input => [1.0, 1.0, 1.0],
        Role::Reference => [1.0 + spec.warmth, 1.0, 1.0 - spec.warmth],
    };
    let (top, bottom) = spec.sky_gradient;
    let mut out = ImageTensor::zeros(h, w, 3, Range::Unit);
    for row in 0..h {
        let frac = if h > 1 { row as f32 / (h - 1) as f32 } else { 0.0 };
        let sky = top + (bottom - top) * frac;
        for col in 0..w {
            for ch in 0..3 {
                let v = sky as f64 + tint[ch] * star_layer[(row * w + col) * 3 + ch];
                out.set(row, col, ch, (v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Binary landscape mask (1 below the horizon) from a bounded random walk.
/// The horizon stays within [0.4, 0.8] of the image height in every column.
pub fn render_landscape_mask(spec: &SceneSpec, rng: &mut Rng) -> ImageTensor {
    let (h, w) = (spec.height, spec.width);
    let lo = (STAR_ROW_FRACTION * h as f64).ceil();
    let hi = (0.8 * h as f64).floor().max(lo);
    let step_amp = (h as f64 / 48.0).max(1.0);
    let mut level = lo + (hi - lo) * (0.25 + 0.5 * rng.random::<f64>());
    let mut out = ImageTensor::zeros(h, w, 1, Range::Unit);
    for col in 0..w {
        level = (level + (rng.random::<f64>() * 2.0 - 1.0) * step_amp).clamp(lo, hi);
        let horizon_row = (level.round() as usize).clamp(lo as usize, hi as usize);
        for row in horizon_row..h {
            out.set(row, col, 0, 1.0);
        }
    }
    out
}

/// Render an aligned (input, reference) pair.
///
/// Both roles are rendered from the same derived star stream and the
/// landscape comes from `landscape_seed`, so star positions and the horizon
/// match pixel-for-pixel. The input is then globally dimmed by
/// `exposure_ratio` and receives Gaussian sensor noise.
pub fn render_pair(spec: &SceneSpec, rng: &mut Rng) -> Result<(ImageTensor, ImageTensor)> {
    spec.validate()?;
    let star_seed = rng.next_u64();
    let noise_seed = rng.next_u64();

    let sky_input = render_starfield(spec, &mut Rng::seed_from_u64(star_seed), Role::Input)?;
    let sky_reference =
        render_starfield(spec, &mut Rng::seed_from_u64(star_seed), Role::Reference)?;
    let mask = render_landscape_mask(spec, &mut Rng::seed_from_u64(spec.landscape_seed));

    let (h, w) = (spec.height, spec.width);
    let mut input = ImageTensor::zeros(h, w, 3, Range::Unit);
    let mut reference = ImageTensor::zeros(h, w, 3, Range::Unit);
    for row in 0..h {
        for col in 0..w {
            let land = mask.get(row, col, 0) > 0.5;
            for ch in 0..3 {
                let (vi, vr) = if land {
                    (spec.landscape_luminance_input, spec.landscape_luminance_reference)
                } else {
                    (sky_input.get(row, col, ch), sky_reference.get(row, col, ch))
                };
                input.set(row, col, ch, (vi * spec.exposure_ratio).clamp(0.0, 1.0));
                reference.set(row, col, ch, vr.clamp(0.0, 1.0));
            }
        }
    }
    if spec.noise_var_input > 0.0 {
        input = add_gaussian_noise(
            &input,
            spec.noise_var_input,
            &mut Rng::seed_from_u64(noise_seed),
        )?;
    }
    Ok((input, reference))
}

/// Per-pair sampling ranges for dataset generation. Values outside these
/// knobs use [`SceneSpec::default`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpecRanges {
    pub width: usize,
    pub height: usize,
    pub star_count: (usize, usize),
    pub exposure_ratio: (f32, f32),
    pub noise_var_input: (f64, f64),
    pub sky_top: (f32, f32),
    pub sky_horizon: (f32, f32),
    pub landscape_luminance_input: (f32, f32),
    /// Reference landscape brightness gain over the input value.
    pub landscape_brightening: (f32, f32),
}

impl SpecRanges {
    /// Desk-scale defaults at the given square size.
    pub fn desk(size: usize) -> Self {
        SpecRanges {
            width: size,
            height: size,
            star_count: (40, 140),
            exposure_ratio: (0.18, 0.32),
            noise_var_input: (5.0, 30.0),
            sky_top: (0.01, 0.04),
            sky_horizon: (0.08, 0.16),
            landscape_luminance_input: (0.15, 0.30),
            landscape_brightening: (0.15, 0.30),
        }
    }
}

fn range_f32(rng: &mut Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Sample one scene from the ranges.
pub fn sample_scene(ranges: &SpecRanges, landscape_seed: u64, rng: &mut Rng) -> SceneSpec {
    let (clo, chi) = ranges.star_count;
    let land_in = range_f32(rng, ranges.landscape_luminance_input);
    let land_ref = (land_in + range_f32(rng, ranges.landscape_brightening)).min(0.9);
    SceneSpec {
        width: ranges.width,
        height: ranges.height,
        star_count: if clo == chi { clo } else { rng.random_range(clo..=chi) },
        exposure_ratio: range_f32(rng, ranges.exposure_ratio),
        noise_var_input: if ranges.noise_var_input.0 == ranges.noise_var_input.1 {
            ranges.noise_var_input.0
        } else {
            rng.random_range(ranges.noise_var_input.0..=ranges.noise_var_input.1)
        },
        sky_gradient: (range_f32(rng, ranges.sky_top), range_f32(rng, ranges.sky_horizon)),
        landscape_luminance_input: land_in,
        landscape_luminance_reference: land_ref,
        landscape_seed,
        ..SceneSpec::default()
    }
}

/// Render `n_pairs` scenes into `out_dir/input` and `out_dir/reference` and
/// write the manifest. Each pair derives its own random stream from
/// `(seed, pair id)`, recorded in the manifest entry.
pub fn generate_dataset(
    out_dir: &Path,
    n_pairs: usize,
    ranges: &SpecRanges,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_pairs == 0 {
        return Err(Error::InvalidArg("dataset needs at least one pair".into()));
    }
    for sub in ["input", "reference"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let id = format!("pair-{i:04}");
        let pair_seed = u64::from_le_bytes(subseed(seed, &id)[..8].try_into().unwrap());
        let mut rng = Rng::seed_from_u64(pair_seed);
        let landscape_seed = rng.next_u64();
        let scene = sample_scene(ranges, landscape_seed, &mut rng);
        let (input, reference) = render_pair(&scene, &mut rng)?;
        let input_rel = format!("input/{id}.png");
        let reference_rel = format!("reference/{id}.png");
        save_png(&out_dir.join(&input_rel), &input)?;
        save_png(&out_dir.join(&reference_rel), &reference)?;
        entries.push(ManifestEntry {
            id,
            input: input_rel,
            reference: reference_rel,
            seed: Some(pair_seed),
            scene: Some(
                serde_json::to_value(&scene)
                    .map_err(|e| Error::Manifest(format!("serializing scene: {e}")))?,
            ),
        });
    }
    let manifest = DatasetManifest::new(out_dir.to_path_buf(), entries);
    manifest.save()?;
    Ok(manifest)
}
