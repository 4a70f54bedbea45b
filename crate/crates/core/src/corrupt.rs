//! Stochastic corruption of the condition image: additive Gaussian noise,
//! Gaussian blur, and rectangular cutout.
//!
//! [`corrupt`] re-samples which operators fire and all their parameters on
//! every call, so repeated invocations on the same image keep producing
//! different degradations. When several operators fire at once they apply
//! in the fixed order noise -> blur -> cutout, keeping seeded runs
//! reproducible.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{reflect_index, ImageTensor, Range};

/// One blur option: kernel side length and its Gaussian standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernelSpec {
    pub kernel_size: usize,
    pub sigma: f64,
}

/// Default per-operator firing probability.
pub const DEFAULT_PROBABILITY: f64 = 0.5;
/// Default additive-noise variance range, in 8-bit intensity units squared.
pub const DEFAULT_NOISE_VAR_RANGE: (f64, f64) = (10.0, 100.0);
/// Default blur options.
pub const DEFAULT_BLUR_TABLE: [BlurKernelSpec; 3] = [
    BlurKernelSpec { kernel_size: 3, sigma: 0.8 },
    BlurKernelSpec { kernel_size: 5, sigma: 1.1 },
    BlurKernelSpec { kernel_size: 7, sigma: 1.4 },
];
/// Default cutout rectangle count range.
pub const DEFAULT_CUTOUT_COUNT_RANGE: (u32, u32) = (1, 100);
/// Default cutout side-length range in pixels.
pub const DEFAULT_CUTOUT_SIDE_RANGE: (u32, u32) = (4, 32);

/// Parameter ranges and firing probabilities for the three corruption
/// operators. A probability of 0 disables an operator entirely (it draws no
/// randomness).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub noise_probability: f64,
    pub noise_var_range: (f64, f64),
    pub blur_probability: f64,
    pub blur_table: Vec<BlurKernelSpec>,
    pub cutout_probability: f64,
    pub cutout_count_range: (u32, u32),
    pub cutout_side_range: (u32, u32),
    /// Unit-range value painted into cutout rectangles.
    pub fill_value: f32,
}

impl CorruptionSpec {
    /// Everything disabled; `corrupt` becomes the identity.
    pub fn none() -> Self {
        CorruptionSpec {
            noise_probability: 0.0,
            noise_var_range: DEFAULT_NOISE_VAR_RANGE,
            blur_probability: 0.0,
            blur_table: DEFAULT_BLUR_TABLE.to_vec(),
            cutout_probability: 0.0,
            cutout_count_range: DEFAULT_CUTOUT_COUNT_RANGE,
            cutout_side_range: DEFAULT_CUTOUT_SIDE_RANGE,
            fill_value: 0.0,
        }
    }

    /// Resolve a named preset:
    ///
    /// * `none` — identity
    /// * `paper` — all three operators at probability 0.5
    /// * `paper-noise` / `paper-blur` / `paper-cutout` — a single operator
    ///   at probability 0.5 (the ablation arms)
    pub fn preset(name: &str) -> Result<Self> {
        let mut spec = Self::none();
        match name {
            "none" => {}
            "paper" => {
                spec.noise_probability = DEFAULT_PROBABILITY;
                spec.blur_probability = DEFAULT_PROBABILITY;
                spec.cutout_probability = DEFAULT_PROBABILITY;
            }
            "paper-noise" => spec.noise_probability = DEFAULT_PROBABILITY,
            "paper-blur" => spec.blur_probability = DEFAULT_PROBABILITY,
            "paper-cutout" => spec.cutout_probability = DEFAULT_PROBABILITY,
            other => {
                return Err(Error::InvalidArg(format!(
                    "unknown corruption preset {other:?} \
                     (expected none|paper|paper-noise|paper-blur|paper-cutout)"
                )))
            }
        }
        Ok(spec)
    }

    /// True when no operator can fire.
    pub fn is_inert(&self) -> bool {
        self.noise_probability <= 0.0
            && self.blur_probability <= 0.0
            && self.cutout_probability <= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let check_prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} probability {p} outside [0, 1]")))
            }
        };
        check_prob("noise", self.noise_probability)?;
        check_prob("blur", self.blur_probability)?;
        check_prob("cutout", self.cutout_probability)?;
        let (nlo, nhi) = self.noise_var_range;
        if !(0.0 <= nlo && nlo <= nhi) {
            return Err(Error::InvalidConfig(format!(
                "noise variance range [{nlo}, {nhi}] must satisfy 0 <= low <= high"
            )));
        }
        if self.blur_probability > 0.0 && self.blur_table.is_empty() {
            return Err(Error::InvalidConfig("blur enabled with an empty kernel table".into()));
        }
        for k in &self.blur_table {
            if k.kernel_size < 3 || k.kernel_size % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "blur kernel size {} must be odd and >= 3",
                    k.kernel_size
                )));
            }
            if !(k.sigma > 0.0) {
                return Err(Error::InvalidConfig(format!("blur sigma {} must be > 0", k.sigma)));
            }
        }
        let (clo, chi) = self.cutout_count_range;
        let (slo, shi) = self.cutout_side_range;
        if clo < 1 || clo > chi {
            return Err(Error::InvalidConfig(format!(
                "cutout count range [{clo}, {chi}] must satisfy 1 <= min <= max"
            )));
        }
        if slo < 1 || slo > shi {
            return Err(Error::InvalidConfig(format!(
                "cutout side range [{slo}, {shi}] must satisfy 1 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::InvalidConfig(format!(
                "cutout fill value {} outside unit range",
                self.fill_value
            )));
        }
        Ok(())
    }
}

/// A cutout rectangle; extends from (top, left), clipped at image borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoutRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutoutRect {
    /// Pixel area after clipping to an `h`x`w` image.
    pub fn clipped_area(&self, h: usize, w: usize) -> usize {
        let rows = self.height.min(h.saturating_sub(self.top));
        let cols = self.width.min(w.saturating_sub(self.left));
        rows * cols
    }
}

/// The concrete outcome of one corruption sampling: which operators fired
/// and with what parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionDraw {
    pub noise_var_8bit: Option<f64>,
    pub blur: Option<BlurKernelSpec>,
    pub cutout: Option<Vec<CutoutRect>>,
}

impl CorruptionDraw {
    pub fn identity() -> Self {
        CorruptionDraw { noise_var_8bit: None, blur: None, cutout: None }
    }
}

/// Sample which operators fire and their parameters for an `h`x`w` image.
///
/// Sampled cutout sides are capped at `min(h, w)`; positions are uniform
/// over all pixels with rectangles clipped at the bottom/right borders.
pub fn sample_corruption(
    spec: &CorruptionSpec,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> Result<CorruptionDraw> {
    spec.validate()?;
    let mut draw = CorruptionDraw::identity();
    if spec.noise_probability > 0.0 && rng.random::<f64>() < spec.noise_probability {
        let (lo, hi) = spec.noise_var_range;
        draw.noise_var_8bit = Some(if lo == hi { lo } else { rng.random_range(lo..=hi) });
    }
    if spec.blur_probability > 0.0 && rng.random::<f64>() < spec.blur_probability {
        let idx = rng.random_range(0..spec.blur_table.len());
        draw.blur = Some(spec.blur_table[idx]);
    }
    if spec.cutout_probability > 0.0 && rng.random::<f64>() < spec.cutout_probability {
        let (clo, chi) = spec.cutout_count_range;
        let count = rng.random_range(clo..=chi);
        let side_cap = h.min(w) as u32;
        let mut rects = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let (slo, shi) = spec.cutout_side_range;
            let rh = rng.random_range(slo..=shi).min(side_cap) as usize;
            let rw = rng.random_range(slo..=shi).min(side_cap) as usize;
            let top = rng.random_range(0..h);
            let left = rng.random_range(0..w);
            rects.push(CutoutRect { top, left, height: rh, width: rw });
        }
        draw.cutout = Some(rects);
    }
    Ok(draw)
}

/// Apply a sampled draw in the fixed order noise -> blur -> cutout.
pub fn apply_draw(
    x: &ImageTensor,
    draw: &CorruptionDraw,
    fill_value: f32,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    let mut out = match draw.noise_var_8bit {
        Some(var) => add_gaussian_noise(x, var, rng)?,
        None => x.clone(),
    };
    if let Some(k) = draw.blur {
        out = apply_gaussian_blur(&out, k.kernel_size, k.sigma)?;
    }
    if let Some(rects) = &draw.cutout {
        out = apply_cutout(&out, rects, fill_value);
    }
    Ok(out)
}

/// Sample and apply one corruption. Identity when nothing fires.
pub fn corrupt(x: &ImageTensor, spec: &CorruptionSpec, rng: &mut Rng) -> Result<ImageTensor> {
    x.ensure_range(Range::Unit)?;
    let draw = sample_corruption(spec, x.height(), x.width(), rng)?;
    apply_draw(x, &draw, spec.fill_value, rng)
}

/// Add i.i.d. zero-mean Gaussian noise with the given variance expressed in
/// 8-bit units squared (converted to unit range by dividing by 255²), then
/// clamp to [0, 1].
pub fn add_gaussian_noise(x: &ImageTensor, variance_8bit: f64, rng: &mut Rng) -> Result<ImageTensor> {
    if variance_8bit < 0.0 {
        return Err(Error::InvalidArg(format!("noise variance {variance_8bit} must be >= 0")));
    }
    let sigma = variance_8bit.sqrt() / 255.0;
    Ok(x.map(Range::Unit, |v| {
        let z: f64 = StandardNormal.sample(rng);
        (v + (sigma * z) as f32).clamp(0.0, 1.0)
    }))
}

/// Normalized 1-D Gaussian kernel weights (length `size`, sum exactly
/// normalized to 1 in f64).
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::InvalidArg(format!("kernel size {size} must be odd and >= 3")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArg(format!("kernel sigma {sigma} must be > 0")));
    }
    let half = (size / 2) as isize;
    let mut k: Vec<f64> =
        (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    Ok(k)
}

/// Separable Gaussian blur with mirrored (reflect) borders; each channel is
/// convolved independently and the result clamped to [0, 1].
pub fn apply_gaussian_blur(x: &ImageTensor, kernel_size: usize, sigma: f64) -> Result<ImageTensor> {
    let k = gaussian_kernel_1d(kernel_size, sigma)?;
    let half = (kernel_size / 2) as isize;
    let (h, w, c) = x.shape();

    // Horizontal pass.
    let mut mid = vec![0.0f64; h * w * c];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (ki, &kw) in k.iter().enumerate() {
                    let src = reflect_index(col as isize + ki as isize - half, w);
                    acc += kw * x.get(row, src, ch) as f64;
                }
                mid[(row * w + col) * c + ch] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = ImageTensor::zeros(h, w, c, x.range());
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (ki, &kw) in k.iter().enumerate() {
                    let src = reflect_index(row as isize + ki as isize - half, h);
                    acc += kw * mid[(src * w + col) * c + ch];
                }
                out.set(row, col, ch, (acc as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Paint every rectangle (all channels) with `fill_value`; overlaps allowed,
/// borders clipped.
pub fn apply_cutout(x: &ImageTensor, rects: &[CutoutRect], fill_value: f32) -> ImageTensor {
    let (h, w, c) = x.shape();
    let mut out = x.clone();
    for r in rects {
        let rows = r.top..(r.top + r.height).min(h);
        for row in rows {
            let cols = r.left..(r.left + r.width).min(w);
            for col in cols {
                for ch in 0..c {
                    out.set(row, col, ch, fill_value);
                }
            }
        }
    }
    out
}
