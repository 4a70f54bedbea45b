//! Reference image-quality metrics (PSNR, SSIM) and their report container.
//!
//! Both metrics operate on unit-range images and compute internally in
//! `f64`. [`psnr`] returns `+inf` for identical images; reports cap the
//! value at [`PSNR_REPORT_CAP_DB`] so tables stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Range};

/// Cap applied to per-image PSNR values when building a [`MetricReport`].
pub const PSNR_REPORT_CAP_DB: f64 = 100.0;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM window Gaussian standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM stabilization constants for dynamic range L = 1:
/// `C1 = (K1 L)^2` with K1 = 0.01, `C2 = (K2 L)^2` with K2 = 0.03.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Peak signal-to-noise ratio in dB: `10 log10(1 / MSE)` over all elements.
/// Returns `+inf` when the images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_range(Range::Unit)?;
    b.ensure_range(Range::Unit)?;
    a.ensure_same_shape(b)?;
    let mut sq_sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        sq_sum += d * d;
    }
    let mse = sq_sum / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Normalized 2-D Gaussian window as a flat `size*size` array summing to 1.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut w = Vec::with_capacity(size * size);
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dy * dy + dx * dx) as f64;
            w.push((-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// evaluated at every position where the window fits entirely inside the
/// image, per channel, then averaged across channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_range(Range::Unit)?;
    b.ensure_range(Range::Unit)?;
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut channel_means = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for top in 0..=h - SSIM_WINDOW {
            for left in 0..=w - SSIM_WINDOW {
                let mut mu_x = 0.0f64;
                let mut mu_y = 0.0f64;
                let mut xx = 0.0f64;
                let mut yy = 0.0f64;
                let mut xy = 0.0f64;
                let mut wi = 0usize;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let weight = win[wi];
                        wi += 1;
                        let x = a.get(top + dy, left + dx, ch) as f64;
                        let y = b.get(top + dy, left + dx, ch) as f64;
                        mu_x += weight * x;
                        mu_y += weight * y;
                        xx += weight * x * x;
                        yy += weight * y * y;
                        xy += weight * x * y;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2);
                sum += num / den;
                count += 1;
            }
        }
        channel_means.push(sum / count as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / c as f64)
}

/// Metrics for a single evaluated pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-pair metrics plus their arithmetic means. PSNR values are capped at
/// [`PSNR_REPORT_CAP_DB`] on entry so the aggregate invariant (mean of the
/// listed values) holds even for identical pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<PairMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Self {
        let per_image: Vec<PairMetrics> = pairs
            .into_iter()
            .map(|p| PairMetrics { psnr_db: p.psnr_db.min(PSNR_REPORT_CAP_DB), ..p })
            .collect();
        let n = per_image.len().max(1) as f64;
        let mean_psnr_db = per_image.iter().map(|p| p.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|p| p.ssim).sum::<f64>() / n;
        MetricReport { per_image, mean_psnr_db, mean_ssim }
    }

    /// CSV schema: header `pair_id,psnr_db,ssim`, one row per pair, then a
    /// final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,psnr_db,ssim\n");
        for p in &self.per_image {
            out.push_str(&format!("{},{:.6},{:.6}\n", p.id, p.psnr_db, p.ssim));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr_db, self.mean_ssim));
        out
    }

    /// Fixed-width table for terminal output.
    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:>10} {:>8}\n", "pair", "psnr_db", "ssim");
        for p in &self.per_image {
            out.push_str(&format!("{:<20} {:>10.4} {:>8.4}\n", p.id, p.psnr_db, p.ssim));
        }
        out.push_str(&format!("{:<20} {:>10.4} {:>8.4}\n", "mean", self.mean_psnr_db, self.mean_ssim));
        out
    }
}
