//! Image file I/O, range conversion, cropping, resizing, and dataset
//! manifests — the plumbing shared by the data generator, trainer, sampler,
//! and evaluator.
//!
//! The interchange format is 8-bit RGB PNG. Pixels load as `v / 255` into
//! unit range; the diffusion process itself runs in model range `[-1, 1]`
//! via [`to_model_range`] / [`from_model_range`].

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{reflect_index, ImageTensor, Range};

/// Load an 8-bit RGB PNG as a unit-range tensor (`v / 255`).
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::image(path, e))?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::InvalidArg(format!(
                "{}: expected 8-bit RGB, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::from_data(h as usize, w as usize, 3, Range::Unit, data)
}

/// Save a unit-range tensor as 8-bit RGB PNG (values quantized by rounding).
pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    img.ensure_range(Range::Unit)?;
    if img.channels() != 3 {
        return Err(Error::InvalidArg(format!(
            "PNG writer expects 3 channels, got {}",
            img.channels()
        )));
    }
    let bytes: Vec<u8> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("byte count matches dimensions by construction");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Map unit range to model range: `2x - 1`.
pub fn to_model_range(x: &ImageTensor) -> Result<ImageTensor> {
    x.ensure_range(Range::Unit)?;
    Ok(x.map(Range::Model, |v| 2.0 * v - 1.0))
}

/// Map model range back to unit range: `(x + 1) / 2`, clamped into `[0, 1]`.
///
/// Accepts unbounded tensors too (raw sampler states), clamping whatever
/// falls outside.
pub fn from_model_range(x: &ImageTensor) -> Result<ImageTensor> {
    if x.range() == Range::Unit {
        return Err(Error::RangeTag { expected: Range::Model, got: Range::Unit });
    }
    Ok(x.map(Range::Unit, |v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
}

/// Crop `size`×`size` from identical coordinates of both images.
pub fn random_crop_pair(
    input: &ImageTensor,
    reference: &ImageTensor,
    size: usize,
    rng: &mut Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    input.ensure_same_shape(reference)?;
    let (h, w, _) = input.shape();
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArg(format!("crop size {size} does not fit {h}x{w}")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok((crop(input, top, left, size, size), crop(reference, top, left, size, size)))
}

/// Extract a rectangle (caller guarantees bounds).
pub fn crop(x: &ImageTensor, top: usize, left: usize, height: usize, width: usize) -> ImageTensor {
    assert!(top + height <= x.height() && left + width <= x.width(), "crop outside image");
    let c = x.channels();
    let mut data = Vec::with_capacity(height * width * c);
    for row in top..top + height {
        let start = x.index(row, left, 0);
        data.extend_from_slice(&x.data()[start..start + width * c]);
    }
    ImageTensor::from_data(height, width, c, x.range(), data)
        .expect("crop of a valid tensor stays valid")
}

/// Mirror a horizontal flip of the image (left-right).
pub fn flip_horizontal(x: &ImageTensor) -> ImageTensor {
    let (h, w, c) = x.shape();
    let mut out = ImageTensor::zeros(h, w, c, x.range());
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                out.set(row, col, ch, x.get(row, w - 1 - col, ch));
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers; bit-identical when sizes match.
pub fn resize(x: &ImageTensor, new_h: usize, new_w: usize) -> Result<ImageTensor> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArg("resize target must be positive".into()));
    }
    let (h, w, c) = x.shape();
    if (new_h, new_w) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = ImageTensor::zeros(new_h, new_w, c, x.range());
    let scale_y = h as f64 / new_h as f64;
    let scale_x = w as f64 / new_w as f64;
    for oy in 0..new_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..new_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let a = x.get(y0, x0, ch) * (1.0 - fx) + x.get(y0, x1, ch) * fx;
                let b = x.get(y1, x0, ch) * (1.0 - fx) + x.get(y1, x1, ch) * fx;
                out.set(oy, ox, ch, a * (1.0 - fy) + b * fy);
            }
        }
    }
    Ok(out)
}

/// Reflect-pad an image on the bottom/right up to the given size.
pub fn pad_reflect(x: &ImageTensor, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    let (h, w, c) = x.shape();
    if target_h < h || target_w < w {
        return Err(Error::InvalidArg(format!(
            "pad target {target_h}x{target_w} smaller than image {h}x{w}"
        )));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = ImageTensor::zeros(target_h, target_w, c, x.range());
    for row in 0..target_h {
        let sr = reflect_index(row as isize, h);
        for col in 0..target_w {
            let sc = reflect_index(col as isize, w);
            for ch in 0..c {
                out.set(row, col, ch, x.get(sr, sc, ch));
            }
        }
    }
    Ok(out)
}

/// Round up to the next multiple of `m`.
pub fn next_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// One record of a dataset manifest: a named input/reference pair plus
/// whatever generation metadata the writer chose to attach.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path of the (dark) input image, relative to the manifest's directory.
    pub input: String,
    /// Path of the reference image, relative to the manifest's directory.
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<serde_json::Value>,
}

/// A list of image pairs rooted at the manifest file's directory.
///
/// On-disk shape: one JSON record per line (`manifest.jsonl`).
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.jsonl";

    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { root, entries }
    }

    /// Read and validate a manifest: ids must be unique and every referenced
    /// file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if !ids.insert(entry.id.clone()) {
                return Err(Error::Manifest(format!(
                    "{}: duplicate pair id {:?}",
                    path.display(),
                    entry.id
                )));
            }
            for rel in [&entry.input, &entry.reference] {
                let full = root.join(rel);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "{}: pair {:?} references missing file {}",
                        path.display(),
                        entry.id,
                        full.display()
                    )));
                }
            }
            entries.push(entry);
        }
        Ok(DatasetManifest { root, entries })
    }

    /// Write the manifest into `root`, returning the file path.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(Self::FILE_NAME);
        let mut out = Vec::new();
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)
                .map_err(|e| Error::Manifest(format!("serializing {:?}: {e}", entry.id)))?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&out).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn input_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].input)
    }

    pub fn reference_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].reference)
    }

    /// Load every pair into memory as unit-range tensors.
    pub fn load_pairs(&self) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                Ok(ImagePair {
                    id: entry.id.clone(),
                    input: load_png(&self.input_path(i))?,
                    reference: load_png(&self.reference_path(i))?,
                })
            })
            .collect()
    }
}

/// An input/reference pair in memory, both unit range.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub input: ImageTensor,
    pub reference: ImageTensor,
}
