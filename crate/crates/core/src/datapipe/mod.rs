//! Dataset ingestion and degradation.
//!
//! HR sources come from an image folder (or the procedural corpus); LR
//! counterparts are always derived by bicubic x4 downsampling, never
//! loaded independently. Images are (C, H, W) `f64` tensors in [-1, 1].

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCALE: usize = 4;

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Per-output-pixel taps and normalized weights for one axis.
///
/// Downsampling widens the kernel support by the inverse scale
/// (anti-aliasing); edges replicate by clamping tap indices. Weights are
/// renormalized so constants are preserved exactly.
fn bicubic_axis_coeffs(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_out as f64 / n_in as f64;
    let (kscale, radius) = if scale < 1.0 {
        (scale, 2.0 / scale)
    } else {
        (1.0, 2.0)
    };
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - radius).ceil() as isize;
            let hi = (center + radius).floor() as isize;
            let mut idx = Vec::with_capacity((hi - lo + 1) as usize);
            let mut wts = Vec::with_capacity((hi - lo + 1) as usize);
            for i in lo..=hi {
                let w = cubic_kernel((center - i as f64) * kscale) * kscale;
                if w != 0.0 {
                    idx.push(i.clamp(0, n_in as isize - 1) as usize);
                    wts.push(w);
                }
            }
            let sum: f64 = wts.iter().sum();
            for w in &mut wts {
                *w /= sum;
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic resize of (C, H, W) to explicit output dims.
pub fn bicubic_resize_to(image: &ArrayD<f64>, out_h: usize, out_w: usize) -> Result<ArrayD<f64>> {
    if image.ndim() != 3 {
        return Err(Error::shape("bicubic input", &[0, 0, 0], image.shape()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::range("bicubic output dims", "must be positive".to_string()));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let xcoef = bicubic_axis_coeffs(w, out_w);
    let ycoef = bicubic_axis_coeffs(h, out_h);

    // horizontal pass, then vertical
    let src = image.as_slice().unwrap();
    let mut tmp = vec![0.0; c * h * out_w];
    for ci in 0..c {
        for y in 0..h {
            let row = &src[(ci * h + y) * w..(ci * h + y + 1) * w];
            let out_row = &mut tmp[(ci * h + y) * out_w..(ci * h + y + 1) * out_w];
            for (ox, (idx, wts)) in xcoef.iter().enumerate() {
                out_row[ox] = idx.iter().zip(wts).map(|(&i, &wt)| wt * row[i]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ci in 0..c {
        for (oy, (idx, wts)) in ycoef.iter().enumerate() {
            for ox in 0..out_w {
                out[(ci * out_h + oy) * out_w + ox] = idx
                    .iter()
                    .zip(wts)
                    .map(|(&i, &wt)| wt * tmp[(ci * h + i) * out_w + ox])
                    .sum();
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[c, out_h, out_w]), out).unwrap())
}

/// Bicubic resize by the rational factor `num/den`; output dims must be
/// integral.
pub fn bicubic_resize(image: &ArrayD<f64>, num: usize, den: usize) -> Result<ArrayD<f64>> {
    if image.ndim() != 3 {
        return Err(Error::shape("bicubic input", &[0, 0, 0], image.shape()));
    }
    if num == 0 || den == 0 {
        return Err(Error::range("bicubic scale", "numerator and denominator must be positive".to_string()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h * num) % den != 0 || (w * num) % den != 0 {
        return Err(Error::range(
            "bicubic scale",
            format!("{h}x{w} scaled by {num}/{den} is not integral"),
        ));
    }
    bicubic_resize_to(image, h * num / den, w * num / den)
}

fn clamp_unit(mut image: ArrayD<f64>) -> ArrayD<f64> {
    image.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    image
}

/// An aligned (HR, LR) sample; LR and its x4 upsampling are derived from
/// HR at construction, then clamped back to [-1, 1] (the cubic kernel's
/// negative lobes can overshoot on hard edges).
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub hr: ArrayD<f64>,
    pub lr: ArrayD<f64>,
    pub lr_up: ArrayD<f64>,
    pub source_id: String,
}

/// The canonical HR -> LR degradation.
pub fn derive_lr(hr: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    Ok(clamp_unit(bicubic_resize(hr, 1, SCALE)?))
}

/// The canonical LR -> HR-resolution upsampling.
pub fn derive_lr_up(lr: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    Ok(clamp_unit(bicubic_resize(lr, SCALE, 1)?))
}

impl ImagePair {
    pub fn from_hr(hr: ArrayD<f64>, source_id: impl Into<String>) -> Result<Self> {
        if hr.ndim() != 3 {
            return Err(Error::shape("hr image", &[0, 0, 0], hr.shape()));
        }
        let (h, w) = (hr.shape()[1], hr.shape()[2]);
        if h % SCALE != 0 || w % SCALE != 0 {
            return Err(Error::range(
                "hr dims",
                format!("{h}x{w} not divisible by the x{SCALE} scale"),
            ));
        }
        if hr.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::range("hr values", "must be finite and in [-1, 1]".to_string()));
        }
        let lr = derive_lr(&hr)?;
        let lr_up = derive_lr_up(&lr)?;
        Ok(ImagePair {
            hr,
            lr,
            lr_up,
            source_id: source_id.into(),
        })
    }
}

// ---------------------------------------------------------------------
// 8-bit image I/O
// ---------------------------------------------------------------------

/// Loads a PNG/JPEG as (C, H, W) in [-1, 1]; grayscale stays 1-channel,
/// everything else converts to RGB.
pub fn load_image(path: &Path) -> Result<ArrayD<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let to_unit = |v: u8| v as f64 / 255.0 * 2.0 - 1.0;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data: Vec<f64> = g.pixels().map(|p| to_unit(p.0[0])).collect();
            Ok(ArrayD::from_shape_vec(IxDyn(&[1, h as usize, w as usize]), data).unwrap())
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[c * h * w + y as usize * w + x as usize] = to_unit(p.0[c]);
                }
            }
            Ok(ArrayD::from_shape_vec(IxDyn(&[3, h, w]), data).unwrap())
        }
    }
}

/// Maps [-1, 1] to 8-bit with round-half-away-from-zero.
pub fn quantize_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Writes (C, H, W) in [-1, 1] as an 8-bit PNG (1 or 3 channels).
pub fn save_image(path: &Path, image_t: &ArrayD<f64>) -> Result<()> {
    if image_t.ndim() != 3 {
        return Err(Error::shape("image tensor", &[0, 0, 0], image_t.shape()));
    }
    let (c, h, w) = (image_t.shape()[0], image_t.shape()[1], image_t.shape()[2]);
    let src = image_t.as_slice().unwrap();
    let map_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        source: e,
    };
    match c {
        1 => {
            let buf: Vec<u8> = src.iter().map(|&v| quantize_u8(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size")
                .save(path)
                .map_err(map_err)
        }
        3 => {
            let mut buf = vec![0u8; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..3 {
                        buf[(y * w + x) * 3 + ci] = quantize_u8(src[ci * h * w + y * w + x]);
                    }
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size")
                .save(path)
                .map_err(map_err)
        }
        other => Err(Error::range("image channels", format!("expected 1 or 3, got {other}"))),
    }
}

// ---------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub patch_size: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub skipped: Vec<String>,
}

#[derive(Debug)]
pub struct DatasetBundle {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
    pub skipped: Vec<(PathBuf, String)>,
    pub manifest: SplitManifest,
}

/// Scans `root` for decodable images, crops one `patch_size` HR patch per
/// image on a 4-aligned grid, derives LR pairs, and splits train/val/test
/// deterministically under `seed`. Unreadable files are skipped and
/// reported.
pub fn build_dataset(
    root: &Path,
    patch_size: usize,
    split_fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetBundle> {
    if patch_size == 0 || patch_size % SCALE != 0 {
        return Err(Error::range(
            "patch_size",
            format!("{patch_size} is not divisible by the x{SCALE} scale"),
        ));
    }
    let (ftr, fv, fte) = split_fractions;
    if !(ftr >= 0.0 && fv >= 0.0 && fte >= 0.0 && (ftr + fv + fte) <= 1.0 + 1e-9) {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to at most 1, got ({ftr}, {fv}, {fte})"
        )));
    }

    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
            )
        })
        .collect();
    entries.sort();

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (i, path) in entries.iter().enumerate() {
        match load_patch(path, patch_size, seed, i as u64) {
            Ok(pair) => pairs.push(pair),
            Err(e) => skipped.push((path.clone(), e.to_string())),
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no usable images under {} ({} skipped)",
            root.display(),
            skipped.len()
        )));
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut crate::rng::stream_rng(seed, "split", 0));
    let n = pairs.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fte).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::EmptyDataset("split leaves no training samples".to_string()));
    }

    let mut slots: Vec<Option<ImagePair>> = pairs.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<ImagePair>>, idxs: &[usize]| -> Vec<ImagePair> {
        idxs.iter().map(|&i| slots[i].take().expect("unique index")).collect()
    };
    let train = take(&mut slots, &order[..n_train]);
    let val = take(&mut slots, &order[n_train..n_train + n_val]);
    let test = take(&mut slots, &order[n_train + n_val..]);

    let manifest = SplitManifest {
        seed,
        patch_size,
        train: train.iter().map(|p| p.source_id.clone()).collect(),
        val: val.iter().map(|p| p.source_id.clone()).collect(),
        test: test.iter().map(|p| p.source_id.clone()).collect(),
        skipped: skipped.iter().map(|(p, _)| p.display().to_string()).collect(),
    };

    Ok(DatasetBundle {
        train,
        val,
        test,
        skipped,
        manifest,
    })
}

fn load_patch(path: &Path, patch_size: usize, seed: u64, index: u64) -> Result<ImagePair> {
    let img = load_image(path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < patch_size || w < patch_size {
        return Err(Error::range(
            "image size",
            format!("{h}x{w} smaller than patch {patch_size}"),
        ));
    }
    let mut rng = crate::rng::stream_rng(seed, "crop", index);
    let oy = rng.random_range(0..=(h - patch_size) / SCALE) * SCALE;
    let ox = rng.random_range(0..=(w - patch_size) / SCALE) * SCALE;
    let (c, hw) = (img.shape()[0], h * w);
    let src = img.as_slice().unwrap();
    let mut out = vec![0.0; c * patch_size * patch_size];
    for ci in 0..c {
        for y in 0..patch_size {
            let srow = ci * hw + (oy + y) * w + ox;
            let drow = (ci * patch_size + y) * patch_size;
            out[drow..drow + patch_size].copy_from_slice(&src[srow..srow + patch_size]);
        }
    }
    let hr = ArrayD::from_shape_vec(IxDyn(&[c, patch_size, patch_size]), out).unwrap();
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string());
    ImagePair::from_hr(hr, id)
}

pub fn write_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------
// Procedural desk-scale corpus
// ---------------------------------------------------------------------

/// Procedurally generated HR images with known high-frequency content:
/// linear gradients, checkerboards, Gaussian blobs, and band-limited
/// noise, cycled in that order. Deterministic under `seed`.
pub fn synth_corpus(n: usize, hr_size: usize, seed: u64) -> Result<Vec<ImagePair>> {
    if n == 0 {
        return Err(Error::range("corpus size", "need at least one image".to_string()));
    }
    if hr_size == 0 || hr_size % SCALE != 0 {
        return Err(Error::range(
            "hr_size",
            format!("{hr_size} not divisible by the x{SCALE} scale"),
        ));
    }
    (0..n)
        .map(|i| {
            let mut rng = crate::rng::stream_rng(seed, "synth", i as u64);
            let hr = match i % 4 {
                0 => synth_gradient(hr_size, &mut rng),
                1 => synth_checkerboard(hr_size, &mut rng),
                2 => synth_blobs(hr_size, &mut rng),
                _ => synth_bandlimited(hr_size, &mut rng),
            };
            ImagePair::from_hr(hr, format!("synth_{i:04}"))
        })
        .collect()
}

fn blank(size: usize) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(&[3, size, size]))
}

fn synth_gradient<R: Rng>(size: usize, rng: &mut R) -> ArrayD<f64> {
    let mut img = blank(size);
    let s = size;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
    let (dx, dy) = (theta.cos(), theta.sin());
    let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..0.0));
    let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let px = img.as_slice_mut().unwrap();
    for y in 0..s {
        for x in 0..s {
            let t = ((x as f64 * dx + y as f64 * dy) / (s as f64 * (dx + dy).max(1e-9))).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c * s * s + y * s + x] = lo[c] + t * (hi[c] - lo[c]);
            }
        }
    }
    img
}

fn synth_checkerboard<R: Rng>(size: usize, rng: &mut R) -> ArrayD<f64> {
    let mut img = blank(size);
    let s = size;
    let cell = *[2usize, 4, 8].choose(rng).unwrap();
    let phase = rng.random_range(0..cell);
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..-0.2));
    let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
    let px = img.as_slice_mut().unwrap();
    for y in 0..s {
        for x in 0..s {
            let on = ((x + phase) / cell + (y + phase) / cell) % 2 == 0;
            let src = if on { &a } else { &b };
            for c in 0..3 {
                px[c * s * s + y * s + x] = src[c];
            }
        }
    }
    img
}

fn synth_blobs<R: Rng>(size: usize, rng: &mut R) -> ArrayD<f64> {
    let mut img = blank(size);
    let s = size;
    let bg: f64 = rng.random_range(-0.5..0.0);
    img.fill(bg);
    let count = rng.random_range(3..=8);
    let px = img.as_slice_mut().unwrap();
    for _ in 0..count {
        let cx = rng.random_range(0.0..s as f64);
        let cy = rng.random_range(0.0..s as f64);
        let sigma = rng.random_range(1.0..s as f64 / 4.0);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    px[c * s * s + y * s + x] += amp[c] * g;
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    img
}

fn synth_bandlimited<R: Rng>(size: usize, rng: &mut R) -> ArrayD<f64> {
    let mut img = blank(size);
    let s = size;
    let waves = rng.random_range(3..=6);
    let params: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..waves)
        .map(|_| {
            (
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.4),
                std::array::from_fn(|_| rng.random_range(0.3..1.0)),
            )
        })
        .collect();
    let px = img.as_slice_mut().unwrap();
    for y in 0..s {
        for x in 0..s {
            for &(fx, fy, phase, amp, ref tint) in &params {
                let v = amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s as f64 + phase).sin();
                for c in 0..3 {
                    px[c * s * s + y * s + x] += v * tint[c];
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    img
}

/// Writes a corpus as `hr/NNNN.png` + `lr/NNNN.png` with a manifest
/// (loaders re-derive LR from HR; the LR files are for inspection).
pub fn write_corpus(dir: &Path, pairs: &[ImagePair], seed: u64) -> Result<()> {
    let hr_dir = dir.join("hr");
    let lr_dir = dir.join("lr");
    std::fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
    std::fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
    for pair in pairs {
        save_image(&hr_dir.join(format!("{}.png", pair.source_id)), &pair.hr)?;
        save_image(&lr_dir.join(format!("{}.png", pair.source_id)), &pair.lr)?;
    }
    let manifest = SplitManifest {
        seed,
        patch_size: pairs[0].hr.shape()[1],
        train: pairs.iter().map(|p| p.source_id.clone()).collect(),
        val: vec![],
        test: vec![],
        skipped: vec![],
    };
    write_manifest(&dir.join("manifest.json"), &manifest)
}

#[cfg(test)]
mod tests;
