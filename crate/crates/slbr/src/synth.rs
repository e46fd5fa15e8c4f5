//! Watermark compositing and dataset generation.
//!
//! A watermark asset (colors + per-pixel opacity template) is scaled,
//! rotated, and placed on a background; the effective opacity is the
//! asset template times a scalar transparency drawn from a configured
//! range. The watermarked image is the per-pixel convex combination
//! `J = alpha * W + (1 - alpha) * I`, which is exactly invertible inside
//! the mask given `(J, W, alpha)`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_data::{Image, Mask};

/// Effective opacity at or below this value is treated as watermark-free:
/// the alpha map is zeroed there and the binary mask excludes it, so
/// invisible resampling fringe never counts as watermark ground truth.
pub const MASK_THRESHOLD: f64 = 0.01;

/// Watermark artwork: colors plus a soft opacity template.
#[derive(Debug, Clone)]
pub struct WatermarkAsset {
    rgb: Array3<f64>,
    opacity: Array2<f64>,
}

impl WatermarkAsset {
    /// Panics unless dims are at least 4x4, colors/opacity are in
    /// `[0,1]`, and the template is somewhere positive.
    pub fn new(rgb: Array3<f64>, opacity: Array2<f64>) -> Self {
        assert_eq!(rgb.shape()[0], 3, "asset rgb must have 3 channels");
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        assert!(h >= 4 && w >= 4, "asset must be at least 4x4");
        assert_eq!(opacity.shape(), &[h, w], "opacity template dims");
        assert!(
            rgb.iter().chain(opacity.iter()).all(|v| (0.0..=1.0).contains(v)),
            "asset values outside [0,1]"
        );
        assert!(
            opacity.iter().any(|v| *v > 0.0),
            "opacity template all zero"
        );
        WatermarkAsset { rgb, opacity }
    }

    pub fn h(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn rgb(&self) -> &Array3<f64> {
        &self.rgb
    }

    pub fn opacity(&self) -> &Array2<f64> {
        &self.opacity
    }

    /// Loads an RGBA PNG; the alpha channel becomes the opacity template.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::ImageDecode {
                path: path.to_path_buf(),
                source,
            })?
            .into_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if h < 4 || w < 4 {
            return Err(Error::InvalidInput(format!(
                "asset {} is {h}x{w}, need at least 4x4",
                path.display()
            )));
        }
        let rgb = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            f64::from(img.get_pixel(j as u32, i as u32).0[c]) / 255.0
        });
        let opacity = Array2::from_shape_fn((h, w), |(i, j)| {
            f64::from(img.get_pixel(j as u32, i as u32).0[3]) / 255.0
        });
        if opacity.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidInput(format!(
                "asset {} has an all-zero alpha channel",
                path.display()
            )));
        }
        Ok(WatermarkAsset::new(rgb, opacity))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.h(), self.w());
        let mut raw = Vec::with_capacity(h * w * 4);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    raw.push((self.rgb[[c, i, j]] * 255.0).round() as u8);
                }
                raw.push((self.opacity[[i, j]] * 255.0).round() as u8);
            }
        }
        let buf = image::RgbaImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer sized to dimensions");
        buf.save(path).map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Placement and opacity parameters for one composite.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendSpec {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Canvas (row, col) of the placed footprint's top-left corner. May
    /// be negative for partially off-canvas placements.
    pub position: (i64, i64),
    pub global_alpha: f64,
    pub seed: u64,
}

/// One training/evaluation unit: the watermarked image, its clean
/// background, the binary mask, the rendered watermark layer, and the
/// effective per-pixel opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub watermarked: Image,
    pub background: Image,
    pub mask: Mask,
    pub watermark_layer: Image,
    pub alpha: Mask,
}

/// Spatial extent of the asset after scale and rotation, before ceiling
/// to whole pixels.
fn transformed_extent(h: usize, w: usize, scale: f64, rotation_deg: f64) -> (f64, f64) {
    let theta = rotation_deg.to_radians();
    let (sin, cos) = (theta.sin().abs(), theta.cos().abs());
    let (hh, ww) = (h as f64 * scale, w as f64 * scale);
    (hh * cos + ww * sin, hh * sin + ww * cos)
}

/// Footprint in whole pixels of the placed watermark.
pub fn footprint_dims(asset: &WatermarkAsset, scale: f64, rotation_deg: f64) -> (usize, usize) {
    let (er, ec) = transformed_extent(asset.h(), asset.w(), scale, rotation_deg);
    (er.ceil() as usize, ec.ceil() as usize)
}

/// Renders the asset under `spec` onto an all-zero canvas, returning the
/// watermark color layer, the effective alpha map, and the binary mask.
pub fn render_placement(
    asset: &WatermarkAsset,
    spec: &BlendSpec,
    canvas_h: usize,
    canvas_w: usize,
) -> Result<(Image, Mask, Mask)> {
    assert!(canvas_h >= 8 && canvas_w >= 8, "canvas dims must be >= 8");
    assert!(spec.scale > 0.0, "scale must be positive");
    assert!(
        (0.0..360.0).contains(&spec.rotation_deg),
        "rotation must be in [0,360)"
    );

    let (er, ec) = transformed_extent(asset.h(), asset.w(), spec.scale, spec.rotation_deg);
    if er < 1.0 || ec < 1.0 {
        return Err(Error::InvalidInput(format!(
            "scale {} shrinks the watermark below one pixel",
            spec.scale
        )));
    }
    let (fh, fw) = (er.ceil() as i64, ec.ceil() as i64);
    let (row, col) = spec.position;
    if row >= canvas_h as i64 || col >= canvas_w as i64 || row + fh <= 0 || col + fw <= 0 {
        return Err(Error::InvalidInput(format!(
            "placement at ({row},{col}) with footprint {fh}x{fw} lies outside the {canvas_h}x{canvas_w} canvas"
        )));
    }

    // Inverse map: canvas pixel center -> footprint-local -> unrotate,
    // unscale about the asset center -> asset coordinates.
    let theta = spec.rotation_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    let ctr_f = (fh as f64 / 2.0, fw as f64 / 2.0);
    let ctr_a = (asset.h() as f64 / 2.0, asset.w() as f64 / 2.0);

    let mut w_layer = Array3::<f64>::zeros((3, canvas_h, canvas_w));
    let mut alpha = Array2::<f64>::zeros((canvas_h, canvas_w));
    let mut mask = Array2::<f64>::zeros((canvas_h, canvas_w));

    let y0 = row.max(0) as usize;
    let y1 = ((row + fh).min(canvas_h as i64)) as usize;
    let x0 = col.max(0) as usize;
    let x1 = ((col + fw).min(canvas_w as i64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let pr = y as f64 + 0.5 - row as f64 - ctr_f.0;
            let pc = x as f64 + 0.5 - col as f64 - ctr_f.1;
            // Rotation by -theta composed with 1/scale.
            let qr = (cos * pr + sin * pc) / spec.scale + ctr_a.0;
            let qc = (-sin * pr + cos * pc) / spec.scale + ctr_a.1;
            let op = sample_bilinear(&asset.opacity, qr, qc);
            let a = spec.global_alpha * op;
            if a > MASK_THRESHOLD {
                alpha[[y, x]] = a;
                mask[[y, x]] = 1.0;
                for c in 0..3 {
                    w_layer[[c, y, x]] = sample_bilinear_chan(&asset.rgb, c, qr, qc);
                }
            }
        }
    }
    Ok((Image::new(w_layer), Mask::new(alpha), Mask::new(mask)))
}

/// Bilinear point sample over pixel centers with zero padding outside.
fn sample_bilinear(grid: &Array2<f64>, qr: f64, qc: f64) -> f64 {
    let (h, w) = (grid.shape()[0] as isize, grid.shape()[1] as isize);
    let u = qr - 0.5;
    let v = qc - 0.5;
    let (i0, j0) = (u.floor() as isize, v.floor() as isize);
    let (fu, fv) = (u - i0 as f64, v - j0 as f64);
    let mut acc = 0.0;
    for (di, wi) in [(0, 1.0 - fu), (1, fu)] {
        for (dj, wj) in [(0, 1.0 - fv), (1, fv)] {
            let (i, j) = (i0 + di, j0 + dj);
            if i >= 0 && i < h && j >= 0 && j < w {
                acc += wi * wj * grid[[i as usize, j as usize]];
            }
        }
    }
    acc
}

fn sample_bilinear_chan(grid: &Array3<f64>, c: usize, qr: f64, qc: f64) -> f64 {
    let (h, w) = (grid.shape()[1] as isize, grid.shape()[2] as isize);
    let u = qr - 0.5;
    let v = qc - 0.5;
    let (i0, j0) = (u.floor() as isize, v.floor() as isize);
    let (fu, fv) = (u - i0 as f64, v - j0 as f64);
    let mut acc = 0.0;
    for (di, wi) in [(0, 1.0 - fu), (1, fu)] {
        for (dj, wj) in [(0, 1.0 - fv), (1, fv)] {
            let (i, j) = (i0 + di, j0 + dj);
            if i >= 0 && i < h && j >= 0 && j < w {
                acc += wi * wj * grid[[c, i as usize, j as usize]];
            }
        }
    }
    acc
}

/// Per-pixel convex combination `alpha * W + (1 - alpha) * I`.
/// Panics on shape mismatch.
pub fn blend(background: &Image, w_layer: &Image, alpha: &Mask) -> Image {
    assert_eq!(
        (background.h(), background.w()),
        (w_layer.h(), w_layer.w()),
        "blend: watermark layer dims differ from background"
    );
    assert_eq!(
        (background.h(), background.w()),
        (alpha.h(), alpha.w()),
        "blend: alpha dims differ from background"
    );
    let (h, w) = (background.h(), background.w());
    Image::from_fn(h, w, |c, i, j| {
        let a = alpha.data()[[i, j]];
        a * w_layer.data()[[c, i, j]] + (1.0 - a) * background.data()[[c, i, j]]
    })
}

/// Composites one sample; the blend identity holds exactly
/// (pre-quantization) by construction.
pub fn make_sample(background: &Image, asset: &WatermarkAsset, spec: &BlendSpec) -> Result<Sample> {
    let (w_layer, alpha, mask) = render_placement(asset, spec, background.h(), background.w())?;
    let watermarked = blend(background, &w_layer, &alpha);
    Ok(Sample {
        watermarked,
        background: background.clone(),
        mask,
        watermark_layer: w_layer,
        alpha,
    })
}

/// Dataset catalogue. `alpha_min`/`alpha_max` record the extremes of the
/// per-sample peak opacities actually drawn; `alphas` lists them all.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub image_size: usize,
    pub alphas: Vec<f64>,
}

const SUBDIRS: [&str; 5] = ["watermarked", "target", "mask", "wm_layer", "alpha"];

fn entry_path(root: &Path, sub: &str, index: usize) -> PathBuf {
    root.join(sub).join(format!("{index:06}.png"))
}

/// Writes `samples` under `root` in the fixed layout
/// `root/{watermarked,target,mask,wm_layer,alpha}/NNNNNN.png` plus
/// `manifest.json`, and returns the manifest.
pub fn write_dataset(samples: &[Sample], root: &Path, seed: u64) -> Result<Manifest> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to write".into()));
    }
    let image_size = samples[0].background.h();
    for sub in SUBDIRS {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    let mut alphas = Vec::with_capacity(samples.len());
    for (idx, s) in samples.iter().enumerate() {
        s.watermarked.save_png(&entry_path(root, "watermarked", idx))?;
        s.background.save_png(&entry_path(root, "target", idx))?;
        s.mask.save_png(&entry_path(root, "mask", idx))?;
        s.watermark_layer.save_png(&entry_path(root, "wm_layer", idx))?;
        s.alpha.save_png(&entry_path(root, "alpha", idx))?;
        let peak = s.alpha.data().iter().cloned().fold(0.0, f64::max);
        alphas.push(peak);
    }
    let manifest = Manifest {
        seed,
        count: samples.len(),
        alpha_min: alphas.iter().cloned().fold(f64::INFINITY, f64::min),
        alpha_max: alphas.iter().cloned().fold(0.0, f64::max),
        image_size,
        alphas,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// Loads a dataset written by [`write_dataset`]. Values are 8-bit
/// quantized, so the blend identity holds to 1/255 rather than exactly.
pub fn read_dataset(root: &Path) -> Result<(Vec<Sample>, Manifest)> {
    let manifest_path = root.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| Error::MissingEntry {
        path: manifest_path.clone(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", manifest_path.display())))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for idx in 0..manifest.count {
        for sub in SUBDIRS {
            let p = entry_path(root, sub, idx);
            if !p.exists() {
                return Err(Error::MissingEntry { path: p });
            }
        }
        samples.push(Sample {
            watermarked: Image::load_png(&entry_path(root, "watermarked", idx))?,
            background: Image::load_png(&entry_path(root, "target", idx))?,
            mask: Mask::load_png(&entry_path(root, "mask", idx))?,
            watermark_layer: Image::load_png(&entry_path(root, "wm_layer", idx))?,
            alpha: Mask::load_png(&entry_path(root, "alpha", idx))?,
        });
    }
    Ok((samples, manifest))
}

/// Independent RNG stream for item `index` of a run seeded with `seed`
/// (SplitMix64 over the pair, so streams don't depend on ordering).
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Procedural smooth background: low-frequency color waves. Deterministic
/// in the RNG state.
pub fn procedural_background(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    let mut coef = [[0.0f64; 4]; 3];
    for row in coef.iter_mut() {
        for c in row.iter_mut() {
            *c = rng.random_range(0.02..0.15);
        }
    }
    let phase: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..6.0)).collect();
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.25..0.75)).collect();
    Image::from_fn(h, w, |c, i, j| {
        let (fi, fj) = (i as f64, j as f64);
        let v = base[c]
            + 0.2 * (coef[c][0] * fi + coef[c][1] * fj + phase[c]).sin()
            + 0.15 * (coef[c][2] * fi - coef[c][3] * fj).cos();
        v.clamp(0.0, 1.0)
    })
}

/// Procedural logo: a few solid-color discs and bars on a transparent
/// template, box-blurred once so edges are soft.
pub fn procedural_asset(rng: &mut impl Rng, h: usize, w: usize) -> WatermarkAsset {
    assert!(h >= 8 && w >= 8, "procedural asset below minimum size");
    let mut opacity = Array2::<f64>::zeros((h, w));
    let mut rgb = Array3::<f64>::zeros((3, h, w));
    let shapes = rng.random_range(2..5usize);
    for _ in 0..shapes {
        let color: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        if rng.random_range(0.0..1.0) < 0.5 {
            let r = rng.random_range(0.12..0.3) * h.min(w) as f64;
            for i in 0..h {
                for j in 0..w {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    if d2 <= r * r {
                        opacity[[i, j]] = 1.0;
                        for c in 0..3 {
                            rgb[[c, i, j]] = color[c];
                        }
                    }
                }
            }
        } else {
            let bh = rng.random_range(0.08..0.2) * h as f64;
            let bw = rng.random_range(0.3..0.7) * w as f64;
            for i in 0..h {
                for j in 0..w {
                    if (i as f64 - cy).abs() <= bh && (j as f64 - cx).abs() <= bw {
                        opacity[[i, j]] = 1.0;
                        for c in 0..3 {
                            rgb[[c, i, j]] = color[c];
                        }
                    }
                }
            }
        }
    }
    // 3x3 box blur softens the silhouette; interiors stay exactly 1.
    let blurred = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                    acc += opacity[[y as usize, x as usize]];
                }
            }
        }
        acc / 9.0
    });
    let blurred = if blurred.iter().any(|v| *v > 0.0) {
        blurred
    } else {
        opacity.clone()
    };
    WatermarkAsset::new(rgb, blurred)
}

/// Draws a placement spec that keeps the footprint fully on a
/// `canvas`-sized image, with opacity in `alpha_range`.
pub fn random_spec(
    rng: &mut impl Rng,
    asset: &WatermarkAsset,
    canvas: usize,
    alpha_range: (f64, f64),
    seed: u64,
) -> BlendSpec {
    assert!(alpha_range.0 <= alpha_range.1, "alpha range inverted");
    // Scale so the footprint fits with margin even when rotated.
    let diag = ((asset.h().pow(2) + asset.w().pow(2)) as f64).sqrt();
    let max_scale = (canvas as f64 * 0.8 / diag).min(2.0);
    let min_scale = (canvas as f64 * 0.3 / diag).min(max_scale * 0.6);
    let scale = rng.random_range(min_scale..=max_scale);
    let rotation_deg = rng.random_range(0.0..360.0);
    let (er, ec) = transformed_extent(asset.h(), asset.w(), scale, rotation_deg);
    let (fh, fw) = (er.ceil() as i64, ec.ceil() as i64);
    let row = rng.random_range(0..=(canvas as i64 - fh).max(0));
    let col = rng.random_range(0..=(canvas as i64 - fw).max(0));
    let global_alpha = if alpha_range.0 == alpha_range.1 {
        alpha_range.0
    } else {
        rng.random_range(alpha_range.0..alpha_range.1)
    };
    BlendSpec {
        scale,
        rotation_deg,
        position: (row, col),
        global_alpha,
        seed,
    }
}

/// Generates `count` fully procedural samples (backgrounds and logos
/// drawn from per-index RNG streams of `seed`).
pub fn generate_dataset(
    count: usize,
    image_size: usize,
    alpha_range: (f64, f64),
    seed: u64,
) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let bg = procedural_background(&mut rng, image_size, image_size);
            let asset_side = (image_size / 3).max(8);
            let asset = procedural_asset(&mut rng, asset_side, asset_side);
            let spec = random_spec(&mut rng, &asset, image_size, alpha_range, seed);
            make_sample(&bg, &asset, &spec).expect("in-canvas spec is always valid")
        })
        .collect()
}
