//! In-memory image and mask types plus PNG round-tripping.
//!
//! Images are planar RGB `[3, h, w]` with every value in `[0, 1]`;
//! masks and alpha maps are `[h, w]` in `[0, 1]`. Files are 8-bit PNG,
//! so one round trip quantizes each value to the nearest 1/255 step.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Planar RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

/// Single-channel map, values in `[0, 1]`. Used both for binary masks
/// and for continuous alpha maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Array2<f64>,
}

fn check_unit_range(values: impl Iterator<Item = f64>, what: &str) {
    for v in values {
        assert!(
            (0.0..=1.0).contains(&v) && v.is_finite(),
            "{what} value {v} outside [0,1]"
        );
    }
}

impl Image {
    /// Wraps `[3, h, w]` data. Panics when the shape or range contract
    /// is violated.
    pub fn new(data: Array3<f64>) -> Self {
        assert_eq!(data.shape()[0], 3, "image must have 3 channels");
        assert!(
            data.shape()[1] >= 8 && data.shape()[2] >= 8,
            "image dims must be at least 8x8"
        );
        check_unit_range(data.iter().copied(), "image");
        Image { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image::new(Array3::zeros((3, h, w)))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Image::new(Array3::from_shape_fn((3, h, w), |(c, i, j)| f(c, i, j)))
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Quantizes to 8-bit RGB rows (interleaved, row-major).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.h(), self.w());
        let mut out = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    out.push(quantize(self.data[[c, i, j]]));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.w() as u32, self.h() as u32, self.to_rgb8())
            .expect("buffer sized to dimensions");
        buf.save(path).map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::ImageDecode {
                path: path.to_path_buf(),
                source,
            })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            f64::from(img.get_pixel(j as u32, i as u32).0[c]) / 255.0
        });
        Ok(Image { data })
    }
}

impl Mask {
    pub fn new(data: Array2<f64>) -> Self {
        check_unit_range(data.iter().copied(), "mask");
        Mask { data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            data: Array2::zeros((h, w)),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Mask::new(Array2::from_shape_fn((h, w), |(i, j)| f(i, j)))
    }

    pub fn h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Fraction of strictly positive pixels.
    pub fn coverage(&self) -> f64 {
        let pos = self.data.iter().filter(|v| **v > 0.0).count();
        pos as f64 / self.data.len() as f64
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.w() as u32, self.h() as u32, self.to_gray8())
            .expect("buffer sized to dimensions");
        buf.save(path).map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::ImageDecode {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = Array2::from_shape_fn((h, w), |(i, j)| {
            f64::from(img.get_pixel(j as u32, i as u32).0[0]) / 255.0
        });
        Ok(Mask { data })
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Downsamples a mask by an integer factor using max pooling, so any
/// covered pixel keeps its block covered at the lower resolution.
pub fn downsample_mask_max(mask: &Mask, factor: usize) -> Mask {
    assert!(factor >= 1, "factor must be >= 1");
    if factor == 1 {
        return mask.clone();
    }
    let (h, w) = (mask.h(), mask.w());
    assert!(
        h % factor == 0 && w % factor == 0,
        "mask dims {h}x{w} not divisible by {factor}"
    );
    Mask::from_fn(h / factor, w / factor, |i, j| {
        let mut best = 0.0f64;
        for di in 0..factor {
            for dj in 0..factor {
                best = best.max(mask.data[[i * factor + di, j * factor + dj]]);
            }
        }
        best
    })
}
