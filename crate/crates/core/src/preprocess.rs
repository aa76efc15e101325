//! Deterministic image standardisation: intensity rescale, centred square
//! crop, bilinear resize and conversion to three-channel model input.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{s, Array2, Array3};
use thiserror::Error;

/// Side length of the reproduction-profile model input.
pub const MODEL_INPUT_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("image has zero height or width")]
    EmptyImage,
    #[error("image contains a non-finite intensity")]
    NonFinite,
    #[error("expected a square image, got {height}x{width}")]
    NonSquareInput { height: usize, width: usize },
    #[error("expected a {expected}x{expected} image, got {height}x{width}")]
    WrongSize {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("intensity {0} outside [0, 255]")]
    OutOfRange(f32),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Single-channel image, row-major (`pixels[[y, x]]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage {
    pixels: Array2<f32>,
}

impl GrayscaleImage {
    pub fn new(pixels: Array2<f32>) -> Result<Self, PreprocessError> {
        if pixels.is_empty() {
            return Err(PreprocessError::EmptyImage);
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::NonFinite);
        }
        Ok(GrayscaleImage { pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self, PreprocessError> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, PreprocessError> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let px = Array2::from_shape_vec((h, w), flat).map_err(|_| PreprocessError::EmptyImage)?;
        Self::new(px)
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[[y, x]]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Bilinear sample at fractional coordinates; `None` outside the image.
    pub(crate) fn sample_bilinear(&self, y: f64, x: f64) -> Option<f64> {
        let (h, w) = (self.height() as f64, self.width() as f64);
        if !(0.0..=h - 1.0).contains(&y) || !(0.0..=w - 1.0).contains(&x) {
            return None;
        }
        Some(self.sample_clamped(y, x))
    }

    /// Bilinear sample with coordinates clamped to the image.
    pub(crate) fn sample_clamped(&self, y: f64, x: f64) -> f64 {
        let (h, w) = (self.height(), self.width());
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let p = |yy, xx| f64::from(self.pixels[[yy, xx]]);
        let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
        let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
        top + fy * (bottom - top)
    }
}

/// Three identical channels of a square image, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pixels: Array3<f32>,
}

impl ModelInput {
    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Raw constructor for callers that already hold a `[3, S, S]` array.
    pub fn from_array(pixels: Array3<f32>) -> Result<Self, PreprocessError> {
        let sh = pixels.shape();
        if sh[0] != 3 || sh[1] != sh[2] || sh[1] == 0 {
            return Err(PreprocessError::WrongSize {
                expected: sh[1].max(1),
                height: sh[1],
                width: sh[2],
            });
        }
        if let Some(&v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PreprocessError::OutOfRange(v));
        }
        Ok(ModelInput { pixels })
    }
}

/// Min-max rescale to [0, 255]. A constant image maps to all zeros.
pub fn rescale_intensity(img: &GrayscaleImage) -> GrayscaleImage {
    let (lo, hi) = img.min_max();
    if lo == 0.0 && hi == 255.0 {
        return img.clone();
    }
    if lo == hi {
        return GrayscaleImage {
            pixels: Array2::zeros(img.pixels.raw_dim()),
        };
    }
    let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    let pixels = img
        .pixels
        .mapv(|v| ((f64::from(v) - lo) * 255.0 / span).clamp(0.0, 255.0) as f32);
    GrayscaleImage { pixels }
}

/// Centred `S x S` crop with `S = min(height, width)`. An odd remainder
/// leaves the extra row or column on the high-index side.
pub fn center_square_crop(img: &GrayscaleImage) -> GrayscaleImage {
    let (h, w) = (img.height(), img.width());
    let side = h.min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    GrayscaleImage {
        pixels: img.pixels.slice(s![y0..y0 + side, x0..x0 + side]).to_owned(),
    }
}

/// Bilinear resize of a square image to `size x size` using pixel-centre
/// alignment.
pub fn resize_square(img: &GrayscaleImage, size: usize) -> Result<GrayscaleImage, PreprocessError> {
    let (h, w) = (img.height(), img.width());
    if h != w {
        return Err(PreprocessError::NonSquareInput { height: h, width: w });
    }
    if size == 0 {
        return Err(PreprocessError::EmptyImage);
    }
    if size == h {
        return Ok(img.clone());
    }
    let scale = h as f64 / size as f64;
    let coord = |i: usize| (i as f64 + 0.5) * scale - 0.5;
    let pixels = Array2::from_shape_fn((size, size), |(y, x)| img.sample_clamped(coord(y), coord(x)) as f32);
    Ok(GrayscaleImage { pixels })
}

pub fn resize_to_512(img: &GrayscaleImage) -> Result<GrayscaleImage, PreprocessError> {
    resize_square(img, MODEL_INPUT_SIZE)
}

/// Scales a `size x size` image in [0, 255] to [0, 1] and replicates it into
/// three channels.
pub fn to_model_input_sized(img: &GrayscaleImage, size: usize) -> Result<ModelInput, PreprocessError> {
    let (h, w) = (img.height(), img.width());
    if h != size || w != size {
        return Err(PreprocessError::WrongSize {
            expected: size,
            height: h,
            width: w,
        });
    }
    if let Some(&v) = img.pixels.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(PreprocessError::OutOfRange(v));
    }
    let scaled = img.pixels.mapv(|v| v / 255.0);
    let mut pixels = Array3::zeros((3, size, size));
    for mut ch in pixels.outer_iter_mut() {
        ch.assign(&scaled);
    }
    Ok(ModelInput { pixels })
}

pub fn to_model_input(img: &GrayscaleImage) -> Result<ModelInput, PreprocessError> {
    to_model_input_sized(img, MODEL_INPUT_SIZE)
}

/// rescale -> crop -> resize to `size`.
pub fn standardize(img: &GrayscaleImage, size: usize) -> Result<GrayscaleImage, PreprocessError> {
    resize_square(&center_square_crop(&rescale_intensity(img)), size)
}

/// Decodes a PNG. 8-bit grayscale is read as-is, 16-bit is rescaled to
/// 0..=255, colour images are converted to luma.
pub fn decode_png(bytes: &[u8], path: &Path) -> Result<GrayscaleImage, PreprocessError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        PreprocessError::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f32> = match decoded {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| f32::from(v) / 257.0).collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f32::from).collect(),
        other => other.to_luma8().into_raw().into_iter().map(f32::from).collect(),
    };
    let px = Array2::from_shape_vec((h, w), data).map_err(|_| PreprocessError::EmptyImage)?;
    GrayscaleImage::new(px)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<GrayscaleImage, PreprocessError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PreprocessError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_png(&bytes, path)
}

/// Encodes as 8-bit grayscale PNG, rounding and clamping to 0..=255.
pub fn encode_png(img: &GrayscaleImage) -> Vec<u8> {
    let raw: Vec<u8> = img.pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory png encode");
    out.into_inner()
}

pub fn save_png(img: &GrayscaleImage, path: impl AsRef<Path>) -> Result<(), PreprocessError> {
    let path = path.as_ref();
    fs::write(path, encode_png(img)).map_err(|e| PreprocessError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
