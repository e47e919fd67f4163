//! Raster I/O, bicubic resampling, degradation and quality metrics.

mod io;
mod metrics;
pub mod resize;

use std::path::PathBuf;

use thiserror::Error;

pub use io::{load_image, save_image};
pub use metrics::{mse, psnr, ssim, PSNR_IDENTICAL};
pub use resize::{bicubic_resize, cubic_weight, CUBIC_A};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: cannot read file: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a supported raster image ({detail})")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: unsupported sample layout {layout}; only 8-bit gray/RGB(A) is accepted")]
    UnsupportedBitDepth { path: PathBuf, layout: String },

    #[error("{path}: image data is truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: cannot write image: {detail}")]
    Write { path: PathBuf, detail: String },

    #[error("image shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("image {h}x{w} is smaller than the required {min}x{min}")]
    TooSmall { h: usize, w: usize, min: usize },

    #[error("invalid image buffer: {0}")]
    Buffer(String),
}

/// Interleaved 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height * channels {
            return Err(ImageError::Buffer(format!(
                "{} bytes for {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn to_f32(&self) -> ImageF32 {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = vec![0.0f32; c * h * w];
        for (i, &p) in self.pixels.iter().enumerate() {
            let ch = i % c;
            let px = i / c;
            data[ch * h * w + px] = p as f32 / 255.0;
        }
        ImageF32 { channels: c, height: h, width: w, data }
    }
}

/// Planar `(C,H,W)` image with samples nominally in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != channels * height * width {
            return Err(ImageError::Buffer(format!(
                "{} samples for {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(ImageError::Buffer(format!("non-finite sample {bad}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Clamps to `[0,1]` and rounds half away from zero to bytes.
    pub fn to_u8(&self) -> ImageU8 {
        let (c, h, w) = self.shape();
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for px in 0..h * w {
                let v = self.data[ch * h * w + px].clamp(0.0, 1.0) * 255.0;
                pixels[px * c + ch] = v.round() as u8;
            }
        }
        ImageU8 { width: w, height: h, channels: c, pixels }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> ImageF32 {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        ImageF32 { channels: self.channels, height, width, data }
    }

    pub fn clamped(&self) -> ImageF32 {
        ImageF32 { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    /// `[1,C,H,W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image extents are positive")
    }

    /// Image `index` of an `[N,C,H,W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(ImageError::Buffer(format!("cannot take image {index} of tensor {s:?}")));
        }
        let n = s[1] * s[2] * s[3];
        let data = t.data()[index * n..(index + 1) * n].iter().map(|v| v.as_f64() as f32).collect();
        ImageF32::new(s[1], s[2], s[3], data)
    }
}

/// Stacks equally sized images into `[N,C,H,W]`.
pub fn batch_tensor<T: Real>(images: &[&ImageF32]) -> Result<Tensor<T>, ImageError> {
    let first = images.first().ok_or_else(|| ImageError::Buffer("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(ImageError::ShapeMismatch { left: first.shape(), right: img.shape() });
        }
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new([images.len(), first.channels, first.height, first.width], data)
        .expect("batch extents are positive"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub image_path: PathBuf,
    /// `(top, left)` of the HR crop in the source image.
    pub crop_origin: (usize, usize),
}

/// Aligned low/high resolution pair; `hr` is exactly `scale ×` `lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub lr: ImageF32,
    pub hr: ImageF32,
    pub provenance: Option<Provenance>,
}

/// Center-crops `hr` to multiples of `scale`, then bicubic-downscales.
pub fn degrade(hr: &ImageF32, scale: usize) -> Result<SamplePair, ImageError> {
    if scale == 0 || hr.height < scale || hr.width < scale {
        return Err(ImageError::TooSmall { h: hr.height, w: hr.width, min: scale.max(1) });
    }
    let (h, w) = (hr.height - hr.height % scale, hr.width - hr.width % scale);
    let (top, left) = ((hr.height - h) / 2, (hr.width - w) / 2);
    let cropped = if (h, w) == (hr.height, hr.width) { hr.clone() } else { hr.crop(top, left, h, w) };
    let lr = bicubic_resize(&cropped, h / scale, w / scale);
    Ok(SamplePair { lr, hr: cropped, provenance: None })
}
