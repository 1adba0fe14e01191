//! Binary raster masks (whole-branch, visible-branch, occluder regions).

use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

/// Errors from mask construction and IO.
#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions {0}x{1} do not match {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("png error at {path}: {message}")]
    Png { path: String, message: String },
}

/// A binary raster, row-major, `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// One row of the mask.
    pub fn row(&self, y: usize) -> &[bool] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Pixelwise `self ∧ ¬other`.
    pub fn and_not(&self, other: &MaskImage) -> Result<MaskImage, MaskError> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(MaskImage {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Pixelwise union in place.
    pub fn or_assign(&mut self, other: &MaskImage) -> Result<(), MaskError> {
        self.check_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a || b;
        }
        Ok(())
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn subset_of(&self, other: &MaskImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Transpose (x↔y); used for horizontally scanned scenes.
    pub fn transposed(&self) -> MaskImage {
        MaskImage::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    fn check_dims(&self, other: &MaskImage) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Write as a 1-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), MaskError> {
        let io_err = |e: std::io::Error| MaskError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let w = BufWriter::new(file);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| MaskError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        // Pack bits MSB-first, rows padded to whole bytes.
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&packed).map_err(|e| MaskError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Read a grayscale PNG written by [`MaskImage::save_png`]; any nonzero
    /// sample is foreground.
    pub fn load_png(path: &Path) -> Result<MaskImage, MaskError> {
        let io_err = |e: std::io::Error| MaskError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let png_err = |m: String| MaskError::Png {
            path: path.display().to_string(),
            message: m,
        };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| png_err(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale {
            return Err(png_err(format!(
                "expected grayscale mask, got {:?}",
                info.color_type
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut m = MaskImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                m.set(x, y, buf[y * info.line_size + x] != 0);
            }
        }
        Ok(m)
    }
}
