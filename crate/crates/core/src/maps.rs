//! Float RGB images and the UV positional map triple emitted by generators.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major `height x width x 3` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * 3
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = self.index(row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = self.index(row, col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 8-bit RGB bytes after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::data("image buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::from_data(w as usize, h as usize, data)
    }

    /// Hex SHA-256 over the dimensions and the 8-bit quantized pixels.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update(self.to_rgb8());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Aligned shape / normal / texture maps sharing one UV grid.
///
/// `shape` stores object-space positions, `normal` stores (not necessarily
/// unit) normals and `texture` linear RGB. Texture values are only clamped at
/// export time.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMapSet {
    pub shape: Image,
    pub normal: Image,
    pub texture: Image,
}

impl UvMapSet {
    pub fn new(shape: Image, normal: Image, texture: Image) -> Result<Self> {
        if !shape.same_shape(&normal) || !shape.same_shape(&texture) {
            return Err(Error::invalid("shape, normal and texture maps must share dimensions"));
        }
        Ok(Self {
            shape,
            normal,
            texture,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let z = Image::filled(width, height, 0.0);
        Self {
            shape: z.clone(),
            normal: z.clone(),
            texture: z,
        }
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn is_finite(&self) -> bool {
        self.shape.is_finite() && self.normal.is_finite() && self.texture.is_finite()
    }

    /// Maps in `[shape, normal, texture]` order.
    pub fn maps(&self) -> [&Image; 3] {
        [&self.shape, &self.normal, &self.texture]
    }
}
