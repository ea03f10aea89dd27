//! 8-bit grayscale images and binary PGM (`P5`) files.

use std::path::Path;

use std::io::Write;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "gray image",
                format!("{width}x{height} needs {} bytes, got {}", width * height, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at `(x, y)`, `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let p = |x, y| self.get(x, y) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// `[H, W, 1]` intensities mapped to `[-0.5, 0.5]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64 / 255.0 - 0.5).collect();
        Tensor::new(&[self.height, self.width, 1], data).unwrap()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Image {
            path: path.to_path_buf(),
            detail,
        };
        match bytes.get(..2) {
            Some(b"P5") => {}
            Some(b"P6") | Some(b"P3") => return Err(bad("color images are not supported, convert to 8-bit grayscale PGM".into())),
            _ => return Err(bad("not a binary PGM (P5) file".into())),
        }
        let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| bad(e.to_string()))?;
        let img = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => return Err(bad(format!("unsupported pixel format {:?}, need 8-bit gray", other.color()))),
        };
        let (w, h) = img.dimensions();
        Gray::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.data, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}
