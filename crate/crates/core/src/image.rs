//! 8-bit grayscale rasters, PNG I/O and bilinear sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("png decode error on {path}: {message}")]
    Decode { path: String, message: String },
    #[error("png encode error on {path}: {message}")]
    Encode { path: String, message: String },
    #[error("unsupported png layout in {0}: expected 8-bit grayscale")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` when
    /// the point lies outside the pixel-center hull of the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        const SLACK: f64 = 1e-9;
        if !(x >= -SLACK && y >= -SLACK && x <= max_x + SLACK && y <= max_y + SLACK) {
            return None;
        }
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx: usize, yy: usize| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Bilinear resize mapping pixel centers of the output onto the input.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        GrayImage::from_fn(width, height, |x, y| {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            quantize(self.sample_bilinear(src_x, src_y).expect("clamped inside"))
        })
    }

    /// Copies the `w x h` rectangle whose top-left pixel is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> GrayImage {
        assert!(x + w <= self.width && y + h <= self.height, "crop out of bounds");
        GrayImage::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy))
    }

    /// Pixels scaled into `[-1, 1]` as network input.
    pub fn to_input(&self) -> Vec<f32> {
        self.data
            .iter()
            .map(|&v| v as f32 * (2.0 / 255.0) - 1.0)
            .collect()
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let total: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs() as u64)
            .sum();
        total as f64 / self.data.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let p = path.display().to_string();
        let file = File::create(path).map_err(|source| ImageError::Io {
            path: p.clone(),
            source,
        })?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Encode {
            path: p.clone(),
            message: e.to_string(),
        })?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| ImageError::Encode {
                path: p,
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<GrayImage, ImageError> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|source| ImageError::Io {
            path: p.clone(),
            source,
        })?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| ImageError::Decode {
            path: p.clone(),
            message: e.to_string(),
        })?;
        let size = reader.output_buffer_size().ok_or_else(|| ImageError::Unsupported(p.clone()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode {
            path: p.clone(),
            message: e.to_string(),
        })?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Unsupported(p));
        }
        buf.truncate(info.buffer_size());
        Ok(GrayImage {
            width: info.width as usize,
            height: info.height as usize,
            data: buf,
        })
    }
}

/// Round-to-nearest into `0..=255`.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
