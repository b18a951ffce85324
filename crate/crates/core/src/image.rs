//! Image and latent containers, bilinear resizing, and PNG/JPEG I/O.

use std::fs;
use std::path::Path;

use crate::error::{LdpError, Result};
use crate::tensor::Tensor;

/// An `H × W × 3` RGB image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(LdpError::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LdpError::NonFinite("image".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Planar `[3, H, W]` view for the networks.
    pub fn to_chw(&self) -> Tensor {
        hwc_to_chw(&self.data, self.height, self.width, 3)
    }

    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3();
        if c != 3 {
            return Err(LdpError::Shape(format!("expected 3 channels, got {c}")));
        }
        Self::new(h, w, chw_to_hwc(t.data(), c, h, w))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> ImageTensor {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut data = vec![0.0; out_h * out_w * 3];
        for oy in 0..out_h {
            let (y0, y1, fy) = bilinear_taps((oy as f64 + 0.5) * sy - 0.5, self.height);
            for ox in 0..out_w {
                let (x0, x1, fx) = bilinear_taps((ox as f64 + 0.5) * sx - 0.5, self.width);
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    data[(oy * out_w + ox) * 3 + c] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        ImageTensor {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// PNG encoding of the 8-bit rendering.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        self.to_rgb8()
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| LdpError::Image(e.to_string()))?;
        Ok(bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| LdpError::Image(format!("{}: {e}", path.display())))
    }
}

/// Source taps and fractional weight for a bilinear sample at continuous
/// pixel coordinate `pos`, clamped to `[0, n-1]`.
pub(crate) fn bilinear_taps(pos: f64, n: usize) -> (usize, usize, f64) {
    let p = pos.clamp(0.0, (n - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

pub(crate) fn hwc_to_chw(data: &[f64], h: usize, w: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                out[(k * h + y) * w + x] = data[(y * w + x) * c + k];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

pub(crate) fn chw_to_hwc(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + k] = data[(k * h + y) * w + x];
            }
        }
    }
    out
}

/// An `h × w × d` feature-space point, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(LdpError::Shape(format!(
                "latent {height}x{width}x{depth} needs {} values, got {}",
                height * width * depth,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LdpError::NonFinite("latent".into()));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            height: shape.height,
            width: shape.width,
            depth: shape.depth,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> LatentShape {
        LatentShape {
            height: self.height,
            width: self.width,
            depth: self.depth,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_chw(&self) -> Tensor {
        hwc_to_chw(&self.data, self.height, self.width, self.depth)
    }

    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let (d, h, w) = t.dims3();
        Self::new(h, w, d, chw_to_hwc(t.data(), d, h, w))
    }
}

/// Spatial size and depth of a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatentShape {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Planar `[d, h, w]` dimensions.
    pub fn chw(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Loads every PNG/JPEG in `dir` in lexicographic filename order, resized to
/// `target_size × target_size`. Undecodable files are skipped with a warning.
pub fn load_image_dir(dir: impl AsRef<Path>, target_size: usize) -> Result<Vec<ImageTensor>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| LdpError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(LdpError::Empty(format!("no PNG or JPEG files in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        match image::open(p) {
            Ok(img) => {
                let img = ImageTensor::from_rgb8(&img.to_rgb8());
                images.push(if img.height() == target_size && img.width() == target_size {
                    img
                } else {
                    img.resize_bilinear(target_size, target_size)
                });
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(LdpError::Image(format!(
            "none of the {} image files in {} could be decoded",
            paths.len(),
            dir.display()
        )));
    }
    Ok(images)
}
