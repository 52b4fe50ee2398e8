//! Image buffers and the on-disk formats used across the pipeline.
//!
//! Color is 8-bit RGB, depth is f32 meters with 0 = invalid (stored on disk
//! as 16-bit PNG in millimeters), labels are 8-bit PNG, and flow fields use a
//! small binary format with a 16-byte header.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
    #[error("bad flow file: {0}")]
    BadFlowFile(String),
    #[error("too many labels for 8-bit export: {0}")]
    TooManyLabels(usize),
}

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone + Default> Grid<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let i = self.idx(x, y);
        &mut self.data[i]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub type GrayImage = Grid<f32>;
pub type DepthImage = Grid<f32>;
pub type Mask = Grid<bool>;
pub type LabelImage = Grid<u32>;

impl GrayImage {
    /// Bilinear sample with clamped coordinates.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let xf = x.clamp(0.0, (self.width - 1) as f32);
        let yf = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = xf - x0 as f32;
        let b = yf - y0 as f32;
        let i00 = self.data[y0 * self.width + x0];
        let i10 = self.data[y0 * self.width + x1];
        let i01 = self.data[y1 * self.width + x0];
        let i11 = self.data[y1 * self.width + x1];
        (1.0 - a) * (1.0 - b) * i00 + a * (1.0 - b) * i10 + (1.0 - a) * b * i01 + a * b * i11
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|&(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|&(&a, &b)| a || b)
            .count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            return 0.0;
        }
        self.intersection_count(other) as f64 / union as f64
    }
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma conversion to [0,1] floats.
    pub fn to_gray(&self) -> GrayImage {
        let mut g = GrayImage::new(self.width, self.height);
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            g.data[i] =
                (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32) / 255.0;
        }
        g
    }
}

/// A registered color + depth pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbdFrame {
    pub rgb: ColorImage,
    pub depth: DepthImage,
    pub index: usize,
}

impl RgbdFrame {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Dense backward optical flow from frame t to frame t-1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Grid<f32>,
    pub v: Grid<f32>,
    pub valid: Mask,
}

impl FlowField {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            u: Grid::new(width, height),
            v: Grid::new(width, height),
            valid: Mask::new(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width
    }

    pub fn height(&self) -> usize {
        self.u.height
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

pub fn save_color_png(img: &ColorImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("buffer size matches dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn load_color_png(path: impl AsRef<Path>) -> Result<ColorImage, ImageError> {
    let img = image::open(path.as_ref())?.into_rgb8();
    Ok(ColorImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Depth saved as 16-bit grayscale PNG in millimeters (0 = invalid).
pub fn save_depth_png(depth: &DepthImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mm: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (d * 1000.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(depth.width as u32, depth.height as u32, mm)
            .expect("buffer size matches dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn load_depth_png(path: impl AsRef<Path>) -> Result<DepthImage, ImageError> {
    let img = image::open(path.as_ref())?.into_luma16();
    let data = img.iter().map(|&mm| mm as f32 / 1000.0).collect();
    Ok(DepthImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    })
}

pub fn save_label_png(labels: &LabelImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let max = labels.data.iter().copied().max().unwrap_or(0);
    if max > u8::MAX as u32 {
        return Err(ImageError::TooManyLabels(max as usize));
    }
    let bytes: Vec<u8> = labels.data.iter().map(|&l| l as u8).collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(labels.width as u32, labels.height as u32, bytes)
            .expect("buffer size matches dimensions");
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn load_label_png(path: impl AsRef<Path>) -> Result<LabelImage, ImageError> {
    let img = image::open(path.as_ref())?.into_luma8();
    let data = img.iter().map(|&b| b as u32).collect();
    Ok(LabelImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    })
}

// ---------------------------------------------------------------------------
// Flow file format: 16-byte header (8-byte magic, u32 width, u32 height),
// then row-major interleaved (u, v) as little-endian f32. Invalid pixels
// are stored as NaN.
// ---------------------------------------------------------------------------

const FLOW_MAGIC: &[u8; 8] = b"ODFLOW01";

pub fn save_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    file.write_all(FLOW_MAGIC)?;
    file.write_all(&(flow.width() as u32).to_le_bytes())?;
    file.write_all(&(flow.height() as u32).to_le_bytes())?;
    for i in 0..flow.u.data.len() {
        let (u, v) = if flow.valid.data[i] {
            (flow.u.data[i], flow.v.data[i])
        } else {
            (f32::NAN, f32::NAN)
        };
        file.write_all(&u.to_le_bytes())?;
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField, ImageError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if &header[0..8] != FLOW_MAGIC {
        return Err(ImageError::BadFlowFile("bad magic".into()));
    }
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut flow = FlowField::new(width, height);
    let mut buf = vec![0u8; width * height * 8];
    file.read_exact(&mut buf)?;
    for i in 0..width * height {
        let u = f32::from_le_bytes(buf[i * 8..i * 8 + 4].try_into().unwrap());
        let v = f32::from_le_bytes(buf[i * 8 + 4..i * 8 + 8].try_into().unwrap());
        if u.is_finite() && v.is_finite() {
            flow.u.data[i] = u;
            flow.v.data[i] = v;
            flow.valid.data[i] = true;
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_conversion_range() {
        let mut img = ColorImage::new(4, 2);
        img.set(0, 0, [255, 255, 255]);
        img.set(1, 0, [0, 0, 0]);
        let g = img.to_gray();
        assert!((g.data[0] - 1.0).abs() < 1e-4);
        assert_eq!(g.data[1], 0.0);
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let mut g = GrayImage::new(2, 2);
        g.data = vec![0.0, 1.0, 0.0, 1.0];
        assert!((g.sample_bilinear(0.5, 0.5) - 0.5).abs() < 1e-6);
        // Clamped outside.
        assert!((g.sample_bilinear(-5.0, 0.0) - 0.0).abs() < 1e-6);
    }

    #[test]
    fn depth_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthImage::new(5, 3);
        d.set(0, 0, 1.234);
        d.set(4, 2, 0.002);
        let path = dir.path().join("d.png");
        save_depth_png(&d, &path).unwrap();
        let back = load_depth_png(&path).unwrap();
        assert_eq!(back.width, 5);
        assert!((back.get(0, 0) - 1.234).abs() < 1e-3);
        assert!((back.get(4, 2) - 0.002).abs() < 1e-3);
        assert_eq!(*back.get(1, 1), 0.0);
    }

    #[test]
    fn flow_round_trip_preserves_validity() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FlowField::new(3, 2);
        f.u.set(1, 1, 2.5);
        f.v.set(1, 1, -0.5);
        f.valid.set(1, 1, true);
        let path = dir.path().join("f.flow");
        save_flow(&f, &path).unwrap();
        let back = load_flow(&path).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn label_png_rejects_wide_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = LabelImage::new(2, 2);
        l.set(0, 0, 300);
        assert!(matches!(
            save_label_png(&l, dir.path().join("l.png")),
            Err(ImageError::TooManyLabels(_))
        ));
    }
}
