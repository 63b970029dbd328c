//! Image, mask and box types plus their on-disk encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image with intensities in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Round every value to the nearest multiple of 1/255, as a PNG round-trip would.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    /// Rec.601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Planar `C×H×W` copy, mapped from `[0,1]` by `v * scale + offset`.
    pub fn to_planar(&self, scale: f32, offset: f32) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] * scale + offset;
            }
        }
        out
    }

    /// Inverse of [`Image::to_planar`]: `(v - offset) / scale`.
    pub fn from_planar(width: usize, height: usize, planar: &[f32], scale: f32, offset: f32) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for {width}x{height}",
                planar.len()
            )));
        }
        let mut img = Self::new(width, height);
        for i in 0..plane {
            for c in 0..3 {
                img.data[i * 3 + c] = (planar[c * plane + i] - offset) / scale;
            }
        }
        Ok(img)
    }

    /// Separable Gaussian blur with edge clamping; radius is `ceil(3σ)`.
    pub fn gaussian_blur(&self, sigma: f32) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        self.convolve_separable(&kernel)
    }

    /// Mean filter over a `(2r+1)²` window with edge clamping.
    pub fn box_blur(&self, radius: usize) -> Image {
        if radius == 0 {
            return self.clone();
        }
        let n = 2 * radius + 1;
        let kernel = vec![1.0 / n as f32; n];
        self.convolve_separable(&kernel)
    }

    fn convolve_separable(&self, kernel: &[f32]) -> Image {
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = Image::new(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - r).clamp(0, w - 1) as usize;
                    let p = self.pixel(sx, y as usize);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                tmp.set_pixel(x as usize, y as usize, acc);
            }
        }
        let mut out = Image::new(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - r).clamp(0, h - 1) as usize;
                    let p = tmp.pixel(x as usize, sy);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                out.set_pixel(x as usize, y as usize, acc);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let (w, h, color, bytes) = read_png(path)?;
        let data: Vec<f32> = match color {
            png::ColorType::Rgb => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .map(|b| b as f32 / 255.0)
                .collect(),
            png::ColorType::Grayscale => bytes
                .iter()
                .flat_map(|&b| [b, b, b])
                .map(|b| b as f32 / 255.0)
                .collect(),
            other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
        };
        Image::from_vec(w, h, data)
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask; `true` marks the lesion / inpainting region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn matches_image(&self, image: &Image) -> bool {
        self.width == image.width() && self.height == image.height()
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if !self.same_shape(other) {
            return Err(Error::Shape("mask union of different shapes".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Grows the mask by `radius` pixels in every direction (square structuring element).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        Mask::from_fn(self.width, self.height, |x, y| {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(self.width - 1));
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(self.height - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| self.get(xx, yy)))
        })
    }

    /// Inclusive pixel bounds `(x_min, y_min, x_max, y_max)`, `None` when empty.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    /// Tight normalized box around the mask, `None` when empty.
    pub fn tight_box(&self, class_id: u32) -> Option<BBox> {
        let (x0, y0, x1, y1) = self.pixel_bounds()?;
        let (w, h) = (self.width as f64, self.height as f64);
        Some(BBox {
            class_id,
            cx: (x0 + x1 + 1) as f64 / 2.0 / w,
            cy: (y0 + y1 + 1) as f64 / 2.0 / h,
            w: (x1 - x0 + 1) as f64 / w,
            h: (y1 - y0 + 1) as f64 / h,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let (w, h, color, bytes) = read_png(path)?;
        let step = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::format(path, format!("unsupported mask color type {other:?}"))),
        };
        let data = bytes.chunks_exact(step).map(|p| p[0] >= 128).collect();
        Mask::from_vec(w, h, data)
    }
}

/// YOLO-style normalized box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Continuous pixel extents `(x0, y0, x1, y1)`.
    pub fn to_pixels(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (w, h) = (width as f64, height as f64);
        (
            (self.cx - self.w / 2.0) * w,
            (self.cy - self.h / 2.0) * h,
            (self.cx + self.w / 2.0) * w,
            (self.cy + self.h / 2.0) * h,
        )
    }

    pub fn to_label_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }

    pub fn parse_label_line(line: &str) -> Option<BBox> {
        let mut it = line.split_whitespace();
        let class_id = it.next()?.parse().ok()?;
        let mut next = || it.next().and_then(|s| s.parse::<f64>().ok());
        let (cx, cy, w, h) = (next()?, next()?, next()?, next()?);
        Some(BBox { class_id, cx, cy, w, h })
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

#[cfg(test)]
mod tests {

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Mask::new(7, 7);
        m.set(3, 3, true);
        let d = m.dilate(1);
        assert_eq!(d.count(), 9);
        assert!(d.get(2, 2) && d.get(4, 4) && !d.get(5, 3));
        assert_eq!(m.dilate(0), m);
        let mut edge = Mask::new(4, 4);
        edge.set(0, 0, true);
        assert_eq!(edge.dilate(2).count(), 9);
    }

    use super::*;

    #[test]
    fn tight_box_of_single_pixel() {
        let mut m = Mask::new(10, 10);
        m.set(3, 4, true);
        let b = m.tight_box(0).unwrap();
        assert!((b.cx - 0.35).abs() < 1e-12);
        assert!((b.cy - 0.45).abs() < 1e-12);
        assert!((b.w - 0.1).abs() < 1e-12);
        let (x0, y0, x1, y1) = b.to_pixels(10, 10);
        assert!((x0 - 3.0).abs() < 1e-9 && (x1 - 4.0).abs() < 1e-9);
        assert!((y0 - 4.0).abs() < 1e-9 && (y1 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn label_line_round_trip() {
        let b = BBox {
            class_id: 0,
            cx: 0.5,
            cy: 0.25,
            w: 0.125,
            h: 0.0625,
        };
        assert_eq!(b.to_label_line(), "0 0.500000 0.250000 0.125000 0.062500");
        assert_eq!(BBox::parse_label_line(&b.to_label_line()), Some(b));
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.137).fract();
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let mut m = Mask::new(5, 4);
        m.set(1, 2, true);
        let mp = dir.path().join("m.png");
        m.save_png(&mp).unwrap();
        assert_eq!(Mask::load_png(&mp).unwrap(), m);
    }

    #[test]
    fn planar_round_trip() {
        let img = Image::filled(3, 2, [0.1, 0.5, 0.9]);
        let p = img.to_planar(2.0, -1.0);
        assert!((p[0] + 0.8).abs() < 1e-6);
        let back = Image::from_planar(3, 2, &p, 2.0, -1.0).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(8, 8, [0.3, 0.3, 0.3]);
        for v in img.gaussian_blur(1.5).data() {
            assert!((v - 0.3).abs() < 1e-5);
        }
    }
}
