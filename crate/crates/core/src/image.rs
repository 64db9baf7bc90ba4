//! 8-bit raster images, binary masks, boxes and PNG I/O.

use std::io::Write;
use std::path::Path;

use diffcore::{Array, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

pub type Rgb = [u8; 3];

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn from_pixels(r: PixelRect, width: usize, height: usize) -> Self {
        BBox {
            x0: r.x0 as f64 / width as f64,
            y0: r.y0 as f64 / height as f64,
            x1: r.x1 as f64 / width as f64,
            y1: r.y1 as f64 / height as f64,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn within_unit(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_pixels(&self, width: usize, height: usize) -> PixelRect {
        let px = |v: f64, n: usize| ((v * n as f64).round().max(0.0) as usize).min(n);
        PixelRect {
            x0: px(self.x0, width),
            y0: px(self.y0, height),
            x1: px(self.x1, width),
            y1: px(self.y1, height),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, o: &PixelRect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    /// Grown by `m` pixels on every side (saturating at zero; callers clip the far edge).
    pub fn grow(&self, m: usize) -> PixelRect {
        PixelRect { x0: self.x0.saturating_sub(m), y0: self.y0.saturating_sub(m), x1: self.x1 + m, y1: self.y1 + m }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&c);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// `[H, W, 3]` in `[-1, 1]`.
    pub fn to_array<T: Scalar>(&self) -> Array<T> {
        Array::from_fn(&[self.height, self.width, 3], |i| T::of(self.data[i] as f64 / 127.5 - 1.0))
    }

    /// From `[H, W, 3]` values in `[-1, 1]` (clamped, rounded to nearest).
    pub fn from_array<T: Scalar>(a: &Array<T>) -> Result<Self> {
        let s = a.shape();
        if s.len() != 3 || s[2] != 3 {
            return input_err(format!("expected [H, W, 3] image, got {s:?}"));
        }
        let data = a.data().iter().map(|v| to_u8(v.as_f64())).collect();
        Ok(Self { width: s[1], height: s[0], data })
    }

    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        luminance(self.get(x, y))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = decode_png(bytes, png::ColorType::Rgb)?;
        Ok(Self { width: w, height: h, data })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, &self.encode_png()?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }
}

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Rec. 601 luma in `[0, 1]`.
pub fn luminance(c: Rgb) -> f64 {
    (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fill_rect(&mut self, r: &PixelRect, on: bool) {
        for y in r.y0..r.y1.min(self.height) {
            for x in r.x0..r.x1.min(self.width) {
                self.set(x, y, on);
            }
        }
    }

    pub fn union(&self, o: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&o.data).map(|(a, b)| (*a | *b).min(1)).collect(),
        }
    }

    pub fn invert(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.data.iter().map(|&v| (v == 0) as u8).collect() }
    }

    /// True when every set pixel of `self` is set in `o`.
    pub fn subset_of(&self, o: &Mask) -> bool {
        self.data.iter().zip(&o.data).all(|(a, b)| *a == 0 || *b != 0)
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn bounding_rect(&self) -> Option<PixelRect> {
        let mut r: Option<PixelRect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    r = Some(match r {
                        None => PixelRect { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                        Some(r) => PixelRect { x0: r.x0.min(x), y0: r.y0.min(y), x1: r.x1.max(x + 1), y1: r.y1.max(y + 1) },
                    });
                }
            }
        }
        r
    }

    pub fn bbox(&self) -> Option<BBox> {
        self.bounding_rect().map(|r| BBox::from_pixels(r, self.width, self.height))
    }

    /// `[H, W, 1]` with values 0/1.
    pub fn to_array<T: Scalar>(&self) -> Array<T> {
        Array::from_fn(&[self.height, self.width, 1], |i| if self.data[i] != 0 { T::one() } else { T::zero() })
    }

    pub fn from_array<T: Scalar>(a: &Array<T>) -> Result<Self> {
        let s = a.shape();
        if s.len() < 2 || (s.len() == 3 && s[2] != 1) || s.len() > 3 {
            return input_err(format!("expected [H, W] or [H, W, 1] mask, got {s:?}"));
        }
        let mut data = Vec::with_capacity(a.len());
        for &v in a.data() {
            let v = v.as_f64();
            if v != 0.0 && v != 1.0 {
                return input_err(format!("mask value {v} not in {{0, 1}}"));
            }
            data.push(v as u8);
        }
        Ok(Self { width: s[1], height: s[0], data })
    }

    /// 8-bit grayscale PNG with 0 / 255.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, data) = decode_png(bytes, png::ColorType::Grayscale)?;
        Ok(Self { width: w, height: h, data: data.iter().map(|&v| (v >= 128) as u8).collect() })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path, &self.encode_png()?)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8], want: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match (info.color_type, want) {
        (a, b) if a == b => buf,
        (png::ColorType::Rgba, png::ColorType::Rgb) => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        (png::ColorType::Grayscale, png::ColorType::Rgb) => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        (png::ColorType::Rgb, png::ColorType::Grayscale) => buf.chunks(3).map(|p| p[0]).collect(),
        (got, _) => return input_err(format!("unsupported png color type {got:?}")),
    };
    Ok((w, h, data))
}

pub(crate) fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// IoU of two boxes; 0 when either is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
