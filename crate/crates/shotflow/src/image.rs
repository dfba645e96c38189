//! RGB raster images and binary PPM (P6) files.
//!
//! Images are channels-first `3×H×W` with values in `[0, 1]`. PPM was chosen
//! as the on-disk format because it is trivially inspectable and needs no
//! codec dependency; masks are written as PPM too (white = covered) so one
//! parser serves everything.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Channels-first RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>, // [3, h, w] row-major
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; CHANNELS * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "image tensor must be [3, h, w]".into(),
            });
        }
        Ok(Image {
            h: s[1],
            w: s[2],
            data: t.data().to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![CHANNELS, self.h, self.w], self.data.clone())
            .expect("image dims consistent")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Set all three channels at one pixel.
    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.set(c, y, x, *v);
        }
    }

    pub fn get_rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Fill the whole image with one color.
    pub fn fill(&mut self, rgb: [f32; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                self.set_rgb(y, x, rgb);
            }
        }
    }

    /// Rec.601 luma.
    pub fn luma(&self, y: usize, x: usize) -> f32 {
        0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
    }

    /// Mean over channels and pixels of |a − b|.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::ShapeMismatch {
                op: "mean_abs_diff",
                lhs: vec![CHANNELS, self.h, self.w],
                rhs: vec![CHANNELS, other.h, other.w],
            });
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Encode as binary PPM (P6, maxval 255). Values are clamped to `[0,1]`
    /// and rounded to 8 bits.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..CHANNELS {
                    let v = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut pos = 0usize;
        let magic = next_token(bytes, &mut pos)
            .ok_or_else(|| Error::format(origin, "missing PPM magic"))?;
        if magic != b"P6" {
            return Err(Error::format(origin, "not a P6 PPM"));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let tok = next_token(bytes, &mut pos)
                .ok_or_else(|| Error::format(origin, "truncated PPM header"))?;
            let s = std::str::from_utf8(tok)
                .map_err(|_| Error::format(origin, "non-ASCII header field"))?;
            *d = s
                .parse()
                .map_err(|_| Error::format(origin, format!("bad header field {s:?}")))?;
        }
        let (w, h, maxval) = (dims[0], dims[1], dims[2]);
        if maxval != 255 {
            return Err(Error::format(origin, format!("maxval {maxval}, expected 255")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let need = w * h * CHANNELS;
        if bytes.len() < pos + need {
            return Err(Error::format(
                origin,
                format!("payload has {} bytes, expected {}", bytes.len().saturating_sub(pos), need),
            ));
        }
        let mut img = Image::new(h, w);
        let mut i = pos;
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    img.set(c, y, x, bytes[i] as f32 / 255.0);
                    i += 1;
                }
            }
        }
        Ok(img)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Image::from_ppm_bytes(&bytes, &path.display().to_string())
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

/// Binary pixel mask (1.0 = covered). Serialized as a white-on-black PPM.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<f32>, // [h, w]
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Number of covered pixels (value ≥ 0.5).
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Pixel count covered by both masks.
    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a >= 0.5 && b >= 0.5)
            .count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.h, self.w], self.data.clone()).expect("mask dims consistent")
    }

    pub fn to_image(&self) -> Image {
        let mut img = Image::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.get(y, x);
                img.set_rgb(y, x, [v, v, v]);
            }
        }
        img
    }

    pub fn from_image(img: &Image) -> Mask {
        let mut m = Mask::new(img.height(), img.width());
        for y in 0..img.height() {
            for x in 0..img.width() {
                m.set(y, x, if img.luma(y, x) >= 0.5 { 1.0 } else { 0.0 });
            }
        }
        m
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().write_ppm(path)
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Mask> {
        Ok(Mask::from_image(&Image::read_ppm(path)?))
    }
}
