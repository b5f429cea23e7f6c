//! RGB frames, square bilinear crops and patch extraction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::numerics::{math, Tensor};

/// Interleaved RGB, values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Value used for crop pixels outside the frame.
pub const FILL: f32 = 0.5;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{} values for {width}x{height} RGB", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
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

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    fn texel(&self, x: i64, y: i64, c: usize) -> f32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return FILL;
        }
        self.data[(y as usize * self.width + x as usize) * 3 + c]
    }

    /// Bilinear sample at continuous coordinates where pixel `(i, j)` covers
    /// `[i, i + 1) x [j, j + 1)`.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (sx, sy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (math::floor(sx), math::floor(sy));
        let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.texel(x0, y0, c) * (1.0 - fx) + self.texel(x0 + 1, y0, c) * fx;
            let bottom = self.texel(x0, y0 + 1, c) * (1.0 - fx) + self.texel(x0 + 1, y0 + 1, c) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Box-filter downscale by an integer factor (edges use partial blocks).
    pub fn downscale(&self, factor: usize) -> Image {
        let f = factor.max(1);
        let (w, h) = (self.width.div_ceil(f), self.height.div_ceil(f));
        let mut out = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                let mut n = 0.0f32;
                for yy in y * f..((y + 1) * f).min(self.height) {
                    for xx in x * f..((x + 1) * f).min(self.width) {
                        let p = self.get(xx, yy);
                        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                        n += 1.0;
                    }
                }
                out.set(x, y, acc.map(|a| a / n));
            }
        }
        out
    }

    /// Bilinear resize to `width x height`.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let mut out = Image::filled(width, height, [0.0; 3]);
        let (sx, sy) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        for y in 0..height {
            for x in 0..width {
                let p = self.sample((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
                out.set(x, y, p);
            }
        }
        out
    }
}

/// Square crop of side `side` frame pixels centred at `(cx, cy)`, resampled
/// to `out x out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Window `factor * sqrt(w * h)` wide around a frame box.
    pub fn around(b: &BBox, factor: f64, out: usize) -> Result<Self> {
        let side = factor * math::sqrt(b.w * b.h);
        if !(side > 0.0) || !side.is_finite() || out == 0 {
            return Err(Error::Degenerate(format!("crop window of side {side} px into {out} px")));
        }
        Ok(Self {
            cx: b.cx,
            cy: b.cy,
            side,
            out,
        })
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - 0.5 * self.side, self.cy - 0.5 * self.side)
    }

    /// Frame-pixel box to normalized crop coordinates.
    pub fn to_crop(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.origin();
        BBox {
            cx: (b.cx - x0) / self.side,
            cy: (b.cy - y0) / self.side,
            w: b.w / self.side,
            h: b.h / self.side,
        }
    }

    /// Normalized crop box to frame pixels.
    pub fn to_frame(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.origin();
        BBox {
            cx: x0 + b.cx * self.side,
            cy: y0 + b.cy * self.side,
            w: b.w * self.side,
            h: b.h * self.side,
        }
    }

    pub fn crop(&self, img: &Image) -> Image {
        let (x0, y0) = self.origin();
        let step = self.side / self.out as f64;
        let mut out = Image::filled(self.out, self.out, [0.0; 3]);
        for y in 0..self.out {
            for x in 0..self.out {
                let p = img.sample(x0 + (x as f64 + 0.5) * step, y0 + (y as f64 + 0.5) * step);
                out.set(x, y, p);
            }
        }
        out
    }
}

/// Non-overlapping `patch x patch` tiles, row-major, each flattened as
/// `(row, col, channel)` and standardized as `(v - 0.5) / 0.25`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || !img.width.is_multiple_of(patch) || !img.height.is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} image with patch {patch}", img.width, img.height),
        ));
    }
    let (gw, gh) = (img.width / patch, img.height / patch);
    let dim = 3 * patch * patch;
    let mut out = vec![0.0; gw * gh * dim];
    for py in 0..gh {
        for px in 0..gw {
            let row = &mut out[(py * gw + px) * dim..(py * gw + px + 1) * dim];
            for y in 0..patch {
                for x in 0..patch {
                    let p = img.get(px * patch + x, py * patch + y);
                    for c in 0..3 {
                        row[(y * patch + x) * 3 + c] = (p[c] as f64 - 0.5) / 0.25;
                    }
                }
            }
        }
    }
    Tensor::new(&[gw * gh, dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [x as f32 / w as f32, y as f32 / h as f32, 0.25]);
            }
        }
        img
    }

    #[test]
    fn identity_crop_reproduces_frame() {
        let img = gradient_image(8, 8);
        let win = CropWindow {
            cx: 4.0,
            cy: 4.0,
            side: 8.0,
            out: 8,
        };
        assert_eq!(win.crop(&img), img);
    }

    #[test]
    fn outside_pixels_use_fill() {
        let img = Image::filled(4, 4, [1.0; 3]);
        let win = CropWindow {
            cx: -100.0,
            cy: -100.0,
            side: 8.0,
            out: 4,
        };
        assert!(win.crop(&img).data().iter().all(|&v| v == FILL));
    }

    #[test]
    fn box_round_trip() {
        let b = BBox::new(123.4, 56.7, 30.0, 20.0).unwrap();
        let win = CropWindow::around(&BBox::new(120.0, 60.0, 25.0, 25.0).unwrap(), 4.0, 128).unwrap();
        let back = win.to_frame(&win.to_crop(&b));
        for (a, c) in back.to_array().iter().zip(b.to_array()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_layout() {
        let img = gradient_image(8, 4);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), [2, 48]);
        // Second patch, pixel (1, 2) within it, green channel.
        let want = (img.get(5, 2)[1] as f64 - 0.5) / 0.25;
        assert_eq!(p.at(&[1, (2 * 4 + 1) * 3 + 1]), want);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn downscale_averages() {
        let mut img = Image::filled(2, 2, [0.0; 3]);
        img.set(0, 0, [1.0; 3]);
        assert_eq!(img.downscale(2).get(0, 0), [0.25; 3]);
    }
}
