//! Push-target generators: the stochastic row shifter and JPEG-quality decay.
//!
//! The shifter rotates rows circularly, so it is an exact bijection and the
//! opposite direction with the same `k` undoes it. JPEG decay is the lossy part
//! of baseline JPEG only: per-channel 8x8 orthonormal DCT, quantization with the
//! Annex K luminance table scaled by quality, and the inverse transform.
//! Entropy coding is lossless and therefore skipped.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftDirection {
    /// Row `r` of the output is row `r + k` of the input.
    Up,
    Down,
}

impl ShiftDirection {
    pub fn opposite(self) -> Self {
        match self {
            ShiftDirection::Up => ShiftDirection::Down,
            ShiftDirection::Down => ShiftDirection::Up,
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            ShiftDirection::Up => 1,
            ShiftDirection::Down => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// `k` is drawn uniformly from `0..=max_rows`.
    pub max_rows: usize,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { max_rows: 5 }
    }
}

/// Circular rotation of rows by exactly `k`.
pub fn shift_rows(img: &ImageTensor, direction: ShiftDirection, k: usize) -> ImageTensor {
    let h = img.height();
    let k = k % h;
    let mut data = Vec::with_capacity(img.len());
    for r in 0..h {
        let src = match direction {
            ShiftDirection::Up => (r + k) % h,
            ShiftDirection::Down => (r + h - k) % h,
        };
        data.extend_from_slice(img.row(src));
    }
    img.with_permuted_data(data)
}

/// Draws `k` and shifts. Returns the realized `k`.
pub fn shift(img: &ImageTensor, direction: ShiftDirection, spec: &ShiftSpec, rng: &mut RngStream) -> (ImageTensor, usize) {
    let k = rng.random_range(0..=spec.max_rows);
    (shift_rows(img, direction, k), k)
}

/// Quality fraction range `[p_lo, p_hi]`, `0 < p_lo <= p_hi <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JpegSpec {
    pub p_lo: f64,
    pub p_hi: f64,
}

impl Default for JpegSpec {
    fn default() -> Self {
        JpegSpec { p_lo: 0.8, p_hi: 1.0 }
    }
}

impl JpegSpec {
    pub fn new(p_lo: f64, p_hi: f64) -> Result<Self> {
        let spec = JpegSpec { p_lo, p_hi };
        spec.validate()?;
        Ok(spec)
    }

    /// The narrower `[0.9, 1]` range used by the training-loop listing.
    pub fn narrow() -> Self {
        JpegSpec { p_lo: 0.9, p_hi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_lo > 0.0 && self.p_lo <= self.p_hi && self.p_hi <= 1.0) {
            return Err(Error::InvalidDegrade(format!(
                "need 0 < p_lo <= p_hi <= 1, got [{}, {}]",
                self.p_lo, self.p_hi
            )));
        }
        Ok(())
    }

    /// `p ~ Uniform[p_lo, p_hi)`, or exactly `p_lo` for a degenerate range.
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        if self.p_lo == self.p_hi {
            self.p_lo
        } else {
            rng.random_range(self.p_lo..self.p_hi)
        }
    }
}

/// JPEG Annex K luminance table, row-major over (v, u).
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Integer quality `Q = round(100 p)` clamped to `1..=100`.
pub fn quality_from_fraction(p: f64) -> u32 {
    (100.0 * p).round().clamp(1.0, 100.0) as u32
}

/// The IJG quality scaling of the luminance table.
pub fn scaled_quant_table(quality: u32) -> [u16; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &base) in out.iter_mut().zip(LUMA_QUANT.iter()) {
        *o = ((u32::from(base) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

/// Orthonormal DCT-II basis, `basis[u][x] = a(u) cos((2x+1) u pi / 16)`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// Forward 2D DCT of an 8x8 block (row-major `[y][x]`), output `[v][u]`.
pub fn fdct8x8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = sum_x m[u][x] block[y][x]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| m[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| m[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let m = dct_basis();
    let mut tmp = [0.0; 64];
    // tmp[y][u] = sum_v m[v][y] coef[v][u]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| m[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| m[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Snaps each coefficient to the nearest multiple of its table entry.
pub fn quantize_block(coef: &mut [f64; 64], table: &[u16; 64]) {
    for (c, &q) in coef.iter_mut().zip(table.iter()) {
        let q = f64::from(q);
        *c = (*c / q).round() * q;
    }
}

/// Deterministic decay at quality fraction `p`. `p == 1` returns the input unchanged.
pub fn jpeg_decay_at(img: &ImageTensor, p: f64) -> Result<ImageTensor> {
    let (h, w, channels) = img.dims();
    if h < 8 || w < 8 {
        return Err(Error::ImageTooSmall { height: h, width: w, min: 8 });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidDegrade(format!("quality fraction {p} outside (0, 1]")));
    }
    if p == 1.0 {
        return Ok(img.clone());
    }
    let table = scaled_quant_table(quality_from_fraction(p));
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let src = img.data();
    let mut out = vec![0.0f32; img.len()];
    let mut plane = vec![0.0f64; ph * pw];
    for ch in 0..channels {
        // level shift, edge-replicated padding
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                plane[y * pw + x] = f64::from(src[(sy * w + sx) * channels + ch]) * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    block[y * 8..y * 8 + 8].copy_from_slice(&plane[(by + y) * pw + bx..(by + y) * pw + bx + 8]);
                }
                let mut coef = fdct8x8(&block);
                quantize_block(&mut coef, &table);
                let rec = idct8x8(&coef);
                for y in 0..8 {
                    plane[(by + y) * pw + bx..(by + y) * pw + bx + 8].copy_from_slice(&rec[y * 8..y * 8 + 8]);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v = (plane[y * pw + x] + 128.0) / 255.0;
                out[(y * w + x) * channels + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(img.with_data_unclamped(out).clamp01())
}

/// Draws `p` from the spec and decays. Returns the realized `p`.
pub fn jpeg_decay(img: &ImageTensor, spec: &JpegSpec, rng: &mut RngStream) -> Result<(ImageTensor, f64)> {
    spec.validate()?;
    let p = spec.draw(rng);
    Ok((jpeg_decay_at(img, p)?, p))
}
