//! Second-order degradation: two rounds of blur, area downsampling,
//! additive Gaussian noise and block-DCT compression, optionally followed by
//! a bicubic resize back to the input resolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    /// Blur standard deviation in pixels.
    pub sigma: f64,
    /// Downscale factor.
    pub r: f64,
    /// Additive noise standard deviation in intensity units.
    pub delta: f64,
    /// Compression quality; 100 passes through untouched.
    pub q: u8,
}

impl StageParams {
    pub const IDENTITY: StageParams = StageParams {
        sigma: 0.0,
        r: 1.0,
        delta: 0.0,
        q: 100,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("blur sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return Err(invalid(format!("downscale factor must be >= 1, got {}", self.r)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(invalid(format!("noise std must be >= 0, got {}", self.delta)));
        }
        if !(1..=100).contains(&self.q) {
            return Err(invalid(format!("quality must be in [1, 100], got {}", self.q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    pub stage1: StageParams,
    pub stage2: StageParams,
    pub restore_resolution: bool,
}

impl DegradationConfig {
    pub fn identity() -> Self {
        Self {
            stage1: StageParams::IDENTITY,
            stage2: StageParams::IDENTITY,
            restore_resolution: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

/// Uniform sampling ranges for random training degradations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub sigma: [f64; 2],
    pub r_choices: Vec<f64>,
    pub delta: [f64; 2],
    pub q: [u8; 2],
    pub restore_resolution: bool,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            sigma: [0.2, 3.0],
            r_choices: vec![1.0, 2.0, 4.0],
            delta: [0.0, 0.08],
            q: [30, 100],
            restore_resolution: true,
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma[0] >= 0.0
            && self.sigma[0] <= self.sigma[1]
            && !self.r_choices.is_empty()
            && self.r_choices.iter().all(|&r| r >= 1.0)
            && self.delta[0] >= 0.0
            && self.delta[0] <= self.delta[1]
            && self.q[0] >= 1
            && self.q[0] <= self.q[1]
            && self.q[1] <= 100;
        if ok {
            Ok(())
        } else {
            Err(invalid("degradation ranges are inconsistent"))
        }
    }

    fn sample_stage<R: Rng + ?Sized>(&self, rng: &mut R) -> StageParams {
        let u = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        StageParams {
            sigma: u(rng, self.sigma),
            r: self.r_choices[rng.random_range(0..self.r_choices.len())],
            delta: u(rng, self.delta),
            q: rng.random_range(self.q[0]..=self.q[1]),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DegradationConfig {
        DegradationConfig {
            stage1: self.sample_stage(rng),
            stage2: self.sample_stage(rng),
            restore_resolution: self.restore_resolution,
        }
    }
}

/// Normalized `size x size` Gaussian window, row-major.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>> {
    let k1 = gaussian_kernel_1d(sigma, size)?;
    let mut k = Vec::with_capacity(size * size);
    for a in &k1 {
        for b in &k1 {
            k.push(a * b);
        }
    }
    Ok(k)
}

/// Normalized 1-D Gaussian window; the 2-D window is its outer product.
pub fn gaussian_kernel_1d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(invalid(format!("kernel size must be odd and >= 1, got {size}")));
    }
    if !(sigma >= 0.0) {
        return Err(invalid("kernel sigma must be >= 0"));
    }
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            if sigma == 0.0 {
                if d == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Blur window: radius of two standard deviations, so sigma 1 gives 5x5.
pub fn kernel_size_for(sigma: f64) -> usize {
    2 * (2.0 * sigma).ceil() as usize + 1
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable reflect-padded Gaussian blur.
pub fn blur(x: &Image, sigma: f64) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let k = gaussian_kernel_1d(sigma, kernel_size_for(sigma))?;
    let r = (k.len() / 2) as isize;
    let (h, w, c) = x.shape();
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let src = x.plane(ch);
        let mut tmp = vec![0f64; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sx = reflect_index(xx as isize + j as isize - r, w);
                    acc += kv * src[y * w + sx];
                }
                tmp[y * w + xx] = acc;
            }
        }
        let mut out = vec![0f64; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sy = reflect_index(y as isize + j as isize - r, h);
                    acc += kv * tmp[sy * w + xx];
                }
                out[y * w + xx] = acc;
            }
        }
        planes.push(out);
    }
    Image::from_planes(w, h, &planes)
}

/// Fractional-coverage weights for area resampling `n -> floor(n / r)`.
fn area_weights(n: usize, r: f64) -> Vec<Vec<(usize, f64)>> {
    let m = ((n as f64) / r).floor() as usize;
    (0..m)
        .map(|o| {
            let lo = o as f64 * r;
            let hi = (o as f64 + 1.0) * r;
            let mut ws = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n {
                let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    ws.push((i, cover / r));
                }
                i += 1;
            }
            ws
        })
        .collect()
}

/// Area-average downsample by `r`; output is `floor(H/r) x floor(W/r)`.
pub fn area_downsample(x: &Image, r: f64) -> Result<Image> {
    if !(r >= 1.0) {
        return Err(invalid("downscale factor must be >= 1"));
    }
    if r == 1.0 {
        return Ok(x.clone());
    }
    let (h, w, c) = x.shape();
    let wy = area_weights(h, r);
    let wx = area_weights(w, r);
    if wy.is_empty() || wx.is_empty() {
        return Err(invalid(format!("{h}x{w} image too small to downscale by {r}")));
    }
    let (oh, ow) = (wy.len(), wx.len());
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let src = x.plane(ch);
        let mut out = vec![0f64; oh * ow];
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, a) in ry {
                    for &(sx, b) in rx {
                        acc += a * b * src[sy * w + sx];
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        planes.push(out);
    }
    Image::from_planes(ow, oh, &planes)
}

/// Adds i.i.d. `N(0, delta^2)` noise; the result is not clamped.
pub fn add_gaussian_noise<R: Rng + ?Sized>(x: &Image, delta: f64, rng: &mut R) -> Result<Image> {
    if delta == 0.0 {
        return Ok(x.clone());
    }
    let n = Normal::new(0.0, delta).map_err(|e| invalid(e.to_string()))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + n.sample(rng)) as f32;
    }
    Ok(out)
}

/// Standard luminance quantization table in natural (row-major) order.
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

/// Luminance table scaled for quality `q` with the libjpeg rule.
pub fn quant_table(q: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&q) {
        return Err(invalid(format!("quality must be in [1, 100], got {q}")));
    }
    let q = q as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0u16; 64];
    for (o, &b) in t.iter_mut().zip(LUMA_QUANT.iter()) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0f64; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Lossy 8x8 block-DCT round trip on 8-bit samples, per channel.
///
/// Samples are rounded to 8 bits, level-shifted, transformed, quantized with
/// [`quant_table`], dequantized, inverse transformed and rounded back to 8
/// bits. Border blocks are edge-replicated to 8x8 and cropped afterwards.
pub fn block_codec(x: &Image, q: u8) -> Result<Image> {
    let table = quant_table(q)?;
    let m = dct_basis();
    let (h, w, c) = x.shape();
    let bh = h.div_ceil(8);
    let bw = w.div_ceil(8);
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let src = x.plane(ch);
        let mut out = vec![0f64; h * w];
        for by in 0..bh {
            for bx in 0..bw {
                let mut blk = [[0f64; 8]; 8];
                for (yy, row) in blk.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        let sy = (by * 8 + yy).min(h - 1);
                        let sx = (bx * 8 + xx).min(w - 1);
                        *v = (src[sy * w + sx].clamp(0.0, 1.0) * 255.0).round() - 128.0;
                    }
                }
                // F = M B M^T
                let mut tmp = [[0f64; 8]; 8];
                for u in 0..8 {
                    for xx in 0..8 {
                        tmp[u][xx] = (0..8).map(|yy| m[u][yy] * blk[yy][xx]).sum();
                    }
                }
                let mut coef = [[0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let f: f64 = (0..8).map(|xx| tmp[u][xx] * m[v][xx]).sum();
                        let qv = table[u * 8 + v] as f64;
                        coef[u][v] = (f / qv).round() * qv;
                    }
                }
                // B = M^T F M
                for yy in 0..8 {
                    for v in 0..8 {
                        tmp[yy][v] = (0..8).map(|u| m[u][yy] * coef[u][v]).sum();
                    }
                }
                for yy in 0..8 {
                    for xx in 0..8 {
                        let oy = by * 8 + yy;
                        let ox = bx * 8 + xx;
                        if oy < h && ox < w {
                            let s: f64 = (0..8).map(|v| tmp[yy][v] * m[v][xx]).sum();
                            out[oy * w + ox] = (s + 128.0).round().clamp(0.0, 255.0) / 255.0;
                        }
                    }
                }
            }
        }
        planes.push(out);
    }
    Image::from_planes(w, h, &planes)
}

/// One degradation stage: blur, area downsample, noise, clamp, compress.
pub fn degrade_stage<R: Rng + ?Sized>(x: &Image, p: &StageParams, rng: &mut R) -> Result<Image> {
    p.validate()?;
    let y = blur(x, p.sigma)?;
    let y = area_downsample(&y, p.r)?;
    let y = add_gaussian_noise(&y, p.delta, rng)?.clamp01();
    if p.q == 100 {
        return Ok(y);
    }
    Ok(block_codec(&y, p.q)?.clamp01())
}

pub fn degrade<R: Rng + ?Sized>(x: &Image, cfg: &DegradationConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let y = degrade_stage(x, &cfg.stage1, rng)?;
    let y = degrade_stage(&y, &cfg.stage2, rng)?;
    if cfg.restore_resolution && (y.width() != x.width() || y.height() != x.height()) {
        return Ok(bicubic_resize(&y, x.width(), x.height())?.clamp01());
    }
    Ok(y)
}

fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn cubic_weights(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let mut ws = [(0usize, 0f64); 4];
            let mut total = 0.0;
            for (k, slot) in ws.iter_mut().enumerate() {
                let i = base as isize + k as isize - 1;
                let wgt = cubic(src - i as f64);
                *slot = (i.clamp(0, n_in as isize - 1) as usize, wgt);
                total += wgt;
            }
            for slot in ws.iter_mut() {
                slot.1 /= total;
            }
            ws
        })
        .collect()
}

/// Keys bicubic (a = -0.5) resampling with clamped borders.
pub fn bicubic_resize(x: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(invalid("target size must be positive"));
    }
    let (h, w, c) = x.shape();
    let wx = cubic_weights(w, width);
    let wy = cubic_weights(h, height);
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let src = x.plane(ch);
        let mut tmp = vec![0f64; h * width];
        for y in 0..h {
            for (ox, ws) in wx.iter().enumerate() {
                tmp[y * width + ox] = ws.iter().map(|&(i, a)| a * src[y * w + i]).sum();
            }
        }
        let mut out = vec![0f64; height * width];
        for (oy, ws) in wy.iter().enumerate() {
            for ox in 0..width {
                out[oy * width + ox] = ws.iter().map(|&(i, a)| a * tmp[i * width + ox]).sum();
            }
        }
        planes.push(out);
    }
    Image::from_planes(width, height, &planes)
}
