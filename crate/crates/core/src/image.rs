//! Planar-free RGB image buffers in `[0, 1]` and conversions to model batches.
//!
//! Images are stored height-major with interleaved channels (`HWC`). Model
//! batches use a channel-major `(C, B, H, W)` layout so that a 3x3
//! convolution over the whole batch is a single matrix product.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(invalid(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Single channel as a row-major `f64` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| v as f64)
            .collect()
    }

    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        if planes.iter().any(|p| p.len() != width * height) {
            return Err(invalid("plane sizes disagree with image size"));
        }
        let mut data = vec![0f32; width * height * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v as f32;
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Values rounded to the nearest 8-bit level.
    pub fn quantize8(mut self) -> Self {
        for v in self.data.iter_mut() {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(invalid("only 3-channel images can be written as RGB"));
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| invalid("rgb buffer size mismatch"))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Writes an 8-bit PNG, creating parent directories as needed.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

/// Tiles images into a grid, row-major, with a 2px white gutter.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<Image> {
    let gutter = 2;
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| invalid("contact sheet needs at least one image"))?;
    let (h, w, c) = first.shape();
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let sheet_w = ncols * (w + gutter) + gutter;
    let sheet_h = rows.len() * (h + gutter) + gutter;
    let mut sheet = Image::filled(sheet_w, sheet_h, c, 1.0);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.shape() != (h, w, c) {
                return Err(invalid("contact sheet images must share a shape"));
            }
            let ox = gutter + ci * (w + gutter);
            let oy = gutter + ri * (h + gutter);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        sheet.set(ox + x, oy + y, ch, img.get(x, y, ch));
                    }
                }
            }
        }
    }
    Ok(sheet)
}

/// Stacks images into a `(C, B, H, W)` tensor, mapping `[0, 1]` to `[-1, 1]`.
pub fn to_model_batch(images: &[Image], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| invalid("cannot build a batch from zero images"))?;
    let (h, w, c) = first.shape();
    let b = images.len();
    let mut buf = vec![0f32; c * b * h * w];
    for (bi, img) in images.iter().enumerate() {
        if img.shape() != (h, w, c) {
            return Err(invalid("all images in a batch must share a shape"));
        }
        for (i, px) in img.data().chunks_exact(c).enumerate() {
            for (ci, &v) in px.iter().enumerate() {
                buf[((ci * b) + bi) * h * w + i] = v * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(buf, (c, b, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`to_model_batch`]; values are clamped into `[0, 1]`.
pub fn from_model_batch(t: &Tensor) -> Result<Vec<Image>> {
    let (c, b, h, w) = t.dims4()?;
    let flat: Vec<f32> = t
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut data = vec![0f32; h * w * c];
        for ci in 0..c {
            let base = (ci * b + bi) * h * w;
            for i in 0..h * w {
                data[i * c + ci] = ((flat[base + i] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        out.push(Image::new(w, h, c, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_round_trip_preserves_order() {
        let a = Image::from_fn(4, 3, 3, |x, y, c| (x + y + c) as f32 / 10.0);
        let b = Image::from_fn(4, 3, 3, |x, y, c| (x * y + c) as f32 / 20.0);
        let t = to_model_batch(&[a.clone(), b.clone()], &Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims4().unwrap(), (3, 2, 3, 4));
        let back = from_model_batch(&t).unwrap();
        for (orig, got) in [a, b].iter().zip(back.iter()) {
            for (u, v) in orig.data().iter().zip(got.data()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f32 / 255.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }
}
