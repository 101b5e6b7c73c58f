//! The token-conditioned U-Net denoiser and its guiding encoder.
//!
//! Both operate on patchified inputs: a `p x p` space-to-depth at the input
//! and the inverse at the output, so a 64x64 image with `patch = 4` runs the
//! U-Net at 16x16, 8x8 and 4x4 for three levels.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{normal_param, ones_param, zeros_param, ParamStore};
use super::TokenId;
use crate::error::{invalid, Error, Result};
use crate::ops;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub groups: usize,
    /// Width of the timestep/token embedding.
    pub time_dim: usize,
    /// Number of sinusoidal timestep features.
    pub freq_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch: 4,
            widths: vec![32, 64, 128],
            groups: 8,
            time_dim: 128,
            freq_dim: 32,
        }
    }
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(invalid(format!("need at least 2 levels, got {}", self.widths.len())));
        }
        if self.widths.iter().any(|&w| w == 0) || self.channels == 0 || self.time_dim == 0 {
            return Err(invalid("widths, channels and time_dim must be positive"));
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(invalid("every width must be divisible by the group count"));
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return Err(invalid("freq_dim must be even and >= 2"));
        }
        if self.patch == 0 {
            return Err(invalid("patch must be positive"));
        }
        let stride = self.patch << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(invalid(format!(
                "image_size {} must be a multiple of patch * 2^(levels-1) = {stride}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Feature-map side length at `level`.
    pub fn resolution(&self, level: usize) -> usize {
        (self.image_size / self.patch) >> level
    }

    fn patch_channels(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// One feature map per denoiser decoder level, finest first, each `(C_l, B, H_l, W_l)`.
#[derive(Debug, Clone)]
pub struct GuidanceFeatures {
    pub maps: Vec<Tensor>,
    /// `(height, width)` of the conditioning image.
    pub source_size: (usize, usize),
}

impl GuidanceFeatures {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.maps[0].dims4()?.1)
    }

    /// Features of batch items `start..start+len`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            maps: self
                .maps
                .iter()
                .map(|m| m.narrow(1, start, len))
                .collect::<candle_core::Result<_>>()?,
            source_size: self.source_size,
        })
    }

    pub fn cat(parts: &[&GuidanceFeatures]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let levels = first.maps.len();
        let mut maps = Vec::with_capacity(levels);
        for l in 0..levels {
            let ts: Vec<&Tensor> = parts.iter().map(|p| &p.maps[l]).collect();
            maps.push(Tensor::cat(&ts, 1)?);
        }
        Ok(Self {
            maps,
            source_size: first.source_size,
        })
    }
}

fn conv_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn add_conv3<R: Rng + ?Sized>(
    p: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    dtype: DType,
) -> Result<()> {
    p.insert(format!("{name}.w"), normal_param(rng, &[cout, cin, 3, 3], conv_std(cin * 9), dtype)?)?;
    p.insert(format!("{name}.b"), zeros_param(&[cout], dtype)?)
}

fn add_linear<R: Rng + ?Sized>(
    p: &mut ParamStore,
    rng: &mut R,
    name: &str,
    din: usize,
    dout: usize,
    dtype: DType,
) -> Result<()> {
    p.insert(format!("{name}.w"), normal_param(rng, &[dout, din], conv_std(din), dtype)?)?;
    p.insert(format!("{name}.b"), zeros_param(&[dout], dtype)?)
}

fn add_norm(p: &mut ParamStore, name: &str, c: usize, dtype: DType) -> Result<()> {
    p.insert(format!("{name}.g"), ones_param(&[c], dtype)?)?;
    p.insert(format!("{name}.b"), zeros_param(&[c], dtype)?)
}

fn add_resblock<R: Rng + ?Sized>(
    p: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    time_dim: usize,
    dtype: DType,
) -> Result<()> {
    add_norm(p, &format!("{name}.norm1"), cin, dtype)?;
    add_conv3(p, rng, &format!("{name}.conv1"), cin, cout, dtype)?;
    add_linear(p, rng, &format!("{name}.temb"), time_dim, cout, dtype)?;
    add_norm(p, &format!("{name}.norm2"), cout, dtype)?;
    add_conv3(p, rng, &format!("{name}.conv2"), cout, cout, dtype)?;
    if cin != cout {
        p.insert(
            format!("{name}.skip.w"),
            normal_param(rng, &[cout, cin], conv_std(cin), dtype)?,
        )?;
        p.insert(format!("{name}.skip.b"), zeros_param(&[cout], dtype)?)?;
    }
    Ok(())
}

fn add_time_mlp<R: Rng + ?Sized>(p: &mut ParamStore, rng: &mut R, arch: &ArchConfig, dtype: DType) -> Result<()> {
    add_linear(p, rng, "time.lin1", arch.freq_dim, arch.time_dim, dtype)?;
    add_linear(p, rng, "time.lin2", arch.time_dim, arch.time_dim, dtype)
}

fn time_mlp(p: &ParamStore, arch: &ArchConfig, fracs: &[f64], device: &Device) -> Result<Tensor> {
    let f = ops::timestep_features(fracs, arch.freq_dim, p.dtype(), device)?;
    let h = ops::linear(&f, &p.get("time.lin1.w")?, &p.get("time.lin1.b")?)?;
    ops::linear(&ops::silu(&h)?, &p.get("time.lin2.w")?, &p.get("time.lin2.b")?)
}

fn norm(p: &ParamStore, name: &str, x: &Tensor, groups: usize) -> Result<Tensor> {
    ops::group_norm(x, groups, &p.get(&format!("{name}.g"))?, &p.get(&format!("{name}.b"))?, 1e-5)
}

fn conv(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    ops::conv3x3(x, &p.get(&format!("{name}.w"))?, &p.get(&format!("{name}.b"))?)
}

/// `temb_act` is the SiLU-activated embedding, `(B, time_dim)`.
fn resblock(p: &ParamStore, name: &str, x: &Tensor, temb_act: &Tensor, groups: usize) -> Result<Tensor> {
    let h = conv(p, &format!("{name}.conv1"), &ops::silu(&norm(p, &format!("{name}.norm1"), x, groups)?)?)?;
    let tproj = ops::linear(
        temb_act,
        &p.get(&format!("{name}.temb.w"))?,
        &p.get(&format!("{name}.temb.b"))?,
    )?;
    let (b, cout) = tproj.dims2()?;
    let h = h.broadcast_add(&tproj.t()?.reshape((cout, b, 1, 1))?)?;
    let h = conv(p, &format!("{name}.conv2"), &ops::silu(&norm(p, &format!("{name}.norm2"), &h, groups)?)?)?;
    let skip_name = format!("{name}.skip.w");
    let skip = if p.var(&skip_name).is_some() {
        ops::conv1x1(x, &p.get(&skip_name)?, &p.get(&format!("{name}.skip.b"))?)?
    } else {
        x.clone()
    };
    Ok((h + skip)?)
}

fn check_input(arch: &ArchConfig, x: &Tensor, what: &str) -> Result<usize> {
    let (c, b, h, w) = x.dims4()?;
    if c != arch.channels || h != arch.image_size || w != arch.image_size {
        return Err(invalid(format!(
            "{what} has shape {:?}, expected ({}, B, {}, {})",
            x.dims(),
            arch.channels,
            arch.image_size,
            arch.image_size
        )));
    }
    Ok(b)
}

/// Generative prior: predicts the noise in `x_t` given a timestep and a token.
#[derive(Debug)]
pub struct Denoiser {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamStore::new();
        let w = &arch.widths;
        add_time_mlp(&mut p, rng, arch, dtype)?;
        p.insert("tokens", normal_param(rng, &[2, arch.time_dim], 0.5, dtype)?)?;
        add_conv3(&mut p, rng, "in", arch.patch_channels(), w[0], dtype)?;
        for l in 0..arch.levels() {
            let cin = if l == 0 { w[0] } else { w[l - 1] };
            add_resblock(&mut p, rng, &format!("down{l}"), cin, w[l], arch.time_dim, dtype)?;
        }
        let deep = w[arch.levels() - 1];
        add_resblock(&mut p, rng, "mid", deep, deep, arch.time_dim, dtype)?;
        for l in (0..arch.levels() - 1).rev() {
            add_resblock(&mut p, rng, &format!("up{l}"), w[l + 1] + w[l], w[l], arch.time_dim, dtype)?;
        }
        add_norm(&mut p, "out.norm", w[0], dtype)?;
        // the head also sees the patchified input, so the map from x_t to
        // eps is not limited to w[0] channels
        add_conv3(&mut p, rng, "out", w[0] + arch.patch_channels(), arch.patch_channels(), dtype)?;
        Ok(Self { arch: arch.clone(), params: p })
    }

    pub fn token_count(&self) -> Result<usize> {
        Ok(self.params.get("tokens")?.dims2()?.0)
    }

    pub fn token_embedding(&self, id: TokenId) -> Result<Tensor> {
        let n = self.token_count()?;
        if id.index() >= n {
            return Err(Error::UnknownToken(format!("id {}", id.0)));
        }
        Ok(self.params.get("tokens")?.get(id.index())?)
    }

    /// Replaces the token table with `table` plus one appended `row`; rows
    /// already present are copied bit-for-bit.
    pub(crate) fn append_token(&mut self, row: &Tensor) -> Result<TokenId> {
        let table = self.params.get("tokens")?.detach();
        let n = table.dims2()?.0;
        let row = row.reshape((1, self.arch.time_dim))?.to_dtype(table.dtype())?;
        let next = Tensor::cat(&[&table, &row], 0)?;
        self.params.insert("tokens", next)?;
        Ok(TokenId(n as u32))
    }

    /// `x_t` is `(C, B, H, W)` in model space; `fracs[i] = t_i / T`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        fracs: &[f64],
        tokens: &[TokenId],
        features: Option<&GuidanceFeatures>,
    ) -> Result<Tensor> {
        let arch = &self.arch;
        let b = check_input(arch, x_t, "noisy input")?;
        if fracs.len() != b || tokens.len() != b {
            return Err(invalid("one timestep and one token per batch item required"));
        }
        let p = &self.params;
        let n_tokens = self.token_count()?;
        if let Some(bad) = tokens.iter().find(|t| t.index() >= n_tokens) {
            return Err(Error::UnknownToken(format!("id {}", bad.0)));
        }
        if let Some(f) = features {
            if f.maps.len() != arch.levels() || f.batch_size()? != b {
                return Err(invalid("guidance features do not match the denoiser"));
            }
        }
        let device = x_t.device();
        let ids = Tensor::from_vec(tokens.iter().map(|t| t.0).collect::<Vec<u32>>(), b, device)?;
        let temb = (time_mlp(p, arch, fracs, device)? + p.get("tokens")?.index_select(&ids, 0)?)?;
        let temb_act = ops::silu(&temb)?;

        let x_p = ops::pixel_unshuffle(x_t, arch.patch)?;
        let mut h = conv(p, "in", &x_p)?;
        let mut skips = Vec::with_capacity(arch.levels());
        for l in 0..arch.levels() {
            if l > 0 {
                h = ops::avg_pool2(&h)?;
            }
            h = resblock(p, &format!("down{l}"), &h, &temb_act, arch.groups)?;
            skips.push(h.clone());
        }
        let deepest = arch.levels() - 1;
        h = resblock(p, "mid", &h, &temb_act, arch.groups)?;
        if let Some(f) = features {
            h = (h + &f.maps[deepest])?;
        }
        for l in (0..deepest).rev() {
            h = ops::upsample2(&h)?;
            let skip = match features {
                Some(f) => (&skips[l] + &f.maps[l])?,
                None => skips[l].clone(),
            };
            h = Tensor::cat(&[&h, &skip], 0)?;
            h = resblock(p, &format!("up{l}"), &h, &temb_act, arch.groups)?;
        }
        let h = ops::silu(&norm(p, "out.norm", &h, arch.groups)?)?;
        let h = Tensor::cat(&[&h, &x_p], 0)?;
        ops::pixel_shuffle(&conv(p, "out", &h)?, arch.patch)
    }
}

/// Guiding encoder: maps a conditioning image to per-level residual features
/// through zero-initialized 1x1 projections.
#[derive(Debug)]
pub struct Encoder {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamStore::new();
        let w = &arch.widths;
        add_time_mlp(&mut p, rng, arch, dtype)?;
        add_conv3(&mut p, rng, "in", arch.patch_channels(), w[0], dtype)?;
        for l in 0..arch.levels() {
            let cin = if l == 0 { w[0] } else { w[l - 1] };
            add_resblock(&mut p, rng, &format!("down{l}"), cin, w[l], arch.time_dim, dtype)?;
            p.insert(format!("proj{l}.w"), zeros_param(&[w[l], w[l]], dtype)?)?;
            p.insert(format!("proj{l}.b"), zeros_param(&[w[l]], dtype)?)?;
        }
        Ok(Self { arch: arch.clone(), params: p })
    }

    /// Names of the zero-initialized injection projections.
    pub fn projection_names(&self) -> Vec<String> {
        (0..self.arch.levels())
            .flat_map(|l| [format!("proj{l}.w"), format!("proj{l}.b")])
            .collect()
    }

    /// `cond` is `(C, B, H, W)` in model space.
    pub fn forward(&self, cond: &Tensor, fracs: &[f64]) -> Result<GuidanceFeatures> {
        let arch = &self.arch;
        let b = check_input(arch, cond, "conditioning image")?;
        if fracs.len() != b {
            return Err(invalid("one timestep per batch item required"));
        }
        let p = &self.params;
        let temb_act = ops::silu(&time_mlp(p, arch, fracs, cond.device())?)?;
        let mut h = conv(p, "in", &ops::pixel_unshuffle(cond, arch.patch)?)?;
        let mut maps = Vec::with_capacity(arch.levels());
        for l in 0..arch.levels() {
            if l > 0 {
                h = ops::avg_pool2(&h)?;
            }
            h = resblock(p, &format!("down{l}"), &h, &temb_act, arch.groups)?;
            maps.push(ops::conv1x1(&h, &p.get(&format!("proj{l}.w"))?, &p.get(&format!("proj{l}.b"))?)?);
        }
        Ok(GuidanceFeatures {
            maps,
            source_size: (arch.image_size, arch.image_size),
        })
    }
}
