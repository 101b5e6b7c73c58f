//! Layer primitives over channel-major `(C, B, H, W)` activations.
//!
//! A 3x3 convolution is `W (Co, Ci*9) x im2col(x) (Ci*9, B*H*W)`, one GEMM
//! for the whole batch. `im2col`/`col2im` are custom ops that are each
//! other's adjoint, so autograd runs through them without materializing the
//! shifted copies that a composition of `pad`/`narrow`/`stack` would create.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, D};
use num_traits::Float;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy)]
struct Dims4 {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
}

fn im2col_kernel<T: Copy + Default>(src: &[T], d: Dims4) -> Vec<T> {
    let n = d.b * d.h * d.w;
    let mut out = vec![T::default(); d.c * 9 * n];
    for c in 0..d.c {
        for dy in 0..3usize {
            let (y0, y1) = valid_range(dy, d.h);
            for dx in 0..3usize {
                let (x0, x1) = valid_range(dx, d.w);
                let row = (c * 9 + dy * 3 + dx) * n;
                for b in 0..d.b {
                    let plane = (c * d.b + b) * d.h * d.w;
                    for y in y0..y1 {
                        let dst = row + (b * d.h + y) * d.w;
                        let src_row = plane + (y + dy - 1) * d.w;
                        out[dst + x0..dst + x1].copy_from_slice(&src[src_row + x0 + dx - 1..src_row + x1 + dx - 1]);
                    }
                }
            }
        }
    }
    out
}

/// Output positions `p` whose source `p + k - 1` lies inside `0..len`.
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo.min(hi), hi)
}

fn col2im_kernel<T: Copy + Default + std::ops::AddAssign>(src: &[T], d: Dims4) -> Vec<T> {
    let n = d.b * d.h * d.w;
    let mut out = vec![T::default(); d.c * d.b * d.h * d.w];
    for c in 0..d.c {
        for dy in 0..3usize {
            let (y0, y1) = valid_range(dy, d.h);
            for dx in 0..3usize {
                let (x0, x1) = valid_range(dx, d.w);
                let row = (c * 9 + dy * 3 + dx) * n;
                for b in 0..d.b {
                    let plane = (c * d.b + b) * d.h * d.w;
                    for y in y0..y1 {
                        let col = row + (b * d.h + y) * d.w;
                        let dst_row = plane + (y + dy - 1) * d.w;
                        let dst = &mut out[dst_row + x0 + dx - 1..dst_row + x1 + dx - 1];
                        for (o, &v) in dst.iter_mut().zip(&src[col + x0..col + x1]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("im2col/col2im require contiguous input"),
    }
}

struct Im2Col3x3;

impl CustomOp1 for Im2Col3x3 {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, b, h, w) = layout.shape().dims4()?;
        let d = Dims4 { c, b, h, w };
        let shape = Shape::from((c * 9, b * h * w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous_slice(v, layout)?, d)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous_slice(v, layout)?, d)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (c, b, h, w) = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1(Col2Im3x3(Dims4 { c, b, h, w }))?;
        Ok(Some(g))
    }
}

struct Col2Im3x3(Dims4);

impl CustomOp1 for Col2Im3x3 {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0;
        let expected = (d.c * 9, d.b * d.h * d.w);
        if layout.shape().dims2()? != expected {
            candle_core::bail!("col2im: expected {:?}, got {:?}", expected, layout.shape());
        }
        let shape = Shape::from((d.c, d.b, d.h, d.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous_slice(v, layout)?, d)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous_slice(v, layout)?, d)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col3x3)?))
    }
}

/// Zero-padded 3x3 patches: `(C, B, H, W) -> (C*9, B*H*W)`.
pub fn im2col3x3(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col3x3)?)
}

/// 3x3, stride 1, zero padding 1. `weight` is `(Co, Ci, 3, 3)`, `bias` `(Co,)`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (ci, b, h, w) = x.dims4()?;
    let (co, wci, kh, kw) = weight.dims4()?;
    if wci != ci || kh != 3 || kw != 3 {
        return Err(invalid(format!(
            "conv3x3 weight {:?} incompatible with {ci} input channels",
            weight.dims()
        )));
    }
    let cols = im2col3x3(x)?;
    let y = weight.reshape((co, ci * 9))?.matmul(&cols)?;
    let y = y.broadcast_add(&bias.reshape((co, 1))?)?;
    Ok(y.reshape((co, b, h, w))?)
}

/// Pointwise convolution. `weight` is `(Co, Ci)`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (ci, b, h, w) = x.dims4()?;
    let (co, wci) = weight.dims2()?;
    if wci != ci {
        return Err(invalid("conv1x1 channel mismatch"));
    }
    let y = weight.matmul(&x.reshape((ci, b * h * w))?)?;
    let y = y.broadcast_add(&bias.reshape((co, 1))?)?;
    Ok(y.reshape((co, b, h, w))?)
}

/// `x (B, Din) -> (B, Dout)` with `weight (Dout, Din)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

/// Group-normalizes `(C, B, H, W)` per `(group, batch item)`, then applies
/// the per-channel affine.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, _, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!("{c} channels not divisible into {groups} groups")));
    }
    let xn = x.contiguous()?.apply_op1(GroupNormalize { groups, eps })?;
    Ok(xn
        .broadcast_mul(&gamma.reshape((c, 1, 1, 1))?)?
        .broadcast_add(&beta.reshape((c, 1, 1, 1))?)?)
}

/// Reference composition of [`group_norm`] from primitive tensor ops.
pub fn group_norm_composite(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!("{c} channels not divisible into {groups} groups")));
    }
    let xg = x.reshape((groups, c / groups, b, h * w))?;
    let mean = xg.mean_keepdim(D::Minus1)?.mean_keepdim(1)?;
    let xc = xg.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?.reshape((c, b, h, w))?;
    Ok(xn
        .broadcast_mul(&gamma.reshape((c, 1, 1, 1))?)?
        .broadcast_add(&beta.reshape((c, 1, 1, 1))?)?)
}

/// Visits each `(group, batch item)` block of a contiguous `(C, B, HW)`
/// buffer as a list of `cg` plane offsets.
fn for_each_group(d: Dims4, groups: usize, mut f: impl FnMut(&[usize])) {
    let cg = d.c / groups;
    let hw = d.h * d.w;
    let mut planes = vec![0usize; cg];
    for g in 0..groups {
        for b in 0..d.b {
            for (k, p) in planes.iter_mut().enumerate() {
                *p = ((g * cg + k) * d.b + b) * hw;
            }
            f(&planes);
        }
    }
}

fn group_stats<T: Float>(x: &[T], planes: &[usize], hw: usize, eps: f64) -> (T, T) {
    let n = (planes.len() * hw) as f64;
    let mut sum = 0f64;
    for &p in planes {
        sum += x[p..p + hw].iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>();
    }
    let mean = sum / n;
    let mut var = 0f64;
    for &p in planes {
        var += x[p..p + hw].iter().map(|v| (v.to_f64().unwrap_or(0.0) - mean).powi(2)).sum::<f64>();
    }
    let inv = 1.0 / (var / n + eps).sqrt();
    (T::from(mean).unwrap_or(T::zero()), T::from(inv).unwrap_or(T::zero()))
}

fn group_norm_fwd_kernel<T: Float>(x: &[T], d: Dims4, groups: usize, eps: f64) -> Vec<T> {
    let hw = d.h * d.w;
    let mut out = vec![T::zero(); x.len()];
    for_each_group(d, groups, |planes| {
        let (mean, inv) = group_stats(x, planes, hw, eps);
        for &p in planes {
            for (o, &v) in out[p..p + hw].iter_mut().zip(&x[p..p + hw]) {
                *o = (v - mean) * inv;
            }
        }
    });
    out
}

/// `dx = inv * (g - mean(g) - xn * mean(g * xn))` per group.
fn group_norm_bwd_kernel<T: Float>(x: &[T], g: &[T], d: Dims4, groups: usize, eps: f64) -> Vec<T> {
    let hw = d.h * d.w;
    let mut out = vec![T::zero(); x.len()];
    for_each_group(d, groups, |planes| {
        let (mean, inv) = group_stats(x, planes, hw, eps);
        let n = (planes.len() * hw) as f64;
        let (mut sg, mut sgx) = (0f64, 0f64);
        for &p in planes {
            for (&gv, &xv) in g[p..p + hw].iter().zip(&x[p..p + hw]) {
                let xn = ((xv - mean) * inv).to_f64().unwrap_or(0.0);
                let gv = gv.to_f64().unwrap_or(0.0);
                sg += gv;
                sgx += gv * xn;
            }
        }
        let mg = T::from(sg / n).unwrap_or(T::zero());
        let mgx = T::from(sgx / n).unwrap_or(T::zero());
        for &p in planes {
            for ((o, &gv), &xv) in out[p..p + hw].iter_mut().zip(&g[p..p + hw]).zip(&x[p..p + hw]) {
                let xn = (xv - mean) * inv;
                *o = inv * (gv - mg - xn * mgx);
            }
        }
    });
    out
}

struct GroupNormalize {
    groups: usize,
    eps: f64,
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, b, h, w) = layout.shape().dims4()?;
        let d = Dims4 { c, b, h, w };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(group_norm_fwd_kernel(contiguous_slice(v, layout)?, d, self.groups, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(group_norm_fwd_kernel(contiguous_slice(v, layout)?, d, self.groups, self.eps)),
            other => candle_core::bail!("group norm: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?;
        let dx = arg.apply_op2_no_bwd(&g, &GroupNormalizeBwd { groups: self.groups, eps: self.eps })?;
        Ok(Some(dx))
    }
}

struct GroupNormalizeBwd {
    groups: usize,
    eps: f64,
}

impl CustomOp2 for GroupNormalizeBwd {
    fn name(&self) -> &'static str {
        "group-normalize-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, b, h, w) = l1.shape().dims4()?;
        let d = Dims4 { c, b, h, w };
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(group_norm_bwd_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                d,
                self.groups,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(group_norm_bwd_kernel(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                d,
                self.groups,
                self.eps,
            )),
            _ => candle_core::bail!("group norm bwd: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `x * sigmoid(x)` with a fused backward.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

struct Silu;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu-fused"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn k<T: Float>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| v * sigmoid(v)).collect()
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(k(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(k(contiguous_slice(v, layout)?)),
            other => candle_core::bail!("silu: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad_res.contiguous()?, &SiluBwd)?))
    }
}

struct SiluBwd;

impl CustomOp2 for SiluBwd {
    fn name(&self) -> &'static str {
        "silu-fused-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn k<T: Float>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                })
                .collect()
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(k(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(k(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?)),
            _ => candle_core::bail!("silu bwd: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Space-to-depth: `(C, B, H, W) -> (C*p*p, B, H/p, W/p)`.
pub fn pixel_unshuffle(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (c, b, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(invalid(format!("{h}x{w} not divisible by patch {p}")));
    }
    Ok(x.reshape(vec![c, b, h / p, p, w / p, p])?
        .permute(vec![0, 3, 5, 1, 2, 4])?
        .contiguous()?
        .reshape((c * p * p, b, h / p, w / p))?)
}

/// Depth-to-space, the inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (cp, b, hp, wp) = x.dims4()?;
    if cp % (p * p) != 0 {
        return Err(invalid("channel count not divisible by patch area"));
    }
    let c = cp / (p * p);
    Ok(x.reshape(vec![c, p, p, b, hp, wp])?
        .permute(vec![0, 3, 4, 1, 5, 2])?
        .contiguous()?
        .reshape((c, b, hp * p, wp * p))?)
}

/// Sinusoidal features of `u = t / T` scaled to the conventional 0..1000 range.
pub fn timestep_features(fracs: &[f64], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(fracs.len() * dim);
    for &u in fracs {
        let pos = u * 1000.0;
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            data.push((pos * f).sin());
        }
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            data.push((pos * f).cos());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (fracs.len(), dim), device)?.to_dtype(dtype)?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded(seed);
        crate::rng::normal_tensor(&mut rng, shape.to_vec(), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn conv3x3_matches_candle_conv2d() {
        let x = randn(&[3, 2, 5, 6], 1);
        let wt = randn(&[4, 3, 3, 3], 2);
        let bias = randn(&[4], 3);
        let ours = conv3x3(&x, &wt, &bias).unwrap();
        // reference in (B, C, H, W)
        let xr = x.transpose(0, 1).unwrap().contiguous().unwrap();
        let r = xr
            .conv2d(&wt, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap())
            .unwrap()
            .transpose(0, 1)
            .unwrap();
        let diff = (ours - r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = randn(&[2, 3, 4, 5], 4);
        let y = randn(&[18, 60], 5);
        let lhs = (im2col3x3(&x).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let back = y.apply_op1(Col2Im3x3(Dims4 { c: 2, b: 3, h: 4, w: 5 })).unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv3x3_gradient_flows_to_input_and_weight() {
        let x = Var::from_tensor(&randn(&[2, 2, 4, 4], 6)).unwrap();
        let wt = Var::from_tensor(&randn(&[3, 2, 3, 3], 7)).unwrap();
        let bias = Var::from_tensor(&randn(&[3], 8)).unwrap();
        let loss = conv3x3(&x, &wt, &bias).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // finite difference on one input element and one weight element
        let f = |xv: &Tensor, wv: &Tensor| {
            conv3x3(xv, wv, &bias).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let h = 1e-6;
        let bump = |t: &Tensor, idx: usize, d: f64| {
            let mut v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            v[idx] += d;
            Tensor::from_vec(v, t.shape(), t.device()).unwrap()
        };
        let gx = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gw = grads.get(&wt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for idx in [0, 13, 31] {
            let fd = (f(&bump(&x, idx, h), &wt) - f(&bump(&x, idx, -h), &wt)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
            let fd = (f(&x, &bump(&wt, idx, h)) - f(&x, &bump(&wt, idx, -h))) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle() {
        let x = randn(&[3, 2, 8, 8], 9);
        let y = pixel_unshuffle(&x, 4).unwrap();
        assert_eq!(y.dims4().unwrap(), (48, 2, 2, 2));
        let back = pixel_shuffle(&y, 4).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let x = randn(&[4, 3, 5, 5], 10);
        let g = Tensor::ones(4, DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let y = group_norm(&x, 2, &g, &b, 1e-9).unwrap();
        // group 0 = channels 0..2, batch item 1
        let part = y.narrow(0, 0, 2).unwrap().narrow(1, 1, 1).unwrap().flatten_all().unwrap();
        let v = part.to_vec1::<f64>().unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn fused_group_norm_matches_composite_values_and_grads() {
        let x = Var::from_tensor(&randn(&[6, 3, 4, 5], 11)).unwrap();
        let gamma = Var::from_tensor(&randn(&[6], 12)).unwrap();
        let beta = Var::from_tensor(&randn(&[6], 13)).unwrap();
        let w = randn(&[6, 3, 4, 5], 14);
        let a = group_norm(&x, 3, &gamma, &beta, 1e-5).unwrap();
        let b = group_norm_composite(&x, 3, &gamma, &beta, 1e-5).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
        let ga = (a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn fused_silu_matches_candle_values_and_grads() {
        let x = Var::from_tensor(&randn(&[3, 2, 4, 4], 15)).unwrap();
        let w = randn(&[3, 2, 4, 4], 16);
        let a = silu(&x).unwrap();
        let b = candle_nn::ops::silu(&x).unwrap();
        assert!(max_diff(&a, &b) < 1e-14);
        let ga = (a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn im2col_handles_single_pixel_planes() {
        let x = randn(&[2, 3, 1, 1], 17);
        let cols = im2col3x3(&x).unwrap();
        // only the centre tap sees the pixel
        let centre = cols.narrow(0, 4, 1).unwrap().flatten_all().unwrap();
        let first = x.narrow(0, 0, 1).unwrap().flatten_all().unwrap();
        assert_eq!(max_diff(&centre, &first), 0.0);
        assert_eq!(cols.narrow(0, 0, 4).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }
}
