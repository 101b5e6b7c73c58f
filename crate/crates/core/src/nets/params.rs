use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::normal_vec;

/// Named parameter tensors.
///
/// When not trainable, [`ParamStore::get`] hands out detached tensors so
/// forward passes build no autograd graph through these parameters.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            vars: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidState(format!("missing parameter {name}")))?;
        Ok(if self.trainable {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.vars
            .values()
            .next()
            .map(|v| v.dtype())
            .unwrap_or(DType::F32)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = Self::new();
        for (k, t) in tensors {
            out.insert(k, t)?;
        }
        Ok(out)
    }

    /// Copy with fresh storage; `Var` clones alias their storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach().copy()?)?;
        }
        out.trainable = self.trainable;
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach().to_dtype(dtype)?.copy()?)?;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v
                .as_tensor()
                .to_dtype(DType::F64)?
                .abs()?
                .sum_all()?
                .to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// SHA-256 over names, shapes and raw little-endian values, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let t = v.as_tensor().flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    for x in t.to_vec1::<f64>()? {
                        h.update(x.to_le_bytes());
                    }
                }
                _ => {
                    for x in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn normal_param<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
    dtype: DType,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = normal_vec(rng, n).into_iter().map(|v| v * std as f32).collect();
    Ok(Tensor::from_vec(data, shape.to_vec(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn zeros_param(shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros(shape.to_vec(), dtype, &Device::Cpu)?)
}

pub(crate) fn ones_param(shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::ones(shape.to_vec(), dtype, &Device::Cpu)?)
}
