//! Generative prior `G`, guiding encoder `E`, and the restoration system that
//! bundles them with a noise schedule and a token table.

mod checkpoint;
mod params;
mod unet;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_system, read_manifest, save_system, CheckpointManifest, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use params::ParamStore;
pub(crate) use params::{normal_param, ones_param, zeros_param};
pub use unet::{ArchConfig, Denoiser, Encoder, GuidanceFeatures};

use crate::error::{invalid, Error, Result};
use crate::image::{to_model_batch, Image};
use crate::schedule::{NoiseSchedule, NoisyState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const NULL_TOKEN: TokenId = TokenId(0);
pub const CLASS_TOKEN: TokenId = TokenId(1);
pub const NULL_NAME: &str = "<null>";
pub const CLASS_NAME: &str = "face";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenInit {
    ClassCopy,
    Random,
}

/// Anything that predicts noise: the real system, or analytic stubs in tests.
pub trait EpsModel {
    fn schedule(&self) -> &NoiseSchedule;

    fn has_token(&self, token: TokenId) -> bool;

    /// Element type of the tensors the model consumes.
    fn dtype(&self) -> DType {
        DType::F32
    }

    /// Guidance features for a `(C, B, H, W)` model-space conditioning batch.
    fn guidance(&self, cond: &Tensor, ts: &[usize]) -> Result<Option<GuidanceFeatures>>;

    fn eps(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        tokens: &[TokenId],
        features: Option<&GuidanceFeatures>,
    ) -> Result<Tensor>;
}

/// `B = {G, E}` plus schedule and token map.
#[derive(Debug)]
pub struct RestorationSystem {
    pub denoiser: Denoiser,
    pub encoder: Encoder,
    schedule: NoiseSchedule,
    tokens: BTreeMap<String, TokenId>,
}

pub fn init_denoiser<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Denoiser> {
    Denoiser::init(arch, rng, DType::F32)
}

pub fn init_encoder<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Encoder> {
    Encoder::init(arch, rng, DType::F32)
}

impl RestorationSystem {
    pub fn new(denoiser: Denoiser, encoder: Encoder, schedule: NoiseSchedule) -> Result<Self> {
        if denoiser.arch != encoder.arch {
            return Err(invalid("denoiser and encoder were built for different architectures"));
        }
        if denoiser.token_count()? < 2 {
            return Err(invalid("token table must hold the null and class tokens"));
        }
        let tokens = BTreeMap::from([
            (NULL_NAME.to_string(), NULL_TOKEN),
            (CLASS_NAME.to_string(), CLASS_TOKEN),
        ]);
        Ok(Self {
            denoiser,
            encoder,
            schedule,
            tokens,
        })
    }

    /// Fresh system with both networks drawn from one seeded stream.
    pub fn init(arch: &ArchConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, &[0xD0]);
        let g = init_denoiser(arch, &mut rng)?;
        let mut rng = crate::rng::stream(seed, &[0xE0]);
        let e = init_encoder(arch, &mut rng)?;
        Self::new(g, e, schedule)
    }

    pub(crate) fn from_parts(
        denoiser: Denoiser,
        encoder: Encoder,
        schedule: NoiseSchedule,
        tokens: BTreeMap<String, TokenId>,
    ) -> Result<Self> {
        let mut sys = Self::new(denoiser, encoder, schedule)?;
        let n = sys.denoiser.token_count()?;
        if tokens.values().any(|t| t.index() >= n) {
            return Err(invalid("token map references rows beyond the token table"));
        }
        if tokens.get(NULL_NAME) != Some(&NULL_TOKEN) || tokens.get(CLASS_NAME) != Some(&CLASS_TOKEN) {
            return Err(invalid("token map must bind the null and class tokens"));
        }
        sys.tokens = tokens;
        Ok(sys)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.denoiser.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.denoiser.params.dtype()
    }

    pub fn token_map(&self) -> &BTreeMap<String, TokenId> {
        &self.tokens
    }

    pub fn token(&self, name: &str) -> Result<TokenId> {
        self.tokens
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    pub fn add_identity_token<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        init: TokenInit,
        rng: &mut R,
    ) -> Result<TokenId> {
        if self.tokens.contains_key(name) {
            return Err(Error::Conflict(format!("token {name:?} already registered")));
        }
        let row = match init {
            TokenInit::ClassCopy => self.denoiser.token_embedding(CLASS_TOKEN)?,
            TokenInit::Random => params::normal_param(rng, &[self.arch().time_dim], 0.5, self.dtype())?,
        };
        let id = self.denoiser.append_token(&row)?;
        self.tokens.insert(name.to_string(), id);
        Ok(id)
    }

    fn fracs(&self, ts: &[usize]) -> Result<Vec<f64>> {
        let tt = self.schedule.steps();
        ts.iter()
            .map(|&t| {
                if t == 0 || t > tt {
                    Err(invalid(format!("timestep {t} outside [1, {tt}]")))
                } else {
                    Ok(t as f64 / tt as f64)
                }
            })
            .collect()
    }

    /// Guidance features for a model-space batch at one shared timestep.
    pub fn encode(&self, cond: &Tensor, t: usize) -> Result<GuidanceFeatures> {
        let b = cond.dims4()?.1;
        self.encode_batch(cond, &vec![t; b])
    }

    pub fn encode_batch(&self, cond: &Tensor, ts: &[usize]) -> Result<GuidanceFeatures> {
        self.encoder.forward(cond, &self.fracs(ts)?)
    }

    pub fn encode_images(&self, images: &[Image], t: usize) -> Result<GuidanceFeatures> {
        let size = self.arch().image_size;
        if let Some(bad) = images.iter().find(|i| i.width() != size || i.height() != size) {
            return Err(invalid(format!(
                "conditioning image is {}x{}, expected {size}x{size}",
                bad.width(),
                bad.height()
            )));
        }
        let cond = to_model_batch(images, &candle_core::Device::Cpu, self.dtype())?;
        self.encode(&cond, t)
    }

    pub fn denoise(&self, state: &NoisyState, token: TokenId, features: Option<&GuidanceFeatures>) -> Result<Tensor> {
        let b = state.x_t.dims4()?.1;
        self.denoise_batch(&state.x_t, &vec![state.t; b], &vec![token; b], features)
    }

    pub fn denoise_batch(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        tokens: &[TokenId],
        features: Option<&GuidanceFeatures>,
    ) -> Result<Tensor> {
        // the network predicts v = alpha * eps - sigma * x0, which has unit
        // scale at every t; eps = sigma * x_t + alpha * v
        let v = self.denoiser.forward(x_t, &self.fracs(ts)?, tokens, features)?;
        let per_item = |f: &dyn Fn(usize) -> f64| -> Result<Tensor> {
            let vals: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
            Ok(Tensor::from_vec(vals, (1, ts.len(), 1, 1), x_t.device())?.to_dtype(x_t.dtype())?)
        };
        let a = per_item(&|t| self.schedule.alpha(t))?;
        let s = per_item(&|t| self.schedule.sigma(t))?;
        Ok((x_t.broadcast_mul(&s)? + v.broadcast_mul(&a)?)?)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            denoiser: Denoiser {
                arch: self.denoiser.arch.clone(),
                params: self.denoiser.params.deep_clone()?,
            },
            encoder: Encoder {
                arch: self.encoder.arch.clone(),
                params: self.encoder.params.deep_clone()?,
            },
            schedule: self.schedule.clone(),
            tokens: self.tokens.clone(),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            denoiser: Denoiser {
                arch: self.denoiser.arch.clone(),
                params: self.denoiser.params.to_dtype(dtype)?,
            },
            encoder: Encoder {
                arch: self.encoder.arch.clone(),
                params: self.encoder.params.to_dtype(dtype)?,
            },
            schedule: self.schedule.clone(),
            tokens: self.tokens.clone(),
        })
    }

    /// Same denoiser, encoder replaced by a copy of `other`'s.
    pub fn with_encoder_from(&self, other: &RestorationSystem) -> Result<Self> {
        if other.arch() != self.arch() {
            return Err(invalid("encoder architecture does not match the denoiser"));
        }
        let mut out = self.deep_clone()?;
        out.encoder = Encoder {
            arch: other.encoder.arch.clone(),
            params: other.encoder.params.deep_clone()?,
        };
        Ok(out)
    }

    pub fn denoiser_hash(&self) -> Result<String> {
        self.denoiser.params.content_hash()
    }

    pub fn encoder_hash(&self) -> Result<String> {
        self.encoder.params.content_hash()
    }

    pub fn all_finite(&self) -> Result<bool> {
        Ok(self.denoiser.params.all_finite()? && self.encoder.params.all_finite()?)
    }
}

impl EpsModel for RestorationSystem {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn has_token(&self, token: TokenId) -> bool {
        self.tokens.values().any(|&t| t == token)
    }

    fn dtype(&self) -> DType {
        RestorationSystem::dtype(self)
    }

    fn guidance(&self, cond: &Tensor, ts: &[usize]) -> Result<Option<GuidanceFeatures>> {
        Ok(Some(self.encode_batch(cond, ts)?))
    }

    fn eps(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        tokens: &[TokenId],
        features: Option<&GuidanceFeatures>,
    ) -> Result<Tensor> {
        self.denoise_batch(x_t, ts, tokens, features)
    }
}

#[cfg(test)]
mod tests;
