//! Single-file checkpoints: safetensors payload with a JSON manifest stored
//! in the header metadata under `"manifest"`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ArchConfig, Denoiser, Encoder, ParamStore, RestorationSystem, TokenId};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

pub const CHECKPOINT_FORMAT: &str = "dpt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub schedule: ScheduleSpec,
    pub tokens: BTreeMap<String, TokenId>,
    pub denoiser_hash: String,
    pub encoder_hash: String,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_system(sys: &RestorationSystem, path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        arch: sys.arch().clone(),
        schedule: sys.schedule().spec(),
        tokens: sys.token_map().clone(),
        denoiser_hash: sys.denoiser_hash()?,
        encoder_hash: sys.encoder_hash()?,
    };
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    for (k, t) in sys.denoiser.params.tensors() {
        named.insert(format!("denoiser/{k}"), t.contiguous()?);
    }
    for (k, t) in sys.encoder.params.tensors() {
        named.insert(format!("encoder/{k}"), t.contiguous()?);
    }
    let meta = HashMap::from([("manifest".to_string(), serde_json::to_string(&manifest)?)]);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    safetensors::serialize_to_file(named.iter(), Some(meta), path)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    manifest_from_bytes(path, &bytes)
}

fn manifest_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("manifest"))
        .ok_or_else(|| ckpt_err(path, "no manifest in header"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(raw).map_err(|e| ckpt_err(path, format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ckpt_err(path, format!("unexpected format {:?}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {}", manifest.version)));
    }
    Ok(manifest)
}

fn check_against(path: &Path, what: &str, loaded: &ParamStore, template: &ParamStore) -> Result<()> {
    let lt = loaded.tensors();
    let tt = template.tensors();
    for (name, t) in &tt {
        let got = lt
            .get(name)
            .ok_or_else(|| ckpt_err(path, format!("{what} is missing {name}")))?;
        let same = if name == "tokens" {
            got.dims().get(1) == t.dims().get(1)
        } else {
            got.dims() == t.dims()
        };
        if !same {
            return Err(ckpt_err(
                path,
                format!("{what}.{name} has shape {:?}, architecture expects {:?}", got.dims(), t.dims()),
            ));
        }
    }
    if let Some(extra) = lt.keys().find(|k| !tt.contains_key(*k)) {
        return Err(ckpt_err(path, format!("{what} has unexpected tensor {extra}")));
    }
    Ok(())
}

pub fn load_system(path: impl AsRef<Path>) -> Result<RestorationSystem> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let manifest = manifest_from_bytes(path, &bytes)?;
    manifest.arch.validate()?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut g = BTreeMap::new();
    let mut e = BTreeMap::new();
    for (k, t) in tensors {
        if let Some(n) = k.strip_prefix("denoiser/") {
            g.insert(n.to_string(), t);
        } else if let Some(n) = k.strip_prefix("encoder/") {
            e.insert(n.to_string(), t);
        } else {
            return Err(ckpt_err(path, format!("unexpected tensor {k}")));
        }
    }
    let g = ParamStore::from_tensors(g)?;
    let e = ParamStore::from_tensors(e)?;
    let dtype = g.dtype();
    let mut rng = crate::rng::seeded(0);
    let tg = Denoiser::init(&manifest.arch, &mut rng, dtype)?;
    let te = Encoder::init(&manifest.arch, &mut rng, dtype)?;
    check_against(path, "denoiser", &g, &tg.params)?;
    check_against(path, "encoder", &e, &te.params)?;
    if g.content_hash()? != manifest.denoiser_hash || e.content_hash()? != manifest.encoder_hash {
        return Err(ckpt_err(path, "parameter hash does not match manifest"));
    }
    let schedule = NoiseSchedule::from_spec(manifest.schedule)?;
    RestorationSystem::from_parts(
        Denoiser {
            arch: manifest.arch.clone(),
            params: g,
        },
        Encoder {
            arch: manifest.arch.clone(),
            params: e,
        },
        schedule,
        manifest.tokens,
    )
}
