//! Declarative run configuration. Every section rejects unknown keys and
//! missing keys fall back to defaults, so a partial file is a valid override.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{DegradationConfig, StageParams};
use crate::error::{Error, Result};
use crate::metrics::EmbedderHyper;
use crate::nets::{ArchConfig, TokenInit};
use crate::pivot::TrainHyper;
use crate::sampler::RestoreConfig;
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub ids: usize,
    pub per_id: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ids: 50,
            per_id: 20,
            size: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PivotConfig {
    /// Identities that get personalized; all are held out of base training.
    pub identities: Vec<u32>,
    pub token_init: TokenInit,
    /// Number of non-pivot identities used to retarget the encoder.
    pub generic_identities: usize,
    pub text: TrainHyper,
    pub model: TrainHyper,
}

impl Default for PivotConfig {
    fn default() -> Self {
        Self {
            identities: vec![0, 1],
            token_init: TokenInit::ClassCopy,
            generic_identities: 1,
            text: TrainHyper::textual_pivot(),
            model: TrainHyper::model_pivot(),
        }
    }
}

/// Evaluation protocol shared by the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Degraded copies drawn per held-out test image.
    pub realizations: usize,
    pub seed: u64,
    /// Sampler seeds for the seed-variation experiment.
    pub seeds: Vec<u64>,
    pub seed_probes: usize,
    pub gammas: Vec<f64>,
    pub ws: Vec<f64>,
    /// Images restored per batched sampler call.
    pub chunk: usize,
    /// Probe count and degradation for the multi-pass experiment.
    pub multipass_probes: usize,
    pub multipass_passes: usize,
    pub multipass_degradation: DegradationConfig,
    /// Non-pivot images whose class-token predictions measure prior drift.
    pub drift_probes: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            realizations: 2,
            seed: 11,
            seeds: vec![0, 1, 2, 3, 4],
            seed_probes: 10,
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ws: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            chunk: 10,
            multipass_probes: 10,
            multipass_passes: 2,
            multipass_degradation: DegradationConfig {
                stage1: StageParams {
                    sigma: 3.0,
                    r: 2.0,
                    delta: 0.06,
                    q: 40,
                },
                stage2: StageParams {
                    sigma: 2.0,
                    r: 2.0,
                    delta: 0.06,
                    q: 40,
                },
                restore_resolution: true,
            },
            drift_probes: 16,
        }
    }
}

/// Degradation applied to held-out test images before restoration.
pub fn default_eval_degradation() -> DegradationConfig {
    DegradationConfig {
        stage1: StageParams {
            sigma: 2.0,
            r: 2.0,
            delta: 0.04,
            q: 50,
        },
        stage2: StageParams {
            sigma: 1.5,
            r: 2.0,
            delta: 0.04,
            q: 50,
        },
        restore_resolution: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub arch: ArchConfig,
    pub embedder: EmbedderHyper,
    pub degrade: DegradationConfig,
    pub train: TrainHyper,
    pub pivot: PivotConfig,
    pub restore: RestoreConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            arch: ArchConfig::default(),
            embedder: EmbedderHyper::default(),
            degrade: default_eval_degradation(),
            train: TrainHyper::base(),
            pivot: PivotConfig::default(),
            restore: RestoreConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunConfig {
    /// Parses a document layered over the defaults. Nested tables merge key by
    /// key, so a partial `[pivot.text]` keeps the stage defaults it omits.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.ids < 2 || self.data.per_id == 0 {
            return bad("data needs at least two identities and one image each");
        }
        if self.arch.image_size != self.data.size {
            return bad("arch.image_size must equal data.size");
        }
        self.arch.validate()?;
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be >= 1");
        }
        self.degrade.validate()?;
        self.train.validate()?;
        self.pivot.text.validate()?;
        self.pivot.model.validate()?;
        self.restore.validate()?;
        self.evaluate.multipass_degradation.validate()?;
        if let Some(&l) = self.pivot.identities.iter().find(|&&l| l as usize >= self.data.ids) {
            return Err(Error::Config(format!("pivot identity {l} is not in the dataset")));
        }
        if self.evaluate.realizations == 0 || self.evaluate.chunk == 0 {
            return bad("evaluate.realizations and evaluate.chunk must be >= 1");
        }
        Ok(())
    }

    /// Content hash of the whole document.
    pub fn content_hash(&self) -> Result<String> {
        hash_json(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash().unwrap(), cfg.content_hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[train]\nlr = 1e-3\nwarmup = 5\n").unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(err.to_string().contains("warmup"), "{err}");
        let err = RunConfig::from_toml_str("[optimizer]\nlr = 1\n").unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn partial_documents_override_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nsteps = 7\n[restore]\nw = 3.5\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.restore.w, 3.5);
        assert_eq!(cfg.train.lr, TrainHyper::base().lr);
        assert_ne!(cfg.content_hash().unwrap(), RunConfig::default().content_hash().unwrap());
    }

    #[test]
    fn partial_nested_tables_keep_their_own_defaults() {
        let cfg = RunConfig::from_toml_str("[pivot.text]\nsteps = 9\n[pivot.model.degradation]\nq = [20, 60]\n").unwrap();
        assert_eq!(cfg.pivot.text.steps, 9);
        assert_eq!(cfg.pivot.text.lr, TrainHyper::textual_pivot().lr);
        assert_eq!(cfg.pivot.text.t_hi, TrainHyper::textual_pivot().t_hi);
        assert_eq!(cfg.pivot.model.steps, TrainHyper::model_pivot().steps);
        assert_eq!(cfg.pivot.model.degradation.q, [20, 60]);
        assert!(RunConfig::from_toml_str("[pivot.text]\nwarmup = 1\n").is_err());
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[data]\nsize = 32\n").is_err());
        assert!(RunConfig::from_toml_str("[restore]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[pivot]\nidentities = [99]\n").is_err());
    }
}
