//! Run configuration, cached pipeline artifacts with provenance, and the
//! scripted experiments.
//!
//! A [`Pipeline`] owns a work directory. Each artifact (dataset, embedder,
//! base system, pivoted systems) is stored under a file name carrying the
//! hash of the config sections it depends on, so reruns with the same
//! config reuse it and a changed section retrains only what depends on it.

pub mod config;
pub mod experiments;
pub mod provenance;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::facegen::{Dataset, Split, REFERENCE_PER_ID};
use crate::metrics::{train_embedder, IdentityEmbedder};
use crate::nets::{load_system, save_system, RestorationSystem, TokenId, NULL_TOKEN};
use crate::pivot::{
    out_of_context_pivot, stage_a_textual_pivot, stage_b_model_pivot, train_base, ImageSet, PriorSet, TrainLog,
};
use crate::rng::stream;
use crate::sampler::RestoreConfig;
use crate::schedule::make_schedule;

pub use config::{hash_json, DataConfig, EvaluateConfig, PivotConfig, RunConfig, ScheduleConfig};
pub use experiments::{make_probes, EvalContext, ExperimentOutput, Probe};
pub use provenance::{file_hash, read_sidecar, sidecar_path, write_sidecar, Provenance};
pub use report::{ExperimentKind, ExperimentReport, Outcome, ReportRow, Verdict};

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "DPT_WORKERS";

/// Worker count from [`WORKERS_ENV`], else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` inside a rayon pool of [`worker_count`] threads.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidState(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// A system personalized to one identity.
#[derive(Debug)]
pub struct Personalized {
    pub system: RestorationSystem,
    pub token: TokenId,
    pub label: u32,
    pub checkpoint: PathBuf,
}

/// How a textual pivot is run; the model-based pivot always follows the
/// configured in-context variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TextualVariant {
    pub in_context: bool,
    pub lambda_pr: f64,
}

type Slot<T> = Mutex<Option<Arc<T>>>;

pub struct Pipeline {
    config: RunConfig,
    dir: PathBuf,
    dataset: Slot<Dataset>,
    embedder: Slot<IdentityEmbedder>,
    base: Slot<RestorationSystem>,
    textual: Mutex<BTreeMap<String, Arc<Personalized>>>,
    pivoted: Mutex<BTreeMap<u32, Arc<Personalized>>>,
}

fn memo<T>(slot: &Slot<T>, f: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    let mut g = slot.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(v) = g.as_ref() {
        return Ok(v.clone());
    }
    let v = Arc::new(f()?);
    *g = Some(v.clone());
    Ok(v)
}

fn memo_map<K: Ord + Clone, T>(
    map: &Mutex<BTreeMap<K, Arc<T>>>,
    key: &K,
    f: impl FnOnce() -> Result<T>,
) -> Result<Arc<T>> {
    let mut g = map.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(v) = g.get(key) {
        return Ok(v.clone());
    }
    let v = Arc::new(f()?);
    g.insert(key.clone(), v.clone());
    Ok(v)
}

/// Provenance parameter holding the wall time spent producing an artifact.
pub const WALL_MS: &str = "wall_ms";

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Wall time recorded in an artifact's provenance sidecar, if any.
pub fn recorded_wall_ms(artifact: impl AsRef<Path>) -> Option<f64> {
    read_sidecar(artifact).ok()?.params.get(WALL_MS)?.parse().ok()
}

fn short(hash: &str) -> &str {
    &hash[..12.min(hash.len())]
}

fn token_name(label: u32) -> String {
    format!("<v{label}>")
}

impl Pipeline {
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            config,
            dir,
            dataset: Mutex::new(None),
            embedder: Mutex::new(None),
            base: Mutex::new(None),
            textual: Mutex::new(BTreeMap::new()),
            pivoted: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn config_hash(&self) -> Result<String> {
        self.config.content_hash()
    }

    // ------------------------------------------------------------ cache keys

    fn data_key(&self) -> Result<String> {
        hash_json(&self.config.data)
    }

    fn embedder_key(&self) -> Result<String> {
        hash_json(&(&self.config.data, &self.config.embedder))
    }

    fn base_key(&self) -> Result<String> {
        let c = &self.config;
        hash_json(&(&c.data, &c.schedule, &c.arch, &c.train, &c.pivot.identities))
    }

    fn textual_key(&self, label: u32, v: TextualVariant) -> Result<String> {
        let p = &self.config.pivot;
        hash_json(&(self.base_key()?, &p.token_init, &p.text, label, v))
    }

    fn pivot_key(&self, label: u32) -> Result<String> {
        let p = &self.config.pivot;
        hash_json(&(
            self.textual_key(label, self.default_variant())?,
            &p.model,
            p.generic_identities,
        ))
    }

    pub fn default_variant(&self) -> TextualVariant {
        TextualVariant {
            in_context: true,
            lambda_pr: self.config.pivot.text.lambda_pr,
        }
    }

    pub fn dataset_dir(&self) -> Result<PathBuf> {
        Ok(self.dir.join(format!("data-{}", short(&self.data_key()?))))
    }

    pub fn embedder_path(&self) -> Result<PathBuf> {
        Ok(self.dir.join(format!("embedder-{}.safetensors", short(&self.embedder_key()?))))
    }

    pub fn base_path(&self) -> Result<PathBuf> {
        Ok(self.dir.join(format!("base-{}.safetensors", short(&self.base_key()?))))
    }

    fn log_path(&self, name: &str) -> PathBuf {
        self.dir.join("logs").join(format!("{name}.jsonl"))
    }

    fn provenance(&self, producer: &str) -> Result<Provenance> {
        Ok(Provenance::new(producer, &self.config_hash()?))
    }

    // ------------------------------------------------------------ artifacts

    pub fn dataset(&self) -> Result<Arc<Dataset>> {
        memo(&self.dataset, || {
            let dir = self.dataset_dir()?;
            if dir.join("manifest.json").exists() {
                return Dataset::load(&dir);
            }
            let d = &self.config.data;
            log::info!("generating dataset: {} ids x {} images", d.ids, d.per_id);
            let start = Instant::now();
            let ds = Dataset::generate(d.ids, d.per_id, d.size, d.seed)?;
            let tmp = self.dir.join(format!("data-tmp{}", std::process::id()));
            ds.write(&tmp)?;
            std::fs::rename(&tmp, &dir).or_else(|e| if dir.exists() { Ok(()) } else { Err(e) })?;
            let prov = self.provenance("gen-data")?.seed("data", d.seed).param(WALL_MS, elapsed_ms(start));
            write_sidecar(dir.join("manifest.json"), &prov)?;
            Ok(ds)
        })
    }

    pub fn embedder(&self) -> Result<Arc<IdentityEmbedder>> {
        memo(&self.embedder, || {
            let path = self.embedder_path()?;
            if path.exists() {
                return IdentityEmbedder::load(&path);
            }
            let ds = self.dataset()?;
            log::info!("training identity embedder ({} steps)", self.config.embedder.steps);
            let start = Instant::now();
            let emb = train_embedder(&ds, &self.config.embedder)?;
            provenance::write_atomic(&path, |p| emb.save(p))?;
            let prov = self
                .provenance("train-embedder")?
                .seed("embedder", self.config.embedder.seed)
                .param("accuracy", emb.accuracy().unwrap_or(f64::NAN))
                .param(WALL_MS, elapsed_ms(start));
            write_sidecar(&path, &prov)?;
            Ok(emb)
        })
    }

    fn save_checkpoint(&self, sys: &RestorationSystem, path: &Path, prov: Provenance, log: &TrainLog, log_name: &str) -> Result<()> {
        provenance::write_atomic(path, |p| save_system(sys, p).map(|_| ()))?;
        write_sidecar(path, &prov)?;
        let lp = self.log_path(log_name);
        if lp.exists() {
            std::fs::remove_file(&lp)?;
        }
        log.append_jsonl(lp)
    }

    /// Blind system trained on every identity except the pivot identities.
    pub fn base(&self) -> Result<Arc<RestorationSystem>> {
        memo(&self.base, || {
            let path = self.base_path()?;
            if path.exists() {
                return load_system(&path);
            }
            let c = &self.config;
            let ds = self.dataset()?;
            let held_out = &c.pivot.identities;
            let data = ImageSet::from_dataset(&ds, None, |l| !held_out.contains(&l));
            let start = Instant::now();
            let mut sys = RestorationSystem::init(&c.arch, make_schedule(c.schedule.steps, c.schedule.kind)?, c.train.seed)?;
            log::info!("training base system ({} steps)", c.train.steps);
            let log = train_base(&mut sys, &data, &c.train)?;
            let prov = self
                .provenance("train-base")?
                .input("dataset", self.data_key()?)
                .seed("train", c.train.seed)
                .param(WALL_MS, elapsed_ms(start));
            self.save_checkpoint(&sys, &path, prov, &log, &format!("base-{}", short(&self.base_key()?)))?;
            Ok(sys)
        })
    }

    /// Reference images of `label`.
    pub fn references(&self, label: u32) -> Result<Vec<crate::Image>> {
        let refs = self.dataset()?.images_of(label, Some(Split::Reference));
        if refs.is_empty() {
            return Err(Error::Precondition(format!("identity {label} has no reference images")));
        }
        Ok(refs)
    }

    /// Reference images of every identity that is not personalized.
    pub fn prior_set(&self, label: u32) -> Result<PriorSet> {
        let ids = self.config.pivot.identities.clone();
        let set = ImageSet::from_dataset(&*self.dataset()?, Some(Split::Reference), |l| !ids.contains(&l));
        PriorSet::new(set, label)
    }

    /// Labels used to retarget the encoder: the lowest non-pivot labels.
    pub fn generic_labels(&self) -> Result<Vec<u32>> {
        let ids = &self.config.pivot.identities;
        Ok(self
            .dataset()?
            .labels()
            .into_iter()
            .filter(|l| !ids.contains(l))
            .take(self.config.pivot.generic_identities.max(1))
            .collect())
    }

    /// Base system after a textual pivot on `label` (no model-based pivot).
    pub fn textual(&self, label: u32, variant: TextualVariant) -> Result<Arc<Personalized>> {
        let key = self.textual_key(label, variant)?;
        memo_map(&self.textual, &key, || {
            let tag = if variant.in_context { "in" } else { "out" };
            let path = self.dir.join(format!("textual-{label}-{tag}-{}.safetensors", short(&key)));
            if path.exists() {
                let system = load_system(&path)?;
                let token = system.token(&token_name(label))?;
                return Ok(Personalized { system, token, label, checkpoint: path });
            }
            let p = &self.config.pivot;
            let mut system = self.base()?.deep_clone()?;
            let start = Instant::now();
            let token = system.add_identity_token(&token_name(label), p.token_init, &mut stream(p.text.seed, &[0x70C, label as u64]))?;
            let refs = self.references(label)?;
            let prior = self.prior_set(label)?;
            let hyper = crate::pivot::TrainHyper {
                lambda_pr: variant.lambda_pr,
                ..p.text.clone()
            };
            log::info!("textual pivot on identity {label} ({tag}-context, lambda {})", variant.lambda_pr);
            let log = if variant.in_context {
                stage_a_textual_pivot(&mut system, token, &refs, &prior, &hyper)?
            } else {
                out_of_context_pivot(&mut system, token, &refs, &prior, &hyper)?
            };
            let prov = self
                .provenance("pivot-text")?
                .input("base", file_hash(self.base_path()?)?)
                .seed("pivot", hyper.seed)
                .param("identity", label)
                .param("in_context", variant.in_context)
                .param("lambda_pr", variant.lambda_pr)
                .param(WALL_MS, elapsed_ms(start));
            self.save_checkpoint(&system, &path, prov, &log, &format!("textual-{label}-{tag}-{}", short(&key)))?;
            Ok(Personalized { system, token, label, checkpoint: path })
        })
    }

    /// Full dual-pivot personalization of `label`.
    pub fn personalized(&self, label: u32) -> Result<Arc<Personalized>> {
        memo_map(&self.pivoted, &label, || {
            let key = self.pivot_key(label)?;
            let path = self.dir.join(format!("pivot-{label}-{}.safetensors", short(&key)));
            if path.exists() {
                let system = load_system(&path)?;
                let token = system.token(&token_name(label))?;
                return Ok(Personalized { system, token, label, checkpoint: path });
            }
            let stage_a = self.textual(label, self.default_variant())?;
            let mut system = stage_a.system.deep_clone()?;
            let start = Instant::now();
            let generic_labels = self.generic_labels()?;
            let generic = ImageSet::from_dataset(&*self.dataset()?, Some(Split::Reference), |l| generic_labels.contains(&l));
            log::info!("model-based pivot on identity {label} using identities {generic_labels:?}");
            let log = stage_b_model_pivot(&mut system, &generic, label, &self.config.pivot.model)?;
            let prov = self
                .provenance("pivot-model")?
                .input("textual", file_hash(&stage_a.checkpoint)?)
                .seed("pivot", self.config.pivot.model.seed)
                .param("identity", label)
                .param(WALL_MS, elapsed_ms(start));
            self.save_checkpoint(&system, &path, prov, &log, &format!("pivot-{label}-{}", short(&key)))?;
            Ok(Personalized {
                system,
                token: stage_a.token,
                label,
                checkpoint: path,
            })
        })
    }

    /// Recorded wall time of the artifacts every personalization shares:
    /// dataset, embedder and base training. Artifacts without a record count
    /// as zero.
    pub fn shared_wall_ms(&self) -> Result<f64> {
        let paths = [self.dataset_dir()?.join("manifest.json"), self.embedder_path()?, self.base_path()?];
        Ok(paths.iter().filter_map(recorded_wall_ms).sum())
    }

    /// Recorded wall time of both pivots of `label`.
    pub fn pivot_wall_ms(&self, label: u32) -> Result<f64> {
        let textual_key = self.textual_key(label, self.default_variant())?;
        let paths = [
            self.dir.join(format!("textual-{label}-in-{}.safetensors", short(&textual_key))),
            self.dir.join(format!("pivot-{label}-{}.safetensors", short(&self.pivot_key(label)?))),
        ];
        Ok(paths.iter().filter_map(recorded_wall_ms).sum())
    }

    // ------------------------------------------------------------ evaluation

    pub fn blind_config(&self) -> RestoreConfig {
        RestoreConfig {
            gamma: 1.0,
            w: 0.0,
            prompt: NULL_TOKEN,
            passes: 1,
            ..self.config.restore.clone()
        }
    }

    pub fn personalized_config(&self, token: TokenId) -> RestoreConfig {
        RestoreConfig {
            prompt: token,
            passes: 1,
            ..self.config.restore.clone()
        }
    }

    /// Held-out test probes of `label` under the evaluation degradation.
    pub fn probes(&self, label: u32) -> Result<Vec<Probe>> {
        let e = &self.config.evaluate;
        make_probes(&*self.dataset()?, label, Split::Test, &self.config.degrade, e.realizations, e.seed)
    }

    fn pivot_label(&self, k: usize) -> Result<u32> {
        self.config.pivot.identities.get(k).copied().ok_or_else(|| {
            Error::Precondition(format!("experiment needs at least {} pivot identities", k + 1))
        })
    }

    fn first_realizations(probes: Vec<Probe>, n: usize) -> Vec<Probe> {
        probes
            .into_iter()
            .filter(|p| p.realization == 0)
            .take(n)
            .enumerate()
            .map(|(i, p)| Probe { probe: i, ..p })
            .collect()
    }

    /// One clean test image per non-pivot identity, with a degraded copy.
    fn drift_probes(&self) -> Result<Vec<Probe>> {
        let ds = self.dataset()?;
        let ids = &self.config.pivot.identities;
        let e = &self.config.evaluate;
        let mut out = Vec::new();
        for label in ds.labels().into_iter().filter(|l| !ids.contains(l)) {
            if out.len() >= e.drift_probes {
                break;
            }
            let mut p = make_probes(&ds, label, Split::Test, &self.config.degrade, 1, e.seed)?;
            if !p.is_empty() {
                let first = p.swap_remove(0);
                out.push(Probe { probe: out.len(), ..first });
            }
        }
        Ok(out)
    }

    /// Runs one experiment end to end, training whatever is not cached yet.
    pub fn run(&self, kind: ExperimentKind) -> Result<ExperimentOutput> {
        let emb = self.embedder()?;
        let e = &self.config.evaluate;
        let ctx = EvalContext {
            embedder: &emb,
            chunk: e.chunk,
        };
        let blind = self.base()?;
        let mut prov = self
            .provenance(kind.name())?
            .input("embedder", file_hash(self.embedder_path()?)?)
            .input("base", file_hash(self.base_path()?)?)
            .seed("evaluate", e.seed)
            .seed("restore", self.config.restore.seed);
        let mut out = match kind {
            ExperimentKind::SeedVariation => {
                let p = self.personalized(self.pivot_label(0)?)?;
                prov = prov.input("personalized", file_hash(&p.checkpoint)?);
                let probes = Self::first_realizations(self.probes(p.label)?, e.seed_probes);
                experiments::seed_variation(
                    &ctx,
                    blind.as_ref(),
                    &self.blind_config(),
                    &p.system,
                    &self.personalized_config(p.token),
                    &probes,
                    &e.seeds,
                )?
            }
            ExperimentKind::GammaAblation => {
                let p = self.personalized(self.pivot_label(0)?)?;
                prov = prov.input("personalized", file_hash(&p.checkpoint)?);
                experiments::gamma_ablation(&ctx, &p.system, &self.personalized_config(p.token), &self.probes(p.label)?, &e.gammas)?
            }
            ExperimentKind::CfgSweep => {
                let p = self.personalized(self.pivot_label(0)?)?;
                prov = prov.input("personalized", file_hash(&p.checkpoint)?);
                experiments::cfg_sweep(&ctx, &p.system, &self.personalized_config(p.token), &self.probes(p.label)?, &e.ws)?
            }
            ExperimentKind::EncoderSwap => {
                let a = self.personalized(self.pivot_label(0)?)?;
                let b = self.personalized(self.pivot_label(1)?)?;
                prov = prov
                    .input("personalized-a", file_hash(&a.checkpoint)?)
                    .input("personalized-b", file_hash(&b.checkpoint)?);
                experiments::encoder_swap(&ctx, &b.system, &a.system, &self.personalized_config(b.token), &self.probes(b.label)?)?
            }
            ExperimentKind::MainBenchmark => {
                let label = self.pivot_label(0)?;
                let refs = self.references(label)?;
                if refs.len() != REFERENCE_PER_ID {
                    return Err(Error::Precondition(format!(
                        "benchmark expects {REFERENCE_PER_ID} reference images, identity {label} has {}",
                        refs.len()
                    )));
                }
                let p = self.personalized(label)?;
                prov = prov.input("personalized", file_hash(&p.checkpoint)?);
                experiments::main_benchmark(
                    &ctx,
                    blind.as_ref(),
                    &self.blind_config(),
                    &p.system,
                    &self.personalized_config(p.token),
                    &self.probes(label)?,
                )?
            }
            ExperimentKind::OutOfContext => {
                let label = self.pivot_label(0)?;
                let v = self.default_variant();
                let inside = self.textual(label, v)?;
                let outside = self.textual(label, TextualVariant { in_context: false, ..v })?;
                prov = prov
                    .input("in-context", file_hash(&inside.checkpoint)?)
                    .input("out-of-context", file_hash(&outside.checkpoint)?);
                experiments::out_of_context(
                    &ctx,
                    blind.as_ref(),
                    &self.blind_config(),
                    &inside.system,
                    &outside.system,
                    &self.personalized_config(inside.token),
                    &self.probes(label)?,
                )?
            }
            ExperimentKind::PriorDrift => {
                let label = self.pivot_label(0)?;
                let v = self.default_variant();
                if v.lambda_pr <= 0.0 {
                    return Err(Error::Precondition("prior drift needs pivot.text.lambda_pr > 0".into()));
                }
                let with = self.textual(label, v)?;
                let without = self.textual(label, TextualVariant { lambda_pr: 0.0, ..v })?;
                prov = prov
                    .input("with-prior", file_hash(&with.checkpoint)?)
                    .input("without-prior", file_hash(&without.checkpoint)?);
                experiments::prior_drift(
                    blind.as_ref(),
                    &[("with-prior", &with.system), ("without-prior", &without.system)],
                    &self.drift_probes()?,
                    e.seed,
                )?
            }
            ExperimentKind::Multipass => {
                let p = self.personalized(self.pivot_label(0)?)?;
                prov = prov.input("personalized", file_hash(&p.checkpoint)?);
                let probes = make_probes(
                    &*self.dataset()?,
                    p.label,
                    Split::Test,
                    &e.multipass_degradation,
                    1,
                    e.seed,
                )?;
                let probes = Self::first_realizations(probes, e.multipass_probes);
                let cfg = RestoreConfig {
                    passes: e.multipass_passes,
                    ..self.personalized_config(p.token)
                };
                experiments::multipass(&ctx, &p.system, &cfg, &probes)?
            }
        };
        out.report.provenance = Some(prov);
        Ok(out)
    }

    /// Runs an experiment and writes its report files under `out_dir`.
    pub fn run_and_write(&self, kind: ExperimentKind, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
        let out = self.run(kind)?;
        out.report.write(out_dir, Some(&out.sheet))?;
        Ok(out.report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_count_is_positive() {
        assert!(worker_count() >= 1);
    }

    #[test]
    fn cache_keys_track_their_sections() {
        let dir = tempfile::tempdir().unwrap();
        let a = Pipeline::new(RunConfig::default(), dir.path()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.restore.w = 4.0;
        cfg.pivot.model.steps = 3;
        let b = Pipeline::new(cfg, dir.path()).unwrap();
        // restoration and stage-B settings do not invalidate the base system
        assert_eq!(a.base_path().unwrap(), b.base_path().unwrap());
        assert_eq!(a.textual_key(0, a.default_variant()).unwrap(), b.textual_key(0, b.default_variant()).unwrap());
        assert_ne!(a.pivot_key(0).unwrap(), b.pivot_key(0).unwrap());
        let mut cfg = RunConfig::default();
        cfg.train.lr = 2.0 * RunConfig::default().train.lr;
        let c = Pipeline::new(cfg, dir.path()).unwrap();
        assert_ne!(a.base_path().unwrap(), c.base_path().unwrap());
        assert_eq!(a.embedder_path().unwrap(), c.embedder_path().unwrap());
    }
}
