//! Training: base blind-restoration training of `{G, E}`, the in-context
//! textual pivot (Stage A, tunes G with E frozen), the model-based pivot
//! (Stage B, tunes E around the frozen personalized G), and the
//! out-of-context textual pivot kept for ablation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade, DegradationRanges};
use crate::error::{invalid, Error, Result};
use crate::facegen::{Dataset, Split};
use crate::image::{to_model_batch, Image};
use crate::nets::{EpsModel, RestorationSystem, TokenId, CLASS_TOKEN, NULL_TOKEN};
use crate::ops;
use crate::rng::{normal_tensor, stream, StreamRng};
use crate::schedule::{add_noise_batch, NoiseSchedule};

const STREAM_BASE: u64 = 0xBA5E;
const STREAM_TEXT: u64 = 0x7E87;
const STREAM_MODEL: u64 = 0x30DE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Prior-preservation weight.
    pub lambda_pr: f64,
    pub seed: u64,
    /// Timestep sampling range as fractions of T.
    pub t_lo: f64,
    pub t_hi: f64,
    /// Base training only: share of items trained under the class token
    /// instead of the null token.
    pub class_fraction: f64,
    /// Degradations applied on the fly to produce conditioning images.
    pub degradation: DegradationRanges,
    /// Textual pivots only: the identity-token row gets its own optimizer at
    /// `lr * token_lr_scale`; the other token rows stay fixed.
    pub token_lr_scale: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 1500,
            batch: 16,
            lambda_pr: 1.0,
            seed: 0,
            t_lo: 0.0,
            t_hi: 1.0,
            class_fraction: 0.5,
            degradation: DegradationRanges::default(),
            token_lr_scale: 1.0,
        }
    }
}

impl TrainHyper {
    pub fn base() -> Self {
        Self::default()
    }

    /// Stage A defaults: lower-noise half of the schedule.
    pub fn textual_pivot() -> Self {
        Self {
            lr: 2e-4,
            steps: 300,
            t_hi: 0.5,
            token_lr_scale: 25.0,
            ..Self::default()
        }
    }

    pub fn model_pivot() -> Self {
        Self {
            lr: 2e-4,
            steps: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if !(self.lambda_pr >= 0.0) {
            return Err(invalid("prior weight must be >= 0"));
        }
        if !(0.0 <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= 1.0) {
            return Err(invalid(format!(
                "timestep range [{}, {}] must satisfy 0 <= lo < hi <= 1",
                self.t_lo, self.t_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.class_fraction) {
            return Err(invalid("class fraction must lie in [0, 1]"));
        }
        if !(self.token_lr_scale > 0.0 && self.token_lr_scale.is_finite()) {
            return Err(invalid("token learning-rate scale must be positive"));
        }
        self.degradation.validate()
    }
}

/// Labeled clean images.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
}

impl ImageSet {
    pub fn new(images: Vec<Image>, labels: Vec<u32>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(invalid("one label per image required"));
        }
        Ok(Self { images, labels })
    }

    /// Rows of `ds` whose label passes `keep`, optionally restricted to a split.
    pub fn from_dataset(ds: &Dataset, split: Option<Split>, keep: impl Fn(u32) -> bool) -> Self {
        let mut out = Self::default();
        for (row, img) in ds.manifest.rows.iter().zip(&ds.images) {
            if keep(row.label) && split.is_none_or(|s| row.split == s) {
                out.images.push(img.clone());
                out.labels.push(row.label);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn contains_label(&self, label: u32) -> bool {
        self.labels.contains(&label)
    }
}

/// Other-identity images anchoring the class token during Stage A.
#[derive(Debug, Clone)]
pub struct PriorSet {
    set: ImageSet,
}

impl PriorSet {
    pub fn new(set: ImageSet, pivot_label: u32) -> Result<Self> {
        if set.contains_label(pivot_label) {
            return Err(Error::Precondition(format!(
                "prior set contains images of the pivot identity {pivot_label}"
            )));
        }
        Ok(Self { set })
    }

    pub fn empty() -> Self {
        Self { set: ImageSet::default() }
    }

    pub fn images(&self) -> &[Image] {
        &self.set.images
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// One denoising regression problem with its noise already drawn.
#[derive(Debug, Clone)]
pub struct DenoiseTerm {
    /// Clean targets, `(C, B, H, W)` in model space.
    pub clean: Tensor,
    /// Degraded conditioning images; `None` disables guidance features.
    pub cond: Option<Tensor>,
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

/// Mean squared error between predicted and drawn noise.
pub fn denoise_loss<M: EpsModel + ?Sized>(model: &M, term: &DenoiseTerm, tokens: &[TokenId]) -> Result<Tensor> {
    if let Some(bad) = tokens.iter().find(|t| !model.has_token(**t)) {
        return Err(Error::UnknownToken(format!("id {}", bad.0)));
    }
    let x_t = add_noise_batch(&term.clean, &term.eps, &term.ts, model.schedule())?;
    let features = match &term.cond {
        Some(c) => model.guidance(c, &term.ts)?,
        None => None,
    };
    let eps_hat = model.eps(&x_t, &term.ts, tokens, features.as_ref())?;
    ops::mse(&eps_hat, &term.eps)
}

/// Base-training objective for one term: per-item tokens, guidance active.
pub fn base_loss(system: &RestorationSystem, term: &DenoiseTerm, tokens: &[TokenId]) -> Result<Tensor> {
    denoise_loss(system, term, tokens)
}

/// Personalization loss on pre-drawn terms: identity term under `prompt`
/// plus `lambda_pr` times the class-token prior term.
pub fn db_loss_with<M: EpsModel + ?Sized>(
    model: &M,
    identity: &DenoiseTerm,
    prior: Option<&DenoiseTerm>,
    prompt: TokenId,
    lambda_pr: f64,
) -> Result<Tensor> {
    if !model.has_token(prompt) {
        return Err(Error::UnknownToken(format!("id {}", prompt.0)));
    }
    let b = identity.ts.len();
    let l1 = denoise_loss(model, identity, &vec![prompt; b])?;
    if lambda_pr == 0.0 {
        return Ok(l1);
    }
    let prior = prior.ok_or_else(|| Error::Precondition("prior batch required when lambda_pr > 0".into()))?;
    let l2 = denoise_loss(model, prior, &vec![CLASS_TOKEN; prior.ts.len()])?;
    Ok((l1 + (l2 * lambda_pr)?)?)
}

/// Clean images and their optional conditioning, in model space.
#[derive(Debug, Clone)]
pub struct DbBatch {
    pub clean: Tensor,
    pub cond: Option<Tensor>,
}

/// Draws timesteps in `[t_lo, t_hi]` and noise, then evaluates [`db_loss_with`].
pub fn db_loss<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    identity: &DbBatch,
    prior: Option<&DbBatch>,
    prompt: TokenId,
    lambda_pr: f64,
    t_range: (f64, f64),
    rng: &mut R,
) -> Result<Tensor> {
    let draw = |b: &DbBatch, rng: &mut R| -> Result<DenoiseTerm> {
        let n = b.clean.dims4()?.1;
        let ts = sample_timesteps(rng, model.schedule(), t_range, n);
        let eps = normal_tensor(rng, b.clean.shape().clone(), b.clean.dtype(), b.clean.device())?;
        Ok(DenoiseTerm {
            clean: b.clean.clone(),
            cond: b.cond.clone(),
            ts,
            eps,
        })
    };
    let id_term = draw(identity, rng)?;
    let prior_term = match prior {
        Some(p) if lambda_pr > 0.0 => Some(draw(p, rng)?),
        _ => None,
    };
    db_loss_with(model, &id_term, prior_term.as_ref(), prompt, lambda_pr)
}

/// Integer timesteps uniform over `[max(1, ceil(lo*T)), max(that, floor(hi*T))]`.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, s: &NoiseSchedule, (lo, hi): (f64, f64), n: usize) -> Vec<usize> {
    let tt = s.steps();
    let a = ((lo * tt as f64).ceil() as usize).clamp(1, tt);
    let b = ((hi * tt as f64).floor() as usize).clamp(a, tt);
    (0..n).map(|_| rng.random_range(a..=b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Means of the first and last `n` recorded losses.
    pub fn head_tail_means(&self, n: usize) -> (f64, f64) {
        let l = self.losses();
        let n = n.min(l.len());
        (Self::mean(&l[..n]), Self::mean(&l[l.len() - n..]))
    }

    /// Means of the first and last quartile of recorded losses.
    pub fn quartile_means(&self) -> (f64, f64) {
        self.head_tail_means((self.rows.len() / 4).max(1))
    }

    /// Appends one JSON object per row.
    pub fn append_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        for r in &self.rows {
            let line = serde_json::json!({"stage": self.stage, "step": r.step, "loss": r.loss, "wall_ms": r.wall_ms});
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn optimizer(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// The token table trained on its own, with every row but one masked out.
struct TokenGroup {
    table: Var,
    row_mask: Tensor,
}

impl TokenGroup {
    fn new(table: Var, row: TokenId) -> Result<Self> {
        let (n, _) = table.as_tensor().dims2()?;
        let t = table.as_tensor();
        let mask: Vec<f32> = (0..n).map(|i| if i == row.index() { 1.0 } else { 0.0 }).collect();
        let row_mask = Tensor::from_vec(mask, (n, 1), t.device())?.to_dtype(t.dtype())?;
        Ok(Self { table, row_mask })
    }
}

/// Shared optimization loop: `loss_at(step, rng)` builds the step's loss.
fn run_loop(
    stage: &'static str,
    vars: Vec<Var>,
    token: Option<TokenGroup>,
    hyper: &TrainHyper,
    stream_id: u64,
    mut loss_at: impl FnMut(usize, &mut StreamRng) -> Result<Tensor>,
) -> Result<TrainLog> {
    let mut log = TrainLog::new(stage);
    if hyper.steps == 0 {
        return Ok(log);
    }
    let mut opt = optimizer(vars, hyper.lr)?;
    let mut token_opt = match &token {
        Some(g) => Some(optimizer(vec![g.table.clone()], hyper.lr * hyper.token_lr_scale)?),
        None => None,
    };
    let start = Instant::now();
    for step in 0..hyper.steps {
        let mut rng = stream(hyper.seed, &[stream_id, step as u64]);
        let loss = loss_at(step, &mut rng)?;
        let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !lv.is_finite() {
            return Err(Error::TrainingFailure {
                stage,
                step,
                reason: format!("loss is {lv}"),
            });
        }
        let mut grads = loss.backward()?;
        if let (Some(g), Some(o)) = (&token, token_opt.as_mut()) {
            let t = g.table.as_tensor();
            if let Some(d) = grads.remove(t) {
                grads.insert(t, d.broadcast_mul(&g.row_mask)?);
            }
            o.step(&grads)?;
            grads.remove(t);
        }
        opt.step(&grads)?;
        log.rows.push(LogRow {
            step,
            loss: lv,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if step % 100 == 0 || step + 1 == hyper.steps {
            log::debug!("{stage} step {step} loss {lv:.5}");
        }
    }
    Ok(log)
}

/// Picks `n` images with replacement and degrades each with its own config.
fn draw_pairs<R: Rng + ?Sized>(
    images: &[Image],
    n: usize,
    ranges: &DegradationRanges,
    rng: &mut R,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let mut clean = Vec::with_capacity(n);
    let mut cond = Vec::with_capacity(n);
    for _ in 0..n {
        let img = &images[rng.random_range(0..images.len())];
        let cfg = ranges.sample(rng);
        cond.push(degrade(img, &cfg, rng)?);
        clean.push(img.clone());
    }
    Ok((clean, cond))
}

fn batch_of(system: &RestorationSystem, images: &[Image]) -> Result<Tensor> {
    to_model_batch(images, &Device::Cpu, system.dtype())
}

fn check_images(system: &RestorationSystem, images: &[Image], what: &str) -> Result<()> {
    let s = system.arch().image_size;
    if let Some(bad) = images.iter().find(|i| i.width() != s || i.height() != s || i.channels() != 3) {
        return Err(invalid(format!("{what} image has shape {:?}, expected {s}x{s}x3", bad.shape())));
    }
    Ok(())
}

fn set_trainable(system: &mut RestorationSystem, g: bool, e: bool) {
    system.denoiser.params.set_trainable(g);
    system.encoder.params.set_trainable(e);
}

/// Trains G and E jointly for blind restoration. Each item is noised from a
/// clean image while E sees a freshly degraded copy; the null token is used
/// except for a `class_fraction` share that trains the class branch.
pub fn train_base(system: &mut RestorationSystem, data: &ImageSet, hyper: &TrainHyper) -> Result<TrainLog> {
    hyper.validate()?;
    if data.distinct_labels() < 2 {
        return Err(Error::Precondition("base training needs at least two identities".into()));
    }
    check_images(system, &data.images, "training")?;
    set_trainable(system, true, true);
    let mut vars = system.denoiser.params.vars();
    vars.extend(system.encoder.params.vars());
    let sys: &RestorationSystem = system;
    let result = run_loop("base", vars, None, hyper, STREAM_BASE, |_, rng| {
        let (clean, cond) = draw_pairs(&data.images, hyper.batch, &hyper.degradation, rng)?;
        let ts = sample_timesteps(rng, sys.schedule(), (hyper.t_lo, hyper.t_hi), hyper.batch);
        let tokens: Vec<TokenId> = (0..hyper.batch)
            .map(|_| {
                if rng.random::<f64>() < hyper.class_fraction {
                    CLASS_TOKEN
                } else {
                    NULL_TOKEN
                }
            })
            .collect();
        let clean = batch_of(sys, &clean)?;
        let eps = normal_tensor(rng, clean.shape().clone(), clean.dtype(), clean.device())?;
        let term = DenoiseTerm {
            clean,
            cond: Some(batch_of(sys, &cond)?),
            ts,
            eps,
        };
        base_loss(sys, &term, &tokens)
    });
    set_trainable(system, false, false);
    result
}

fn textual_pivot(
    stage: &'static str,
    system: &mut RestorationSystem,
    token: TokenId,
    refs: &[Image],
    prior: &PriorSet,
    hyper: &TrainHyper,
    in_context: bool,
) -> Result<TrainLog> {
    hyper.validate()?;
    if !system.has_token(token) {
        return Err(Error::UnknownToken(format!("id {}", token.0)));
    }
    if refs.is_empty() {
        return Err(invalid("at least one reference image required"));
    }
    check_images(system, refs, "reference")?;
    check_images(system, prior.images(), "prior")?;
    let use_prior = hyper.lambda_pr > 0.0;
    if use_prior && prior.is_empty() {
        return Err(Error::Precondition("prior set is empty but lambda_pr > 0".into()));
    }
    set_trainable(system, true, false);
    let table = system
        .denoiser
        .params
        .var("tokens")
        .cloned()
        .ok_or_else(|| Error::InvalidState("denoiser has no token table".into()))?;
    let vars: Vec<Var> = system
        .denoiser
        .params
        .vars()
        .into_iter()
        .filter(|v| v.as_tensor().id() != table.as_tensor().id())
        .collect();
    let group = TokenGroup::new(table, token)?;
    let sys: &RestorationSystem = system;
    let result = run_loop(stage, vars, Some(group), hyper, STREAM_TEXT, |_, rng| {
        let mk = |images: &[Image], rng: &mut StreamRng| -> Result<DbBatch> {
            let (clean, cond) = draw_pairs(images, hyper.batch, &hyper.degradation, rng)?;
            Ok(DbBatch {
                clean: batch_of(sys, &clean)?,
                cond: if in_context { Some(batch_of(sys, &cond)?) } else { None },
            })
        };
        let id = mk(refs, rng)?;
        let pr = if use_prior { Some(mk(prior.images(), rng)?) } else { None };
        db_loss(sys, &id, pr.as_ref(), token, hyper.lambda_pr, (hyper.t_lo, hyper.t_hi), rng)
    });
    set_trainable(system, false, false);
    result
}

/// Stage A: tunes all of G (token table included) on the references under
/// the identity token, with E active and frozen.
pub fn stage_a_textual_pivot(
    system: &mut RestorationSystem,
    token: TokenId,
    refs: &[Image],
    prior: &PriorSet,
    hyper: &TrainHyper,
) -> Result<TrainLog> {
    textual_pivot("stage-a", system, token, refs, prior, hyper, true)
}

/// Ablation: the same tuning with guidance features disabled, i.e. G is
/// personalized outside the restoration system.
pub fn out_of_context_pivot(
    system: &mut RestorationSystem,
    token: TokenId,
    refs: &[Image],
    prior: &PriorSet,
    hyper: &TrainHyper,
) -> Result<TrainLog> {
    textual_pivot("out-of-context", system, token, refs, prior, hyper, false)
}

/// Stage B: tunes E around the frozen personalized G on identity-agnostic
/// images under the class token.
pub fn stage_b_model_pivot(
    system: &mut RestorationSystem,
    generic: &ImageSet,
    pivot_label: u32,
    hyper: &TrainHyper,
) -> Result<TrainLog> {
    hyper.validate()?;
    if generic.contains_label(pivot_label) {
        return Err(Error::Precondition(format!(
            "generic set contains images of the pivot identity {pivot_label}"
        )));
    }
    if generic.is_empty() {
        return Err(invalid("generic set is empty"));
    }
    check_images(system, &generic.images, "generic")?;
    set_trainable(system, false, true);
    let vars = system.encoder.params.vars();
    let sys: &RestorationSystem = system;
    let result = run_loop("stage-b", vars, None, hyper, STREAM_MODEL, |_, rng| {
        let (clean, cond) = draw_pairs(&generic.images, hyper.batch, &hyper.degradation, rng)?;
        let ts = sample_timesteps(rng, sys.schedule(), (hyper.t_lo, hyper.t_hi), hyper.batch);
        let clean = batch_of(sys, &clean)?;
        let eps = normal_tensor(rng, clean.shape().clone(), clean.dtype(), clean.device())?;
        let term = DenoiseTerm {
            clean,
            cond: Some(batch_of(sys, &cond)?),
            ts,
            eps,
        };
        denoise_loss(sys, &term, &vec![CLASS_TOKEN; hyper.batch])
    });
    set_trainable(system, false, false);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::Dataset;
    use crate::nets::{ArchConfig, GuidanceFeatures, TokenInit};
    use crate::rng::seeded;
    use crate::schedule::{make_schedule, ScheduleKind};

    /// Predicts exactly the noise that produced `x_t` from a known clean batch.
    struct Oracle {
        s: NoiseSchedule,
        clean: Tensor,
    }

    impl EpsModel for Oracle {
        fn schedule(&self) -> &NoiseSchedule {
            &self.s
        }
        fn has_token(&self, t: TokenId) -> bool {
            t.0 < 3
        }
        fn guidance(&self, _: &Tensor, _: &[usize]) -> Result<Option<GuidanceFeatures>> {
            Ok(None)
        }
        fn eps(&self, x_t: &Tensor, ts: &[usize], _: &[TokenId], _: Option<&GuidanceFeatures>) -> Result<Tensor> {
            let b = ts.len();
            let a: Vec<f64> = ts.iter().map(|&t| self.s.alpha(t)).collect();
            let g: Vec<f64> = ts.iter().map(|&t| self.s.sigma(t)).collect();
            let a = Tensor::from_vec(a, (1, b, 1, 1), x_t.device())?.to_dtype(x_t.dtype())?;
            let g = Tensor::from_vec(g, (1, b, 1, 1), x_t.device())?.to_dtype(x_t.dtype())?;
            Ok(x_t.broadcast_sub(&self.clean.broadcast_mul(&a)?)?.broadcast_div(&g)?)
        }
    }

    /// Returns a fixed tensor regardless of input.
    struct Constant {
        s: NoiseSchedule,
        out: Tensor,
    }

    impl EpsModel for Constant {
        fn schedule(&self) -> &NoiseSchedule {
            &self.s
        }
        fn has_token(&self, t: TokenId) -> bool {
            t.0 < 3
        }
        fn guidance(&self, _: &Tensor, _: &[usize]) -> Result<Option<GuidanceFeatures>> {
            Ok(None)
        }
        fn eps(&self, _: &Tensor, _: &[usize], _: &[TokenId], _: Option<&GuidanceFeatures>) -> Result<Tensor> {
            Ok(self.out.clone())
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn oracle_denoiser_gives_zero_loss() {
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let clean = normal_tensor(&mut seeded(1), (3, 4, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let m = Oracle { s, clean: clean.clone() };
        let batch = DbBatch { clean, cond: None };
        let l = db_loss(&m, &batch, None, TokenId(2), 0.0, (0.0, 1.0), &mut seeded(2)).unwrap();
        assert!(scalar(&l).abs() < 1e-20);
    }

    #[test]
    fn hand_computed_two_pixel_loss() {
        // 1 channel, 1 item, 1x2 image; output fixed so the loss is a plain MSE
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let t = |v: [f64; 2]| Tensor::from_vec(v.to_vec(), (1, 1, 1, 2), &Device::Cpu).unwrap();
        let m = Constant {
            s,
            out: t([0.5, -1.0]),
        };
        let id = DenoiseTerm {
            clean: t([0.1, 0.2]),
            cond: None,
            ts: vec![3],
            eps: t([1.0, 1.0]),
        };
        let pr = DenoiseTerm {
            clean: t([0.0, 0.0]),
            cond: None,
            ts: vec![7],
            eps: t([0.5, 0.0]),
        };
        // term1 = ((0.5-1)^2 + (-1-1)^2) / 2 = 2.125; term2 = (0 + 1) / 2 = 0.5
        let l = db_loss_with(&m, &id, Some(&pr), TokenId(2), 0.5).unwrap();
        assert!((scalar(&l) - (2.125 + 0.5 * 0.5)).abs() < 1e-12);
        let l0 = db_loss_with(&m, &id, None, TokenId(2), 0.0).unwrap();
        assert!((scalar(&l0) - 2.125).abs() < 1e-12);
        assert!(matches!(db_loss_with(&m, &id, None, TokenId(2), 1.0), Err(Error::Precondition(_))));
        assert!(matches!(db_loss_with(&m, &id, None, TokenId(7), 0.0), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn loss_is_nonnegative() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        for seed in 0..5 {
            let mut rng = seeded(seed);
            let out = normal_tensor(&mut rng, (3, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
            let clean = normal_tensor(&mut rng, (3, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
            let m = Constant { s: s.clone(), out };
            let b = DbBatch { clean, cond: None };
            let l = db_loss(&m, &b, Some(&b), TokenId(2), 1.0, (0.0, 1.0), &mut rng).unwrap();
            assert!(scalar(&l) >= 0.0);
        }
    }

    #[test]
    fn timestep_range_is_respected() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let ts = sample_timesteps(&mut seeded(0), &s, (0.0, 0.5), 2000);
        assert!(ts.iter().all(|&t| (1..=50).contains(&t)));
        assert!(ts.contains(&1) && ts.contains(&50));
        let ts = sample_timesteps(&mut seeded(0), &s, (0.25, 1.0), 2000);
        assert!(ts.iter().all(|&t| (25..=100).contains(&t)));
    }

    #[test]
    fn hyper_validation() {
        assert!(TrainHyper::default().validate().is_ok());
        assert!(TrainHyper { lr: 0.0, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { t_lo: 0.5, t_hi: 0.5, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { lambda_pr: -1.0, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { batch: 0, ..TrainHyper::default() }.validate().is_err());
        assert!(TrainHyper { token_lr_scale: 0.0, ..TrainHyper::default() }.validate().is_err());
    }

    fn tiny() -> (RestorationSystem, Dataset) {
        let arch = ArchConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            widths: vec![8, 16],
            groups: 4,
            time_dim: 16,
            freq_dim: 8,
        };
        let sys = RestorationSystem::init(&arch, make_schedule(50, ScheduleKind::Cosine).unwrap(), 3).unwrap();
        (sys, Dataset::generate(3, 4, 32, 5).unwrap())
    }

    fn small_hyper(steps: usize) -> TrainHyper {
        TrainHyper {
            steps,
            batch: 4,
            lr: 1e-3,
            ..TrainHyper::default()
        }
    }

    #[test]
    fn zero_steps_leave_system_unchanged() {
        let (mut sys, ds) = tiny();
        let e = sys.encoder_hash().unwrap();
        let data = ImageSet::from_dataset(&ds, None, |_| true);
        let log = train_base(&mut sys, &data, &small_hyper(0)).unwrap();
        assert!(log.rows.is_empty());
        let v = sys.add_identity_token("v", TokenInit::ClassCopy, &mut seeded(0)).unwrap();
        let g = sys.denoiser_hash().unwrap();
        let prior = PriorSet::new(ImageSet::from_dataset(&ds, None, |l| l != 0), 0).unwrap();
        stage_a_textual_pivot(&mut sys, v, &ds.images_of(0, None), &prior, &small_hyper(0)).unwrap();
        out_of_context_pivot(&mut sys, v, &ds.images_of(0, None), &prior, &small_hyper(0)).unwrap();
        assert_eq!(sys.denoiser_hash().unwrap(), g);
        assert_eq!(sys.encoder_hash().unwrap(), e);
    }

    #[test]
    fn freeze_contracts_hold() {
        let (mut sys, ds) = tiny();
        let data = ImageSet::from_dataset(&ds, None, |_| true);
        train_base(&mut sys, &data, &small_hyper(3)).unwrap();
        let v = sys.add_identity_token("v", TokenInit::ClassCopy, &mut seeded(0)).unwrap();
        let prior = PriorSet::new(ImageSet::from_dataset(&ds, None, |l| l != 0), 0).unwrap();
        let (g0, e0) = (sys.denoiser_hash().unwrap(), sys.encoder_hash().unwrap());
        stage_a_textual_pivot(&mut sys, v, &ds.images_of(0, None), &prior, &small_hyper(2)).unwrap();
        let g1 = sys.denoiser_hash().unwrap();
        assert_ne!(g1, g0);
        assert_eq!(sys.encoder_hash().unwrap(), e0);
        let generic = ImageSet::from_dataset(&ds, None, |l| l == 1);
        stage_b_model_pivot(&mut sys, &generic, 0, &small_hyper(2)).unwrap();
        assert_eq!(sys.denoiser_hash().unwrap(), g1);
        assert_ne!(sys.encoder_hash().unwrap(), e0);
        let e1 = sys.encoder_hash().unwrap();
        out_of_context_pivot(&mut sys, v, &ds.images_of(0, None), &prior, &small_hyper(2)).unwrap();
        assert_eq!(sys.encoder_hash().unwrap(), e1);
    }

    #[test]
    fn textual_pivot_moves_only_the_identity_token_row() {
        let (mut sys, ds) = tiny();
        let earlier = sys.add_identity_token("u", TokenInit::Random, &mut seeded(1)).unwrap();
        let v = sys.add_identity_token("v", TokenInit::ClassCopy, &mut seeded(0)).unwrap();
        let row = |s: &RestorationSystem, t: TokenId| s.denoiser.token_embedding(t).unwrap().to_vec1::<f32>().unwrap();
        let before: Vec<_> = [NULL_TOKEN, CLASS_TOKEN, earlier, v].iter().map(|&t| row(&sys, t)).collect();
        let prior = PriorSet::new(ImageSet::from_dataset(&ds, None, |l| l != 0), 0).unwrap();
        let hyper = TrainHyper {
            token_lr_scale: 10.0,
            ..small_hyper(3)
        };
        stage_a_textual_pivot(&mut sys, v, &ds.images_of(0, None), &prior, &hyper).unwrap();
        let after: Vec<_> = [NULL_TOKEN, CLASS_TOKEN, earlier, v].iter().map(|&t| row(&sys, t)).collect();
        assert_eq!(before[..3], after[..3]);
        let moved = before[3].iter().zip(&after[3]).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        // three Adam steps at 10x the base rate move each coordinate by up to 3e-2
        assert!(moved > 1e-2, "identity row moved only {moved}");
    }

    #[test]
    fn preconditions_are_enforced() {
        let (mut sys, ds) = tiny();
        let one = ImageSet::from_dataset(&ds, None, |l| l == 0);
        assert!(matches!(train_base(&mut sys, &one, &small_hyper(1)), Err(Error::Precondition(_))));
        let with_pivot = ImageSet::from_dataset(&ds, None, |_| true);
        assert!(matches!(
            stage_b_model_pivot(&mut sys, &with_pivot, 0, &small_hyper(1)),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(PriorSet::new(with_pivot, 2), Err(Error::Precondition(_))));
        let prior = PriorSet::empty();
        assert!(matches!(
            stage_a_textual_pivot(&mut sys, TokenId(5), &ds.images_of(0, None), &prior, &small_hyper(1)),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn divergence_reports_the_step() {
        let (mut sys, ds) = tiny();
        let data = ImageSet::from_dataset(&ds, None, |_| true);
        let mut h = small_hyper(50);
        h.lr = 1e30;
        match train_base(&mut sys, &data, &h) {
            Err(Error::TrainingFailure { stage, step, .. }) => {
                assert_eq!(stage, "base");
                assert!(step > 0 && step < 50);
            }
            other => panic!("expected a training failure, got {other:?}"),
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (mut a, ds) = tiny();
        let (mut b, _) = tiny();
        let data = ImageSet::from_dataset(&ds, None, |_| true);
        let la = train_base(&mut a, &data, &small_hyper(3)).unwrap();
        let lb = train_base(&mut b, &data, &small_hyper(3)).unwrap();
        assert_eq!(la.losses(), lb.losses());
        assert_eq!(a.denoiser_hash().unwrap(), b.denoiser_hash().unwrap());
        assert_eq!(a.encoder_hash().unwrap(), b.encoder_hash().unwrap());
    }

    #[test]
    fn log_appends_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs/train.jsonl");
        let log = TrainLog {
            stage: "base".into(),
            rows: vec![
                LogRow { step: 0, loss: 1.0, wall_ms: 1.0 },
                LogRow { step: 1, loss: 0.5, wall_ms: 2.0 },
            ],
        };
        log.append_jsonl(&p).unwrap();
        log.append_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(row["stage"], "base");
        assert_eq!(log.quartile_means(), (1.0, 0.5));
    }
}
