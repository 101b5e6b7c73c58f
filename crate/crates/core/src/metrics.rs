//! Full-reference fidelity (PSNR, SSIM) and identity similarity through a
//! small learned embedder trained on the synthetic identities.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade, reflect_index, DegradationRanges};
use crate::error::{invalid, Error, Result};
use crate::facegen::{render_face, sample_nuisance, Dataset, Split};
use crate::image::{to_model_batch, Image};
use crate::nets::{normal_param, ones_param, zeros_param, ParamStore};
use crate::ops;
use crate::rng::{derive_seed, seeded, stream};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gauss_window() -> Vec<f64> {
    crate::degrade::gaussian_kernel_1d(1.5, 11).expect("fixed window is valid")
}

fn filter_sep(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + reflect_index(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect_index(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean local SSIM: 11x11 Gaussian window (sigma 1.5) with reflected
/// borders, averaged over pixels and then channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, c) = a.shape();
    let k = gauss_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa = a.plane(ch);
        let pb = b.plane(ch);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let ma = filter_sep(&pa, w, h, &k);
        let mb = filter_sep(&pb, w, h, &k);
        let saa = filter_sep(&sq(&pa, &pa), w, h, &k);
        let sbb = filter_sep(&sq(&pb, &pb), w, h, &k);
        let sab = filter_sep(&sq(&pa, &pb), w, h, &k);
        let mut acc = 0.0;
        for i in 0..w * h {
            let (mua, mub) = (ma[i], mb[i]);
            let va = saa[i] - mua * mua;
            let vb = sbb[i] - mub * mub;
            let cov = sab[i] - mua * mub;
            acc += ((2.0 * mua * mub + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mua * mua + mub * mub + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / (w * h) as f64;
    }
    Ok(total / c as f64)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr_db: f64,
    pub ssim: f64,
    pub id_sim: f64,
    pub gt_id_dist: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
            n: 0,
        };
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of training renders passed through a mild degradation.
    pub augment: f64,
    pub threshold: f64,
    pub width: usize,
    pub dim: usize,
}

impl Default for EmbedderHyper {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch: 32,
            lr: 2e-3,
            seed: 0,
            augment: 0.5,
            threshold: 0.9,
            width: 32,
            dim: 64,
        }
    }
}

/// Four-layer convnet classifier; the embedding is the L2-normalized output
/// of the layer feeding the classifier.
#[derive(Debug)]
pub struct IdentityEmbedder {
    params: ParamStore,
    input_size: usize,
    classes: Vec<u32>,
    width: usize,
    dim: usize,
    accuracy: Option<f64>,
}

const EMB_GROUPS: usize = 8;
const LOGIT_SCALE: f64 = 16.0;
pub const EMBEDDER_FORMAT: &str = "dpt-embedder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbedderMeta {
    format: String,
    input_size: usize,
    classes: Vec<u32>,
    width: usize,
    dim: usize,
    accuracy: Option<f64>,
}

impl IdentityEmbedder {
    pub fn init<R: Rng + ?Sized>(input_size: usize, classes: Vec<u32>, width: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if input_size % 16 != 0 || input_size == 0 {
            return Err(invalid("embedder input size must be a positive multiple of 16"));
        }
        if classes.len() < 2 {
            return Err(invalid("embedder needs at least two classes"));
        }
        if width % EMB_GROUPS != 0 || (2 * width) % EMB_GROUPS != 0 {
            return Err(invalid("embedder width must be divisible by the group count"));
        }
        let dt = DType::F32;
        let mut p = ParamStore::new();
        let chans = [3, width, 2 * width, 2 * width, 2 * width];
        for l in 0..4 {
            let (ci, co) = (chans[l], chans[l + 1]);
            p.insert(format!("conv{l}.w"), normal_param(rng, &[co, ci, 3, 3], (2.0 / (9 * ci) as f64).sqrt(), dt)?)?;
            p.insert(format!("conv{l}.b"), zeros_param(&[co], dt)?)?;
            p.insert(format!("norm{l}.g"), ones_param(&[co], dt)?)?;
            p.insert(format!("norm{l}.b"), zeros_param(&[co], dt)?)?;
        }
        let c = chans[4];
        p.insert("emb.w", normal_param(rng, &[dim, c], (1.0 / c as f64).sqrt(), dt)?)?;
        p.insert("emb.b", zeros_param(&[dim], dt)?)?;
        p.insert("cls.w", normal_param(rng, &[classes.len(), dim], (1.0 / dim as f64).sqrt(), dt)?)?;
        Ok(Self {
            params: p,
            input_size,
            classes,
            width,
            dim,
            accuracy: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.accuracy.is_some()
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.accuracy
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    /// Unnormalized embeddings `(B, dim)` for a `(C, B, H, W)` batch in `[-1, 1]`.
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let mut h = ops::avg_pool2(x)?;
        for l in 0..4 {
            h = ops::conv3x3(&h, &p.get(&format!("conv{l}.w"))?, &p.get(&format!("conv{l}.b"))?)?;
            h = ops::group_norm(&h, EMB_GROUPS, &p.get(&format!("norm{l}.g"))?, &p.get(&format!("norm{l}.b"))?, 1e-5)?;
            h = ops::silu(&h)?;
            if l < 3 {
                h = ops::avg_pool2(&h)?;
            }
        }
        let (c, b, _, _) = h.dims4()?;
        let pooled = h.reshape((c, b, ()))?.mean(D::Minus1)?.t()?;
        ops::linear(&pooled, &p.get("emb.w")?, &p.get("emb.b")?)
    }

    fn normalize(e: &Tensor) -> Result<Tensor> {
        let n = e.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        Ok(e.broadcast_div(&(n + 1e-12)?)?)
    }

    /// Cosine classifier logits.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let e = Self::normalize(&self.features(x)?)?;
        let w = Self::normalize(&self.params.get("cls.w")?)?;
        Ok((e.matmul(&w.t()?)? * LOGIT_SCALE)?)
    }

    fn check_input(&self, images: &[Image]) -> Result<()> {
        if let Some(bad) = images
            .iter()
            .find(|i| i.width() != self.input_size || i.height() != self.input_size || i.channels() != 3)
        {
            return Err(invalid(format!(
                "embedder expects {0}x{0} RGB, got {1:?}",
                self.input_size,
                bad.shape()
            )));
        }
        Ok(())
    }

    /// Unit-norm embeddings, one per image.
    pub fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        if !self.is_trained() {
            return Err(Error::InvalidState("identity embedder has not been trained".into()));
        }
        self.embed_raw(images)
    }

    fn embed_raw(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        self.check_input(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = to_model_batch(chunk, &Device::Cpu, DType::F32)?;
            let e = Self::normalize(&self.features(&x)?.to_dtype(DType::F64)?)?;
            for row in e.to_vec2::<f64>()? {
                out.push(row.into_iter().map(|v| v as f32).collect());
            }
        }
        Ok(out)
    }

    /// Predicted labels.
    pub fn classify(&self, images: &[Image]) -> Result<Vec<u32>> {
        self.check_input(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = to_model_batch(chunk, &Device::Cpu, DType::F32)?;
            let idx = self.logits(&x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            out.extend(idx.into_iter().map(|i| self.classes[i as usize]));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = EmbedderMeta {
            format: EMBEDDER_FORMAT.into(),
            input_size: self.input_size,
            classes: self.classes.clone(),
            width: self.width,
            dim: self.dim,
            accuracy: self.accuracy,
        };
        let tensors = self.params.tensors();
        let meta = HashMap::from([("embedder".to_string(), serde_json::to_string(&meta)?)]);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        safetensors::serialize_to_file(tensors.iter(), Some(meta), path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("embedder"))
            .ok_or_else(|| bad("no embedder metadata".into()))?;
        let meta: EmbedderMeta = serde_json::from_str(raw)?;
        if meta.format != EMBEDDER_FORMAT {
            return Err(bad(format!("unexpected format {:?}", meta.format)));
        }
        let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        let template = Self::init(meta.input_size, meta.classes.clone(), meta.width, meta.dim, &mut seeded(0))?;
        let tt = template.params.tensors();
        if tt.len() != tensors.len() || tt.iter().any(|(k, t)| tensors.get(k).map(|x| x.dims()) != Some(t.dims())) {
            return Err(bad("tensor names or shapes do not match the recorded architecture".into()));
        }
        Ok(Self {
            params: ParamStore::from_tensors(tensors)?,
            input_size: meta.input_size,
            classes: meta.classes,
            width: meta.width,
            dim: meta.dim,
            accuracy: meta.accuracy,
        })
    }
}

fn augment_ranges() -> DegradationRanges {
    DegradationRanges {
        sigma: [0.2, 1.5],
        r_choices: vec![1.0, 2.0],
        delta: [0.0, 0.03],
        q: [60, 100],
        restore_resolution: true,
    }
}

/// Trains on fresh renders of the dataset's identities (new nuisance seeds)
/// and scores top-1 accuracy on the dataset's held-out test split.
pub fn train_embedder(dataset: &Dataset, hyper: &EmbedderHyper) -> Result<IdentityEmbedder> {
    let labels = dataset.labels();
    if labels.len() < 10 {
        return Err(Error::Precondition(format!(
            "embedder training needs at least 10 identities, dataset has {}",
            labels.len()
        )));
    }
    if hyper.steps == 0 || hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(invalid("embedder hyperparameters must be positive"));
    }
    let size = dataset.size();
    let ids: Vec<_> = labels.iter().map(|&l| dataset.identity(l).expect("label present")).collect();
    let mut emb = IdentityEmbedder::init(size, labels.clone(), hyper.width, hyper.dim, &mut stream(hyper.seed, &[0xEB]))?;
    emb.params.set_trainable(true);
    let mut opt = AdamW::new(
        emb.params.vars(),
        ParamsAdamW {
            lr: hyper.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let ranges = augment_ranges();
    let decay_at = hyper.steps * 7 / 10;
    for step in 0..hyper.steps {
        if step == decay_at {
            opt.set_learning_rate(hyper.lr * 0.1);
        }
        let mut rng = stream(hyper.seed, &[0xEC, step as u64]);
        let mut imgs = Vec::with_capacity(hyper.batch);
        let mut targets = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let k = rng.random_range(0..ids.len());
            let nu = sample_nuisance(&mut rng);
            let mut img = render_face(&ids[k], &nu, size)?;
            if rng.random::<f64>() < hyper.augment {
                let cfg = ranges.sample(&mut rng);
                img = degrade(&img, &cfg, &mut rng)?;
            }
            imgs.push(img);
            targets.push(k as u32);
        }
        let x = to_model_batch(&imgs, &Device::Cpu, DType::F32)?;
        let y = Tensor::from_vec(targets, hyper.batch, &Device::Cpu)?;
        let loss = candle_nn::loss::cross_entropy(&emb.logits(&x)?, &y)?;
        let lv = loss.to_scalar::<f32>()?;
        if !lv.is_finite() {
            return Err(Error::TrainingFailure {
                stage: "embedder",
                step,
                reason: format!("loss is {lv}"),
            });
        }
        opt.backward_step(&loss)?;
        if step % 200 == 0 {
            log::debug!("embedder step {step} loss {lv:.4}");
        }
    }
    emb.params.set_trainable(false);

    let test: Vec<usize> = labels
        .iter()
        .flat_map(|&l| dataset.indices(l, Some(Split::Test)))
        .collect();
    let (images, truth): (Vec<Image>, Vec<u32>) = if test.is_empty() {
        // no test split: score fresh renders from an unused stream instead
        let mut rng = stream(hyper.seed, &[0xED]);
        let mut im = Vec::new();
        let mut tr = Vec::new();
        for id in &ids {
            for _ in 0..5 {
                im.push(render_face(id, &sample_nuisance(&mut rng), size)?);
                tr.push(id.label);
            }
        }
        (im, tr)
    } else {
        (
            test.iter().map(|&i| dataset.images[i].clone()).collect(),
            test.iter().map(|&i| dataset.manifest.rows[i].label).collect(),
        )
    };
    let pred = emb.classify(&images)?;
    let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / truth.len() as f64;
    log::info!("embedder held-out accuracy {accuracy:.3} on {} images", truth.len());
    if accuracy < hyper.threshold {
        return Err(Error::EmbedderQuality {
            accuracy,
            threshold: hyper.threshold,
        });
    }
    emb.accuracy = Some(accuracy);
    Ok(emb)
}

/// Cosine similarity of identity embeddings, in `[-1, 1]`.
pub fn id_similarity(embedder: &IdentityEmbedder, a: &Image, b: &Image) -> Result<f64> {
    let e = embedder.embed(&[a.clone(), b.clone()])?;
    Ok(cosine(&e[0], &e[1]))
}

/// Seed for per-pair evaluation streams, exposed so reports can record it.
pub fn pair_seed(root: u64, index: usize) -> u64 {
    derive_seed(root, &[0xE7, index as u64])
}
