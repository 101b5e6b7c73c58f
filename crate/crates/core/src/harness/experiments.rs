//! The scripted experiments. Each takes ready systems and probes, restores,
//! scores, and returns an [`ExperimentReport`] whose verdicts depend only on
//! the recorded rows.

use std::time::Instant;

use candle_core::{Device, Tensor, D};
use rayon::prelude::*;

use crate::degrade::{degrade, DegradationConfig};
use crate::error::{invalid, Result};
use crate::facegen::{Dataset, Split};
use crate::image::{to_model_batch, Image};
use crate::metrics::{cosine, psnr, ssim, summarize, IdentityEmbedder};
use crate::nets::{EpsModel, RestorationSystem, CLASS_TOKEN};
use crate::rng::{derive_seed, normal_tensor, stream};
use crate::sampler::{restore_batch, restore_passes, RestoreConfig};
use crate::schedule::add_noise_batch;

use super::report::{condition_means, rows_of, spearman, ExperimentKind, ExperimentReport, ReportRow, Verdict};

/// A held-out image, one degraded realization of it, and its sampler seed.
#[derive(Debug, Clone)]
pub struct Probe {
    pub probe: usize,
    pub label: u32,
    /// Dataset row of the clean image.
    pub row: usize,
    pub realization: usize,
    pub gt: Image,
    pub lq: Image,
    pub seed: u64,
}

/// Probes for every image of `label` in `split`, `realizations` degraded
/// copies each, ordered by (row, realization).
pub fn make_probes(
    ds: &Dataset,
    label: u32,
    split: Split,
    degradation: &DegradationConfig,
    realizations: usize,
    root: u64,
) -> Result<Vec<Probe>> {
    let mut out = Vec::new();
    for row in ds.indices(label, Some(split)) {
        for realization in 0..realizations {
            let path = [row as u64, realization as u64];
            let gt = ds.images[row].clone();
            let lq = degrade(&gt, degradation, &mut stream(root, &[0xDE, path[0], path[1]]))?;
            out.push(Probe {
                probe: out.len(),
                label,
                row,
                realization,
                gt,
                lq,
                seed: derive_seed(root, &[0x5EED, path[0], path[1]]),
            });
        }
    }
    Ok(out)
}

/// Scoring context shared by the experiments.
pub struct EvalContext<'a> {
    pub embedder: &'a IdentityEmbedder,
    /// Images per batched sampler call; fixed so results do not depend on
    /// the worker count.
    pub chunk: usize,
}

/// Restoration outputs plus the report built from them.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    /// Contact-sheet rows: ground truth, degraded input, then one image per
    /// condition.
    pub sheet: Vec<Vec<Image>>,
}

const SHEET_PROBES: usize = 6;

/// Restores every probe's degraded input, chunked across the worker pool.
pub fn restore_probes<M: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    model: &M,
    probes: &[Probe],
    cfg: &RestoreConfig,
    seed_of: impl Fn(&Probe) -> u64 + Sync,
) -> Result<Vec<Image>> {
    let chunks = probes
        .par_chunks(ctx.chunk.max(1))
        .map(|c| {
            let lq: Vec<Image> = c.iter().map(|p| p.lq.clone()).collect();
            let seeds: Vec<u64> = c.iter().map(&seed_of).collect();
            restore_batch(model, &lq, &seeds, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Identity similarity of each output to its probe's ground truth.
fn id_sims(ctx: &EvalContext, outputs: &[Image], probes: &[Probe]) -> Result<Vec<f64>> {
    let gts: Vec<Image> = probes.iter().map(|p| p.gt.clone()).collect();
    let eo = ctx.embedder.embed(outputs)?;
    let eg = ctx.embedder.embed(&gts)?;
    Ok(eo.iter().zip(&eg).map(|(a, b)| cosine(a, b)).collect())
}

/// PSNR, SSIM and identity-similarity rows for one condition.
pub fn score(
    ctx: &EvalContext,
    outputs: &[Image],
    probes: &[Probe],
    condition: &str,
    x: Option<f64>,
) -> Result<Vec<ReportRow>> {
    if outputs.len() != probes.len() {
        return Err(invalid("one output per probe required"));
    }
    let ids = id_sims(ctx, outputs, probes)?;
    let fidelity = outputs
        .par_iter()
        .zip(probes)
        .map(|(o, p)| Ok((psnr(o, &p.gt)?, ssim(o, &p.gt)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(probes
        .iter()
        .zip(fidelity)
        .zip(ids)
        .map(|((p, (ps, ss)), id)| ReportRow {
            condition: condition.to_string(),
            x,
            probe: p.probe,
            label: p.label,
            psnr_db: Some(ps),
            ssim: Some(ss),
            id_sim: Some(id),
            value: None,
        })
        .collect())
}

fn sheet_rows(probes: &[Probe], per_condition: &[&[Image]]) -> Vec<Vec<Image>> {
    probes
        .iter()
        .take(SHEET_PROBES)
        .enumerate()
        .map(|(i, p)| {
            let mut row = vec![p.gt.clone(), p.lq.clone()];
            row.extend(per_condition.iter().filter_map(|c| c.get(i).cloned()));
            row
        })
        .collect()
}

fn finish(kind: ExperimentKind, rows: Vec<ReportRow>, start: Instant, sheet: Vec<Vec<Image>>) -> ExperimentOutput {
    ExperimentOutput {
        report: ExperimentReport::from_rows(kind, rows, start.elapsed().as_secs_f64() * 1e3),
        sheet,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn metric_col(rows: &[ReportRow], condition: &str, f: impl Fn(&ReportRow) -> Option<f64>) -> Vec<f64> {
    rows_of(rows, condition).into_iter().filter_map(f).collect()
}

// ---------------------------------------------------------------- seed variation

/// Restores every probe under each seed with both systems. Each row's
/// `value` is the probe's mean pairwise embedding distance `1 - cos`
/// across seeds.
pub fn seed_variation<B: EpsModel + Sync + ?Sized, P: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    blind: &B,
    blind_cfg: &RestoreConfig,
    personalized: &P,
    personalized_cfg: &RestoreConfig,
    probes: &[Probe],
    seeds: &[u64],
) -> Result<ExperimentOutput> {
    if seeds.len() < 5 || probes.len() < 10 {
        return Err(invalid(format!(
            "seed variation needs >= 5 seeds and >= 10 probes, got {} and {}",
            seeds.len(),
            probes.len()
        )));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut firsts = Vec::new();
    let blind_outs: Vec<Vec<Image>> = seeds
        .iter()
        .map(|&sd| restore_probes(ctx, blind, probes, blind_cfg, |_| sd))
        .collect::<Result<_>>()?;
    let pers_outs: Vec<Vec<Image>> = seeds
        .iter()
        .map(|&sd| restore_probes(ctx, personalized, probes, personalized_cfg, |_| sd))
        .collect::<Result<_>>()?;
    for (name, outs) in [("blind", blind_outs), ("personalized", pers_outs)] {
        let embs = outs.iter().map(|o| ctx.embedder.embed(o)).collect::<Result<Vec<_>>>()?;
        let scored = outs
            .iter()
            .map(|o| score(ctx, o, probes, name, None))
            .collect::<Result<Vec<_>>>()?;
        for (i, p) in probes.iter().enumerate() {
            let mut d = Vec::new();
            for a in 0..seeds.len() {
                for b in a + 1..seeds.len() {
                    d.push(1.0 - cosine(&embs[a][i], &embs[b][i]));
                }
            }
            let over = |f: fn(&ReportRow) -> Option<f64>| {
                Some(mean(&scored.iter().filter_map(|s| f(&s[i])).collect::<Vec<_>>()))
            };
            rows.push(ReportRow {
                condition: name.to_string(),
                x: None,
                probe: p.probe,
                label: p.label,
                psnr_db: over(|r| r.psnr_db),
                ssim: over(|r| r.ssim),
                id_sim: over(|r| r.id_sim),
                value: Some(mean(&d)),
            });
        }
        firsts.push(outs);
    }
    // sheet: per probe, every seed of the blind system then of the personalized one
    let sheet = probes
        .iter()
        .take(SHEET_PROBES)
        .enumerate()
        .map(|(i, p)| {
            let mut row = vec![p.gt.clone(), p.lq.clone()];
            for outs in &firsts {
                row.extend(outs.iter().map(|o| o[i].clone()));
            }
            row
        })
        .collect();
    Ok(finish(ExperimentKind::SeedVariation, rows, start, sheet))
}

pub fn seed_variation_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let b = metric_col(rows, "blind", |r| r.value);
    let p = metric_col(rows, "personalized", |r| r.value);
    if b.is_empty() || p.is_empty() {
        return vec![
            Verdict::skipped("blind-distance-positive", "mean blind distance > 0"),
            Verdict::skipped("personalized-median-lower", "median(personalized) - median(blind) < 0"),
        ];
    }
    let mb = mean(&b);
    let gap = summarize(&p).median - summarize(&b).median;
    vec![
        Verdict::check("blind-distance-positive", "mean blind distance > 0", mb, mb > 0.0),
        Verdict::check(
            "personalized-median-lower",
            "median(personalized) - median(blind) < 0",
            gap,
            gap < 0.0,
        ),
    ]
}

// ---------------------------------------------------------------- gamma ablation

pub fn gamma_ablation<M: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    personalized: &M,
    cfg: &RestoreConfig,
    probes: &[Probe],
    gammas: &[f64],
) -> Result<ExperimentOutput> {
    if gammas.is_empty() || probes.is_empty() {
        return Err(invalid("gamma ablation needs gammas and probes"));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut outs = Vec::new();
    for &g in gammas {
        let c = RestoreConfig { gamma: g, ..cfg.clone() };
        let o = restore_probes(ctx, personalized, probes, &c, |p| p.seed)?;
        rows.extend(score(ctx, &o, probes, &format!("gamma={g}"), Some(g))?);
        outs.push(o);
    }
    let refs: Vec<&[Image]> = outs.iter().map(|o| o.as_slice()).collect();
    Ok(finish(ExperimentKind::GammaAblation, rows, start, sheet_rows(probes, &refs)))
}

fn mean_at_x(rows: &[ReportRow], x: f64, f: impl Fn(&ReportRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.x == Some(x)).filter_map(f).collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn gamma_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let rule = "|mean id_sim(gamma=0.5) - mean id_sim(gamma=0)| <= 0.05";
    match (mean_at_x(rows, 0.5, |r| r.id_sim), mean_at_x(rows, 0.0, |r| r.id_sim)) {
        (Some(h), Some(z)) => {
            let d = (h - z).abs();
            vec![Verdict::check("gamma-half-matches-zero", rule, d, d <= 0.05)]
        }
        _ => vec![Verdict::skipped("gamma-half-matches-zero", rule)],
    }
}

// ---------------------------------------------------------------- cfg sweep

pub fn cfg_sweep<M: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    personalized: &M,
    cfg: &RestoreConfig,
    probes: &[Probe],
    ws: &[f64],
) -> Result<ExperimentOutput> {
    if ws.is_empty() || probes.is_empty() {
        return Err(invalid("guidance sweep needs scales and probes"));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut outs = Vec::new();
    for &w in ws {
        let c = RestoreConfig { w, ..cfg.clone() };
        let o = restore_probes(ctx, personalized, probes, &c, |p| p.seed)?;
        rows.extend(score(ctx, &o, probes, &format!("w={w}"), Some(w))?);
        outs.push(o);
    }
    let refs: Vec<&[Image]> = outs.iter().map(|o| o.as_slice()).collect();
    Ok(finish(ExperimentKind::CfgSweep, rows, start, sheet_rows(probes, &refs)))
}

pub fn cfg_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let rule = "spearman(w, mean psnr) <= -0.8";
    let mut pts: Vec<(f64, f64)> = super::report::condition_order(rows)
        .into_iter()
        .filter_map(|(c, x)| {
            let v = metric_col(rows, &c, |r| r.psnr_db);
            Some((x?, mean(&v))).filter(|_| !v.is_empty())
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.len() < 2 {
        return vec![Verdict::skipped("psnr-decreases-with-w", rule)];
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    match spearman(&x, &y) {
        Some(r) => vec![Verdict::check("psnr-decreases-with-w", rule, r, r <= -0.8)],
        None => vec![Verdict::check("psnr-decreases-with-w", rule, 0.0, false)],
    }
}

// ---------------------------------------------------------------- encoder swap

/// Restores `probes` with `native` (its own encoder) and with `native`'s
/// denoiser driven by `donor`'s encoder.
pub fn encoder_swap(
    ctx: &EvalContext,
    native: &RestorationSystem,
    donor: &RestorationSystem,
    cfg: &RestoreConfig,
    probes: &[Probe],
) -> Result<ExperimentOutput> {
    if probes.is_empty() {
        return Err(invalid("encoder swap needs probes"));
    }
    let start = Instant::now();
    let swapped = native.with_encoder_from(donor)?;
    let a = restore_probes(ctx, native, probes, cfg, |p| p.seed)?;
    let b = restore_probes(ctx, &swapped, probes, cfg, |p| p.seed)?;
    let mut rows = score(ctx, &a, probes, "native", None)?;
    rows.extend(score(ctx, &b, probes, "swapped", None)?);
    Ok(finish(ExperimentKind::EncoderSwap, rows, start, sheet_rows(probes, &[&a, &b])))
}

pub fn encoder_swap_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let rule = "|mean id_sim(swapped) - mean id_sim(native)| <= 0.05";
    let m = condition_means(rows, |r| r.id_sim);
    match (m.get("native"), m.get("swapped")) {
        (Some(n), Some(s)) => {
            let d = (s - n).abs();
            vec![Verdict::check("swap-within-tolerance", rule, d, d <= 0.05)]
        }
        _ => vec![Verdict::skipped("swap-within-tolerance", rule)],
    }
}

// ---------------------------------------------------------------- main benchmark

pub fn main_benchmark<B: EpsModel + Sync + ?Sized, P: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    blind: &B,
    blind_cfg: &RestoreConfig,
    personalized: &P,
    personalized_cfg: &RestoreConfig,
    probes: &[Probe],
) -> Result<ExperimentOutput> {
    if probes.is_empty() {
        return Err(invalid("benchmark needs probes"));
    }
    let start = Instant::now();
    let a = restore_probes(ctx, blind, probes, blind_cfg, |p| p.seed)?;
    let b = restore_probes(ctx, personalized, probes, personalized_cfg, |p| p.seed)?;
    let mut rows = score(ctx, &a, probes, "blind", None)?;
    rows.extend(score(ctx, &b, probes, "personalized", None)?);
    Ok(finish(ExperimentKind::MainBenchmark, rows, start, sheet_rows(probes, &[&a, &b])))
}

/// Paired per-probe differences `personalized - blind` of one metric.
fn paired(rows: &[ReportRow], f: impl Fn(&ReportRow) -> Option<f64> + Copy) -> Vec<f64> {
    let b = rows_of(rows, "blind");
    let p = rows_of(rows, "personalized");
    b.iter()
        .filter_map(|rb| {
            let rp = p.iter().find(|r| r.probe == rb.probe)?;
            Some(f(rp)? - f(rb)?)
        })
        .collect()
}

pub fn main_benchmark_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let did = paired(rows, |r| r.id_sim);
    let dps = paired(rows, |r| r.psnr_db);
    let names = [
        ("probe-count", "paired probes >= 20"),
        ("id-win-rate", "share of probes with personalized id_sim > blind >= 0.7"),
        ("id-mean-improvement", "mean(personalized id_sim - blind id_sim) > 0"),
        ("psnr-drop", "mean(blind psnr - personalized psnr) <= 2 dB"),
    ];
    if did.is_empty() {
        return names.iter().map(|(n, r)| Verdict::skipped(n, r)).collect();
    }
    let n = did.len() as f64;
    let wins = did.iter().filter(|d| **d > 0.0).count() as f64 / n;
    let imp = mean(&did);
    let drop = -mean(&dps);
    vec![
        Verdict::check(names[0].0, names[0].1, n, n >= 20.0),
        Verdict::check(names[1].0, names[1].1, wins, wins >= 0.7),
        Verdict::check(names[2].0, names[2].1, imp, imp > 0.0),
        Verdict::check(names[3].0, names[3].1, drop, drop <= 2.0),
    ]
}

// ---------------------------------------------------------------- out-of-context

/// Blind restoration vs in-context and out-of-context textual pivots (both
/// without the model-based pivot), all with the same probes and seeds.
pub fn out_of_context<M: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    blind: &M,
    blind_cfg: &RestoreConfig,
    in_context: &M,
    out_of_context: &M,
    cfg: &RestoreConfig,
    probes: &[Probe],
) -> Result<ExperimentOutput> {
    if probes.is_empty() {
        return Err(invalid("ablation needs probes"));
    }
    let start = Instant::now();
    let a = restore_probes(ctx, blind, probes, blind_cfg, |p| p.seed)?;
    let b = restore_probes(ctx, in_context, probes, cfg, |p| p.seed)?;
    let c = restore_probes(ctx, out_of_context, probes, cfg, |p| p.seed)?;
    let mut rows = score(ctx, &a, probes, "blind", None)?;
    rows.extend(score(ctx, &b, probes, "in-context", None)?);
    rows.extend(score(ctx, &c, probes, "out-of-context", None)?);
    Ok(finish(ExperimentKind::OutOfContext, rows, start, sheet_rows(probes, &[&a, &b, &c])))
}

pub fn out_of_context_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let rule = "gap(in-context) - gap(out-of-context) > 0, gap = mean id_sim - blind mean id_sim";
    let m = condition_means(rows, |r| r.id_sim);
    match (m.get("blind"), m.get("in-context"), m.get("out-of-context")) {
        (Some(b), Some(i), Some(o)) => {
            let d = (i - b) - (o - b);
            vec![Verdict::check("in-context-gap-larger", rule, d, d > 0.0)]
        }
        _ => vec![Verdict::skipped("in-context-gap-larger", rule)],
    }
}

// ---------------------------------------------------------------- prior drift

/// Per-image RMS change of class-token noise predictions relative to
/// `before`, for each tuned system. Timesteps and noise are drawn once from
/// `seed` and shared by all systems.
pub fn prior_drift<M: EpsModel + Sync + ?Sized>(
    before: &M,
    tuned: &[(&str, &M)],
    probes: &[Probe],
    seed: u64,
) -> Result<ExperimentOutput> {
    if probes.is_empty() || tuned.is_empty() {
        return Err(invalid("prior drift needs probes and tuned systems"));
    }
    let start = Instant::now();
    let dev = Device::Cpu;
    let dtype = before.dtype();
    let clean = to_model_batch(&probes.iter().map(|p| p.gt.clone()).collect::<Vec<_>>(), &dev, dtype)?;
    let cond = to_model_batch(&probes.iter().map(|p| p.lq.clone()).collect::<Vec<_>>(), &dev, dtype)?;
    let mut rng = stream(seed, &[0xD81F]);
    let n = probes.len();
    let half = (before.schedule().steps() / 2).max(1);
    let ts: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 1..=half)).collect();
    let eps = normal_tensor(&mut rng, clean.shape().clone(), dtype, &dev)?;
    let x_t = add_noise_batch(&clean, &eps, &ts, before.schedule())?;
    let predict = |m: &M| -> Result<Tensor> {
        let f = m.guidance(&cond, &ts)?;
        m.eps(&x_t, &ts, &vec![CLASS_TOKEN; n], f.as_ref())
    };
    let base = predict(before)?;
    let mut rows = Vec::new();
    for (name, m) in tuned {
        let d = (predict(m)? - &base)?.sqr()?.transpose(0, 1)?.flatten_from(1)?.mean(D::Minus1)?.sqrt()?;
        let d: Vec<f64> = d.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        for (p, v) in probes.iter().zip(d) {
            rows.push(ReportRow {
                condition: name.to_string(),
                x: None,
                probe: p.probe,
                label: p.label,
                psnr_db: None,
                ssim: None,
                id_sim: None,
                value: Some(v),
            });
        }
    }
    Ok(finish(ExperimentKind::PriorDrift, rows, start, Vec::new()))
}

pub fn prior_drift_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let rule = "mean drift(with-prior) - mean drift(without-prior) < 0";
    let m = condition_means(rows, |r| r.value);
    match (m.get("with-prior"), m.get("without-prior")) {
        (Some(a), Some(b)) => {
            let d = a - b;
            vec![Verdict::check("prior-reduces-drift", rule, d, d < 0.0)]
        }
        _ => vec![Verdict::skipped("prior-reduces-drift", rule)],
    }
}

// ---------------------------------------------------------------- multipass

pub fn multipass<M: EpsModel + Sync + ?Sized>(
    ctx: &EvalContext,
    personalized: &M,
    cfg: &RestoreConfig,
    probes: &[Probe],
) -> Result<ExperimentOutput> {
    if probes.is_empty() || cfg.passes < 2 {
        return Err(invalid("multi-pass experiment needs probes and >= 2 passes"));
    }
    let start = Instant::now();
    let chunks = probes
        .par_chunks(ctx.chunk.max(1))
        .map(|c| {
            let lq: Vec<Image> = c.iter().map(|p| p.lq.clone()).collect();
            let seeds: Vec<u64> = c.iter().map(|p| p.seed).collect();
            restore_passes(personalized, &lq, &seeds, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_pass: Vec<Vec<Image>> = vec![Vec::new(); cfg.passes];
    for chunk in chunks {
        for (k, outs) in chunk.into_iter().enumerate() {
            per_pass[k].extend(outs);
        }
    }
    let mut rows = Vec::new();
    for (k, outs) in per_pass.iter().enumerate() {
        rows.extend(score(ctx, outs, probes, &format!("pass-{}", k + 1), Some((k + 1) as f64))?);
    }
    let refs: Vec<&[Image]> = per_pass.iter().map(|o| o.as_slice()).collect();
    Ok(finish(ExperimentKind::Multipass, rows, start, sheet_rows(probes, &refs)))
}

pub fn multipass_verdicts(rows: &[ReportRow]) -> Vec<Verdict> {
    let rule = "share of probes with id_sim(pass 2) >= id_sim(pass 1) > 0.5";
    let a = rows_of(rows, "pass-1");
    let b = rows_of(rows, "pass-2");
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .filter_map(|ra| {
            let rb = b.iter().find(|r| r.probe == ra.probe)?;
            Some((ra.id_sim?, rb.id_sim?))
        })
        .collect();
    if pairs.is_empty() {
        return vec![Verdict::skipped("second-pass-majority", rule)];
    }
    let share = pairs.iter().filter(|(x, y)| y >= x).count() as f64 / pairs.len() as f64;
    vec![Verdict::check("second-pass-majority", rule, share, share > 0.5)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::report::Outcome;

    fn row(condition: &str, x: Option<f64>, probe: usize, psnr: f64, id: f64) -> ReportRow {
        ReportRow {
            condition: condition.into(),
            x,
            probe,
            label: 0,
            psnr_db: Some(psnr),
            ssim: Some(0.5),
            id_sim: Some(id),
            value: None,
        }
    }

    #[test]
    fn main_benchmark_verdicts_from_rows() {
        let mut rows = Vec::new();
        for i in 0..20 {
            rows.push(row("blind", None, i, 25.0, 0.5));
            // 15 wins, 5 losses; psnr down 1 dB
            rows.push(row("personalized", None, i, 24.0, if i < 15 { 0.7 } else { 0.45 }));
        }
        let v = main_benchmark_verdicts(&rows);
        assert!(v.iter().all(|v| v.outcome == Outcome::Pass), "{v:?}");
        assert_eq!(v[1].statistic, Some(0.75));
        assert!((v[3].statistic.unwrap() - 1.0).abs() < 1e-12);
        // blind against itself: no wins, zero differences
        let ctrl: Vec<ReportRow> = rows
            .iter()
            .filter(|r| r.condition == "blind")
            .flat_map(|r| [r.clone(), ReportRow { condition: "personalized".into(), ..r.clone() }])
            .collect();
        let v = main_benchmark_verdicts(&ctrl);
        assert_eq!(v[1].statistic, Some(0.0));
        assert_eq!(v[2].statistic, Some(0.0));
        assert_eq!(v[3].statistic, Some(0.0));
    }

    #[test]
    fn cfg_verdict_uses_condition_means_in_w_order() {
        let mut rows = Vec::new();
        for (k, w) in [3.0, 1.0, 2.0].into_iter().enumerate() {
            for i in 0..3 {
                rows.push(row(&format!("w={w}"), Some(w), i, 30.0 - w + 0.1 * k as f64, 0.5));
            }
        }
        let v = cfg_verdicts(&rows);
        assert_eq!(v[0].statistic, Some(-1.0));
        assert_eq!(v[0].outcome, Outcome::Pass);
        let single: Vec<ReportRow> = rows.into_iter().filter(|r| r.x == Some(1.0)).collect();
        assert_eq!(cfg_verdicts(&single)[0].outcome, Outcome::Skipped);
    }

    #[test]
    fn gamma_and_swap_verdicts() {
        let rows = vec![
            row("gamma=0", Some(0.0), 0, 20.0, 0.80),
            row("gamma=0.5", Some(0.5), 0, 20.0, 0.77),
            row("gamma=1", Some(1.0), 0, 20.0, 0.5),
        ];
        let v = gamma_verdicts(&rows);
        assert_eq!(v[0].outcome, Outcome::Pass);
        assert!((v[0].statistic.unwrap() - 0.03).abs() < 1e-12);
        let rows = vec![row("native", None, 0, 20.0, 0.8), row("swapped", None, 0, 20.0, 0.7)];
        assert_eq!(encoder_swap_verdicts(&rows)[0].outcome, Outcome::Fail);
    }

    #[test]
    fn seed_verdicts_compare_medians() {
        let mk = |c: &str, i: usize, v: f64| ReportRow { value: Some(v), ..row(c, None, i, 0.0, 0.0) };
        let rows = vec![mk("blind", 0, 0.25), mk("blind", 1, 0.5), mk("personalized", 0, 0.125), mk("personalized", 1, 0.625)];
        let v = seed_variation_verdicts(&rows);
        assert_eq!(v[0].outcome, Outcome::Pass);
        // medians equal at 0.375: not strictly lower
        assert_eq!(v[1].outcome, Outcome::Fail);
    }

    #[test]
    fn multipass_and_drift_verdicts() {
        let rows = vec![
            row("pass-1", Some(1.0), 0, 0.0, 0.5),
            row("pass-2", Some(2.0), 0, 0.0, 0.6),
            row("pass-1", Some(1.0), 1, 0.0, 0.5),
            row("pass-2", Some(2.0), 1, 0.0, 0.4),
            row("pass-1", Some(1.0), 2, 0.0, 0.5),
            row("pass-2", Some(2.0), 2, 0.0, 0.5),
        ];
        let v = multipass_verdicts(&rows);
        assert!((v[0].statistic.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let mk = |c: &str, v: f64| ReportRow { value: Some(v), psnr_db: None, ..row(c, None, 0, 0.0, 0.0) };
        let v = prior_drift_verdicts(&[mk("with-prior", 0.1), mk("without-prior", 0.3)]);
        assert_eq!(v[0].outcome, Outcome::Pass);
    }
}
