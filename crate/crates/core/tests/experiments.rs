//! Experiment drivers on analytic stubs and tiny real systems.

use std::sync::OnceLock;

use candle_core::Tensor;

use dpt_core::facegen::{Dataset, Split};
use dpt_core::harness::experiments::{
    encoder_swap, gamma_ablation, main_benchmark, make_probes, multipass, prior_drift, seed_variation, EvalContext,
    Probe,
};
use dpt_core::harness::{ExperimentReport, Outcome};
use dpt_core::metrics::{train_embedder, EmbedderHyper, IdentityEmbedder};
use dpt_core::nets::{
    ArchConfig, EpsModel, GuidanceFeatures, RestorationSystem, TokenId, TokenInit, CLASS_TOKEN, NULL_TOKEN,
};
use dpt_core::rng::seeded;
use dpt_core::sampler::RestoreConfig;
use dpt_core::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use dpt_core::Result;

const SIZE: usize = 32;

/// Predicts exactly the noise that makes the x0 estimate equal the
/// conditioning image, so every sampler run returns its input.
struct EchoModel {
    schedule: NoiseSchedule,
}

impl EpsModel for EchoModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn has_token(&self, token: TokenId) -> bool {
        token == NULL_TOKEN || token == CLASS_TOKEN || token == TokenId(2)
    }

    fn guidance(&self, cond: &Tensor, _ts: &[usize]) -> Result<Option<GuidanceFeatures>> {
        let (_, _, h, w) = cond.dims4()?;
        Ok(Some(GuidanceFeatures {
            maps: vec![cond.clone()],
            source_size: (h, w),
        }))
    }

    fn eps(&self, x_t: &Tensor, ts: &[usize], _tokens: &[TokenId], f: Option<&GuidanceFeatures>) -> Result<Tensor> {
        let t = ts[0];
        let target = &f.expect("echo model needs guidance").maps[0];
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        Ok(((x_t - (target * a)?)? / s)?)
    }
}

fn echo() -> EchoModel {
    EchoModel {
        schedule: make_schedule(100, ScheduleKind::Cosine).unwrap(),
    }
}

struct Fixture {
    ds: Dataset,
    embedder: IdentityEmbedder,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = Dataset::generate(10, 12, SIZE, 5).unwrap();
        let hyper = EmbedderHyper {
            steps: 5,
            batch: 8,
            threshold: 0.0,
            ..EmbedderHyper::default()
        };
        let embedder = train_embedder(&ds, &hyper).unwrap();
        Fixture { ds, embedder }
    })
}

fn ctx() -> EvalContext<'static> {
    EvalContext {
        embedder: &fixture().embedder,
        chunk: 4,
    }
}

fn probes(label: u32, realizations: usize) -> Vec<Probe> {
    make_probes(&fixture().ds, label, Split::Reference, &dpt_core::harness::config::default_eval_degradation(), realizations, 3).unwrap()
}

fn tiny_system(seed: u64) -> RestorationSystem {
    let arch = ArchConfig {
        image_size: SIZE,
        patch: 4,
        widths: vec![8, 16],
        groups: 4,
        time_dim: 16,
        freq_dim: 8,
        ..ArchConfig::default()
    };
    RestorationSystem::init(&arch, make_schedule(100, ScheduleKind::Cosine).unwrap(), seed).unwrap()
}

fn cfg(prompt: TokenId) -> RestoreConfig {
    RestoreConfig {
        steps: 4,
        prompt,
        ..RestoreConfig::default()
    }
}

#[test]
fn seed_independent_model_has_zero_seed_distance() {
    let m = echo();
    let p = probes(0, 1);
    assert_eq!(p.len(), 10);
    let out = seed_variation(&ctx(), &m, &cfg(NULL_TOKEN), &m, &cfg(TokenId(2)), &p, &[0, 1, 2, 3, 4]).unwrap();
    let rows = &out.report.rows;
    assert_eq!(rows.len(), 20);
    for r in rows {
        assert!(r.value.unwrap().abs() < 1e-6, "{} probe {} distance {:?}", r.condition, r.probe, r.value);
    }
    let v = out.report.verdict("blind-distance-positive").unwrap();
    assert!(v.statistic.unwrap().abs() < 1e-6, "{:?}", v.statistic);
}

#[test]
fn seed_variation_requires_enough_seeds_and_probes() {
    let m = echo();
    let p = probes(0, 1);
    assert!(seed_variation(&ctx(), &m, &cfg(NULL_TOKEN), &m, &cfg(NULL_TOKEN), &p, &[0, 1, 2, 3]).is_err());
    assert!(seed_variation(&ctx(), &m, &cfg(NULL_TOKEN), &m, &cfg(NULL_TOKEN), &p[..9], &[0, 1, 2, 3, 4]).is_err());
}

#[test]
fn multipass_of_an_echo_model_keeps_identity() {
    let m = echo();
    let p = probes(1, 1);
    let c = RestoreConfig { passes: 2, ..cfg(TokenId(2)) };
    let out = multipass(&ctx(), &m, &c, &p).unwrap();
    let pass = |k: &str| out.report.column(k, |r| r.id_sim);
    let (first, second) = (pass("pass-1"), pass("pass-2"));
    assert_eq!(first.len(), p.len());
    for (a, b) in first.iter().zip(&second) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let share = first.iter().zip(&second).filter(|(a, b)| b >= a).count() as f64 / first.len() as f64;
    assert_eq!(out.report.verdict("second-pass-majority").unwrap().statistic, Some(share));
}

#[test]
fn gamma_one_matches_blind_restoration() {
    let mut sys = tiny_system(1);
    let v = sys.add_identity_token("<v0>", TokenInit::Random, &mut seeded(4)).unwrap();
    let p = probes(0, 1);
    let personalized = RestoreConfig { w: 3.0, ..cfg(v) };
    let g = gamma_ablation(&ctx(), &sys, &personalized, &p, &[1.0]).unwrap();
    let blind = RestoreConfig { w: 0.0, gamma: 1.0, ..cfg(NULL_TOKEN) };
    let b = main_benchmark(&ctx(), &sys, &blind, &sys, &blind, &p).unwrap();
    assert_eq!(g.report.column("gamma=1", |r| r.psnr_db), b.report.column("blind", |r| r.psnr_db));
}

#[test]
fn self_swap_changes_nothing() {
    let sys = tiny_system(2);
    let donor = sys.deep_clone().unwrap();
    let out = encoder_swap(&ctx(), &sys, &donor, &cfg(CLASS_TOKEN), &probes(2, 1)).unwrap();
    let v = out.report.verdict("swap-within-tolerance").unwrap();
    assert_eq!(v.statistic, Some(0.0));
    assert_eq!(v.outcome, Outcome::Pass);
}

#[test]
fn untouched_system_has_zero_prior_drift() {
    let sys = tiny_system(3);
    let same = sys.deep_clone().unwrap();
    let out = prior_drift(&sys, &[("with-prior", &same), ("without-prior", &same)], &probes(0, 1), 9).unwrap();
    assert!(out.report.rows.iter().all(|r| r.value == Some(0.0)));
    // equal drift is not a reduction
    assert_eq!(out.report.verdict("prior-reduces-drift").unwrap().outcome, Outcome::Fail);
}

#[test]
fn verdicts_are_recomputable_from_written_rows() {
    let sys = tiny_system(4);
    let p = probes(1, 2);
    assert_eq!(p.len(), 20);
    let blind = RestoreConfig { w: 0.0, gamma: 1.0, ..cfg(NULL_TOKEN) };
    let out = main_benchmark(&ctx(), &sys, &blind, &sys, &cfg(CLASS_TOKEN), &p).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.report.write(dir.path(), Some(&out.sheet)).unwrap();
    let loaded = ExperimentReport::load(dir.path().join("report.json")).unwrap();
    assert_eq!(loaded.recompute_verdicts(), out.report.verdicts);
    assert_eq!(loaded.rows, out.report.rows);
    assert!(dir.path().join("sheet.png").exists());
    assert_eq!(
        loaded.verdict("probe-count").unwrap().outcome,
        Outcome::Pass,
        "20 probes satisfy the sample-size rule"
    );
}

#[test]
fn probes_are_reproducible_and_distinct_per_realization() {
    let a = probes(0, 2);
    let b = probes(0, 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.lq.data(), y.lq.data());
        assert_eq!(x.seed, y.seed);
    }
    assert_ne!(a[0].lq.data(), a[1].lq.data());
    assert_eq!(a[0].row, a[1].row);
    assert_ne!(a[0].seed, a[1].seed);
}
