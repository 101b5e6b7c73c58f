//! Shared helpers for the integration tests.

use candle_core::{DType, Device, Tensor, Var};

use dpt_core::nets::{ArchConfig, RestorationSystem};
use dpt_core::pivot::DenoiseTerm;
use dpt_core::rng::{normal_tensor, seeded};
use dpt_core::schedule::{make_schedule, ScheduleKind};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

pub fn arch() -> ArchConfig {
    ArchConfig {
        image_size: 16,
        channels: 3,
        patch: 2,
        widths: vec![8, 16],
        groups: 4,
        time_dim: 16,
        freq_dim: 8,
    }
}

/// f64 system with the zero-initialized encoder projections randomized, so
/// every parameter influences the loss.
pub fn system() -> RestorationSystem {
    let sys = RestorationSystem::init(&arch(), make_schedule(50, ScheduleKind::Cosine).unwrap(), 5).unwrap();
    let mut sys = sys.to_dtype(DType::F64).unwrap();
    let mut rng = seeded(77);
    for v in sys.encoder.params.vars() {
        let t = v.as_tensor();
        if t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() == 0.0 {
            v.set(&normal_tensor(&mut rng, t.shape().clone(), DType::F64, &Device::Cpu).unwrap().affine(0.1, 0.0).unwrap())
                .unwrap();
        }
    }
    sys.denoiser.params.set_trainable(true);
    sys.encoder.params.set_trainable(true);
    sys
}

pub fn term(seed: u64, b: usize, ts: Vec<usize>) -> DenoiseTerm {
    let mut rng = seeded(seed);
    let shape = (3, b, 16, 16);
    let clean = normal_tensor(&mut rng, shape, DType::F64, &Device::Cpu).unwrap().tanh().unwrap();
    let cond = normal_tensor(&mut rng, shape, DType::F64, &Device::Cpu).unwrap().tanh().unwrap();
    let eps = normal_tensor(&mut rng, shape, DType::F64, &Device::Cpu).unwrap();
    DenoiseTerm { clean, cond: Some(cond), ts, eps }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn set_entry(v: &Var, i: usize, value: f64) {
    let t = v.as_tensor();
    let mut flat = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    flat[i] = value;
    v.set(&Tensor::from_vec(flat, t.shape().clone(), &Device::Cpu).unwrap()).unwrap();
}

/// Outcome of a finite-difference comparison.
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub at: String,
}

/// Compares one entry of every named parameter against central differences.
pub fn gradient_check(sys: &RestorationSystem, loss: impl Fn(&RestorationSystem) -> Tensor) -> GradCheck {
    let l = loss(sys);
    let grads = l.backward().unwrap();
    let mut named: Vec<(String, Var)> = Vec::new();
    for store in [&sys.denoiser.params, &sys.encoder.params] {
        for n in store.names() {
            named.push((n.clone(), store.var(n).unwrap().clone()));
        }
    }
    let mut worst = (0.0, String::new());
    for (k, (name, v)) in named.iter().enumerate() {
        let numel = v.as_tensor().elem_count();
        let i = (k * 7919 + 13) % numel;
        let orig = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i];
        let analytic = grads
            .get(v.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i])
            .unwrap_or(0.0);
        set_entry(v, i, orig + H);
        let up = scalar(&loss(sys));
        set_entry(v, i, orig - H);
        let down = scalar(&loss(sys));
        set_entry(v, i, orig);
        let numeric = (up - down) / (2.0 * H);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    GradCheck {
        checked: named.len(),
        worst: worst.0,
        at: worst.1,
    }
}

