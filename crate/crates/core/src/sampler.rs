//! Inference: classifier-free guidance, blind restoration, staged
//! personalized restoration (unconditional first, guided afterwards) and
//! multi-pass restoration for heavy degradations.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{from_model_batch, to_model_batch, Image};
use crate::nets::{EpsModel, GuidanceFeatures, TokenId, CLASS_TOKEN, NULL_TOKEN};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::schedule::{ddim_jump, NoisyState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreConfig {
    /// Guidance scale.
    pub w: f64,
    /// Fraction of the initial (noisiest) sampler steps run unconditionally.
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
    pub passes: usize,
    pub prompt: TokenId,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            w: 2.0,
            gamma: 0.5,
            steps: 50,
            seed: 0,
            passes: 1,
            prompt: CLASS_TOKEN,
            eta: 0.0,
        }
    }
}

impl RestoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(invalid(format!("guidance scale must be >= 0, got {}", self.w)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.steps == 0 {
            return Err(invalid("at least one sampler step required"));
        }
        if self.passes == 0 {
            return Err(invalid("at least one pass required"));
        }
        if !(self.eta >= 0.0) {
            return Err(invalid("eta must be >= 0"));
        }
        Ok(())
    }

    /// Number of leading unconditional steps out of `n`: `ceil(gamma * n)`.
    pub fn unconditional_steps(&self, n: usize) -> usize {
        ((self.gamma * n as f64).ceil() as usize).min(n)
    }
}

/// `(1 + w) * eps(x_t, prompt) - w * eps(x_t, null)`, both branches seeing
/// the same guidance features. `w = 0` returns the conditional branch as is.
pub fn cfg_eps<M: EpsModel + ?Sized>(
    model: &M,
    state: &NoisyState,
    prompt: TokenId,
    w: f64,
    features: Option<&GuidanceFeatures>,
) -> Result<Tensor> {
    if !model.has_token(prompt) {
        return Err(Error::UnknownToken(format!("id {}", prompt.0)));
    }
    let b = state.x_t.dims4()?.1;
    let ts = vec![state.t; b];
    let cond = model.eps(&state.x_t, &ts, &vec![prompt; b], features)?;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond = model.eps(&state.x_t, &ts, &vec![NULL_TOKEN; b], features)?;
    Ok(((cond * (1.0 + w))? - (uncond * w)?)?)
}

fn is_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Runs one sampling loop per image, batched. `seeds[i]` seeds image `i`'s
/// initial noise. The first `ceil(gamma * n)` steps use the null token
/// without guidance; the rest use [`cfg_eps`] with the prompt.
pub fn restore_batch<M: EpsModel + ?Sized>(
    model: &M,
    lq: &[Image],
    seeds: &[u64],
    cfg: &RestoreConfig,
) -> Result<Vec<Image>> {
    cfg.validate()?;
    if lq.is_empty() || lq.len() != seeds.len() {
        return Err(invalid("one seed per input image required"));
    }
    if !model.has_token(cfg.prompt) {
        return Err(Error::UnknownToken(format!("id {}", cfg.prompt.0)));
    }
    let s = model.schedule();
    let device = Device::Cpu;
    let dtype = model.dtype();
    let cond = to_model_batch(lq, &device, dtype)?;
    let (c, b, h, w) = cond.dims4()?;
    // per-image noise so a batch reproduces single-image runs
    let noise: Vec<Tensor> = seeds
        .iter()
        .map(|&sd| normal_tensor(&mut seeded(sd), (c, 1, h, w), dtype, &device))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = noise.iter().collect();
    let mut state = NoisyState {
        x_t: Tensor::cat(&refs, 1)?,
        t: s.steps(),
    };
    let ts = s.sampling_timesteps(cfg.steps)?;
    let n_uncond = cfg.unconditional_steps(ts.len());
    let mut rng = seeded(derive_seed(seeds[0], &[0x57]));
    let mut out = None;
    for (k, &t) in ts.iter().enumerate() {
        state.t = t;
        let features = model.guidance(&cond, &vec![t; b])?;
        let eps = if k < n_uncond {
            model.eps(&state.x_t, &vec![t; b], &vec![NULL_TOKEN; b], features.as_ref())?
        } else {
            cfg_eps(model, &state, cfg.prompt, cfg.w, features.as_ref())?
        };
        if !is_finite(&eps)? {
            return Err(Error::InferenceFailure(format!("non-finite noise prediction at t={t}")));
        }
        let (a_t, s_t) = (s.alpha(t), s.sigma(t));
        if a_t == 0.0 {
            return Err(Error::SingularStep { t });
        }
        let x0 = ((&state.x_t - (&eps * s_t)?)? / a_t)?.clamp(-1.0, 1.0)?;
        if k + 1 == ts.len() {
            out = Some(x0);
            break;
        }
        // direction re-derived from the clipped estimate
        let eps = ((&state.x_t - (&x0 * a_t)?)? / s_t)?;
        state = ddim_jump(&state, &eps, Some(&x0), ts[k + 1], s, cfg.eta, &mut rng)?;
    }
    from_model_batch(&out.expect("at least one sampler step"))
}

/// Blind restoration: null token at every step, guidance from `E(lq)`.
pub fn restore_blind<M: EpsModel + ?Sized>(model: &M, lq: &Image, steps: usize, seed: u64) -> Result<Image> {
    let cfg = RestoreConfig {
        gamma: 1.0,
        w: 0.0,
        steps,
        seed,
        passes: 1,
        prompt: NULL_TOKEN,
        eta: 0.0,
    };
    Ok(restore_batch(model, std::slice::from_ref(lq), &[seed], &cfg)?.remove(0))
}

/// Personalized staged restoration of one image (single pass).
pub fn restore<M: EpsModel + ?Sized>(model: &M, lq: &Image, cfg: &RestoreConfig) -> Result<Image> {
    Ok(restore_batch(model, std::slice::from_ref(lq), &[cfg.seed], cfg)?.remove(0))
}

/// Seed of pass `pass` (0-based); the first pass uses the root seed itself.
pub fn pass_seed(root: u64, pass: usize) -> u64 {
    if pass == 0 {
        root
    } else {
        derive_seed(root, &[0x9A55, pass as u64])
    }
}

/// Feeds each pass's output back as the next pass's conditioning image.
/// Returns every pass's output, first to last.
pub fn restore_passes<M: EpsModel + ?Sized>(model: &M, lq: &[Image], seeds: &[u64], cfg: &RestoreConfig) -> Result<Vec<Vec<Image>>> {
    cfg.validate()?;
    let mut cond = lq.to_vec();
    let mut all = Vec::with_capacity(cfg.passes);
    for pass in 0..cfg.passes {
        let ps: Vec<u64> = seeds.iter().map(|&s| pass_seed(s, pass)).collect();
        cond = restore_batch(model, &cond, &ps, cfg)?;
        all.push(cond.clone());
    }
    Ok(all)
}

pub fn restore_multipass<M: EpsModel + ?Sized>(model: &M, lq: &Image, cfg: &RestoreConfig) -> Result<Image> {
    let mut all = restore_passes(model, std::slice::from_ref(lq), &[cfg.seed], cfg)?;
    Ok(all.pop().expect("passes >= 1").remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ArchConfig, RestorationSystem, TokenInit};
    use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind};

    /// Branch outputs are constants chosen per token.
    struct Stub {
        s: NoiseSchedule,
        cond: Tensor,
        uncond: Tensor,
    }

    impl EpsModel for Stub {
        fn schedule(&self) -> &NoiseSchedule {
            &self.s
        }
        fn has_token(&self, t: TokenId) -> bool {
            t.0 < 3
        }
        fn guidance(&self, _: &Tensor, _: &[usize]) -> Result<Option<GuidanceFeatures>> {
            Ok(None)
        }
        fn eps(&self, _: &Tensor, _: &[usize], tokens: &[TokenId], _: Option<&GuidanceFeatures>) -> Result<Tensor> {
            Ok(if tokens[0] == NULL_TOKEN {
                self.uncond.clone()
            } else {
                self.cond.clone()
            })
        }
    }

    fn stub(cond: Tensor, uncond: Tensor) -> Stub {
        Stub {
            s: make_schedule(10, ScheduleKind::Cosine).unwrap(),
            cond,
            uncond,
        }
    }

    fn state() -> NoisyState {
        NoisyState {
            x_t: Tensor::zeros((3, 2, 4, 4), DType::F32, &Device::Cpu).unwrap(),
            t: 5,
        }
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn cfg_constant_branches() {
        let c = Tensor::full(0.2f32, (3, 2, 4, 4), &Device::Cpu).unwrap();
        let u = Tensor::full(0.1f32, (3, 2, 4, 4), &Device::Cpu).unwrap();
        let m = stub(c, u);
        let out = cfg_eps(&m, &state(), CLASS_TOKEN, 3.0, None).unwrap();
        assert!(vals(&out).iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn cfg_w0_is_conditional_and_w1_is_exact() {
        let mut rng = seeded(4);
        let c = normal_tensor(&mut rng, (3, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let u = normal_tensor(&mut rng, (3, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let m = stub(c.clone(), u.clone());
        let out = cfg_eps(&m, &state(), CLASS_TOKEN, 0.0, None).unwrap();
        let a: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = c.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let out = cfg_eps(&m, &state(), CLASS_TOKEN, 1.0, None).unwrap();
        let got: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        let cu: Vec<f64> = u.flatten_all().unwrap().to_vec1().unwrap();
        for ((g, x), y) in got.iter().zip(&b).zip(&cu) {
            assert_eq!(*g, 2.0 * x - y);
        }
        assert!(matches!(
            cfg_eps(&m, &state(), TokenId(9), 1.0, None),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn gamma_maps_by_ceiling() {
        let c = RestoreConfig { gamma: 0.5, ..RestoreConfig::default() };
        assert_eq!(c.unconditional_steps(50), 25);
        assert_eq!(c.unconditional_steps(5), 3);
        let c = RestoreConfig { gamma: 0.0, ..c };
        assert_eq!(c.unconditional_steps(5), 0);
        let c = RestoreConfig { gamma: 1.0, ..c };
        assert_eq!(c.unconditional_steps(7), 7);
        assert!(RestoreConfig { gamma: 1.5, ..c.clone() }.validate().is_err());
        assert!(RestoreConfig { w: -1.0, ..c.clone() }.validate().is_err());
        assert!(RestoreConfig { passes: 0, ..c }.validate().is_err());
    }

    fn tiny() -> RestorationSystem {
        let arch = ArchConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            widths: vec![8, 16],
            groups: 4,
            time_dim: 16,
            freq_dim: 8,
        };
        RestorationSystem::init(&arch, make_schedule(100, ScheduleKind::Cosine).unwrap(), 2).unwrap()
    }

    fn lq() -> Image {
        Image::from_fn(32, 32, 3, |x, y, c| ((x * 3 + y * 5 + c) % 17) as f32 / 17.0)
    }

    #[test]
    fn restoration_is_seeded_shaped_and_bounded() {
        let sys = tiny();
        let a = restore_blind(&sys, &lq(), 4, 7).unwrap();
        let b = restore_blind(&sys, &lq(), 4, 7).unwrap();
        let c = restore_blind(&sys, &lq(), 4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), lq().shape());
        let one = restore_blind(&sys, &lq(), 1, 7).unwrap();
        assert!(one.is_finite());
        assert!(one.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gamma_one_collapses_to_blind() {
        let mut sys = tiny();
        let v = sys.add_identity_token("v", TokenInit::Random, &mut seeded(1)).unwrap();
        let cfg = RestoreConfig {
            gamma: 1.0,
            w: 3.0,
            steps: 5,
            seed: 11,
            prompt: v,
            ..RestoreConfig::default()
        };
        assert_eq!(restore(&sys, &lq(), &cfg).unwrap(), restore_blind(&sys, &lq(), 5, 11).unwrap());
    }

    #[test]
    fn single_pass_multipass_is_restore() {
        let sys = tiny();
        let cfg = RestoreConfig {
            steps: 3,
            seed: 5,
            ..RestoreConfig::default()
        };
        assert_eq!(restore_multipass(&sys, &lq(), &cfg).unwrap(), restore(&sys, &lq(), &cfg).unwrap());
        let two = RestoreConfig { passes: 2, ..cfg };
        let a = restore_multipass(&sys, &lq(), &two).unwrap();
        assert_eq!(a, restore_multipass(&sys, &lq(), &two).unwrap());
    }

    #[test]
    fn non_finite_parameters_fail_inference() {
        let sys = tiny();
        let v = sys.denoiser.params.var("out.b").unwrap();
        v.set(&(v.as_tensor() * f64::NAN).unwrap()).unwrap();
        assert!(matches!(restore_blind(&sys, &lq(), 2, 0), Err(Error::InferenceFailure(_))));
    }
}
