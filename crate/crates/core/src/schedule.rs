//! Variance-preserving forward process `x_t = alpha_t * x + sigma_t * eps`.
//!
//! Timesteps are 1-indexed: `t = 1` is the near-clean end and `t = T` the
//! near-pure-noise end. Both schedule kinds are parameterized so that
//! `alpha_1 >= 0.999` and `sigma_T >= 0.99` hold for every `T >= 2`.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::normal_tensor;

/// `alpha` at the first (cleanest) timestep.
pub const ALPHA_FIRST: f64 = 0.9995;
/// `sigma` at the last (noisiest) timestep.
pub const SIGMA_LAST: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `alpha = cos(theta)`, `sigma = sin(theta)` with `theta` linear in `t`.
    Cosine,
    /// `alpha^2` linear in `t`.
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Manifest form of a schedule; the tables are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    // A single-step schedule only has the noisy endpoint.
    let frac = |t: usize| {
        if steps == 1 {
            1.0
        } else {
            (t - 1) as f64 / (steps - 1) as f64
        }
    };
    let (alpha, sigma): (Vec<f64>, Vec<f64>) = (1..=steps)
        .map(|t| {
            let u = frac(t);
            match kind {
                ScheduleKind::Cosine => {
                    let lo = ALPHA_FIRST.acos();
                    let hi = SIGMA_LAST.asin();
                    let theta = lo + u * (hi - lo);
                    (theta.cos(), theta.sin())
                }
                ScheduleKind::Linear => {
                    let a_lo = ALPHA_FIRST * ALPHA_FIRST;
                    let a_hi = 1.0 - SIGMA_LAST * SIGMA_LAST;
                    let abar = a_lo + u * (a_hi - a_lo);
                    (abar.sqrt(), (1.0 - abar).sqrt())
                }
            }
        })
        .unzip();
    Ok(NoiseSchedule { kind, alpha, sigma })
}

impl NoiseSchedule {
    /// Builds a schedule from explicit tables; used for hand-computed fixtures.
    pub fn from_tables(kind: ScheduleKind, alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != sigma.len() {
            return Err(invalid("alpha and sigma tables must be nonempty and equal length"));
        }
        Ok(Self { kind, alpha, sigma })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        make_schedule(spec.steps, spec.kind)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            steps: self.steps(),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Maps a fraction of the noise range onto a timestep index, `0 -> 1`, `1 -> T`.
    pub fn index_at_fraction(&self, frac: f64) -> usize {
        let t = (frac.clamp(0.0, 1.0) * self.steps() as f64).round() as usize;
        t.clamp(1, self.steps())
    }

    /// `count` timesteps from noisiest to cleanest, evenly spaced and always
    /// starting at `T`.
    pub fn sampling_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 {
            return Err(invalid("sampler needs at least one step"));
        }
        let tt = self.steps();
        let count = count.min(tt);
        let mut ts: Vec<usize> = (1..=count)
            .map(|k| ((k as f64 * tt as f64 / count as f64).round() as usize).clamp(1, tt))
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// A noisy sample at a single shared timestep.
#[derive(Debug, Clone)]
pub struct NoisyState {
    pub x_t: Tensor,
    pub t: usize,
}

pub fn add_noise(x: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<NoisyState> {
    s.check_t(t)?;
    if x.shape() != eps.shape() {
        return Err(invalid(format!(
            "noise shape {:?} does not match image shape {:?}",
            eps.dims(),
            x.dims()
        )));
    }
    let x_t = ((x * s.alpha(t))? + (eps * s.sigma(t))?)?;
    Ok(NoisyState { x_t, t })
}

/// Per-sample noising of a `(C, B, H, W)` batch with one timestep per batch item.
pub fn add_noise_batch(x: &Tensor, eps: &Tensor, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    let (_, b, _, _) = x.dims4()?;
    if ts.len() != b {
        return Err(invalid("one timestep per batch item required"));
    }
    if x.shape() != eps.shape() {
        return Err(invalid("noise shape does not match batch shape"));
    }
    for &t in ts {
        s.check_t(t)?;
    }
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha(t)).collect();
    let g: Vec<f64> = ts.iter().map(|&t| s.sigma(t)).collect();
    let a = Tensor::from_vec(a, (1, b, 1, 1), x.device())?.to_dtype(x.dtype())?;
    let g = Tensor::from_vec(g, (1, b, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok((x.broadcast_mul(&a)? + eps.broadcast_mul(&g)?)?)
}

pub fn predict_x0(state: &NoisyState, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(state.t)?;
    let a = s.alpha(state.t);
    if a == 0.0 {
        return Err(Error::SingularStep { t: state.t });
    }
    Ok(((&state.x_t - (eps_hat * s.sigma(state.t))?)? / a)?)
}

/// One deterministic-by-default DDIM update from `state.t` to `t_prev < state.t`.
/// `x0` overrides the implied clean estimate (e.g. a clipped one) when given.
pub fn ddim_jump<R: Rng + ?Sized>(
    state: &NoisyState,
    eps_hat: &Tensor,
    x0: Option<&Tensor>,
    t_prev: usize,
    s: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<NoisyState> {
    if state.t <= 1 {
        return Err(Error::NoFurtherSteps);
    }
    s.check_t(t_prev)?;
    if t_prev >= state.t {
        return Err(invalid("ddim step must move towards t=1"));
    }
    let x0 = match x0 {
        Some(x0) => x0.clone(),
        None => predict_x0(state, eps_hat, s)?,
    };
    let (a_t, s_t) = (s.alpha(state.t), s.sigma(state.t));
    let (a_p, s_p) = (s.alpha(t_prev), s.sigma(t_prev));
    let noise_scale = if eta > 0.0 {
        let ratio = (s_p * s_p) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_p * a_p));
        eta * ratio.max(0.0).sqrt()
    } else {
        0.0
    };
    let dir_scale = (s_p * s_p - noise_scale * noise_scale).max(0.0).sqrt();
    let mut x = ((&x0 * a_p)? + (eps_hat * dir_scale)?)?;
    if noise_scale > 0.0 {
        let z = normal_tensor(rng, x.shape().clone(), x.dtype(), x.device())?;
        x = (x + (z * noise_scale)?)?;
    }
    Ok(NoisyState { x_t: x, t: t_prev })
}

pub fn sampler_step<R: Rng + ?Sized>(
    state: &NoisyState,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<NoisyState> {
    if state.t <= 1 {
        return Err(Error::NoFurtherSteps);
    }
    ddim_jump(state, eps_hat, None, state.t - 1, s, eta, rng)
}
