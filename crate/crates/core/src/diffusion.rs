//! Noise schedule, forward corruption, DDIM reverse steps with classifier-free
//! guidance, and the ε-prediction training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule.timesteps", "must be positive"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "schedule.beta_start",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::config("schedule.betas", "each beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ_t`, with the virtual step before 0 (`None`) defined as 1.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self.alpha_bars.get(t).copied().ok_or_else(|| {
                Error::Contract(format!("timestep {t} out of range for T={}", self.len()))
            }),
        }
    }

    /// Evenly spaced inference timesteps, largest first, starting at `T-1`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::config(
                "sampler.steps",
                format!("need 1 <= steps <= {t}, got {steps}"),
            ));
        }
        Ok((0..steps).map(|i| t - 1 - i * t / steps).collect())
    }

    /// Consecutive `(t, t_prev)` pairs for a sampling run; the last pair ends
    /// at the virtual step `None`.
    pub fn step_pairs(&self, steps: usize) -> Result<Vec<(usize, Option<usize>)>> {
        let ts = self.inference_timesteps(steps)?;
        Ok(ts
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.0,
            guidance: 7.5,
            seed: 0,
        }
    }
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·eps`.
pub fn add_noise<'t>(
    z0: Var<'t>,
    eps: Var<'t>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let ab = sched.alpha_bar(Some(t))?;
    z0.scale(ab.sqrt())?.add(eps.scale((1.0 - ab).sqrt())?)
}

/// Per-example timesteps variant of [`add_noise`] over a `B×D` batch.
pub fn add_noise_batch(
    z0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::dim("add_noise", z0.shape(), eps.shape()));
    }
    let (b, d) = z0.dims2("add_noise")?;
    if ts.len() != b {
        return Err(Error::dim("add_noise", z0.shape(), &[ts.len()]));
    }
    let coef: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| sched.alpha_bar(Some(t)).map(|ab| (ab.sqrt(), (1.0 - ab).sqrt())))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_fn(z0.shape(), |i| {
        let (a, s) = coef[i / d];
        a * z0.data()[i] + s * eps.data()[i]
    }))
}

/// `(z_t - sqrt(1-ᾱ_t)·eps_hat) / sqrt(ᾱ_t)`; `t = None` is the identity.
pub fn predict_x0<'t>(
    z_t: Var<'t>,
    eps_hat: Var<'t>,
    t: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::NumericDomain(format!("alpha_bar {ab} at t={t:?}")));
    }
    z_t.sub(eps_hat.scale((1.0 - ab).sqrt())?)?
        .scale(1.0 / ab.sqrt())
}

/// DDIM stochasticity `σ` for a step from `t` to `t_prev`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: Option<usize>, eta: f64) -> Result<f64> {
    let ab_t = sched.alpha_bar(Some(t))?;
    let ab_p = sched.alpha_bar(t_prev)?;
    let ratio = (1.0 - ab_p) / (1.0 - ab_t);
    let radicand = 1.0 - ab_t / ab_p;
    if ratio < 0.0 || radicand < 0.0 {
        return Err(Error::NumericDomain(format!(
            "negative DDIM variance between t={t} and {t_prev:?}"
        )));
    }
    Ok(eta * ratio.sqrt() * radicand.sqrt())
}

/// One DDIM update `z_t → z_{t_prev}`. `noise` supplies `ξ` and is only read
/// when `eta > 0`.
pub fn ddim_step<'t>(
    z_t: Var<'t>,
    eps_hat: Var<'t>,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    noise: Option<&Tensor>,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::Contract(format!("t_prev {p} must be below t {t}")));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Contract(format!("eta {eta} outside [0, 1]")));
    }
    let ab_p = sched.alpha_bar(t_prev)?;
    let sigma = ddim_sigma(sched, t, t_prev, eta)?;
    let mut dir = 1.0 - ab_p - sigma * sigma;
    if dir < 0.0 {
        if dir < -1e-12 {
            return Err(Error::NumericDomain(format!(
                "negative direction radicand {dir} at t={t}"
            )));
        }
        dir = 0.0;
    }
    let x0 = predict_x0(z_t, eps_hat, Some(t), sched)?;
    let mut out = x0.scale(ab_p.sqrt())?.add(eps_hat.scale(dir.sqrt())?)?;
    if sigma > 0.0 {
        let xi = noise.ok_or_else(|| Error::Contract("eta > 0 requires a noise tensor".into()))?;
        out = out.add(z_t.tape().constant(xi.map(|x| x * sigma)))?;
    }
    Ok(out)
}

/// Classifier-free guidance: `eps_u + s·(eps_c - eps_u)`.
pub fn cfg_combine<'t>(eps_uncond: Var<'t>, eps_cond: Var<'t>, scale: f64) -> Result<Var<'t>> {
    if scale < 0.0 {
        return Err(Error::Contract(format!("guidance scale {scale} < 0")));
    }
    eps_uncond.add(eps_cond.sub(eps_uncond)?.scale(scale)?)
}

/// A noised training batch: timesteps, injected noise, and `z_t`.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    pub z_t: Tensor,
}

/// Draws `t ~ U{0..T-1}` and `eps ~ N(0, I)` per example.
pub fn noise_batch(z0: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<NoisedBatch> {
    use rand::Rng as _;
    let (b, _) = z0.dims2("diffusion_loss")?;
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.len())).collect();
    let noise = rng::normal_tensor(z0.shape(), rng);
    let z_t = add_noise_batch(z0, &noise, &timesteps, sched)?;
    Ok(NoisedBatch {
        timesteps,
        noise,
        z_t,
    })
}

/// `MSE(ε_θ(z_t, t, c), ε)` for freshly drawn `t` and `ε`. The predictor
/// receives `(z_t, timesteps)` and builds its output on `tape`, so gradients
/// flow into whatever parameters it has bound there.
pub fn diffusion_loss<'t, F>(
    tape: &'t Tape,
    z0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    predict: F,
) -> Result<Var<'t>>
where
    F: FnOnce(Var<'t>, &[usize]) -> Result<Var<'t>>,
{
    let batch = noise_batch(z0, sched, rng)?;
    let z_t = tape.constant(batch.z_t);
    let eps_hat = predict(z_t, &batch.timesteps)?;
    eps_hat.mse(tape.constant(batch.noise))
}
