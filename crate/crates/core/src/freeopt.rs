//! Training-free mask optimization: raw per-layer mask logits are tuned at
//! every sampling timestep against analytic rewards, with no generator.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Mixture;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{self, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::mask::{self, MaskMap, MaskTensor};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::sampler;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `-‖x - μ_c‖²`.
    ModeProximity,
    /// Log-density of `x` under the full mixture.
    MixtureLoglik,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub weight: f64,
}

/// Which clean-sample estimate the rewards score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Mode {
    /// `x̂₀` recovered from `(z_t, ε̂)`.
    Predict,
    /// The stepped latent `z_{t_prev}` itself.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreeOptConfig {
    /// Inner iterations per timestep (λ).
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub seed: u64,
    /// Starting logit; any value ≥ 0 gives all-ones hard masks at δ = 0.5.
    /// A weight switches off only once its logit has drifted below zero,
    /// so this sets how much sustained reward pressure a flip needs.
    pub init_logit: f64,
    pub tau: f64,
    pub delta: f64,
    /// Perturb logits with Gumbel noise before thresholding.
    pub gumbel_noise: bool,
    /// Carry logits from one timestep to the next instead of resetting.
    pub warm_start: bool,
    pub x0_mode: X0Mode,
    pub rewards: Vec<RewardSpec>,
}

impl Default for FreeOptConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            lr: 1e-2,
            weight_decay: 0.0,
            steps: 15,
            guidance: 1.5,
            eta: 0.0,
            seed: 0,
            init_logit: 2.0,
            tau: 1.0,
            delta: 0.5,
            gumbel_noise: false,
            warm_start: true,
            x0_mode: X0Mode::Predict,
            rewards: vec![
                RewardSpec {
                    kind: RewardKind::ModeProximity,
                    weight: 1.0,
                },
                RewardSpec {
                    kind: RewardKind::MixtureLoglik,
                    weight: 5.0,
                },
            ],
        }
    }
}

impl FreeOptConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::config("freeopt.steps", format!("must lie in 1..={timesteps}")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("freeopt.lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("freeopt.weight_decay", "must be finite and >= 0"));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::config("freeopt.guidance", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config("freeopt.eta", "must lie in [0, 1]"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("freeopt.tau", "temperature must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("freeopt.delta", "threshold must lie in (0, 1)"));
        }
        if !self.init_logit.is_finite() {
            return Err(Error::config("freeopt.init_logit", "must be finite"));
        }
        if self.rewards.is_empty() {
            return Err(Error::config("freeopt.rewards", "at least one reward is required"));
        }
        for (i, r) in self.rewards.iter().enumerate() {
            if !r.weight.is_finite() {
                return Err(Error::config(format!("freeopt.rewards[{i}].weight"), "must be finite"));
            }
        }
        Ok(())
    }

    /// The plain sampler that the optimized path reduces to.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            eta: self.eta,
            guidance: self.guidance,
            seed: self.seed,
        }
    }
}

/// Reward of a single point (higher is better).
pub fn evaluate_reward(x: [f64; 2], class: usize, spec: &RewardSpec, mixture: &Mixture) -> Result<f64> {
    match spec.kind {
        RewardKind::ModeProximity => {
            let m = mixture.mean(class)?;
            Ok(-((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)))
        }
        RewardKind::MixtureLoglik => {
            mixture.mean(class)?;
            Ok(mixture.log_density(x))
        }
    }
}

/// `Σ ω_i Ψ_i(x, c)` for one point.
pub fn weighted_reward(x: [f64; 2], class: usize, specs: &[RewardSpec], mixture: &Mixture) -> Result<f64> {
    specs
        .iter()
        .map(|s| Ok(s.weight * evaluate_reward(x, class, s, mixture)?))
        .sum()
}

/// Batch mean of one reward on the tape; `x` is `B×2`.
fn reward_var<'t>(x: Var<'t>, classes: &[usize], spec: &RewardSpec, mixture: &Mixture) -> Result<Var<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != classes.len() {
        return Err(Error::dim("reward", &shape, &[classes.len(), 2]));
    }
    let b = shape[0];
    match spec.kind {
        RewardKind::ModeProximity => {
            let mut mu = Vec::with_capacity(2 * b);
            for &c in classes {
                mu.extend_from_slice(&mixture.mean(c)?);
            }
            let d = x.sub(tape.constant(Tensor::new(&[b, 2], mu)?))?;
            d.mul(d)?.sum_last()?.mean()?.scale(-1.0)
        }
        RewardKind::MixtureLoglik => {
            for &c in classes {
                mixture.mean(c)?;
            }
            let k = mixture.components();
            // Replicate each point once per component: B×2 · 2×2K.
            let tile = Tensor::from_fn(&[2, 2 * k], |i| {
                let (row, col) = (i / (2 * k), i % (2 * k));
                if col % 2 == row {
                    1.0
                } else {
                    0.0
                }
            });
            let means: Vec<f64> = mixture.means.iter().flat_map(|m| m.iter().copied()).collect();
            let d = x
                .matmul(tape.constant(tile))?
                .sub(tape.constant(Tensor::new(&[2 * k], means)?))?;
            let var = mixture.std * mixture.std;
            let log_norm = -(std::f64::consts::TAU * var).ln() - (k as f64).ln();
            d.mul(d)?
                .reshape(&[b, k, 2])?
                .sum_last()?
                .scale(-1.0 / (2.0 * var))?
                .logsumexp_last()?
                .add_scalar(log_norm)?
                .mean()
        }
    }
}

/// `-Σ ω_i Ψ_i(x, c)`, averaged over the batch.
pub fn reward_loss<'t>(x: Var<'t>, classes: &[usize], specs: &[RewardSpec], mixture: &Mixture) -> Result<Var<'t>> {
    if specs.is_empty() {
        return Err(Error::Contract("reward_loss needs at least one reward".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for s in specs {
        let term = reward_var(x, classes, s, mixture)?.scale(-s.weight)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty specs"))
}

/// Identity: samples live directly in data space.
pub fn decode_latent(z0: &Tensor) -> Tensor {
    z0.clone()
}

/// Per-layer logits, each `C_out×C_in`, shared across the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub logits: ParamStore,
    pub tau: f64,
    pub delta: f64,
}

impl MaskState {
    pub fn init(model: &DenoiserModel, cfg: &FreeOptConfig) -> Result<Self> {
        let mut logits = ParamStore::new();
        for id in &model.config.maskable_layers {
            let (out, inp) = model.config.layer_shape(id)?;
            logits.insert(id.clone(), Tensor::full(&[out, inp], cfg.init_logit));
        }
        Ok(Self {
            logits,
            tau: cfg.tau,
            delta: cfg.delta,
        })
    }

    /// Deterministic hard masks of the current logits.
    pub fn hard_bits(&self) -> BTreeMap<String, Tensor> {
        self.logits
            .iter()
            .map(|(k, l)| (k.clone(), mask::threshold_logits(l, self.tau, self.delta)))
            .collect()
    }

    /// Hard straight-through masks for a batch of `b`, built from bound
    /// logits.
    fn masks<'t>(
        &self,
        bound: &BTreeMap<String, Var<'t>>,
        b: usize,
        mut noise: Option<&mut Rng>,
    ) -> Result<MaskMap<'t>> {
        let mut out = MaskMap::new();
        for (id, l) in bound {
            let shape = l.shape();
            let mut rows = l.reshape(&[1, shape[0], shape[1]])?;
            if b > 1 {
                let ones = l.tape().constant(Tensor::ones(&[b, shape[0], shape[1]]));
                rows = ones.mul(*l)?;
            }
            let m = mask::gumbel_sigmoid(rows, self.tau, self.delta, true, noise.as_deref_mut())?;
            out.insert(id.clone(), m);
        }
        Ok(out)
    }
}

/// Loss history of one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepLog {
    pub timestep: usize,
    pub losses: Vec<f64>,
    pub best_iteration: Option<usize>,
    /// Zero fraction of each layer's final hard mask.
    pub final_ratios: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeOptResult {
    pub sample: Tensor,
    pub logs: Vec<TimestepLog>,
    pub final_state: MaskState,
}

impl FreeOptResult {
    pub fn logs_csv(&self) -> String {
        let mut s = String::from("timestep,iteration,loss\n");
        for log in &self.logs {
            for (k, l) in log.losses.iter().enumerate() {
                s.push_str(&format!("{},{k},{l}\n", log.timestep));
            }
        }
        s
    }
}

/// Everything a single optimized step needs besides the mask state.
pub struct StepContext<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a NoiseSchedule,
    pub cfg: &'a FreeOptConfig,
    pub mixture: &'a Mixture,
    pub classes: &'a [usize],
    /// Index keying the Gumbel draws of this generation.
    pub generation: u64,
}

fn ddim_with_masks<'t>(
    ctx: &StepContext<'_>,
    z: Var<'t>,
    t: usize,
    t_prev: Option<usize>,
    xi: Option<&Tensor>,
    masks: &MaskMap<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let eps = sampler::guided_eps(ctx.model, z, t, ctx.classes, ctx.cfg.guidance, masks)?;
    let next = diffusion::ddim_step(z, eps, t, t_prev, ctx.cfg.eta, xi, ctx.sched)?;
    Ok((eps, next))
}

/// Runs λ reward-gradient updates of the logits at timestep `t`, then takes
/// the DDIM step with the final logits.
pub fn optimize_timestep(
    ctx: &StepContext<'_>,
    z_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    xi: Option<&Tensor>,
    state: &mut MaskState,
) -> Result<(Tensor, TimestepLog)> {
    let cfg = ctx.cfg;
    let b = ctx.classes.len();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let mut gumbel = rng::keyed(cfg.seed, &[ctx.generation, t as u64, k as u64]);
        let tape = Tape::new();
        let bound: BTreeMap<String, Var<'_>> = state
            .logits
            .iter()
            .map(|(id, l)| (id.clone(), tape.param(l.clone())))
            .collect();
        let masks = state.masks(&bound, b, cfg.gumbel_noise.then_some(&mut gumbel))?;
        let z = tape.constant(z_t.clone());
        let diag = |e: Error| match e {
            Error::NonFinite { op } => {
                Error::Divergence(format!("non-finite {op} at timestep {t}, iteration {k}"))
            }
            other => other,
        };
        let (eps, next) = ddim_with_masks(ctx, z, t, t_prev, xi, &masks).map_err(diag)?;
        let x0 = match cfg.x0_mode {
            X0Mode::Predict => diffusion::predict_x0(z, eps, Some(t), ctx.sched).map_err(diag)?,
            X0Mode::Direct => next,
        };
        let loss = reward_loss(x0, ctx.classes, &cfg.rewards, ctx.mixture).map_err(diag)?;
        tape.backward(loss).map_err(diag)?;
        let grads: BTreeMap<String, Tensor> = bound
            .iter()
            .map(|(id, v)| (id.clone(), tape.grad(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()))))
            .collect();
        opt.step(&mut state.logits, &grads).map_err(diag)?;
        losses.push(loss.value().item()?);
    }

    let tape = Tape::new();
    let bound: BTreeMap<String, Var<'_>> = state
        .logits
        .iter()
        .map(|(id, l)| (id.clone(), tape.constant(l.clone())))
        .collect();
    let mut gumbel = rng::keyed(cfg.seed, &[ctx.generation, t as u64, cfg.iterations as u64]);
    let masks = state.masks(&bound, b, cfg.gumbel_noise.then_some(&mut gumbel))?;
    let final_ratios = masks
        .iter()
        .map(|(id, m)| Ok((id.clone(), mask::mask_ratio(m)?)))
        .collect::<Result<_>>()?;
    let (_, next) = ddim_with_masks(ctx, tape.constant(z_t.clone()), t, t_prev, xi, &masks)?;
    let best_iteration = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let log = TimestepLog {
        timestep: t,
        losses,
        best_iteration,
        final_ratios,
    };
    Ok(((*next.value()).clone(), log))
}

/// One optimized generation of `classes.len()` samples (usually one) drawn
/// from stream `generation` of `cfg.seed`, exactly like
/// [`sampler::sample`] with [`FreeOptConfig::sampler_config`].
pub fn generate_training_free(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &FreeOptConfig,
    mixture: &Mixture,
    classes: &[usize],
    generation: u64,
) -> Result<FreeOptResult> {
    cfg.validate(sched.len())?;
    if classes.is_empty() {
        return Err(Error::Contract("no samples requested".into()));
    }
    if model.config.maskable_layers.is_empty() {
        return Err(Error::Contract("model has no maskable layers".into()));
    }
    let dim = model.config.data_dim;
    let b = classes.len() as u64;
    let mut rngs: Vec<Rng> = (0..b)
        .map(|i| rng::stream(cfg.seed, generation * b + i))
        .collect();
    let init: Vec<f64> = rngs
        .iter_mut()
        .flat_map(|r| sampler::initial_noise(r, dim))
        .collect();
    let mut z = Tensor::new(&[classes.len(), dim], init)?;
    let ctx = StepContext {
        model,
        sched,
        cfg,
        mixture,
        classes,
        generation,
    };
    let mut state = MaskState::init(model, cfg)?;
    let mut logs = Vec::new();
    for (t, t_prev) in sched.step_pairs(cfg.steps)? {
        if !cfg.warm_start {
            state = MaskState::init(model, cfg)?;
        }
        let xi = sampler::step_noise(&mut rngs, dim, cfg.eta);
        let (next, log) = optimize_timestep(&ctx, &z, t, t_prev, xi.as_ref(), &mut state)?;
        z = next;
        logs.push(log);
    }
    Ok(FreeOptResult {
        sample: decode_latent(&z),
        logs,
        final_state: state,
    })
}

/// One single-sample generation per entry of `classes`, where generation
/// `i` reproduces sample `i` of a plain sampler run. Generations are
/// independent and run in parallel.
pub fn generate_many(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &FreeOptConfig,
    mixture: &Mixture,
    classes: &[usize],
) -> Result<Vec<FreeOptResult>> {
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &c)| generate_training_free(model, sched, cfg, mixture, &[c], i as u64))
        .collect()
}

/// The hard masks of `state` as mask tensors on `tape`, for inspection.
pub fn state_masks<'t>(tape: &'t Tape, state: &MaskState) -> BTreeMap<String, MaskTensor<'t>> {
    state
        .hard_bits()
        .into_iter()
        .map(|(k, bits)| (k, MaskTensor::hard(tape.constant(bits))))
        .collect()
}
