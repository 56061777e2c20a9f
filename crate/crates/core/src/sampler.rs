//! Batched DDIM sampling with classifier-free guidance, optionally through
//! mask generators.
//!
//! Sample `i` of a run draws all of its randomness from its own stream
//! `rng::stream(seed, i)`: first `x_T`, then one `ξ` per step when `eta > 0`.
//! Results therefore do not depend on how samples are chunked.

use crate::denoiser::DenoiserModel;
use crate::diffusion::{self, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::mask::{GeneratorSet, MaskMap};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// Initial noise for one sample; the stream is left positioned for the
/// per-step draws.
pub fn initial_noise(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng::normal(rng)).collect()
}

/// Guided `ε̂` for a batch, sharing `masks` between the conditional and
/// unconditional passes.
pub fn guided_eps<'t>(
    model: &DenoiserModel,
    z: Var<'t>,
    t: usize,
    classes: &[usize],
    guidance: f64,
    masks: &MaskMap<'t>,
) -> Result<Var<'t>> {
    let tape = z.tape();
    let p = model.bind(tape, false);
    let b = classes.len();
    let ts = vec![t; b];
    let null = vec![model.config.null_class(); b];
    let cond = model.forward(&p, z, &ts, classes, masks)?;
    let uncond = model.forward(&p, z, &ts, &null, masks)?;
    diffusion::cfg_combine(uncond, cond, guidance)
}

/// Draws one `ξ` row per stream (or none when `eta == 0`).
pub fn step_noise(rngs: &mut [Rng], dim: usize, eta: f64) -> Option<Tensor> {
    if eta == 0.0 {
        return None;
    }
    let data: Vec<f64> = rngs.iter_mut().flat_map(|r| initial_noise(r, dim)).collect();
    Some(Tensor::new(&[rngs.len(), dim], data).expect("noise shape"))
}

/// Generates one sample per entry of `classes`; sample `i` uses stream
/// `first_index + i`.
pub fn sample(
    model: &DenoiserModel,
    gens: Option<&GeneratorSet>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    classes: &[usize],
    first_index: u64,
) -> Result<Tensor> {
    if classes.is_empty() {
        return Err(Error::Contract("no samples requested".into()));
    }
    let dim = model.config.data_dim;
    let mut parts = Vec::new();
    for (ci, chunk) in classes.chunks(CHUNK).enumerate() {
        let base = first_index + (ci * CHUNK) as u64;
        parts.push(sample_chunk(model, gens, sched, cfg, chunk, base, dim)?);
    }
    Tensor::concat_rows(&parts)
}

fn sample_chunk(
    model: &DenoiserModel,
    gens: Option<&GeneratorSet>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    classes: &[usize],
    first_index: u64,
    dim: usize,
) -> Result<Tensor> {
    let b = classes.len();
    let mut rngs: Vec<Rng> = (0..b as u64).map(|i| rng::stream(cfg.seed, first_index + i)).collect();
    let init: Vec<f64> = rngs.iter_mut().flat_map(|r| initial_noise(r, dim)).collect();
    let mut z = Tensor::new(&[b, dim], init)?;
    for (t, t_prev) in sched.step_pairs(cfg.steps)? {
        let xi = step_noise(&mut rngs, dim, cfg.eta);
        let tape = Tape::new();
        let zv = tape.constant(z);
        let masks = match gens {
            Some(g) => {
                let gb = g.bind(&tape, false);
                g.generate_masks(&gb, &vec![t; b], zv, true, None)?
            }
            None => MaskMap::new(),
        };
        let eps = guided_eps(model, zv, t, classes, cfg.guidance, &masks)?;
        let next = diffusion::ddim_step(zv, eps, t, t_prev, cfg.eta, xi.as_ref(), sched)?;
        z = (*next.value()).clone();
    }
    Ok(z)
}

/// `n_per_class` samples for each class, grouped by class.
pub fn class_grid(num_classes: usize, n_per_class: usize) -> Vec<usize> {
    (0..num_classes)
        .flat_map(|c| std::iter::repeat_n(c, n_per_class))
        .collect()
}
