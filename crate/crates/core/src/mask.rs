//! Timestep- and sample-dependent binary weight masks.
//!
//! A [`MaskGenerator`] targets one linear layer of the denoiser. It fuses a
//! projected timestep embedding with the globally pooled sample, maps the
//! result through a four-layer MLP to one logit per weight entry, and
//! discretizes the logits with a Gumbel-Sigmoid. The resulting per-sample
//! mask multiplies the frozen weight, and the layer is evaluated as a batched
//! matrix product so every sample sees its own weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::{timestep_embeddings, DenoiserConfig};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Masks keyed by denoiser layer id.
pub type MaskMap<'t> = BTreeMap<String, MaskTensor<'t>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGeneratorConfig {
    pub layer_id: String,
    /// Width `C` of the pooled sample.
    pub in_channels: usize,
    /// Timestep-embedding width `C1`.
    pub temb_dim: usize,
    pub mlp_hidden: usize,
    /// Target weight shape `(C_out, C_in)`; `C2 = C_out·C_in`.
    pub target_shape: (usize, usize),
    pub tau: f64,
    pub delta: f64,
    pub use_temb: bool,
    pub use_sample: bool,
    /// Initial bias of the output layer, i.e. the starting logit.
    pub init_logit: f64,
    /// Scale of the output layer's initial weights; 0 starts every logit at
    /// exactly `init_logit`.
    pub init_output_scale: f64,
}

impl MaskGeneratorConfig {
    /// Config for `layer_id` of `model`, with the other fields at defaults.
    pub fn for_layer(model: &DenoiserConfig, layer_id: &str) -> Result<Self> {
        Ok(Self {
            layer_id: layer_id.to_string(),
            in_channels: model.data_dim,
            temb_dim: model.temb_dim,
            mlp_hidden: 64,
            target_shape: model.layer_shape(layer_id)?,
            tau: 1.0,
            delta: 0.5,
            use_temb: true,
            use_sample: true,
            init_logit: 3.0,
            init_output_scale: 0.0,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.target_shape.0 * self.target_shape.1
    }

    pub fn validate(&self) -> Result<()> {
        let path = |f: &str| format!("mask.{}.{f}", self.layer_id);
        if !(self.tau > 0.0) {
            return Err(Error::config(path("tau"), "temperature must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(path("delta"), "threshold must lie in (0, 1)"));
        }
        if !self.use_temb && !self.use_sample {
            return Err(Error::config(
                path("use_temb"),
                "at least one of use_temb / use_sample must be set",
            ));
        }
        if self.in_channels == 0 || self.temb_dim == 0 || self.mlp_hidden == 0 || self.out_dim() == 0 {
            return Err(Error::config(path("mlp_hidden"), "widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskGenerator {
    pub config: MaskGeneratorConfig,
    pub params: ParamStore,
}

const MLP: [&str; 4] = ["mlp0", "mlp1", "mlp2", "mlp3"];

impl MaskGenerator {
    pub fn new(config: MaskGeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let (c, c1, h, c2) = (
            config.in_channels,
            config.temb_dim,
            config.mlp_hidden,
            config.out_dim(),
        );
        let mut params = ParamStore::new();
        params.init_linear("fc", c1, c, &mut rng);
        params.init_linear("mlp0", c, h, &mut rng);
        params.init_linear("mlp1", h, h, &mut rng);
        params.init_linear("mlp2", h, h, &mut rng);
        params.init_linear("mlp3", h, c2, &mut rng);
        let scale = config.init_output_scale;
        if let Some(w) = params.get_mut("mlp3.weight") {
            for v in w.data_mut() {
                *v *= scale;
            }
        }
        params.insert("mlp3.bias", Tensor::full(&[c2], config.init_logit));
        Ok(Self { config, params })
    }

    pub fn from_params(config: MaskGeneratorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (c, c1, h, c2) = (
            config.in_channels,
            config.temb_dim,
            config.mlp_hidden,
            config.out_dim(),
        );
        for (name, out, inp) in [
            ("fc", c, c1),
            ("mlp0", h, c),
            ("mlp1", h, h),
            ("mlp2", h, h),
            ("mlp3", c2, h),
        ] {
            check(&params, &format!("{name}.weight"), &[out, inp])?;
            check(&params, &format!("{name}.bias"), &[out])?;
        }
        Ok(Self { config, params })
    }

    /// `z' = FC(t_emb) + GAP(z)`, with a disabled branch contributing zeros.
    pub fn fuse_inputs<'t>(&self, p: &Bound<'t>, t_emb: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        if !cfg.use_temb && !cfg.use_sample {
            return Err(Error::config(
                format!("mask.{}.use_temb", cfg.layer_id),
                "at least one of use_temb / use_sample must be set",
            ));
        }
        let pooled = gap(z)?;
        let b = pooled.shape()[0];
        if pooled.shape()[1] != cfg.in_channels {
            return Err(Error::dim("fuse_inputs", &pooled.shape(), &[b, cfg.in_channels]));
        }
        let tape = z.tape();
        let temb_branch = if cfg.use_temb {
            p.linear("fc", t_emb)?
        } else {
            tape.constant(Tensor::zeros(&[b, cfg.in_channels]))
        };
        let sample_branch = if cfg.use_sample {
            pooled
        } else {
            tape.constant(Tensor::zeros(&[b, cfg.in_channels]))
        };
        temb_branch.add(sample_branch)
    }

    /// Four linears with ReLU after the first two: `B×C → B×C2`.
    pub fn mask_logits<'t>(&self, p: &Bound<'t>, fused: Var<'t>) -> Result<Var<'t>> {
        let shape = fused.shape();
        if shape.len() != 2 || shape[1] != self.config.in_channels {
            return Err(Error::dim("mask_logits", &shape, &[0, self.config.in_channels]));
        }
        let h = p.linear(MLP[0], fused)?.relu()?;
        let h = p.linear(MLP[1], h)?.relu()?;
        let h = p.linear(MLP[2], h)?;
        p.linear(MLP[3], h)
    }

    /// Logits for per-example timesteps and samples, reshaped to
    /// `B×C_out×C_in`.
    pub fn logits<'t>(&self, p: &Bound<'t>, ts: &[usize], z: Var<'t>) -> Result<Var<'t>> {
        let temb = z
            .tape()
            .constant(timestep_embeddings(ts, self.config.temb_dim)?);
        let flat = self.mask_logits(p, self.fuse_inputs(p, temb, z)?)?;
        let (out, inp) = self.config.target_shape;
        flat.reshape(&[ts.len(), out, inp])
    }
}

fn check(params: &ParamStore, name: &str, shape: &[usize]) -> Result<()> {
    let t = params.get(name)?;
    if t.shape() != shape {
        return Err(Error::dim("mask_generator.params", t.shape(), shape));
    }
    Ok(())
}

/// Global average pooling: `B×C×H×W → B×C`; a `B×C` input passes through.
pub fn gap(z: Var<'_>) -> Result<Var<'_>> {
    let shape = z.shape();
    match shape.as_slice() {
        &[_, _] => Ok(z),
        &[b, c, h, w] if h * w > 0 => z
            .reshape(&[b, c, h * w])?
            .sum_last()?
            .scale(1.0 / (h * w) as f64),
        _ => Err(Error::Rank { op: "gap", shape }),
    }
}

/// A mask in either hard (`{0,1}`) or soft (`(0,1)`) form.
#[derive(Debug, Clone, Copy)]
pub struct MaskTensor<'t> {
    pub values: Var<'t>,
    pub hard: bool,
}

impl<'t> MaskTensor<'t> {
    pub fn hard(values: Var<'t>) -> Self {
        Self { values, hard: true }
    }

    pub fn soft(values: Var<'t>) -> Self {
        Self { values, hard: false }
    }

    /// All-ones hard mask of the given shape.
    pub fn ones(tape: &'t Tape, shape: &[usize]) -> Self {
        Self::hard(tape.constant(Tensor::ones(shape)))
    }
}

/// Logistic noise `g1 - g2` from two independent standard Gumbel draws.
pub fn logistic_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let g1 = rng::gumbel(rng);
        let g2 = rng::gumbel(rng);
        g1 - g2
    })
}

/// Gumbel-Sigmoid relaxation `y = σ((logits + g1 - g2) / τ)`.
///
/// With `hard`, the forward value is `1[y ≥ δ]` and the gradient flows
/// through `y` (straight-through). Passing `noise = None` drops the Gumbel
/// perturbation, which gives the deterministic inference-time mask.
pub fn gumbel_sigmoid<'t>(
    logits: Var<'t>,
    tau: f64,
    delta: f64,
    hard: bool,
    noise: Option<&mut Rng>,
) -> Result<MaskTensor<'t>> {
    if !(tau > 0.0) {
        return Err(Error::config("mask.tau", format!("temperature {tau} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("mask.delta", format!("threshold {delta} outside (0, 1)")));
    }
    let perturbed = match noise {
        Some(rng) => {
            let n = logistic_noise(&logits.shape(), rng);
            logits.add(logits.tape().constant(n))?
        }
        None => logits,
    };
    let soft = perturbed.scale(1.0 / tau)?.sigmoid()?;
    if !hard {
        return Ok(MaskTensor::soft(soft));
    }
    let bits = soft.value().map(|y| if y >= delta { 1.0 } else { 0.0 });
    Ok(MaskTensor::hard(soft.straight_through(bits)?))
}

/// Deterministic hard mask of plain logits: `1[σ(l/τ) ≥ δ]`.
pub fn threshold_logits(logits: &Tensor, tau: f64, delta: f64) -> Tensor {
    logits.map(|l| if sigmoid(l / tau) >= delta { 1.0 } else { 0.0 })
}

/// `ŵ = m' ⊙ w`, broadcasting `w` (`C_out×C_in`) over the mask's batch axis.
pub fn apply_mask<'t>(w: Var<'t>, m: Var<'t>) -> Result<Var<'t>> {
    let (ws, ms) = (w.shape(), m.shape());
    if ws.len() != 2 || ms.len() != 3 || ms[1..] != ws[..] {
        return Err(Error::dim("apply_mask", &ws, &ms));
    }
    m.mul(w)
}

/// `o = BMM(h, ŵ) + bias`; the bias is shared and never masked.
pub fn masked_linear<'t>(h: Var<'t>, w_hat: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (ws, bs) = (w_hat.shape(), bias.shape());
    if ws.len() != 3 || bs != [ws[1]] {
        return Err(Error::dim("masked_linear", &ws, &bs));
    }
    h.bmm(w_hat)?.add(bias)
}

/// Fraction of zero entries in a hard mask.
pub fn mask_ratio(m: &MaskTensor<'_>) -> Result<f64> {
    if !m.hard {
        return Err(Error::Contract("mask_ratio requires a hard mask".into()));
    }
    Ok(zero_fraction(m.values.value().data()))
}

pub fn zero_fraction(bits: &[f64]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    bits.iter().filter(|&&v| v == 0.0).count() as f64 / bits.len() as f64
}

/// One generator per maskable layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratorSet {
    pub generators: BTreeMap<String, MaskGenerator>,
}

/// A [`GeneratorSet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundGenerators<'t> {
    bound: BTreeMap<String, Bound<'t>>,
}

impl<'t> BoundGenerators<'t> {
    pub fn grads(&self) -> BTreeMap<String, BTreeMap<String, Tensor>> {
        self.bound.iter().map(|(k, b)| (k.clone(), b.grads())).collect()
    }
}

impl GeneratorSet {
    /// Fresh generators for every layer in `configs`, seeded per layer.
    pub fn new(configs: &[MaskGeneratorConfig], seed: u64) -> Result<Self> {
        let mut generators = BTreeMap::new();
        for (i, cfg) in configs.iter().enumerate() {
            if generators.contains_key(&cfg.layer_id) {
                return Err(Error::config(
                    format!("mask.layers[{i}]"),
                    format!("duplicate generator for {:?}", cfg.layer_id),
                ));
            }
            let g = MaskGenerator::new(cfg.clone(), rng::keyed(seed, &[i as u64]).next_seed())?;
            generators.insert(cfg.layer_id.clone(), g);
        }
        Ok(Self { generators })
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.generators.values().map(|g| g.params.num_scalars()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGenerators<'t> {
        BoundGenerators {
            bound: self
                .generators
                .iter()
                .map(|(k, g)| (k.clone(), g.params.bind(tape, trainable)))
                .collect(),
        }
    }

    /// Raw logits per layer (`B×C_out×C_in`).
    pub fn logits<'t>(
        &self,
        bound: &BoundGenerators<'t>,
        ts: &[usize],
        z: Var<'t>,
    ) -> Result<BTreeMap<String, Var<'t>>> {
        self.generators
            .iter()
            .map(|(id, g)| {
                let p = bound
                    .bound
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("generator {id} not bound")))?;
                Ok((id.clone(), g.logits(p, ts, z)?))
            })
            .collect()
    }

    /// Fuse → logits → reshape → Gumbel-Sigmoid for every generator.
    pub fn generate_masks<'t>(
        &self,
        bound: &BoundGenerators<'t>,
        ts: &[usize],
        z: Var<'t>,
        hard: bool,
        mut noise: Option<&mut Rng>,
    ) -> Result<MaskMap<'t>> {
        let logits = self.logits(bound, ts, z)?;
        let mut masks = MaskMap::new();
        for (id, l) in logits {
            let cfg = &self.generators[&id].config;
            let m = gumbel_sigmoid(l, cfg.tau, cfg.delta, hard, noise.as_deref_mut())?;
            masks.insert(id, m);
        }
        Ok(masks)
    }
}

trait NextSeed {
    fn next_seed(&mut self) -> u64;
}

impl NextSeed for Rng {
    fn next_seed(&mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}
