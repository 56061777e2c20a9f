//! Small conditional ε-prediction network standing in for a U-Net.
//!
//! Topology: the noisy sample, the sinusoidal timestep embedding and the
//! class embedding are each projected into the hidden width and summed
//! (encoder). Two hidden linears form the bottleneck and decoder, the encoder
//! activation is added back after the decoder (skip connection), and a final
//! linear maps to the data dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::mask::{self, MaskMap};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Identifiers of every linear layer, in forward order.
pub const LINEAR_LAYERS: [&str; 6] = ["input", "temb", "cond", "hidden1", "hidden2", "output"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden_dim: usize,
    pub temb_dim: usize,
    /// Conditioning classes; index `num_classes` is the null condition.
    pub num_classes: usize,
    pub maskable_layers: Vec<String>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_dim: 32,
            temb_dim: 32,
            num_classes: 8,
            maskable_layers: vec!["hidden1".into(), "hidden2".into()],
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::config("model.data_dim", "must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        if self.temb_dim == 0 || self.temb_dim % 2 != 0 {
            return Err(Error::config("model.temb_dim", "must be even and positive"));
        }
        for (i, id) in self.maskable_layers.iter().enumerate() {
            if !LINEAR_LAYERS.contains(&id.as_str()) {
                return Err(Error::config(
                    format!("model.maskable_layers[{i}]"),
                    format!("unknown layer {id:?}"),
                ));
            }
            if self.maskable_layers[..i].contains(id) {
                return Err(Error::config(
                    format!("model.maskable_layers[{i}]"),
                    format!("duplicate layer {id:?}"),
                ));
            }
        }
        Ok(())
    }

    /// `(C_out, C_in)` of a linear layer.
    pub fn layer_shape(&self, id: &str) -> Result<(usize, usize)> {
        let (h, d, e) = (self.hidden_dim, self.data_dim, self.temb_dim);
        Ok(match id {
            "input" => (h, d),
            "temb" | "cond" => (h, e),
            "hidden1" | "hidden2" => (h, h),
            "output" => (d, h),
            other => {
                return Err(Error::config("model.maskable_layers", format!("unknown layer {other:?}")))
            }
        })
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Sinusoidal embedding: `dim/2` sines then `dim/2` cosines of `t·f_i`, with
/// frequencies `f_i` geometric from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config("model.temb_dim", format!("embedding width {dim} must be even")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let t = t as f64;
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

/// `B×dim` embedding matrix for per-example timesteps.
pub fn timestep_embeddings(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t, dim)?);
    }
    Tensor::new(&[ts.len(), dim], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl DenoiserModel {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        for id in LINEAR_LAYERS {
            let (out, inp) = config.layer_shape(id)?;
            params.init_linear(id, inp, out, &mut rng);
        }
        let rows = config.num_classes + 1;
        params.insert(
            "class_emb",
            Tensor::from_fn(&[rows, config.temb_dim], |_| rng::normal(&mut rng)),
        );
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for id in LINEAR_LAYERS {
            let (out, inp) = config.layer_shape(id)?;
            expect_shape(&params, &format!("{id}.weight"), &[out, inp])?;
            expect_shape(&params, &format!("{id}.bias"), &[out])?;
        }
        expect_shape(&params, "class_emb", &[config.num_classes + 1, config.temb_dim])?;
        if params.len() != 2 * LINEAR_LAYERS.len() + 1 {
            return Err(Error::Contract("unexpected extra denoiser parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        self.params.bind(tape, trainable)
    }

    /// ε̂ for a `B×data_dim` batch with per-example timesteps and condition
    /// ids. Layers with an entry in `masks` run through the masked batched
    /// product; all others are plain linears.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        z: Var<'t>,
        ts: &[usize],
        classes: &[usize],
        masks: &MaskMap<'t>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != cfg.data_dim {
            return Err(Error::dim("denoiser.forward", &shape, &[0, cfg.data_dim]));
        }
        let b = shape[0];
        if ts.len() != b || classes.len() != b {
            return Err(Error::dim("denoiser.forward", &shape, &[ts.len(), classes.len()]));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c > cfg.num_classes) {
            return Err(Error::Contract(format!(
                "condition id {bad} outside 0..={}",
                cfg.num_classes
            )));
        }
        for (id, m) in masks {
            if !cfg.maskable_layers.contains(id) {
                return Err(Error::config("mask.layers", format!("layer {id:?} is not maskable")));
            }
            let (out, inp) = cfg.layer_shape(id)?;
            if m.values.shape() != [b, out, inp] {
                return Err(Error::dim("denoiser.mask", &m.values.shape(), &[b, out, inp]));
            }
        }

        let tape = z.tape();
        let layer = |id: &str, x: Var<'t>| -> Result<Var<'t>> {
            match masks.get(id) {
                Some(m) => {
                    let w = p.get(&format!("{id}.weight"))?;
                    let bias = p.get(&format!("{id}.bias"))?;
                    let w_hat = mask::apply_mask(w, m.values)?;
                    let (out, inp) = cfg.layer_shape(id)?;
                    let h = x.reshape(&[b, 1, inp])?;
                    mask::masked_linear(h, w_hat, bias)?.reshape(&[b, out])
                }
                None => p.linear(id, x),
            }
        };

        let temb = tape.constant(timestep_embeddings(ts, cfg.temb_dim)?);
        let cemb = p.get("class_emb")?.gather_rows(classes)?;
        let enc = layer("input", z)?
            .add(layer("temb", temb)?)?
            .add(layer("cond", cemb)?)?
            .relu()?;
        let mid = layer("hidden1", enc)?.relu()?;
        let dec = layer("hidden2", mid)?.relu()?.add(enc)?;
        layer("output", dec)
    }

    /// Unmasked prediction without gradient tracking.
    pub fn predict(&self, z: &Tensor, ts: &[usize], classes: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward(&p, tape.constant(z.clone()), ts, classes, &MaskMap::new())?;
        Ok((*out.value()).clone())
    }
}

fn expect_shape(params: &ParamStore, name: &str, shape: &[usize]) -> Result<()> {
    let t = params.get(name)?;
    if t.shape() != shape {
        return Err(Error::dim("denoiser.params", t.shape(), shape));
    }
    Ok(())
}
