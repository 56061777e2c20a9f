//! Training loops: base pretraining, full finetuning, and mask-generator
//! training against a frozen base.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{ArmKind, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::mask::{GeneratorSet, MaskMap};
use crate::optim::AdamW;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability of replacing the condition with the null class.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            cond_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{section}.batch_size"), "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{section}.lr"), "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{section}.weight_decay"), "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config(format!("{section}.cond_dropout"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn digest(&self) -> String {
        Sha256::digest(self.to_csv().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Shuffled mini-batches of dataset indices; the last partial batch is kept.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn drop_conditions(labels: &[usize], null: usize, p: f64, rng: &mut Rng) -> Vec<usize> {
    labels
        .iter()
        .map(|&c| if rng.random::<f64>() < p { null } else { c })
        .collect()
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => {
            Error::Divergence(format!("non-finite {op} at epoch {epoch}, batch {batch}"))
        }
        other => other,
    }
}

/// Trains every denoiser weight on the diffusion loss.
pub fn fit_denoiser(
    model: &mut DenoiserModel,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    data: &Dataset,
) -> Result<TrainLog> {
    cfg.validate("train")?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let null = model.config.null_class();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (bi, idx) in epoch_batches(data.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (z0, labels) = data.batch(idx);
            let classes = drop_conditions(&labels, null, cfg.cond_dropout, &mut rng);
            let tape = Tape::new();
            let p = model.bind(&tape, true);
            let loss = diffusion::diffusion_loss(&tape, &z0, sched, &mut rng, |z_t, ts| {
                model.forward(&p, z_t, ts, &classes, &MaskMap::new())
            })
            .and_then(|loss| tape.backward(loss).map(|_| loss))
            .map_err(|e| diverged(e, epoch, bi))?;
            opt.step(&mut model.params, &p.grads())
                .map_err(|e| diverged(e, epoch, bi))?;
            total += loss.value().item()? * idx.len() as f64;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch} loss {mean}")));
        }
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Trains only the mask generators; the denoiser is bound as constants and
/// never written.
pub fn fit_generators(
    model: &DenoiserModel,
    gens: &mut GeneratorSet,
    cfg: &TrainConfig,
    train_noise: bool,
    sched: &NoiseSchedule,
    data: &Dataset,
) -> Result<TrainLog> {
    cfg.validate("mask_train")?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut opts: BTreeMap<String, AdamW> = gens
        .generators
        .keys()
        .map(|k| (k.clone(), AdamW::new(cfg.lr, cfg.weight_decay)))
        .collect();
    let null = model.config.null_class();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (bi, idx) in epoch_batches(data.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (z0, labels) = data.batch(idx);
            let classes = drop_conditions(&labels, null, cfg.cond_dropout, &mut rng);
            let mut gumbel = rng::keyed(cfg.seed, &[epoch as u64, bi as u64]);
            let tape = Tape::new();
            let p = model.bind(&tape, false);
            let gb = gens.bind(&tape, true);
            let loss = diffusion::diffusion_loss(&tape, &z0, sched, &mut rng, |z_t, ts| {
                let noise = train_noise.then_some(&mut gumbel);
                let masks = gens.generate_masks(&gb, ts, z_t, true, noise)?;
                model.forward(&p, z_t, ts, &classes, &masks)
            })
            .and_then(|loss| tape.backward(loss).map(|_| loss))
            .map_err(|e| diverged(e, epoch, bi))?;
            for (layer, grads) in gb.grads() {
                let g = gens.generators.get_mut(&layer).expect("bound generator");
                opts.get_mut(&layer)
                    .expect("optimizer per generator")
                    .step(&mut g.params, &grads)
                    .map_err(|e| diverged(e, epoch, bi))?;
            }
            total += loss.value().item()? * idx.len() as f64;
        }
        log.epoch_losses.push(total / data.len() as f64);
    }
    Ok(log)
}

/// Diffusion loss over the whole dataset with fixed noise draws and
/// deterministic (inference-time) masks when generators are given.
pub fn eval_diffusion_loss(
    model: &DenoiserModel,
    gens: Option<&GeneratorSet>,
    sched: &NoiseSchedule,
    data: &Dataset,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::seeded(seed);
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let (z0, labels) = data.batch(chunk);
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let loss = match gens {
            Some(g) => {
                let gb = g.bind(&tape, false);
                diffusion::diffusion_loss(&tape, &z0, sched, &mut rng, |z_t, ts| {
                    let masks = g.generate_masks(&gb, ts, z_t, true, None)?;
                    model.forward(&p, z_t, ts, &labels, &masks)
                })?
            }
            None => diffusion::diffusion_loss(&tape, &z0, sched, &mut rng, |z_t, ts| {
                model.forward(&p, z_t, ts, &labels, &MaskMap::new())
            })?,
        };
        total += loss.value().item()? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Pretrains a denoiser from a seeded initialization.
pub fn train_base(exp: &ExperimentConfig, data: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    exp.validate()?;
    let sched = exp.schedule()?;
    let mut model = DenoiserModel::new(exp.model.clone(), exp.train.seed)?;
    let log = fit_denoiser(&mut model, &exp.train, &sched, data)?;
    let ckpt = Checkpoint::new(ArmKind::Base, exp.clone(), exp.train.seed, &log, model.params, None);
    Ok((ckpt, log))
}

/// Continues training all denoiser weights from `base`, without masks.
pub fn train_full_finetune(
    exp: &ExperimentConfig,
    data: &Dataset,
    base: &Checkpoint,
) -> Result<(Checkpoint, TrainLog)> {
    exp.validate()?;
    let sched = exp.schedule()?;
    let mut model = base.model()?;
    let log = fit_denoiser(&mut model, &exp.finetune, &sched, data)?;
    let ckpt = Checkpoint::new(
        ArmKind::FullFinetune,
        exp.clone(),
        exp.finetune.seed,
        &log,
        model.params,
        None,
    );
    Ok((ckpt, log))
}

/// Trains mask generators over the frozen denoiser of `base`.
pub fn train_mask_generator(
    exp: &ExperimentConfig,
    data: &Dataset,
    base: &Checkpoint,
) -> Result<(Checkpoint, TrainLog)> {
    exp.validate()?;
    let sched = exp.schedule()?;
    let model = base.model()?;
    let frozen = model.params.digest();
    let mut gens = GeneratorSet::new(&exp.generator_configs()?, exp.mask_train.seed)?;
    let log = fit_generators(&model, &mut gens, &exp.mask_train, exp.mask.train_noise, &sched, data)?;
    if model.params.digest() != frozen {
        return Err(Error::Contract("base weights changed during mask training".into()));
    }
    let ckpt = Checkpoint::new(
        ArmKind::MaskGenerator,
        exp.clone(),
        exp.mask_train.seed,
        &log,
        model.params,
        Some(gens),
    );
    Ok((ckpt, log))
}
