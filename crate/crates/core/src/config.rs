//! Experiment configuration: a TOML key/value tree with one section per
//! subsystem, plus the shipped presets.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mixture, MixtureSpec};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::freeopt::{FreeOptConfig, RewardKind, RewardSpec};
use crate::mask::MaskGeneratorConfig;
use crate::rng;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mixture: MixtureSpec,
    pub num_points: usize,
    pub heldout_points: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec::default(),
            num_points: 5000,
            heldout_points: 2000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Settings shared by every mask generator; one generator is built per
/// entry of `layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub layers: Vec<String>,
    pub mlp_hidden: usize,
    pub tau: f64,
    pub delta: f64,
    pub use_temb: bool,
    pub use_sample: bool,
    pub init_logit: f64,
    pub init_output_scale: f64,
    /// Perturb logits with Gumbel noise while training.
    pub train_noise: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            layers: vec!["hidden1".into(), "hidden2".into()],
            mlp_hidden: 64,
            tau: 1.0,
            delta: 0.5,
            use_temb: true,
            use_sample: true,
            init_logit: 3.0,
            init_output_scale: 0.0,
            train_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_class: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 250,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub mask: MaskConfig,
    /// Base pretraining.
    pub train: TrainConfig,
    pub mask_train: TrainConfig,
    pub finetune: TrainConfig,
    pub sampler: SamplerConfig,
    pub freeopt: FreeOptConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: sized so every pipeline runs in seconds to
    /// minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig {
                epochs: 200,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            mask: MaskConfig {
                train_noise: false,
                ..MaskConfig::default()
            },
            mask_train: TrainConfig {
                epochs: 12,
                lr: 3e-3,
                seed: 1,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 12,
                lr: 1e-3,
                seed: 2,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig {
                steps: 50,
                eta: 0.0,
                guidance: 1.5,
                seed: 0,
            },
            freeopt: FreeOptConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Hyperparameters as published for the full-scale experiments.
    pub fn paper() -> Self {
        let paper_train = TrainConfig {
            epochs: 12,
            batch_size: 128,
            lr: 1e-5,
            weight_decay: 1e-2,
            seed: 1,
            cond_dropout: 0.1,
        };
        Self {
            mask: MaskConfig::default(),
            mask_train: paper_train.clone(),
            finetune: TrainConfig {
                seed: 2,
                ..paper_train
            },
            sampler: SamplerConfig {
                steps: 50,
                eta: 0.0,
                guidance: 7.5,
                seed: 0,
            },
            freeopt: FreeOptConfig {
                iterations: 15,
                lr: 1e-2,
                steps: 15,
                guidance: 7.5,
                init_logit: 6.0,
                gumbel_noise: true,
                tau: 1.0,
                delta: 0.5,
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
                ..FreeOptConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }

    /// Parses TOML text over the desk preset; errors carry the dotted key
    /// path.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::desk().overlay_toml(text)
    }

    /// Parses TOML text whose keys override `self`. Keys left out keep
    /// their current values.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let flat = |e: &dyn std::fmt::Display| e.to_string().trim().replace('\n', " ");
        let patch: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<root>", flat(&e)))?;
        let mut merged: toml::Table = toml::from_str(&self.to_toml()).expect("canonical config parses");
        merge(&mut merged, patch);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, flat(e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization (fixed field order).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = self.schedule.timesteps;
        NoiseSchedule::linear(t, self.schedule.beta_start, self.schedule.beta_end)?;
        for (i, layer) in self.mask.layers.iter().enumerate() {
            if !self.model.maskable_layers.contains(layer) {
                return Err(Error::config(
                    format!("mask.layers[{i}]"),
                    format!("{layer:?} is not in model.maskable_layers"),
                ));
            }
        }
        for cfg in self.generator_configs()? {
            cfg.validate()?;
        }
        if self.sampler.steps == 0 || self.sampler.steps > t {
            return Err(Error::config("sampler.steps", format!("must lie in 1..={t}")));
        }
        if !(0.0..=1.0).contains(&self.sampler.eta) {
            return Err(Error::config("sampler.eta", "must lie in [0, 1]"));
        }
        if !(self.sampler.guidance >= 0.0) {
            return Err(Error::config("sampler.guidance", "must be >= 0"));
        }
        self.freeopt.validate(t)?;
        self.train.validate("train")?;
        self.mask_train.validate("mask_train")?;
        self.finetune.validate("finetune")?;
        if self.data.mixture.components != self.model.num_classes {
            return Err(Error::config(
                "model.num_classes",
                "must equal data.mixture.components",
            ));
        }
        if self.model.data_dim != 2 {
            return Err(Error::config("model.data_dim", "the ring mixture is two-dimensional"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.timesteps, s.beta_start, s.beta_end)
    }

    pub fn mixture(&self) -> Result<Mixture> {
        Mixture::from_spec(&self.data.mixture)
    }

    pub fn train_set(&self) -> Result<Dataset> {
        Ok(self
            .mixture()?
            .sample(self.data.num_points, &mut rng::stream(self.data.seed, 0)))
    }

    pub fn heldout_set(&self) -> Result<Dataset> {
        Ok(self
            .mixture()?
            .sample(self.data.heldout_points, &mut rng::stream(self.data.seed, 1)))
    }

    pub fn generator_configs(&self) -> Result<Vec<MaskGeneratorConfig>> {
        self.mask
            .layers
            .iter()
            .map(|id| {
                Ok(MaskGeneratorConfig {
                    mlp_hidden: self.mask.mlp_hidden,
                    tau: self.mask.tau,
                    delta: self.mask.delta,
                    use_temb: self.mask.use_temb,
                    use_sample: self.mask.use_sample,
                    init_logit: self.mask.init_logit,
                    init_output_scale: self.mask.init_output_scale,
                    ..MaskGeneratorConfig::for_layer(&self.model, id)?
                })
            })
            .collect()
    }
}

/// Recursively overrides `base` with `patch`; tables merge, all other
/// values replace.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
