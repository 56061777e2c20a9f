//! Seeded Gaussian-ring mixture used as training data and ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: usize,
    pub radius: f64,
    pub std: f64,
    /// Rescale so each coordinate of the mixture has unit variance.
    pub normalize: bool,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            components: 8,
            radius: 4.0,
            std: 0.3,
            normalize: true,
        }
    }
}

/// Equal-weight isotropic Gaussian mixture in 2D.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

impl Mixture {
    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        if spec.components == 0 {
            return Err(Error::config("data.mixture.components", "must be positive"));
        }
        if !(spec.radius >= 0.0 && spec.std > 0.0) {
            return Err(Error::config("data.mixture.std", "std must be positive"));
        }
        let k = spec.components as f64;
        // Ring means have per-axis second moment r²/2 once there are at least
        // three evenly spaced components.
        let scale = if spec.normalize {
            let second = if spec.components >= 3 {
                spec.radius * spec.radius / 2.0
            } else {
                (0..spec.components)
                    .map(|i| (std::f64::consts::TAU * i as f64 / k).cos().powi(2))
                    .sum::<f64>()
                    * spec.radius
                    * spec.radius
                    / k
            };
            1.0 / (second + spec.std * spec.std).sqrt()
        } else {
            1.0
        };
        let means = (0..spec.components)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k;
                [scale * spec.radius * a.cos(), scale * spec.radius * a.sin()]
            })
            .collect();
        Ok(Self {
            means,
            std: scale * spec.std,
        })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, class: usize) -> Result<[f64; 2]> {
        self.means.get(class).copied().ok_or_else(|| {
            Error::Contract(format!(
                "class {class} out of range for {} components",
                self.components()
            ))
        })
    }

    /// Log-density of the full mixture at `x`.
    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|m| self.component_log_density(x, *m))
            .collect();
        log_sum_exp(&logs) - (self.components() as f64).ln()
    }

    pub(crate) fn component_log_density(&self, x: [f64; 2], m: [f64; 2]) -> f64 {
        let var = self.std * self.std;
        let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
        -d2 / (2.0 * var) - (std::f64::consts::TAU * var).ln()
    }

    /// Posterior probability of component `class` given `x`.
    pub fn posterior(&self, x: [f64; 2], class: usize) -> Result<f64> {
        let target = self.mean(class)?;
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|m| self.component_log_density(x, *m))
            .collect();
        Ok((self.component_log_density(x, target) - log_sum_exp(&logs)).exp())
    }

    /// Draws `n` labelled points; labels cycle through the components.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let k = self.components();
        let mut points = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            let m = self.means[c];
            points.push(m[0] + self.std * rng::normal(rng));
            points.push(m[1] + self.std * rng::normal(rng));
            labels.push(c);
        }
        Dataset {
            points: Tensor::new(&[n, 2], points).expect("dataset shape"),
            labels,
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Points (`M×2`) with their component labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.points.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.points.data()[i * d..(i + 1) * d]);
        }
        (
            Tensor::new(&[idx.len(), d], data).expect("batch shape"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}
