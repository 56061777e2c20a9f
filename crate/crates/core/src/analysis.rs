//! Sample-quality metrics, mask statistics, and report emission.

use base64::Engine as _;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::checkpoint::Checkpoint;
use crate::config::EvalConfig;
use crate::data::{Dataset, Mixture};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::mask::{zero_fraction, GeneratorSet};
use crate::sampler;
use crate::tensor::Tensor;

/// Generated or reference points with optional condition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
    pub provenance: String,
}

impl SampleSet {
    pub fn new(points: Tensor, labels: Option<Vec<usize>>, provenance: impl Into<String>) -> Result<Self> {
        let (m, _) = points.dims2("sample_set")?;
        if let Some(l) = &labels {
            if l.len() != m {
                return Err(Error::dim("sample_set.labels", points.shape(), &[l.len()]));
            }
        }
        Ok(Self {
            points,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn from_dataset(data: &Dataset, provenance: impl Into<String>) -> Self {
        Self {
            points: data.points.clone(),
            labels: Some(data.labels.clone()),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `x,y,label` rows.
    pub fn to_csv(&self) -> String {
        let d = self.points.shape()[1];
        let mut s = String::new();
        let cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        s.push_str(&cols.join(","));
        s.push_str(",label\n");
        for (r, row) in self.points.data().chunks(d.max(1)).enumerate() {
            for v in row {
                s.push_str(&format!("{v},"));
            }
            match &self.labels {
                Some(l) => s.push_str(&format!("{}\n", l[r])),
                None => s.push('\n'),
            }
        }
        s
    }
}

/// Sample mean and unbiased covariance.
fn moments(points: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, d) = points.dims2("frechet_gaussian")?;
    if m < 2 {
        return Err(Error::Contract(format!("need at least 2 points, got {m}")));
    }
    let x = DMatrix::from_row_slice(m, d, points.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m);
    let roots = e
        .eigenvalues
        .iter()
        .map(|&l| clamp_eig(l).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;
    let v = &e.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&DVector::from_vec(roots)) * v.transpose())
}

fn clamp_eig(l: f64) -> Result<f64> {
    if l < -1e-10 {
        return Err(Error::NumericDomain(format!("covariance eigenvalue {l} is negative")));
    }
    Ok(l.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two point sets:
/// `‖μa-μb‖² + Tr(Σa + Σb - 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_gaussian(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, da) = a.dims2("frechet_gaussian")?;
    let (_, db) = b.dims2("frechet_gaussian")?;
    if da != db {
        return Err(Error::dim("frechet_gaussian", a.shape(), b.shape()));
    }
    let (mu_a, mut cov_a) = moments(a)?;
    let (mu_b, mut cov_b) = moments(b)?;
    let min_eig = |c: &DMatrix<f64>| sym_eigen(c).eigenvalues.min();
    if min_eig(&cov_a) < 1e-10 || min_eig(&cov_b) < 1e-10 {
        let jitter = DMatrix::identity(da, da) * 1e-10;
        cov_a += &jitter;
        cov_b += jitter;
    }
    // Tr((Σa Σb)^½) is the sum of singular values of √Σa √Σb; taking them
    // directly avoids squaring near-zero eigenvalues before the root.
    let cross = psd_sqrt(&cov_a)? * psd_sqrt(&cov_b)?;
    let tr_cross: f64 = cross.singular_values().iter().sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(dist.max(0.0))
}

/// Mean ground-truth posterior of each sample's conditioning component.
pub fn alignment_score(samples: &SampleSet, mixture: &Mixture) -> Result<f64> {
    let labels = samples
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("alignment_score needs labels".into()))?;
    let (m, d) = samples.points.dims2("alignment_score")?;
    if d != 2 {
        return Err(Error::dim("alignment_score", samples.points.shape(), &[m, 2]));
    }
    if m == 0 {
        return Err(Error::Contract("empty evaluation".into()));
    }
    let mut total = 0.0;
    for (row, &c) in samples.points.data().chunks(2).zip(labels) {
        total += mixture.posterior([row[0], row[1]], c)?;
    }
    Ok((total / m as f64).clamp(0.0, 1.0))
}

/// Hard mask of one layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSnapshot {
    pub timestep: usize,
    pub layer: String,
    pub bits: Vec<bool>,
    pub ratio: f64,
}

impl MaskSnapshot {
    pub fn new(timestep: usize, layer: impl Into<String>, values: &[f64]) -> Self {
        Self {
            timestep,
            layer: layer.into(),
            bits: values.iter().map(|&v| v != 0.0).collect(),
            ratio: zero_fraction(values),
        }
    }

    /// Bits packed LSB-first into bytes; a set bit is a kept weight.
    pub fn packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(packed: &[u8], len: usize) -> Vec<bool> {
        (0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect()
    }

    pub fn to_json_line(&self) -> String {
        let bits = base64::engine::general_purpose::STANDARD.encode(self.packed());
        format!(
            "{{\"timestep\":{},\"layer\":\"{}\",\"ratio\":{},\"len\":{},\"bits\":\"{bits}\"}}",
            self.timestep,
            self.layer,
            self.ratio,
            self.bits.len()
        )
    }
}

pub fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Per-layer statistics across the probed timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStudy {
    pub layer: String,
    pub timesteps: Vec<usize>,
    pub ratios: Vec<f64>,
    /// `(i, j, distance)` for every timestep pair `i < j`.
    pub hamming: Vec<(usize, usize, usize)>,
    pub ratio_mean: f64,
    pub ratio_variance: f64,
    pub ratio_std: f64,
}

impl LayerStudy {
    pub fn max_hamming(&self) -> usize {
        self.hamming.iter().map(|h| h.2).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStudy {
    pub snapshots: Vec<MaskSnapshot>,
    pub layers: Vec<LayerStudy>,
}

impl MaskStudy {
    pub fn to_jsonl(&self) -> String {
        self.snapshots.iter().map(|s| s.to_json_line() + "\n").collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("layer,timestep,ratio\n");
        for l in &self.layers {
            for (t, r) in l.timesteps.iter().zip(&l.ratios) {
                s.push_str(&format!("{},{t},{r}\n", l.layer));
            }
        }
        s.push_str("\nlayer,ratio_mean,ratio_std,ratio_variance,max_hamming\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer,
                l.ratio_mean,
                l.ratio_std,
                l.ratio_variance,
                l.max_hamming()
            ));
        }
        s
    }
}

/// Deterministic hard masks of every generator for one probe point at each
/// timestep.
pub fn mask_study(gens: &GeneratorSet, timesteps: &[usize], probe: &Tensor) -> Result<MaskStudy> {
    let (b, _) = probe.dims2("mask_study")?;
    if b != 1 {
        return Err(Error::dim("mask_study", probe.shape(), &[1, probe.shape()[1]]));
    }
    if gens.is_empty() {
        return Err(Error::Contract("no generators to study".into()));
    }
    let mut snapshots = Vec::new();
    for &t in timesteps {
        let tape = Tape::new();
        let gb = gens.bind(&tape, false);
        let masks = gens.generate_masks(&gb, &[t], tape.constant(probe.clone()), true, None)?;
        for (layer, m) in masks {
            snapshots.push(MaskSnapshot::new(t, layer, m.values.value().data()));
        }
    }
    let layers = gens
        .generators
        .keys()
        .map(|layer| {
            let snaps: Vec<&MaskSnapshot> = snapshots.iter().filter(|s| &s.layer == layer).collect();
            let ratios: Vec<f64> = snaps.iter().map(|s| s.ratio).collect();
            let n = ratios.len().max(1) as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            let variance = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let mut pairs = Vec::new();
            for i in 0..snaps.len() {
                for j in i + 1..snaps.len() {
                    pairs.push((i, j, hamming(&snaps[i].bits, &snaps[j].bits)));
                }
            }
            LayerStudy {
                layer: layer.clone(),
                timesteps: snaps.iter().map(|s| s.timestep).collect(),
                ratios,
                hamming: pairs,
                ratio_mean: mean,
                ratio_variance: variance,
                ratio_std: variance.sqrt(),
            }
        })
        .collect();
    Ok(MaskStudy { snapshots, layers })
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub arm: String,
    pub seed: u64,
    pub fgd: f64,
    pub alignment: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("arm,seed,fgd,alignment\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.arm, r.seed, r.fgd, r.alignment));
    }
    s
}

/// Generates `samples_per_class` points per class with `sampler` reseeded to
/// `seed`, through the checkpoint's generators when it has any.
pub fn generate_eval_set(ckpt: &Checkpoint, sampler_cfg: &SamplerConfig, samples_per_class: usize, seed: u64) -> Result<SampleSet> {
    if samples_per_class == 0 {
        return Err(Error::Contract("empty evaluation".into()));
    }
    let model = ckpt.model()?;
    let sched = ckpt.config.schedule()?;
    let classes = sampler::class_grid(model.config.num_classes, samples_per_class);
    let cfg = SamplerConfig {
        seed,
        ..sampler_cfg.clone()
    };
    let points = sampler::sample(&model, ckpt.generators.as_ref(), &sched, &cfg, &classes, 0)?;
    SampleSet::new(points, Some(classes), format!("{}:{seed}", ckpt.kind))
}

/// Scores one arm at one seed against held-out data.
pub fn evaluate_arm(
    arm: &str,
    ckpt: &Checkpoint,
    sampler_cfg: &SamplerConfig,
    samples_per_class: usize,
    seed: u64,
    heldout: &Dataset,
    mixture: &Mixture,
) -> Result<MetricRow> {
    let set = generate_eval_set(ckpt, sampler_cfg, samples_per_class, seed)?;
    Ok(MetricRow {
        arm: arm.to_string(),
        seed,
        fgd: frechet_gaussian(&set.points, &heldout.points)?,
        alignment: alignment_score(&set, mixture)?,
    })
}

/// Every `(arm, checkpoint)` at every evaluation seed, in input order.
pub fn run_report(
    eval: &EvalConfig,
    sampler_cfg: &SamplerConfig,
    arms: &[(String, Checkpoint)],
    heldout: &Dataset,
    mixture: &Mixture,
) -> Result<Vec<MetricRow>> {
    if eval.samples_per_class == 0 || eval.seeds.is_empty() {
        return Err(Error::Contract("empty evaluation".into()));
    }
    let mut rows = Vec::new();
    for (arm, ckpt) in arms {
        for &seed in &eval.seeds {
            rows.push(evaluate_arm(arm, ckpt, sampler_cfg, eval.samples_per_class, seed, heldout, mixture)?);
        }
    }
    Ok(rows)
}
