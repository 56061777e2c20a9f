//! Command-line pipelines over the `maskunet` core.
//!
//! Every subcommand reads an experiment config (a preset, optionally
//! overridden by a TOML file and `--seed`), writes its outputs under
//! `--out`, and produces byte-identical content files for identical inputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maskunet::analysis::{self, MetricRow, SampleSet};
use maskunet::freeopt::{self, FreeOptResult};
use maskunet::{sampler, train, Checkpoint, Error, ExperimentConfig, Result, Tensor};

#[derive(Debug, Parser)]
#[command(name = "maskunet", version, about = "Binary weight-mask experiments on a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file whose keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Overrides the seed of the stage this subcommand runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the denoiser.
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Train mask generators over a frozen base checkpoint.
    TrainMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Finetune every denoiser weight from a base checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Sample from a checkpoint and score the samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Training-free reward-guided mask optimization during sampling.
    FreeOpt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generations per class (defaults to eval.samples_per_class).
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Score several checkpoints over the evaluation seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Dump generator masks for a probe point across timesteps.
    MaskStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe point `x,y`.
        #[arg(long, default_value = "0.5,-0.5", allow_hyphen_values = true)]
        probe: String,
        /// Number of evenly spaced timesteps to probe.
        #[arg(long, default_value_t = 20)]
        timesteps: usize,
    },
    /// Write generated and held-out points for external plotting.
    ExportSamples {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainBase { common }
            | Command::TrainMask { common, .. }
            | Command::Finetune { common, .. }
            | Command::Sample { common, .. }
            | Command::FreeOpt { common, .. }
            | Command::Eval { common, .. }
            | Command::MaskStudy { common, .. }
            | Command::ExportSamples { common, .. } => common,
        }
    }
}

/// Preset, then config file, then the stage seed override.
pub fn load_config(command: &Command) -> Result<ExperimentConfig> {
    let common = command.common();
    let mut cfg = ExperimentConfig::preset(&common.preset)?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        cfg = cfg.overlay_toml(&text)?;
    }
    if let Some(seed) = common.seed {
        match command {
            Command::TrainBase { .. } => cfg.train.seed = seed,
            Command::TrainMask { .. } => cfg.mask_train.seed = seed,
            Command::Finetune { .. } => cfg.finetune.seed = seed,
            Command::FreeOpt { .. } => cfg.freeopt.seed = seed,
            Command::Sample { .. } | Command::ExportSamples { .. } | Command::MaskStudy { .. } => {
                cfg.sampler.seed = seed
            }
            Command::Eval { .. } => cfg.eval.seeds = vec![seed],
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn arm_names(ckpts: &[(PathBuf, Checkpoint)]) -> Vec<String> {
    ckpts
        .iter()
        .map(|(path, c)| {
            let kind = c.kind.as_str();
            let dup = ckpts.iter().filter(|(_, o)| o.kind == c.kind).count() > 1;
            match (dup, path.file_stem()) {
                (true, Some(stem)) => format!("{kind}:{}", stem.to_string_lossy()),
                _ => kind.to_string(),
            }
        })
        .collect()
}

/// Executes one parsed command, returning the files it wrote.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>> {
    let cfg = load_config(command)?;
    let out = &command.common().out;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    match command {
        Command::TrainBase { .. } => {
            let (ckpt, log) = train::train_base(&cfg, &cfg.train_set()?)?;
            written.push(write(out, "train_log.csv", log.to_csv())?);
            let path = out.join("base.ckpt");
            ckpt.save(&path)?;
            written.push(path);
        }
        Command::TrainMask { base, .. } | Command::Finetune { base, .. } => {
            let base_ckpt = Checkpoint::load(base)?;
            let data = cfg.train_set()?;
            let (ckpt, log, name) = if matches!(command, Command::TrainMask { .. }) {
                let (c, l) = train::train_mask_generator(&cfg, &data, &base_ckpt)?;
                (c, l, "mask")
            } else {
                let (c, l) = train::train_full_finetune(&cfg, &data, &base_ckpt)?;
                (c, l, "finetune")
            };
            written.push(write(out, &format!("{name}_train_log.csv"), log.to_csv())?);
            let path = out.join(format!("{name}.ckpt"));
            ckpt.save(&path)?;
            written.push(path);
        }
        Command::Sample { checkpoint, .. } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let set = analysis::generate_eval_set(&ckpt, &cfg.sampler, cfg.eval.samples_per_class, cfg.sampler.seed)?;
            let row = score("sample", cfg.sampler.seed, &set, &cfg)?;
            written.push(write(out, "samples.csv", set.to_csv())?);
            written.push(write(out, "metrics.csv", analysis::metrics_csv(&[row]))?);
        }
        Command::FreeOpt {
            checkpoint,
            per_class,
            ..
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let model = ckpt.model()?;
            let sched = cfg.schedule()?;
            let mixture = cfg.mixture()?;
            let n = per_class.unwrap_or(cfg.eval.samples_per_class);
            if n == 0 {
                return Err(Error::Contract("empty evaluation".into()));
            }
            let classes = sampler::class_grid(model.config.num_classes, n);
            let results = freeopt::generate_many(&model, &sched, &cfg.freeopt, &mixture, &classes)?;
            let rows: Vec<Tensor> = results.iter().map(|r| r.sample.clone()).collect();
            let points = Tensor::concat_rows(&rows)?;
            let set = SampleSet::new(points, Some(classes.clone()), "free_opt")?;
            let row = score("free_opt", cfg.freeopt.seed, &set, &cfg)?;
            written.push(write(out, "samples.csv", set.to_csv())?);
            written.push(write(out, "metrics.csv", analysis::metrics_csv(&[row]))?);
            written.push(write(out, "rewards.csv", rewards_csv(&results, &classes, &cfg)?)?);
            written.push(write(out, "freeopt_log.csv", freeopt_log_csv(&results))?);
            written.push(write(out, "freeopt_masks.jsonl", final_masks_jsonl(&results))?);
        }
        Command::Eval { checkpoints, .. } => {
            let ckpts = checkpoints
                .iter()
                .map(|p| Ok((p.clone(), Checkpoint::load(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let arms: Vec<(String, Checkpoint)> = arm_names(&ckpts)
                .into_iter()
                .zip(ckpts.into_iter().map(|(_, c)| c))
                .collect();
            let rows = analysis::run_report(&cfg.eval, &cfg.sampler, &arms, &cfg.heldout_set()?, &cfg.mixture()?)?;
            written.push(write(out, "metrics.csv", analysis::metrics_csv(&rows))?);
        }
        Command::MaskStudy {
            checkpoint,
            probe,
            timesteps,
            ..
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let gens = ckpt
                .generators
                .as_ref()
                .ok_or_else(|| Error::Contract("checkpoint has no mask generators".into()))?;
            let probe = parse_probe(probe)?;
            let ts = cfg.schedule()?.inference_timesteps((*timesteps).max(1))?;
            let study = analysis::mask_study(gens, &ts, &probe)?;
            written.push(write(out, "masks.jsonl", study.to_jsonl())?);
            written.push(write(out, "mask_study.csv", study.summary_csv())?);
        }
        Command::ExportSamples { checkpoint, .. } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let set = analysis::generate_eval_set(&ckpt, &cfg.sampler, cfg.eval.samples_per_class, cfg.sampler.seed)?;
            written.push(write(out, "samples.csv", set.to_csv())?);
            let held = SampleSet::from_dataset(&cfg.heldout_set()?, "heldout");
            written.push(write(out, "heldout.csv", held.to_csv())?);
        }
    }
    Ok(written)
}

fn score(arm: &str, seed: u64, set: &SampleSet, cfg: &ExperimentConfig) -> Result<MetricRow> {
    Ok(MetricRow {
        arm: arm.to_string(),
        seed,
        fgd: analysis::frechet_gaussian(&set.points, &cfg.heldout_set()?.points)?,
        alignment: analysis::alignment_score(set, &cfg.mixture()?)?,
    })
}

fn parse_probe(text: &str) -> Result<Tensor> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Contract(format!("probe {text:?} is not `x,y`")))?;
    if vals.len() != 2 || vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("probe {text:?} is not `x,y`")));
    }
    Tensor::new(&[1, 2], vals)
}

fn rewards_csv(results: &[FreeOptResult], classes: &[usize], cfg: &ExperimentConfig) -> Result<String> {
    let mixture = cfg.mixture()?;
    let mut s = String::from("generation,class,reward\n");
    for (i, (r, &c)) in results.iter().zip(classes).enumerate() {
        let x = r.sample.data();
        let reward = freeopt::weighted_reward([x[0], x[1]], c, &cfg.freeopt.rewards, &mixture)?;
        s.push_str(&format!("{i},{c},{reward}\n"));
    }
    Ok(s)
}

fn freeopt_log_csv(results: &[FreeOptResult]) -> String {
    let mut s = String::from("generation,timestep,iteration,loss\n");
    for (i, r) in results.iter().enumerate() {
        for log in &r.logs {
            for (k, l) in log.losses.iter().enumerate() {
                s.push_str(&format!("{i},{},{k},{l}\n", log.timestep));
            }
        }
    }
    s
}

fn final_masks_jsonl(results: &[FreeOptResult]) -> String {
    let mut s = String::new();
    for r in results {
        let t = r.logs.last().map_or(0, |l| l.timestep);
        for (layer, bits) in r.final_state.hard_bits() {
            s.push_str(&analysis::MaskSnapshot::new(t, layer, bits.data()).to_json_line());
            s.push('\n');
        }
    }
    s
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; errors print as one line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}
