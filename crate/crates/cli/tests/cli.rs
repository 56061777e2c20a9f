use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[data]
num_points = 400
heldout_points = 200

[train]
epochs = 2

[mask_train]
epochs = 1

[finetune]
epochs = 1

[sampler]
steps = 5

[freeopt]
steps = 4
iterations = 2

[eval]
samples_per_class = 4
seeds = [0, 1]
";

fn maskunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskunet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = maskunet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workdir {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workdir {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, format!("{TINY}{extra}")).unwrap();
        Self { _dir: dir, root, config }
    }

    fn run(&self, sub: &str, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.root.join(out);
        let mut args = vec![sub, "--config", p(&self.config), "--out", p(&dir)];
        args.extend_from_slice(extra);
        ok(&args);
        dir
    }

    fn base(&self) -> PathBuf {
        self.run("train-base", "base", &[]).join("base.ckpt")
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn repeated_runs_write_identical_files() {
    let w = Workdir::new("");
    let base = w.base();
    let again = w.run("train-base", "base2", &[]);
    assert_eq!(read(&again, "base.ckpt"), fs::read(&base).unwrap());
    assert_eq!(read(&again, "train_log.csv"), read(base.parent().unwrap(), "train_log.csv"));

    let ckpt = p(&base);
    for sub in ["sample", "export-samples"] {
        let a = w.run(sub, &format!("{sub}_a"), &["--checkpoint", ckpt]);
        let b = w.run(sub, &format!("{sub}_b"), &["--checkpoint", ckpt]);
        assert_eq!(read(&a, "samples.csv"), read(&b, "samples.csv"));
    }
    let a = w.run("free-opt", "fo_a", &["--checkpoint", ckpt, "--per-class", "1"]);
    let b = w.run("free-opt", "fo_b", &["--checkpoint", ckpt, "--per-class", "1"]);
    for f in ["metrics.csv", "rewards.csv", "freeopt_log.csv", "freeopt_masks.jsonl"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    let a = w.run("train-mask", "mask_a", &["--base", ckpt]);
    let b = w.run("train-mask", "mask_b", &["--base", ckpt]);
    assert_eq!(read(&a, "mask.ckpt"), read(&b, "mask.ckpt"));
    let mask = a.join("mask.ckpt");
    let ea = w.run("eval", "eval_a", &["--checkpoints", ckpt, p(&mask)]);
    let eb = w.run("eval", "eval_b", &["--checkpoints", ckpt, p(&mask)]);
    assert_eq!(read(&ea, "metrics.csv"), read(&eb, "metrics.csv"));
    let sa = w.run("mask-study", "study_a", &["--checkpoint", p(&mask)]);
    let sb = w.run("mask-study", "study_b", &["--checkpoint", p(&mask)]);
    assert_eq!(read(&sa, "masks.jsonl"), read(&sb, "masks.jsonl"));
}

#[test]
fn seed_flag_changes_the_sample_stream() {
    let w = Workdir::new("");
    let base = w.base();
    let a = w.run("sample", "s0", &["--checkpoint", p(&base), "--seed", "0"]);
    let b = w.run("sample", "s1", &["--checkpoint", p(&base), "--seed", "1"]);
    assert_ne!(read(&a, "samples.csv"), read(&b, "samples.csv"));
}

#[test]
fn free_opt_without_iterations_matches_sample() {
    let w = Workdir::new("");
    let base = w.base();
    let zero = w.root.join("zero.toml");
    fs::write(
        &zero,
        TINY.replace("steps = 4\niterations = 2", "steps = 5\niterations = 0"),
    )
    .unwrap();
    let zero = p(&zero);
    let fo = w.root.join("fo");
    ok(&["free-opt", "--config", zero, "--checkpoint", p(&base), "--out", p(&fo), "--per-class", "4"]);
    let sa = w.root.join("sa");
    ok(&["sample", "--config", zero, "--checkpoint", p(&base), "--out", p(&sa)]);
    let points = |dir: &Path| {
        String::from_utf8(read(dir, "samples.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
    };
    assert_eq!(points(&fo), points(&sa));
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = maskunet(&["conjure"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_key() {
    let w = Workdir::new("\n[model]\nhidden_dim = 0\n");
    let out = maskunet(&["train-base", "--config", p(&w.config), "--out", p(&w.root.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: config:"), "{err}");
    assert!(err.contains("model.hidden_dim"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let w = Workdir::new("\n[schedule]\nsteps = 3\n");
    let out = maskunet(&["train-base", "--config", p(&w.config), "--out", p(&w.root.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("schedule") && err.contains("steps"), "{err}");
}

#[test]
fn corrupt_checkpoint_is_an_integrity_error() {
    let w = Workdir::new("");
    let base = w.base();
    let mut bytes = fs::read(&base).unwrap();
    bytes.truncate(bytes.len() - 5);
    let bad = w.root.join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = maskunet(&["sample", "--checkpoint", p(&bad), "--out", p(&w.root.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: integrity:"));
}

#[test]
fn mask_study_needs_generators() {
    let w = Workdir::new("");
    let base = w.base();
    let out = maskunet(&["mask-study", "--checkpoint", p(&base), "--out", p(&w.root.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}
