//! Single-file checkpoints: a text header followed by raw little-endian f64
//! blobs.
//!
//! ```text
//! maskunet-checkpoint
//! format_version = 1
//! kind = base
//! seed = 0
//! log_digest = <sha256 hex>
//! config_length = <bytes>
//! <canonical TOML config, exactly config_length bytes>
//! blob_count = <n>
//! blob <name> <d0,d1,..> <offset> <length>
//! ...
//! end_header
//! <blob bytes>
//! ```
//!
//! Offsets are relative to the first byte after `end_header\n`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::mask::{GeneratorSet, MaskGenerator};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainLog;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "maskunet-checkpoint";
const DENOISER_PREFIX: &str = "denoiser.";
const GENERATOR_PREFIX: &str = "maskgen.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmKind {
    Base,
    FullFinetune,
    MaskGenerator,
}

impl ArmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArmKind::Base => "base",
            ArmKind::FullFinetune => "full_finetune",
            ArmKind::MaskGenerator => "mask_generator",
        }
    }
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ArmKind::Base),
            "full_finetune" => Ok(ArmKind::FullFinetune),
            "mask_generator" => Ok(ArmKind::MaskGenerator),
            other => Err(integrity("<header>", format!("unknown kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ArmKind,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub log_digest: String,
    pub denoiser: ParamStore,
    pub generators: Option<GeneratorSet>,
}

fn integrity(blob: &str, message: impl Into<String>) -> Error {
    Error::Integrity {
        blob: blob.to_string(),
        message: message.into(),
    }
}

fn header_err(message: impl Into<String>) -> Error {
    integrity("<header>", message)
}

impl Checkpoint {
    pub fn new(
        kind: ArmKind,
        config: ExperimentConfig,
        seed: u64,
        log: &TrainLog,
        denoiser: ParamStore,
        generators: Option<GeneratorSet>,
    ) -> Self {
        Self {
            kind,
            config,
            seed,
            log_digest: log.digest(),
            denoiser,
            generators,
        }
    }

    pub fn model(&self) -> Result<DenoiserModel> {
        DenoiserModel::from_params(self.config.model.clone(), self.denoiser.clone())
    }

    /// Every stored parameter under its qualified blob name, in file order.
    fn blobs(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .denoiser
            .iter()
            .map(|(k, t)| (format!("{DENOISER_PREFIX}{k}"), t))
            .collect();
        if let Some(gens) = &self.generators {
            for (layer, g) in &gens.generators {
                for (k, t) in g.params.iter() {
                    out.push((format!("{GENERATOR_PREFIX}{layer}.{k}"), t));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_toml();
        let blobs = self.blobs();
        let mut header = format!(
            "{MAGIC}\nformat_version = {FORMAT_VERSION}\nkind = {}\nseed = {}\nlog_digest = {}\nconfig_length = {}\n{config}blob_count = {}\n",
            self.kind,
            self.seed,
            self.log_digest,
            config.len(),
            blobs.len()
        );
        let mut offset = 0usize;
        for (name, t) in &blobs {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let shape = if shape.is_empty() { "-".to_string() } else { shape.join(",") };
            let len = t.numel() * 8;
            header.push_str(&format!("blob {name} {shape} {offset} {len}\n"));
            offset += len;
        }
        header.push_str("end_header\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &blobs {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line()? != MAGIC {
            return Err(header_err("missing checkpoint magic"));
        }
        let version: u32 = r.field("format_version")?;
        if version != FORMAT_VERSION {
            return Err(header_err(format!(
                "format_version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let kind: ArmKind = r.field::<String>("kind")?.parse()?;
        let seed: u64 = r.field("seed")?;
        let log_digest: String = r.field("log_digest")?;
        let config_len: usize = r.field("config_length")?;
        let config_bytes = r.take(config_len).ok_or_else(|| header_err("truncated config"))?;
        let config_text =
            std::str::from_utf8(config_bytes).map_err(|_| header_err("config is not UTF-8"))?;
        let config = ExperimentConfig::from_toml(config_text)
            .map_err(|e| header_err(format!("embedded config: {e}")))?;
        let count: usize = r.field("blob_count")?;
        let mut directory = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            directory.push(parse_blob_line(r.line()?)?);
        }
        if r.line()? != "end_header" {
            return Err(header_err("missing end_header"));
        }
        let body = &bytes[r.pos..];

        let mut expected_offset = 0usize;
        let mut denoiser = ParamStore::new();
        let mut gen_params: std::collections::BTreeMap<String, ParamStore> = Default::default();
        for entry in &directory {
            let numel: usize = entry.shape.iter().product();
            if entry.length != numel * 8 {
                return Err(integrity(
                    &entry.name,
                    format!("length {} does not match shape {:?}", entry.length, entry.shape),
                ));
            }
            if entry.offset != expected_offset {
                return Err(integrity(&entry.name, format!("unexpected offset {}", entry.offset)));
            }
            let end = entry.offset + entry.length;
            if end > body.len() {
                return Err(integrity(
                    &entry.name,
                    format!("truncated: needs {end} bytes, {} present", body.len()),
                ));
            }
            let data: Vec<f64> = body[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(integrity(&entry.name, "non-finite value"));
            }
            let t = Tensor::new(&entry.shape, data).map_err(|e| integrity(&entry.name, e.to_string()))?;
            if let Some(rest) = entry.name.strip_prefix(DENOISER_PREFIX) {
                denoiser.insert(rest, t);
            } else if let Some(rest) = entry.name.strip_prefix(GENERATOR_PREFIX) {
                let (layer, param) = rest
                    .split_once('.')
                    .ok_or_else(|| integrity(&entry.name, "malformed generator blob name"))?;
                gen_params.entry(layer.to_string()).or_default().insert(param, t);
            } else {
                return Err(integrity(&entry.name, "unknown blob namespace"));
            }
            expected_offset = end;
        }
        if body.len() != expected_offset {
            return Err(integrity(
                "<trailer>",
                format!("{} unexpected trailing bytes", body.len() - expected_offset),
            ));
        }

        DenoiserModel::from_params(config.model.clone(), denoiser.clone())
            .map_err(|e| integrity("denoiser", e.to_string()))?;
        let generators = if gen_params.is_empty() {
            None
        } else {
            let mut set = GeneratorSet::default();
            let configs = config.generator_configs()?;
            for (layer, params) in gen_params {
                let cfg = configs
                    .iter()
                    .find(|c| c.layer_id == layer)
                    .ok_or_else(|| integrity(&format!("maskgen.{layer}"), "layer not in config"))?;
                let g = MaskGenerator::from_params(cfg.clone(), params)
                    .map_err(|e| integrity(&format!("maskgen.{layer}"), e.to_string()))?;
                set.generators.insert(layer, g);
            }
            Some(set)
        };
        Ok(Self {
            kind,
            config,
            seed,
            log_digest,
            denoiser,
            generators,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

fn parse_blob_line(line: &str) -> Result<BlobEntry> {
    let parts: Vec<&str> = line.split(' ').collect();
    let [tag, name, shape, offset, length] = parts.as_slice() else {
        return Err(header_err(format!("malformed blob line {line:?}")));
    };
    if *tag != "blob" {
        return Err(header_err(format!("malformed blob line {line:?}")));
    }
    let bad = |what: &str| integrity(name, format!("bad {what} in directory"));
    let shape = if *shape == "-" {
        Vec::new()
    } else {
        shape
            .split(',')
            .map(|d| d.parse().map_err(|_| bad("shape")))
            .collect::<Result<_>>()?
    };
    Ok(BlobEntry {
        name: name.to_string(),
        shape,
        offset: offset.parse().map_err(|_| bad("offset"))?,
        length: length.parse().map_err(|_| bad("length"))?,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| header_err("header is not UTF-8"))
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn field<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(" = "))
            .ok_or_else(|| header_err(format!("expected `{key} = ...`, found {line:?}")))?;
        value
            .parse()
            .map_err(|_| header_err(format!("bad value for {key}: {value:?}")))
    }
}
