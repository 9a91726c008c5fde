//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::stats::QuantMode;

/// Model settings plus the paths a run reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Manifest file, or a directory containing `manifest.json`.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

pub const KEYS: &[&str] = &[
    "dataset",
    "out_dir",
    "checkpoint",
    "image_size",
    "region_size",
    "n_filters",
    "levels",
    "channels",
    "heads",
    "fpn_channels",
    "semantic_widths",
    "lambda",
    "lambda_warmup",
    "lr",
    "momentum",
    "steps",
    "batch",
    "seed",
    "lr_decay_steps",
    "lr_decay",
    "quant_mode",
    "constrained",
    "texture",
    "proposal_scales",
    "gate_bias",
    "init_samples",
    "grad_clip",
    "threads",
];

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut model = ModelConfig::default();
        let mut dataset = None;
        let mut out_dir = PathBuf::from("run");
        let mut checkpoint = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dataset" => dataset = Some(PathBuf::from(value)),
                "out_dir" => out_dir = PathBuf::from(value),
                "checkpoint" => checkpoint = Some(PathBuf::from(value)),
                _ => model.set(key, value)?,
            }
        }
        let dataset = dataset.ok_or_else(|| Error::Config("missing required key: dataset".into()))?;
        model.validate()?;
        Ok(Self { model, dataset, out_dir, checkpoint })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.dataset.is_dir() {
            self.dataset.join(crate::data::MANIFEST_FILE)
        } else {
            self.dataset.clone()
        }
    }

    /// Serializes back to the flat format; `parse_str` reads it unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset = {}", self.dataset.display());
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint = {}", c.display());
        }
        out.push_str(&self.model.to_text());
        out
    }
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Sets one field from its flat-config spelling.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse(key, v)?,
            "region_size" => self.region_size = parse(key, v)?,
            "n_filters" => self.n_filters = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "fpn_channels" => self.fpn_channels = parse(key, v)?,
            "semantic_widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.semantic_widths =
                    w.try_into().map_err(|_| Error::Config(format!("semantic_widths needs 4 values, got {v:?}")))?;
            }
            "lambda" => self.lambda = parse(key, v)?,
            "lambda_warmup" => self.lambda_warmup = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "lr_decay_steps" => self.lr_decay_steps = parse_list(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "quant_mode" => {
                self.quant_mode = match v {
                    "verbatim" => QuantMode::Verbatim,
                    "centered" => QuantMode::Centered,
                    _ => return Err(Error::Config(format!("quant_mode must be verbatim or centered, got {v:?}"))),
                }
            }
            "constrained" => self.constrained = parse(key, v)?,
            "texture" => self.texture = parse(key, v)?,
            "proposal_scales" => self.proposal_scales = parse_list(key, v)?,
            "gate_bias" => self.gate_bias = parse(key, v)?,
            "init_samples" => self.init_samples = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key: {key}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mode = match self.quant_mode {
            QuantMode::Verbatim => "verbatim",
            QuantMode::Centered => "centered",
        };
        let pairs = [
            ("image_size", self.image_size.to_string()),
            ("region_size", self.region_size.to_string()),
            ("n_filters", self.n_filters.to_string()),
            ("levels", self.levels.to_string()),
            ("channels", self.channels.to_string()),
            ("heads", self.heads.to_string()),
            ("fpn_channels", self.fpn_channels.to_string()),
            ("semantic_widths", join(&self.semantic_widths)),
            ("lambda", self.lambda.to_string()),
            ("lambda_warmup", self.lambda_warmup.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("lr_decay_steps", join(&self.lr_decay_steps)),
            ("lr_decay", self.lr_decay.to_string()),
            ("quant_mode", mode.to_string()),
            ("constrained", self.constrained.to_string()),
            ("texture", self.texture.to_string()),
            ("proposal_scales", join(&self.proposal_scales)),
            ("gate_bias", self.gate_bias.to_string()),
            ("init_samples", self.init_samples.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("threads", self.threads.to_string()),
        ];
        pairs.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }
}
