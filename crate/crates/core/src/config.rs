//! Flat `key = value` run configuration with a fixed schema.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{Ablation, BackboneConfig};
use crate::data::dataset::{
    protocol_split, Condition, DatasetIndex, FractionMode, Identity, Layout, Protocol,
};
use crate::data::sampling::LengthPolicy;
use crate::data::synth::SynthConfig;
use crate::error::{GaitError, Result};
use crate::finetune::TripletConfig;
use crate::ssl::{ModelConfig, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size model: 64x44 input, five pyramid scales.
    Paper,
    /// Single-core model: 16x11 input, three scales, 10-frame clips.
    Compact,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Compact => "compact",
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "compact" => Ok(Preset::Compact),
            other => Err(format!("unknown preset {other:?} (paper, compact)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    /// `casia_b_lt`, `ou_mvlp`, `custom` (then `train_ids`/`test_ids`) or
    /// `all`.
    pub protocol: String,
    pub train_ids: Vec<Identity>,
    pub test_ids: Vec<Identity>,
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    pub fraction_mode: FractionMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            layout: Layout::CasiaB,
            protocol: "casia_b_lt".into(),
            train_ids: Vec::new(),
            test_ids: Vec::new(),
            pretrain_fraction: 1.0,
            finetune_fraction: 1.0,
            fraction_mode: FractionMode::Identities,
        }
    }
}

impl DataConfig {
    /// Train and test identities for `index` under the configured protocol.
    /// `all` puts every identity in both (unlabeled pre-training runs).
    pub fn split(&self, index: &DatasetIndex) -> Result<(Vec<Identity>, Vec<Identity>)> {
        if self.protocol == "all" {
            let ids = index.identities();
            return Ok((ids.clone(), ids));
        }
        protocol_split(index, &self.protocol()?)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        match self.protocol.as_str() {
            "all" => Ok(Protocol::Custom {
                train: Vec::new(),
                test: Vec::new(),
            }),
            "casia_b_lt" => Ok(Protocol::CasiaBLt),
            "ou_mvlp" => Ok(Protocol::OuMvlp),
            "custom" => Ok(Protocol::Custom {
                train: self.train_ids.clone(),
                test: self.test_ids.clone(),
            }),
            other => Err(GaitError::Config(format!(
                "unknown protocol {other:?} (casia_b_lt, ou_mvlp, custom, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TripletConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub exclude_identical_view: bool,
    /// Training-log cadence in steps.
    pub log_every: usize,
    /// Periodic checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Passed through untouched; all computation runs on the CPU.
    pub device: String,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, frames) = match preset {
            Preset::Paper => (ModelConfig::default(), 30),
            Preset::Compact => (ModelConfig::compact(), COMPACT_FRAMES),
        };
        RunConfig {
            preset,
            seed: 0,
            model,
            pretrain: PretrainConfig {
                frames,
                ..Default::default()
            },
            finetune: TripletConfig {
                frames,
                ..Default::default()
            },
            data: DataConfig::default(),
            synth: SynthConfig {
                seed: 0,
                ..Default::default()
            },
            exclude_identical_view: true,
            log_every: 1,
            checkpoint_every: 0,
            device: "cpu".into(),
        }
    }

    /// Parses a config file body. A `preset` line, wherever it appears, is
    /// applied before every other key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(GaitError::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse().map_err(GaitError::Config)?,
            None => Preset::Paper,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GaitError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.model.backbone;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.pretrain.seed = self.seed;
                self.finetune.seed = self.seed;
                self.synth.seed = self.seed;
            }
            "device" => self.device = value.to_string(),
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "exclude_identical_view" => self.exclude_identical_view = parse(key, value)?,

            "model.input_height" => b.input_height = parse(key, value)?,
            "model.input_width" => b.input_width = parse(key, value)?,
            "model.conv1_channels" => b.conv1_channels = parse(key, value)?,
            "model.channels" => b.channels = parse(key, value)?,
            "model.scales" => b.scales = parse(key, value)?,
            "model.strip_dim" => b.strip_dim = parse(key, value)?,
            "model.embed_dim" => b.embed_dim = parse(key, value)?,
            "model.radius" => b.radius = parse(key, value)?,
            "model.ablation" => b.ablation = value.parse().map_err(GaitError::Config)?,
            "model.feature_dim" => self.model.feature_dim = parse(key, value)?,
            "model.batch_norm" => self.model.batch_norm = parse(key, value)?,
            "model.share_bins" => self.model.share_bins = parse(key, value)?,

            "pretrain.lr" => self.pretrain.learning_rate = parse(key, value)?,
            "pretrain.iterations" => self.pretrain.iterations = parse(key, value)?,
            "pretrain.persons" => self.pretrain.persons = parse(key, value)?,
            "pretrain.per_person" => self.pretrain.per_person = parse(key, value)?,
            "pretrain.frames" => self.pretrain.frames = parse(key, value)?,
            "pretrain.momentum" => self.pretrain.momentum = parse(key, value)?,
            "pretrain.length_policy" => self.pretrain.length_policy = parse_policy(value)?,

            "finetune.lr" => self.finetune.learning_rate = parse(key, value)?,
            "finetune.iterations" => self.finetune.iterations = parse(key, value)?,
            "finetune.persons" => self.finetune.persons = parse(key, value)?,
            "finetune.per_person" => self.finetune.per_person = parse(key, value)?,
            "finetune.frames" => self.finetune.frames = parse(key, value)?,
            "finetune.margin" => self.finetune.margin = parse(key, value)?,
            "finetune.length_policy" => self.finetune.length_policy = parse_policy(value)?,

            "data.root" => self.data.root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.layout" => {
                self.data.layout = match value {
                    "casia_b" => Layout::CasiaB,
                    "ou_mvlp" => Layout::OuMvlp,
                    other => {
                        return Err(GaitError::Config(format!(
                            "unknown layout {other:?} (casia_b, ou_mvlp)"
                        )))
                    }
                }
            }
            "data.protocol" => self.data.protocol = value.to_string(),
            "data.train_ids" => self.data.train_ids = parse_ids(value)?,
            "data.test_ids" => self.data.test_ids = parse_ids(value)?,
            "data.pretrain_fraction" => self.data.pretrain_fraction = parse(key, value)?,
            "data.finetune_fraction" => self.data.finetune_fraction = parse(key, value)?,
            "data.fraction_mode" => self.data.fraction_mode = value.parse().map_err(GaitError::Config)?,

            "synth.identities" => self.synth.identities = parse(key, value)?,
            "synth.sequences" => self.synth.sequences_per_identity = parse(key, value)?,
            "synth.frames" => self.synth.frames_per_sequence = parse(key, value)?,
            "synth.views" => self.synth.views = parse_list(key, value)?,
            "synth.conditions" => {
                self.synth.conditions = value
                    .split(',')
                    .map(|c| c.trim().parse::<Condition>().map_err(GaitError::Config))
                    .collect::<Result<_>>()?
            }
            _ => return Err(GaitError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.data.protocol()?;
        for (name, f) in [
            ("data.pretrain_fraction", self.data.pretrain_fraction),
            ("data.finetune_fraction", self.data.finetune_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(GaitError::Config(format!("{name} must be in (0, 1], got {f}")));
            }
        }
        if self.log_every == 0 {
            return Err(GaitError::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value; parsing the result reproduces the
    /// config exactly.
    pub fn to_text(&self) -> String {
        let b = &self.model.backbone;
        let p = &self.pretrain;
        let f = &self.finetune;
        let d = &self.data;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("preset", self.preset.as_str().into());
        kv("seed", self.seed.to_string());
        kv("device", self.device.clone());
        kv("log_every", self.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("exclude_identical_view", self.exclude_identical_view.to_string());
        kv("model.input_height", b.input_height.to_string());
        kv("model.input_width", b.input_width.to_string());
        kv("model.conv1_channels", b.conv1_channels.to_string());
        kv("model.channels", b.channels.to_string());
        kv("model.scales", b.scales.to_string());
        kv("model.strip_dim", b.strip_dim.to_string());
        kv("model.embed_dim", b.embed_dim.to_string());
        kv("model.radius", b.radius.to_string());
        kv("model.ablation", b.ablation.as_str().into());
        kv("model.feature_dim", self.model.feature_dim.to_string());
        kv("model.batch_norm", self.model.batch_norm.to_string());
        kv("model.share_bins", self.model.share_bins.to_string());
        kv("pretrain.lr", fmt_f64(p.learning_rate));
        kv("pretrain.iterations", p.iterations.to_string());
        kv("pretrain.persons", p.persons.to_string());
        kv("pretrain.per_person", p.per_person.to_string());
        kv("pretrain.frames", p.frames.to_string());
        kv("pretrain.momentum", fmt_f64(p.momentum));
        kv("pretrain.length_policy", policy_str(p.length_policy).into());
        kv("finetune.lr", fmt_f64(f.learning_rate));
        kv("finetune.iterations", f.iterations.to_string());
        kv("finetune.persons", f.persons.to_string());
        kv("finetune.per_person", f.per_person.to_string());
        kv("finetune.frames", f.frames.to_string());
        kv("finetune.margin", fmt_f64(f.margin));
        kv("finetune.length_policy", policy_str(f.length_policy).into());
        kv(
            "data.root",
            d.root.as_ref().map(|r| r.display().to_string()).unwrap_or_default(),
        );
        kv(
            "data.layout",
            match d.layout {
                Layout::CasiaB => "casia_b",
                Layout::OuMvlp => "ou_mvlp",
            }
            .into(),
        );
        kv("data.protocol", d.protocol.clone());
        kv("data.train_ids", join(&d.train_ids));
        kv("data.test_ids", join(&d.test_ids));
        kv("data.pretrain_fraction", fmt_f64(d.pretrain_fraction));
        kv("data.finetune_fraction", fmt_f64(d.finetune_fraction));
        kv("data.fraction_mode", d.fraction_mode.as_str().into());
        kv("synth.identities", s.identities.to_string());
        kv("synth.sequences", s.sequences_per_identity.to_string());
        kv("synth.frames", s.frames_per_sequence.to_string());
        kv("synth.views", join(&s.views));
        kv(
            "synth.conditions",
            s.conditions.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        out
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.model.backbone
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.model.backbone.ablation = ablation;
    }
}

/// Clip length used by the compact preset.
pub const COMPACT_FRAMES: usize = 10;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| GaitError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `1-8,10,12-14` style identity lists.
pub fn parse_ids(value: &str) -> Result<Vec<Identity>> {
    let mut ids = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (Identity, Identity) = (parse("ids", a.trim())?, parse("ids", b.trim())?);
                if a > b {
                    return Err(GaitError::Config(format!("empty id range {part}")));
                }
                ids.extend(a..=b);
            }
            None => ids.push(parse("ids", part)?),
        }
    }
    Ok(ids)
}

fn parse_policy(value: &str) -> Result<LengthPolicy> {
    match value {
        "error" => Ok(LengthPolicy::Error),
        "pad_loop" => Ok(LengthPolicy::PadLoop),
        other => Err(GaitError::Config(format!(
            "unknown length policy {other:?} (error, pad_loop)"
        ))),
    }
}

fn policy_str(p: LengthPolicy) -> &'static str {
    match p {
        LengthPolicy::Error => "error",
        LengthPolicy::PadLoop => "pad_loop",
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = RunConfig::preset(Preset::Compact);
        cfg.set("seed", "42").unwrap();
        cfg.set("pretrain.lr", "0.0003").unwrap();
        cfg.set("data.train_ids", "1-3,7").unwrap();
        cfg.set("model.ablation", "no_mtb").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.data.train_ids, vec![1, 2, 3, 7]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, GaitError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn preset_applies_first() {
        let cfg = RunConfig::parse("model.channels = 12\npreset = compact\n").unwrap();
        assert_eq!(cfg.model.backbone.channels, 12);
        assert_eq!(cfg.model.backbone.input_height, 16);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("pretrain.momentum = 1.5").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("data.pretrain_fraction = 0").is_err());
    }
}
