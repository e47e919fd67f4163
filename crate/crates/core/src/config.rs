//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! model.scale = 3
//! train.lr = 1e-4
//! ```
//!
//! Later assignments win, so command-line overrides are applied after the
//! file. `model.preset` resets every model key and is therefore applied
//! before the others regardless of position.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub split_seed: u64,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, split_seed: 0, augment: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Toy, 2)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| Error::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub fn with_preset(preset: Preset, scale: usize) -> Self {
        let model = match preset {
            Preset::Toy => ModelConfig::toy(scale),
            Preset::Paper => ModelConfig::paper_scale(scale),
        };
        Self { preset, model, train: TrainConfig::default(), data: DataConfig::default() }
    }

    /// Every recognised key.
    pub const KEYS: [&'static str; 31] = [
        "model.preset",
        "model.scale",
        "model.in_channels",
        "model.feat_channels",
        "model.num_stages",
        "model.global_residual",
        "csa.reduction",
        "csa.spatial_kernel",
        "csa.stage_residual",
        "transformer.patch",
        "transformer.embed_dim",
        "transformer.num_heads",
        "transformer.num_encoders",
        "transformer.num_decoders",
        "transformer.sgfn_expand",
        "transformer.positional_embedding",
        "transformer.pos_grid",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.epochs",
        "train.batch",
        "train.seed",
        "train.patch_hr",
        "train.eval_interval",
        "train.iters_per_epoch",
        "train.checkpoint_dir",
        "data.root",
        "data.split_seed",
        "data.augment",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if key == "model.preset" {
            let preset = match value {
                "toy" => Preset::Toy,
                "paper" => Preset::Paper,
                _ => {
                    return Err(Error::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "expected `toy` or `paper`".into(),
                    })
                }
            };
            let fresh = Self::with_preset(preset, self.model.scale);
            self.preset = fresh.preset;
            self.model = fresh.model;
            return Ok(());
        }
        let m = &mut self.model;
        let t = &mut m.transformer;
        match key {
            "model.scale" => m.scale = parse(key, value)?,
            "model.in_channels" => m.in_channels = parse(key, value)?,
            "model.feat_channels" => {
                m.feat_channels = parse(key, value)?;
                m.csa.channels = m.feat_channels;
            }
            "model.num_stages" => m.num_stages = parse(key, value)?,
            "model.global_residual" => m.global_residual = parse(key, value)?,
            "csa.reduction" => m.csa.reduction = parse(key, value)?,
            "csa.spatial_kernel" => m.csa.spatial_kernel = parse(key, value)?,
            "csa.stage_residual" => m.csa.stage_residual = parse(key, value)?,
            "transformer.patch" => {
                let p = parse(key, value)?;
                t.patch_h = p;
                t.patch_w = p;
            }
            "transformer.embed_dim" => t.embed_dim = parse(key, value)?,
            "transformer.num_heads" => t.num_heads = parse(key, value)?,
            "transformer.num_encoders" => t.num_encoders = parse(key, value)?,
            "transformer.num_decoders" => t.num_decoders = parse(key, value)?,
            "transformer.sgfn_expand" => t.sgfn_expand = parse(key, value)?,
            "transformer.positional_embedding" => t.use_positional_embedding = parse(key, value)?,
            "transformer.pos_grid" => t.pos_grid = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.eps" => self.train.eps = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch" => self.train.batch = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.patch_hr" => self.train.patch_hr = parse(key, value)?,
            "train.eval_interval" => self.train.eval_interval = parse(key, value)?,
            "train.iters_per_epoch" => self.train.iters_per_epoch = parse(key, value)?,
            "train.checkpoint_dir" => {
                self.train.checkpoint_dir = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "data.augment" => self.data.augment = parse(key, value)?,
            "data.root" => self.data.root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.split_seed" => self.data.split_seed = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs; a preset assignment goes first.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "model.preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "model.preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses file text into `(key, value)` pairs.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::BadValue {
                key: format!("line {}", n + 1),
                value: raw.to_string(),
                reason: "expected `key = value`".into(),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Splits a `key=value` command-line override.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::BadValue {
            key: "--set".into(),
            value: s.to_string(),
            reason: "expected key=value".into(),
        })?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = Self::parse_pairs(text)?;
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &m.transformer;
        let tr = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut lines = vec![
            format!("model.preset = {}", if self.preset == Preset::Paper { "paper" } else { "toy" }),
            format!("model.scale = {}", m.scale),
            format!("model.in_channels = {}", m.in_channels),
            format!("model.feat_channels = {}", m.feat_channels),
            format!("model.num_stages = {}", m.num_stages),
            format!("model.global_residual = {}", m.global_residual),
            format!("csa.reduction = {}", m.csa.reduction),
            format!("csa.spatial_kernel = {}", m.csa.spatial_kernel),
            format!("csa.stage_residual = {}", m.csa.stage_residual),
        ];
        if t.patch_h == t.patch_w {
            lines.push(format!("transformer.patch = {}", t.patch_h));
        }
        lines.extend([
            format!("transformer.embed_dim = {}", t.embed_dim),
            format!("transformer.num_heads = {}", t.num_heads),
            format!("transformer.num_encoders = {}", t.num_encoders),
            format!("transformer.num_decoders = {}", t.num_decoders),
            format!("transformer.sgfn_expand = {}", t.sgfn_expand),
            format!("transformer.positional_embedding = {}", t.use_positional_embedding),
            format!("transformer.pos_grid = {}", t.pos_grid),
            format!("train.lr = {:?}", tr.lr),
            format!("train.beta1 = {:?}", tr.beta1),
            format!("train.beta2 = {:?}", tr.beta2),
            format!("train.eps = {:?}", tr.eps),
            format!("train.epochs = {}", tr.epochs),
            format!("train.batch = {}", tr.batch),
            format!("train.seed = {}", tr.seed),
            format!("train.patch_hr = {}", tr.patch_hr),
            format!("train.eval_interval = {}", tr.eval_interval),
            format!("train.iters_per_epoch = {}", tr.iters_per_epoch),
            format!("train.checkpoint_dir = {}", path(&tr.checkpoint_dir)),
            format!("data.root = {}", path(&self.data.root)),
            format!("data.split_seed = {}", self.data.split_seed),
            format!("data.augment = {}", self.data.augment),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply([("model.scale", "3"), ("train.lr", "0.00025"), ("data.root", "/tmp/x")]).unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let paper = RunConfig::from_text("model.scale = 4\nmodel.preset = paper\n").unwrap();
        assert_eq!(paper.model, ModelConfig::paper_scale(4));
        assert_eq!(RunConfig::from_text(&paper.to_text()).unwrap(), paper);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_text("model.scal = 3"), Err(Error::UnknownKey(k)) if k == "model.scal"));
        assert!(matches!(RunConfig::from_text("model.scale = three"), Err(Error::BadValue { .. })));
        assert!(RunConfig::from_text("just words").is_err());
        let cfg = RunConfig::from_text("model.scale = 5").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn feat_channels_follow_into_attention() {
        let cfg = RunConfig::from_text("model.feat_channels = 32 # wider").unwrap();
        assert_eq!(cfg.model.csa.channels, 32);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let canonical = RunConfig::default().to_text();
        let keys: Vec<&str> = canonical.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        for k in RunConfig::KEYS {
            assert!(keys.contains(&k), "{k}");
        }
    }
}
