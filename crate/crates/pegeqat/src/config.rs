//! Experiment configuration: a line-oriented `section.key = value` text
//! format. Unknown keys are errors; omitted keys take defaults.

use crate::curriculum::{Granularity, MuFamily, RateFamily};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::quantizer::{ClipFamily, RoundFamily};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    SmallCnn,
    Resnet20Lite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataName {
    Cifar10,
    Mnist,
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone)]
pub struct ModelCfg {
    pub arch: ArchKind,
    pub width: f64,
    pub classes: usize,
    pub pretrained_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DataCfg {
    pub name: DataName,
    pub dir: PathBuf,
    pub batch: usize,
    pub augment: bool,
    /// Train-subset truncation; None trains on everything.
    pub subset_n: Option<usize>,
}

/// Bit width 32 means full-precision bypass; quantized paths take 1..=8.
#[derive(Debug, Clone)]
pub struct QuantCfg {
    pub clip_family: ClipFamily,
    /// Round family used for weight quantizers (activations always use the
    /// unsigned activation lattice).
    pub round_family: RoundFamily,
    pub bits_w: u8,
    pub bits_a: u8,
    pub pact_init_m: f64,
}

#[derive(Debug, Clone)]
pub struct EstimatorCfg {
    pub kind: EstimatorKind,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ReplaceCfg {
    pub family: RateFamily,
    /// Initial rate; also the rate of the CONSTANT family.
    pub p0: f64,
    /// Fraction of total steps at which the rate reaches 1.
    pub t_full_frac: f64,
    pub base: f64,
    pub granularity: Granularity,
    /// Replace activations as well as weights.
    pub activations: bool,
}

#[derive(Debug, Clone)]
pub struct MuCfg {
    pub family: MuFamily,
    pub max: f64,
    /// Growth coefficient; 0 derives it so mu reaches 0.99 * max at 80% of
    /// the run.
    pub k: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingCfg {
    pub epochs: usize,
    pub optimizer: OptKind,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (the final epoch always evaluates).
    pub eval_period: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelCfg,
    pub data: DataCfg,
    pub quant: QuantCfg,
    pub estimator: EstimatorCfg,
    pub replace: ReplaceCfg,
    pub mu: MuCfg,
    pub train: TrainingCfg,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelCfg { arch: ArchKind::SmallCnn, width: 1.0, classes: 10, pretrained_path: None },
            data: DataCfg {
                name: DataName::Synth,
                dir: PathBuf::from("data"),
                batch: 64,
                augment: false,
                subset_n: None,
            },
            quant: QuantCfg {
                clip_family: ClipFamily::Interval,
                round_family: RoundFamily::Weight,
                bits_w: 2,
                bits_a: 2,
                pact_init_m: 8.0,
            },
            estimator: EstimatorCfg { kind: EstimatorKind::Pege, delta: 1e-3 },
            replace: ReplaceCfg {
                family: RateFamily::Logarithmic,
                p0: 0.3,
                t_full_frac: 0.6,
                base: 10.0,
                granularity: Granularity::PerLayer,
                activations: false,
            },
            mu: MuCfg { family: MuFamily::Exponential, max: 0.1, k: 0.0 },
            train: TrainingCfg {
                epochs: 10,
                optimizer: OptKind::Adam,
                lr: 2e-3,
                momentum: 0.9,
                nesterov: false,
                weight_decay: 0.0,
                seed: 1,
                eval_period: 1,
            },
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean, got '{v}'"))),
    }
}

fn parse_num<N: std::str::FromStr>(v: &str, what: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("invalid {what}: '{v}'")))
}

impl TrainConfig {
    /// Parse the text format. Lines are `section.key = value`; blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: missing '='", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        TrainConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.arch" => {
                self.model.arch = match v {
                    "mlp" => ArchKind::Mlp,
                    "small_cnn" => ArchKind::SmallCnn,
                    "resnet20_lite" => ArchKind::Resnet20Lite,
                    _ => return Err(Error::Config(format!("unknown architecture '{v}'"))),
                }
            }
            "model.width" => self.model.width = parse_num(v, "model.width")?,
            "model.classes" => self.model.classes = parse_num(v, "model.classes")?,
            "model.pretrained_path" => self.model.pretrained_path = Some(PathBuf::from(v)),
            "data.name" => {
                self.data.name = match v {
                    "cifar10" => DataName::Cifar10,
                    "mnist" => DataName::Mnist,
                    "synth" => DataName::Synth,
                    _ => return Err(Error::Config(format!("unknown dataset '{v}'"))),
                }
            }
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.batch" => self.data.batch = parse_num(v, "data.batch")?,
            "data.augment" => self.data.augment = parse_bool(v)?,
            "data.subset_n" => {
                let n: usize = parse_num(v, "data.subset_n")?;
                self.data.subset_n = if n == 0 { None } else { Some(n) };
            }
            "quant.clip_family" => {
                self.quant.clip_family = match v {
                    "pact" => ClipFamily::Pact,
                    "interval" => ClipFamily::Interval,
                    "fixed_unit" => ClipFamily::FixedUnit,
                    _ => return Err(Error::Config(format!("unknown clip family '{v}'"))),
                }
            }
            "quant.round_family" => {
                self.quant.round_family = match v {
                    "activation" => RoundFamily::Activation,
                    "weight" => RoundFamily::Weight,
                    _ => return Err(Error::Config(format!("unknown round family '{v}'"))),
                }
            }
            "quant.bits_w" => self.quant.bits_w = parse_num(v, "quant.bits_w")?,
            "quant.bits_a" => self.quant.bits_a = parse_num(v, "quant.bits_a")?,
            "quant.pact_init_m" => self.quant.pact_init_m = parse_num(v, "quant.pact_init_m")?,
            "estimator.kind" => {
                self.estimator.kind = match v {
                    "ste" => EstimatorKind::Ste,
                    "ewgs" => EstimatorKind::Ewgs,
                    "pege" => EstimatorKind::Pege,
                    _ => return Err(Error::Config(format!("unknown estimator '{v}'"))),
                }
            }
            "estimator.delta" => self.estimator.delta = parse_num(v, "estimator.delta")?,
            // aliases kept for symmetry with the estimator section
            "estimator.mu_max" | "mu.max" => self.mu.max = parse_num(v, "mu.max")?,
            "estimator.k_mu" | "mu.k" => self.mu.k = parse_num(v, "mu.k")?,
            "mu.family" => {
                self.mu.family = match v {
                    "constant" => MuFamily::Constant,
                    "linear" => MuFamily::Linear,
                    "logarithmic" => MuFamily::Logarithmic,
                    "exponential" => MuFamily::Exponential,
                    _ => return Err(Error::Config(format!("unknown mu family '{v}'"))),
                }
            }
            "replace.family" => {
                self.replace.family = match v {
                    "constant" => RateFamily::Constant,
                    "linear" => RateFamily::Linear,
                    "logarithmic" => RateFamily::Logarithmic,
                    "exponential" => RateFamily::Exponential,
                    "cosine" => RateFamily::Cosine,
                    "none" => RateFamily::None,
                    _ => return Err(Error::Config(format!("unknown replacement family '{v}'"))),
                }
            }
            "replace.p0" => self.replace.p0 = parse_num(v, "replace.p0")?,
            "replace.t_full_frac" => self.replace.t_full_frac = parse_num(v, "replace.t_full_frac")?,
            "replace.base" => self.replace.base = parse_num(v, "replace.base")?,
            "replace.granularity" => {
                self.replace.granularity = match v {
                    "global" => Granularity::Global,
                    "per_layer" => Granularity::PerLayer,
                    "per_element" => Granularity::PerElement,
                    _ => return Err(Error::Config(format!("unknown granularity '{v}'"))),
                }
            }
            "replace.activations" => self.replace.activations = parse_bool(v)?,
            "train.epochs" => self.train.epochs = parse_num(v, "train.epochs")?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "sgd_momentum" => OptKind::SgdMomentum,
                    "adam" => OptKind::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer '{v}'"))),
                }
            }
            "train.lr" => self.train.lr = parse_num(v, "train.lr")?,
            "train.momentum" => self.train.momentum = parse_num(v, "train.momentum")?,
            "train.nesterov" => self.train.nesterov = parse_bool(v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(v, "train.weight_decay")?,
            "train.seed" => self.train.seed = parse_num(v, "train.seed")?,
            "train.eval_period" => self.train.eval_period = parse_num(v, "train.eval_period")?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.width <= 0.0 {
            return Err(Error::Config(format!("model.width {} must be > 0", self.model.width)));
        }
        if self.model.classes < 2 {
            return Err(Error::Config("model.classes must be >= 2".into()));
        }
        for (bits, key) in [(self.quant.bits_w, "quant.bits_w"), (self.quant.bits_a, "quant.bits_a")] {
            if !(1..=8).contains(&bits) && bits != 32 {
                return Err(Error::Config(format!("{key} = {bits}; expected 1..=8 or 32 (bypass)")));
            }
        }
        if self.train.lr <= 0.0 {
            return Err(Error::Config(format!("train.lr {} must be > 0", self.train.lr)));
        }
        if self.train.eval_period < 1 {
            return Err(Error::Config("train.eval_period must be >= 1".into()));
        }
        if self.data.batch < 1 {
            return Err(Error::Config("data.batch must be >= 1".into()));
        }
        if self.replace.granularity == Granularity::PerElement && self.replace.activations {
            return Err(Error::Config(
                "replace.activations is only supported with global or per_layer granularity".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.replace.t_full_frac) {
            return Err(Error::Config(format!(
                "replace.t_full_frac {} not in [0,1]",
                self.replace.t_full_frac
            )));
        }
        if self.mu.max < 0.0 || self.mu.k < 0.0 || self.estimator.delta < 0.0 {
            return Err(Error::Config("mu.max, mu.k and estimator.delta must be >= 0".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let arch = match self.model.arch {
            ArchKind::Mlp => "mlp",
            ArchKind::SmallCnn => "small_cnn",
            ArchKind::Resnet20Lite => "resnet20_lite",
        };
        s.push_str(&format!("model.arch = {arch}\n"));
        s.push_str(&format!("model.width = {}\n", self.model.width));
        s.push_str(&format!("model.classes = {}\n", self.model.classes));
        if let Some(p) = &self.model.pretrained_path {
            s.push_str(&format!("model.pretrained_path = {}\n", p.display()));
        }
        let data = match self.data.name {
            DataName::Cifar10 => "cifar10",
            DataName::Mnist => "mnist",
            DataName::Synth => "synth",
        };
        s.push_str(&format!("data.name = {data}\n"));
        s.push_str(&format!("data.dir = {}\n", self.data.dir.display()));
        s.push_str(&format!("data.batch = {}\n", self.data.batch));
        s.push_str(&format!("data.augment = {}\n", self.data.augment));
        s.push_str(&format!("data.subset_n = {}\n", self.data.subset_n.unwrap_or(0)));
        let clip = match self.quant.clip_family {
            ClipFamily::Pact => "pact",
            ClipFamily::Interval => "interval",
            ClipFamily::FixedUnit => "fixed_unit",
        };
        s.push_str(&format!("quant.clip_family = {clip}\n"));
        let round = match self.quant.round_family {
            RoundFamily::Activation => "activation",
            RoundFamily::Weight => "weight",
        };
        s.push_str(&format!("quant.round_family = {round}\n"));
        s.push_str(&format!("quant.bits_w = {}\n", self.quant.bits_w));
        s.push_str(&format!("quant.bits_a = {}\n", self.quant.bits_a));
        s.push_str(&format!("quant.pact_init_m = {}\n", self.quant.pact_init_m));
        let est = match self.estimator.kind {
            EstimatorKind::Ste => "ste",
            EstimatorKind::Ewgs => "ewgs",
            EstimatorKind::Pege => "pege",
        };
        s.push_str(&format!("estimator.kind = {est}\n"));
        s.push_str(&format!("estimator.delta = {}\n", self.estimator.delta));
        let rf = match self.replace.family {
            RateFamily::Constant => "constant",
            RateFamily::Linear => "linear",
            RateFamily::Logarithmic => "logarithmic",
            RateFamily::Exponential => "exponential",
            RateFamily::Cosine => "cosine",
            RateFamily::None => "none",
        };
        s.push_str(&format!("replace.family = {rf}\n"));
        s.push_str(&format!("replace.p0 = {}\n", self.replace.p0));
        s.push_str(&format!("replace.t_full_frac = {}\n", self.replace.t_full_frac));
        s.push_str(&format!("replace.base = {}\n", self.replace.base));
        let gran = match self.replace.granularity {
            Granularity::Global => "global",
            Granularity::PerLayer => "per_layer",
            Granularity::PerElement => "per_element",
        };
        s.push_str(&format!("replace.granularity = {gran}\n"));
        s.push_str(&format!("replace.activations = {}\n", self.replace.activations));
        let mf = match self.mu.family {
            MuFamily::Constant => "constant",
            MuFamily::Linear => "linear",
            MuFamily::Logarithmic => "logarithmic",
            MuFamily::Exponential => "exponential",
        };
        s.push_str(&format!("mu.family = {mf}\n"));
        s.push_str(&format!("mu.max = {}\n", self.mu.max));
        s.push_str(&format!("mu.k = {}\n", self.mu.k));
        s.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        let opt = match self.train.optimizer {
            OptKind::SgdMomentum => "sgd_momentum",
            OptKind::Adam => "adam",
        };
        s.push_str(&format!("train.optimizer = {opt}\n"));
        s.push_str(&format!("train.lr = {}\n", self.train.lr));
        s.push_str(&format!("train.momentum = {}\n", self.train.momentum));
        s.push_str(&format!("train.nesterov = {}\n", self.train.nesterov));
        s.push_str(&format!("train.weight_decay = {}\n", self.train.weight_decay));
        s.push_str(&format!("train.seed = {}\n", self.train.seed));
        s.push_str(&format!("train.eval_period = {}\n", self.train.eval_period));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_minimal_config() {
        let cfg = TrainConfig::parse(
            "# comment\nmodel.arch = mlp\ntrain.epochs = 3\nquant.bits_w = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.model.arch, ArchKind::Mlp);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.quant.bits_w, 32);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            TrainConfig::parse("quant.bits = 4\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_values_are_errors() {
        assert!(TrainConfig::parse("train.epochs = many\n").is_err());
        assert!(TrainConfig::parse("quant.bits_w = 9\n").is_err());
        assert!(TrainConfig::parse("model.width = 0\n").is_err());
    }

    #[test]
    fn text_roundtrip_is_stable() {
        let mut cfg = TrainConfig::default();
        cfg.set("estimator.kind", "ewgs").unwrap();
        cfg.set("replace.granularity", "global").unwrap();
        cfg.set("data.subset_n", "5000").unwrap();
        let text = cfg.to_text();
        let reparsed = TrainConfig::parse(&text).unwrap();
        assert_eq!(text, reparsed.to_text());
    }

    #[test]
    fn mu_aliases_write_the_same_field() {
        let a = TrainConfig::parse("estimator.mu_max = 0.25\n").unwrap();
        let b = TrainConfig::parse("mu.max = 0.25\n").unwrap();
        assert_eq!(a.mu.max, b.mu.max);
    }
}
