//! Line-oriented run configuration.
//!
//! Each non-blank line is `section.key = value`; `#` starts a comment.
//! Sections are `run`, `model`, `dp`, `optim`, `data` and `sweep`. Every key
//! has a default (see [`SCHEMA`]); unknown or repeated keys are errors.
//! [`RunConfig::to_config_string`] writes the fully resolved configuration
//! back in the same format, and parsing that text yields the same config.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{
    Architecture, BlockPool, NormKind, PoolKind, SkipKind, SmoothNetConfig, StageConfig,
    StudyCnnConfig,
};
use crate::data::{SamplingMode, CIFAR_CLASSES};
use crate::dp::{LrSchedule, PerSampleMethod};
use crate::error::{Error, Result};
use crate::harness::sweep::{SearchMode, SweepConfig};
use crate::layers::Activation;

/// Every accepted key, its default and a one-line description.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run.id", "run", "run identifier; names the output subdirectory"),
    ("run.seed", "0", "model initialization, sampling and noise seed"),
    ("run.epochs", "15", "maximum number of epochs"),
    ("run.output_dir", "runs", "directory that receives one subdirectory per run"),
    ("run.early_stop_patience", "15", "epochs without val-loss improvement before stopping"),
    ("run.min_improvement", "0.0001", "absolute val-loss decrease that counts as improvement"),
    ("run.divergence_threshold", "1000", "abort when a step loss exceeds this"),
    ("model.kind", "smoothnet", "smoothnet | study"),
    ("model.preset", "small", "smoothnet base layout: reference | small"),
    ("model.stem_channels", "", "smoothnet stem width (empty = preset)"),
    ("model.stages", "", "smoothnet stages as blocks x growth, e.g. 5x24,5x32 (empty = preset)"),
    ("model.block_pool", "", "pool inside each smoothblock: max | none (empty = preset)"),
    ("model.head_features", "", "smoothnet feature width before the classifier (empty = preset)"),
    ("model.classifier", "", "hidden classifier widths, e.g. 512,128 (empty = preset)"),
    ("model.depth", "3", "study: number of conv stages"),
    ("model.width_multiplier", "1", "study: channel multiplier"),
    ("model.base_width", "16", "study: stem width at multiplier 1"),
    ("model.skip", "none", "study: none | residual | dense"),
    ("model.norm", "group8", "study: group8 | instance | layer | none"),
    ("model.activation", "selu", "study: selu | relu"),
    ("model.pool", "max", "study: max | avg"),
    ("dp.enabled", "true", "train with DP-SGD (false = ordinary momentum SGD)"),
    ("dp.clip_norm", "1", "per-sample L2 clipping bound C"),
    ("dp.noise_multiplier", "1", "noise multiplier sigma"),
    ("dp.target_epsilon", "none", "if set, sigma is calibrated to reach this epsilon"),
    ("dp.delta", "0.00001", "delta of the reported (epsilon, delta) guarantee"),
    ("dp.sampling", "poisson", "lot sampling: poisson | shuffle-fixed"),
    ("dp.per_sample", "batched", "per-sample gradient method: batched | microbatch"),
    ("optim.lot_size", "256", "expected lot size L"),
    ("optim.lr", "0.002", "initial learning rate"),
    ("optim.schedule", "step", "exponential | step"),
    ("optim.gamma", "0.9", "learning-rate decay factor"),
    ("optim.step_every", "5", "epochs between decays for the step schedule"),
    ("optim.momentum", "0.9", "momentum coefficient"),
    ("optim.weight_decay", "0.0002", "decoupled weight decay"),
    ("data.source", "synthetic", "synthetic | cifar10 (cifar10 reads SMOOTHNET_DATA_DIR)"),
    ("data.classes", "3", "synthetic: number of classes"),
    ("data.per_class", "500", "synthetic: training samples per class"),
    ("data.test_per_class", "100", "synthetic: test samples per class"),
    ("data.hw", "16", "synthetic: image height and width"),
    ("data.val_fraction", "0.1", "stratified validation fraction"),
    ("data.seed", "0", "synthetic generation and split seed"),
    ("sweep.mode", "grid", "grid | random"),
    ("sweep.clip_norms", "0.1,1,10", "grid: clipping norms"),
    ("sweep.clip_range", "0.1,20", "random: clipping-norm range, sampled log-uniformly"),
    ("sweep.points", "3", "random: number of clipping norms drawn"),
    ("sweep.epochs", "15", "epoch budgets to try"),
    ("sweep.repeats", "1", "repeats per point, each with its own seed"),
    ("sweep.top_k", "10", "rows flagged as top-k in the summary"),
    ("sweep.seed", "0", "random-search seed"),
];

/// Environment variable naming the CIFAR-10 binary directory.
pub const DATA_DIR_ENV: &str = "SMOOTHNET_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothNetPreset {
    Reference,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpSettings {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub target_epsilon: Option<f64>,
    pub delta: f64,
    pub sampling: SamplingMode,
    pub per_sample: PerSampleMethod,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSettings {
    pub lot_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub hw: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl DataSettings {
    pub fn num_classes(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.classes,
            DataSource::Cifar10 => CIFAR_CLASSES,
        }
    }

    pub fn image_hw(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.hw,
            DataSource::Cifar10 => 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub epochs: usize,
    pub output_dir: PathBuf,
    pub early_stop_patience: usize,
    pub min_improvement: f64,
    pub divergence_threshold: f64,
    pub preset: SmoothNetPreset,
    /// Input geometry and class count follow from `data`.
    pub architecture: Architecture,
    pub dp: DpSettings,
    pub optim: OptimSettings,
    pub data: DataSettings,
    pub sweep: SweepConfig,
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        match self.0.get(key) {
            Some(v) => v,
            None => SCHEMA
                .iter()
                .find(|(k, _, _)| *k == key)
                .map(|(_, d, _)| *d)
                .expect("key is in the schema"),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        parse_value(key, self.raw(key))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            "" | "none" => Ok(None),
            v => parse_value(key, v).map(Some),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            "" => Ok(None),
            v => v
                .split(',')
                .map(|item| parse_value(key, item.trim()))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        let v = self.raw(key);
        options
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("{key} = {v:?}; expected one of {}", names.join(", ")))
            })
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

const PRESETS: &[(&str, SmoothNetPreset)] = &[
    ("reference", SmoothNetPreset::Reference),
    ("small", SmoothNetPreset::Small),
];
const SKIPS: &[(&str, SkipKind)] = &[
    ("none", SkipKind::None),
    ("residual", SkipKind::ResidualAdd),
    ("dense", SkipKind::DenseConcat),
];
const NORMS: &[(&str, NormKind)] = &[
    ("group8", NormKind::Group8),
    ("instance", NormKind::Instance),
    ("layer", NormKind::Layer),
    ("none", NormKind::None),
];
const ACTIVATIONS: &[(&str, Activation)] =
    &[("selu", Activation::Selu), ("relu", Activation::Relu)];
const POOLS: &[(&str, PoolKind)] = &[("max", PoolKind::Max), ("avg", PoolKind::Avg)];
const BLOCK_POOLS: &[(&str, BlockPool)] = &[
    ("max", BlockPool::Max3x3Stride1),
    ("none", BlockPool::None),
];
const SAMPLING: &[(&str, SamplingMode)] = &[
    ("poisson", SamplingMode::Poisson),
    ("shuffle-fixed", SamplingMode::ShuffleFixed),
];
const PER_SAMPLE: &[(&str, PerSampleMethod)] = &[
    ("batched", PerSampleMethod::Batched),
    ("microbatch", PerSampleMethod::Microbatch),
];
const SOURCES: &[(&str, DataSource)] = &[
    ("synthetic", DataSource::Synthetic),
    ("cifar10", DataSource::Cifar10),
];
const SEARCH: &[(&str, SearchMode)] = &[("grid", SearchMode::Grid), ("random", SearchMode::Random)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], value: T) -> &'static str {
    options
        .iter()
        .find(|(_, t)| *t == value)
        .map(|(n, _)| *n)
        .expect("every variant has a name")
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `section.key = value`", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !SCHEMA.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", i + 1)));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: {key} given twice", i + 1)));
            }
        }
        let cfg = Self::from_values(&Values(&map))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn from_values(v: &Values<'_>) -> Result<Self> {
        let data = DataSettings {
            source: v.choice("data.source", SOURCES)?,
            classes: v.parse("data.classes")?,
            per_class: v.parse("data.per_class")?,
            test_per_class: v.parse("data.test_per_class")?,
            hw: v.parse("data.hw")?,
            val_fraction: v.parse("data.val_fraction")?,
            seed: v.parse("data.seed")?,
        };
        let (num_classes, hw) = (data.num_classes(), data.image_hw());
        let preset = v.choice("model.preset", PRESETS)?;
        let architecture = match v.raw("model.kind") {
            "smoothnet" => {
                let mut c = match preset {
                    SmoothNetPreset::Reference => SmoothNetConfig::reference(num_classes),
                    SmoothNetPreset::Small => SmoothNetConfig::small(num_classes, hw),
                };
                c.input_hw = (hw, hw);
                if let Some(s) = v.optional("model.stem_channels")? {
                    c.stem_channels = s;
                }
                if let Some(stages) = v.list::<String>("model.stages")? {
                    c.stages = stages
                        .iter()
                        .map(|s| parse_stage(s))
                        .collect::<Result<Vec<_>>>()?;
                }
                if !v.raw("model.block_pool").is_empty() {
                    c.block_pool = v.choice("model.block_pool", BLOCK_POOLS)?;
                }
                if let Some(h) = v.optional("model.head_features")? {
                    c.head_features = h;
                }
                if let Some(w) = v.list("model.classifier")? {
                    c.classifier_widths = w;
                }
                Architecture::SmoothNet(c)
            }
            "study" => {
                let mut c = StudyCnnConfig::baseline(num_classes, hw);
                c.depth = v.parse("model.depth")?;
                c.width_multiplier = v.parse("model.width_multiplier")?;
                c.base_width = v.parse("model.base_width")?;
                c.skip = v.choice("model.skip", SKIPS)?;
                c.norm = v.choice("model.norm", NORMS)?;
                c.activation = v.choice("model.activation", ACTIVATIONS)?;
                c.pool = v.choice("model.pool", POOLS)?;
                if let Some(w) = v.list("model.classifier")? {
                    c.classifier_widths = w;
                }
                Architecture::Study(c)
            }
            other => {
                return Err(Error::Config(format!(
                    "model.kind = {other:?}; expected smoothnet or study"
                )))
            }
        };
        let initial = v.parse("optim.lr")?;
        let gamma = v.parse("optim.gamma")?;
        let schedule = match v.raw("optim.schedule") {
            "exponential" => LrSchedule::Exponential { initial, gamma },
            "step" => LrSchedule::Step {
                initial,
                gamma,
                every: v.parse("optim.step_every")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "optim.schedule = {other:?}; expected exponential or step"
                )))
            }
        };
        Ok(Self {
            run_id: v.raw("run.id").to_string(),
            seed: v.parse("run.seed")?,
            epochs: v.parse("run.epochs")?,
            output_dir: PathBuf::from(v.raw("run.output_dir")),
            early_stop_patience: v.parse("run.early_stop_patience")?,
            min_improvement: v.parse("run.min_improvement")?,
            divergence_threshold: v.parse("run.divergence_threshold")?,
            preset,
            architecture,
            dp: DpSettings {
                enabled: v.parse("dp.enabled")?,
                clip_norm: v.parse("dp.clip_norm")?,
                noise_multiplier: v.parse("dp.noise_multiplier")?,
                target_epsilon: v.optional("dp.target_epsilon")?,
                delta: v.parse("dp.delta")?,
                sampling: v.choice("dp.sampling", SAMPLING)?,
                per_sample: v.choice("dp.per_sample", PER_SAMPLE)?,
            },
            optim: OptimSettings {
                lot_size: v.parse("optim.lot_size")?,
                schedule,
                momentum: v.parse("optim.momentum")?,
                weight_decay: v.parse("optim.weight_decay")?,
            },
            data,
            sweep: SweepConfig {
                mode: v.choice("sweep.mode", SEARCH)?,
                clip_norms: v.list("sweep.clip_norms")?.unwrap_or_default(),
                clip_range: {
                    let r: Vec<f64> = v.list("sweep.clip_range")?.unwrap_or_default();
                    match r[..] {
                        [lo, hi] => (lo, hi),
                        _ => {
                            return Err(Error::Config(
                                "sweep.clip_range needs exactly two values".into(),
                            ))
                        }
                    }
                },
                points: v.parse("sweep.points")?,
                epochs: v.list("sweep.epochs")?.unwrap_or_default(),
                repeats: v.parse("sweep.repeats")?,
                top_k: v.parse("sweep.top_k")?,
                seed: v.parse("sweep.seed")?,
            },
        })
    }

    /// Checks every field; the architecture is checked by building it.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return bad(format!("run.id {:?} must be non-empty [A-Za-z0-9._-]", self.run_id));
        }
        if self.early_stop_patience == 0 {
            return bad("run.early_stop_patience must be positive".into());
        }
        if !(self.min_improvement >= 0.0 && self.min_improvement.is_finite()) {
            return bad(format!("run.min_improvement {} must be >= 0", self.min_improvement));
        }
        if !(self.divergence_threshold > 0.0) {
            return bad(format!(
                "run.divergence_threshold {} must be positive",
                self.divergence_threshold
            ));
        }
        let dp = &self.dp;
        if !(dp.clip_norm > 0.0) {
            return bad(format!("dp.clip_norm {} must be positive", dp.clip_norm));
        }
        if !(dp.noise_multiplier >= 0.0 && dp.noise_multiplier.is_finite()) {
            return bad(format!("dp.noise_multiplier {} must be >= 0", dp.noise_multiplier));
        }
        if let Some(t) = dp.target_epsilon {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("dp.target_epsilon {t} must be positive"));
            }
        }
        if !(dp.delta > 0.0 && dp.delta < 1.0) {
            return bad(format!("dp.delta {} outside (0, 1)", dp.delta));
        }
        let o = &self.optim;
        if o.lot_size == 0 {
            return bad("optim.lot_size must be positive".into());
        }
        o.schedule.validate()?;
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("optim.momentum {} outside [0, 1)", o.momentum));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad(format!("optim.weight_decay {} must be >= 0", o.weight_decay));
        }
        let d = &self.data;
        if !(d.val_fraction > 0.0 && d.val_fraction < 0.5) {
            return bad(format!("data.val_fraction {} outside (0, 0.5)", d.val_fraction));
        }
        if d.source == DataSource::Synthetic {
            if d.classes < 2 || d.per_class == 0 || d.test_per_class == 0 {
                return bad("synthetic data needs >= 2 classes and positive counts".into());
            }
            if d.hw < 8 {
                return bad(format!("data.hw {} is below 8", d.hw));
            }
        }
        self.sweep.validate()?;
        self.architecture.build::<f32>(0)?;
        Ok(())
    }

    /// Every key with its resolved value, grouped by section.
    pub fn to_config_string(&self) -> String {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k} = {v}"));
        put("run.id", self.run_id.clone());
        put("run.seed", self.seed.to_string());
        put("run.epochs", self.epochs.to_string());
        put("run.output_dir", self.output_dir.display().to_string());
        put("run.early_stop_patience", self.early_stop_patience.to_string());
        put("run.min_improvement", self.min_improvement.to_string());
        put("run.divergence_threshold", self.divergence_threshold.to_string());
        put("model.preset", name_of(PRESETS, self.preset).into());
        match &self.architecture {
            Architecture::SmoothNet(c) => {
                put("model.kind", "smoothnet".into());
                put("model.stem_channels", c.stem_channels.to_string());
                let stages: Vec<String> = c
                    .stages
                    .iter()
                    .map(|s| format!("{}x{}", s.blocks, s.growth))
                    .collect();
                put("model.stages", stages.join(","));
                put("model.block_pool", name_of(BLOCK_POOLS, c.block_pool).into());
                put("model.head_features", c.head_features.to_string());
                put("model.classifier", join(&c.classifier_widths));
            }
            Architecture::Study(c) => {
                put("model.kind", "study".into());
                put("model.depth", c.depth.to_string());
                put("model.width_multiplier", c.width_multiplier.to_string());
                put("model.base_width", c.base_width.to_string());
                put("model.skip", name_of(SKIPS, c.skip).into());
                put("model.norm", name_of(NORMS, c.norm).into());
                put("model.activation", name_of(ACTIVATIONS, c.activation).into());
                put("model.pool", name_of(POOLS, c.pool).into());
                put("model.classifier", join(&c.classifier_widths));
            }
        }
        let dp = &self.dp;
        put("dp.enabled", dp.enabled.to_string());
        put("dp.clip_norm", dp.clip_norm.to_string());
        put("dp.noise_multiplier", dp.noise_multiplier.to_string());
        put(
            "dp.target_epsilon",
            dp.target_epsilon.map_or("none".into(), |t| t.to_string()),
        );
        put("dp.delta", dp.delta.to_string());
        put("dp.sampling", name_of(SAMPLING, dp.sampling).into());
        put("dp.per_sample", name_of(PER_SAMPLE, dp.per_sample).into());
        let o = &self.optim;
        put("optim.lot_size", o.lot_size.to_string());
        match o.schedule {
            LrSchedule::Exponential { initial, gamma } => {
                put("optim.schedule", "exponential".into());
                put("optim.lr", initial.to_string());
                put("optim.gamma", gamma.to_string());
            }
            LrSchedule::Step {
                initial,
                gamma,
                every,
            } => {
                put("optim.schedule", "step".into());
                put("optim.lr", initial.to_string());
                put("optim.gamma", gamma.to_string());
                put("optim.step_every", every.to_string());
            }
        }
        put("optim.momentum", o.momentum.to_string());
        put("optim.weight_decay", o.weight_decay.to_string());
        let d = &self.data;
        put("data.source", name_of(SOURCES, d.source).into());
        put("data.classes", d.classes.to_string());
        put("data.per_class", d.per_class.to_string());
        put("data.test_per_class", d.test_per_class.to_string());
        put("data.hw", d.hw.to_string());
        put("data.val_fraction", d.val_fraction.to_string());
        put("data.seed", d.seed.to_string());
        let s = &self.sweep;
        put("sweep.mode", name_of(SEARCH, s.mode).into());
        put("sweep.clip_norms", join(&s.clip_norms));
        put("sweep.clip_range", format!("{},{}", s.clip_range.0, s.clip_range.1));
        put("sweep.points", s.points.to_string());
        put("sweep.epochs", join(&s.epochs));
        put("sweep.repeats", s.repeats.to_string());
        put("sweep.top_k", s.top_k.to_string());
        put("sweep.seed", s.seed.to_string());
        out.push(String::new());
        out.join("\n")
    }
}

fn parse_stage(s: &str) -> Result<StageConfig> {
    let (blocks, growth) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("stage {s:?} must look like 5x24")))?;
    Ok(StageConfig {
        blocks: parse_value("model.stages", blocks.trim())?,
        growth: parse_value("model.stages", growth.trim())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.early_stop_patience, 15);
        assert_eq!(cfg.divergence_threshold, 1000.0);
        assert_eq!(cfg.data.val_fraction, 0.1);
        assert_eq!(cfg.dp.delta, 1e-5);
        assert_eq!(cfg.dp.sampling, SamplingMode::Poisson);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        assert!(RunConfig::parse("run.colour = red").is_err());
        assert!(RunConfig::parse("run.seed = 1\nrun.seed = 2").is_err());
        assert!(RunConfig::parse("run.seed").is_err());
        assert!(RunConfig::parse("run.seed = -1").is_err());
        assert!(RunConfig::parse("model.kind = mlp").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# header\n\nrun.seed = 7   # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn every_schema_key_is_written_back_or_kind_specific() {
        let text = RunConfig::parse("").unwrap().to_config_string();
        for (key, _, _) in SCHEMA {
            let study_only = [
                "model.depth",
                "model.width_multiplier",
                "model.base_width",
                "model.skip",
                "model.norm",
                "model.activation",
                "model.pool",
            ];
            if !study_only.contains(key) && *key != "optim.step_every" {
                assert!(text.contains(&format!("{key} = ")), "{key} missing");
            }
        }
    }
}
