//! SmoothBlock / SmoothNet builders and the configurable study CNN.
//!
//! A SmoothBlock is a dense-style block: a wide 3×3 convolution, group
//! normalization with eight groups, SELU and a spatially preserving max pool,
//! whose output is concatenated onto the block input. SmoothNet stacks two
//! stages of five such blocks with an average pool in between, compresses the
//! result to a fixed-width feature vector and classifies it with three linear
//! layers separated by SELU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    forward_stack, Activation, Bound, Layer, LayerFactory, LayerInfo, ParamSet,
    GROUP_NORM_GROUPS,
};
use crate::tensor::{Scalar, Tensor};

/// Pooling applied at the end of a SmoothBlock's convolution path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockPool {
    /// 3×3 max pool, stride 1, padding 1 (keeps H×W).
    Max3x3Stride1,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmoothBlockConfig {
    pub in_channels: usize,
    pub growth: usize,
    pub pool_inside: BlockPool,
}

impl SmoothBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth
    }

    fn validate(&self) -> Result<()> {
        for (what, v) in [("in_channels", self.in_channels), ("growth", self.growth)] {
            if v == 0 || v % GROUP_NORM_GROUPS != 0 {
                return Err(Error::Config(format!(
                    "smoothblock {what} = {v} must be a positive multiple of {GROUP_NORM_GROUPS}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub growth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothNetConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Consecutive SmoothBlock groups; a 2×2 average pool separates stages.
    pub stages: Vec<StageConfig>,
    pub block_pool: BlockPool,
    pub head_features: usize,
    pub classifier_widths: Vec<usize>,
    pub num_classes: usize,
    pub input_hw: (usize, usize),
}

impl SmoothNetConfig {
    /// The full-size network: 10 blocks in two stages of five, 1024 channels
    /// at the widest point and a 2048-feature head. About 3.33M parameters
    /// for ten classes.
    pub fn reference(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stem_channels: 744,
            stages: vec![
                StageConfig {
                    blocks: 5,
                    growth: 24,
                },
                StageConfig {
                    blocks: 5,
                    growth: 32,
                },
            ],
            block_pool: BlockPool::Max3x3Stride1,
            head_features: 2048,
            classifier_widths: vec![512, 128],
            num_classes,
            input_hw: (32, 32),
        }
    }

    /// Four-block variant for desk-scale runs on small inputs.
    pub fn small(num_classes: usize, hw: usize) -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stages: vec![
                StageConfig {
                    blocks: 2,
                    growth: 16,
                },
                StageConfig {
                    blocks: 2,
                    growth: 16,
                },
            ],
            block_pool: BlockPool::Max3x3Stride1,
            head_features: 320,
            classifier_widths: vec![64, 32],
            num_classes,
            input_hw: (hw, hw),
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn peak_channels(&self) -> usize {
        self.stem_channels
            + self
                .stages
                .iter()
                .map(|s| s.blocks * s.growth)
                .sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipKind {
    None,
    ResidualAdd,
    DenseConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Group8,
    Instance,
    Layer,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Hand-assembled CNN for isolating one architectural component at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCnnConfig {
    pub depth: usize,
    pub width_multiplier: f64,
    /// Stem width at multiplier 1; stage convolutions are twice as wide.
    pub base_width: usize,
    pub skip: SkipKind,
    pub norm: NormKind,
    pub activation: Activation,
    pub pool: PoolKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_hw: (usize, usize),
    pub classifier_widths: Vec<usize>,
}

impl StudyCnnConfig {
    pub fn baseline(num_classes: usize, hw: usize) -> Self {
        Self {
            depth: 3,
            width_multiplier: 1.0,
            base_width: 16,
            skip: SkipKind::None,
            norm: NormKind::Group8,
            activation: Activation::Selu,
            pool: PoolKind::Max,
            in_channels: 3,
            num_classes,
            input_hw: (hw, hw),
            classifier_widths: vec![64, 32],
        }
    }

    pub fn stem_width(&self) -> usize {
        round_to_groups(self.base_width as f64 * self.width_multiplier)
    }

    pub fn stage_width(&self) -> usize {
        round_to_groups(2.0 * self.base_width as f64 * self.width_multiplier)
    }
}

/// Rounds a channel count to the nearest positive multiple of 8.
pub fn round_to_groups(channels: f64) -> usize {
    let g = GROUP_NORM_GROUPS as f64;
    ((channels / g).round() as usize).max(1) * GROUP_NORM_GROUPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    SmoothNet(SmoothNetConfig),
    Study(StudyCnnConfig),
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::SmoothNet(c) => c.num_classes,
            Architecture::Study(c) => c.num_classes,
        }
    }

    pub fn input_hw(&self) -> (usize, usize) {
        match self {
            Architecture::SmoothNet(c) => c.input_hw,
            Architecture::Study(c) => c.input_hw,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::SmoothNet(c) => c.in_channels,
            Architecture::Study(c) => c.in_channels,
        }
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Model<T>> {
        match self {
            Architecture::SmoothNet(c) => build_smoothnet(c, seed),
            Architecture::Study(c) => build_study_cnn(c, seed),
        }
    }

    /// Stable digest of the architecture; checkpoints are keyed on it.
    pub fn fingerprint(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("architecture serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Structural facts about a built model.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ArchSummary {
    pub smoothblocks: usize,
    pub peak_channels: usize,
    pub head_features: usize,
    pub classifier_linears: usize,
    pub param_count: usize,
}

/// A built network: parameters plus the layer stack that consumes them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub params: ParamSet<T>,
    layers: Vec<Layer>,
    summary: ArchSummary,
    fingerprint: u64,
}

impl<T: Scalar> Model<T> {
    pub fn from_layers(params: ParamSet<T>, layers: Vec<Layer>, fingerprint: u64) -> Self {
        let summary = ArchSummary {
            param_count: params.numel(),
            ..Default::default()
        };
        Self {
            params,
            layers,
            summary,
            fingerprint,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn summary(&self) -> &ArchSummary {
        &self.summary
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        forward_stack(&self.layers, tape, bound, x)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.input(images.clone())?;
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y)?.clone())
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.describe(&self.params, &mut out);
        }
        out
    }

    /// Every group-norm layer as `(channels, groups)`.
    pub fn group_norms(&self) -> Vec<(usize, usize)> {
        self.describe()
            .into_iter()
            .filter_map(|l| match l {
                LayerInfo::GroupNorm { channels, groups } => Some((channels, groups)),
                _ => None,
            })
            .collect()
    }
}

/// Number of trainable scalars in a model.
pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.params.numel()
}

/// Appends one SmoothBlock's parameters to `factory` and returns the block.
pub fn build_smoothblock<T: Scalar>(
    factory: &mut LayerFactory<'_, T, ChaCha8Rng>,
    name: &str,
    cfg: &SmoothBlockConfig,
) -> Result<Layer> {
    cfg.validate()?;
    let mut path = vec![
        factory.conv2d(&format!("{name}.conv"), cfg.in_channels, cfg.growth, 3, 1, 1)?,
        factory.group_norm(&format!("{name}.norm"), cfg.growth, GROUP_NORM_GROUPS)?,
        Layer::Activation(Activation::Selu),
    ];
    if cfg.pool_inside == BlockPool::Max3x3Stride1 {
        path.push(Layer::MaxPool {
            window: 3,
            stride: 1,
            padding: 1,
        });
    }
    Ok(Layer::DenseConcat { path })
}

/// A model consisting of a single SmoothBlock (no stem, no head).
pub fn smoothblock_model<T: Scalar>(cfg: &SmoothBlockConfig, seed: u64) -> Result<Model<T>> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = {
        let mut f = LayerFactory {
            params: &mut params,
            rng: &mut rng,
        };
        build_smoothblock(&mut f, "block", cfg)?
    };
    let fp = Sha256::digest(format!("{cfg:?}").as_bytes());
    let mut model = Model::from_layers(
        params,
        vec![block],
        u64::from_le_bytes(fp[..8].try_into().expect("8 bytes")),
    );
    model.summary.smoothblocks = 1;
    model.summary.peak_channels = cfg.out_channels();
    Ok(model)
}

/// Chooses an `h×w` grid with `channels·h·w == features` that fits in the
/// final feature map, preferring square-ish grids.
fn head_grid(channels: usize, features: usize, fh: usize, fw: usize) -> Option<(usize, usize)> {
    if !features.is_multiple_of(channels) {
        return None;
    }
    let cells = features / channels;
    (1..=cells)
        .filter(|h| cells.is_multiple_of(*h))
        .map(|h| (h, cells / h))
        .filter(|&(h, w)| h <= fh && w <= fw)
        .min_by_key(|&(h, w)| (h.abs_diff(w), h))
}

fn classifier<T: Scalar>(
    f: &mut LayerFactory<'_, T, ChaCha8Rng>,
    features: usize,
    widths: &[usize],
    num_classes: usize,
    activation: Activation,
    layers: &mut Vec<Layer>,
) -> Result<usize> {
    let mut fin = features;
    let mut count = 0;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(f.linear(&format!("classifier.{i}"), fin, w)?);
        layers.push(Layer::Activation(activation));
        fin = w;
        count += 1;
    }
    layers.push(f.linear(&format!("classifier.{}", widths.len()), fin, num_classes)?);
    Ok(count + 1)
}

pub fn build_smoothnet<T: Scalar>(cfg: &SmoothNetConfig, seed: u64) -> Result<Model<T>> {
    let (h, w) = cfg.input_hw;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("input {h}x{w} is below 8x8")));
    }
    if cfg.stages.is_empty() || cfg.stages.iter().any(|s| s.blocks == 0) {
        return Err(Error::Config("every stage needs at least one block".into()));
    }
    if cfg.num_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if cfg.stem_channels == 0 || !cfg.stem_channels.is_multiple_of(GROUP_NORM_GROUPS) {
        return Err(Error::Config(format!(
            "stem_channels = {} must be a positive multiple of {GROUP_NORM_GROUPS}",
            cfg.stem_channels
        )));
    }
    let downsamples = cfg.stages.len() - 1;
    let (fh, fw) = (h >> downsamples, w >> downsamples);
    if fh == 0 || fw == 0 {
        return Err(Error::Config(format!(
            "{downsamples} stage transitions leave no spatial extent from {h}x{w}"
        )));
    }

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = LayerFactory {
        params: &mut params,
        rng: &mut rng,
    };
    let mut layers = vec![
        f.conv2d("stem.conv", cfg.in_channels, cfg.stem_channels, 3, 1, 1)?,
        f.group_norm("stem.norm", cfg.stem_channels, GROUP_NORM_GROUPS)?,
        Layer::Activation(Activation::Selu),
    ];
    let mut channels = cfg.stem_channels;
    let mut peak = channels;
    let mut blocks = 0;
    for (si, stage) in cfg.stages.iter().enumerate() {
        if si > 0 {
            layers.push(Layer::AvgPool {
                window: 2,
                stride: 2,
                padding: 0,
            });
        }
        for bi in 0..stage.blocks {
            let block = SmoothBlockConfig {
                in_channels: channels,
                growth: stage.growth,
                pool_inside: cfg.block_pool,
            };
            layers.push(build_smoothblock(
                &mut f,
                &format!("stage{}.block{}", si + 1, bi + 1),
                &block,
            )?);
            channels = block.out_channels();
            peak = peak.max(channels);
            blocks += 1;
        }
    }

    match head_grid(channels, cfg.head_features, fh, fw) {
        Some((gh, gw)) => layers.push(Layer::AdaptiveAvgPool {
            out_h: gh,
            out_w: gw,
        }),
        None => {
            layers.push(f.conv2d("head.conv", channels, cfg.head_features, 1, 1, 0)?);
            layers.push(Layer::AdaptiveAvgPool { out_h: 1, out_w: 1 });
        }
    }
    layers.push(Layer::Flatten);
    let linears = classifier(
        &mut f,
        cfg.head_features,
        &cfg.classifier_widths,
        cfg.num_classes,
        Activation::Selu,
        &mut layers,
    )?;

    let arch = Architecture::SmoothNet(cfg.clone());
    let mut model = Model::from_layers(params, layers, arch.fingerprint());
    let head_features = flattened_width(&model)?;
    if head_features != cfg.head_features {
        return Err(Error::Config(format!(
            "head produces {head_features} features, expected {}",
            cfg.head_features
        )));
    }
    model.summary = ArchSummary {
        smoothblocks: blocks,
        peak_channels: peak,
        head_features,
        classifier_linears: linears,
        param_count: model.params.numel(),
    };
    Ok(model)
}

/// Feature count entering the first linear layer, derived from the layer list.
fn flattened_width<T: Scalar>(model: &Model<T>) -> Result<usize> {
    let mut c = 0;
    let mut cells = None;
    // Channel count at each open composite; `Some` for dense concatenation.
    let mut open: Vec<Option<usize>> = Vec::new();
    for info in model.describe() {
        match info {
            LayerInfo::Conv2d { out_channels, .. } => c = out_channels,
            LayerInfo::DenseConcatBegin => open.push(Some(c)),
            LayerInfo::ResidualBegin { .. } => open.push(None),
            LayerInfo::End => {
                if let Some(Some(input)) = open.pop() {
                    c += input;
                }
            }
            LayerInfo::AdaptiveAvgPool { out_h, out_w } => cells = Some(out_h * out_w),
            LayerInfo::Linear { in_features, .. } => {
                return match cells {
                    Some(cells) if in_features == c * cells => Ok(in_features),
                    _ => Err(Error::Config(format!(
                        "classifier expects {in_features} features, head yields {}",
                        c * cells.unwrap_or(0)
                    ))),
                };
            }
            _ => {}
        }
    }
    Err(Error::Config("model has no classifier".into()))
}

fn norm_layer<T: Scalar>(
    f: &mut LayerFactory<'_, T, ChaCha8Rng>,
    name: &str,
    kind: NormKind,
    channels: usize,
) -> Result<Option<Layer>> {
    let groups = match kind {
        NormKind::Group8 => GROUP_NORM_GROUPS,
        NormKind::Instance => channels,
        NormKind::Layer => 1,
        NormKind::None => return Ok(None),
    };
    f.group_norm(name, channels, groups).map(Some)
}

pub fn build_study_cnn<T: Scalar>(cfg: &StudyCnnConfig, seed: u64) -> Result<Model<T>> {
    let (h, w) = cfg.input_hw;
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("input {h}x{w} is below 8x8")));
    }
    if cfg.depth == 0 {
        return Err(Error::Config("study depth must be at least 1".into()));
    }
    if !(cfg.width_multiplier.is_finite() && cfg.width_multiplier > 0.0) {
        return Err(Error::Config(format!(
            "width multiplier {} must be positive",
            cfg.width_multiplier
        )));
    }
    if cfg.num_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = LayerFactory {
        params: &mut params,
        rng: &mut rng,
    };
    let stem = cfg.stem_width();
    let width = cfg.stage_width();
    let mut layers = vec![f.conv2d("stem.conv", cfg.in_channels, stem, 3, 1, 1)?];
    layers.extend(norm_layer(&mut f, "stem.norm", cfg.norm, stem)?);
    layers.push(Layer::Activation(cfg.activation));

    let pool = match cfg.pool {
        PoolKind::Max => Layer::MaxPool {
            window: 3,
            stride: 1,
            padding: 1,
        },
        PoolKind::Avg => Layer::AvgPool {
            window: 3,
            stride: 1,
            padding: 1,
        },
    };
    let transition = cfg.depth / 2;
    let mut channels = stem;
    let mut peak = stem;
    for stage in 0..cfg.depth {
        if stage > 0 && stage == transition && h >= 16 && w >= 16 {
            layers.push(Layer::AvgPool {
                window: 2,
                stride: 2,
                padding: 0,
            });
        }
        let name = format!("stage{}", stage + 1);
        let mut path = vec![f.conv2d(&format!("{name}.conv"), channels, width, 3, 1, 1)?];
        path.extend(norm_layer(&mut f, &format!("{name}.norm"), cfg.norm, width)?);
        path.push(Layer::Activation(cfg.activation));
        path.push(pool.clone());
        match cfg.skip {
            SkipKind::None => {
                layers.extend(path);
                channels = width;
            }
            SkipKind::ResidualAdd => {
                let projection = if channels != width {
                    Some(vec![f.conv2d(
                        &format!("{name}.projection"),
                        channels,
                        width,
                        1,
                        1,
                        0,
                    )?])
                } else {
                    None
                };
                layers.push(Layer::Residual { path, projection });
                channels = width;
            }
            SkipKind::DenseConcat => {
                layers.push(Layer::DenseConcat { path });
                channels += width;
            }
        }
        peak = peak.max(channels);
    }
    layers.push(Layer::AdaptiveAvgPool { out_h: 1, out_w: 1 });
    layers.push(Layer::Flatten);
    let linears = classifier(
        &mut f,
        channels,
        &cfg.classifier_widths,
        cfg.num_classes,
        cfg.activation,
        &mut layers,
    )?;

    let arch = Architecture::Study(cfg.clone());
    let mut model = Model::from_layers(params, layers, arch.fingerprint());
    model.summary = ArchSummary {
        smoothblocks: 0,
        peak_channels: peak,
        head_features: channels,
        classifier_linears: linears,
        param_count: model.params.numel(),
    };
    Ok(model)
}
