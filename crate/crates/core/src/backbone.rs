//! Residual ConvNets (basic-block and bottleneck families) with named tap points.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d};
use crate::nn::ops;
use crate::nn::params::{has_prefix, FreezeMask, Init, ParamBuilder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    R18,
    R50,
    Wide50,
    Wide101,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::R18, Family::R50, Family::Wide50, Family::Wide101];

    pub fn blocks(self) -> [usize; 4] {
        match self {
            Family::R18 => [2, 2, 2, 2],
            Family::R50 | Family::Wide50 => [3, 4, 6, 3],
            Family::Wide101 => [3, 4, 23, 3],
        }
    }

    pub fn is_bottleneck(self) -> bool {
        self != Family::R18
    }

    /// Output channels per block relative to the stage's base width.
    pub fn expansion(self) -> usize {
        if self.is_bottleneck() {
            4
        } else {
            1
        }
    }

    /// Inner (3×3) width relative to the stage's base width.
    pub fn inner_factor(self) -> usize {
        match self {
            Family::Wide50 | Family::Wide101 => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::R18 => "r18",
            Family::R50 => "r50",
            Family::Wide50 => "wide50",
            Family::Wide101 => "wide101",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown backbone family `{s}` (r18, r50, wide50, wide101)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    Layer1,
    Layer2,
    Layer3,
    Layer4,
}

impl TapPoint {
    pub const ALL: [TapPoint; 4] = [TapPoint::Layer1, TapPoint::Layer2, TapPoint::Layer3, TapPoint::Layer4];

    /// 1-based stage number.
    pub fn stage(self) -> usize {
        self as usize + 1
    }

    pub fn from_stage(stage: usize) -> Option<Self> {
        TapPoint::ALL.get(stage.checked_sub(1)?).copied()
    }

    /// Total spatial downsampling at this tap.
    pub fn stride(self) -> usize {
        4 << (self as usize)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TapPoint::Layer1 => "layer1",
            TapPoint::Layer2 => "layer2",
            TapPoint::Layer3 => "layer3",
            TapPoint::Layer4 => "layer4",
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapPoint::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown tap `{s}` (layer1..layer4)")))
    }
}

pub const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const STEM_WIDTH: usize = 64;
/// Scaled widths are rounded to a multiple of this.
pub const CHANNEL_GROUP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    pub width_multiplier: f64,
    /// Zero-initialize the last batch-norm scale of every residual branch.
    #[serde(default = "default_true")]
    pub zero_init_residual: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk(Family::R18)
    }
}

impl BackboneConfig {
    pub fn new(family: Family, width_multiplier: f64) -> Self {
        Self {
            family,
            width_multiplier,
            zero_init_residual: true,
        }
    }

    /// Desk profile: one eighth of the standard width.
    pub fn desk(family: Family) -> Self {
        Self::new(family, 0.125)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    pub fn scale(&self, channels: usize) -> usize {
        let groups = (channels as f64 * self.width_multiplier / CHANNEL_GROUP as f64).round() as usize;
        (groups * CHANNEL_GROUP).max(CHANNEL_GROUP)
    }

    pub fn stem_channels(&self) -> usize {
        self.scale(STEM_WIDTH)
    }

    /// Inner width of blocks in `stage` (1-based).
    pub fn inner_channels(&self, stage: usize) -> usize {
        self.scale(BASE_WIDTHS[stage - 1] * self.family.inner_factor())
    }

    /// Output channels of `stage` (1-based).
    pub fn out_channels(&self, stage: usize) -> usize {
        self.scale(BASE_WIDTHS[stage - 1] * self.family.expansion())
    }
}

/// `ceil(n / 2)`, the output size of every stride-2 layer in the network.
fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// (C, H, W) of the feature map produced at `tap` for a square `input_hw` image.
pub fn feature_shape(config: &BackboneConfig, tap: TapPoint, input_hw: usize) -> Result<(usize, usize, usize)> {
    if input_hw < tap.stride() {
        return Err(Error::Shape(format!(
            "input {input_hw} is smaller than the stride {} of {tap}",
            tap.stride()
        )));
    }
    let mut hw = halve(halve(input_hw));
    for _ in 1..tap.stage() {
        hw = halve(hw);
    }
    Ok((config.out_channels(tap.stage()), hw, hw))
}

fn conv_bn(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + 2 * c_out
}

/// Weight scalars (conv kernels plus batch-norm affine terms) of the full backbone,
/// counted from the architecture table.
pub fn count_params(config: &BackboneConfig) -> usize {
    let mut total = conv_bn(3, config.stem_channels(), 7);
    let mut c_in = config.stem_channels();
    for stage in 1..=4 {
        let inner = config.inner_channels(stage);
        let out = config.out_channels(stage);
        for block in 0..config.family.blocks()[stage - 1] {
            let stride = if stage > 1 && block == 0 { 2 } else { 1 };
            total += if config.family.is_bottleneck() {
                conv_bn(c_in, inner, 1) + conv_bn(inner, inner, 3) + conv_bn(inner, out, 1)
            } else {
                conv_bn(c_in, out, 3) + conv_bn(out, out, 3)
            };
            if stride != 1 || c_in != out {
                total += conv_bn(c_in, out, 1);
            }
            c_in = out;
        }
    }
    total
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    /// Parameters live under `<prefix>.<conv>` and `<prefix>.<bn>`.
    fn new(
        pb: &ParamBuilder,
        (conv, bn): (&str, &str),
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gamma: Init,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp(conv), c_in, c_out, k, stride, k / 2)?,
            bn: BatchNorm::with_gamma(&pb.pp(bn), c_out, gamma)?,
        })
    }

    fn forward(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, batch_stats)
    }
}

#[derive(Debug, Clone)]
struct Block {
    layers: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    fn new(
        pb: &ParamBuilder,
        config: &BackboneConfig,
        c_in: usize,
        inner: usize,
        out: usize,
        stride: usize,
    ) -> Result<Self> {
        let last_gamma = if config.zero_init_residual { Init::Zeros } else { Init::Ones };
        let layers = if config.family.is_bottleneck() {
            vec![
                ConvBn::new(pb, ("conv1", "bn1"), c_in, inner, 1, 1, Init::Ones)?,
                ConvBn::new(pb, ("conv2", "bn2"), inner, inner, 3, stride, Init::Ones)?,
                ConvBn::new(pb, ("conv3", "bn3"), inner, out, 1, 1, last_gamma)?,
            ]
        } else {
            vec![
                ConvBn::new(pb, ("conv1", "bn1"), c_in, out, 3, stride, Init::Ones)?,
                ConvBn::new(pb, ("conv2", "bn2"), out, out, 3, 1, last_gamma)?,
            ]
        };
        let downsample = if stride != 1 || c_in != out {
            Some(ConvBn::new(pb, ("downsample_conv", "downsample_bn"), c_in, out, 1, stride, Init::Ones)?)
        } else {
            None
        };
        Ok(Self { layers, downsample })
    }

    fn forward(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h, batch_stats)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, batch_stats)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

/// A residual backbone, possibly truncated after some stage.
///
/// Stages at or below the freeze level have their weights frozen and their
/// batch norms pinned to running statistics.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    prefix: String,
    store: ParamStore,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
    frozen_through: Arc<AtomicUsize>,
}

impl Backbone {
    /// Builds the full network under `pb`'s prefix.
    pub fn new(pb: &ParamBuilder, config: BackboneConfig) -> Result<Self> {
        Self::truncated(pb, config, TapPoint::Layer4)
    }

    /// Builds only the stem and stages up to and including `last`.
    pub fn truncated(pb: &ParamBuilder, config: BackboneConfig, last: TapPoint) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(&pb.pp("stem").pp(0), ("conv", "bn"), 3, config.stem_channels(), 7, 2, Init::Ones)?;
        let mut c_in = config.stem_channels();
        let mut stages = Vec::new();
        for stage in 1..=last.stage() {
            let spb = pb.pp(format!("layer{stage}"));
            let (inner, out) = (config.inner_channels(stage), config.out_channels(stage));
            let mut blocks = Vec::new();
            for b in 0..config.family.blocks()[stage - 1] {
                let stride = if stage > 1 && b == 0 { 2 } else { 1 };
                blocks.push(Block::new(&spb.pp(b), &config, c_in, inner, out, stride)?);
                c_in = out;
            }
            stages.push(blocks);
        }
        Ok(Self {
            config,
            prefix: pb.prefix().to_string(),
            store: pb.store().clone(),
            stem,
            stages,
            frozen_through: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn last_tap(&self) -> TapPoint {
        TapPoint::from_stage(self.stages.len()).expect("at least one stage")
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels(self.stages.len())
    }

    fn stage_prefix(&self, stage: usize) -> String {
        let name = if stage == 0 { "stem".to_string() } else { format!("layer{stage}") };
        if self.prefix.is_empty() {
            name
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Freezes the stem and stages 1..=tap (weights and batch-norm statistics);
    /// `None` unfreezes everything. Returns the resulting mask over backbone weights.
    pub fn freeze_through(&self, tap: Option<TapPoint>) -> FreezeMask {
        let level = tap.map_or(0, TapPoint::stage);
        self.frozen_through.store(level, Ordering::Relaxed);
        let prefixes: Vec<String> = if level == 0 {
            Vec::new()
        } else {
            (0..=level).map(|s| self.stage_prefix(s)).collect()
        };
        let mut mask = FreezeMask::default();
        for p in self.store.with_prefix(&self.prefix) {
            if p.kind() != crate::nn::ParamKind::Weight {
                continue;
            }
            let frozen = prefixes.iter().any(|pre| has_prefix(p.name(), pre));
            p.set_frozen(frozen);
            if frozen {
                mask.frozen.insert(p.name().to_string());
            } else {
                mask.trainable.insert(p.name().to_string());
            }
        }
        mask
    }

    pub fn frozen_through(&self) -> Option<TapPoint> {
        TapPoint::from_stage(self.frozen_through.load(Ordering::Relaxed))
    }

    fn batch_stats(&self, stage: usize, train: bool) -> bool {
        train && stage > self.frozen_through.load(Ordering::Relaxed)
    }

    /// Runs (B, 3, H, W) input through `tap`.
    pub fn forward_to_tap(&self, x: &Tensor, tap: TapPoint, train: bool) -> Result<Tensor> {
        if tap.stage() > self.stages.len() {
            return Err(Error::Shape(format!("backbone was built only through {}", self.last_tap())));
        }
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h.min(w) < tap.stride() {
            return Err(Error::Shape(format!("input {h}×{w} is smaller than the stride of {tap}")));
        }
        let mut h = self.stem.forward(x, self.batch_stats(0, train))?.relu()?;
        h = ops::max_pool2d(&h, 3, 2, 1)?;
        for (i, blocks) in self.stages.iter().take(tap.stage()).enumerate() {
            let bs = self.batch_stats(i + 1, train);
            for b in blocks {
                h = b.forward(&h, bs)?;
            }
        }
        Ok(h)
    }

    /// Global-average-pooled output of the last built stage, (B, C).
    pub fn forward_pooled(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_to_tap(x, self.last_tap(), train)?.mean((2, 3))?)
    }

    /// Single-image convenience wrapper returning (C, H, W).
    pub fn forward_image(&self, img: &ImageTensor, tap: TapPoint) -> Result<Tensor> {
        let x = crate::data::stack_images(&[img], self.store.dtype())?;
        Ok(self.forward_to_tap(&x, tap, false)?.squeeze(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn standard_r50_matches_the_hand_count() {
        // stem 9,536; layer1 215,808; layer2 1,219,584; layer3 7,098,368; layer4 14,964,736
        assert_eq!(count_params(&BackboneConfig::new(Family::R50, 1.0)), 23_508_032);
        assert_eq!(count_params(&BackboneConfig::new(Family::R18, 1.0)), 11_176_512);
    }

    #[test]
    fn built_count_matches_table_count() {
        for family in Family::ALL {
            let cfg = BackboneConfig::new(family, 0.0625);
            let store = ParamStore::new(DType::F32);
            Backbone::new(&ParamBuilder::new(&store, 0).pp("backbone"), cfg).unwrap();
            assert_eq!(store.weight_count(), count_params(&cfg), "{family}");
        }
    }

    #[test]
    fn tap_strides() {
        let cfg = BackboneConfig::new(Family::R50, 1.0);
        assert_eq!(feature_shape(&cfg, TapPoint::Layer2, 96).unwrap(), (512, 12, 12));
        assert_eq!(feature_shape(&cfg, TapPoint::Layer3, 96).unwrap(), (1024, 6, 6));
        assert_eq!(feature_shape(&BackboneConfig::new(Family::R18, 1.0), TapPoint::Layer4, 96).unwrap(), (512, 3, 3));
        assert_eq!(feature_shape(&cfg, TapPoint::Layer1, 4).unwrap().1, 1);
        assert!(feature_shape(&cfg, TapPoint::Layer4, 16).is_err());
    }
}
