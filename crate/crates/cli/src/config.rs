//! Run configuration: TOML file, command-line overrides, canonical hashing.

use std::path::Path;

use byol_vit::backbone::TapPoint;
use byol_vit::byol::ByolConfig;
use byol_vit::trainer::TrainHp;
use byol_vit::transformer::{HeadKind, Tokenizer, TransformerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Hex digits kept from the configuration digest in run-directory names.
pub const HASH_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// STL-10 when the binaries are found under the data root, synthetic otherwise.
    Auto,
    Stl10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub unlabeled: usize,
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            unlabeled: 1000,
            train: 500,
            test: 500,
            classes: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep the five alphabetically first STL-10 classes.
    pub five_class: bool,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Auto,
            five_class: true,
            labeled_fraction: 1.0,
            unlabeled_fraction: 1.0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFamily {
    Vit,
    Cvt,
    Cct,
}

/// What the transformer reads: the image itself or a backbone stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Raw,
    Layer1,
    Layer2,
    Layer3,
    Layer4,
}

impl Source {
    pub fn tap(self) -> Option<TapPoint> {
        match self {
            Source::Raw => None,
            Source::Layer1 => Some(TapPoint::Layer1),
            Source::Layer2 => Some(TapPoint::Layer2),
            Source::Layer3 => Some(TapPoint::Layer3),
            Source::Layer4 => Some(TapPoint::Layer4),
        }
    }

    pub fn as_str(self) -> &'static str {
        self.tap().map_or("raw", TapPoint::as_str)
    }
}

impl std::str::FromStr for Source {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "raw" => Ok(Source::Raw),
            "layer1" => Ok(Source::Layer1),
            "layer2" => Ok(Source::Layer2),
            "layer3" => Ok(Source::Layer3),
            "layer4" => Ok(Source::Layer4),
            _ => Err(CliError::Config(format!("unknown source `{s}` (raw, layer1..layer4)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: HeadFamily,
    pub source: Source,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    /// CCT tokenizer settings.
    pub kernel: usize,
    pub conv_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vit = TransformerConfig::vit(1);
        Self {
            kind: HeadFamily::Vit,
            source: Source::Layer2,
            patch: 1,
            depth: vit.depth,
            heads: vit.heads,
            dim: vit.dim,
            mlp_ratio: vit.mlp_ratio,
            kernel: 3,
            conv_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        let (head, tokenizer) = match self.kind {
            HeadFamily::Vit => (HeadKind::ClassToken, Tokenizer::Patchify { patch: self.patch }),
            HeadFamily::Cvt => (HeadKind::SeqPool, Tokenizer::Patchify { patch: self.patch }),
            HeadFamily::Cct => (
                HeadKind::SeqPool,
                Tokenizer::Conv {
                    layers: self.conv_layers,
                    kernel: self.kernel,
                },
            ),
        };
        TransformerConfig {
            depth: self.depth,
            heads: self.heads,
            dim: self.dim,
            mlp_ratio: self.mlp_ratio,
            head,
            tokenizer,
        }
    }
}

/// Stages frozen when fine-tuning a ConvNet: `none` or through a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    None,
    Layer1,
    Layer2,
    Layer3,
    Layer4,
}

impl Freeze {
    pub fn tap(self) -> Option<TapPoint> {
        match self {
            Freeze::None => None,
            Freeze::Layer1 => Some(TapPoint::Layer1),
            Freeze::Layer2 => Some(TapPoint::Layer2),
            Freeze::Layer3 => Some(TapPoint::Layer3),
            Freeze::Layer4 => Some(TapPoint::Layer4),
        }
    }
}

impl std::str::FromStr for Freeze {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "none" => Ok(Freeze::None),
            other => match other.parse::<Source>()? {
                Source::Raw => Err(CliError::Config("freeze takes none or layer1..layer4".into())),
                Source::Layer1 => Ok(Freeze::Layer1),
                Source::Layer2 => Ok(Freeze::Layer2),
                Source::Layer3 => Ok(Freeze::Layer3),
                Source::Layer4 => Ok(Freeze::Layer4),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvNetConfig {
    pub freeze: Freeze,
    /// Train from random initialization instead of a BYOL checkpoint.
    pub scratch: bool,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        Self {
            freeze: Freeze::Layer2,
            scratch: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    PatchSweep,
    LayerPatchGrid,
    MlpAblation,
    BatchSweep,
    WdSweep,
    AugSweep,
    BackboneSweep,
}

impl SweepKind {
    pub const ALL: [SweepKind; 7] = [
        SweepKind::PatchSweep,
        SweepKind::LayerPatchGrid,
        SweepKind::MlpAblation,
        SweepKind::BatchSweep,
        SweepKind::WdSweep,
        SweepKind::AugSweep,
        SweepKind::BackboneSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::PatchSweep => "patch_sweep",
            SweepKind::LayerPatchGrid => "layer_patch_grid",
            SweepKind::MlpAblation => "mlp_ablation",
            SweepKind::BatchSweep => "batch_sweep",
            SweepKind::WdSweep => "wd_sweep",
            SweepKind::AugSweep => "aug_sweep",
            SweepKind::BackboneSweep => "backbone_sweep",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        SweepKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = SweepKind::ALL.iter().map(|k| k.as_str()).collect();
            CliError::Config(format!("unknown sweep kind `{s}`; valid choices: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Axis values as strings; empty selects the kind's default axis.
    pub values: Vec<String>,
    /// BYOL epoch axis of `mlp_ablation`.
    pub epochs: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::LayerPatchGrid,
            values: Vec::new(),
            epochs: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a command needs besides the seed and file-system paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub byol: ByolConfig,
    pub model: ModelConfig,
    pub finetune: TrainHp,
    pub convnet: ConvNetConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            byol: ByolConfig::default(),
            model: ModelConfig::default(),
            finetune: TrainHp::default(),
            convnet: ConvNetConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Checks every section a command may touch.
    pub fn validate(&self) -> Result<(), CliError> {
        self.byol.validate()?;
        self.finetune.validate()?;
        self.model.transformer().validate()?;
        let d = &self.data;
        for (name, f) in [("labeled_fraction", d.labeled_fraction), ("unlabeled_fraction", d.unlabeled_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CliError::Config(format!("data.{name} must lie in (0, 1], got {f}")));
            }
        }
        if d.synthetic.classes < 2 {
            return Err(CliError::Config("data.synthetic.classes must be at least 2".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(CliError::Config("sweep.seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// Sorted-key JSON text of any serializable value.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    fn sort(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let mut entries: Vec<_> = map.into_iter().collect();
                entries.sort_by(|a, b| a.0.cmp(&b.0));
                serde_json::Value::Object(entries.into_iter().map(|(k, v)| (k, sort(v))).collect())
            }
            serde_json::Value::Array(items) => serde_json::Value::Array(items.into_iter().map(sort).collect()),
            other => other,
        }
    }
    let value = serde_json::to_value(value).expect("configuration serializes to JSON");
    sort(value).to_string()
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let digest = Sha256::digest(canonical_json(value).as_bytes());
    hex::encode(digest)[..HASH_LEN].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[byol]\nbatch = 16\n").unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
    }

    #[test]
    fn canonical_json_ignores_key_order() {
        let a: toml::Value = toml::from_str("x = 1\ny = { b = 2, a = 3 }").unwrap();
        let b: toml::Value = toml::from_str("y = { a = 3, b = 2 }\nx = 1").unwrap();
        assert_eq!(canonical_json(&a), canonical_json(&b));
        assert_eq!(config_hash(&a), config_hash(&b));
    }
}
