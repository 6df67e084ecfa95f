//! Supervised training of hybrid (frozen extractor + transformer) models and of
//! partially frozen ConvNet classifiers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugSpec};
use crate::backbone::{feature_shape, Backbone, BackboneConfig, TapPoint};
use crate::byol::ByolState;
use crate::data::{stack_images, Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics::{MetricsHistory, MetricsRecord};
use crate::nn::layers::{argmax_rows, cross_entropy, Linear};
use crate::nn::{AdamW, AdamWConfig, Checkpoint, FreezeMask, ParamBuilder, ParamStore};
use crate::rng;
use crate::transformer::{TransformerConfig, TransformerModel, Tokenizer};

pub const CHECKPOINT_KIND: &str = "classifier";
const EVAL_BATCH: usize = 128;

// stream tags for seed derivation
const INIT: u64 = 0x11;
const SHUFFLE: u64 = 0x12;
const AUG: u64 = 0x13;
const SPLIT: u64 = 0x14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHp {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub aug: String,
    #[serde(default)]
    pub aug_spec: Option<AugSpec>,
    pub seed: u64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Stratified fraction of the labeled data held out for model selection.
    pub val_fraction: f64,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
}

impl Default for TrainHp {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-2,
            batch_size: 128,
            epochs: 100,
            aug: "aug_3".into(),
            aug_spec: None,
            seed: 0,
            label_smoothing: 0.0,
            val_fraction: 0.1,
            lr_decay: None,
        }
    }
}

impl TrainHp {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.gamma > 0.0) {
                return bad("lr_decay needs every > 0 and gamma > 0".into());
            }
        }
        if let Some(spec) = &self.aug_spec {
            spec.validate()?;
        } else if !augment::PIPELINE_NAMES.contains(&self.aug.as_str()) {
            return Err(Error::UnknownPipeline {
                name: self.aug.clone(),
                valid: augment::PIPELINE_NAMES.join(", "),
            });
        }
        Ok(())
    }

    pub fn resolve_aug(&self, image_size: usize) -> Result<AugSpec> {
        match &self.aug_spec {
            Some(spec) => Ok(spec.clone()),
            None => augment::build_pipeline_sized(&self.aug, image_size),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(StepDecay { every, gamma }) => self.lr * gamma.powi(((epoch - 1) / every) as i32),
            None => self.lr,
        }
    }
}

/// A model mapping (B, 3, H, W) images to class logits.
pub trait Classifier {
    fn store(&self) -> &ParamStore;
    fn n_classes(&self) -> usize;
    /// Side length of the square input images.
    fn image_size(&self) -> usize;
    fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor>;
}

/// Image-side front end of a [`HybridModel`].
#[derive(Debug, Clone)]
pub enum Frontend {
    /// Transformer reads the image directly.
    Raw,
    /// Frozen backbone stages through `tap`.
    Extractor { backbone: Backbone, tap: TapPoint },
}

/// Optional frozen extractor feeding a transformer classifier.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub store: ParamStore,
    pub frontend: Frontend,
    pub head: TransformerModel,
    image_size: usize,
}

fn check_patch(head: &TransformerConfig, (_, h, w): (usize, usize, usize)) -> Result<()> {
    if let Tokenizer::Patchify { patch } = head.tokenizer {
        if patch > h.max(w) {
            return Err(Error::Shape(format!("patch {patch} exceeds the {h}×{w} input")));
        }
    }
    Ok(())
}

impl HybridModel {
    /// Transformer over raw images, trained from scratch.
    pub fn scratch(head: TransformerConfig, image_size: usize, n_classes: usize, seed: u64, dtype: DType) -> Result<Self> {
        let shape = (3, image_size, image_size);
        check_patch(&head, shape)?;
        let store = ParamStore::new(dtype);
        let pb = ParamBuilder::new(&store, rng::derive_seed(seed, &[INIT]));
        let head = TransformerModel::new(&pb.pp("head"), head, shape, n_classes)?;
        Ok(Self {
            store,
            frontend: Frontend::Raw,
            head,
            image_size,
        })
    }

    /// Frozen copy of the online backbone through `tap` plus a fresh transformer head.
    pub fn attach_frontend(byol: &ByolState, tap: TapPoint, head: TransformerConfig, n_classes: usize, seed: u64) -> Result<Self> {
        let image_size = byol.config.image_size;
        let store = ParamStore::new(byol.online.store.dtype());
        let pb = ParamBuilder::new(&store, rng::derive_seed(seed, &[INIT]));
        let backbone = Backbone::truncated(&pb.pp("backbone"), byol.config.backbone, tap)?;
        store.copy_from(&byol.online.store, "backbone")?;
        backbone.freeze_through(Some(tap));
        let shape = feature_shape(&byol.config.backbone, tap, image_size)?;
        check_patch(&head, shape)?;
        let head = TransformerModel::new(&pb.pp("head"), head, shape, n_classes)?;
        Ok(Self {
            store,
            frontend: Frontend::Extractor { backbone, tap },
            head,
            image_size,
        })
    }

    pub fn tokens_per_image(&self) -> usize {
        self.head.token_count()
    }

    /// Input geometry the transformer sees: the image or the tapped map.
    pub fn head_input_shape(&self) -> (usize, usize, usize) {
        self.head.input_shape
    }

    /// Digest of the extractor weights and statistics (empty for raw inputs).
    pub fn extractor_digest(&self) -> Result<String> {
        self.store.digest(|p| p.name().starts_with("backbone."))
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        match &self.frontend {
            Frontend::Raw => Ok(x.clone()),
            Frontend::Extractor { backbone, tap } => Ok(backbone.forward_to_tap(x, *tap, false)?.detach()),
        }
    }
}

impl Classifier for HybridModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn logits(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }
}

/// Residual backbone, global average pooling and a linear classifier.
#[derive(Debug, Clone)]
pub struct ConvNetClassifier {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fc: Linear,
    pub mask: FreezeMask,
    image_size: usize,
    n_classes: usize,
}

impl ConvNetClassifier {
    pub fn scratch(config: BackboneConfig, image_size: usize, n_classes: usize, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(dtype);
        let pb = ParamBuilder::new(&store, rng::derive_seed(seed, &[INIT]));
        let backbone = Backbone::new(&pb.pp("backbone"), config)?;
        let fc = Linear::new(&pb.pp("fc"), backbone.out_channels(), n_classes, true)?;
        let mask = backbone.freeze_through(None);
        Ok(Self {
            store,
            backbone,
            fc,
            mask,
            image_size,
            n_classes,
        })
    }

    /// Starts from the online BYOL backbone and freezes through `freeze`.
    pub fn from_byol(byol: &ByolState, freeze: Option<TapPoint>, n_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::scratch(byol.config.backbone, byol.config.image_size, n_classes, seed, byol.online.store.dtype())?;
        model.store.copy_from(&byol.online.store, "backbone")?;
        model.mask = model.backbone.freeze_through(freeze);
        Ok(model)
    }

    pub fn freeze_through(&mut self, tap: Option<TapPoint>) -> &FreezeMask {
        self.mask = self.backbone.freeze_through(tap);
        &self.mask
    }

    /// Digest of the frozen weights plus every buffer in frozen stages.
    pub fn frozen_digest(&self) -> Result<String> {
        let frozen_prefixes: Vec<String> = match self.backbone.frozen_through() {
            None => Vec::new(),
            Some(tap) => std::iter::once("backbone.stem".to_string())
                .chain((1..=tap.stage()).map(|s| format!("backbone.layer{s}")))
                .collect(),
        };
        self.store.digest(|p| {
            frozen_prefixes
                .iter()
                .any(|pre| crate::nn::params::has_prefix(p.name(), pre))
        })
    }
}

impl Classifier for ConvNetClassifier {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.fc.forward(&self.backbone.forward_pooled(x, train)?)
    }
}

/// Top-1 accuracy and mean cross-entropy; ties in the logits go to the lowest class.
pub fn evaluate(model: &dyn Classifier, data: &Dataset) -> Result<(f64, f64)> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidConfig("evaluation needs a labeled dataset".into()))?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dtype = model.store().dtype();
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    for (chunk, ys) in data.images().chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let logits = model.logits(&stack_images(&refs, dtype)?, false)?;
        let loss = cross_entropy(&logits, ys, 0.0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        loss_sum += loss * ys.len() as f64;
        correct += argmax_rows(&logits)?.iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    Ok((correct as f64 / data.len() as f64, loss_sum / data.len() as f64))
}

/// Outcome of a supervised run.
#[derive(Debug, Clone, Default)]
pub struct FinetuneReport {
    pub history: MetricsHistory,
    pub step_losses: Vec<f64>,
    /// Epoch and validation top-1 of the retained checkpoint.
    pub best: Option<(usize, f64)>,
    /// Parameter values at the best validation epoch.
    pub best_snapshot: Option<Vec<(String, Tensor)>>,
}

impl FinetuneReport {
    /// Restores the best-validation parameters into `model`, if any were retained.
    pub fn restore_best(&self, model: &dyn Classifier) -> Result<()> {
        if let Some(snap) = &self.best_snapshot {
            model.store().restore(snap.iter().map(|(n, t)| (n.as_str(), t)))?;
        }
        Ok(())
    }
}

/// Where [`finetune_with`] keeps checkpoints, and an optional early stop for
/// interrupted-run tests.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
    pub stop_after: Option<usize>,
}

impl RunControl {
    pub fn latest_path(dir: &Path) -> PathBuf {
        dir.join("finetune_latest.ckpt")
    }

    pub fn best_path(dir: &Path) -> PathBuf {
        dir.join("finetune_best.ckpt")
    }
}

/// Trains `model` on `data` with cross-entropy; see [`finetune_with`].
pub fn finetune(model: &dyn Classifier, data: &Dataset, hp: &TrainHp) -> Result<FinetuneReport> {
    finetune_with(model, data, hp, &RunControl::default())
}

struct Progress {
    epoch: usize,
    report: FinetuneReport,
}

fn progress_checkpoint(model: &dyn Classifier, opt: &AdamW, p: &Progress, hash: &str) -> Result<Checkpoint> {
    let (moments, steps) = opt.export();
    let meta = serde_json::json!({
        "epoch": p.epoch,
        "history": p.report.history,
        "step_losses": p.report.step_losses,
        "best": p.report.best,
        "optimizer_steps": steps,
    });
    let mut ck = Checkpoint::new(CHECKPOINT_KIND, hash, meta);
    ck.extend("model/", model.store().snapshot()?);
    ck.extend("optim/", moments);
    if let Some(best) = &p.report.best_snapshot {
        ck.extend("best/", best.iter().map(|(n, t)| (n.clone(), t.clone())));
    }
    Ok(ck)
}

fn meta<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .meta
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` in metadata")))?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("`{key}`: {e}")))
}

fn restore_progress(model: &dyn Classifier, opt: &mut AdamW, ck: &Checkpoint) -> Result<Progress> {
    let values = ck.with_prefix("model/");
    let names = model.store().names();
    if names.len() != values.len() || names.iter().any(|n| !values.contains_key(n)) {
        return Err(Error::StructureMismatch("checkpoint does not match the model".into()));
    }
    model.store().restore(values.iter().map(|(n, t)| (n.as_str(), t)))?;
    let steps: BTreeMap<String, u64> = meta(ck, "optimizer_steps")?;
    opt.import(&ck.with_prefix("optim/"), &steps)?;
    let best_values = ck.with_prefix("best/");
    Ok(Progress {
        epoch: meta(ck, "epoch")?,
        report: FinetuneReport {
            history: meta(ck, "history")?,
            step_losses: meta(ck, "step_losses")?,
            best: meta(ck, "best")?,
            best_snapshot: (!best_values.is_empty()).then(|| best_values.into_iter().collect()),
        },
    })
}

/// Saves `model`'s parameters in the checkpoint container.
pub fn save_model(model: &dyn Classifier, path: &Path, config_hash: &str, meta: serde_json::Value) -> Result<()> {
    let mut ck = Checkpoint::new(CHECKPOINT_KIND, config_hash, meta);
    ck.extend("model/", model.store().snapshot()?);
    ck.save(path)
}

/// Loads parameters saved by [`save_model`] into a model of the same structure.
pub fn load_model(model: &dyn Classifier, path: &Path, config_hash: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::load_expecting(path, CHECKPOINT_KIND, config_hash)?;
    let values = ck.with_prefix("model/");
    let names = model.store().names();
    if names.len() != values.len() || names.iter().any(|n| !values.contains_key(n)) {
        return Err(Error::StructureMismatch("checkpoint does not match the model".into()));
    }
    model.store().restore(values.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(ck)
}

/// Cross-entropy training with per-epoch train and validation metrics. The
/// parameters with the best validation top-1 (strict improvement) are retained
/// in the report; the model itself ends with its final parameters.
pub fn finetune_with(model: &dyn Classifier, data: &Dataset, hp: &TrainHp, ctl: &RunControl) -> Result<FinetuneReport> {
    hp.validate()?;
    let labels_all = data
        .labels()
        .ok_or_else(|| Error::InvalidConfig("fine-tuning needs a labeled dataset".into()))?;
    if data.is_empty() || labels_all.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.n_classes() > model.n_classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model predicts {}",
            data.n_classes(),
            model.n_classes()
        )));
    }
    if hp.epochs == 0 {
        return Ok(FinetuneReport::default());
    }
    let (train, val) = if hp.val_fraction > 0.0 {
        let (t, v) = data.stratified_split(hp.val_fraction, rng::derive_seed(hp.seed, &[SPLIT]))?;
        (t, (!v.is_empty()).then_some(v))
    } else {
        (data.clone(), None)
    };
    let labels = train.labels().expect("labeled").to_vec();
    let aug = hp.resolve_aug(model.image_size())?;
    let dtype = model.store().dtype();
    let mut opt = AdamW::new(
        model.store().all(),
        AdamWConfig {
            lr: hp.lr,
            weight_decay: hp.weight_decay,
            ..Default::default()
        },
    );
    let mut progress = match &ctl.dir {
        Some(dir) if RunControl::latest_path(dir).exists() => {
            let ck = Checkpoint::load_expecting(&RunControl::latest_path(dir), CHECKPOINT_KIND, &ctl.config_hash)?;
            restore_progress(model, &mut opt, &ck)?
        }
        _ => Progress {
            epoch: 0,
            report: FinetuneReport::default(),
        },
    };
    let mut ran = 0;
    while progress.epoch < hp.epochs {
        if ctl.stop_after.is_some_and(|s| ran >= s) {
            break;
        }
        let epoch = progress.epoch + 1;
        let started = Instant::now();
        let lr = hp.lr_at(epoch);
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng::stream(hp.seed, &[SHUFFLE, epoch as u64]));
        }
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            if chunk.len() < 2 && order.len() >= 2 {
                continue;
            }
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| &train.images()[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let views = augment::apply_batch(&aug, &imgs, &ids, hp.seed, &[AUG, epoch as u64]);
            let refs: Vec<&ImageTensor> = views.iter().collect();
            let logits = model.logits(&stack_images(&refs, dtype)?, true)?;
            let loss = cross_entropy(&logits, &ys, hp.label_smoothing)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: value,
                    epoch,
                    batch: b,
                    seed: hp.seed,
                });
            }
            correct += argmax_rows(&logits)?.iter().zip(&ys).filter(|(p, y)| p == y).count();
            opt.step(&loss.backward()?)?;
            progress.report.step_losses.push(value);
            loss_sum += value * ys.len() as f64;
            seen += ys.len();
        }
        let wall = started.elapsed().as_secs_f64();
        let report = &mut progress.report;
        report.history.push(MetricsRecord {
            epoch,
            split: "train".into(),
            top1: Some(correct as f64 / seen.max(1) as f64),
            loss: loss_sum / seen.max(1) as f64,
            lr,
            wall_seconds: wall,
        })?;
        if let Some(val) = &val {
            let (top1, loss) = evaluate(model, val)?;
            report.history.push(MetricsRecord {
                epoch,
                split: "val".into(),
                top1: Some(top1),
                loss,
                lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            })?;
            if report.best.is_none_or(|(_, b)| top1 > b) {
                report.best = Some((epoch, top1));
                report.best_snapshot = Some(model.store().snapshot()?);
                if let Some(dir) = &ctl.dir {
                    save_model(model, &RunControl::best_path(dir), &ctl.config_hash, serde_json::json!({ "epoch": epoch, "val_top1": top1 }))?;
                }
            }
        }
        log::info!("finetune epoch {epoch}: train loss {:.4}", loss_sum / seen.max(1) as f64);
        progress.epoch = epoch;
        ran += 1;
        if let Some(dir) = &ctl.dir {
            progress_checkpoint(model, &opt, &progress, &ctl.config_hash)?.save(&RunControl::latest_path(dir))?;
        }
    }
    Ok(progress.report)
}

/// Fine-tunes a ConvNet initialized from `byol` (or from scratch when `None`),
/// with the stem and stages through `freeze` frozen.
pub fn finetune_supervised_convnet(
    byol: Option<&ByolState>,
    scratch_config: BackboneConfig,
    image_size: usize,
    freeze: Option<TapPoint>,
    data: &Dataset,
    hp: &TrainHp,
) -> Result<(ConvNetClassifier, FinetuneReport)> {
    let n = data.n_classes();
    let mut model = match byol {
        Some(b) => ConvNetClassifier::from_byol(b, freeze, n, hp.seed)?,
        None => ConvNetClassifier::scratch(scratch_config, image_size, n, hp.seed, DType::F32)?,
    };
    model.freeze_through(freeze);
    let report = finetune(&model, data, hp)?;
    Ok((model, report))
}
