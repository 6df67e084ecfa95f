//! BYOL pretraining: projector/predictor heads, EMA target network and the
//! symmetrized regression objective.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugSpec};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{stack_images, Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::metrics::{MetricsHistory, MetricsRecord};
use crate::nn::layers::{leaky_relu, BatchNorm, Linear};
use crate::nn::{AdamW, AdamWConfig, Checkpoint, ParamBuilder, ParamKind, ParamStore};
use crate::rng;

/// Stabilizer added to squared norms before the square root.
pub const NORM_EPS: f64 = 1e-12;
pub const CHECKPOINT_KIND: &str = "byol";

// stream tags for seed derivation
const INIT: u64 = 0x1;
const SHUFFLE: u64 = 0x2;
const VIEWS: u64 = 0x3;

/// `x` for non-negative input, `alpha·x` otherwise.
pub fn leaky_rect(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Linear → batch norm → leaky rectifier → linear.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    pub alpha: f64,
}

impl MlpHead {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_hidden: usize, d_out: usize, alpha: f64) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("leaky slope must be non-negative, got {alpha}")));
        }
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), d_in, d_hidden, true)?,
            bn: BatchNorm::new(&pb.pp("bn"), d_hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), d_hidden, d_out, true)?,
            alpha,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn.forward(&self.fc1.forward(x)?, train)?;
        self.fc2.forward(&leaky_relu(&h, self.alpha)?)
    }
}

/// Per-row `2 − 2·cos(q, z)` with the target side detached; shape (B,).
pub fn regression_loss(q: &Tensor, z: &Tensor) -> Result<Tensor> {
    let z = z.detach();
    let dot = (q * &z)?.sum(D::Minus1)?;
    let nq = (q.sqr()?.sum(D::Minus1)? + NORM_EPS)?.sqrt()?;
    let nz = (z.sqr()?.sum(D::Minus1)? + NORM_EPS)?.sqrt()?;
    let cos = (dot / (nq * nz)?)?;
    Ok(((cos * -2.0)? + 2.0)?)
}

/// Scalar reference form of [`regression_loss`] for one pair of vectors.
pub fn regression_loss_vec(q: &[f64], z: &[f64]) -> f64 {
    let dot: f64 = q.iter().zip(z).map(|(a, b)| a * b).sum();
    let nq = (q.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt();
    let nz = (z.iter().map(|a| a * a).sum::<f64>() + NORM_EPS).sqrt();
    2.0 - 2.0 * dot / (nq * nz)
}

/// θ' ← τ·θ' + (1 − τ)·θ over every weight of `target`, matched by name in `online`.
pub fn ema_update(online: &ParamStore, target: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau must lie in [0, 1], got {tau}")));
    }
    for t in target.weights() {
        let o = online
            .get(t.name())
            .ok_or_else(|| Error::StructureMismatch(format!("online network lacks `{}`", t.name())))?;
        let (tv, ov) = (t.var().as_tensor(), o.var().as_tensor());
        if tv.shape() != ov.shape() {
            return Err(Error::StructureMismatch(format!(
                "`{}`: target {:?} vs online {:?}",
                t.name(),
                tv.shape(),
                ov.shape()
            )));
        }
        if tau == 1.0 {
            continue;
        }
        let next = if tau == 0.0 {
            ov.copy()?
        } else {
            ((tv * tau)? + (ov * (1.0 - tau))?)?
        };
        t.set(&next.detach())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSchedule {
    Constant,
    /// τ_k = 1 − (1 − τ)·(cos(πk/K) + 1)/2 over K total steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByolConfig {
    pub backbone: BackboneConfig,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Negative-side slope of the head rectifier; 0 gives the plain rectifier.
    pub alpha: f64,
    pub tau: f64,
    pub tau_schedule: TauSchedule,
    pub aug: String,
    /// Overrides `aug` when present.
    #[serde(default)]
    pub aug_spec: Option<AugSpec>,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Checkpoint every this many epochs (0 = only at the end).
    pub save_every: usize,
    #[serde(default)]
    pub double_precision: bool,
}

impl Default for ByolConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            proj_hidden: 512,
            proj_out: 64,
            alpha: 0.01,
            tau: 0.99,
            tau_schedule: TauSchedule::Constant,
            aug: "data_aug_5".into(),
            aug_spec: None,
            image_size: 96,
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 5e-2,
            save_every: 10,
            double_precision: false,
        }
    }
}

impl ByolConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.alpha < 0.0 {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.proj_hidden == 0 || self.proj_out == 0 {
            return bad("projection sizes must be positive".into());
        }
        self.resolve_aug()?.validate()
    }

    pub fn resolve_aug(&self) -> Result<AugSpec> {
        match &self.aug_spec {
            Some(spec) => Ok(spec.clone()),
            None => augment::build_pipeline_sized(&self.aug, self.image_size),
        }
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Backbone plus projector, and a predictor on the online side.
#[derive(Debug, Clone)]
pub struct ByolNet {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub projector: MlpHead,
    pub predictor: Option<MlpHead>,
}

impl ByolNet {
    fn build(config: &ByolConfig, seed: u64, with_predictor: bool) -> Result<Self> {
        let store = ParamStore::new(config.dtype());
        let pb = ParamBuilder::new(&store, seed);
        let backbone = Backbone::new(&pb.pp("backbone"), config.backbone)?;
        let c = backbone.out_channels();
        let projector = MlpHead::new(&pb.pp("projector"), c, config.proj_hidden, config.proj_out, config.alpha)?;
        let predictor = with_predictor
            .then(|| MlpHead::new(&pb.pp("predictor"), config.proj_out, config.proj_hidden, config.proj_out, config.alpha))
            .transpose()?;
        Ok(Self {
            store,
            backbone,
            projector,
            predictor,
        })
    }

    /// Projection of a (B, 3, H, W) batch, then the prediction if present.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.backbone.forward_pooled(x, train)?;
        let z = self.projector.forward(&h, train)?;
        match &self.predictor {
            Some(p) => p.forward(&z, train),
            None => Ok(z),
        }
    }
}

/// Online and target networks with their optimizer and progress counters.
pub struct ByolState {
    pub config: ByolConfig,
    pub seed: u64,
    pub online: ByolNet,
    pub target: ByolNet,
    pub optimizer: AdamW,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Loss of every optimizer step so far.
    pub step_losses: Vec<f64>,
    pub history: MetricsHistory,
}

impl std::fmt::Debug for ByolState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ByolState")
            .field("seed", &self.seed)
            .field("step", &self.step)
            .field("epoch", &self.epoch)
            .finish()
    }
}

impl ByolState {
    pub fn new(config: ByolConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = rng::derive_seed(seed, &[INIT]);
        let online = ByolNet::build(&config, init, true)?;
        let target = ByolNet::build(&config, init, false)?;
        target.store.copy_from(&online.store, "")?;
        target.store.set_frozen_all(true);
        let optimizer = AdamW::new(online.store.all(), config.adamw());
        Ok(Self {
            config,
            seed,
            online,
            target,
            optimizer,
            step: 0,
            epoch: 0,
            step_losses: Vec::new(),
            history: MetricsHistory::new(),
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        batches(n, self.config.batch_size)
    }

    /// EMA coefficient for optimizer step `k` of `total`.
    pub fn tau_at(&self, k: u64, total: u64) -> f64 {
        match self.config.tau_schedule {
            TauSchedule::Constant => self.config.tau,
            TauSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { k as f64 / total as f64 };
                1.0 - (1.0 - self.config.tau) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
            }
        }
    }

    /// Symmetrized loss, averaged over the batch, for pre-augmented view batches.
    pub fn loss(&self, v1: &Tensor, v2: &Tensor) -> Result<Tensor> {
        let q1 = self.online.forward(v1, true)?;
        let q2 = self.online.forward(v2, true)?;
        let z1 = self.target.forward(v1, true)?.detach();
        let z2 = self.target.forward(v2, true)?.detach();
        let per_sample = (regression_loss(&q1, &z2)? + regression_loss(&q2, &z1)?)?;
        Ok(per_sample.mean_all()?)
    }

    /// One optimizer step followed by the EMA update; returns the loss.
    pub fn step_on_views(&mut self, v1: &Tensor, v2: &Tensor, tau: f64, at: (usize, usize)) -> Result<f64> {
        let loss = self.loss(v1, v2)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: value,
                epoch: at.0,
                batch: at.1,
                seed: self.seed,
            });
        }
        let grads = loss.backward()?;
        self.optimizer.step(&grads)?;
        ema_update(&self.online.store, &self.target.store, tau)?;
        self.step += 1;
        self.step_losses.push(value);
        Ok(value)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let (moments, steps) = self.optimizer.export();
        let meta = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "step": self.step,
            "epoch": self.epoch,
            "step_losses": self.step_losses,
            "history": self.history,
            "optimizer_steps": steps,
        });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config_hash, meta);
        ck.extend("online/", self.online.store.snapshot()?);
        ck.extend("target/", self.target.store.snapshot()?);
        ck.extend("optim/", moments);
        Ok(ck)
    }

    /// Rebuilds a state from a checkpoint; the stored configuration wins.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ByolConfig = meta_field(ck, "config")?;
        let seed: u64 = meta_field(ck, "seed")?;
        let mut state = ByolState::new(config, seed)?;
        let online = ck.with_prefix("online/");
        let target = ck.with_prefix("target/");
        check_names(&state.online.store, &online)?;
        check_names(&state.target.store, &target)?;
        state.online.store.restore(online.iter().map(|(n, t)| (n.as_str(), t)))?;
        state.target.store.restore(target.iter().map(|(n, t)| (n.as_str(), t)))?;
        let steps = meta_field(ck, "optimizer_steps")?;
        state.optimizer.import(&ck.with_prefix("optim/"), &steps)?;
        state.step = meta_field(ck, "step")?;
        state.epoch = meta_field(ck, "epoch")?;
        state.step_losses = meta_field(ck, "step_losses")?;
        state.history = meta_field(ck, "history")?;
        Ok(state)
    }

    /// Digest of the online backbone weights and statistics.
    pub fn backbone_digest(&self) -> Result<String> {
        self.online.store.digest(|p| p.name().starts_with("backbone."))
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .meta
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` in metadata")))?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("`{key}`: {e}")))
}

fn check_names(store: &ParamStore, values: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
    let names = store.names();
    if names.len() != values.len() || names.iter().any(|n| !values.contains_key(n)) {
        return Err(Error::StructureMismatch(format!(
            "checkpoint holds {} tensors, model expects {}",
            values.len(),
            names.len()
        )));
    }
    Ok(())
}

/// Full batches only when the remainder would be a single sample.
fn batches(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    if n % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE, epoch as u64]));
    order
}

/// Augments `images` into two view batches with per-sample streams keyed by `ids`.
pub fn make_views(
    spec: &AugSpec,
    images: &[&ImageTensor],
    ids: &[u64],
    seed: u64,
    epoch: usize,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let pairs = augment::two_views_batch(spec, images, ids, seed, &[VIEWS, epoch as u64]);
    let a: Vec<&ImageTensor> = pairs.iter().map(|p| &p.0).collect();
    let b: Vec<&ImageTensor> = pairs.iter().map(|p| &p.1).collect();
    Ok((stack_images(&a, dtype)?, stack_images(&b, dtype)?))
}

/// One BYOL step on a raw image batch: draw two views, update the online
/// network, then move the target towards it.
pub fn byol_step(
    state: &mut ByolState,
    images: &[&ImageTensor],
    ids: &[u64],
    aug: &AugSpec,
    tau: f64,
    (epoch, batch): (usize, usize),
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (v1, v2) = make_views(aug, images, ids, state.seed, epoch, state.config.dtype())?;
    state.step_on_views(&v1, &v2, tau, (epoch, batch))
}

/// Where and how often [`pretrain`] writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
    /// Stop after this many epochs in this call (for interrupted-run tests).
    pub stop_after: Option<usize>,
}

impl CheckpointPolicy {
    pub fn latest_path(dir: &Path) -> PathBuf {
        dir.join("byol_latest.ckpt")
    }
}

/// Trains `state` until `state.config.epochs`, continuing from `state.epoch`.
pub fn train(state: &mut ByolState, data: &Dataset, policy: &CheckpointPolicy) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let aug = state.config.resolve_aug()?;
    let n = data.len();
    let bs = state.config.batch_size;
    let per_epoch = state.steps_per_epoch(n) as u64;
    let total = per_epoch * state.config.epochs as u64;
    let mut ran = 0;
    while state.epoch < state.config.epochs {
        if policy.stop_after.is_some_and(|s| ran >= s) {
            break;
        }
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let order = epoch_order(state.seed, epoch, n);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &data.images()[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let (v1, v2) = make_views(&aug, &images, &ids, state.seed, epoch, state.config.dtype())?;
            let tau = state.tau_at(state.step, total);
            sum += state.step_on_views(&v1, &v2, tau, (epoch, b))?;
            count += 1;
        }
        state.epoch = epoch;
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        log::info!("byol epoch {epoch}: loss {mean:.5}");
        state.history.push(MetricsRecord {
            epoch,
            split: "pretrain".into(),
            top1: None,
            loss: mean,
            lr: state.config.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        })?;
        ran += 1;
        if let Some(dir) = &policy.dir {
            let every = state.config.save_every;
            if (every > 0 && epoch % every == 0) || epoch == state.config.epochs {
                state.to_checkpoint(&policy.config_hash)?.save(&CheckpointPolicy::latest_path(dir))?;
            }
        }
    }
    Ok(())
}

/// Fresh state trained on `data` for `config.epochs` epochs.
pub fn pretrain(data: &Dataset, config: ByolConfig, seed: u64) -> Result<(ByolState, MetricsHistory)> {
    pretrain_with(data, config, seed, &CheckpointPolicy::default())
}

pub fn pretrain_with(data: &Dataset, config: ByolConfig, seed: u64, policy: &CheckpointPolicy) -> Result<(ByolState, MetricsHistory)> {
    let mut state = ByolState::new(config, seed)?;
    train(&mut state, data, policy)?;
    let history = state.history.clone();
    Ok((state, history))
}

/// Continues from the latest checkpoint in `policy.dir`, or starts fresh.
pub fn resume_or_pretrain(data: &Dataset, config: ByolConfig, seed: u64, policy: &CheckpointPolicy) -> Result<(ByolState, MetricsHistory)> {
    let mut state = match &policy.dir {
        Some(dir) if CheckpointPolicy::latest_path(dir).exists() => {
            let ck = Checkpoint::load_expecting(&CheckpointPolicy::latest_path(dir), CHECKPOINT_KIND, &policy.config_hash)?;
            let s = ByolState::from_checkpoint(&ck)?;
            if s.config != config || s.seed != seed {
                return Err(Error::Checkpoint("stored configuration or seed differs from the requested run".into()));
            }
            s
        }
        _ => ByolState::new(config, seed)?,
    };
    train(&mut state, data, policy)?;
    let history = state.history.clone();
    Ok((state, history))
}

/// Names of target-network tensors that are buffers (not EMA-averaged).
pub fn target_buffers(state: &ByolState) -> Vec<String> {
    state
        .target
        .store
        .all()
        .iter()
        .filter(|p| p.kind() == ParamKind::Buffer)
        .map(|p| p.name().to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn scalar_rectifier() {
        assert_eq!(leaky_rect(3.0, 0.01), 3.0);
        assert!((leaky_rect(-2.0, 0.01) + 0.02).abs() < 1e-15);
        assert_eq!(leaky_rect(-2.0, 0.0), 0.0);
    }

    #[test]
    fn loss_special_cases() {
        let q = Tensor::new(&[[1.0f64, 2.0], [1.0, 2.0], [1.0, 0.0]], &Device::Cpu).unwrap();
        let z = Tensor::new(&[[1.0f64, 2.0], [-1.0, -2.0], [0.0, 3.0]], &Device::Cpu).unwrap();
        let l = regression_loss(&q, &z).unwrap().to_vec1::<f64>().unwrap();
        assert!(l[0].abs() < 1e-12);
        assert!((l[1] - 4.0).abs() < 1e-12);
        assert!((l[2] - 2.0).abs() < 1e-12);
        assert!((regression_loss_vec(&[1.0, 0.0], &[0.0, 3.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ema_scalar_case() {
        let a = ParamStore::new(DType::F64);
        let b = ParamStore::new(DType::F64);
        ParamBuilder::new(&a, 0).weight("w", &[2], crate::nn::Init::Const(2.0)).unwrap();
        ParamBuilder::new(&b, 0).weight("w", &[2], crate::nn::Init::Zeros).unwrap();
        ema_update(&a, &b, 0.5).unwrap();
        assert_eq!(b.get("w").unwrap().to_vec().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = ByolConfig {
            tau_schedule: TauSchedule::Cosine,
            backbone: BackboneConfig::new(crate::backbone::Family::R18, 0.0625),
            proj_hidden: 8,
            proj_out: 4,
            image_size: 32,
            ..Default::default()
        };
        let s = ByolState::new(cfg, 0).unwrap();
        assert!((s.tau_at(0, 10) - 0.99).abs() < 1e-12);
        assert!((s.tau_at(10, 10) - 1.0).abs() < 1e-12);
    }
}
