//! Single runs: BYOL pretraining, hybrid fine-tuning, ConvNet fine-tuning.
//!
//! Every run lives in `<out>/<command>-<hash>-seed<seed>`, where the hash covers
//! the configuration sections that influence the result. A fine-tune run is
//! complete once its `metrics.csv` carries a `test` row; such runs are never
//! retrained.

use std::path::{Path, PathBuf};
use std::time::Instant;

use byol_vit::byol::{self, ByolState, CheckpointPolicy};
use byol_vit::data::{Dataset, Split};
use byol_vit::metrics::{MetricsHistory, MetricsRecord};
use byol_vit::nn::Checkpoint;
use byol_vit::trainer::{self, Classifier, ConvNetClassifier, HybridModel, RunControl};
use candle_core::DType;
use serde::Serialize;

use crate::config::{config_hash, RunConfig};
use crate::data;
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const TEST_SPLIT: &str = "test";

/// File-system context shared by all commands.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub out: PathBuf,
    pub data_root: Option<PathBuf>,
}

/// Result of a finished fine-tune run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub dir: PathBuf,
    pub top1: f64,
    pub loss: f64,
    /// Summed per-epoch wall time of the run.
    pub seconds: f64,
    /// True when the run was already complete and nothing was trained.
    pub reused: bool,
}

/// Where a BYOL backbone comes from.
#[derive(Debug, Clone)]
pub enum ByolSource {
    /// Pretrain (or resume) with the run configuration.
    Pretrain,
    /// A checkpoint written by `pretrain`.
    File(PathBuf),
}

pub fn run_dir(ctx: &Ctx, command: &str, hash: &str, seed: u64) -> PathBuf {
    ctx.out.join(format!("{command}-{hash}-seed{seed}"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let resolved = RunConfig { seed, ..cfg.clone() };
    write_atomic(&dir.join(CONFIG_FILE), resolved.to_toml().as_bytes())
}

fn save_metrics(dir: &Path, history: &MetricsHistory) -> Result<(), CliError> {
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    write_atomic(&dir.join(METRICS_FILE), &buf)
}

/// Reads a completed run back from its metrics file.
pub fn completed(dir: &Path) -> Option<Outcome> {
    let history = MetricsHistory::load_csv(&dir.join(METRICS_FILE)).ok()?;
    let test = history.last(TEST_SPLIT)?;
    Some(Outcome {
        dir: dir.to_path_buf(),
        top1: test.top1?,
        loss: test.loss,
        seconds: history.records.iter().map(|r| r.wall_seconds).sum(),
        reused: true,
    })
}

#[derive(Serialize)]
struct PretrainKey<'a> {
    data: &'a crate::config::DataConfig,
    byol: &'a byol_vit::byol::ByolConfig,
}

pub fn pretrain_hash(cfg: &RunConfig) -> String {
    config_hash(&PretrainKey {
        data: &cfg.data,
        byol: &cfg.byol,
    })
}

pub fn pretrain_dir(ctx: &Ctx, cfg: &RunConfig, seed: u64) -> PathBuf {
    run_dir(ctx, "pretrain", &pretrain_hash(cfg), seed)
}

/// Pretrains BYOL, resuming from the run directory's latest checkpoint.
pub fn pretrain(ctx: &Ctx, cfg: &RunConfig, seed: u64) -> Result<(ByolState, PathBuf), CliError> {
    cfg.byol.validate()?;
    let hash = pretrain_hash(cfg);
    let dir = run_dir(ctx, "pretrain", &hash, seed);
    create_dir(&dir)?;
    echo_config(&dir, cfg, seed)?;
    let unlabeled = data::load(&cfg.data, ctx.data_root.as_deref(), Split::Unlabeled, cfg.byol.image_size)?;
    log::info!("pretrain {}: {} unlabeled images", dir.display(), unlabeled.len());
    let policy = CheckpointPolicy {
        dir: Some(dir.clone()),
        config_hash: hash,
        stop_after: None,
    };
    let (state, history) = byol::resume_or_pretrain(&unlabeled, cfg.byol.clone(), seed, &policy)?;
    save_metrics(&dir, &history)?;
    Ok((state, CheckpointPolicy::latest_path(&dir)))
}

pub fn load_byol(path: &Path) -> Result<ByolState, CliError> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != byol::CHECKPOINT_KIND {
        return Err(CliError::Config(format!("{} is a `{}` checkpoint, not a BYOL one", path.display(), ck.kind)));
    }
    Ok(ByolState::from_checkpoint(&ck)?)
}

/// Identity of the BYOL weights a fine-tune run starts from, for hashing.
fn byol_identity(cfg: &RunConfig, source: &ByolSource) -> Result<String, CliError> {
    match source {
        ByolSource::Pretrain => Ok(format!("pretrain:{}", pretrain_hash(cfg))),
        ByolSource::File(path) => Ok(format!("file:{}", load_byol(path)?.backbone_digest()?)),
    }
}

fn obtain_byol(ctx: &Ctx, cfg: &RunConfig, seed: u64, source: &ByolSource) -> Result<ByolState, CliError> {
    let state = match source {
        ByolSource::Pretrain => pretrain(ctx, cfg, seed)?.0,
        ByolSource::File(path) => load_byol(path)?,
    };
    if state.epoch < state.config.epochs {
        log::warn!("BYOL checkpoint stopped at epoch {} of {}", state.epoch, state.config.epochs);
    }
    Ok(state)
}

#[derive(Serialize)]
struct FinetuneKey<'a> {
    data: &'a crate::config::DataConfig,
    image_size: usize,
    byol: Option<String>,
    model: Option<&'a crate::config::ModelConfig>,
    convnet: Option<&'a crate::config::ConvNetConfig>,
    backbone: Option<&'a byol_vit::backbone::BackboneConfig>,
    finetune: &'a byol_vit::trainer::TrainHp,
}

/// Hash and BYOL requirement of a hybrid (transformer) fine-tune.
pub fn hybrid_hash(cfg: &RunConfig, source: &ByolSource) -> Result<String, CliError> {
    let byol = match cfg.model.source.tap() {
        Some(_) => Some(byol_identity(cfg, source)?),
        None => None,
    };
    Ok(config_hash(&FinetuneKey {
        data: &cfg.data,
        image_size: cfg.byol.image_size,
        byol,
        model: Some(&cfg.model),
        convnet: None,
        backbone: None,
        finetune: &cfg.finetune,
    }))
}

pub fn convnet_hash(cfg: &RunConfig, source: &ByolSource) -> Result<String, CliError> {
    let (byol, backbone) = if cfg.convnet.scratch {
        (None, Some(&cfg.byol.backbone))
    } else {
        (Some(byol_identity(cfg, source)?), None)
    };
    Ok(config_hash(&FinetuneKey {
        data: &cfg.data,
        image_size: cfg.byol.image_size,
        byol,
        model: None,
        convnet: Some(&cfg.convnet),
        backbone,
        finetune: &cfg.finetune,
    }))
}

fn labeled(ctx: &Ctx, cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let size = cfg.byol.image_size;
    let train = data::load(&cfg.data, ctx.data_root.as_deref(), Split::Train, size)?;
    let test = data::load(&cfg.data, ctx.data_root.as_deref(), Split::Test, size)?;
    Ok((train, test))
}

fn supervise(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    hash: &str,
    model: &dyn Classifier,
    (train, test): (Dataset, Dataset),
) -> Result<Outcome, CliError> {
    let hp = trainer::TrainHp {
        seed,
        ..cfg.finetune.clone()
    };
    let ctl = RunControl {
        dir: Some(dir.to_path_buf()),
        config_hash: hash.to_string(),
        stop_after: None,
    };
    let report = trainer::finetune_with(model, &train, &hp, &ctl)?;
    report.restore_best(model)?;
    let started = Instant::now();
    let (top1, loss) = trainer::evaluate(model, &test)?;
    let mut history = report.history.clone();
    let epoch = report.best.map(|(e, _)| e).unwrap_or(hp.epochs);
    history.push(MetricsRecord {
        epoch,
        split: TEST_SPLIT.into(),
        top1: Some(top1),
        loss,
        lr: hp.lr_at(epoch.max(1)),
        wall_seconds: started.elapsed().as_secs_f64(),
    })?;
    save_metrics(dir, &history)?;
    log::info!("{}: test top-1 {top1:.4}, loss {loss:.4}", dir.display());
    Ok(Outcome {
        dir: dir.to_path_buf(),
        top1,
        loss,
        seconds: history.records.iter().map(|r| r.wall_seconds).sum(),
        reused: false,
    })
}

/// Fine-tunes a transformer on raw images or on a frozen BYOL stage.
pub fn finetune(ctx: &Ctx, cfg: &RunConfig, seed: u64, source: &ByolSource) -> Result<Outcome, CliError> {
    cfg.finetune.validate()?;
    let head = cfg.model.transformer();
    head.validate()?;
    let hash = hybrid_hash(cfg, source)?;
    let dir = run_dir(ctx, "finetune", &hash, seed);
    if let Some(done) = completed(&dir) {
        return Ok(done);
    }
    let sets = labeled(ctx, cfg)?;
    let n_classes = sets.0.n_classes();
    let model = match cfg.model.source.tap() {
        None => HybridModel::scratch(head, cfg.byol.image_size, n_classes, seed, DType::F32)?,
        Some(tap) => {
            let byol = obtain_byol(ctx, cfg, seed, source)?;
            HybridModel::attach_frontend(&byol, tap, head, n_classes, seed)?
        }
    };
    create_dir(&dir)?;
    echo_config(&dir, cfg, seed)?;
    log::info!("finetune {}: {} tokens per image", dir.display(), model.tokens_per_image());
    supervise(cfg, seed, &dir, &hash, &model, sets)
}

/// Fine-tunes a ConvNet classifier, from BYOL weights or from scratch.
pub fn finetune_convnet(ctx: &Ctx, cfg: &RunConfig, seed: u64, source: &ByolSource) -> Result<Outcome, CliError> {
    cfg.finetune.validate()?;
    let hash = convnet_hash(cfg, source)?;
    let dir = run_dir(ctx, "convnet", &hash, seed);
    if let Some(done) = completed(&dir) {
        return Ok(done);
    }
    let sets = labeled(ctx, cfg)?;
    let n_classes = sets.0.n_classes();
    let freeze = cfg.convnet.freeze.tap();
    let mut model = if cfg.convnet.scratch {
        cfg.byol.backbone.validate()?;
        ConvNetClassifier::scratch(cfg.byol.backbone, cfg.byol.image_size, n_classes, seed, DType::F32)?
    } else {
        let byol = obtain_byol(ctx, cfg, seed, source)?;
        ConvNetClassifier::from_byol(&byol, freeze, n_classes, seed)?
    };
    model.freeze_through(freeze);
    create_dir(&dir)?;
    echo_config(&dir, cfg, seed)?;
    supervise(cfg, seed, &dir, &hash, &model, sets)
}
