//! Experiment harness for hybrid BYOL-ViT runs: pretraining, fine-tuning,
//! sweeps over the published grids, and report generation.

pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod run;
pub mod selfcheck;
pub mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use byol_vit::backbone::Family;
use clap::{Args, Parser, Subcommand};

use config::{HeadFamily, RunConfig, Source};
pub use error::CliError;
use run::{ByolSource, Ctx};

#[derive(Debug, Parser)]
#[command(name = "byol-vit", version, about = "BYOL pretraining and hybrid ViT fine-tuning experiments")]
pub struct Cli {
    /// TOML configuration file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding the STL-10 binaries (falls back to BYOL_VIT_DATA_ROOT).
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for run directories and reports.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

/// Optimization overrides shared by every training command.
#[derive(Debug, Clone, Default, Args)]
pub struct HpArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    /// Augmentation pipeline name.
    #[arg(long)]
    pub aug: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ByolArgs {
    /// Negative slope of the projector and predictor rectifier.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// raw, layer1, layer2, layer3 or layer4.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// vit, cvt or cct.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised BYOL pretraining on the unlabeled split.
    Pretrain {
        #[command(flatten)]
        hp: HpArgs,
        #[command(flatten)]
        byol: ByolArgs,
    },
    /// Fine-tune a transformer on raw images or on a frozen BYOL stage.
    Finetune {
        #[command(flatten)]
        hp: HpArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// BYOL checkpoint to extract from; pretrains with the config when absent.
        #[arg(long)]
        byol: Option<PathBuf>,
    },
    /// Fine-tune a ConvNet classifier with its low-level stages frozen.
    FinetuneConvnet {
        #[command(flatten)]
        hp: HpArgs,
        /// none, layer1, layer2, layer3 or layer4.
        #[arg(long)]
        freeze: Option<String>,
        /// Random initialization instead of BYOL weights.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        byol: Option<PathBuf>,
    },
    /// Run a grid of fine-tune cells and write a results table.
    Sweep {
        #[arg(long)]
        kind: Option<String>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Markdown tables and SVG plots from results or metrics CSV files.
    Report { inputs: Vec<PathBuf> },
    /// Run the invariant, gradient and determinism suites.
    Selfcheck {
        #[arg(long, value_enum, value_delimiter = ',')]
        only: Option<Vec<selfcheck::Group>>,
    },
}

fn apply_train(hp: &HpArgs, t: &mut byol_vit::trainer::TrainHp) {
    if let Some(v) = hp.epochs {
        t.epochs = v;
    }
    if let Some(v) = hp.batch {
        t.batch_size = v;
    }
    if let Some(v) = hp.lr {
        t.lr = v;
    }
    if let Some(v) = hp.wd {
        t.weight_decay = v;
    }
    if let Some(v) = &hp.aug {
        t.aug = v.clone();
        t.aug_spec = None;
    }
}

fn apply_byol(hp: &HpArgs, b: &ByolArgs, c: &mut byol_vit::byol::ByolConfig) -> Result<(), CliError> {
    if let Some(v) = hp.epochs {
        c.epochs = v;
    }
    if let Some(v) = hp.batch {
        c.batch_size = v;
    }
    if let Some(v) = hp.lr {
        c.lr = v;
    }
    if let Some(v) = hp.wd {
        c.weight_decay = v;
    }
    if let Some(v) = &hp.aug {
        c.aug = v.clone();
        c.aug_spec = None;
    }
    if let Some(v) = b.alpha {
        c.alpha = v;
    }
    if let Some(v) = &b.backbone {
        c.backbone.family = v.parse::<Family>()?;
    }
    if let Some(v) = b.width {
        c.backbone.width_multiplier = v;
    }
    if let Some(v) = b.image_size {
        c.image_size = v;
    }
    if let Some(v) = b.tau {
        c.tau = v;
    }
    Ok(())
}

fn apply_model(m: &ModelArgs, c: &mut config::ModelConfig) -> Result<(), CliError> {
    if let Some(v) = &m.source {
        c.source = v.parse::<Source>()?;
    }
    if let Some(v) = m.patch {
        c.patch = v;
    }
    if let Some(v) = &m.kind {
        c.kind = match v.as_str() {
            "vit" => HeadFamily::Vit,
            "cvt" => HeadFamily::Cvt,
            "cct" => HeadFamily::Cct,
            _ => return Err(CliError::Config(format!("unknown model kind `{v}` (vit, cvt, cct)"))),
        };
    }
    if let Some(v) = m.depth {
        c.depth = v;
    }
    if let Some(v) = m.dim {
        c.dim = v;
    }
    Ok(())
}

/// Adopts the configuration stored in a BYOL checkpoint so that the echoed
/// config describes the weights actually used.
fn adopt_byol(cfg: &mut RunConfig, path: &Option<PathBuf>) -> Result<ByolSource, CliError> {
    match path {
        Some(p) => {
            cfg.byol = run::load_byol(p)?.config;
            Ok(ByolSource::File(p.clone()))
        }
        None => Ok(ByolSource::Pretrain),
    }
}

/// Resolved configuration: file, then flags.
fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        out: cli.out.clone(),
        data_root: cli.data_root.clone(),
    };
    let mut cfg = base_config(&cli)?;
    let seed = cfg.seed;
    match &cli.command {
        Command::Pretrain { hp, byol } => {
            apply_byol(hp, byol, &mut cfg.byol)?;
            cfg.byol.validate()?;
            let (state, ckpt) = run::pretrain(&ctx, &cfg, seed)?;
            let last = state.history.last("pretrain").map_or(f64::NAN, |r| r.loss);
            println!("{}", ckpt.display());
            println!("epochs {} final loss {last:.5}", state.epoch);
        }
        Command::Finetune { hp, model, byol } => {
            apply_train(hp, &mut cfg.finetune);
            apply_model(model, &mut cfg.model)?;
            let source = adopt_byol(&mut cfg, byol)?;
            cfg.validate()?;
            let o = run::finetune(&ctx, &cfg, seed, &source)?;
            print_outcome(&o);
        }
        Command::FinetuneConvnet { hp, freeze, scratch, byol } => {
            apply_train(hp, &mut cfg.finetune);
            if let Some(f) = freeze {
                cfg.convnet.freeze = f.parse()?;
            }
            cfg.convnet.scratch |= *scratch;
            let source = adopt_byol(&mut cfg, byol)?;
            cfg.validate()?;
            let o = run::finetune_convnet(&ctx, &cfg, seed, &source)?;
            print_outcome(&o);
        }
        Command::Sweep { kind, values, seeds } => {
            if let Some(k) = kind {
                cfg.sweep.kind = k.parse()?;
            }
            if let Some(v) = values {
                cfg.sweep.values = v.clone();
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s.clone();
            }
            let out = sweep::run_sweep(&ctx, &cfg)?;
            println!("{}", out.csv.display());
            println!("{} cells, {} runs trained, {} cells with failures", out.rows.len(), out.trained, out.failed);
            if out.failed == out.rows.len() && !out.rows.is_empty() {
                return Err(CliError::Runtime("every sweep cell failed".into()));
            }
        }
        Command::Report { inputs } => {
            let dir = ctx.out.join("report");
            for p in report::write_report(inputs, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Selfcheck { only } => {
            let groups = only.clone().unwrap_or_else(|| {
                vec![selfcheck::Group::Invariants, selfcheck::Group::Gradients, selfcheck::Group::Determinism]
            });
            let failures = selfcheck::run(&groups);
            if !failures.is_empty() {
                return Err(CliError::Selfcheck(failures.join("; ")));
            }
        }
    }
    Ok(())
}

fn print_outcome(o: &run::Outcome) {
    println!("{}", o.dir.display());
    let note = if o.reused { " (already complete)" } else { "" };
    println!("test top-1 {:.4} loss {:.4}{note}", o.top1, o.loss);
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
