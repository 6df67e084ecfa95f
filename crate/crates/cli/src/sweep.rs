//! Experiment grids. Each cell is a fine-tune run keyed by its configuration
//! hash; finished cells are read back from their metrics files instead of
//! being retrained.

use std::path::{Path, PathBuf};

use byol_vit::augment::PIPELINE_NAMES;
use byol_vit::backbone::{feature_shape, Family, TapPoint};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig, Source, SweepKind};
use crate::error::CliError;
use crate::run::{self, ByolSource, Ctx, Outcome};

pub const RESULTS_HEADER: [&str; 10] = [
    "config_id",
    "sweep",
    "axis",
    "status",
    "mean_top1",
    "mean_loss",
    "seeds",
    "seed_top1",
    "seed_loss",
    "runtime_seconds",
];

pub const DEFAULT_PATCHES: [usize; 7] = [8, 12, 16, 22, 24, 32, 48];
pub const DEFAULT_ALPHAS: [f64; 2] = [0.0, 0.01];
pub const DEFAULT_ABLATION_EPOCHS: [usize; 5] = [100, 200, 300, 400, 500];
pub const DEFAULT_BATCHES: [usize; 6] = [8, 16, 32, 64, 128, 256];
pub const DEFAULT_WEIGHT_DECAYS: [f64; 4] = [5e-1, 5e-2, 5e-3, 5e-4];

/// Every (tap, patch) pair of the layer-by-patch grid on 96-pixel inputs.
pub fn layer_patch_grid() -> Vec<(TapPoint, usize)> {
    let mut rows = Vec::new();
    rows.extend((1..=12).chain([14, 16, 18, 24]).map(|p| (TapPoint::Layer1, p)));
    rows.extend((1..=12).map(|p| (TapPoint::Layer2, p)));
    rows.extend((1..=6).map(|p| (TapPoint::Layer3, p)));
    rows.extend((1..=3).map(|p| (TapPoint::Layer4, p)));
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Hybrid,
    ConvNet,
}

/// One axis point of a sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    /// `name=value` pairs joined by `;`.
    pub axis: String,
    pub config: RunConfig,
    pub task: Task,
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_id: String,
    pub sweep: String,
    pub axis: String,
    pub status: String,
    pub mean_top1: Option<f64>,
    pub mean_loss: Option<f64>,
    pub seeds: String,
    pub seed_top1: String,
    pub seed_loss: String,
    pub runtime_seconds: f64,
}

fn parse_list<T: std::str::FromStr>(values: &[String], what: &str) -> Result<Vec<T>, CliError> {
    values
        .iter()
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("invalid {what} axis value `{v}`")))
        })
        .collect()
}

fn patch_fits(p: usize, side: usize, what: &str) -> Result<(), CliError> {
    if p == 0 || p > side {
        return Err(CliError::Config(format!("patch {p} does not fit the {side}×{side} {what}")));
    }
    Ok(())
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Expands the sweep section of `base` into cells, validating every axis value.
pub fn cells(base: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let sw = &base.sweep;
    let side = base.byol.image_size;
    let cell = |axis: String, f: &dyn Fn(&mut RunConfig), task: Task| {
        let mut config = base.clone();
        f(&mut config);
        Cell { axis, config, task }
    };
    let out = match sw.kind {
        SweepKind::PatchSweep => {
            let ps: Vec<usize> = if sw.values.is_empty() {
                DEFAULT_PATCHES.iter().copied().filter(|&p| p <= side).collect()
            } else {
                parse_list(&sw.values, "patch")?
            };
            for &p in &ps {
                patch_fits(p, side, "image")?;
            }
            ps.into_iter()
                .map(|p| {
                    cell(
                        format!("patch={p}"),
                        &|c| {
                            c.model.source = Source::Raw;
                            c.model.patch = p;
                        },
                        Task::Hybrid,
                    )
                })
                .collect()
        }
        SweepKind::LayerPatchGrid => {
            let grid = if sw.values.is_empty() {
                layer_patch_grid()
            } else {
                sw.values
                    .iter()
                    .map(|v| {
                        let bad = || CliError::Config(format!("grid value `{v}` must look like layer2:1"));
                        let (t, p) = v.split_once(':').ok_or_else(bad)?;
                        Ok((t.trim().parse::<TapPoint>()?, p.trim().parse::<usize>().map_err(|_| bad())?))
                    })
                    .collect::<Result<Vec<_>, CliError>>()?
            };
            for &(tap, p) in &grid {
                let (_, h, _) = feature_shape(&base.byol.backbone, tap, side).map_err(|e| CliError::Config(e.to_string()))?;
                patch_fits(p, h, &format!("{tap} map"))?;
            }
            grid.into_iter()
                .map(|(tap, p)| {
                    cell(
                        format!("tap={tap};patch={p}"),
                        &|c| {
                            c.model.source = tap.as_str().parse().expect("tap names are sources");
                            c.model.patch = p;
                        },
                        Task::Hybrid,
                    )
                })
                .collect()
        }
        SweepKind::MlpAblation => {
            let alphas: Vec<f64> = if sw.values.is_empty() {
                DEFAULT_ALPHAS.to_vec()
            } else {
                parse_list(&sw.values, "alpha")?
            };
            if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0)) {
                return Err(CliError::Config(format!("alpha must be non-negative, got {a}")));
            }
            let epochs = if sw.epochs.is_empty() { DEFAULT_ABLATION_EPOCHS.to_vec() } else { sw.epochs.clone() };
            let mut v = Vec::new();
            for &a in &alphas {
                for &e in &epochs {
                    v.push(cell(
                        format!("alpha={};epochs={e}", fmt_f(a)),
                        &|c| {
                            c.byol.alpha = a;
                            c.byol.epochs = e;
                        },
                        Task::Hybrid,
                    ));
                }
            }
            v
        }
        SweepKind::BatchSweep => {
            let bs: Vec<usize> = if sw.values.is_empty() {
                DEFAULT_BATCHES.to_vec()
            } else {
                parse_list(&sw.values, "batch")?
            };
            if let Some(b) = bs.iter().find(|&&b| b < 2) {
                return Err(CliError::Config(format!("BYOL batch size must be at least 2, got {b}")));
            }
            bs.into_iter()
                .map(|b| cell(format!("batch={b}"), &|c| c.byol.batch_size = b, Task::Hybrid))
                .collect()
        }
        SweepKind::WdSweep => {
            let wds: Vec<f64> = if sw.values.is_empty() {
                DEFAULT_WEIGHT_DECAYS.to_vec()
            } else {
                parse_list(&sw.values, "weight decay")?
            };
            if let Some(w) = wds.iter().find(|w| !(**w >= 0.0)) {
                return Err(CliError::Config(format!("weight decay must be non-negative, got {w}")));
            }
            wds.into_iter()
                .map(|w| cell(format!("weight_decay={}", fmt_f(w)), &|c| c.finetune.weight_decay = w, Task::Hybrid))
                .collect()
        }
        SweepKind::AugSweep => {
            let names: Vec<String> = if sw.values.is_empty() {
                PIPELINE_NAMES.iter().filter(|n| n.starts_with("data_aug") || **n == "baseline").map(|s| s.to_string()).collect()
            } else {
                sw.values.clone()
            };
            for n in &names {
                if !PIPELINE_NAMES.contains(&n.as_str()) {
                    return Err(byol_vit::Error::UnknownPipeline {
                        name: n.clone(),
                        valid: PIPELINE_NAMES.join(", "),
                    }
                    .into());
                }
            }
            names
                .into_iter()
                .map(|n| {
                    cell(
                        format!("aug={n}"),
                        &|c| {
                            c.byol.aug = n.clone();
                            c.byol.aug_spec = None;
                        },
                        Task::Hybrid,
                    )
                })
                .collect()
        }
        SweepKind::BackboneSweep => {
            let fams: Vec<Family> = if sw.values.is_empty() {
                Family::ALL.to_vec()
            } else {
                sw.values.iter().map(|v| v.trim().parse::<Family>()).collect::<Result<_, _>>()?
            };
            fams.into_iter()
                .map(|f| cell(format!("backbone={f}"), &|c| c.byol.backbone.family = f, Task::Hybrid))
                .collect()
        }
    };
    for c in &out {
        c.config.validate()?;
    }
    Ok(out)
}

pub fn cell_hash(cell: &Cell) -> Result<String, CliError> {
    match cell.task {
        Task::Hybrid => run::hybrid_hash(&cell.config, &ByolSource::Pretrain),
        Task::ConvNet => run::convnet_hash(&cell.config, &ByolSource::Pretrain),
    }
}

fn run_cell(ctx: &Ctx, cell: &Cell, seed: u64) -> Result<Outcome, CliError> {
    match cell.task {
        Task::Hybrid => run::finetune(ctx, &cell.config, seed, &ByolSource::Pretrain),
        Task::ConvNet => run::finetune_convnet(ctx, &cell.config, seed, &ByolSource::Pretrain),
    }
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Summary of a sweep execution.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub csv: PathBuf,
    /// Cell-seed runs that trained in this call (0 for a finished sweep).
    pub trained: usize,
    pub failed: usize,
}

pub fn sweep_dir(ctx: &Ctx, base: &RunConfig) -> PathBuf {
    let key = RunConfig { seed: 0, ..base.clone() };
    ctx.out.join(format!("sweep-{}-{}", base.sweep.kind.as_str(), config_hash(&key)))
}

/// Runs every cell for every seed, then writes the results table.
pub fn run_sweep(ctx: &Ctx, base: &RunConfig) -> Result<SweepOutcome, CliError> {
    base.validate()?;
    let cells = cells(base)?;
    let seeds = &base.sweep.seeds;
    let (mut trained, mut failed) = (0, 0);
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let id = cell_hash(cell)?;
        log::info!("cell {}/{} {}: {}", i + 1, cells.len(), cell.axis, id);
        let mut ok = Vec::new();
        let mut errors = Vec::new();
        for &seed in seeds {
            match run_cell(ctx, cell, seed) {
                Ok(o) => {
                    trained += usize::from(!o.reused);
                    ok.push((seed, o));
                }
                Err(e) => {
                    log::error!("cell {} seed {seed} failed: {e}", cell.axis);
                    errors.push(seed);
                }
            }
        }
        failed += usize::from(!errors.is_empty());
        let top1: Vec<f64> = ok.iter().map(|(_, o)| o.top1).collect();
        let loss: Vec<f64> = ok.iter().map(|(_, o)| o.loss).collect();
        rows.push(ResultRow {
            config_id: id,
            sweep: base.sweep.kind.as_str().into(),
            axis: cell.axis.clone(),
            status: if errors.is_empty() { "ok".into() } else { format!("failed:{}", join(&errors)) },
            mean_top1: mean(&top1),
            mean_loss: mean(&loss),
            seeds: join(ok.iter().map(|(s, _)| s)),
            seed_top1: join(&top1),
            seed_loss: join(&loss),
            runtime_seconds: ok.iter().map(|(_, o)| o.seconds).sum(),
        });
    }
    let dir = sweep_dir(ctx, base);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    std::fs::write(dir.join(run::CONFIG_FILE), base.to_toml()).map_err(|e| CliError::io(&dir, e))?;
    let csv = dir.join("results.csv");
    write_results(&csv, &rows)?;
    Ok(SweepOutcome { rows, csv, trained, failed })
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    if header != RESULTS_HEADER {
        return Err(CliError::Config(format!("{}: not a results table (header {header:?})", path.display())));
    }
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind(k: SweepKind) -> RunConfig {
        let mut c = RunConfig::default();
        c.sweep.kind = k;
        c
    }

    #[test]
    fn default_grids_have_the_published_shapes() {
        assert_eq!(cells(&kind(SweepKind::LayerPatchGrid)).unwrap().len(), 37);
        assert_eq!(cells(&kind(SweepKind::MlpAblation)).unwrap().len(), 10);
        assert_eq!(cells(&kind(SweepKind::BatchSweep)).unwrap().len(), 6);
        assert_eq!(cells(&kind(SweepKind::BackboneSweep)).unwrap().len(), 4);
        let wd: Vec<String> = cells(&kind(SweepKind::WdSweep)).unwrap().into_iter().map(|c| c.axis).collect();
        assert_eq!(wd, ["weight_decay=0.5", "weight_decay=0.05", "weight_decay=0.005", "weight_decay=0.0005"]);
    }

    #[test]
    fn oversized_patches_are_rejected() {
        let mut c = kind(SweepKind::LayerPatchGrid);
        c.sweep.values = vec!["layer4:4".into()];
        assert!(matches!(cells(&c), Err(CliError::Config(_))));
        c.sweep.values = vec!["layer4:3".into()];
        assert_eq!(cells(&c).unwrap().len(), 1);
    }

    #[test]
    fn cell_hashes_are_distinct() {
        let cells = cells(&kind(SweepKind::LayerPatchGrid)).unwrap();
        let mut ids: Vec<String> = cells.iter().map(|c| cell_hash(c).unwrap()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 37);
    }
}
