//! Dataset resolution: STL-10 binaries when present, synthetic shapes otherwise.

use std::path::{Path, PathBuf};

use byol_vit::augment::crop_resize;
use byol_vit::data::{
    self, five_class_filter, load_stl10, make_synthetic_dataset, read_class_names, Dataset, Split, Stl10Files, SubsetSpec,
    STL10_SIDE,
};

use crate::config::{DataConfig, DataSource};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Stl10,
    Synthetic,
}

/// Resolves where data comes from without reading any images.
pub fn origin(cfg: &DataConfig, root: Option<&Path>) -> Result<(Origin, Option<PathBuf>), CliError> {
    let root = data::resolve_data_root(root);
    let present = root
        .as_deref()
        .is_some_and(|r| r.join(Stl10Files::default().train_images).exists());
    match cfg.source {
        DataSource::Synthetic => Ok((Origin::Synthetic, None)),
        DataSource::Stl10 if present => Ok((Origin::Stl10, root)),
        DataSource::Stl10 => Err(CliError::Runtime(match root {
            Some(r) => format!("no STL-10 binaries under {}", r.display()),
            None => format!("data.source = stl10 needs --data-root or {}", data::DATA_ROOT_ENV),
        })),
        DataSource::Auto if present => Ok((Origin::Stl10, root)),
        DataSource::Auto => {
            log::warn!("STL-10 not found; using the synthetic fallback");
            Ok((Origin::Synthetic, None))
        }
    }
}

fn resize(ds: Dataset, side: usize) -> Result<Dataset, CliError> {
    if side == STL10_SIDE {
        return Ok(ds);
    }
    let s = STL10_SIDE as f32;
    let images = ds.images().iter().map(|im| crop_resize(im, 0.0, 0.0, s, s, side, side)).collect();
    Ok(Dataset::new(images, ds.labels().map(<[usize]>::to_vec), ds.class_names().to_vec(), ds.split())?)
}

/// Loads one split at `side`×`side` pixels.
pub fn load(cfg: &DataConfig, root: Option<&Path>, split: Split, side: usize) -> Result<Dataset, CliError> {
    let (origin, root) = origin(cfg, root)?;
    match origin {
        Origin::Synthetic => {
            let s = &cfg.synthetic;
            let (n, offset) = match split {
                Split::Unlabeled => (s.unlabeled, 1000),
                Split::Train => (s.train, 2000),
                Split::Test => (s.test, 3000),
            };
            let ds = make_synthetic_dataset(n, s.classes, side, s.seed + offset)?;
            Ok(if split == Split::Unlabeled { ds.unlabeled() } else { ds })
        }
        Origin::Stl10 => {
            let root = root.expect("STL-10 origin carries a root");
            let names = read_class_names(&root, &Stl10Files::default())?;
            let subset = SubsetSpec {
                class_filter: (cfg.five_class && split.is_labeled()).then(|| five_class_filter(&names)),
                fraction: if split.is_labeled() { cfg.labeled_fraction } else { cfg.unlabeled_fraction },
                seed: 0,
            };
            resize(load_stl10(&root, split, &subset)?, side)
        }
    }
}
