//! Image containers, the STL-10 binary reader and a procedural fallback dataset.
//!
//! STL-10 stores each image as three 96×96 channel planes of unsigned octets, every
//! plane in column-major order. Label files hold one 1-indexed class octet per image;
//! labels are converted to 0-indexed on load.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STL10_SIDE: usize = 96;
pub const STL10_PLANE: usize = STL10_SIDE * STL10_SIDE;
pub const STL10_RECORD: usize = 3 * STL10_PLANE;

pub const STL10_CLASS_NAMES: [&str; 10] = [
    "airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck",
];

/// Per-channel normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// The ImageNet statistics used by the normalized augmentation recipes.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "normalization needs finite means and positive stds, got {self:?}"
            )))
        }
    }
}

/// A C×H×W image stored plane by plane in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalization: Option<Normalization>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            normalization: None,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            data: vec![value; channels * height * width],
            ..Self::zeros(channels, height, width)
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot form a {channels}×{height}×{width} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            normalization: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub(crate) fn set_normalization(&mut self, norm: Option<Normalization>) {
        self.normalization = norm;
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, row: usize, col: usize, value: f32) {
        self.data[(ch * self.height + row) * self.width + col] = value;
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Decodes one STL-10 record: pixel (r, c, ch) is `bytes[ch·9216 + c·96 + r] / 255`.
pub fn decode_stl10_image(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() != STL10_RECORD {
        return Err(Error::MalformedRecord {
            expected: STL10_RECORD,
            actual: bytes.len(),
        });
    }
    let mut img = ImageTensor::zeros(3, STL10_SIDE, STL10_SIDE);
    for ch in 0..3 {
        let plane = &bytes[ch * STL10_PLANE..(ch + 1) * STL10_PLANE];
        for c in 0..STL10_SIDE {
            for r in 0..STL10_SIDE {
                img.set(ch, r, c, plane[c * STL10_SIDE + r] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Inverse of [`decode_stl10_image`] for 3×96×96 images with values in [0, 1].
pub fn encode_stl10_image(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.shape() != (3, STL10_SIDE, STL10_SIDE) {
        return Err(Error::Shape(format!(
            "STL-10 records are 3×96×96, got {:?}",
            img.shape()
        )));
    }
    let mut out = vec![0u8; STL10_RECORD];
    for ch in 0..3 {
        for c in 0..STL10_SIDE {
            for r in 0..STL10_SIDE {
                let v = (img.get(ch, r, c) * 255.0).round().clamp(0.0, 255.0);
                out[ch * STL10_PLANE + c * STL10_SIDE + r] = v as u8;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

impl Split {
    pub fn is_labeled(self) -> bool {
        !matches!(self, Split::Unlabeled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::InvalidConfig(format!(
                "unknown split `{other}` (train, test, unlabeled)"
            ))),
        }
    }
}

/// Which part of a dataset to keep.
///
/// `class_filter = None` keeps every class. Labels of the kept classes are renumbered
/// to their rank inside the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub class_filter: Option<BTreeSet<usize>>,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SubsetSpec {
    fn default() -> Self {
        Self {
            class_filter: None,
            fraction: 1.0,
            seed: 0,
        }
    }
}

impl SubsetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "subset fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if matches!(&self.class_filter, Some(f) if f.is_empty()) {
            return Err(Error::InvalidConfig("empty class filter".into()));
        }
        Ok(())
    }
}

/// The first five classes after sorting class names alphabetically.
pub fn five_class_filter(class_names: &[String]) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..class_names.len()).collect();
    order.sort_by(|&a, &b| class_names[a].cmp(&class_names[b]).then(a.cmp(&b)));
    order.into_iter().take(5).collect()
}

fn class_seed(seed: u64, class: usize) -> u64 {
    seed ^ (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Indices kept by `spec`, in ascending (file) order, plus the label remap.
///
/// Labeled data is shuffled and truncated per class so that a balanced input stays
/// balanced within one image per class.
pub fn select_indices(
    labels: Option<&[usize]>,
    n: usize,
    spec: &SubsetSpec,
) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    spec.validate()?;
    let take = |len: usize| -> usize {
        if len == 0 {
            0
        } else {
            ((spec.fraction * len as f64).round() as usize).clamp(1, len)
        }
    };
    match labels {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            idx.truncate(take(n));
            idx.sort_unstable();
            Ok((idx, None))
        }
        Some(labels) => {
            let classes: Vec<usize> = match &spec.class_filter {
                Some(f) => f.iter().copied().collect(),
                None => {
                    let present: BTreeSet<usize> = labels.iter().copied().collect();
                    present.into_iter().collect()
                }
            };
            let mut keep = Vec::new();
            for &class in &classes {
                let mut members: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == class)
                    .map(|(i, _)| i)
                    .collect();
                members.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed(spec.seed, class)));
                members.truncate(take(members.len()));
                keep.extend(members);
            }
            keep.sort_unstable();
            let remapped = keep
                .iter()
                .map(|&i| classes.binary_search(&labels[i]).expect("kept label is filtered"))
                .collect();
            Ok((keep, Some(remapped)))
        }
    }
}

/// An ordered, immutable collection of images with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    labels: Option<Vec<usize>>,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Option<Vec<usize>>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        match (&labels, split.is_labeled()) {
            (Some(l), true) => {
                if l.len() != images.len() {
                    return Err(Error::SizeMismatch(format!(
                        "{} images but {} labels",
                        images.len(),
                        l.len()
                    )));
                }
                if let Some(bad) = l.iter().find(|&&c| c >= class_names.len()) {
                    return Err(Error::InvalidConfig(format!(
                        "label {bad} out of range for {} classes",
                        class_names.len()
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::InvalidConfig("unlabeled split carries labels".into()))
            }
            (None, true) => {
                return Err(Error::InvalidConfig(format!(
                    "{} split requires labels",
                    split.as_str()
                )))
            }
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(ImageTensor::shape)
    }

    /// The same images with labels dropped.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            labels: None,
            class_names: self.class_names.clone(),
            split: Split::Unlabeled,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    pub fn subset(&self, spec: &SubsetSpec) -> Result<Dataset> {
        let (idx, remap) = select_indices(self.labels(), self.len(), spec)?;
        let mut out = self.select(&idx);
        if let (Some(remap), Some(filter)) = (remap, &spec.class_filter) {
            out.labels = Some(remap);
            out.class_names = filter.iter().map(|&c| self.class_names[c].clone()).collect();
        }
        Ok(out)
    }

    /// Seeded stratified split into (train, validation).
    pub fn stratified_split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let labels = self
            .labels()
            .ok_or_else(|| Error::InvalidConfig("stratified split needs labels".into()))?;
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let mut val = Vec::new();
        let mut train = Vec::new();
        for class in 0..self.n_classes() {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == class).collect();
            members.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed(seed, class)));
            let n_val = (val_fraction * members.len() as f64).round() as usize;
            let n_val = n_val.min(members.len().saturating_sub(1));
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.select(&train), self.select(&val)))
    }
}

/// File names inside an STL-10 binary directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stl10Files {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub unlabeled_images: String,
    pub class_names: String,
}

impl Default for Stl10Files {
    fn default() -> Self {
        Self {
            train_images: "train_X.bin".into(),
            train_labels: "train_y.bin".into(),
            test_images: "test_X.bin".into(),
            test_labels: "test_y.bin".into(),
            unlabeled_images: "unlabeled_X.bin".into(),
            class_names: "class_names.txt".into(),
        }
    }
}

/// Environment variable consulted when no explicit data root is given.
pub const DATA_ROOT_ENV: &str = "BYOL_VIT_DATA_ROOT";

pub fn resolve_data_root(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Class names from `class_names.txt`, or the standard ten when the file is absent.
pub fn read_class_names(root: &Path, files: &Stl10Files) -> Result<Vec<String>> {
    let path = root.join(&files.class_names);
    if !path.exists() {
        return Ok(STL10_CLASS_NAMES.iter().map(|s| s.to_string()).collect());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads an STL-10 split, decoding only the records kept by `subset`.
pub fn load_stl10(root: &Path, split: Split, subset: &SubsetSpec) -> Result<Dataset> {
    load_stl10_with(root, &Stl10Files::default(), split, subset)
}

pub fn load_stl10_with(
    root: &Path,
    files: &Stl10Files,
    split: Split,
    subset: &SubsetSpec,
) -> Result<Dataset> {
    let class_names = read_class_names(root, files)?;
    let (image_file, label_file) = match split {
        Split::Train => (&files.train_images, Some(&files.train_labels)),
        Split::Test => (&files.test_images, Some(&files.test_labels)),
        Split::Unlabeled => (&files.unlabeled_images, None),
    };
    let image_path = root.join(image_file);
    let mut f = File::open(&image_path).map_err(|e| Error::io(&image_path, e))?;
    let byte_len = f
        .metadata()
        .map_err(|e| Error::io(&image_path, e))?
        .len() as usize;
    if byte_len % STL10_RECORD != 0 {
        return Err(Error::SizeMismatch(format!(
            "{} holds {byte_len} bytes, not a multiple of {STL10_RECORD}",
            image_path.display()
        )));
    }
    let n = byte_len / STL10_RECORD;

    let labels = match label_file {
        Some(name) => {
            let path = root.join(name);
            let raw = read_all(&path)?;
            if raw.len() != n {
                return Err(Error::SizeMismatch(format!(
                    "{} images but {} labels in {}",
                    n,
                    raw.len(),
                    path.display()
                )));
            }
            let mut labels = Vec::with_capacity(n);
            for (i, &b) in raw.iter().enumerate() {
                if b == 0 || b as usize > class_names.len() {
                    return Err(Error::SizeMismatch(format!(
                        "label octet {b} at record {i} outside 1..={}",
                        class_names.len()
                    )));
                }
                labels.push(b as usize - 1);
            }
            Some(labels)
        }
        None => None,
    };

    let (keep, remap) = select_indices(labels.as_deref(), n, subset)?;
    let mut raw = vec![0u8; STL10_RECORD];
    let mut images = Vec::with_capacity(keep.len());
    for &i in &keep {
        f.seek(SeekFrom::Start((i * STL10_RECORD) as u64))
            .and_then(|_| f.read_exact(&mut raw))
            .map_err(|e| Error::io(&image_path, e))?;
        images.push(decode_stl10_image(&raw)?);
    }

    let (labels, class_names) = match (labels, &subset.class_filter) {
        (Some(_), Some(filter)) => (
            remap,
            filter
                .iter()
                .map(|&c| {
                    class_names.get(c).cloned().ok_or_else(|| {
                        Error::InvalidConfig(format!("class filter index {c} out of range"))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        (Some(all), None) => (Some(keep.iter().map(|&i| all[i]).collect()), class_names),
        (None, _) => (None, class_names),
    };
    Dataset::new(images, labels, class_names, split)
}

/// Writes images as concatenated STL-10 records.
pub fn write_stl10_images(path: &Path, images: &[ImageTensor]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for img in images {
        f.write_all(&encode_stl10_image(img)?)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes 0-indexed labels as 1-indexed STL-10 label octets.
pub fn write_stl10_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let bytes: Vec<u8> = labels
        .iter()
        .map(|&l| {
            u8::try_from(l + 1)
                .map_err(|_| Error::InvalidConfig(format!("label {l} does not fit an octet")))
        })
        .collect::<Result<_>>()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const SHAPE_FAMILIES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "stripes", "cross", "bars", "diamond", "frame",
];

pub const MAX_SYNTHETIC_CLASSES: usize = SHAPE_FAMILIES.len();

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Whether the normalized offset (dx, dy) in units of the shape radius lies inside
/// the given shape family.
fn inside(family: usize, dx: f32, dy: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match family {
        0 => dx * dx + dy * dy <= 1.0,
        1 => ax <= 0.85 && ay <= 0.85,
        2 => dy <= 0.8 && dy >= -1.0 + 0.0 && ax <= (dy + 1.0) * 0.5 * 0.95,
        3 => (ax <= 0.28 && ay <= 1.0) || (ay <= 0.28 && ax <= 1.0),
        4 => {
            let r2 = dx * dx + dy * dy;
            (0.36..=1.0).contains(&r2)
        }
        5 => ax <= 0.9 && ay <= 0.9 && (((dy + 1.0) * 2.5).floor() as i32) % 2 == 0,
        6 => ((dx - dy).abs() <= 0.3 || (dx + dy).abs() <= 0.3) && ax <= 0.9 && ay <= 0.9,
        7 => ay <= 0.95 && (0.3..=0.75).contains(&ax),
        8 => ax + ay <= 1.0,
        _ => ax <= 0.9 && ay <= 0.9 && (ax >= 0.6 || ay >= 0.6),
    }
}

fn synthetic_image(class: usize, hw: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let family = class % SHAPE_FAMILIES.len();
    let dark_background = rng.gen_bool(0.5);
    let pick = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| -> [f32; 3] {
        let base = rng.gen_range(lo..hi);
        [0, 1, 2].map(|_| (base + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0))
    };
    let (bg, fg) = if dark_background {
        (pick(rng, 0.05, 0.35), pick(rng, 0.65, 0.95))
    } else {
        (pick(rng, 0.65, 0.95), pick(rng, 0.05, 0.35))
    };
    debug_assert!((luma(bg) - luma(fg)).abs() > 0.1);
    let side = hw as f32;
    let radius = side * rng.gen_range(0.28..0.42);
    let cy = rng.gen_range(radius..side - radius);
    let cx = rng.gen_range(radius..side - radius);
    let noise = 0.04f32;
    let mut img = ImageTensor::zeros(3, hw, hw);
    for r in 0..hw {
        for c in 0..hw {
            let dy = (r as f32 + 0.5 - cy) / radius;
            let dx = (c as f32 + 0.5 - cx) / radius;
            let color = if inside(family, dx, dy) { fg } else { bg };
            for (ch, v) in color.iter().enumerate() {
                let jitter = rng.gen_range(-noise..noise);
                img.set(ch, r, c, (v + jitter).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// A deterministic labeled dataset of procedurally drawn shapes.
///
/// Image `i` belongs to class `i % n_classes`; every class draws a distinct shape
/// family at a random position, scale and contrast polarity.
pub fn make_synthetic_dataset(n: usize, n_classes: usize, hw: usize, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || n_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "synthetic datasets support 2..={MAX_SYNTHETIC_CLASSES} classes, got {n_classes}"
        )));
    }
    if n == 0 || n % n_classes != 0 {
        return Err(Error::InvalidConfig(format!(
            "image count {n} must be a positive multiple of {n_classes}"
        )));
    }
    if hw < 8 {
        return Err(Error::InvalidConfig(format!("image side {hw} is below 8 pixels")));
    }
    let images: Vec<ImageTensor> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synthetic_image(i % n_classes, hw, &mut rng)
        })
        .collect();
    let labels = (0..n).map(|i| i % n_classes).collect();
    let names = SHAPE_FAMILIES[..n_classes].iter().map(|s| s.to_string()).collect();
    Dataset::new(images, Some(labels), names, Split::Train)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn dataset_stats(ds: &Dataset) -> Result<ChannelStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut count = 0usize;
    for img in ds.images() {
        if img.channels() != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels())));
        }
        for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
            for &v in img.plane(ch) {
                *s += v as f64;
                *q += (v as f64) * (v as f64);
            }
        }
        count += img.height() * img.width();
    }
    let n = count as f64;
    let mean = sum.map(|s| s / n);
    let mut std = [0f64; 3];
    for ch in 0..3 {
        std[ch] = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0).sqrt();
    }
    Ok(ChannelStats { mean, std })
}

/// Stacks same-shaped images into a (B, C, H, W) tensor.
pub fn stack_images(images: &[&ImageTensor], dtype: candle_core::DType) -> Result<candle_core::Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != (c, h, w) {
            return Err(Error::Shape(format!("cannot stack {:?} with {:?}", img.shape(), (c, h, w))));
        }
        data.extend_from_slice(img.data());
    }
    let t = candle_core::Tensor::from_vec(data, (images.len(), c, h, w), &candle_core::Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}
