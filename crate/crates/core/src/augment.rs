//! Seeded image transforms and the named recipes built from them.
//!
//! Every transform is a pure function of its input image and the random stream it is
//! handed. A pipeline draws one uniform number per descriptor and fires the
//! descriptor iff that draw is below its probability, then draws the transform's own
//! parameters.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, Normalization};
use crate::error::{Error, Result};
use crate::rng;

/// Default solarize threshold (midpoint of the pixel range).
pub const SOLARIZE_THRESHOLD: f32 = 0.5;
/// Default Gaussian blur sigma range.
pub const BLUR_SIGMA: (f64, f64) = (0.1, 2.0);
/// Default scale range of the random resized crop.
pub const CROP_SCALE: (f64, f64) = (0.08, 1.0);
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    ResizedCrop {
        size: usize,
        scale: (f64, f64),
        ratio: (f64, f64),
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Hflip,
    Grayscale,
    GaussianBlur {
        sigma: (f64, f64),
    },
    Solarize {
        threshold: f32,
    },
    Cutout {
        holes: usize,
        length: usize,
    },
    Rotation {
        degrees: f64,
    },
    Normalize {
        mean: [f32; 3],
        std: [f32; 3],
    },
    CenterCrop {
        size: usize,
    },
    Resize {
        size: usize,
    },
    PaddedCrop {
        size: usize,
        padding: usize,
    },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::ResizedCrop { .. } => "resized_crop",
            TransformKind::ColorJitter { .. } => "color_jitter",
            TransformKind::Hflip => "hflip",
            TransformKind::Grayscale => "grayscale",
            TransformKind::GaussianBlur { .. } => "gaussian_blur",
            TransformKind::Solarize { .. } => "solarize",
            TransformKind::Cutout { .. } => "cutout",
            TransformKind::Rotation { .. } => "rotation",
            TransformKind::Normalize { .. } => "normalize",
            TransformKind::CenterCrop { .. } => "center_crop",
            TransformKind::Resize { .. } => "resize",
            TransformKind::PaddedCrop { .. } => "padded_crop",
        }
    }

    fn output_size(&self) -> Option<usize> {
        match *self {
            TransformKind::ResizedCrop { size, .. }
            | TransformKind::CenterCrop { size }
            | TransformKind::Resize { size }
            | TransformKind::PaddedCrop { size, .. } => Some(size),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformDescriptor {
    #[serde(flatten)]
    pub kind: TransformKind,
    pub probability: f64,
}

impl TransformDescriptor {
    pub fn always(kind: TransformKind) -> Self {
        Self {
            kind,
            probability: 1.0,
        }
    }

    pub fn with_probability(kind: TransformKind, probability: f64) -> Self {
        Self { kind, probability }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{}: {msg}", self.kind.name())));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        match &self.kind {
            TransformKind::ResizedCrop { size, scale, ratio } => {
                if *size == 0 {
                    return bad("zero output size".into());
                }
                if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
                    return bad(format!("scale range {scale:?} must satisfy 0 < lo ≤ hi ≤ 1"));
                }
                if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
                    return bad(format!("ratio range {ratio:?} must satisfy 0 < lo ≤ hi"));
                }
            }
            TransformKind::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                if [*brightness, *contrast, *saturation].iter().any(|s| *s < 0.0) {
                    return bad("negative jitter strength".into());
                }
                if !(0.0..=0.5).contains(hue) {
                    return bad(format!("hue {hue} outside [0, 0.5]"));
                }
            }
            TransformKind::GaussianBlur { sigma } => {
                if !(sigma.0 > 0.0 && sigma.0 <= sigma.1) {
                    return bad(format!("sigma range {sigma:?}"));
                }
            }
            TransformKind::Solarize { threshold } => {
                if !threshold.is_finite() {
                    return bad("non-finite threshold".into());
                }
            }
            TransformKind::Cutout { length, .. } => {
                if *length == 0 {
                    return bad("zero cutout length".into());
                }
            }
            TransformKind::Rotation { degrees } => {
                if !(0.0..=180.0).contains(degrees) {
                    return bad(format!("rotation range {degrees} outside [0, 180]"));
                }
            }
            TransformKind::Normalize { mean, std } => {
                Normalization {
                    mean: *mean,
                    std: *std,
                }
                .validate()?;
            }
            TransformKind::CenterCrop { size }
            | TransformKind::Resize { size }
            | TransformKind::PaddedCrop { size, .. } => {
                if *size == 0 {
                    return bad("zero output size".into());
                }
            }
            TransformKind::Hflip | TransformKind::Grayscale => {}
        }
        Ok(())
    }
}

/// A named, ordered list of transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub name: String,
    pub transforms: Vec<TransformDescriptor>,
}

impl AugSpec {
    pub fn identity() -> Self {
        Self {
            name: "no_aug".into(),
            transforms: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.iter().all(|t| t.probability == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.transforms.iter().try_for_each(TransformDescriptor::validate)
    }

    /// Output side length for a square input of side `input`.
    pub fn output_size(&self, input: usize) -> usize {
        self.transforms
            .iter()
            .rev()
            .find_map(|t| t.kind.output_size())
            .unwrap_or(input)
    }

    /// The same recipe with every output size replaced by `size`.
    pub fn resized(mut self, size: usize) -> Self {
        for t in &mut self.transforms {
            match &mut t.kind {
                TransformKind::ResizedCrop { size: s, .. }
                | TransformKind::CenterCrop { size: s }
                | TransformKind::Resize { size: s }
                | TransformKind::PaddedCrop { size: s, .. } => *s = size,
                _ => {}
            }
        }
        self
    }

    pub fn position(&self, kind_name: &str) -> Option<usize> {
        self.transforms.iter().position(|t| t.kind.name() == kind_name)
    }
}

pub const PIPELINE_NAMES: [&str; 13] = [
    "baseline", "data_aug_1", "data_aug_2", "data_aug_3", "data_aug_4", "data_aug_5", "no_aug",
    "aug_0", "aug_1", "aug_2", "aug_3", "aug_4", "aug_5",
];

const SIDE: usize = 96;

fn resized_crop(scale: (f64, f64)) -> TransformDescriptor {
    TransformDescriptor::always(TransformKind::ResizedCrop {
        size: SIDE,
        scale,
        ratio: CROP_RATIO,
    })
}

fn jitter(b: f64, c: f64, s: f64, h: f64) -> TransformDescriptor {
    TransformDescriptor::with_probability(
        TransformKind::ColorJitter {
            brightness: b,
            contrast: c,
            saturation: s,
            hue: h,
        },
        0.8,
    )
}

fn hflip() -> TransformDescriptor {
    TransformDescriptor::with_probability(TransformKind::Hflip, 0.5)
}

fn grayscale() -> TransformDescriptor {
    TransformDescriptor::with_probability(TransformKind::Grayscale, 0.2)
}

fn blur(p: f64) -> TransformDescriptor {
    TransformDescriptor::with_probability(TransformKind::GaussianBlur { sigma: BLUR_SIGMA }, p)
}

fn solarize_step() -> TransformDescriptor {
    TransformDescriptor::with_probability(
        TransformKind::Solarize {
            threshold: SOLARIZE_THRESHOLD,
        },
        0.2,
    )
}

fn rotation() -> TransformDescriptor {
    TransformDescriptor::always(TransformKind::Rotation { degrees: 15.0 })
}

fn cutout_step() -> TransformDescriptor {
    TransformDescriptor::with_probability(TransformKind::Cutout { holes: 1, length: 8 }, 0.5)
}

fn normalize_step() -> TransformDescriptor {
    let n = Normalization::IMAGENET;
    TransformDescriptor::always(TransformKind::Normalize {
        mean: n.mean,
        std: n.std,
    })
}

fn padded_crop() -> TransformDescriptor {
    TransformDescriptor::always(TransformKind::PaddedCrop {
        size: SIDE,
        padding: 4,
    })
}

/// The modified BYOL recipe body shared by data_aug_1..data_aug_5.
fn modified_core() -> Vec<TransformDescriptor> {
    vec![
        resized_crop(CROP_SCALE),
        jitter(0.4, 0.4, 0.4, 0.1),
        hflip(),
        grayscale(),
        blur(0.5),
        solarize_step(),
    ]
}

/// Builds a named recipe at the native 96-pixel geometry.
pub fn build_pipeline(name: &str) -> Result<AugSpec> {
    let transforms = match name {
        "baseline" => vec![
            resized_crop(CROP_SCALE),
            jitter(0.8, 0.8, 0.8, 0.2),
            hflip(),
            grayscale(),
            blur(0.2),
            normalize_step(),
        ],
        "data_aug_1" => [modified_core(), vec![normalize_step()]].concat(),
        "data_aug_2" => [vec![rotation()], modified_core(), vec![normalize_step()]].concat(),
        "data_aug_3" => [vec![cutout_step()], modified_core(), vec![normalize_step()]].concat(),
        "data_aug_4" => [vec![rotation(), cutout_step()], modified_core(), vec![normalize_step()]].concat(),
        "data_aug_5" => modified_core(),
        "no_aug" => vec![],
        "aug_0" => vec![
            TransformDescriptor::always(TransformKind::Resize { size: SIDE }),
            resized_crop((0.05, 1.0)),
        ],
        "aug_1" => [build_pipeline("aug_0")?.transforms, vec![rotation()]].concat(),
        "aug_2" => [build_pipeline("aug_1")?.transforms, vec![blur(0.2)]].concat(),
        "aug_3" => vec![padded_crop(), hflip()],
        "aug_4" => vec![padded_crop(), hflip(), blur(0.2)],
        "aug_5" => vec![padded_crop(), hflip(), blur(0.2), rotation()],
        other => {
            return Err(Error::UnknownPipeline {
                name: other.to_string(),
                valid: PIPELINE_NAMES.join(", "),
            })
        }
    };
    Ok(AugSpec {
        name: name.to_string(),
        transforms,
    })
}

/// Builds a named recipe with every output size set to `size`.
pub fn build_pipeline_sized(name: &str, size: usize) -> Result<AugSpec> {
    Ok(build_pipeline(name)?.resized(size))
}

/// Applies `spec`, returning the image and which descriptors fired.
pub fn apply_traced<R: Rng + ?Sized>(
    spec: &AugSpec,
    img: &ImageTensor,
    rng: &mut R,
) -> (ImageTensor, Vec<bool>) {
    let mut out = img.clone();
    let mut fired = Vec::with_capacity(spec.transforms.len());
    for t in &spec.transforms {
        let draw: f64 = rng.gen();
        let fire = draw < t.probability;
        if fire {
            out = apply_kind(&t.kind, &out, rng);
        }
        fired.push(fire);
    }
    (out, fired)
}

pub fn apply<R: Rng + ?Sized>(spec: &AugSpec, img: &ImageTensor, rng: &mut R) -> ImageTensor {
    apply_traced(spec, img, rng).0
}

/// Two independent draws of the same pipeline on one source image.
pub fn two_views<R: Rng + ?Sized>(
    spec: &AugSpec,
    img: &ImageTensor,
    rng: &mut R,
) -> (ImageTensor, ImageTensor) {
    let a = apply(spec, img, rng);
    let b = apply(spec, img, rng);
    (a, b)
}

/// Augments a batch in parallel; sample `i` uses the stream derived from
/// `(seed, path…, ids[i])`, so results do not depend on the worker count.
pub fn apply_batch(
    spec: &AugSpec,
    images: &[&ImageTensor],
    ids: &[u64],
    seed: u64,
    path: &[u64],
) -> Vec<ImageTensor> {
    images
        .par_iter()
        .zip(ids.par_iter())
        .map(|(img, &id)| {
            let mut full = path.to_vec();
            full.push(id);
            apply(spec, img, &mut rng::stream(seed, &full))
        })
        .collect()
}

/// Two views per image with per-sample streams, as in [`apply_batch`].
pub fn two_views_batch(
    spec: &AugSpec,
    images: &[&ImageTensor],
    ids: &[u64],
    seed: u64,
    path: &[u64],
) -> Vec<(ImageTensor, ImageTensor)> {
    images
        .par_iter()
        .zip(ids.par_iter())
        .map(|(img, &id)| {
            let mut full = path.to_vec();
            full.push(id);
            two_views(spec, img, &mut rng::stream(seed, &full))
        })
        .collect()
}

fn apply_kind<R: Rng + ?Sized>(kind: &TransformKind, img: &ImageTensor, rng: &mut R) -> ImageTensor {
    match *kind {
        TransformKind::ResizedCrop { size, scale, ratio } => {
            let (top, left, h, w) = resized_crop_params(img.height(), img.width(), scale, ratio, rng);
            crop_resize(img, top as f32, left as f32, h as f32, w as f32, size, size)
        }
        TransformKind::ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
        } => color_jitter(img, brightness, contrast, saturation, hue, rng),
        TransformKind::Hflip => hflip_image(img),
        TransformKind::Grayscale => grayscale_image(img),
        TransformKind::GaussianBlur { sigma } => {
            let s = rng.gen_range(sigma.0..=sigma.1);
            gaussian_blur(img, blur_kernel_size(img.height(), img.width()), s as f32)
        }
        TransformKind::Solarize { threshold } => solarize(img, threshold),
        TransformKind::Cutout { holes, length } => {
            let mut out = img.clone();
            for _ in 0..holes {
                let cy = rng.gen_range(0..img.height());
                let cx = rng.gen_range(0..img.width());
                cutout(&mut out, cy, cx, length);
            }
            out
        }
        TransformKind::Rotation { degrees } => {
            let angle = rng.gen_range(-degrees..=degrees);
            rotate(img, angle)
        }
        TransformKind::Normalize { mean, std } => normalize(img, Normalization { mean, std }),
        TransformKind::CenterCrop { size } => {
            let top = (img.height() as isize - size as isize) / 2;
            let left = (img.width() as isize - size as isize) / 2;
            crop_padded(img, top, left, size, size)
        }
        TransformKind::Resize { size } => crop_resize(
            img,
            0.0,
            0.0,
            img.height() as f32,
            img.width() as f32,
            size,
            size,
        ),
        TransformKind::PaddedCrop { size, padding } => {
            let max_top = img.height() + 2 * padding - size.min(img.height() + 2 * padding);
            let max_left = img.width() + 2 * padding - size.min(img.width() + 2 * padding);
            let top = rng.gen_range(0..=max_top) as isize - padding as isize;
            let left = rng.gen_range(0..=max_left) as isize - padding as isize;
            crop_padded(img, top, left, size, size)
        }
    }
}

/// Crop box of a random resized crop: (top, left, height, width).
pub fn resized_crop_params<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let log_ratio = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(log_ratio.0..=log_ratio.1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < ratio.0 {
        ((width as f64 / ratio.0).round() as usize, width)
    } else if in_ratio > ratio.1 {
        (height, (height as f64 * ratio.1).round() as usize)
    } else {
        (height, width)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

fn bilinear_clamped(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resampling of the box (top, left, h, w) to `out_h`×`out_w`, using
/// half-pixel centers.
pub fn crop_resize(
    img: &ImageTensor,
    top: f32,
    left: f32,
    h: f32,
    w: f32,
    out_h: usize,
    out_w: usize,
) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels(), out_h, out_w);
    out.set_normalization(img.normalization().copied());
    let sy = h / out_h as f32;
    let sx = w / out_w as f32;
    let (ih, iw) = (img.height(), img.width());
    for ch in 0..img.channels() {
        let src = img.plane(ch);
        for r in 0..out_h {
            let y = (top + (r as f32 + 0.5) * sy - 0.5).clamp(top, top + h - 1.0);
            for c in 0..out_w {
                let x = (left + (c as f32 + 0.5) * sx - 0.5).clamp(left, left + w - 1.0);
                let v = bilinear_clamped(src, ih, iw, y, x);
                out.set(ch, r, c, v);
            }
        }
    }
    out
}

/// Crop with zero fill wherever the window leaves the image.
fn crop_padded(img: &ImageTensor, top: isize, left: isize, h: usize, w: usize) -> ImageTensor {
    let mut out = ImageTensor::zeros(img.channels(), h, w);
    out.set_normalization(img.normalization().copied());
    for ch in 0..img.channels() {
        for r in 0..h {
            let sr = top + r as isize;
            if sr < 0 || sr >= img.height() as isize {
                continue;
            }
            for c in 0..w {
                let sc = left + c as isize;
                if sc < 0 || sc >= img.width() as isize {
                    continue;
                }
                out.set(ch, r, c, img.get(ch, sr as usize, sc as usize));
            }
        }
    }
    out
}

pub fn hflip_image(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let w = img.width();
    for ch in 0..img.channels() {
        for row in out.plane_mut(ch).chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

/// ITU-R 601 luma replicated into every channel.
pub fn grayscale_image(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    if img.channels() != 3 {
        return out;
    }
    let n = img.height() * img.width();
    for i in 0..n {
        let d = img.data();
        let l = 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
        let o = out.data_mut();
        o[i] = l;
        o[n + i] = l;
        o[2 * n + i] = l;
    }
    out
}

/// Pixels at or above `threshold` are inverted: p ↦ 1 − p.
pub fn solarize(img: &ImageTensor, threshold: f32) -> ImageTensor {
    let mut out = img.clone();
    for v in out.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

/// Zeroes the `length`×`length` square centered on (cy, cx), clipped at the borders.
pub fn cutout(img: &mut ImageTensor, cy: usize, cx: usize, length: usize) {
    let half = length / 2;
    let y0 = cy.saturating_sub(half);
    let y1 = (cy + length - half).min(img.height());
    let x0 = cx.saturating_sub(half);
    let x1 = (cx + length - half).min(img.width());
    for ch in 0..img.channels() {
        for r in y0..y1 {
            for c in x0..x1 {
                img.set(ch, r, c, 0.0);
            }
        }
    }
}

/// Rotation about the image center by `degrees` (counter-clockwise), bilinear,
/// with exposed corners filled by zeros.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = ImageTensor::zeros(img.channels(), h, w);
    out.set_normalization(img.normalization().copied());
    let theta = degrees.to_radians() as f32;
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    for ch in 0..img.channels() {
        let src = img.plane(ch);
        let sample = |y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                src[y as usize * w + x as usize]
            }
        };
        for r in 0..h {
            for c in 0..w {
                let dy = r as f32 - cy;
                let dx = c as f32 - cx;
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = sample(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + sample(y0, x0 + 1) * fx * (1.0 - fy)
                    + sample(y0 + 1, x0) * (1.0 - fx) * fy
                    + sample(y0 + 1, x0 + 1) * fx * fy;
                out.set(ch, r, c, v);
            }
        }
    }
    out
}

/// Kernel side `odd(0.1 · min(H, W))`, at least 3.
pub fn blur_kernel_size(h: usize, w: usize) -> usize {
    let k = (0.1 * h.min(w) as f64) as usize;
    let k = if k % 2 == 0 { k + 1 } else { k };
    k.max(3)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageTensor, ksize: usize, sigma: f32) -> ImageTensor {
    let half = (ksize / 2) as isize;
    let mut kernel: Vec<f32> = (-half..=half)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let mut tmp = vec![0f32; h * w];
    for ch in 0..img.channels() {
        let src = img.plane(ch);
        for r in 0..h {
            for c in 0..w {
                tmp[r * w + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * src[r * w + reflect(c as isize + k as isize - half, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(ch);
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[reflect(r as isize + k as isize - half, h) * w + c])
                    .sum::<f32>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn normalize(img: &ImageTensor, norm: Normalization) -> ImageTensor {
    let mut out = img.clone();
    for ch in 0..img.channels().min(3) {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        for v in out.plane_mut(ch) {
            *v = (*v - m) / s;
        }
    }
    out.set_normalization(Some(norm));
    out
}

fn blend(a: f32, b: f32, ratio: f32) -> f32 {
    (ratio * a + (1.0 - ratio) * b).clamp(0.0, 1.0)
}

fn adjust_brightness(img: &mut ImageTensor, f: f32) {
    for v in img.data_mut() {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn adjust_contrast(img: &mut ImageTensor, f: f32) {
    let gray = grayscale_image(img);
    let n = gray.plane(0).len().max(1);
    let mean = gray.plane(0).iter().sum::<f32>() / n as f32;
    for v in img.data_mut() {
        *v = blend(*v, mean, f);
    }
}

fn adjust_saturation(img: &mut ImageTensor, f: f32) {
    let gray = grayscale_image(img);
    for (v, g) in img.data_mut().iter_mut().zip(gray.data()) {
        *v = blend(*v, *g, f);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(img: &mut ImageTensor, shift: f32) {
    if img.channels() != 3 {
        return;
    }
    let n = img.height() * img.width();
    let d = img.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        d[i] = r.clamp(0.0, 1.0);
        d[n + i] = g.clamp(0.0, 1.0);
        d[2 * n + i] = b.clamp(0.0, 1.0);
    }
}

/// Brightness, contrast and saturation factors are drawn from [max(0, 1−s), 1+s],
/// the hue shift from [−h, h]; the four adjustments run in a random order.
pub fn color_jitter<R: Rng + ?Sized>(
    img: &ImageTensor,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    rng: &mut R,
) -> ImageTensor {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut factor = |s: f64| -> Option<f32> {
        (s > 0.0).then(|| rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32)
    };
    let b = factor(brightness);
    let c = factor(contrast);
    let s = factor(saturation);
    let h = (hue > 0.0).then(|| rng.gen_range(-hue..=hue) as f32);
    let mut out = img.clone();
    for op in order {
        match (op, b, c, s, h) {
            (0, Some(f), ..) => adjust_brightness(&mut out, f),
            (1, _, Some(f), ..) => adjust_contrast(&mut out, f),
            (2, _, _, Some(f), _) => adjust_saturation(&mut out, f),
            (3, .., Some(f)) => adjust_hue(&mut out, f),
            _ => {}
        }
    }
    out
}
