//! Checks shared by the integration tests and the acceptance binary. Each
//! returns a short detail line on success and a diagnostic on failure.
#![allow(dead_code)]

use std::collections::BTreeMap;

use byol_vit::augment::{self, PIPELINE_NAMES};
use byol_vit::backbone::{feature_shape, BackboneConfig, Family, TapPoint};
use byol_vit::byol::{self, regression_loss, regression_loss_vec, ByolConfig, ByolState, CheckpointPolicy, MlpHead};
use byol_vit::data::{decode_stl10_image, encode_stl10_image, make_synthetic_dataset, Dataset, STL10_RECORD};
use byol_vit::nn::gradcheck;
use byol_vit::nn::layers::softmax_last;
use byol_vit::nn::{BatchNorm, Init, Linear, ParamBuilder, ParamKind, ParamStore};
use byol_vit::rng;
use byol_vit::trainer::{self, ConvNetClassifier, HybridModel, RunControl, TrainHp};
use byol_vit::transformer::{attention, patch_count, patchify, EncoderBlock, HeadKind, SeqPool, Tokenizer, TransformerConfig};
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub type Check = std::result::Result<String, String>;

pub const SOFTMAX_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-6;
pub const FREEZE_STEPS: usize = 100;
pub const FIRING_DRAWS: usize = 1000;
pub const FIRING_SIGMAS: f64 = 3.0;

/// Feature-map side after each tap of a ResNet on a 96-pixel input: stride-2
/// stem conv and max pool give 24, then each later stage halves.
pub const R50_96_SIDES: [(TapPoint, usize); 4] = [
    (TapPoint::Layer1, 24),
    (TapPoint::Layer2, 12),
    (TapPoint::Layer3, 6),
    (TapPoint::Layer4, 3),
];

/// Every (tap, patch) row of the layer-by-patch results grid.
pub fn layer_patch_grid() -> Vec<(TapPoint, usize)> {
    let mut rows = Vec::new();
    rows.extend((1..=12).chain([14, 16, 18, 24]).map(|p| (TapPoint::Layer1, p)));
    rows.extend((1..=12).map(|p| (TapPoint::Layer2, p)));
    rows.extend((1..=6).map(|p| (TapPoint::Layer3, p)));
    rows.extend((1..=3).map(|p| (TapPoint::Layer4, p)));
    rows
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> std::result::Result<(), TestCaseError>) -> std::result::Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(msg: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(msg.to_string())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn tensor(values: Vec<f64>, shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn rows_f64(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn randn(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    tensor(v, shape, dtype)
}

pub fn loss_bounds() -> Check {
    let vecs = (1usize..24).prop_flat_map(|d| {
        (
            proptest::collection::vec(-50.0f64..50.0, d),
            proptest::collection::vec(-50.0f64..50.0, d),
        )
    });
    run(512, vecs, |(q, z)| {
        let l = regression_loss_vec(&q, &z);
        if !(0.0..=4.0).contains(&l) {
            return Err(fail(format!("loss {l} outside [0, 4]")));
        }
        let d = q.len();
        let t = regression_loss(&tensor(q.clone(), &[1, d], DType::F64), &tensor(z.clone(), &[1, d], DType::F64))
            .map_err(fail)?
            .to_vec1::<f64>()
            .map_err(fail)?[0];
        if (t - l).abs() > 1e-9 {
            return Err(fail(format!("tensor loss {t} differs from scalar loss {l}")));
        }
        Ok(())
    })?;
    // Symmetric two-view total stays in [0, 8], each term in [0, 4].
    let q = randn(1, &[16, 8], DType::F32);
    let z = (randn(2, &[16, 8], DType::F32) * -1.0).map_err(err)?;
    let per = regression_loss(&q, &z).map_err(err)?.to_vec1::<f32>().map_err(err)?;
    if per.iter().any(|&l| !(0.0..=4.0 + 1e-5).contains(&l)) {
        return Err(format!("f32 per-sample losses out of range: {per:?}"));
    }
    Ok("512 random (q, z) pairs in [0, 4]; tensor and scalar routes agree".into())
}

fn ema_pair(seed_a: u64, seed_b: u64) -> (ParamStore, ParamStore) {
    let build = |seed| {
        let store = ParamStore::new(DType::F32);
        let pb = ParamBuilder::new(&store, seed);
        Linear::new(&pb.pp("fc"), 5, 7, true).unwrap();
        BatchNorm::new(&pb.pp("bn"), 7).unwrap();
        store
            .get("bn.running_mean")
            .unwrap()
            .set(&randn(seed + 100, &[7], DType::F32))
            .unwrap();
        store
    };
    (build(seed_a), build(seed_b))
}

fn values(store: &ParamStore) -> BTreeMap<String, Vec<f32>> {
    store
        .all()
        .iter()
        .map(|p| (p.name().to_string(), p.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

pub fn ema_algebra() -> Check {
    let buffers = |s: &ParamStore| -> Vec<String> {
        s.all().iter().filter(|p| p.kind() == ParamKind::Buffer).map(|p| p.name().to_string()).collect()
    };
    for tau in [0.0, 0.5, 1.0] {
        let (online, target) = ema_pair(1, 2);
        let (o, t) = (values(&online), values(&target));
        byol::ema_update(&online, &target, tau).map_err(err)?;
        let after = values(&target);
        for (name, got) in &after {
            let is_buffer = buffers(&target).contains(name);
            let want: Vec<f32> = if is_buffer || tau == 1.0 {
                t[name].clone()
            } else if tau == 0.0 {
                o[name].clone()
            } else {
                t[name].iter().zip(&o[name]).map(|(&a, &b)| (0.5 * a as f64 + 0.5 * b as f64) as f32).collect()
            };
            if got.iter().map(|v| v.to_bits()).ne(want.iter().map(|v| v.to_bits())) {
                return Err(format!("tau={tau}: `{name}` is not bit-exact"));
            }
        }
    }
    run(64, 0.0f64..=1.0, |tau| {
        let (online, target) = ema_pair(3, 4);
        let (o, t) = (values(&online), values(&target));
        byol::ema_update(&online, &target, tau).map_err(fail)?;
        for p in target.weights() {
            let got = values(&target)[p.name()].clone();
            for ((g, a), b) in got.iter().zip(&t[p.name()]).zip(&o[p.name()]) {
                let want = tau * *a as f64 + (1.0 - tau) * *b as f64;
                if (*g as f64 - want).abs() > 1e-6 * (1.0 + want.abs()) {
                    return Err(fail(format!("tau={tau}: {g} vs {want}")));
                }
            }
        }
        Ok(())
    })?;
    Ok("tau ∈ {0, 0.5, 1} bit-exact; 64 random tau linear; buffers untouched".into())
}

fn tiny_byol(seed: u64) -> ByolState {
    let config = ByolConfig {
        backbone: BackboneConfig::desk(Family::R18),
        proj_hidden: 32,
        proj_out: 16,
        image_size: 32,
        epochs: 1,
        batch_size: 8,
        ..ByolConfig::default()
    };
    ByolState::new(config, seed).unwrap()
}

fn freeze_hp(seed: u64) -> TrainHp {
    TrainHp {
        lr: 1e-3,
        batch_size: 4,
        epochs: FREEZE_STEPS / 5,
        seed,
        val_fraction: 0.0,
        ..TrainHp::default()
    }
}

/// Small ViT head with a patch size that keeps a handful of tokens on `side`.
pub fn tiny_vit(side: usize) -> TransformerConfig {
    TransformerConfig {
        depth: 1,
        heads: 2,
        dim: 16,
        mlp_ratio: 2.0,
        head: HeadKind::ClassToken,
        tokenizer: Tokenizer::Patchify { patch: (side / 4).max(1) },
    }
}

pub fn freeze_immutability() -> Check {
    let data = make_synthetic_dataset(20, 5, 32, 7).map_err(err)?;
    let byol = tiny_byol(5);
    let mut lines = Vec::new();
    for tap in TapPoint::ALL {
        let side = feature_shape(&byol.config.backbone, tap, 32).map_err(err)?.1;
        let hybrid = HybridModel::attach_frontend(&byol, tap, tiny_vit(side), 5, 9).map_err(err)?;
        let before = hybrid.extractor_digest().map_err(err)?;
        let head_before = hybrid.store.digest(|p| p.name().starts_with("head.")).map_err(err)?;
        let report = trainer::finetune(&hybrid, &data, &freeze_hp(9)).map_err(err)?;
        let steps = report.step_losses.len();
        if steps < FREEZE_STEPS {
            return Err(format!("{tap}: only {steps} steps ran"));
        }
        if hybrid.extractor_digest().map_err(err)? != before {
            return Err(format!("{tap}: hybrid extractor changed"));
        }
        if hybrid.store.digest(|p| p.name().starts_with("head.")).map_err(err)? == head_before {
            return Err(format!("{tap}: head did not train"));
        }

        let convnet = ConvNetClassifier::from_byol(&byol, Some(tap), 5, 9).map_err(err)?;
        let frozen_before = convnet.frozen_digest().map_err(err)?;
        let all_before = convnet.store.digest(|_| true).map_err(err)?;
        trainer::finetune(&convnet, &data, &freeze_hp(9)).map_err(err)?;
        if convnet.frozen_digest().map_err(err)? != frozen_before {
            return Err(format!("{tap}: frozen ConvNet stages changed"));
        }
        if convnet.store.digest(|_| true).map_err(err)? == all_before {
            return Err(format!("{tap}: ConvNet classifier did not train"));
        }
        lines.push(format!("{tap}:{steps}"));
    }
    Ok(format!("frozen bytes identical after steps per tap [{}] (hybrid and ConvNet)", lines.join(" ")))
}

pub fn softmax_rows() -> Check {
    let worst = std::cell::Cell::new(0.0f64);
    let mats = (1usize..6, 1usize..17).prop_flat_map(|(r, c)| (Just((r, c)), proptest::collection::vec(-30.0f64..30.0, r * c)));
    run(256, mats, |((r, c), v)| {
        for dtype in [DType::F32, DType::F64] {
            let s = softmax_last(&tensor(v.clone(), &[r, c], dtype)).map_err(fail)?;
            for row in rows_f64(&s) {
                let dev = (row.iter().sum::<f64>() - 1.0).abs();
                worst.set(worst.get().max(dev));
                if dev > SOFTMAX_TOL || row.iter().any(|&x| x < 0.0) {
                    return Err(fail(format!("{dtype:?} row sums to 1 ± {dev}")));
                }
            }
        }
        Ok(())
    })?;
    let qkv = (1usize..4, 1usize..13, 1usize..9, any::<u64>());
    run(128, qkv, |(b, n, d, seed)| {
        let q = randn(seed, &[b, n, d], DType::F32);
        let k = randn(seed ^ 1, &[b, n, d], DType::F32);
        let v = randn(seed ^ 2, &[b, n, d], DType::F32);
        let (_, w) = attention(&q, &k, &v).map_err(fail)?;
        let w = w.reshape((b * n, n)).map_err(fail)?;
        for row in rows_f64(&w) {
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            worst.set(worst.get().max(dev));
            if dev > SOFTMAX_TOL {
                return Err(fail(format!("attention row sums to 1 ± {dev}")));
            }
        }
        Ok(())
    })?;
    Ok(format!("softmax and attention rows: max |Σ−1| = {:.2e}", worst.get()))
}

pub fn seq_pool_convexity() -> Check {
    let cases = (1usize..4, 1usize..10, 1usize..12, any::<u64>());
    run(256, cases, |(b, n, d, seed)| {
        let store = ParamStore::new(DType::F64);
        let pool = SeqPool::new(&ParamBuilder::new(&store, seed), d).map_err(fail)?;
        let x = (randn(seed ^ 7, &[b, n, d], DType::F64) * 3.0).map_err(fail)?;
        let w = rows_f64(&pool.weights(&x).map_err(fail)?);
        let pooled = rows_f64(&pool.forward(&x).map_err(fail)?);
        let xs = x.to_vec3::<f64>().map_err(fail)?;
        for i in 0..b {
            if w[i].iter().any(|&v| v <= 0.0) || (w[i].iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(fail(format!("weights {:?} are not a strictly positive simplex point", w[i])));
            }
            for j in 0..d {
                let (lo, hi) = xs[i].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t[j]), hi.max(t[j])));
                let v = pooled[i][j];
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    return Err(fail(format!("pooled {v} outside [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    })?;
    Ok("256 random instances inside the coordinatewise hull".into())
}

fn expected_tokens(side: usize, p: usize) -> usize {
    let per_axis = side / p + usize::from(side % p != 0);
    per_axis * per_axis
}

pub fn patch_count_law() -> Check {
    let r50 = BackboneConfig::new(Family::R50, 1.0);
    let grid = layer_patch_grid();
    for &(tap, p) in &grid {
        let side = R50_96_SIDES.iter().find(|(t, _)| *t == tap).unwrap().1;
        let (c, h, w) = feature_shape(&r50, tap, 96).map_err(err)?;
        if (h, w) != (side, side) {
            return Err(format!("{tap}: feature map {h}×{w}, expected {side}×{side}"));
        }
        let n = expected_tokens(side, p);
        let via_config = TransformerConfig::vit(p).token_count(h, w);
        if patch_count(h, w, p) != n || via_config != n {
            return Err(format!("{tap} p={p}: {} / {via_config} tokens, expected {n}", patch_count(h, w, p)));
        }
        let x = Tensor::zeros((1, 2, h, w), DType::F32, &Device::Cpu).map_err(err)?;
        let dims = patchify(&x, p).map_err(err)?.dims().to_vec();
        if dims != [1, n, 2 * p * p] {
            return Err(format!("{tap} p={p}: patchify gave {dims:?}"));
        }
        if tap == TapPoint::Layer2 && p == 1 && (n, c) != (144, 512) {
            return Err(format!("layer2 p=1 gives {n} tokens of {c} channels"));
        }
    }
    let divisors = (1..=96).filter(|d| 96 % d == 0);
    let raw: Vec<usize> = divisors.chain([8, 12, 16, 22, 24, 32, 48]).collect();
    for &p in &raw {
        if patch_count(96, 96, p) != expected_tokens(96, p) {
            return Err(format!("raw 96×96, p={p}: {} tokens", patch_count(96, 96, p)));
        }
    }
    Ok(format!("{} grid rows and {} raw-image patch sizes", grid.len(), raw.len()))
}

pub fn stl_round_trip() -> Check {
    run(24, proptest::collection::vec(any::<u8>(), STL10_RECORD), |bytes| {
        let img = decode_stl10_image(&bytes).map_err(fail)?;
        let back = encode_stl10_image(&img).map_err(fail)?;
        if back != bytes {
            return Err(fail("encode(decode(bytes)) differs"));
        }
        Ok(())
    })?;
    Ok("24 random records decode/encode bit-exactly".into())
}

pub fn firing_rates() -> Check {
    let img = make_synthetic_dataset(2, 2, 16, 0).map_err(err)?.images()[0].clone();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for name in PIPELINE_NAMES {
        let spec = augment::build_pipeline_sized(name, 16).map_err(err)?;
        let mut fired = vec![0usize; spec.transforms.len()];
        for i in 0..FIRING_DRAWS {
            let (_, f) = augment::apply_traced(&spec, &img, &mut rng::stream(2024, &[i as u64]));
            for (k, hit) in f.iter().enumerate() {
                fired[k] += usize::from(*hit);
            }
        }
        for (t, &k) in spec.transforms.iter().zip(&fired) {
            let p = t.probability;
            let n = FIRING_DRAWS as f64;
            let mean = n * p;
            let sd = (n * p * (1.0 - p)).sqrt();
            let dev = (k as f64 - mean).abs();
            let ok = if sd == 0.0 { dev == 0.0 } else { dev <= FIRING_SIGMAS * sd };
            if !ok {
                return Err(format!("{name}/{}: fired {k} of {FIRING_DRAWS}, p={p}", t.kind.name()));
            }
            if sd > 0.0 {
                worst = worst.max(dev / sd);
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} descriptors within {FIRING_SIGMAS}σ (worst {worst:.2}σ)"))
}

/// Criterion 1 in order.
pub fn invariant_suite() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("loss bounds", loss_bounds),
        ("EMA algebra", ema_algebra),
        ("freeze immutability", freeze_immutability),
        ("softmax row sums", softmax_rows),
        ("seq_pool convexity", seq_pool_convexity),
        ("patch-count law", patch_count_law),
        ("STL-10 round trip", stl_round_trip),
        ("augmentation firing rates", firing_rates),
    ]
}

fn weighted_sum(y: &Tensor, seed: u64) -> candle_core::Result<Tensor> {
    let w = randn(seed, y.dims(), y.dtype());
    (y * w)?.sum_all()
}

/// Gradients whose analytic and numeric norms both fall below this are exact
/// zeros up to rounding (a bias feeding batch norm), where a relative error
/// carries no information.
pub const GRAD_ZERO_FLOOR: f64 = 1e-7;

fn report(name: &str, reports: &[gradcheck::GradReport]) -> Check {
    if reports.is_empty() {
        return Err(format!("{name}: no trainable parameters checked"));
    }
    let zero = |r: &gradcheck::GradReport| r.analytic_norm < GRAD_ZERO_FLOOR && r.numeric_norm < GRAD_ZERO_FLOOR;
    let (zeros, live): (Vec<_>, Vec<_>) = reports.iter().partition(|r| zero(r));
    if let Some(bad) = live.iter().find(|r| r.rel_error > GRAD_TOL) {
        return Err(format!("{name}: `{}` rel error {:.3e} (norm {:.3e})", bad.name, bad.rel_error, bad.analytic_norm));
    }
    if live.is_empty() {
        return Err(format!("{name}: every gradient is zero"));
    }
    let worst = live.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let zero_names: Vec<&str> = zeros.iter().map(|r| r.name.as_str()).collect();
    Ok(format!("{name}: {} tensors, max rel error {worst:.2e}; zero on both routes: {zero_names:?}", live.len()))
}

pub fn gradcheck_mlp_head() -> Check {
    let store = ParamStore::new(DType::F64);
    let head = MlpHead::new(&ParamBuilder::new(&store, 11), 6, 10, 4, 0.01).map_err(err)?;
    // Negative pre-activations exercise the leaky branch.
    let x = (randn(12, &[8, 6], DType::F64) - 0.3).map_err(err)?;
    let reports = gradcheck::check(&store.trainable(), || Ok(weighted_sum(&head.forward(&x, true)?, 13)?), GRAD_STEP).map_err(err)?;
    report("MLP head (α=0.01)", &reports)
}

pub fn gradcheck_encoder_block() -> Check {
    let store = ParamStore::new(DType::F64);
    let block = EncoderBlock::new(&ParamBuilder::new(&store, 21), 8, 2, 2.0).map_err(err)?;
    let x = randn(22, &[2, 5, 8], DType::F64);
    let reports = gradcheck::check(&store.trainable(), || Ok(weighted_sum(&block.forward(&x)?, 23)?), GRAD_STEP).map_err(err)?;
    report("encoder block", &reports)
}

pub fn gradcheck_regression_loss() -> Check {
    let store = ParamStore::new(DType::F64);
    let pb = ParamBuilder::new(&store, 31);
    let q = pb.weight("q", &[5, 7], Init::Normal { std: 1.0 }).map_err(err)?;
    let z = pb.weight("z", &[5, 7], Init::Normal { std: 1.0 }).map_err(err)?;
    let loss = || Ok(regression_loss(&q.tensor(), &z.tensor())?.mean_all()?);
    let reports = gradcheck::check(&[q.clone()], loss, GRAD_STEP).map_err(err)?;
    let grads = loss().map_err(err)?.backward().map_err(err)?;
    let target_grad = grads
        .get(z.var().as_tensor())
        .map(|g| g.abs()?.sum_all()?.to_scalar::<f64>())
        .transpose()
        .map_err(err)?
        .unwrap_or(0.0);
    if target_grad != 0.0 {
        return Err(format!("target side received gradient {target_grad}"));
    }
    report("regression loss (target detached)", &reports)
}

/// Criterion 2 in order.
pub fn gradient_suite() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("MLP head", gradcheck_mlp_head),
        ("encoder block", gradcheck_encoder_block),
        ("regression loss", gradcheck_regression_loss),
    ]
}

pub fn determinism_byol() -> Check {
    let data = make_synthetic_dataset(24, 4, 32, 3).map_err(err)?.unlabeled();
    let config = ByolConfig {
        epochs: 2,
        save_every: 1,
        ..tiny_byol(0).config
    };
    let (a, _) = byol::pretrain(&data, config.clone(), 17).map_err(err)?;
    let (b, _) = byol::pretrain(&data, config.clone(), 17).map_err(err)?;
    if a.step_losses != b.step_losses || a.backbone_digest().map_err(err)? != b.backbone_digest().map_err(err)? {
        return Err("fixed-seed BYOL re-run diverged".into());
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let interrupted = CheckpointPolicy {
        dir: Some(dir.path().to_path_buf()),
        config_hash: "h".into(),
        stop_after: Some(1),
    };
    let (partial, _) = byol::pretrain_with(&data, config.clone(), 17, &interrupted).map_err(err)?;
    if partial.epoch != 1 {
        return Err(format!("interrupted run stopped at epoch {}", partial.epoch));
    }
    let resume = CheckpointPolicy {
        stop_after: None,
        ..interrupted
    };
    let (c, _) = byol::resume_or_pretrain(&data, config, 17, &resume).map_err(err)?;
    if c.step_losses != a.step_losses || c.backbone_digest().map_err(err)? != a.backbone_digest().map_err(err)? {
        return Err("resumed BYOL run differs from the unbroken run".into());
    }
    Ok(format!("{} BYOL step losses identical across re-run and resume", a.step_losses.len()))
}

fn same_history(a: &byol_vit::metrics::MetricsHistory, b: &byol_vit::metrics::MetricsHistory) -> bool {
    a.len() == b.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            (x.epoch, &x.split, x.top1, x.loss, x.lr) == (y.epoch, &y.split, y.top1, y.loss, y.lr)
        })
}

pub fn determinism_finetune() -> Check {
    let data = make_synthetic_dataset(30, 5, 32, 4).map_err(err)?;
    let byol = tiny_byol(6);
    let build = || HybridModel::attach_frontend(&byol, TapPoint::Layer2, tiny_vit(4), 5, 8);
    let hp = TrainHp {
        lr: 1e-3,
        batch_size: 8,
        epochs: 3,
        seed: 8,
        ..TrainHp::default()
    };
    let m1 = build().map_err(err)?;
    let r1 = trainer::finetune(&m1, &data, &hp).map_err(err)?;
    let m2 = build().map_err(err)?;
    let r2 = trainer::finetune(&m2, &data, &hp).map_err(err)?;
    let digest = |m: &HybridModel| m.store.digest(|_| true).map_err(err);
    if r1.step_losses != r2.step_losses || !same_history(&r1.history, &r2.history) || digest(&m1)? != digest(&m2)? {
        return Err("fixed-seed fine-tune re-run diverged".into());
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let ctl = RunControl {
        dir: Some(dir.path().to_path_buf()),
        config_hash: "h".into(),
        stop_after: Some(1),
    };
    let m3 = build().map_err(err)?;
    trainer::finetune_with(&m3, &data, &hp, &ctl).map_err(err)?;
    let m4 = build().map_err(err)?;
    let r4 = trainer::finetune_with(&m4, &data, &hp, &RunControl { stop_after: None, ..ctl }).map_err(err)?;
    if r4.step_losses != r1.step_losses || !same_history(&r4.history, &r1.history) || digest(&m4)? != digest(&m1)? || r4.best != r1.best {
        return Err("resumed fine-tune differs from the unbroken run".into());
    }
    Ok(format!("{} fine-tune step losses identical across re-run and resume", r1.step_losses.len()))
}

/// Criterion 7 in order.
pub fn determinism_suite() -> Vec<(&'static str, fn() -> Check)> {
    vec![("BYOL re-run and resume", determinism_byol), ("fine-tune re-run and resume", determinism_finetune)]
}

/// 32-image dataset used by the overfit sanity runs.
pub fn overfit_data() -> Dataset {
    make_synthetic_dataset(32, 4, 32, 99).unwrap()
}
