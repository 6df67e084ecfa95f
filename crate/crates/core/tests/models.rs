mod common;

use approx::assert_abs_diff_eq;
use byol_vit::backbone::{BackboneConfig, Family, TapPoint};
use byol_vit::byol::{ByolConfig, ByolState};
use byol_vit::data::{make_synthetic_dataset, stack_images, ImageTensor};
use byol_vit::nn::{ParamBuilder, ParamStore};
use byol_vit::rng;
use byol_vit::trainer::{self, Classifier, ConvNetClassifier, HybridModel, TrainHp};
use byol_vit::transformer::{attention, SeqPool, TransformerConfig, TransformerModel};
use byol_vit::Error;
use candle_core::{DType, Device, Tensor};

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, &[]);
    let v: Vec<f64> = (0..shape.iter().product()).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn small_byol(seed: u64) -> ByolState {
    ByolState::new(
        ByolConfig {
            backbone: BackboneConfig::desk(Family::R18),
            proj_hidden: 32,
            proj_out: 16,
            image_size: 32,
            batch_size: 8,
            epochs: 1,
            ..ByolConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn model(config: TransformerConfig, input: (usize, usize, usize)) -> (ParamStore, TransformerModel) {
    let store = ParamStore::new(DType::F64);
    let m = TransformerModel::new(&ParamBuilder::new(&store, 3), config, input, 5).unwrap();
    (store, m)
}

fn permute_tokens(t: &Tensor, order: &[u32]) -> Tensor {
    let idx = Tensor::new(order, &Device::Cpu).unwrap();
    t.index_select(&idx, 1).unwrap()
}

#[test]
fn vit_logits_ignore_token_order_once_positions_are_attached() {
    let mut cfg = TransformerConfig::vit(4);
    cfg.dim = 16;
    cfg.depth = 2;
    let (_, m) = model(cfg, (3, 8, 8));
    assert_eq!(m.token_count(), 4);
    let tokens = m.embed(&randn(1, &[2, 3, 8, 8])).unwrap();
    let a = m.classify_tokens(&tokens).unwrap();
    let b = m.classify_tokens(&permute_tokens(&tokens, &[2, 0, 3, 1])).unwrap();
    for (x, y) in flat(&a).iter().zip(flat(&b)) {
        assert_abs_diff_eq!(*x, y, epsilon = 1e-10);
    }
}

#[test]
fn seq_pool_encoder_is_permutation_invariant() {
    for cfg in [TransformerConfig::cvt(2, 2), TransformerConfig::cct(2, 3, 1)] {
        let (_, m) = model(TransformerConfig { dim: 16, ..cfg }, (3, 8, 8));
        let tokens = m.embed(&randn(2, &[2, 3, 8, 8])).unwrap();
        let n = tokens.dim(1).unwrap() as u32;
        let reversed: Vec<u32> = (0..n).rev().collect();
        let a = flat(&m.classify_tokens(&tokens).unwrap());
        let b = flat(&m.classify_tokens(&permute_tokens(&tokens, &reversed)).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
        }
    }
}

#[test]
fn zero_classifier_gives_uniform_logits() {
    let (_, m) = model(TransformerConfig { dim: 16, ..TransformerConfig::vit(4) }, (3, 8, 8));
    m.classifier.weight.set(&Tensor::zeros((5, 16), DType::F64, &Device::Cpu).unwrap()).unwrap();
    if let Some(b) = &m.classifier.bias {
        b.set(&Tensor::zeros(5, DType::F64, &Device::Cpu).unwrap()).unwrap();
    }
    for row in m.forward(&randn(3, &[3, 3, 8, 8])).unwrap().to_vec2::<f64>().unwrap() {
        assert!(row.iter().all(|&v| v == row[0]));
    }
}

#[test]
fn seq_pool_degenerate_cases() {
    let store = ParamStore::new(DType::F64);
    let pool = SeqPool::new(&ParamBuilder::new(&store, 4), 6).unwrap();
    let one = randn(5, &[2, 1, 6]);
    assert_eq!(flat(&pool.forward(&one).unwrap()), flat(&one));

    pool.score.weight.set(&Tensor::zeros((1, 6), DType::F64, &Device::Cpu).unwrap()).unwrap();
    let x = randn(6, &[2, 4, 6]);
    let mean = flat(&x.mean(1).unwrap());
    for (a, b) in flat(&pool.forward(&x).unwrap()).iter().zip(&mean) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn attention_special_cases() {
    let v = randn(7, &[1, 1, 3]);
    let (out, w) = attention(&randn(8, &[1, 1, 3]), &randn(9, &[1, 1, 3]), &v).unwrap();
    assert_eq!(flat(&w), vec![1.0]);
    assert_eq!(flat(&out), flat(&v));

    let qkv = Tensor::new(&[[[1.0f64], [0.0]]], &Device::Cpu).unwrap();
    let (_, w) = attention(&qkv, &qkv, &qkv).unwrap();
    let w = flat(&w);
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(w[0], e / (e + 1.0), epsilon = 1e-12);
    assert_abs_diff_eq!(w[1], 1.0 / (e + 1.0), epsilon = 1e-12);
    assert_abs_diff_eq!(w[0], 0.731, epsilon = 5e-4);
}

#[test]
fn cct_tokenizer_handles_a_single_pixel() {
    let (_, m) = model(TransformerConfig { dim: 8, ..TransformerConfig::cct(2, 3, 1) }, (3, 1, 1));
    assert_eq!(m.token_count(), 1);
    assert_eq!(m.forward(&randn(1, &[2, 3, 1, 1])).unwrap().dims(), [2, 5]);
}

#[test]
fn attach_frontend_geometry_on_full_resnet50() {
    let byol = ByolState::new(
        ByolConfig {
            backbone: BackboneConfig::new(Family::R50, 1.0),
            ..ByolConfig::default()
        },
        0,
    )
    .unwrap();
    let h = HybridModel::attach_frontend(&byol, TapPoint::Layer2, TransformerConfig::vit(1), 5, 0).unwrap();
    assert_eq!((h.tokens_per_image(), h.head_input_shape().0), (144, 512));
    let h = HybridModel::attach_frontend(&byol, TapPoint::Layer4, TransformerConfig::vit(3), 5, 0).unwrap();
    assert_eq!(h.tokens_per_image(), 1);
    assert!(matches!(
        HybridModel::attach_frontend(&byol, TapPoint::Layer4, TransformerConfig::vit(4), 5, 0),
        Err(Error::Shape(_))
    ));
}

/// Classifier returning the same logits for every input.
struct Constant {
    store: ParamStore,
    logits: Vec<f32>,
}

impl Classifier for Constant {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn n_classes(&self) -> usize {
        self.logits.len()
    }
    fn image_size(&self) -> usize {
        16
    }
    fn logits(&self, x: &Tensor, _train: bool) -> byol_vit::Result<Tensor> {
        let b = x.dim(0)?;
        Ok(Tensor::new(self.logits.as_slice(), &Device::Cpu)?.unsqueeze(0)?.repeat((b, 1))?)
    }
}

#[test]
fn evaluate_counting_and_closed_forms() {
    let data = make_synthetic_dataset(25, 5, 16, 0).unwrap();
    let flat_model = Constant {
        store: ParamStore::new(DType::F32),
        logits: vec![0.0; 5],
    };
    let (top1, loss) = trainer::evaluate(&flat_model, &data).unwrap();
    // Ties go to class 0, which holds a fifth of the balanced labels.
    assert_abs_diff_eq!(top1, 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(loss, 5f64.ln(), epsilon = 1e-6);

    let labels = data.labels().unwrap();
    let only_class_3 = data.select(&(0..data.len()).filter(|&i| labels[i] == 3).collect::<Vec<_>>());
    let memorizer = Constant {
        store: ParamStore::new(DType::F32),
        logits: vec![0.0, 0.0, 0.0, 9.0, 0.0],
    };
    assert_eq!(trainer::evaluate(&memorizer, &only_class_3).unwrap().0, 1.0);
}

#[test]
fn evaluate_is_pure() {
    let data = make_synthetic_dataset(10, 5, 32, 1).unwrap();
    let m = ConvNetClassifier::scratch(BackboneConfig::desk(Family::R18), 32, 5, 0, DType::F32).unwrap();
    let before = m.store.digest(|_| true).unwrap();
    let first = trainer::evaluate(&m, &data).unwrap();
    assert_eq!(trainer::evaluate(&m, &data).unwrap(), first);
    assert_eq!(m.store.digest(|_| true).unwrap(), before);
}

#[test]
fn layer2_freeze_leaves_gradients_only_on_later_stages() {
    let byol = small_byol(1);
    let m = ConvNetClassifier::from_byol(&byol, Some(TapPoint::Layer2), 5, 2).unwrap();
    let data = make_synthetic_dataset(10, 5, 32, 2).unwrap();
    let imgs: Vec<&ImageTensor> = data.images().iter().collect();
    let logits = m.logits(&stack_images(&imgs, DType::F32).unwrap(), true).unwrap();
    let loss = byol_vit::nn::layers::cross_entropy(&logits, data.labels().unwrap(), 0.0).unwrap();
    let grads = loss.backward().unwrap();
    for p in m.store.weights() {
        let nonzero = grads
            .get(p.var().as_tensor())
            .map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0)
            .unwrap_or(false);
        let later = ["backbone.layer3.", "backbone.layer4.", "fc."].iter().any(|s| p.name().starts_with(s));
        if !later {
            assert!(!nonzero, "{} received a gradient", p.name());
        }
    }
    let fc = m.store.get("fc.weight").unwrap();
    assert!(grads.get(fc.var().as_tensor()).is_some());
}

#[test]
fn byol_target_receives_no_gradient() {
    let state = small_byol(3);
    let v1 = randn(10, &[4, 3, 32, 32]).to_dtype(DType::F32).unwrap();
    let v2 = randn(11, &[4, 3, 32, 32]).to_dtype(DType::F32).unwrap();
    let grads = state.loss(&v1, &v2).unwrap().backward().unwrap();
    assert!(state.target.store.all().iter().all(|p| grads.get(p.var().as_tensor()).is_none()));
    let predictor = state.online.store.with_prefix("predictor");
    assert!(!predictor.is_empty());
    assert!(predictor.iter().any(|p| grads.get(p.var().as_tensor()).is_some()));
}

#[test]
fn model_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_synthetic_dataset(10, 5, 32, 3).unwrap();
    let byol = small_byol(4);
    let build = |seed| HybridModel::attach_frontend(&byol, TapPoint::Layer1, common::tiny_vit(8), 5, seed).unwrap();
    let m = build(1);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    trainer::save_model(&m, &a, "cfg", serde_json::json!({})).unwrap();
    let fresh = build(2);
    assert_ne!(trainer::evaluate(&fresh, &data).unwrap(), trainer::evaluate(&m, &data).unwrap());
    trainer::load_model(&fresh, &a, "cfg").unwrap();
    assert_eq!(trainer::evaluate(&fresh, &data).unwrap(), trainer::evaluate(&m, &data).unwrap());
    trainer::save_model(&fresh, &b, "cfg", serde_json::json!({})).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(trainer::load_model(&fresh, &a, "other").is_err());
}

#[test]
fn best_checkpoint_tracks_the_running_maximum() {
    let data = make_synthetic_dataset(40, 4, 32, 5).unwrap();
    let byol = small_byol(5);
    let m = HybridModel::attach_frontend(&byol, TapPoint::Layer2, common::tiny_vit(4), 4, 0).unwrap();
    let hp = TrainHp {
        lr: 3e-3,
        batch_size: 8,
        epochs: 6,
        val_fraction: 0.25,
        ..TrainHp::default()
    };
    let report = trainer::finetune(&m, &data, &hp).unwrap();
    let val = report.history.top1("val");
    assert_eq!(val.len(), 6);
    let (epoch, top1) = report.best.unwrap();
    let max = val.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(top1, max);
    assert_eq!(epoch, val.iter().position(|&v| v == max).unwrap() + 1);
    report.restore_best(&m).unwrap();
}

#[test]
fn convnet_finetune_is_reproducible() {
    let data = make_synthetic_dataset(20, 5, 32, 6).unwrap();
    let byol = small_byol(6);
    let hp = TrainHp {
        batch_size: 8,
        epochs: 2,
        seed: 4,
        ..TrainHp::default()
    };
    let run = || {
        let (m, r) = trainer::finetune_supervised_convnet(Some(&byol), byol.config.backbone, 32, Some(TapPoint::Layer2), &data, &hp).unwrap();
        (m.store.digest(|_| true).unwrap(), r.step_losses, r.history.losses("val"))
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let data = make_synthetic_dataset(10, 5, 32, 7).unwrap();
    let m = ConvNetClassifier::scratch(BackboneConfig::desk(Family::R18), 32, 5, 0, DType::F32).unwrap();
    m.fc.weight.set(&Tensor::full(f32::NAN, (5, m.backbone.out_channels()), &Device::Cpu).unwrap()).unwrap();
    let hp = TrainHp {
        epochs: 1,
        batch_size: 5,
        seed: 12,
        val_fraction: 0.0,
        ..TrainHp::default()
    };
    match trainer::finetune(&m, &data, &hp) {
        Err(Error::NonFiniteLoss { epoch, batch, seed, .. }) => assert_eq!((epoch, batch, seed), (1, 0, 12)),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
