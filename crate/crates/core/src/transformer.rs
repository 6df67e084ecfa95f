//! Transformer classifiers over images or feature maps: ViT (class token and
//! positional table), CVT (sequence pooling) and CCT (convolutional tokenizer).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{softmax_last, Conv2d, LayerNorm, Linear};
use crate::nn::ops::{self, Im2Col, Window};
use crate::nn::{Init, Param, ParamBuilder};

const TRUNC_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    ClassToken,
    SeqPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tokenizer {
    /// Non-overlapping p×p patches (zero-padded), linearly embedded.
    Patchify { patch: usize },
    /// `layers` × (conv k×k stride 1 → rectifier → 3×3/2 max-pool).
    Conv { layers: usize, kernel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub head: HeadKind,
    pub tokenizer: Tokenizer,
}

impl TransformerConfig {
    /// Desk ViT: d = 128, 4 heads, 6 layers, MLP ratio 2.
    pub fn vit(patch: usize) -> Self {
        Self {
            depth: 6,
            heads: 4,
            dim: 128,
            mlp_ratio: 2.0,
            head: HeadKind::ClassToken,
            tokenizer: Tokenizer::Patchify { patch },
        }
    }

    /// CVT-L/p: patch tokenizer with sequence pooling.
    pub fn cvt(depth: usize, patch: usize) -> Self {
        Self {
            depth,
            head: HeadKind::SeqPool,
            ..Self::vit(patch)
        }
    }

    /// CCT-L/k×c: `conv_layers` convolutional tokenizer layers of kernel k.
    pub fn cct(depth: usize, kernel: usize, conv_layers: usize) -> Self {
        Self {
            depth,
            head: HeadKind::SeqPool,
            tokenizer: Tokenizer::Conv {
                layers: conv_layers,
                kernel,
            },
            ..Self::vit(1)
        }
    }

    pub fn has_positional(&self) -> bool {
        self.head == HeadKind::ClassToken
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        match self.tokenizer {
            Tokenizer::Patchify { patch: 0 } => bad("patch must be at least 1".into()),
            Tokenizer::Conv { layers: 0, .. } => bad("conv tokenizer needs at least one layer".into()),
            Tokenizer::Conv { kernel, .. } if kernel % 2 == 0 => bad(format!("conv kernel must be odd, got {kernel}")),
            _ => Ok(()),
        }
    }

    /// Number of tokens produced for an H×W input.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        match self.tokenizer {
            Tokenizer::Patchify { patch } => patch_count(h, w, patch),
            Tokenizer::Conv { layers, .. } => {
                let (mut h, mut w) = (h, w);
                for _ in 0..layers {
                    h = pool_out(h);
                    w = pool_out(w);
                }
                h * w
            }
        }
    }
}

/// `ceil(H/p)·ceil(W/p)`.
pub fn patch_count(h: usize, w: usize, p: usize) -> usize {
    h.div_ceil(p) * w.div_ceil(p)
}

/// Output side of the 3×3, stride 2, pad 1 pooling in the conv tokenizer.
fn pool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// Flattens zero-padded p×p patches of (B, C, H, W) into (B, N, C·p·p), row-major
/// over patches, each patch laid out channel-major.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::InvalidConfig("patch must be at least 1".into()));
    }
    let (b, c, h, w) = x.dims4()?;
    let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let mut x = x.clone();
    if hp > h {
        x = x.pad_with_zeros(2, 0, hp - h)?;
    }
    if wp > w {
        x = x.pad_with_zeros(3, 0, wp - w)?;
    }
    let n = (hp / p) * (wp / p);
    if p == 1 {
        return Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?);
    }
    let cols = x.contiguous()?.apply_op1(Im2Col(Window {
        batch: b,
        channels: c,
        height: hp,
        width: wp,
        kernel: p,
        stride: p,
        padding: 0,
    }))?;
    Ok(cols.reshape((b, n, c * p * p))?)
}

/// Scaled dot-product attention over (…, N, d_head) inputs; returns the mixed
/// values and the row-stochastic weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    let weights = softmax_last(&scores)?;
    Ok((weights.matmul(v)?, weights))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: linear_trunc(&pb.pp("qkv"), dim, 3 * dim)?,
            proj: linear_trunc(&pb.pp("proj"), dim, dim)?,
            heads,
        })
    }

    /// Output (B, N, d) and per-head weights (B, h, N, N).
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, dh))?;
        let pick = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let (mixed, weights) = attention(&q, &k, &v)?;
        let merged = mixed.transpose(1, 2)?.reshape((b, n, d))?;
        Ok((self.proj.forward(&merged)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

fn linear_trunc(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Linear> {
    Linear::with_init(pb, d_in, d_out, Init::TruncNormal { std: TRUNC_STD }, Some(Init::Zeros))
}

/// Pre-norm encoder block: x + MHA(LN(x)), then x + MLP(LN(x)).
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            fc1: linear_trunc(&pb.pp("fc1"), dim, hidden)?,
            fc2: linear_trunc(&pb.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Softmax-weighted average of tokens with scores from a learned d → 1 map.
#[derive(Debug, Clone)]
pub struct SeqPool {
    pub score: Linear,
}

impl SeqPool {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            score: linear_trunc(pb, dim, 1)?,
        })
    }

    /// (B, N) pooling weights.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        softmax_last(&self.score.forward(x)?.squeeze(D::Minus1)?)
    }

    /// (B, N, d) → (B, d).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weights(x)?.unsqueeze(1)?;
        Ok(w.matmul(x)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone)]
enum TokenizerLayers {
    Patch { patch: usize, embed: Linear },
    Conv { convs: Vec<Conv2d> },
}

impl TokenizerLayers {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            TokenizerLayers::Patch { patch, embed } => embed.forward(&patchify(x, *patch)?),
            TokenizerLayers::Conv { convs } => {
                let mut h = x.clone();
                for c in convs {
                    h = ops::max_pool2d(&c.forward(&h)?.relu()?, 3, 2, 1)?;
                }
                let (b, d, hh, ww) = h.dims4()?;
                Ok(h.reshape((b, d, hh * ww))?.transpose(1, 2)?.contiguous()?)
            }
        }
    }
}

/// A transformer classifier built for a fixed (C, H, W) input geometry.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub input_shape: (usize, usize, usize),
    pub n_classes: usize,
    tokenizer: TokenizerLayers,
    cls: Option<Param>,
    pos: Option<Param>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub pool: Option<SeqPool>,
    pub classifier: Linear,
}

impl TransformerModel {
    pub fn new(pb: &ParamBuilder, config: TransformerConfig, input_shape: (usize, usize, usize), n_classes: usize) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = input_shape;
        if c == 0 || h == 0 || w == 0 || n_classes == 0 {
            return Err(Error::Shape(format!("invalid input {input_shape:?} or class count {n_classes}")));
        }
        let d = config.dim;
        let tokenizer = match config.tokenizer {
            Tokenizer::Patchify { patch } => TokenizerLayers::Patch {
                patch,
                embed: linear_trunc(&pb.pp("tokenizer").pp("embed"), c * patch * patch, d)?,
            },
            Tokenizer::Conv { layers, kernel } => {
                let tpb = pb.pp("tokenizer");
                let convs = (0..layers)
                    .map(|i| Conv2d::new(&tpb.pp(i).pp("conv"), if i == 0 { c } else { d }, d, kernel, 1, kernel / 2))
                    .collect::<Result<Vec<_>>>()?;
                TokenizerLayers::Conv { convs }
            }
        };
        let n = config.token_count(h, w);
        let (cls, pos) = if config.has_positional() {
            (
                Some(pb.weight("cls_token", &[1, 1, d], Init::TruncNormal { std: TRUNC_STD })?),
                Some(pb.weight("pos_embed", &[1, n + 1, d], Init::TruncNormal { std: TRUNC_STD })?),
            )
        } else {
            (None, None)
        };
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&pb.pp("blocks").pp(i), d, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&pb.pp("norm"), d)?;
        let pool = match config.head {
            HeadKind::SeqPool => Some(SeqPool::new(&pb.pp("seq_pool"), d)?),
            HeadKind::ClassToken => None,
        };
        let classifier = linear_trunc(&pb.pp("classifier"), d, n_classes)?;
        Ok(Self {
            config,
            input_shape,
            n_classes,
            tokenizer,
            cls,
            pos,
            blocks,
            norm,
            pool,
            classifier,
        })
    }

    pub fn token_count(&self) -> usize {
        self.config.token_count(self.input_shape.1, self.input_shape.2)
    }

    /// Tokenizer output (B, N, d), plus the positional table rows for those tokens.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != self.input_shape {
            return Err(Error::Shape(format!("model built for {:?}, got {:?}", self.input_shape, (c, h, w))));
        }
        let tokens = self.tokenizer.forward(x)?;
        if tokens.dim(0)? == 0 || tokens.dim(1)? == 0 {
            return Err(Error::Shape("tokenizer produced no tokens".into()));
        }
        match &self.pos {
            Some(pos) => {
                let n = tokens.dim(1)?;
                let table = pos.tensor();
                if table.dim(1)? != n + 1 {
                    return Err(Error::Shape(format!(
                        "{n} tokens but the positional table holds {}",
                        table.dim(1)? - 1
                    )));
                }
                Ok(tokens.broadcast_add(&table.narrow(1, 1, n)?)?)
            }
            None => Ok(tokens),
        }
    }

    /// Classifies position-embedded tokens (B, N, d).
    pub fn classify_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let b = tokens.dim(0)?;
        let mut h = match (&self.cls, &self.pos) {
            (Some(cls), Some(pos)) => {
                let d = self.config.dim;
                let first = (cls.tensor() + pos.tensor().narrow(1, 0, 1)?)?.broadcast_as((b, 1, d))?;
                Tensor::cat(&[&first.contiguous()?, tokens], 1)?
            }
            _ => tokens.clone(),
        };
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        h = self.norm.forward(&h)?;
        let pooled = match &self.pool {
            Some(pool) => pool.forward(&h)?,
            None => h.narrow(1, 0, 1)?.squeeze(1)?,
        };
        self.classifier.forward(&pooled)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.classify_tokens(&self.embed(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn patch_counts() {
        assert_eq!(patch_count(96, 96, 96), 1);
        assert_eq!(patch_count(12, 12, 1), 144);
        assert_eq!(patch_count(24, 24, 14), 4);
    }

    #[test]
    fn patchify_layout_is_row_major_channel_major() {
        let x = Tensor::arange(0f32, 2.0 * 16.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.dims(), &[1, 4, 8]);
        let rows = t.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(rows[1], vec![2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
        let t3 = patchify(&x, 3).unwrap();
        assert_eq!(t3.dims(), &[1, 4, 18]);
        assert_eq!(t3.squeeze(0).unwrap().to_vec2::<f32>().unwrap()[3][0], 15.0);
    }

    #[test]
    fn two_token_softmax_case() {
        let q = Tensor::new(&[[1.0f64], [0.0]], &Device::Cpu).unwrap();
        let (out, w) = attention(&q, &q, &q).unwrap();
        let w = w.to_vec2::<f64>().unwrap();
        assert!((w[0][0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((w[0][1] - 0.268_941_421_4).abs() < 1e-9);
        assert!((out.to_vec2::<f64>().unwrap()[0][0] - w[0][0]).abs() < 1e-12);
    }

    #[test]
    fn cct_token_count_follows_pooling() {
        let cfg = TransformerConfig::cct(2, 3, 1);
        assert_eq!(cfg.token_count(12, 12), 36);
        assert_eq!(cfg.token_count(1, 1), 1);
        let store = ParamStore::new(DType::F32);
        let mut small = cfg;
        small.dim = 16;
        let m = TransformerModel::new(&ParamBuilder::new(&store, 0), small, (8, 12, 12), 5).unwrap();
        let x = Tensor::zeros((2, 8, 12, 12), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.embed(&x).unwrap().dims(), &[2, 36, 16]);
        assert_eq!(m.forward(&x).unwrap().dims(), &[2, 5]);
    }
}
