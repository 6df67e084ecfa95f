use candle_core::{DType, Tensor, D};

use super::ops;
use super::params::{Init, Param, ParamBuilder};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Fully connected layer acting on the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Uniform(±1/√fan_in) weights and bias.
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(pb, d_in, d_out, Init::Uniform { bound }, bias.then_some(Init::Uniform { bound }))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        Ok(Self {
            weight: pb.weight("weight", &[d_out, d_in], weight)?,
            bias: bias.map(|b| pb.weight("bias", &[d_out], b)).transpose()?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.var().as_tensor().dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.var().as_tensor().dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor();
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear input has rank 0".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank ≥ 1") = self.d_out();
        let y = y.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.tensor())?,
            None => y,
        })
    }
}

/// Square-kernel convolution over NCHW input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal weights (fan-out), no bias.
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (c_out * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.weight("weight", &[c_out, c_in, kernel, kernel], Init::Normal { std })?,
            bias: None,
            stride,
            padding,
        })
    }

    pub fn with_bias(mut self, pb: &ParamBuilder) -> Result<Self> {
        let c_out = self.weight.var().as_tensor().dims()[0];
        self.bias = Some(pb.weight("bias", &[c_out], Init::Zeros)?);
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight.tensor(), self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Batch normalization over dimension 1 of (N, C) or (N, C, H, W) input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Self::with_gamma(pb, channels, Init::Ones)
    }

    pub fn with_gamma(pb: &ParamBuilder, channels: usize, gamma: Init) -> Result<Self> {
        Ok(Self {
            weight: pb.weight("weight", &[channels], gamma)?,
            bias: pb.weight("bias", &[channels], Init::Zeros)?,
            running_mean: pb.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: pb.buffer("running_var", &[channels], Init::Ones)?,
        })
    }

    /// With `batch_stats`, normalizes by the batch and updates the running
    /// statistics; otherwise uses the running statistics unchanged.
    pub fn forward(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::Shape(format!("batch norm needs rank ≥ 2, got {dims:?}")));
        }
        let c = dims[1];
        let mut stat_shape = vec![1usize; dims.len()];
        stat_shape[1] = c;
        let reduce: Vec<usize> = (0..dims.len()).filter(|&d| d != 1).collect();
        let (mean, var) = if batch_stats {
            let n: usize = reduce.iter().map(|&d| dims[d]).product();
            if n < 2 {
                return Err(Error::Shape("batch norm in training mode needs more than one value per channel".into()));
            }
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce.as_slice())?;
            self.update_running(&mean, &var, n)?;
            (mean, var)
        } else {
            (
                self.running_mean.tensor().reshape(stat_shape.as_slice())?,
                self.running_var.tensor().reshape(stat_shape.as_slice())?,
            )
        };
        let inv = (var + BN_EPS)?.sqrt()?.recip()?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        let gamma = self.weight.tensor().reshape(stat_shape.as_slice())?;
        let beta = self.bias.tensor().reshape(stat_shape.as_slice())?;
        Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, n: usize) -> Result<()> {
        let mean = mean.detach().flatten_all()?;
        let unbiased = (var.detach().flatten_all()? * (n as f64 / (n - 1) as f64))?;
        let rm = self.running_mean.var().as_tensor();
        let rv = self.running_var.var().as_tensor();
        let new_mean = ((rm * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?;
        let new_var = ((rv * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.weight("weight", &[dim], Init::Ones)?,
            bias: pb.weight("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?)
    }
}

/// `x` for x ≥ 0, `alpha·x` otherwise. With `alpha = 0` this is exactly `relu`.
pub fn leaky_relu(x: &Tensor, alpha: f64) -> Result<Tensor> {
    let pos = x.relu()?;
    if alpha == 0.0 {
        return Ok(pos);
    }
    Ok((pos - (x.neg()?.relu()? * alpha)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(ops::SoftmaxLast)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Smoothed one-hot targets: `1 − ε + ε/K` on the label, `ε/K` elsewhere.
pub fn one_hot(labels: &[usize], n_classes: usize, smoothing: f64, dtype: DType) -> Result<Tensor> {
    let off = smoothing / n_classes as f64;
    let mut v = vec![off; labels.len() * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Shape(format!("label {y} out of range for {n_classes} classes")));
        }
        v[i * n_classes + y] += 1.0 - smoothing;
    }
    Ok(Tensor::from_vec(v, (labels.len(), n_classes), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean cross-entropy of (B, K) logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    let target = one_hot(labels, k, smoothing, logits.dtype())?;
    let lp = log_softmax_last(logits)?;
    Ok((lp.mul(&target)?.sum_all()? * (-1.0 / b as f64))?)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn leaky_relu_zero_slope_is_relu_bitwise() {
        let x = Tensor::new(&[-2.0f32, -0.0, 0.0, 1.5, -1e-30], &Device::Cpu).unwrap();
        let a = leaky_relu(&x, 0.0).unwrap().to_vec1::<f32>().unwrap();
        let b = x.relu().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = leaky_relu(&x, 0.01).unwrap().to_vec1::<f32>().unwrap();
        assert!((c[0] + 0.02).abs() < 1e-7);
        assert_eq!(c[3], 1.5);
    }

    #[test]
    fn uniform_logits_cost_log_k() {
        let logits = Tensor::zeros((4, 5), DType::F64, &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &[0, 1, 2, 3], 0.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert_eq!(argmax_rows(&logits).unwrap(), vec![0; 4]);
    }

    #[test]
    fn batch_norm_training_normalizes_and_tracks() {
        let store = ParamStore::new(DType::F64);
        let bn = BatchNorm::new(&ParamBuilder::new(&store, 0), 2).unwrap();
        let x = Tensor::new(&[[1.0f64, 10.0], [3.0, 30.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec2::<f64>().unwrap();
        assert!((y[0][0] + 1.0).abs() < 1e-4 && (y[1][1] - 1.0).abs() < 1e-4);
        let rm = bn.running_mean.to_vec().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
        let rv = bn.running_var.to_vec().unwrap();
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 0.0], [100.0, -100.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        assert!((s[0][0] - 0.731_058_6).abs() < 1e-6);
        for r in s {
            assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
