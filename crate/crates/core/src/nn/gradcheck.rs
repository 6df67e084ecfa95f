//! Central finite-difference comparison of autograd gradients.

use candle_core::{DType, Tensor};

use super::params::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub elements: usize,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, tiny).
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compares gradients of the scalar `loss` with respect to every trainable
/// parameter in `params`, perturbing each element by ±`h`.
///
/// Parameters should live in an `f64` store; single precision works but needs
/// a looser threshold.
pub fn check<F>(params: &[Param], loss: F, h: f64) -> Result<Vec<GradReport>>
where
    F: Fn() -> Result<Tensor>,
{
    let eval = |loss: &F| -> Result<f64> { Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let out = loss()?;
    if out.elem_count() != 1 {
        return Err(Error::Shape("gradient check needs a scalar loss".into()));
    }
    let grads = out.backward()?;
    let mut reports = Vec::new();
    for p in params.iter().filter(|p| p.is_trainable()) {
        let t = p.var().as_tensor();
        let analytic = match grads.get(t) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; t.elem_count()],
        };
        let base = p.to_vec()?;
        let shape = t.dims().to_vec();
        let dtype = t.dtype();
        let mut numeric = Vec::with_capacity(base.len());
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            p.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), t.device())?.to_dtype(dtype)?)?;
            let up = eval(&loss)?;
            probe[i] = base[i] - h;
            p.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), t.device())?.to_dtype(dtype)?)?;
            let down = eval(&loss)?;
            probe[i] = base[i];
            numeric.push((up - down) / (2.0 * h));
        }
        p.set(&Tensor::from_vec(base, shape.as_slice(), t.device())?.to_dtype(dtype)?)?;
        reports.push(compare(p.name(), &analytic, &numeric));
    }
    Ok(reports)
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradReport {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let (na, nn) = (norm(analytic), norm(numeric));
    let denom = na.max(nn).max(f64::MIN_POSITIVE);
    let rel_error = if na == 0.0 && nn == 0.0 { 0.0 } else { norm(&diff) / denom };
    GradReport {
        name: name.to_string(),
        elements: analytic.len(),
        rel_error,
        analytic_norm: na,
        numeric_norm: nn,
    }
}

pub fn max_rel_error(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamBuilder, ParamStore};

    #[test]
    fn polynomial_gradient_is_exact_enough() {
        let store = ParamStore::new(DType::F64);
        let w = ParamBuilder::new(&store, 4).weight("w", &[5], Init::Normal { std: 1.0 }).unwrap();
        let reports = check(&store.all(), || Ok(w.tensor().powf(3.0)?.sum_all()?), 1e-5).unwrap();
        assert!(max_rel_error(&reports) < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let r = compare("x", &[1.0, 2.0], &[1.0, 2.5]);
        assert!(r.rel_error > 0.1);
    }
}
