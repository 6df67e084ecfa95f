//! CPU kernels with hand-written backward passes: patch unfolding for convolutions
//! and padded max pooling.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

macro_rules! dispatch {
    ($storage:expr, $layout:expr, |$data:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $data = contiguous(v, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $data = contiguous(v, $layout)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("custom op supports f32 and f64 only"),
        }
    };
}

/// Geometry of a square-kernel sliding window over an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(row, col, input_index)` for every in-bounds tap of the window.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let cols = self.cols();
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for c in 0..self.channels {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let col = (c * k + ky) * k + kx;
                                debug_assert!(col < cols);
                                f(row, row * cols + col, plane + iy as usize * self.width + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Copy + Default>(src: &[T], w: &Window) -> Vec<T> {
    let mut out = vec![T::default(); w.rows() * w.cols()];
    w.for_each_tap(|_, dst, s| out[dst] = src[s]);
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], w: &Window) -> Vec<T> {
    let mut out = vec![T::default(); w.batch * w.channels * w.height * w.width];
    w.for_each_tap(|_, s, dst| out[dst] += src[s]);
    out
}

/// Unfolds (B, C, H, W) into (B·Ho·Wo, C·k·k) patch rows.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col(pub Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = &self.0;
        let out = dispatch!(storage, layout, |d| im2col(d, w));
        Ok((out, Shape::from((w.rows(), w.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

/// Adjoint of [`Im2Col`]: scatters patch rows back onto (B, C, H, W), summing overlaps.
#[derive(Debug, Clone, Copy)]
pub struct Col2Im(pub Window);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = &self.0;
        let out = dispatch!(storage, layout, |d| col2im(d, w));
        Ok((out, Shape::from((w.batch, w.channels, w.height, w.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Index of the window maximum for every output cell; padding never wins.
fn max_positions<T: Copy + PartialOrd>(src: &[T], w: &Window) -> Vec<usize> {
    let (ho, wo) = (w.out_height(), w.out_width());
    let mut best = vec![usize::MAX; w.batch * w.channels * ho * wo];
    for bc in 0..w.batch * w.channels {
        let plane = bc * w.height * w.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut arg = usize::MAX;
                for ky in 0..w.kernel {
                    let iy = (oy * w.stride + ky) as isize - w.padding as isize;
                    if iy < 0 || iy >= w.height as isize {
                        continue;
                    }
                    for kx in 0..w.kernel {
                        let ix = (ox * w.stride + kx) as isize - w.padding as isize;
                        if ix < 0 || ix >= w.width as isize {
                            continue;
                        }
                        let i = plane + iy as usize * w.width + ix as usize;
                        if arg == usize::MAX || src[i] > src[arg] {
                            arg = i;
                        }
                    }
                }
                best[(bc * ho + oy) * wo + ox] = arg;
            }
        }
    }
    best
}

/// Max pooling over (B, C, H, W) with implicit −∞ padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool(pub Window);

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = &self.0;
        let out = dispatch!(storage, layout, |d| {
            max_positions(d, w).into_iter().map(|i| d[i]).collect()
        });
        Ok((
            out,
            Shape::from((w.batch, w.channels, w.out_height(), w.out_width())),
        ))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg
            .contiguous()?
            .detach()
            .apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolGrad(self.0))?;
        Ok(Some(g))
    }
}

/// Routes output gradients to the argmax input of each pooling window.
#[derive(Debug, Clone, Copy)]
struct MaxPoolGrad(Window);

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max_pool_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let w = &self.0;
        let n = w.batch * w.channels * w.height * w.width;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let (x, g) = (contiguous(x, l1)?, contiguous(g, l2)?);
                let mut out = vec![0f32; n];
                for (o, i) in max_positions(x, w).into_iter().enumerate() {
                    out[i] += g[o];
                }
                CpuStorage::F32(out)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let (x, g) = (contiguous(x, l1)?, contiguous(g, l2)?);
                let mut out = vec![0f64; n];
                for (o, i) in max_positions(x, w).into_iter().enumerate() {
                    out[i] += g[o];
                }
                CpuStorage::F64(out)
            }
            _ => candle_core::bail!("max_pool_grad: unsupported dtype combination"),
        };
        Ok((out, Shape::from((w.batch, w.channels, w.height, w.width))))
    }
}

/// Softmax over the last dimension, with a fused backward.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxLast;

fn softmax_rows<T: num_like::Float>(src: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

fn softmax_grad_rows<T: num_like::Float>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dst) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    out
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax_last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *layout.dims().last().unwrap_or(&1);
        let out = dispatch!(storage, layout, |d| softmax_rows(d, n.max(1)));
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.detach().contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

#[derive(Debug, Clone, Copy)]
struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = (*l1.dims().last().unwrap_or(&1)).max(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, n))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, n))
            }
            _ => candle_core::bail!("softmax_grad: unsupported dtype combination"),
        };
        Ok((out, l1.shape().clone()))
    }
}

mod num_like {
    pub trait Float: Copy + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self> {
        fn zero() -> Self;
        fn neg_infinity() -> Self;
        fn max(self, other: Self) -> Self;
        fn exp(self) -> Self;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                fn zero() -> Self {
                    0.0
                }
                fn neg_infinity() -> Self {
                    <$t>::NEG_INFINITY
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
            }
        };
    }

    impl_float!(f32);
    impl_float!(f64);
}

fn window(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<Window> {
    let (batch, channels, height, width) = x.dims4()?;
    if height + 2 * padding < kernel || width + 2 * padding < kernel {
        candle_core::bail!(
            "kernel {kernel} does not fit a {height}×{width} input with padding {padding}"
        );
    }
    Ok(Window {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    })
}

/// 2-D convolution of (B, C, H, W) with a (Cout, C, k, k) kernel as one GEMM.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if k != k2 {
        candle_core::bail!("square kernels only, got {k}×{k2}");
    }
    let w = window(x, k, stride, padding)?;
    if w.channels != c_in {
        candle_core::bail!("conv expects {c_in} input channels, got {}", w.channels);
    }
    let (ho, wo) = (w.out_height(), w.out_width());
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.permute((0, 2, 3, 1))?.reshape((w.batch * ho * wo, c_in))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(w))?
    };
    let w_flat = weight.reshape((c_out, c_in * k * k))?;
    cols.matmul(&w_flat.t()?)?
        .reshape((w.batch, ho, wo, c_out))?
        .permute((0, 3, 1, 2))?
        .contiguous()
}

pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let w = window(x, kernel, stride, padding)?;
    x.contiguous()?.apply_op1(MaxPool(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &[f64], dims: (usize, usize, usize, usize), wt: &[f64], c_out: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let (b, c, h, w) = dims;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * c_out * ho * wo];
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((co * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let dev = Device::Cpu;
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 2, 0), (1, 1, 0)] {
            let dims = (2, 3, 9, 7);
            let xv = seq(2 * 3 * 9 * 7, 2.0);
            let wv = seq(4 * 3 * k * k, 1.0);
            let x = Tensor::from_vec(xv.clone(), dims, &dev).unwrap();
            let w = Tensor::from_vec(wv.clone(), (4, 3, k, k), &dev).unwrap();
            let got = conv2d(&x, &w, s, p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = naive_conv(&xv, dims, &wv, 4, k, s, p);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::from_vec(seq(1 * 2 * 5 * 5, 1.0), (1, 2, 5, 5), &dev).unwrap();
        let w = Tensor::from_vec(seq(3 * 2 * 9, 1.0), (3, 2, 3, 3), &dev).unwrap();
        let loss = |x: &Tensor| conv2d(x, &w, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let g = loss(x.as_tensor()).backward().unwrap();
        let analytic = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += h;
            let up = loss(&Tensor::from_vec(v.clone(), (1, 2, 5, 5), &dev).unwrap()).to_scalar::<f64>().unwrap();
            v[i] -= 2.0 * h;
            let down = loss(&Tensor::from_vec(v, (1, 2, 5, 5), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-6 * (1.0 + numeric.abs()));
        }
    }

    #[test]
    fn max_pool_forward_and_gradient() {
        let dev = Device::Cpu;
        let vals: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = Var::from_vec(vals, (1, 1, 4, 4), &dev).unwrap();
        let y = max_pool2d(x.as_tensor(), 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![5.0, 7.0, 13.0, 15.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut want = vec![0f32; 16];
        for i in [5, 7, 13, 15] {
            want[i] = 1.0;
        }
        assert_eq!(gx, want);
        assert_eq!(y.dtype(), DType::F32);
    }
}
