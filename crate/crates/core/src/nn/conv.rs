//! Convolution as per-image `im2col` followed by a gemm call.
//!
//! Working one image at a time keeps the unrolled patch matrix in cache and
//! writes the output directly in NCHW order. The backward pass reuses the
//! same lowering: the input gradient is `Wᵀ · g` scattered back with
//! `col2im`, the kernel gradient accumulates `g · colᵀ` over the batch.

use candle_core::{bail, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor, WithDType};
use gemm::Parallelism;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Patch length `C * k * k`.
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output positions per image.
    fn cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.cout * self.cols()
    }

    /// A 1x1, stride-1, unpadded convolution needs no unrolling.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Calls `f(col_offset, img_offset, len)` for every run of output
    /// columns whose taps fall inside the unpadded image of one sample.
    /// Within a run, column `j` reads image offset `img_offset + j * stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let cols = self.cols();
        let plane = self.height * self.width;
        let (s, p) = (self.stride, self.pad);
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    // Valid ox satisfy 0 <= ox*s + kx - p < width.
                    let lo = (p.saturating_sub(kx)).div_ceil(s);
                    let hi = ((self.width + p).saturating_sub(kx)).div_ceil(s).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img = c * plane + iy as usize * self.width + lo * s + kx - p;
                        f(row * cols + oy * wo + lo, img, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, img: &[T], col: &mut [T]) {
        col.fill(T::zero());
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            if s == 1 {
                col[c..c + len].copy_from_slice(&img[i..i + len]);
            } else {
                for (j, v) in col[c..c + len].iter_mut().enumerate() {
                    *v = img[i + j * s];
                }
            }
        });
    }

    fn col2im<T: WithDType>(&self, col: &[T], img: &mut [T]) {
        let s = self.stride;
        self.for_each_run(|c, i, len| {
            if s == 1 {
                for (d, &v) in img[i..i + len].iter_mut().zip(&col[c..c + len]) {
                    *d += v;
                }
            } else {
                for (j, &v) in col[c..c + len].iter().enumerate() {
                    img[i + j * s] += v;
                }
            }
        });
    }
}

/// Row-major `dst[m×n] (+)= lhs · rhs` with explicit strides for the operands.
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: every operand slice covers the strided extent addressed by
    // gemm, and dst does not alias lhs or rhs.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("conv2d expects contiguous operands"),
    }
}

macro_rules! dispatch2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous_slice(a, $l1)?, contiguous_slice(b, $l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous_slice(a, $l1)?, contiguous_slice(b, $l2)?))
            }
            _ => bail!("{}: only matching f32 or f64 operands are supported", $name),
        }
    };
}

/// Forward: `(x, kernel) -> y`.
struct ConvFwd(Geometry);

impl ConvFwd {
    fn run<T: WithDType>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let g = self.0;
        let (k, n) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); g.batch * g.out_len()];
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * n }];
        for b in 0..g.batch {
            let img = &x[b * g.image_len()..(b + 1) * g.image_len()];
            let patches: &[T] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut col);
                &col
            };
            let dst = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
            matmul(g.cout, n, k, dst, false, w, (k, 1), patches, (n, 1));
        }
        out
    }
}

impl CustomOp2 for ConvFwd {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (ho, wo) = g.out_hw();
        let out = dispatch2!("conv2d", s1, l1, s2, l2, |x, w| self.run(x, w));
        Ok((out, Shape::from((g.batch, g.cout, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        // Constant operands (input images, frozen kernels) need no gradient.
        let grad = grad.contiguous()?;
        let gx = match x.track_op() {
            true => Some(grad.apply_op2_no_bwd(w, &ConvGradInput(self.0))?),
            false => None,
        };
        let gw = match w.track_op() {
            true => Some(x.apply_op2_no_bwd(&grad, &ConvGradKernel(self.0))?),
            false => None,
        };
        Ok((gx, gw))
    }
}

/// `(grad_y, kernel) -> grad_x`.
struct ConvGradInput(Geometry);

impl ConvGradInput {
    fn run<T: WithDType>(&self, gy: &[T], w: &[T]) -> Vec<T> {
        let g = self.0;
        let (k, n) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); g.batch * g.image_len()];
        let mut col = vec![T::zero(); k * n];
        for b in 0..g.batch {
            let src = &gy[b * g.out_len()..(b + 1) * g.out_len()];
            let dst = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
            if g.is_pointwise() {
                matmul(k, n, g.cout, dst, false, w, (1, k), src, (n, 1));
            } else {
                matmul(k, n, g.cout, &mut col, false, w, (1, k), src, (n, 1));
                g.col2im(&col, dst);
            }
        }
        out
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch2!("conv2d-grad-input", s1, l1, s2, l2, |gy, w| self.run(gy, w));
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }
}

/// `(x, grad_y) -> grad_kernel`.
struct ConvGradKernel(Geometry);

impl ConvGradKernel {
    fn run<T: WithDType>(&self, x: &[T], gy: &[T]) -> Vec<T> {
        let g = self.0;
        let (k, n) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); g.cout * k];
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * n }];
        for b in 0..g.batch {
            let img = &x[b * g.image_len()..(b + 1) * g.image_len()];
            let patches: &[T] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut col);
                &col
            };
            let src = &gy[b * g.out_len()..(b + 1) * g.out_len()];
            matmul(g.cout, k, n, &mut out, b > 0, src, (n, 1), patches, (1, n));
        }
        out
    }
}

impl CustomOp2 for ConvGradKernel {
    fn name(&self) -> &'static str {
        "conv2d-grad-kernel"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch2!("conv2d-grad-kernel", s1, l1, s2, l2, |x, gy| self.run(x, gy));
        Ok((out, Shape::from((g.cout, g.channels, g.kernel, g.kernel))))
    }
}

/// 2-d convolution of `x: [B, C, H, W]` with a square `kernel: [Cout, C, k, k]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (cout, cin, kh, kw) = kernel.dims4()?;
    if cin != channels {
        bail!("conv2d: input has {channels} channels, kernel expects {cin}");
    }
    if kh != kw {
        bail!("conv2d: only square kernels are supported, got {kh}x{kw}");
    }
    if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
        bail!("conv2d: kernel {kh} does not fit a {height}x{width} input with padding {pad}");
    }
    let geometry = Geometry {
        batch,
        channels,
        height,
        width,
        cout,
        kernel: kh,
        stride,
        pad,
    };
    x.contiguous()?.apply_op2(&kernel.contiguous()?, ConvFwd(geometry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    /// Direct seven-loop convolution used as the reference.
    fn naive(x: &[f64], dims: (usize, usize, usize, usize), k: &[f64], kd: (usize, usize, usize), stride: usize, pad: usize) -> Vec<f64> {
        let (b, c, h, w) = dims;
        let (co, _, ks) = kd;
        let ho = (h + 2 * pad - ks) / stride + 1;
        let wo = (w + 2 * pad - ks) / stride + 1;
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((o * c + ci) * ks + ky) * ks + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn matches_direct_convolution() -> Result<()> {
        let dev = Device::Cpu;
        for &(stride, pad, ks) in &[(1, 1, 3), (2, 1, 4), (1, 0, 4), (2, 0, 3), (1, 0, 1), (2, 0, 1)] {
            let dims = (2, 3, 8, 8);
            let xs = ramp(2 * 3 * 64, 0.1);
            let ks_data = ramp(4 * 3 * ks * ks, 0.05);
            let x = Tensor::from_vec(xs.clone(), (2, 3, 8, 8), &dev)?;
            let k = Tensor::from_vec(ks_data.clone(), (4, 3, ks, ks), &dev)?;
            let got: Vec<f64> = conv2d(&x, &k, stride, pad)?.flatten_all()?.to_vec1()?;
            let want = naive(&xs, dims, &ks_data, (4, 3, ks), stride, pad);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            // Candle's own convolution as a second reference.
            let reference: Vec<f64> = x.conv2d(&k, pad, stride, 1, 1)?.flatten_all()?.to_vec1()?;
            for (a, b) in got.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        Ok(())
    }

    #[test]
    fn input_gradient_matches_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(ramp(2 * 2 * 5 * 5, 0.1), (2, 2, 5, 5), &dev)?)?;
        let k = Var::from_tensor(&Tensor::from_vec(ramp(3 * 2 * 9, 0.07), (3, 2, 3, 3), &dev)?)?;
        let loss = |x: &Tensor, k: &Tensor| -> Result<Tensor> { conv2d(x, k, 2, 1)?.sqr()?.sum_all() };
        let grads = loss(x.as_tensor(), k.as_tensor())?.backward()?;
        for (var, is_x) in [(&x, true), (&k, false)] {
            let analytic: Vec<f64> = grads.get(var).unwrap().flatten_all()?.to_vec1()?;
            let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
            let h = 1e-6;
            for i in (0..base.len()).step_by(3) {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let shape = var.as_tensor().shape().clone();
                let eval = |v: Vec<f64>| -> Result<f64> {
                    let t = Tensor::from_vec(v, shape.clone(), &dev)?;
                    let l = if is_x { loss(&t, k.as_tensor())? } else { loss(x.as_tensor(), &t)? };
                    l.to_scalar::<f64>()
                };
                let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
                assert!((numeric - analytic[i]).abs() < 1e-5 * (1.0 + numeric.abs()));
            }
        }
        assert_eq!(x.dtype(), DType::F64);
        Ok(())
    }
}
