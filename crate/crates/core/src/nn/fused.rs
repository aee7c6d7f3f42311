//! Elementwise and layout ops with hand-written backward passes.
//!
//! Each op runs as a single pass over contiguous memory; the composed
//! candle equivalents allocate several intermediates per call.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType};

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("fused op expects contiguous operands"),
    }
}

macro_rules! map1 {
    ($name:expr, $s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(a) => CpuStorage::F32($f(slice(a, $l)?)),
            CpuStorage::F64(a) => CpuStorage::F64($f(slice(a, $l)?)),
            _ => bail!("{}: only f32 and f64 are supported", $name),
        }
    };
}

macro_rules! map2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(slice(a, $l1)?, slice(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(slice(a, $l1)?, slice(b, $l2)?)),
            _ => bail!("{}: only matching f32 or f64 operands are supported", $name),
        }
    };
}

macro_rules! map3 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, $f:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                CpuStorage::F32($f(slice(a, $l1)?, slice(b, $l2)?, slice(c, $l3)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                CpuStorage::F64($f(slice(a, $l1)?, slice(b, $l2)?, slice(c, $l3)?))
            }
            _ => bail!("{}: only matching f32 or f64 operands are supported", $name),
        }
    };
}

fn map_each<T: WithDType>(a: &[T], f: impl Fn(f64) -> f64) -> Vec<T> {
    a.iter().map(|&x| T::from_f64(f(x.to_f64()))).collect()
}

fn zip_map<T: WithDType>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| T::from_f64(f(x.to_f64(), y.to_f64()))).collect()
}

struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let k = self.0;
        let out = map1!("leaky-relu", s, l, |x| map_each(x, |v| if v > 0.0 { v } else { v * k }));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

/// `(x, g) -> g * (x > 0 ? 1 : slope)`.
struct LeakyReluGrad(f64);

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let k = self.0;
        let out = map2!("leaky-relu-grad", s1, l1, s2, l2, |x, g| zip_map(x, g, |x, g| if x > 0.0 {
            g
        } else {
            g * k
        }));
        Ok((out, l1.shape().clone()))
    }
}

struct Tanh;

impl CustomOp1 for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = map1!("tanh", s, l, |x| map_each(x, |v| {
            let e = (-2.0 * v.abs()).exp();
            v.signum() * (1.0 - e) / (1.0 + e)
        }));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &TanhGrad)?))
    }
}

/// `(y, g) -> g * (1 - y^2)`.
struct TanhGrad;

impl CustomOp2 for TanhGrad {
    fn name(&self) -> &'static str {
        "tanh-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = map2!("tanh-grad", s1, l1, s2, l2, |y, g| zip_map(y, g, |y, g| g * (1.0 - y * y)));
        Ok((out, l1.shape().clone()))
    }
}

/// A tensor viewed as `[outer, mid, inner]` around one axis.
#[derive(Debug, Clone, Copy)]
struct Split3 {
    outer: usize,
    mid: usize,
    inner: usize,
}

impl Split3 {
    fn around(shape: &Shape, dim: usize) -> Self {
        let d = shape.dims();
        Self {
            outer: d[..dim].iter().product(),
            mid: d[dim],
            inner: d[dim + 1..].iter().product(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `a * sigmoid(b)` with `[a ; b]` split along `mid`.
struct Glu(Split3, Shape);

impl Glu {
    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let half = mid / 2 * inner;
        let mut out = Vec::with_capacity(outer * half);
        for o in 0..outer {
            let base = o * mid * inner;
            let (a, b) = (&x[base..base + half], &x[base + half..base + 2 * half]);
            out.extend(a.iter().zip(b).map(|(&a, &b)| T::from_f64(a.to_f64() * sigmoid(b.to_f64()))));
        }
        out
    }
}

impl CustomOp1 for Glu {
    fn name(&self) -> &'static str {
        "glu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map1!("glu", s, l, |x| self.run(x)), self.1.clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GluGrad(self.0))?))
    }
}

struct GluGrad(Split3);

impl GluGrad {
    fn run<T: WithDType>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let half = mid / 2 * inner;
        let mut out = vec![T::zero(); outer * mid * inner];
        for o in 0..outer {
            let base = o * mid * inner;
            let gy = &g[o * half..(o + 1) * half];
            for j in 0..half {
                let a = x[base + j].to_f64();
                let s = sigmoid(x[base + half + j].to_f64());
                let gj = gy[j].to_f64();
                out[base + j] = T::from_f64(gj * s);
                out[base + half + j] = T::from_f64(gj * a * s * (1.0 - s));
            }
        }
        out
    }
}

impl CustomOp2 for GluGrad {
    fn name(&self) -> &'static str {
        "glu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map2!("glu-grad", s1, l1, s2, l2, |x, g| self.run(x, g)), l1.shape().clone()))
    }
}

const PIXEL_NORM_EPS: f64 = 1e-8;

/// `x / sqrt(mean_c x^2 + eps)` over axis 1.
struct PixelNorm(Split3);

impl PixelNorm {
    /// Per-position `1 / sqrt(mean_c x^2 + eps)`.
    fn inv_norms<T: WithDType>(&self, x: &[T]) -> Vec<f64> {
        let Split3 { outer, mid, inner } = self.0;
        let mut acc = vec![0.0; outer * inner];
        for o in 0..outer {
            let a = &mut acc[o * inner..(o + 1) * inner];
            for c in 0..mid {
                let row = &x[(o * mid + c) * inner..(o * mid + c + 1) * inner];
                for (s, &v) in a.iter_mut().zip(row) {
                    let v = v.to_f64();
                    *s += v * v;
                }
            }
        }
        for s in acc.iter_mut() {
            *s = 1.0 / (*s / mid as f64 + PIXEL_NORM_EPS).sqrt();
        }
        acc
    }

    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let r = self.inv_norms(x);
        let mut out = Vec::with_capacity(x.len());
        for o in 0..outer {
            for c in 0..mid {
                let row = &x[(o * mid + c) * inner..(o * mid + c + 1) * inner];
                let rs = &r[o * inner..(o + 1) * inner];
                out.extend(row.iter().zip(rs).map(|(&v, &r)| T::from_f64(v.to_f64() * r)));
            }
        }
        out
    }
}

impl CustomOp1 for PixelNorm {
    fn name(&self) -> &'static str {
        "pixel-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map1!("pixel-norm", s, l, |x| self.run(x)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &PixelNormGrad(PixelNorm(self.0)))?))
    }
}

/// `g r - x r^3 (sum_c g x) / C`.
struct PixelNormGrad(PixelNorm);

impl PixelNormGrad {
    fn run<T: WithDType>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0 .0;
        let r = self.0.inv_norms(x);
        let mut dot = vec![0.0; outer * inner];
        for o in 0..outer {
            let d = &mut dot[o * inner..(o + 1) * inner];
            for c in 0..mid {
                let off = (o * mid + c) * inner;
                for (i, s) in d.iter_mut().enumerate() {
                    *s += x[off + i].to_f64() * g[off + i].to_f64();
                }
            }
        }
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for c in 0..mid {
                let off = (o * mid + c) * inner;
                for i in 0..inner {
                    let r = r[o * inner + i];
                    let v = g[off + i].to_f64() * r - x[off + i].to_f64() * r * r * r * dot[o * inner + i] / mid as f64;
                    out[off + i] = T::from_f64(v);
                }
            }
        }
        out
    }
}

impl CustomOp2 for PixelNormGrad {
    fn name(&self) -> &'static str {
        "pixel-norm-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map2!("pixel-norm-grad", s1, l1, s2, l2, |x, g| self.run(x, g)), l1.shape().clone()))
    }
}

/// Nearest-neighbour 2x upsampling of `[planes, h, w]`.
struct Upsample2x {
    planes: usize,
    h: usize,
    w: usize,
    shape: Shape,
}

impl Upsample2x {
    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![T::zero(); self.planes * 4 * h * w];
        for p in 0..self.planes {
            for y in 0..h {
                let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
                let top = (p * 2 * h + 2 * y) * 2 * w;
                for (x, &v) in src.iter().enumerate() {
                    out[top + 2 * x] = v;
                    out[top + 2 * x + 1] = v;
                }
                out.copy_within(top..top + 2 * w, top + 2 * w);
            }
        }
        out
    }
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map1!("upsample2x", s, l, |x| self.run(x)), self.shape.clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let op = BlockSum2x {
            planes: self.planes,
            h: self.h,
            w: self.w,
            shape: arg.shape().clone(),
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Sum over 2x2 blocks; the adjoint of [`Upsample2x`].
struct BlockSum2x {
    planes: usize,
    h: usize,
    w: usize,
    shape: Shape,
}

impl BlockSum2x {
    fn run<T: WithDType>(&self, g: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![T::zero(); self.planes * h * w];
        for p in 0..self.planes {
            for y in 0..h {
                let r0 = (p * 2 * h + 2 * y) * 2 * w;
                let r1 = r0 + 2 * w;
                for x in 0..w {
                    out[(p * h + y) * w + x] = g[r0 + 2 * x] + g[r0 + 2 * x + 1] + g[r1 + 2 * x] + g[r1 + 2 * x + 1];
                }
            }
        }
        out
    }
}

impl CustomOp1 for BlockSum2x {
    fn name(&self) -> &'static str {
        "block-sum2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map1!("block-sum2x", s, l, |x| self.run(x)), self.shape.clone()))
    }
}

/// `x[b, c, ..] + bias[c]` or `x[b, c, ..] + bias[b, c]`.
struct ChannelBias {
    batch: usize,
    channels: usize,
    inner: usize,
    per_sample: bool,
}

impl ChannelBias {
    fn run<T: WithDType>(&self, x: &[T], bias: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        for b in 0..self.batch {
            for c in 0..self.channels {
                let v = bias[if self.per_sample { b * self.channels + c } else { c }];
                let off = (b * self.channels + c) * self.inner;
                for o in &mut out[off..off + self.inner] {
                    *o += v;
                }
            }
        }
        out
    }
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map2!("channel-bias", s1, l1, s2, l2, |x, b| self.run(x, b)), l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, bias: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let op = ChannelSum {
            batch: self.batch,
            channels: self.channels,
            inner: self.inner,
            per_sample: self.per_sample,
            shape: bias.shape().clone(),
        };
        let gb = match bias.track_op() {
            true => Some(grad.contiguous()?.apply_op1_no_bwd(&op)?),
            false => None,
        };
        Ok((Some(grad.clone()), gb))
    }
}

struct ChannelSum {
    batch: usize,
    channels: usize,
    inner: usize,
    per_sample: bool,
    shape: Shape,
}

impl ChannelSum {
    fn run<T: WithDType>(&self, g: &[T]) -> Vec<T> {
        let n = if self.per_sample { self.batch * self.channels } else { self.channels };
        let mut acc = vec![0.0f64; n];
        for b in 0..self.batch {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * self.inner;
                let s: f64 = g[off..off + self.inner].iter().map(|v| v.to_f64()).sum();
                acc[if self.per_sample { b * self.channels + c } else { c }] += s;
            }
        }
        acc.into_iter().map(T::from_f64).collect()
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        Ok((map1!("channel-sum", s, l, |x| self.run(x)), self.shape.clone()))
    }
}

/// Per-channel mean and biased variance of `[outer, C, inner]`.
fn channel_moments<T: WithDType>(s: Split3, x: &[T]) -> (Vec<f64>, Vec<f64>) {
    let Split3 { outer, mid, inner } = s;
    let n = (outer * inner) as f64;
    let mut mean = vec![0.0; mid];
    let mut var = vec![0.0; mid];
    for c in 0..mid {
        let mut sum = 0.0;
        for o in 0..outer {
            sum += x[(o * mid + c) * inner..(o * mid + c + 1) * inner].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = sum / n;
        let mut sq = 0.0;
        for o in 0..outer {
            for v in &x[(o * mid + c) * inner..(o * mid + c + 1) * inner] {
                let d = v.to_f64() - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / n;
    }
    (mean, var)
}

/// `(x, gamma, beta) -> gamma * (x - mean) / sqrt(var + eps) + beta` with
/// batch statistics over every axis but 1.
struct BatchNormTrain(Split3, f64);

impl BatchNormTrain {
    fn run<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let (mean, var) = channel_moments(self.0, x);
        let mut out = Vec::with_capacity(x.len());
        for o in 0..outer {
            for c in 0..mid {
                let scale = gamma[c].to_f64() / (var[c] + self.1).sqrt();
                let shift = beta[c].to_f64() - mean[c] * scale;
                let row = &x[(o * mid + c) * inner..(o * mid + c + 1) * inner];
                out.extend(row.iter().map(|v| T::from_f64(v.to_f64() * scale + shift)));
            }
        }
        out
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let out = map3!("batch-norm", s1, l1, s2, l2, s3, l3, |x, g, b| self.run(x, g, b));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = match x.track_op() {
            true => Some(x.apply_op3_no_bwd(&grad, gamma, &BatchNormGrad(self.0, self.1))?),
            false => None,
        };
        if !gamma.track_op() {
            return Ok((gx, None, None));
        }
        let gp = x.apply_op2_no_bwd(&grad, &BatchNormParamGrad(self.0, self.1))?;
        Ok((gx, Some(gp.get(0)?), Some(gp.get(1)?)))
    }
}

/// `(x, g, gamma) -> gamma / sigma * (g - mean(g) - xhat * mean(g * xhat))`.
struct BatchNormGrad(Split3, f64);

impl BatchNormGrad {
    fn run<T: WithDType>(&self, x: &[T], g: &[T], gamma: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let n = (outer * inner) as f64;
        let (mean, var) = channel_moments(self.0, x);
        let mut out = vec![T::zero(); x.len()];
        for c in 0..mid {
            let inv = 1.0 / (var[c] + self.1).sqrt();
            let (mut sg, mut sgx) = (0.0, 0.0);
            for o in 0..outer {
                let off = (o * mid + c) * inner;
                for i in off..off + inner {
                    let gv = g[i].to_f64();
                    sg += gv;
                    sgx += gv * (x[i].to_f64() - mean[c]) * inv;
                }
            }
            let k = gamma[c].to_f64() * inv;
            for o in 0..outer {
                let off = (o * mid + c) * inner;
                for i in off..off + inner {
                    let xhat = (x[i].to_f64() - mean[c]) * inv;
                    out[i] = T::from_f64(k * (g[i].to_f64() - sg / n - xhat * sgx / n));
                }
            }
        }
        out
    }
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let out = map3!("batch-norm-grad", s1, l1, s2, l2, s3, l3, |x, g, w| self.run(x, g, w));
        Ok((out, l1.shape().clone()))
    }
}

/// `(x, g) -> [sum g * xhat ; sum g]` as `[2, C]`.
struct BatchNormParamGrad(Split3, f64);

impl BatchNormParamGrad {
    fn run<T: WithDType>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let (mean, var) = channel_moments(self.0, x);
        let mut out = vec![0.0; 2 * mid];
        for c in 0..mid {
            let inv = 1.0 / (var[c] + self.1).sqrt();
            for o in 0..outer {
                let off = (o * mid + c) * inner;
                for i in off..off + inner {
                    let gv = g[i].to_f64();
                    out[c] += gv * (x[i].to_f64() - mean[c]) * inv;
                    out[mid + c] += gv;
                }
            }
        }
        out.into_iter().map(T::from_f64).collect()
    }
}

impl CustomOp2 for BatchNormParamGrad {
    fn name(&self) -> &'static str {
        "batch-norm-param-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = map2!("batch-norm-param-grad", s1, l1, s2, l2, |x, g| self.run(x, g));
        Ok((out, Shape::from((2, self.0.mid))))
    }
}

/// `x -> [mean ; biased variance]` per channel as `[2, C]`.
struct ChannelMoments(Split3);

impl CustomOp1 for ChannelMoments {
    fn name(&self) -> &'static str {
        "channel-moments"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let split = self.0;
        let out = map1!("channel-moments", s, l, |x| {
            let (m, v) = channel_moments(split, x);
            m.into_iter().chain(v).map(WithDType::from_f64).collect::<Vec<_>>()
        });
        Ok((out, Shape::from((2, split.mid))))
    }
}

/// `(x, scale, shift) -> x * scale[c] + shift[c]`.
struct ChannelAffine(Split3);

impl ChannelAffine {
    fn run<T: WithDType>(&self, x: &[T], scale: &[T], shift: &[T]) -> Vec<T> {
        let Split3 { outer, mid, inner } = self.0;
        let mut out = Vec::with_capacity(x.len());
        for o in 0..outer {
            for c in 0..mid {
                let (a, b) = (scale[c].to_f64(), shift[c].to_f64());
                let row = &x[(o * mid + c) * inner..(o * mid + c + 1) * inner];
                out.extend(row.iter().map(|v| T::from_f64(v.to_f64() * a + b)));
            }
        }
        out
    }
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let out = map3!("channel-affine", s1, l1, s2, l2, s3, l3, |x, a, b| self.run(x, a, b));
        Ok((out, l1.shape().clone()))
    }
}

fn channel_split(x: &Tensor, param: &Tensor) -> Result<Split3> {
    if x.rank() < 2 {
        bail!("batch norm needs [B, C, ..]");
    }
    let split = Split3::around(x.shape(), 1);
    if param.dims() != [split.mid] {
        bail!("batch norm: parameter {:?} for {} channels", param.dims(), split.mid);
    }
    Ok(split)
}

/// Batch-statistics normalization over all axes but 1, then `gamma x + beta`.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let split = channel_split(x, gamma)?;
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain(split, eps))
}

/// `[2, C]` per-channel mean and biased variance, outside the graph.
pub fn channel_moments_of(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        bail!("channel moments need [B, C, ..]");
    }
    x.detach().contiguous()?.apply_op1_no_bwd(&ChannelMoments(Split3::around(x.shape(), 1)))
}

/// `x * scale[c] + shift[c]`; forward only.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let split = channel_split(x, scale)?;
    x.contiguous()?.apply_op3_no_bwd(&scale.contiguous()?, &shift.contiguous()?, &ChannelAffine(split))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Tanh)
}

/// Gated linear unit: the first half of `dim` times the sigmoid of the second.
pub fn glu(x: &Tensor, dim: usize) -> Result<Tensor> {
    let split = Split3::around(x.shape(), dim);
    if split.mid % 2 != 0 {
        bail!("glu: axis {dim} has odd length {}", split.mid);
    }
    let mut dims = x.dims().to_vec();
    dims[dim] /= 2;
    x.contiguous()?.apply_op1(Glu(split, Shape::from(dims)))
}

/// Per-position normalization over axis 1.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        bail!("pixel_norm needs a channel axis");
    }
    x.contiguous()?.apply_op1(PixelNorm(Split3::around(x.shape(), 1)))
}

/// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(Upsample2x {
        planes: b * c,
        h,
        w,
        shape: Shape::from((b, c, 2 * h, 2 * w)),
    })
}

/// Adds `bias: [C]` or `bias: [B, C]` across the trailing axes of `x: [B, C, ..]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        bail!("add_channel_bias needs [B, C, ..]");
    }
    let (batch, channels) = (dims[0], dims[1]);
    let per_sample = match bias.dims() {
        [c] if *c == channels => false,
        [b, c] if *b == batch && *c == channels => true,
        other => bail!("add_channel_bias: bias {other:?} does not fit {dims:?}"),
    };
    let op = ChannelBias {
        batch,
        channels,
        inner: dims[2..].iter().product(),
        per_sample,
    };
    x.contiguous()?.apply_op2(&bias.contiguous()?, op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var, D};

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0) * 1.7)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Compares values and gradients of `fused` against `reference` under a
    /// random linear functional.
    fn agree(inputs: &[Tensor], fused: &dyn Fn(&[Tensor]) -> Result<Tensor>, reference: &dyn Fn(&[Tensor]) -> Result<Tensor>) {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let a = fused(&ts).unwrap();
        let b = reference(&ts).unwrap();
        assert_eq!(a.dims(), b.dims());
        let diff = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "values differ by {diff}");
        let w = sample(a.dims(), 11);
        let ga = (&a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in &vars {
            let x = ga.get(v).unwrap();
            let y = gb.get(v).unwrap();
            let diff = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-10, "gradients differ by {diff}");
        }
    }

    #[test]
    fn leaky_relu_and_tanh_match_composed_ops() {
        let x = sample(&[2, 3, 4, 5], 1);
        agree(&[x.clone()], &|t| leaky_relu(&t[0], 0.2), &|t| t[0].maximum(&(&t[0] * 0.2)?));
        agree(&[x], &|t| tanh(&t[0]), &|t| t[0].tanh());
    }

    #[test]
    fn glu_matches_composed_ops() {
        for (shape, dim) in [(vec![2, 6, 3, 3], 1), (vec![4, 8], 1), (vec![3, 4, 2], 2)] {
            let x = sample(&shape, 2);
            agree(&[x], &|t| glu(&t[0], dim), &|t| {
                let n = t[0].dim(dim)? / 2;
                t[0].narrow(dim, 0, n)? * candle_nn::ops::sigmoid(&t[0].narrow(dim, n, n)?)?
            });
        }
        assert!(glu(&sample(&[2, 3], 0), 1).is_err());
    }

    #[test]
    fn pixel_norm_matches_composed_ops() {
        let x = sample(&[2, 5, 3, 4], 3);
        agree(&[x], &pixel_norm_first, &|t| {
            let norm = (t[0].sqr()?.mean_keepdim(1)? + PIXEL_NORM_EPS)?.sqrt()?;
            t[0].broadcast_div(&norm)
        });
    }

    fn pixel_norm_first(t: &[Tensor]) -> Result<Tensor> {
        pixel_norm(&t[0])
    }

    #[test]
    fn upsample_matches_broadcast_form() {
        let x = sample(&[2, 3, 4, 5], 4);
        agree(&[x], &|t| upsample2x(&t[0]), &|t| {
            let (b, c, h, w) = t[0].dims4()?;
            t[0].reshape((b, c, h, 1, w, 1))?
                .broadcast_as((b, c, h, 2, w, 2))?
                .contiguous()?
                .reshape((b, c, 2 * h, 2 * w))
        });
    }

    #[test]
    fn channel_bias_matches_broadcast_add() {
        let x = sample(&[3, 4, 2, 5], 5);
        let shared = sample(&[4], 6);
        let per = sample(&[3, 4], 7);
        agree(&[x.clone(), shared], &|t| add_channel_bias(&t[0], &t[1]), &|t| {
            t[0].broadcast_add(&t[1].reshape((1, 4, 1, 1))?)
        });
        agree(&[x.clone(), per], &|t| add_channel_bias(&t[0], &t[1]), &|t| {
            t[0].broadcast_add(&t[1].reshape((3, 4, 1, 1))?)
        });
        assert!(add_channel_bias(&x, &sample(&[5], 0)).is_err());
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        for shape in [vec![3, 4, 2, 5], vec![5, 3]] {
            let x = sample(&shape, 9);
            let c = shape[1];
            let gamma = sample(&[c], 10);
            let beta = sample(&[c], 12);
            agree(&[x, gamma, beta], &|t| batch_norm_train(&t[0], &t[1], &t[2], 1e-5), &|t| {
                let mut dims = vec![1; t[0].rank()];
                dims[1] = c;
                let axes: Vec<usize> = (0..t[0].rank()).filter(|&a| a != 1).collect();
                let mean = t[0].mean_keepdim(axes.clone())?;
                let centered = t[0].broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(axes)?;
                let xhat = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
                xhat.broadcast_mul(&t[1].reshape(dims.clone())?)?.broadcast_add(&t[2].reshape(dims)?)
            });
        }
    }

    #[test]
    fn moments_and_affine() {
        let x = sample(&[3, 2, 4], 13);
        let m: Vec<Vec<f64>> = channel_moments_of(&x).unwrap().to_vec2().unwrap();
        let ch0: Vec<f64> = x.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = ch0.iter().sum::<f64>() / 12.0;
        let var = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!((m[0][0] - mean).abs() < 1e-12 && (m[1][0] - var).abs() < 1e-12);
        let scale = Tensor::new(&[2.0f64, -1.0], &Device::Cpu).unwrap();
        let shift = Tensor::new(&[0.5f64, 1.0], &Device::Cpu).unwrap();
        let y = channel_affine(&x, &scale, &shift).unwrap();
        let want = x
            .broadcast_mul(&scale.reshape((1, 2, 1)).unwrap())
            .unwrap()
            .broadcast_add(&shift.reshape((1, 2, 1)).unwrap())
            .unwrap();
        let diff = (y - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn f32_path_runs() {
        let x = sample(&[2, 4, 3, 3], 8).to_dtype(DType::F32).unwrap();
        let y = pixel_norm(&glu(&upsample2x(&x).unwrap(), 1).unwrap()).unwrap();
        assert_eq!(y.dims(), &[2, 2, 6, 6]);
        let ms: Vec<f32> = y.sqr().unwrap().mean(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(ms.iter().all(|m| (m - 1.0).abs() < 1e-4));
        let _ = y.sum(D::Minus1).unwrap();
    }
}
