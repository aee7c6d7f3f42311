use candle_core::{DType, Module, Result, Tensor, D};
use candle_nn::{Init, VarBuilder};

use super::conv;
use super::fused::{add_channel_bias, batch_norm_train, channel_affine, channel_moments_of};
use super::ParamStore;

/// Square-kernel convolution backed by [`conv::conv2d`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

pub fn conv2d(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, vb: VarBuilder) -> Result<Conv2d> {
    let fan_in = (cin * kernel * kernel) as f64;
    // Kaiming normal for a 0.2-slope leaky ReLU.
    let gain = (2.0 / (1.0 + 0.04f64)).sqrt();
    let weight = vb.get_with_hints(
        (cout, cin, kernel, kernel),
        "weight",
        Init::Randn {
            mean: 0.0,
            stdev: gain / fan_in.sqrt(),
        },
    )?;
    let bias = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Conv2d {
        weight,
        bias: Some(bias),
        stride,
        pad,
    })
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

/// Row-stochastic matrix mapping `input` samples to `output` samples with
/// half-pixel-centred linear interpolation (`align_corners = false`).
pub fn interpolation_matrix(output: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` as two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let dev = x.device();
    let rh = Tensor::from_vec(interpolation_matrix(out_h, h), (out_h, h), dev)?.to_dtype(dtype)?;
    let rw = Tensor::from_vec(interpolation_matrix(out_w, w), (out_w, w), dev)?.to_dtype(dtype)?;
    let y = x.broadcast_matmul(&rw.t()?)?;
    rh.broadcast_matmul(&y)
}

/// Average over 2x2 blocks; exact area downsampling by a factor of two.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(D::Minus1)?.mean(3)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    (softplus(logits)? - (logits * targets)?)?.mean_all()
}

/// Batch normalization over every axis but 1. With running statistics the
/// layer can also run in inference mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running: Option<(candle_core::Var, candle_core::Var)>,
    momentum: f64,
    eps: f64,
}

/// `store` must be the store behind `vb` when running statistics are wanted.
pub fn batch_norm(channels: usize, vb: VarBuilder, store: Option<&ParamStore>) -> Result<BatchNorm> {
    let gamma = vb.get_with_hints(channels, "weight", Init::Const(1.0))?;
    let beta = vb.get_with_hints(channels, "bias", Init::Const(0.0))?;
    let running = match store {
        Some(store) => {
            vb.get_with_hints(channels, "running_mean", Init::Const(0.0))?;
            vb.get_with_hints(channels, "running_var", Init::Const(1.0))?;
            let fetch = |n: &str| {
                let name = format!("{}.{n}", vb.prefix());
                store
                    .var(&name)
                    .ok_or_else(|| candle_core::Error::Msg(format!("no variable named {name}")))
            };
            Some((fetch("running_mean")?, fetch("running_var")?))
        }
        None => None,
    };
    Ok(BatchNorm {
        gamma,
        beta,
        running,
        momentum: 0.1,
        eps: 1e-5,
    })
}

impl BatchNorm {
    /// Normalizes with batch statistics and folds them into the running
    /// estimates (unbiased variance).
    pub fn forward_train(&self, x: &Tensor) -> Result<Tensor> {
        if let Some((mean, var)) = &self.running {
            let m = channel_moments_of(x)?;
            let n = (x.elem_count() / x.dim(1)?) as f64;
            let unbiased = (m.get(1)? * (n / (n - 1.0).max(1.0)))?;
            let k = self.momentum;
            mean.set(&((mean.as_tensor() * (1.0 - k))? + (m.get(0)? * k)?)?)?;
            var.set(&((var.as_tensor() * (1.0 - k))? + (unbiased * k)?)?)?;
        }
        batch_norm_train(x, &self.gamma, &self.beta, self.eps)
    }

    /// Normalizes with the running statistics; forward only.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, var) = self
            .running
            .as_ref()
            .ok_or_else(|| candle_core::Error::Msg("batch norm has no running statistics".into()))?;
        let scale = (&self.gamma / (var.as_tensor() + self.eps)?.sqrt()?)?;
        let shift = (&self.beta - (mean.as_tensor() * &scale)?)?;
        channel_affine(x, &scale, &shift)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            self.forward_train(x)
        } else {
            self.forward_eval(x)
        }
    }
}

pub fn sum_square_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    (a - b)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()
}
