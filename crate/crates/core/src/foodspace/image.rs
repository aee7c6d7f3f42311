use candle_core::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::FOODSPACE_DIM;
use crate::nn::{conv2d, resize_bilinear, Conv2d};
use crate::{Error, Result};

/// Strided convolutional backbone, global average pooling to
/// `feature_dim`, then a linear map into FoodSpace.
pub struct ImageEncoder {
    convs: Vec<Conv2d>,
    head: Conv2d,
    proj: Linear,
    input_size: usize,
}

impl ImageEncoder {
    pub fn new(input_size: usize, channels: &[usize], feature_dim: usize, vb: VarBuilder) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("image backbone needs at least one conv layer".into()));
        }
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(conv2d(cin, c, 3, 2, 1, vb.pp(format!("backbone.conv{i}")))?);
            cin = c;
        }
        Ok(Self {
            convs,
            head: conv2d(cin, feature_dim, 1, 1, 0, vb.pp("backbone.head"))?,
            proj: candle_nn::linear(feature_dim, FOODSPACE_DIM, vb.pp("proj"))?,
            input_size,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Pooled backbone activations `[B, feature_dim]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::DimensionMismatch(format!("image encoder expects 3 channels, got {c}")));
        }
        let mut x = if (h, w) == (self.input_size, self.input_size) {
            images.clone()
        } else {
            resize_bilinear(images, self.input_size, self.input_size)?
        };
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(self.head.forward(&x)?.relu()?.mean((2, 3))?)
    }

    /// `q` vectors `[B, 1024]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(&self.features(images)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn widths_and_channel_check() {
        let store = ParamStore::new(1);
        let enc = ImageEncoder::new(16, &[8, 16], 64, store.var_builder()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        assert_eq!(enc.features(&x).unwrap().dims(), &[2, 64]);
        assert_eq!(enc.forward(&x).unwrap().dims(), &[2, FOODSPACE_DIM]);
        let bad = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&bad), Err(Error::DimensionMismatch(_))));
    }
}
