use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder};

use super::DEVICE;
use crate::error::Result;

pub fn conv2d(cin: usize, cout: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, kernel, cfg, vb)?)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Group norm whose group count is reduced to divide `channels`.
pub fn group_norm(groups: usize, channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    let g = gcd(groups.max(1), channels);
    Ok(candle_nn::group_norm(g, channels, 1e-5, vb)?)
}

pub fn linear(cin: usize, cout: usize, vb: VarBuilder) -> Result<Linear> {
    Ok(candle_nn::linear(cin, cout, vb)?)
}

/// Layer norm over the last dimension, built from elementary ops so it is
/// differentiable in every float dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(size: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(size, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(size, "bias", candle_nn::Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let d = candle_core::D::Minus1;
        let xc = x.broadcast_sub(&x.mean_keepdim(d)?)?;
        let var = xc.sqr()?.mean_keepdim(d)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|f| step * f).collect();
        data.extend(angles.iter().map(|a| a.sin()));
        data.extend(angles.iter().map(|a| a.cos()));
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &DEVICE)?.to_dtype(dtype)?)
}

/// Pre-activation residual block with optional timestep injection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        time_dim: Option<usize>,
        groups: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(groups, cin, vb.pp("norm1"))?,
            conv1: conv2d(cin, cout, 3, 1, vb.pp("conv1"))?,
            time_proj: time_dim
                .map(|d| linear(d, cout, vb.pp("time_proj")))
                .transpose()?,
            norm2: group_norm(groups, cout, vb.pp("norm2"))?,
            conv2: conv2d(cout, cout, 3, 1, vb.pp("conv2"))?,
            skip: if cin != cout {
                Some(conv2d(cin, cout, 1, 1, vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, temb) {
            let t = proj.forward(&t.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embedding_shape_and_values() {
        let e = timestep_embedding(&[0, 5], 8, DType::F64).unwrap();
        assert_eq!(e.dims(), &[2, 8]);
        let rows: Vec<Vec<f64>> = e.to_vec2().unwrap();
        // t = 0: sin terms 0, cos terms 1
        assert_eq!(&rows[0][..4], &[0.0; 4]);
        assert_eq!(&rows[0][4..], &[1.0; 4]);
        assert!((rows[1][0] - 5f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn group_count_adapts_to_channels() {
        let store = super::super::ParamStore::new(0, DType::F32);
        let gn = group_norm(8, 12, store.builder().pp("gn")).unwrap();
        let x = Tensor::ones((1, 12, 2, 2), DType::F32, &DEVICE).unwrap();
        assert_eq!(gn.forward(&x).unwrap().dims(), &[1, 12, 2, 2]);
    }
}
