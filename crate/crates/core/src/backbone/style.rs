use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, GroupNorm, Linear, VarBuilder};

use crate::error::{ensure, Result};
use crate::nn::{conv2d, group_norm, linear};

pub const TRUNK_BLOCKS: usize = 4;

/// Per-image convolutional trunk, global pooling and a final projection to
/// the token dimension.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    trunk: Vec<(Conv2d, GroupNorm)>,
    proj: Linear,
}

impl StyleEncoder {
    pub fn new(width: usize, token_dim: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let mut trunk = Vec::with_capacity(TRUNK_BLOCKS);
        let mut cin = 1;
        for i in 0..TRUNK_BLOCKS {
            let cout = width << i.min(2);
            let b = vb.pp(format!("trunk.{i}"));
            trunk.push((conv2d(cin, cout, 3, 2, b.pp("conv"))?, group_norm(groups, cout, b.pp("norm"))?));
            cin = cout;
        }
        Ok(Self {
            trunk,
            proj: linear(cin, token_dim, vb.pp("proj"))?,
        })
    }

    /// `(M, 1, H, W)` pixels in `[0, 1]` to `(M, d)` tokens, one per image.
    pub fn forward(&self, refs: &Tensor) -> Result<Tensor> {
        let (m, c, _, _) = refs.dims4()?;
        ensure!(m >= 1, Validation, "no reference images");
        ensure!(c == 1, Validation, "references must be single-channel");
        let mut h = refs.affine(2.0, -1.0)?;
        for (conv, norm) in &self.trunk {
            h = norm.forward(&conv.forward(&h)?)?.silu()?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.proj.forward(&pooled)?)
    }
}
