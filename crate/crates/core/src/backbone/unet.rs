use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear, VarBuilder};

use super::attention::CrossAttention;
use super::BackboneConfig;
use crate::error::{ensure, Result};
use crate::nn::{conv2d, group_norm, linear, timestep_embedding, LayerNorm, ResBlock};

/// Spatial transformer block: content tokens attend to style tokens, then a
/// feed-forward layer, wrapped in a residual projection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm_in: GroupNorm,
    proj_in: Linear,
    cross: Option<(LayerNorm, CrossAttention)>,
    norm_ff: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    proj_out: Linear,
}

impl TransformerBlock {
    fn new(ch: usize, cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let cross = if cfg.cross_attention {
            Some((
                LayerNorm::new(ch, vb.pp("norm_cross"))?,
                CrossAttention::new(ch, cfg.token_dim, cfg.heads, vb.pp("cross"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm_in: group_norm(cfg.norm_groups, ch, vb.pp("norm_in"))?,
            proj_in: linear(ch, ch, vb.pp("proj_in"))?,
            cross,
            norm_ff: LayerNorm::new(ch, vb.pp("norm_ff"))?,
            fc1: linear(ch, ch * cfg.ff_mult, vb.pp("ff.fc1"))?,
            fc2: linear(ch * cfg.ff_mult, ch, vb.pp("ff.fc2"))?,
            proj_out: linear(ch, ch, vb.pp("proj_out"))?,
        })
    }

    fn forward(&self, x: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = self
            .norm_in
            .forward(x)?
            .flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?;
        let mut t = self.proj_in.forward(&t)?;
        if let Some((norm, attn)) = &self.cross {
            t = (&t + attn.forward(&norm.forward(&t)?, tokens)?)?;
        }
        let ff = self.fc2.forward(&self.fc1.forward(&self.norm_ff.forward(&t)?)?.gelu()?)?;
        let t = self.proj_out.forward(&(t + ff)?)?;
        let t = t.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + t)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: Vec<ResBlock>,
    attn: Vec<TransformerBlock>,
    resample: Option<Conv2d>,
}

impl Level {
    fn run(&self, mut h: Tensor, temb: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        for (i, res) in self.res.iter().enumerate() {
            h = res.forward(&h, Some(temb))?;
            if let Some(a) = self.attn.get(i) {
                h = a.forward(&h, tokens)?;
            }
        }
        Ok(h)
    }
}

/// Conditional U-Net over channel-concatenated `(z_t, z_x)`.
#[derive(Debug, Clone)]
pub struct UNet {
    base: usize,
    conv_in: Conv2d,
    time_embed: (Linear, Linear),
    down: Vec<Level>,
    mid_res: (ResBlock, ResBlock),
    mid_attn: Option<TransformerBlock>,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let levels = cfg.channel_mult.len();
        let ch: Vec<usize> = cfg.channel_mult.iter().map(|m| m * cfg.base_width).collect();
        let tdim = 4 * cfg.base_width;
        let g = cfg.norm_groups;
        let has_attn = |i: usize| i + cfg.attn_levels >= levels;
        let conv_in = conv2d(2 * cfg.latent_channels, ch[0], 3, 1, vb.pp("conv_in"))?;
        let time_embed = (
            linear(cfg.base_width, tdim, vb.pp("time_embed.0"))?,
            linear(tdim, tdim, vb.pp("time_embed.1"))?,
        );
        let mut down = Vec::with_capacity(levels);
        let mut cur = ch[0];
        for i in 0..levels {
            let lv = vb.pp(format!("down.{i}"));
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for j in 0..cfg.res_blocks {
                res.push(ResBlock::new(cur, ch[i], Some(tdim), g, lv.pp(format!("res.{j}")))?);
                cur = ch[i];
                if has_attn(i) {
                    attn.push(TransformerBlock::new(cur, cfg, lv.pp(format!("attn.{j}")))?);
                }
            }
            let resample = if i + 1 < levels {
                Some(conv2d(cur, cur, 3, 2, lv.pp("downsample"))?)
            } else {
                None
            };
            down.push(Level { res, attn, resample });
        }
        let mid = vb.pp("mid");
        let mid_res = (
            ResBlock::new(cur, cur, Some(tdim), g, mid.pp("res.0"))?,
            ResBlock::new(cur, cur, Some(tdim), g, mid.pp("res.1"))?,
        );
        let mid_attn = if cfg.mid_attention {
            Some(TransformerBlock::new(cur, cfg, mid.pp("attn"))?)
        } else {
            None
        };
        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let lv = vb.pp(format!("up.{i}"));
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for j in 0..cfg.res_blocks {
                let cin = if j == 0 { cur + ch[i] } else { ch[i] };
                res.push(ResBlock::new(cin, ch[i], Some(tdim), g, lv.pp(format!("res.{j}")))?);
                if has_attn(i) {
                    attn.push(TransformerBlock::new(ch[i], cfg, lv.pp(format!("attn.{j}")))?);
                }
            }
            cur = ch[i];
            let resample = if i > 0 {
                let c = conv2d(cur, ch[i - 1], 3, 1, lv.pp("upsample"))?;
                cur = ch[i - 1];
                Some(c)
            } else {
                None
            };
            up.push(Level { res, attn, resample });
        }
        Ok(Self {
            base: cfg.base_width,
            conv_in,
            time_embed,
            down,
            mid_res,
            mid_attn,
            up,
            norm_out: group_norm(g, ch[0], vb.pp("norm_out"))?,
            conv_out: conv2d(ch[0], cfg.latent_channels, 3, 1, vb.pp("conv_out"))?,
        })
    }

    pub fn forward(&self, z_t: &Tensor, z_x: &Tensor, t: &[usize], tokens: &Tensor) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        ensure!(t.len() == b, Validation, "{} timesteps for batch of {b}", t.len());
        let temb = timestep_embedding(t, self.base, z_t.dtype())?;
        let temb = self.time_embed.1.forward(&self.time_embed.0.forward(&temb)?.silu()?)?;
        let mut h = self.conv_in.forward(&Tensor::cat(&[z_t, z_x], 1)?)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for lv in &self.down {
            h = lv.run(h, &temb, tokens)?;
            skips.push(h.clone());
            if let Some(d) = &lv.resample {
                h = d.forward(&h)?;
            }
        }
        h = self.mid_res.0.forward(&h, Some(&temb))?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(&h, tokens)?;
        }
        h = self.mid_res.1.forward(&h, Some(&temb))?;
        for lv in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = lv.run(Tensor::cat(&[&h, &skip], 1)?, &temb, tokens)?;
            if let Some(u) = &lv.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = u.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}
