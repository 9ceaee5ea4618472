//! Shared neural-network plumbing on top of candle: a seeded parameter store,
//! the checkpoint container, common layers and tensor conversions.

mod checkpoint;
mod layers;
mod store;

pub use checkpoint::{Checkpoint, TensorBlob, CHECKPOINT_VERSION};
pub use layers::{conv2d, group_norm, linear, timestep_embedding, LayerNorm, ResBlock};
pub use store::{tensor_digest, ParamStore};
pub(crate) use store::hex;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::diffusion::{LatentArray, Space};
use crate::error::{ensure, Error, Result};
use crate::glyphdata::GlyphImage;

pub const DEVICE: Device = Device::Cpu;

/// Stacks images into a `(B, 1, H, W)` tensor.
pub fn images_to_tensor(images: &[&GlyphImage], dtype: DType) -> Result<Tensor> {
    ensure!(!images.is_empty(), Validation, "empty image batch");
    let size = images[0].size();
    ensure!(
        images.iter().all(|i| i.size() == size),
        Validation,
        "images in a batch must share one resolution"
    );
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, size, size), &DEVICE)?.to_dtype(dtype)?)
}

/// Splits a `(B, 1, H, W)` tensor into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor, ids: &[(u32, u32)]) -> Result<Vec<GlyphImage>> {
    let (b, c, h, w) = t.dims4()?;
    ensure!(c == 1 && h == w, Validation, "expected (B, 1, S, S), got {:?}", t.dims());
    ensure!(b == ids.len(), Validation, "{b} images but {} id pairs", ids.len());
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks(h * w)
        .zip(ids)
        .map(|(px, &(ch, st))| GlyphImage::from_clamped(h, px.iter().copied(), ch, st))
        .collect()
}

pub fn latents_to_tensor(latents: &[&LatentArray], dtype: DType) -> Result<Tensor> {
    ensure!(!latents.is_empty(), Validation, "empty latent batch");
    let shape = latents[0].shape();
    ensure!(
        latents.iter().all(|l| l.shape() == shape),
        Validation,
        "latents in a batch must share one shape"
    );
    let mut data = Vec::with_capacity(latents.len() * latents[0].len());
    for l in latents {
        data.extend_from_slice(l.data());
    }
    let [c, h, w] = shape;
    Ok(Tensor::from_vec(data, (latents.len(), c, h, w), &DEVICE)?.to_dtype(dtype)?)
}

pub fn tensor_to_latents(t: &Tensor, space: Space) -> Result<Vec<LatentArray>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if b == 0 {
        return Ok(Vec::new());
    }
    flat.chunks(c * h * w)
        .map(|d| LatentArray::new([c, h, w], d.to_vec(), space))
        .collect()
}

/// Adam (no weight decay) over the given variables.
pub fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(vars, params)?)
}

/// Scalar loss value, aborting on NaN/∞.
pub fn finite_scalar(loss: &Tensor, what: &str) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what} loss became {v}")));
    }
    Ok(v)
}

/// Backward + optimizer step; returns the loss value.
pub fn step(opt: &mut AdamW, loss: &Tensor, what: &str) -> Result<f64> {
    let v = finite_scalar(loss, what)?;
    opt.backward_step(loss)?;
    Ok(v)
}
