//! Conditional denoiser: U-Net with content concatenation and style
//! cross-attention, the style encoder, parameter grouping and gradient
//! sensitivity analysis.

mod attention;
mod groups;
mod sensitivity;
mod style;
mod unet;

pub use attention::{
    cross_attention, cross_attention_grads, cross_attention_trace, CrossAttention, CrossAttnGrads,
    CrossAttnTrace, CrossAttnWeights,
};
pub use groups::{classify, FreezePlan, ParamGroup, ParameterGroups};
pub use sensitivity::{
    accumulated_grad_norms, group_ratios, sensitivity_analysis, SensitivityReport,
};
pub use style::StyleEncoder;
pub use unet::{TransformerBlock, UNet};

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{LatentArray, NoiseSchedule, Space};
use crate::error::{ensure, Result};
use crate::glyphdata::GlyphImage;
use crate::nn::{self, Checkpoint, ParamStore, DEVICE};

pub const CHECKPOINT_KIND: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub image_size: usize,
    #[serde(default = "defaults::base_width")]
    pub base_width: usize,
    #[serde(default = "defaults::channel_mult")]
    pub channel_mult: Vec<usize>,
    #[serde(default = "defaults::res_blocks")]
    pub res_blocks: usize,
    /// Number of lowest-resolution levels carrying transformer blocks.
    #[serde(default = "defaults::attn_levels")]
    pub attn_levels: usize,
    #[serde(default = "defaults::yes")]
    pub mid_attention: bool,
    #[serde(default = "defaults::yes")]
    pub cross_attention: bool,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::token_dim")]
    pub token_dim: usize,
    #[serde(default = "defaults::norm_groups")]
    pub norm_groups: usize,
    #[serde(default = "defaults::ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "defaults::style_width")]
    pub style_width: usize,
}

mod defaults {
    pub fn base_width() -> usize {
        64
    }
    pub fn channel_mult() -> Vec<usize> {
        vec![1, 2, 2]
    }
    pub fn res_blocks() -> usize {
        2
    }
    pub fn attn_levels() -> usize {
        2
    }
    pub fn yes() -> bool {
        true
    }
    pub fn heads() -> usize {
        4
    }
    pub fn token_dim() -> usize {
        128
    }
    pub fn norm_groups() -> usize {
        8
    }
    pub fn ff_mult() -> usize {
        2
    }
    pub fn style_width() -> usize {
        32
    }
}

impl BackboneConfig {
    pub fn new(latent_channels: usize, latent_size: usize, image_size: usize) -> Self {
        Self {
            latent_channels,
            latent_size,
            image_size,
            base_width: defaults::base_width(),
            channel_mult: defaults::channel_mult(),
            res_blocks: defaults::res_blocks(),
            attn_levels: defaults::attn_levels(),
            mid_attention: true,
            cross_attention: true,
            heads: defaults::heads(),
            token_dim: defaults::token_dim(),
            norm_groups: defaults::norm_groups(),
            ff_mult: defaults::ff_mult(),
            style_width: defaults::style_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        ensure!(levels >= 1, Config, "channel_mult must be non-empty");
        ensure!(self.res_blocks >= 1, Config, "res_blocks must be >= 1");
        ensure!(self.attn_levels <= levels, Config, "attn_levels {} exceeds {levels} levels", self.attn_levels);
        ensure!(
            self.latent_size % (1 << (levels - 1)) == 0,
            Config,
            "latent size {} not divisible by 2^{}",
            self.latent_size,
            levels - 1
        );
        for m in &self.channel_mult {
            let ch = m * self.base_width;
            ensure!(
                ch > 0 && ch % self.heads == 0,
                Config,
                "width {ch} not divisible into {} heads",
                self.heads
            );
        }
        ensure!(
            self.image_size >= 1 << style::TRUNK_BLOCKS,
            Config,
            "style encoder expects images of at least 16px"
        );
        ensure!(self.token_dim >= 1 && self.latent_channels >= 1, Config, "empty token or latent dimension");
        Ok(())
    }
}

/// `N x d` reference-style embeddings, one row per reference.
#[derive(Debug, Clone)]
pub struct StyleTokens {
    tensor: Tensor,
}

impl StyleTokens {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (n, _) = tensor.dims2()?;
        ensure!(n >= 1, Validation, "style tokens need at least one row");
        let finite = tensor.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        ensure!(finite.iter().all(|v| v.is_finite()), Numerical, "non-finite style token");
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.tensor.to_dtype(DType::F64)?.to_vec2()?)
    }

    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let idx: Vec<u32> = order.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), &DEVICE)?;
        Self::new(self.tensor.index_select(&idx, 0)?)
    }
}

/// Training batch for the z0 objective. `ref_index` gathers `n_refs` rows per
/// sample from the style tokens of `refs`, so shared references are encoded once.
#[derive(Debug, Clone)]
pub struct DenoiseBatch {
    pub z0: Tensor,
    pub z_x: Tensor,
    pub t: Vec<usize>,
    pub noise: Tensor,
    pub refs: Tensor,
    pub ref_index: Vec<u32>,
    pub n_refs: usize,
}

impl DenoiseBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Consecutive sub-batch of samples `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let n = range.len();
        let s = range.start;
        Ok(Self {
            z0: self.z0.narrow(0, s, n)?,
            z_x: self.z_x.narrow(0, s, n)?,
            t: self.t[range.clone()].to_vec(),
            noise: self.noise.narrow(0, s, n)?,
            refs: self.refs.clone(),
            ref_index: self.ref_index[s * self.n_refs..(s + n) * self.n_refs].to_vec(),
            n_refs: self.n_refs,
        })
    }
}

#[derive(Clone)]
pub struct Backbone {
    config: BackboneConfig,
    store: ParamStore,
    unet: UNet,
    style: StyleEncoder,
    groups: ParameterGroups,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("config", &self.config)
            .field("parameters", &self.store.num_parameters())
            .finish()
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_store(config, ParamStore::new(seed, dtype))
    }

    fn with_store(config: BackboneConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let vb = store.builder();
        let unet = UNet::new(&config, vb.pp("unet"))?;
        let style = StyleEncoder::new(config.style_width, config.token_dim, config.norm_groups, vb.pp("style"))?;
        let groups = partition_parameters(&store)?;
        Ok(Self {
            config,
            store,
            unet,
            style,
            groups,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Same weights, with every parameter `plan` freezes entering the graph
    /// as a detached constant: frozen parameters receive no gradient, and
    /// layers before the first trainable one are not traced at all.
    pub fn training_view(&self, plan: FreezePlan) -> Result<Self> {
        let mut tensors = std::collections::HashMap::new();
        for (name, var) in self.store.named_vars() {
            let trainable = self.groups.group_of(&name).is_some_and(|g| plan.trainable(g));
            let t = if trainable {
                var.as_tensor().clone()
            } else {
                var.as_tensor().detach()
            };
            tensors.insert(name, t);
        }
        let vb = candle_nn::VarBuilder::from_tensors(tensors, self.dtype(), &DEVICE);
        Ok(Self {
            config: self.config.clone(),
            store: self.store.clone(),
            unet: UNet::new(&self.config, vb.pp("unet"))?,
            style: StyleEncoder::new(
                self.config.style_width,
                self.config.token_dim,
                self.config.norm_groups,
                vb.pp("style"),
            )?,
            groups: self.groups.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn groups(&self) -> &ParameterGroups {
        &self.groups
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::with_store(self.config.clone(), self.store.deep_clone()?)
    }

    /// `(M, 1, H, W)` reference pixels to `(M, d)` tokens.
    pub fn style_tokens(&self, refs: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = refs.dims4()?;
        ensure!(
            h == self.config.image_size && w == self.config.image_size,
            Validation,
            "reference images are {h}x{w}, model expects {}",
            self.config.image_size
        );
        self.style.forward(&refs.to_dtype(self.dtype())?)
    }

    pub fn style_encode(&self, refs: &[&GlyphImage]) -> Result<StyleTokens> {
        ensure!(!refs.is_empty(), Validation, "style encoding needs at least one reference");
        let x = nn::images_to_tensor(refs, self.dtype())?;
        StyleTokens::new(self.style_tokens(&x)?)
    }

    /// Predicted clean latents for `(B, C, h, w)` inputs and `(B, N, d)` tokens.
    pub fn denoise(&self, z_t: &Tensor, z_x: &Tensor, t: &[usize], tokens: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z_t.dims4()?;
        ensure!(
            z_x.dims4()? == (b, c, h, w),
            Validation,
            "z_t {:?} and z_x {:?} differ in shape",
            z_t.dims(),
            z_x.dims()
        );
        ensure!(
            c == self.config.latent_channels && h == self.config.latent_size && w == h,
            Validation,
            "latent {:?} does not match model [{}, {s}, {s}]",
            z_t.dims(),
            self.config.latent_channels,
            s = self.config.latent_size
        );
        let (tb, _, d) = tokens.dims3()?;
        ensure!(tb == b && d == self.config.token_dim, Validation, "token tensor {:?} mismatched", tokens.dims());
        let dt = self.dtype();
        self.unet.forward(&z_t.to_dtype(dt)?, &z_x.to_dtype(dt)?, t, &tokens.to_dtype(dt)?)
    }

    pub fn denoise_latents(
        &self,
        z_t: &LatentArray,
        z_x: &LatentArray,
        t: usize,
        s: &StyleTokens,
    ) -> Result<LatentArray> {
        ensure!(z_t.shape() == z_x.shape(), Validation, "z_t and z_x differ in shape");
        let dt = self.dtype();
        let zt = nn::latents_to_tensor(&[z_t], dt)?;
        let zx = nn::latents_to_tensor(&[z_x], dt)?;
        let out = self.denoise(&zt, &zx, &[t], &s.tensor().unsqueeze(0)?)?;
        Ok(nn::tensor_to_latents(&out, Space::Latent)?.remove(0))
    }

    /// Mean squared error between predicted and true clean latents.
    pub fn loss(&self, batch: &DenoiseBatch, sched: &NoiseSchedule) -> Result<Tensor> {
        let (pred, z0) = self.predict_batch(batch, sched)?;
        Ok((pred - z0)?.sqr()?.mean_all()?)
    }

    /// Noises `batch.z0` to each sample's timestep and predicts it back;
    /// returns `(prediction, z0)` in the model dtype.
    pub fn predict_batch(&self, batch: &DenoiseBatch, sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
        let b = batch.len();
        ensure!(b >= 1, Validation, "empty batch");
        let dt = self.dtype();
        let mut sa = Vec::with_capacity(b);
        let mut sb = Vec::with_capacity(b);
        for &t in &batch.t {
            let ab = sched.alpha_bar(t)?;
            ensure!(t >= 1, Validation, "timestep 0 is not a noising step");
            sa.push(ab.sqrt());
            sb.push((1.0 - ab).sqrt());
        }
        let coef = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, 1, 1, 1), &DEVICE)?.to_dtype(dt)?) };
        let z0 = batch.z0.to_dtype(dt)?;
        let z_t = (z0.broadcast_mul(&coef(sa)?)? + batch.noise.to_dtype(dt)?.broadcast_mul(&coef(sb)?)?)?;
        let tokens = self.style_tokens(&batch.refs)?;
        let idx = Tensor::new(batch.ref_index.as_slice(), &DEVICE)?;
        let tokens = tokens
            .index_select(&idx, 0)?
            .reshape((b, batch.n_refs, self.config.token_dim))?;
        let pred = self.denoise(&z_t, &batch.z_x, &batch.t, &tokens)?;
        Ok((pred, z0))
    }

    pub fn group_param_counts(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out: BTreeMap<ParamGroup, usize> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for (name, var) in self.store.named_vars() {
            if let Some(g) = self.groups.group_of(&name) {
                *out.entry(g).or_default() += var.elem_count();
            }
        }
        out
    }

    pub fn trainable_vars(&self, plan: FreezePlan) -> Vec<(String, Var)> {
        self.store
            .named_vars()
            .into_iter()
            .filter(|(n, _)| self.groups.group_of(n).is_some_and(|g| plan.trainable(g)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({ "config": self.config, "groups": self.groups }),
            tensors: self.store.to_blobs()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure!(
            ckpt.kind == CHECKPOINT_KIND,
            State,
            "expected a backbone checkpoint, found {}",
            ckpt.kind
        );
        let config: BackboneConfig = ckpt.meta_field("config")?;
        let dtype = ckpt
            .tensors
            .values()
            .next()
            .map(|b| b.dtype())
            .unwrap_or(DType::F32);
        let model = Self::new(config, 0, dtype)?;
        model.store.load_checkpoint(ckpt)?;
        let stored: ParameterGroups = ckpt.meta_field("groups")?;
        ensure!(stored == model.groups, State, "stored parameter groups disagree with the model");
        Ok(model)
    }
}

/// Classifies every parameter in `store`; unknown names are an error.
pub fn partition_parameters(store: &ParamStore) -> Result<ParameterGroups> {
    let names: Vec<String> = store.named_vars().into_iter().map(|(n, _)| n).collect();
    ParameterGroups::from_names(names.iter().map(String::as_str))
}

#[cfg(test)]
mod tests;
