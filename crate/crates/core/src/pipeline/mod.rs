//! Orchestration: base training, few-shot fine-tuning, generation, BNR
//! training, evaluation runs and gradient reports, plus the on-disk layout
//! of a run directory.

mod artifacts;
mod config;
mod evaluate;
mod generate;
mod train;

pub use artifacts::{bar_chart, read_loss_csv, save_bar_chart, save_png, triptych_grid, write_loss_csv, LossPoint, Triptych};
pub use config::{
    BnrInput, BnrSection, ClassifierSection, CodecSection, DatasetSection, EvaluationSection, ModelSection,
    TrainConfig,
};
pub use evaluate::{
    analyze_gradients, gradient_batches, reference_chars, run_evaluation, target_chars, EvalPlan, EvalRun,
};
pub use generate::{inject_speckle, GenerateOptions, Generation};
pub use train::{
    bnr_samples, finetune, train_base, train_bnr_stage, train_classifier_stage, BaseTraining, LatentCache,
};

use std::path::Path;

use candle_core::DType;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::{Codec, CodecConfig};
use crate::diffusion::{NoiseSchedule, ScheduleDescriptor};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, Checkpoint};

pub const CODEC_FILE: &str = "codec.ckpt";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const BNR_FILE: &str = "bnr.ckpt";
pub const CONFIG_FILE: &str = "config.json";

/// Codec, denoiser and noise schedule of one trained model.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub codec: Codec,
    pub backbone: Backbone,
    schedule: NoiseSchedule,
    descriptor: ScheduleDescriptor,
}

#[derive(Serialize)]
struct HashInput<'a> {
    codec: &'a CodecConfig,
    codec_scale: f64,
    backbone: &'a BackboneConfig,
    schedule: &'a ScheduleDescriptor,
}

impl Pipeline {
    pub fn new(codec: Codec, backbone: Backbone, descriptor: ScheduleDescriptor) -> Result<Self> {
        let [c, h, _] = codec.latent_shape();
        let b = backbone.config();
        ensure!(
            c == b.latent_channels && h == b.latent_size && codec.config().image_size == b.image_size,
            State,
            "codec latents {:?} at {}px do not fit a backbone built for [{}, {}, {}] at {}px",
            codec.latent_shape(),
            codec.config().image_size,
            b.latent_channels,
            b.latent_size,
            b.latent_size,
            b.image_size
        );
        let schedule = NoiseSchedule::from_descriptor(&descriptor)?;
        Ok(Self {
            codec,
            backbone,
            schedule,
            descriptor,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        self.descriptor
    }

    pub fn stride(&self) -> usize {
        self.descriptor.stride
    }

    /// Same codec and schedule around another set of denoiser weights.
    pub fn with_backbone(&self, backbone: Backbone) -> Result<Self> {
        Self::new(self.codec.clone(), backbone, self.descriptor)
    }

    /// Identifies the architecture, codec normalization and schedule; weights
    /// are deliberately excluded so fine-tuned models keep their base hash.
    pub fn config_hash(&self) -> Result<String> {
        let input = HashInput {
            codec: self.codec.config(),
            codec_scale: self.codec.scale(),
            backbone: self.backbone.config(),
            schedule: &self.descriptor,
        };
        Ok(nn::hex(&Sha256::digest(serde_json::to_vec(&input)?)))
    }

    pub fn backbone_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.backbone.to_checkpoint()?;
        let meta = ckpt
            .meta
            .as_object_mut()
            .ok_or_else(|| Error::Internal("backbone metadata is not an object".into()))?;
        meta.insert("schedule".into(), serde_json::to_value(self.descriptor)?);
        meta.insert(
            "alpha_bar_T".into(),
            serde_json::to_value(self.schedule.alpha_bar(self.schedule.timesteps())?)?,
        );
        meta.insert("config_hash".into(), self.config_hash()?.into());
        Ok(ckpt)
    }

    pub fn from_checkpoints(codec: &Checkpoint, backbone: &Checkpoint) -> Result<Self> {
        let c = Codec::from_checkpoint(codec)?;
        let b = Backbone::from_checkpoint(backbone)?;
        let descriptor: ScheduleDescriptor = backbone.meta_field("schedule")?;
        let p = Self::new(c, b, descriptor)?;
        let stored: f64 = backbone.meta_field("alpha_bar_T")?;
        let fresh = p.schedule.alpha_bar(p.schedule.timesteps())?;
        ensure!(
            (stored - fresh).abs() <= 1e-9,
            State,
            "stored alpha_bar_T {stored} disagrees with the rebuilt schedule ({fresh})"
        );
        let hash: String = backbone.meta_field("config_hash")?;
        ensure!(
            hash == p.config_hash()?,
            State,
            "codec and backbone checkpoints come from different runs"
        );
        Ok(p)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codec.to_checkpoint()?.save(&dir.join(CODEC_FILE))?;
        self.backbone_checkpoint()?.save(&dir.join(BACKBONE_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let codec = load_required(dir, CODEC_FILE, crate::codec::CHECKPOINT_KIND)?;
        let backbone = load_required(dir, BACKBONE_FILE, crate::backbone::CHECKPOINT_KIND)?;
        Self::from_checkpoints(&codec, &backbone)
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }
}

/// Loads `dir/file`, reporting an absent file as missing pipeline state.
pub fn load_required(dir: &Path, file: &str, kind: &str) -> Result<Checkpoint> {
    let path = dir.join(file);
    ensure!(
        path.is_file(),
        State,
        "{} not found; run the stage that produces it first",
        path.display()
    );
    Checkpoint::load_kind(&path, kind)
}
