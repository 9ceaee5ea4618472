use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::bnr::BnrConfig;
use crate::classifier::ClassifierConfig;
use crate::codec::{CodecConfig, CodecMode};
use crate::diffusion::{default_stride, ScheduleDescriptor};
use crate::error::{ensure, Error, Result};
use crate::glyphdata::{CharId, DatasetParams, SplitRatios, StyleId};
use crate::metrics::MetricsConfig;

/// Everything a run needs, read from one JSON file. Unknown keys anywhere
/// are rejected; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Sampling stride; `None` picks about fifty steps.
    pub stride: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps, checked after every step.
    pub max_steps: Option<usize>,
    pub n_refs: usize,
    pub seed: u64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    /// Sample with the posterior mean only (no fresh noise per step).
    pub mean_path: bool,
    /// Restricts base training to these styles / chars (defaults: the seen split).
    pub train_styles: Option<Vec<StyleId>>,
    pub train_chars: Option<Vec<CharId>>,
    pub dataset: DatasetSection,
    pub codec: CodecSection,
    pub model: ModelSection,
    pub classifier: ClassifierSection,
    pub bnr: BnrSection,
    pub evaluation: EvaluationSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            stride: None,
            batch_size: 16,
            lr: 1e-4,
            epochs: 10,
            max_steps: None,
            n_refs: 8,
            seed: 0,
            finetune_epochs: 80,
            finetune_lr: 1e-5,
            finetune_batch_size: 32,
            mean_path: false,
            train_styles: None,
            train_chars: None,
            dataset: DatasetSection::default(),
            codec: CodecSection::default(),
            model: ModelSection::default(),
            classifier: ClassifierSection::default(),
            bnr: BnrSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub num_chars: usize,
    pub num_styles: usize,
    pub split: SplitRatios,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_chars: 80,
            num_styles: 9,
            split: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub mode: CodecMode,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            mode: CodecMode::Learned,
            downsample_factor: 4,
            latent_channels: 4,
            base_channels: 32,
            kl_weight: 1e-6,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    pub attn_levels: usize,
    pub mid_attention: bool,
    pub cross_attention: bool,
    pub heads: usize,
    pub token_dim: usize,
    pub norm_groups: usize,
    pub ff_mult: usize,
    pub style_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::new(1, 1, 1);
        Self {
            base_width: b.base_width,
            channel_mult: b.channel_mult,
            res_blocks: b.res_blocks,
            attn_levels: b.attn_levels,
            mid_attention: b.mid_attention,
            cross_attention: b.cross_attention,
            heads: b.heads,
            token_dim: b.token_dim,
            norm_groups: b.norm_groups,
            ff_mult: b.ff_mult,
            style_width: b.style_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub width: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            width: 16,
            feature_dim: 64,
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

/// How BNR training inputs are produced from the frozen model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnrInput {
    /// Decoded z0 estimates from one denoiser call at a uniform random t.
    SingleStep,
    /// Decodes of complete reverse-sampling runs.
    FullSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnrSection {
    pub threshold: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub otsu: bool,
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub input: BnrInput,
    /// Training samples drawn per (style, char) target.
    pub samples_per_image: usize,
    /// Density of dark specks injected into decodes before refinement.
    pub speckle: f64,
}

impl Default for BnrSection {
    fn default() -> Self {
        let b = BnrConfig::default();
        Self {
            threshold: b.threshold,
            lambda1: b.lambda1,
            lambda2: b.lambda2,
            otsu: b.otsu,
            base_width: b.base_width,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            input: BnrInput::SingleStep,
            samples_per_image: 2,
            speckle: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub metrics: MetricsConfig,
    /// Caps the number of target chars per (setting, style).
    pub max_chars: Option<usize>,
    /// Density of dark specks injected into decodes before BNR.
    pub decode_speckle: f64,
    /// Number of cells per row in triptych grids.
    pub grid_columns: usize,
    pub sensitivity_batch: usize,
    pub sensitivity_micro_batches: usize,
    /// Timestep range `[lo, hi]` sampled for gradient analysis.
    pub sensitivity_t: Option<[usize; 2]>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            metrics: MetricsConfig::default(),
            max_chars: None,
            decode_speckle: 0.0,
            grid_columns: 8,
            sensitivity_batch: 128,
            sensitivity_micro_batches: 8,
            sensitivity_t: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_refs >= 1, Config, "n_refs must be >= 1");
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.finetune_epochs >= 1, Config, "finetune_epochs must be >= 1");
        ensure!(
            self.batch_size >= 1 && self.finetune_batch_size >= 1,
            Config,
            "batch sizes must be >= 1"
        );
        ensure!(self.lr > 0.0 && self.finetune_lr > 0.0, Config, "learning rates must be positive");
        ensure!(self.stride.is_none_or(|s| s >= 1), Config, "stride must be >= 1");
        ensure!(self.max_steps.is_none_or(|s| s >= 1), Config, "max_steps must be >= 1");
        ensure!(self.bnr.samples_per_image >= 1, Config, "bnr.samples_per_image must be >= 1");
        ensure!((0.0..=1.0).contains(&self.bnr.speckle), Config, "bnr.speckle must lie in [0, 1]");
        ensure!(
            (0.0..=1.0).contains(&self.evaluation.decode_speckle),
            Config,
            "evaluation.decode_speckle must lie in [0, 1]"
        );
        ensure!(self.evaluation.grid_columns >= 1, Config, "grid_columns must be >= 1");
        ensure!(
            self.evaluation.sensitivity_batch >= 1 && self.evaluation.sensitivity_micro_batches >= 1,
            Config,
            "sensitivity batch settings must be >= 1"
        );
        if let Some([lo, hi]) = self.evaluation.sensitivity_t {
            ensure!(
                lo >= 1 && lo <= hi && hi <= self.timesteps,
                Config,
                "sensitivity_t [{lo}, {hi}] outside [1, {}]",
                self.timesteps
            );
        }
        crate::diffusion::make_schedule(self.timesteps, self.beta_min, self.beta_max)?;
        self.dataset.split.validate()?;
        self.codec_config().validate()?;
        self.bnr_config().validate()?;
        self.backbone_config().validate()?;
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or_else(|| default_stride(self.timesteps))
    }

    pub fn schedule_descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            timesteps: self.timesteps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            stride: self.stride(),
        }
    }

    pub fn dataset_params(&self) -> DatasetParams {
        DatasetParams {
            num_chars: self.dataset.num_chars,
            num_styles: self.dataset.num_styles,
            size: self.image_size,
            split_ratios: self.dataset.split.clone(),
            seed: self.seed,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        let c = &self.codec;
        match c.mode {
            CodecMode::Identity => CodecConfig::identity(self.image_size),
            CodecMode::Learned => CodecConfig {
                image_size: self.image_size,
                downsample_factor: c.downsample_factor,
                latent_channels: c.latent_channels,
                mode: CodecMode::Learned,
                base_channels: c.base_channels,
                kl_weight: c.kl_weight,
            },
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let [lc, ls, _] = self.codec_config().latent_shape();
        let m = &self.model;
        BackboneConfig {
            latent_channels: lc,
            latent_size: ls,
            image_size: self.image_size,
            base_width: m.base_width,
            channel_mult: m.channel_mult.clone(),
            res_blocks: m.res_blocks,
            attn_levels: m.attn_levels,
            mid_attention: m.mid_attention,
            cross_attention: m.cross_attention,
            heads: m.heads,
            token_dim: m.token_dim,
            norm_groups: m.norm_groups,
            ff_mult: m.ff_mult,
            style_width: m.style_width,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            image_size: self.image_size,
            width: self.classifier.width,
            feature_dim: self.classifier.feature_dim,
        }
    }

    pub fn bnr_config(&self) -> BnrConfig {
        let b = &self.bnr;
        BnrConfig {
            threshold: b.threshold,
            lambda1: b.lambda1,
            lambda2: b.lambda2,
            otsu: b.otsu,
            base_width: b.base_width,
        }
    }
}
