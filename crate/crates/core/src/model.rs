//! The trainable bundle: conditioning parameters, the denoiser, and the
//! frozen encoders they read from.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::RasterImage;
use crate::caption::Caption;
use crate::conditioning::{
    build_condition, encode_text, encode_visual, AblationFlags, ConditionMode, ConditionParams,
    ConditionVector, EmbeddingSource, TextEncoder, TokenEmbeddings, ToyTextEncoder,
    ToyVisionEncoder, VisionEncoder,
};
use crate::diffusion::{DenoiserConfig, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Tokens per embedding `L`.
    pub tokens: usize,
    /// Embedding width `d`.
    pub dim: usize,
    pub fusion_hidden: usize,
    pub mode: ConditionMode,
    pub base_channels: usize,
    pub attn_dim: usize,
    pub blocks: usize,
    pub downsample: usize,
    /// Native side length of the vision encoder input.
    pub vision_input: usize,
    pub encoder_seed: u64,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            dim: 32,
            fusion_hidden: 32,
            mode: ConditionMode::Dual,
            base_channels: 32,
            attn_dim: 16,
            blocks: 2,
            downsample: 4,
            vision_input: 16,
            encoder_seed: 0x5eed,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Embedding sizes of the published setup (77 tokens of width 768).
    pub fn published_scale() -> Self {
        Self {
            tokens: 77,
            dim: 768,
            fusion_hidden: 768,
            base_channels: 320,
            attn_dim: 64,
            vision_input: 224,
            ..Self::default()
        }
    }

    /// The frozen toy encoders this configuration describes.
    pub fn encoders(&self) -> (Arc<dyn TextEncoder>, Arc<dyn VisionEncoder>) {
        (
            Arc::new(ToyTextEncoder::new(self.tokens, self.dim, self.encoder_seed)),
            Arc::new(ToyVisionEncoder::new(
                self.tokens,
                self.dim,
                self.vision_input,
                self.encoder_seed ^ 0x9e37_79b9_7f4a_7c15,
            )),
        )
    }

    pub fn context_len(&self) -> usize {
        self.mode.context_len(self.tokens)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: crate::canvas::CHANNELS,
            base_channels: self.base_channels,
            attn_dim: self.attn_dim,
            blocks: self.blocks,
            context_len: self.context_len(),
            context_dim: self.dim,
            downsample: self.downsample,
            timesteps: self.schedule.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens < 2 {
            return Err(Error::Config("tokens must be at least 2".into()));
        }
        if self.dim == 0 || self.fusion_hidden == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        let (rows, cols) = grid_for(self.tokens);
        if self.vision_input < rows.max(cols) {
            return Err(Error::Config(format!(
                "vision_input {} is too small for {} patch tokens",
                self.vision_input, self.tokens
            )));
        }
        self.denoiser().validate()?;
        NoiseSchedule::linear(&self.schedule)?;
        Ok(())
    }
}

fn grid_for(tokens: usize) -> (usize, usize) {
    let rows = (1..=tokens)
        .filter(|r| tokens.is_multiple_of(*r) && r * r <= tokens)
        .max()
        .unwrap_or(1);
    (rows, tokens / rows)
}

#[derive(Clone)]
pub struct OutpaintModel {
    config: ModelConfig,
    params: ParamStore,
    schedule: NoiseSchedule,
    text: Arc<dyn TextEncoder>,
    vision: Arc<dyn VisionEncoder>,
}

impl std::fmt::Debug for OutpaintModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OutpaintModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish_non_exhaustive()
    }
}

impl OutpaintModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        ConditionParams::init(config.mode, config.dim, config.fusion_hidden, &mut rng)
            .store_into(&mut params);
        config.denoiser().init_params(&mut rng, &mut params);
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            let got = params.get(name)?;
            if got.dim() != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    got.dim()
                )));
            }
        }
        if params.len() != expected.len() {
            let extra: Vec<_> = params
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(Error::Checkpoint(format!("unexpected parameters {extra:?}")));
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("parameters contain non-finite values".into()));
        }
        let schedule = NoiseSchedule::linear(&config.schedule)?;
        let (text, vision) = config.encoders();
        Ok(Self {
            config,
            params,
            schedule,
            text,
            vision,
        })
    }

    /// Swaps in different frozen encoders with the same `(L, d)`.
    pub fn with_encoders(
        mut self,
        text: Arc<dyn TextEncoder>,
        vision: Arc<dyn VisionEncoder>,
    ) -> Result<Self> {
        let want = (self.config.tokens, self.config.dim);
        if (text.tokens(), text.dim()) != want || (vision.tokens(), vision.dim()) != want {
            return Err(Error::Config(format!(
                "encoders must produce {want:?} embeddings"
            )));
        }
        self.text = text;
        self.vision = vision;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        self.config.denoiser()
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        self.text.as_ref()
    }

    pub fn vision_encoder(&self) -> &dyn VisionEncoder {
        self.vision.as_ref()
    }

    pub fn condition_params(&self) -> Result<ConditionParams> {
        ConditionParams::from_store(self.config.mode, &self.params)
    }

    pub fn encode_caption(&self, caption: &Caption) -> Result<TokenEmbeddings> {
        encode_text(caption, self.text.as_ref())
    }

    pub fn encode_image(&self, image: &RasterImage) -> Result<TokenEmbeddings> {
        encode_visual(image, self.vision.as_ref())
    }

    pub fn null_embedding(&self, source: EmbeddingSource) -> TokenEmbeddings {
        TokenEmbeddings::new(Matrix::zeros((self.config.tokens, self.config.dim)), source)
            .expect("zeros are finite")
    }

    /// Encodes the inputs and builds the context; absent inputs must be ablated.
    pub fn condition(
        &self,
        global: &Caption,
        local: Option<&Caption>,
        visual: &RasterImage,
        flags: AblationFlags,
    ) -> Result<ConditionVector> {
        let eg = self.encode_caption(global)?;
        let el = match local {
            Some(c) => self.encode_caption(c)?,
            None if !flags.use_local => self.null_embedding(EmbeddingSource::TextLocal),
            None => {
                return Err(Error::Validation(
                    "a local caption is required unless the local path is ablated".into(),
                ))
            }
        };
        let ei = if flags.use_visual {
            self.encode_image(visual)?
        } else {
            self.null_embedding(EmbeddingSource::Visual)
        };
        build_condition(&eg, &el, &ei, &self.condition_params()?, self.config.mode, flags)
    }
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = config.dim;
    let h = config.fusion_hidden;
    let mut v = Vec::new();
    let fusion_in = match config.mode {
        ConditionMode::Dual => Some(2 * d),
        ConditionMode::AllInMlp => Some(3 * d),
        ConditionMode::AllInXattn => None,
    };
    if let Some(i) = fusion_in {
        v.push(("cond.fusion.w1".to_string(), (i, h)));
        v.push(("cond.fusion.b1".to_string(), (1, h)));
        v.push(("cond.fusion.w2".to_string(), (h, d)));
        v.push(("cond.fusion.b2".to_string(), (1, d)));
    }
    v.push(("cond.visual_proj".to_string(), (d, d)));
    v.extend(config.denoiser().param_shapes());
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let a = OutpaintModel::init(ModelConfig::default(), 3).unwrap();
        let b = OutpaintModel::init(ModelConfig::default(), 3).unwrap();
        assert_eq!(a.params(), b.params());
        let c = OutpaintModel::init(ModelConfig::default(), 4).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn from_params_rejects_missing_and_extra() {
        let m = OutpaintModel::init(ModelConfig::default(), 3).unwrap();
        let mut p = m.params().clone();
        p.insert("extra", Matrix::zeros((1, 1)));
        assert!(OutpaintModel::from_params(ModelConfig::default(), p).is_err());
        let p = m.params().subset("unet.");
        assert!(OutpaintModel::from_params(ModelConfig::default(), p).is_err());
    }

    #[test]
    fn xattn_mode_has_no_fusion_params() {
        let cfg = ModelConfig {
            mode: ConditionMode::AllInXattn,
            ..Default::default()
        };
        let m = OutpaintModel::init(cfg, 0).unwrap();
        assert!(!m.params().contains("cond.fusion.w1"));
        assert_eq!(m.denoiser_config().context_len, 24);
    }
}
