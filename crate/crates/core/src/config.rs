//! Run configuration with sections `scene`, `model`, `sampling`, `streams`
//! and `fit`. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::attention::{DistanceFn, TauMode};
use crate::decoder::{ModelConfig, MAX_LAYERS};
use crate::error::{Error, Result};
use crate::mixing::MixingOrder;
use crate::sampling::{SamplingConfig, StreamSpec};
use crate::scene::SceneConfig;
use crate::training::FitConfig;

/// Model hyperparameters that do not follow from the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_queries: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub layers: usize,
    pub query_seed: u64,
    pub class_prior: f64,
    pub tau_mode: TauMode,
    pub distance: DistanceFn,
    pub mixing_order: MixingOrder,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            num_queries: m.num_queries,
            d_model: m.d_model,
            heads: m.heads,
            head_dim: m.head_dim,
            mlp_hidden: m.mlp_hidden,
            layers: MAX_LAYERS,
            query_seed: m.query_seed,
            class_prior: m.class_prior,
            tau_mode: m.tau_mode,
            distance: m.distance,
            mixing_order: m.mixing_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub frames: usize,
    pub points: usize,
    pub align_ego: bool,
    pub align_object: bool,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self {
            frames: s.frames,
            points: s.points,
            align_ego: s.align_ego,
            align_object: s.align_object,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelSection,
    pub sampling: SamplingSection,
    /// Empty means one full-resolution stream over all frames.
    pub streams: Vec<StreamSpec>,
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.sampling.frames > self.scene.frames {
            return Err(Error::config(format!(
                "sampling uses {} frames, the scene has {}",
                self.sampling.frames, self.scene.frames
            )));
        }
        self.model_config().validate()?;
        self.fit.validate()
    }

    /// Model config with classes, channels, extent and levels taken from the
    /// scene.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_queries: m.num_queries,
            d_model: m.d_model,
            heads: m.heads,
            head_dim: m.head_dim,
            num_classes: self.scene.num_classes,
            channels: self.scene.channels,
            mlp_hidden: m.mlp_hidden,
            layers: m.layers,
            roi_half_extent: self.scene.roi_half_extent,
            query_seed: m.query_seed,
            class_prior: m.class_prior,
            tau_mode: m.tau_mode,
            distance: m.distance,
            mixing_order: m.mixing_order,
            sampling: SamplingConfig {
                frames: self.sampling.frames,
                points: self.sampling.points,
                levels: self.scene.rig.strides.len(),
                align_ego: self.sampling.align_ego,
                align_object: self.sampling.align_object,
                streams: self.streams.clone(),
            },
        }
    }
}
