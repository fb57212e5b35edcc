//! The full trainable model: skeleton, architecture config and parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bodymodel::Skeleton;
use crate::canonicalfield::{init_canonical, CanonicalFieldConfig};
use crate::checkpoint::{self, CheckpointError};
use crate::motionfield::{init_motion, weight_volume_geometry, GridGeometry, MotionConfig, WeightVolume, WEIGHTS_PARAM};
use crate::nn::{ModelError, ParamSet};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub canonical: CanonicalFieldConfig,
    pub motion: MotionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub skeleton: Skeleton,
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Rows of the per-frame pose-correction tensor.
    pub num_frames: usize,
}

impl Model {
    pub fn new(skeleton: Skeleton, config: ModelConfig, num_frames: usize, seed: u64) -> Result<Self, ModelError> {
        config.canonical.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_canonical(&mut params, &config.canonical, &mut rng)?;
        init_motion(&mut params, &skeleton, &config.motion, num_frames, &mut rng)?;
        Ok(Self {
            skeleton,
            config,
            params,
            num_frames,
        })
    }

    /// Replaces the parameters after checking names and shapes.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self, ModelError> {
        for (name, t) in self.params.iter() {
            let other = params.get(name)?;
            if other.shape() != t.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    actual: other.shape().to_vec(),
                });
            }
        }
        if params.len() != self.params.len() {
            let extra = params.names().into_iter().find(|n| !self.params.contains(n)).unwrap_or_default();
            return Err(ModelError::Config(format!("unexpected parameter `{extra}`")));
        }
        self.params = params;
        Ok(self)
    }

    pub fn geometry(&self) -> GridGeometry {
        weight_volume_geometry(&self.skeleton, self.config.motion.grid_resolution)
    }

    /// Metadata stored alongside the tensors; enough to rebuild the model.
    pub fn metadata(&self, iteration: usize) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "skeleton": self.skeleton,
            "num_frames": self.num_frames,
            "iteration": iteration,
        })
    }

    pub fn save(&self, path: &Path, iteration: usize) -> Result<(), CheckpointError> {
        checkpoint::save(path, &self.params, &self.metadata(iteration))
    }

    /// Rebuilds a model from a checkpoint; returns it with the stored
    /// iteration count.
    pub fn load(path: &Path) -> Result<(Self, usize), CheckpointError> {
        let (params, meta) = checkpoint::load(path)?;
        let err = |msg: String| CheckpointError::Format {
            path: path.display().to_string(),
            msg,
        };
        let field = |name: &str| meta.get(name).cloned().ok_or_else(|| err(format!("metadata lacks `{name}`")));
        let config: ModelConfig = serde_json::from_value(field("config")?).map_err(|e| err(format!("config: {e}")))?;
        let skeleton: Skeleton = serde_json::from_value(field("skeleton")?).map_err(|e| err(format!("skeleton: {e}")))?;
        let num_frames: usize = serde_json::from_value(field("num_frames")?).map_err(|e| err(format!("num_frames: {e}")))?;
        let iteration: usize = serde_json::from_value(field("iteration")?).map_err(|e| err(format!("iteration: {e}")))?;
        let model = Self::new(skeleton, config, num_frames, 0)
            .and_then(|m| m.with_params(params))
            .map_err(|e| err(e.to_string()))?;
        Ok((model, iteration))
    }

    pub fn weight_volume(&self) -> Result<WeightVolume, ModelError> {
        Ok(WeightVolume {
            geometry: self.geometry(),
            logits: self.params.get(WEIGHTS_PARAM)?.clone(),
        })
    }
}
