//! Run configuration. On disk it is a flat JSON object whose keys are dotted
//! paths into [`Config`], e.g. `{"train.steps": 300, "model.bev.resolution": 0.8}`.
//! Keys that are absent keep their defaults.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::scene::SynthConfig;
use crate::tensor::AdamWConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not a flat JSON object: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per optimizer step; their gradients are averaged in scene order.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Weight of the auxiliary height-bin cross-entropy; 0 turns it off.
    pub height_weight: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 2, optimizer: AdamWConfig::default(), height_weight: 0.0, log_every: 25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub max_detections: usize,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_threshold: 0.1, max_detections: 128, nms_iou: 0.2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

impl Config {
    /// Every leaf as a dotted key, in key order.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    /// Replaces one leaf. The key must name an existing leaf and the value must fit its type.
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        if slot.is_object() {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| ConfigError::Value { key: key.to_string(), msg: e.to_string() })?;
        Ok(())
    }

    pub fn from_flat_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let Value::Object(map) = v else { return Err(ConfigError::Syntax("top level must be an object".into())) };
        let mut cfg = Config::default();
        for (k, v) in map {
            cfg.set(&k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.optimizer.lr > 0.0) || !(t.height_weight >= 0.0) {
            return Err(ConfigError::Invalid("train.batch_size and train.optimizer.lr must be positive, train.height_weight non-negative".into()));
        }
        let d = &self.detect;
        if !(0.0..=1.0).contains(&d.score_threshold) || !(d.nms_iou > 0.0 && d.nms_iou <= 1.0) {
            return Err(ConfigError::Invalid("detect thresholds must lie in [0, 1]".into()));
        }
        if self.synth.image_width != self.model.image_width || self.synth.image_height != self.model.image_height {
            return Err(ConfigError::Invalid("synth and model image sizes differ".into()));
        }
        Ok(())
    }
}
