//! Training loop and inference over prepared scenes.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::config::{DetectConfig, TrainConfig};
use crate::eval::{GroundTruth, SceneResult};
use crate::head::{decode_boxes, encode_targets, rotated_nms, Detection, Targets};
use crate::model::{InputError, Model, ModelInput, FEATURE_STRIDE};
use crate::scene::{height_bin_labels, EgoObject, SceneRecord};
use crate::tensor::{AdamW, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no scenes to train on")]
    NoScenes,
    #[error("scene {id}: {source}")]
    Input { id: String, source: InputError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Everything a scene contributes to training, computed once.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    pub input: ModelInput,
    pub objects: Vec<EgoObject>,
    pub targets: Targets,
    pub height_bins: Option<Vec<usize>>,
}

impl PreparedScene {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(|o| GroundTruth { bbox: o.bbox, class: o.class, difficulty: o.difficulty }).collect()
    }
}

pub fn prepare_scene(model: &Model, record: &SceneRecord) -> Result<PreparedScene, TrainError> {
    let input = model
        .prepare(&record.image, &record.frame)
        .map_err(|source| TrainError::Input { id: record.id.clone(), source })?;
    let (objects, _) = record.objects();
    let gt: Vec<_> = objects.iter().map(|o| (o.bbox, o.class)).collect();
    let c = &model.config;
    let targets = encode_targets(&gt, &c.bev, c.n_classes());
    let height_bins =
        record.height_map.as_ref().map(|h| height_bin_labels(h, record.image.width, FEATURE_STRIDE, &c.bins));
    Ok(PreparedScene { id: record.id.clone(), input, objects, targets, height_bins })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    /// Mean loss over all scenes before the first update.
    pub initial_loss: f64,
    /// Mean loss over all scenes after the last update.
    pub final_loss: f64,
    /// Batch loss of every step.
    pub step_losses: Vec<f64>,
}

fn loss_and_grads(
    model: &Model,
    scene: &PreparedScene,
    height_weight: f64,
    with_grads: bool,
) -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>), TrainError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &scene.input)?;
    let loss = model.loss(&mut tape, &out, &scene.targets, scene.height_bins.as_deref(), height_weight)?;
    let value = tape.value(loss).data()[0];
    if !with_grads {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    Ok((value, Some(model.params.grads(&tape, &p))))
}

/// Mean training loss over `scenes` at the current parameters.
pub fn mean_loss(model: &Model, scenes: &[PreparedScene], height_weight: f64) -> Result<f64, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let mut total = 0.0;
    for s in scenes {
        total += loss_and_grads(model, s, height_weight, false)?.0;
    }
    Ok(total / scenes.len() as f64)
}

/// AdamW over `cfg.steps` batches. Step `t` uses scenes `t·b … t·b+b−1`
/// modulo the scene count, so the schedule is fixed by the scene order.
pub fn train(model: &mut Model, scenes: &[PreparedScene], cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    let initial_loss = mean_loss(model, scenes, cfg.height_weight)?;
    log::info!("initial loss {initial_loss:.6} over {} scenes", scenes.len());
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let b = cfg.batch_size.max(1);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for k in 0..b {
            let scene = &scenes[(step * b + k) % scenes.len()];
            let (l, g) = loss_and_grads(model, scene, cfg.height_weight, true)?;
            batch_loss += l / b as f64;
            for (name, g) in g.expect("gradients requested") {
                match sum.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        if b > 1 {
            sum.values_mut().flatten().for_each(|v| *v /= b as f64);
        }
        opt.update(&mut model.params, &sum);
        step_losses.push(batch_loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("step {:>5} loss {batch_loss:.6}", step + 1);
        }
    }
    let final_loss = mean_loss(model, scenes, cfg.height_weight)?;
    log::info!("final loss {final_loss:.6}");
    Ok(TrainLog { initial_loss, final_loss, step_losses })
}

/// Decoded, class-wise NMS-filtered detections, highest score first.
pub fn detect(model: &Model, input: &ModelInput, cfg: &DetectConfig) -> Result<Vec<Detection>, TrainError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &p, input)?;
    let maps = out.head.maps(&tape);
    let raw = decode_boxes(&maps, &model.config.bev, cfg.max_detections, cfg.score_threshold);
    Ok(rotated_nms(&raw, cfg.nms_iou))
}

/// Detections paired with ground truth for every scene.
pub fn scene_results(model: &Model, scenes: &[PreparedScene], cfg: &DetectConfig) -> Result<Vec<SceneResult>, TrainError> {
    scenes.iter().map(|s| Ok(SceneResult { gts: s.ground_truth(), preds: detect(model, &s.input, cfg)? })).collect()
}

/// The BEV feature map fed to the head, `C×cells_y×cells_x`.
pub fn bev_features(model: &Model, input: &ModelInput) -> Result<crate::tensor::Tensor, TrainError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &p, input)?;
    Ok(tape.value(out.bev.var).clone())
}
