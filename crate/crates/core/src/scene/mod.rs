//! Scene files, the synthetic scene generator and BEV visualization.

mod dataset;
mod labels;
mod render;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::ppm::PpmError;

pub use dataset::{height_bin_labels, list_scenes, load_scene, write_scene, SceneRecord, SCENE_FILES};
pub use labels::{
    box_corners, ego_to_label, ego_yaw_from_rotation_y, gt_to_ego_boxes, parse_calib, parse_ground_plane, parse_labels,
    rotation_y_from_ego_yaw, serialize_calib, serialize_ground_plane, serialize_labels, EgoObject, LabelRecord,
};
pub use render::{draw_box, render_bev_detections, render_feature_map, BevCanvas, COLOR_FP, COLOR_GT, COLOR_TP};
pub use synth::{class_color, generate_scene, scene_seed, SynthConfig, SyntheticScene, BACKGROUND};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error("could not place object {index} without overlap after {attempts} attempts")]
    Placement { index: usize, attempts: usize },
    #[error("invalid synthetic scene settings: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ppm(#[from] PpmError),
}
