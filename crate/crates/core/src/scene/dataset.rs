//! On-disk scene folders: `<root>/<id>/{image.ppm, label.txt, calib.txt, denorm.txt, height.txt}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::geometry::{CameraIntrinsics, GroundPlane, VirtualCameraFrame};
use crate::height::HeightBinSpec;
use crate::ppm::RgbImage;

use super::labels::{
    gt_to_ego_boxes, parse_calib, parse_ground_plane, parse_labels, serialize_calib, serialize_ground_plane,
    serialize_labels, EgoObject, LabelRecord,
};
use super::synth::SyntheticScene;
use super::SceneError;

pub const SCENE_FILES: [&str; 5] = ["image.ppm", "label.txt", "calib.txt", "denorm.txt", "height.txt"];

/// A scene read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: RgbImage,
    pub intrinsics: CameraIntrinsics,
    pub plane: GroundPlane,
    pub frame: VirtualCameraFrame,
    pub labels: Vec<LabelRecord>,
    /// Present when the folder has a `height.txt`.
    pub height_map: Option<Vec<f64>>,
}

impl SceneRecord {
    /// Ego objects of known classes, and the number of skipped labels.
    pub fn objects(&self) -> (Vec<EgoObject>, usize) {
        gt_to_ego_boxes(&self.labels, &self.frame)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.to_path_buf(), source }
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<(), SceneError> {
    fs::write(&path, bytes).map_err(io(&path))
}

fn read_text(path: &Path) -> Result<String, SceneError> {
    fs::read_to_string(path).map_err(io(path))
}

fn with_path<T>(path: &Path, r: Result<T, SceneError>) -> Result<T, SceneError> {
    r.map_err(|e| match e {
        SceneError::Parse { line, msg } => SceneError::File { path: path.to_path_buf(), msg: format!("line {line}: {msg}") },
        other => SceneError::File { path: path.to_path_buf(), msg: other.to_string() },
    })
}

pub fn write_scene(root: &Path, id: &str, scene: &SyntheticScene) -> Result<PathBuf, SceneError> {
    let dir = root.join(id);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    write(dir.join("image.ppm"), &scene.image.to_ppm())?;
    write(dir.join("label.txt"), serialize_labels(&scene.labels).as_bytes())?;
    write(dir.join("calib.txt"), serialize_calib(&scene.intrinsics).as_bytes())?;
    write(dir.join("denorm.txt"), serialize_ground_plane(&scene.plane).as_bytes())?;
    let w = scene.image.width;
    let rows: String = scene
        .height_map
        .chunks(w.max(1))
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    write(dir.join("height.txt"), rows.as_bytes())?;
    Ok(dir)
}

pub fn load_scene(dir: &Path) -> Result<SceneRecord, SceneError> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let img_path = dir.join("image.ppm");
    let bytes = fs::read(&img_path).map_err(io(&img_path))?;
    let image = with_path(&img_path, RgbImage::from_ppm(&bytes).map_err(SceneError::from))?;
    let p = dir.join("label.txt");
    let labels = with_path(&p, parse_labels(&read_text(&p)?))?;
    let p = dir.join("calib.txt");
    let intrinsics = with_path(&p, parse_calib(&read_text(&p)?))?;
    let p = dir.join("denorm.txt");
    let plane = with_path(&p, parse_ground_plane(&read_text(&p)?))?;
    let frame = with_path(&p, VirtualCameraFrame::from_calibration(&plane, intrinsics).map_err(SceneError::from))?;
    let p = dir.join("height.txt");
    let height_map = if p.exists() {
        let text = read_text(&p)?;
        let vals: Result<Vec<f64>, _> = text.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let vals = vals.map_err(|e| SceneError::File { path: p.clone(), msg: e.to_string() })?;
        if vals.len() != image.width * image.height {
            return Err(SceneError::File {
                path: p,
                msg: format!("{} heights for a {}×{} image", vals.len(), image.width, image.height),
            });
        }
        Some(vals)
    } else {
        None
    };
    Ok(SceneRecord { id, image, intrinsics, plane, frame, labels, height_map })
}

/// Scene folders under `root` (those holding an `image.ppm`), sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>, SceneError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("image.ppm").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Bin index of each feature pixel, read at the image pixel nearest the
/// feature cell center.
pub fn height_bin_labels(height_map: &[f64], width: usize, stride: usize, bins: &HeightBinSpec) -> Vec<usize> {
    let height = height_map.len() / width.max(1);
    let (hf, wf) = (height / stride, width / stride);
    let half = stride / 2;
    (0..hf * wf)
        .map(|q| {
            let (i, j) = (q / wf, q % wf);
            bins.bin_of(height_map[(i * stride + half) * width + j * stride + half])
        })
        .collect()
}
