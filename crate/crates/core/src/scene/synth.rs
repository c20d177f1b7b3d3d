//! Deterministic synthetic road scenes: a random roadside camera over flat
//! ground, non-overlapping boxes, a ray-cast painting and its height map.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::BevGridSpec;
use crate::boxes::{bev_intersection, Box3D, ObjectClass};
use crate::eval::DifficultyLevel;
use crate::geometry::{project_ego_to_pixel, CameraIntrinsics, GroundPlane, Point3, VirtualCameraFrame};
use crate::ppm::RgbImage;

use super::labels::{box_corners, ego_to_label, EgoObject, LabelRecord};
use super::SceneError;

pub const BACKGROUND: [u8; 3] = [110, 110, 110];
const PLACEMENT_ATTEMPTS: usize = 100;
/// Clearance kept between footprints, meters.
const CLEARANCE: f64 = 0.5;
/// Pixels kept between a projected object center and the image border.
const BORDER: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub n_car: usize,
    pub n_big_vehicle: usize,
    pub n_cyclist: usize,
    pub camera_height: [f64; 2],
    pub pitch_deg: [f64; 2],
    pub focal: [f64; 2],
    /// Farthest object center, meters ahead.
    pub max_range: f64,
    pub bev: BevGridSpec,
    /// Standard deviation of per-channel pixel noise, intensity levels.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 96,
            image_height: 64,
            n_car: 3,
            n_big_vehicle: 1,
            n_cyclist: 1,
            camera_height: [4.0, 8.0],
            pitch_deg: [5.0, 15.0],
            focal: [55.0, 75.0],
            max_range: 40.0,
            bev: BevGridSpec::default(),
            noise: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !range_ok(self.camera_height) || self.camera_height[0] <= 0.0 {
            return Err(SceneError::Config(format!("camera height range {:?}", self.camera_height)));
        }
        if !range_ok(self.pitch_deg) || self.pitch_deg[0] <= 0.0 || self.pitch_deg[1] >= 90.0 {
            return Err(SceneError::Config(format!("pitch range {:?}", self.pitch_deg)));
        }
        if !range_ok(self.focal) || self.focal[0] <= 0.0 {
            return Err(SceneError::Config(format!("focal range {:?}", self.focal)));
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.noise >= 0.0) || !(self.max_range > 0.0) {
            return Err(SceneError::Config("image size, noise and range must be positive".into()));
        }
        self.bev.validate().map_err(|e| SceneError::Config(e.to_string()))
    }

    fn class_counts(&self) -> [(ObjectClass, usize); 3] {
        [(ObjectClass::Car, self.n_car), (ObjectClass::BigVehicle, self.n_big_vehicle), (ObjectClass::Cyclist, self.n_cyclist)]
    }
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn class_color(c: ObjectClass) -> [u8; 3] {
    match c {
        ObjectClass::Car => [210, 50, 40],
        ObjectClass::BigVehicle => [40, 90, 210],
        ObjectClass::Cyclist => [230, 200, 40],
    }
}

/// Length, width and height ranges per class.
fn dimension_ranges(c: ObjectClass) -> [[f64; 2]; 3] {
    match c {
        ObjectClass::Car => [[3.8, 4.8], [1.6, 2.0], [1.4, 1.7]],
        ObjectClass::BigVehicle => [[7.0, 11.0], [2.3, 2.6], [2.8, 3.5]],
        ObjectClass::Cyclist => [[1.6, 1.9], [0.5, 0.8], [1.5, 1.8]],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub plane: GroundPlane,
    pub frame: VirtualCameraFrame,
    pub image: RgbImage,
    /// Row-major `height×width`, meters above the ground of the first
    /// surface each pixel ray meets; 0 for ground and empty sky.
    pub height_map: Vec<f64>,
    pub objects: Vec<EgoObject>,
    pub labels: Vec<LabelRecord>,
}

/// First hit of a ray with a box: `(t, face)`. Faces are `+x, −x, +y, −y`
/// in the box frame, then top and bottom.
pub(crate) fn ray_box(origin: &Point3, dir: &Vector3<f64>, b: &Box3D) -> Option<(f64, usize)> {
    let (s, c) = b.yaw.sin_cos();
    let rel = origin - Vector3::new(b.cx, b.cy, b.cz);
    let o = [c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z];
    let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let (mut t0, mut t1, mut face) = (f64::NEG_INFINITY, f64::INFINITY, usize::MAX);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (lo, hi, enter_face) = if d[a] > 0.0 {
            ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a], 2 * a + 1)
        } else {
            ((half[a] - o[a]) / d[a], (-half[a] - o[a]) / d[a], 2 * a)
        };
        if lo > t0 {
            t0 = lo;
            face = enter_face;
        }
        t1 = t1.min(hi);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, face))
}

fn shade(rgb: [u8; 3], face: usize) -> [f64; 3] {
    let k = [0.8, 0.55, 0.7, 0.45, 1.0, 0.3][face.min(5)];
    rgb.map(|v| v as f64 * k)
}

pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<SyntheticScene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.image_width, cfg.image_height);
    let height = rng.gen_range(cfg.camera_height[0]..=cfg.camera_height[1]);
    let pitch = rng.gen_range(cfg.pitch_deg[0]..=cfg.pitch_deg[1]).to_radians();
    let f = rng.gen_range(cfg.focal[0]..=cfg.focal[1]);
    let k = CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0)?;
    let plane = GroundPlane::from_pitch(pitch, height)?;
    let frame = VirtualCameraFrame::from_calibration(&plane, k)?;

    let boxes = place_objects(cfg, &frame, &mut rng)?;
    let (image, height_map, visible, silhouette) = paint(cfg, &frame, &boxes, &mut rng);

    let mut objects = Vec::with_capacity(boxes.len());
    let mut labels = Vec::with_capacity(boxes.len());
    for (i, &(bbox, class)) in boxes.iter().enumerate() {
        let occluded = if silhouette[i] == 0 { 1.0 } else { 1.0 - visible[i] as f64 / silhouette[i] as f64 };
        let code = if occluded < 0.05 {
            0
        } else if occluded < 0.5 {
            1
        } else {
            2
        };
        let obj = EgoObject { bbox, class, difficulty: DifficultyLevel::from_occlusion(code) };
        labels.push(ego_to_label(&obj, code, truncation(&bbox, &frame, w, h), &frame, (w, h)));
        objects.push(obj);
    }
    Ok(SyntheticScene { intrinsics: k, plane, frame, image, height_map, objects, labels })
}

fn place_objects(
    cfg: &SynthConfig,
    frame: &VirtualCameraFrame,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Box3D, ObjectClass)>, SceneError> {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let bev = &cfg.bev;
    let x_hi = cfg.max_range.min(bev.x_max);
    let mut placed: Vec<(Box3D, ObjectClass)> = Vec::new();
    for (class, n) in cfg.class_counts() {
        let [lr, wr, hr] = dimension_ranges(class);
        for _ in 0..n {
            let index = placed.len();
            let mut ok = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let (l, wd, ht) =
                    (rng.gen_range(lr[0]..=lr[1]), rng.gen_range(wr[0]..=wr[1]), rng.gen_range(hr[0]..=hr[1]));
                let x = rng.gen_range(bev.x_min.max(0.0)..x_hi);
                let y = rng.gen_range(bev.y_min..bev.y_max);
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let b = Box3D::new(x, y, ht / 2.0, l, wd, ht, yaw).expect("sampled box is valid");
                let inside = b.bev_footprint().iter().all(|&(px, py)| bev.contains(px, py));
                let seen = [b.cz - ht / 2.0, b.cz + ht / 2.0].iter().all(|&z| {
                    project_ego_to_pixel(&Point3::new(x, y, z), frame).is_ok_and(|p| {
                        p.u >= BORDER && p.u <= w - BORDER && p.v >= BORDER && p.v <= h - BORDER
                    })
                });
                let grown = Box3D { l: l + CLEARANCE, w: wd + CLEARANCE, ..b };
                let apart = placed.iter().all(|(o, _)| bev_intersection(&grown, &Box3D { l: o.l + CLEARANCE, w: o.w + CLEARANCE, ..*o }) == 0.0);
                if inside && seen && apart {
                    ok = Some(b);
                    break;
                }
            }
            match ok {
                Some(b) => placed.push((b, class)),
                None => return Err(SceneError::Placement { index, attempts: PLACEMENT_ATTEMPTS }),
            }
        }
    }
    Ok(placed)
}

type Painting = (RgbImage, Vec<f64>, Vec<usize>, Vec<usize>);

/// Ray-casts every pixel center. Returns the image, the height map, and per
/// object the number of pixels where it is the first hit and where it is hit at all.
fn paint(cfg: &SynthConfig, frame: &VirtualCameraFrame, boxes: &[(Box3D, ObjectClass)], rng: &mut ChaCha8Rng) -> Painting {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let cam_to_ego = frame.cam_to_ego();
    let origin = cam_to_ego.apply(&Point3::zeros());
    let k = &frame.intrinsics;
    let mut img = RgbImage::new(w, h);
    let mut heights = vec![0.0; w * h];
    let mut visible = vec![0; boxes.len()];
    let mut silhouette = vec![0; boxes.len()];
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("noise std is non-negative");
    for v in 0..h {
        for u in 0..w {
            let ray_cam = Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
            let dir = cam_to_ego.apply_vector(&ray_cam);
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, (b, _)) in boxes.iter().enumerate() {
                if let Some((t, face)) = ray_box(&origin, &dir, b) {
                    silhouette[i] += 1;
                    if best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, i, face));
                    }
                }
            }
            let base = match best {
                Some((t, i, face)) => {
                    visible[i] += 1;
                    heights[v * w + u] = (origin + dir * t).z;
                    shade(class_color(boxes[i].1), face)
                }
                None => BACKGROUND.map(|c| c as f64),
            };
            let px = base.map(|c| {
                let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                (c + n).round().clamp(0.0, 255.0) as u8
            });
            img.put(u, v, px);
        }
    }
    (img, heights, visible, silhouette)
}

/// Fraction of the projected corner hull's bounding box lying outside the image.
fn truncation(b: &Box3D, frame: &VirtualCameraFrame, w: usize, h: usize) -> f64 {
    let pts: Vec<(f64, f64)> =
        box_corners(b).iter().filter_map(|c| project_ego_to_pixel(c, frame).ok()).map(|p| (p.u, p.v)).collect();
    if pts.len() < 8 {
        return 1.0;
    }
    let (u0, u1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, z), p| (a.min(p.0), z.max(p.0)));
    let (v0, v1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, z), p| (a.min(p.1), z.max(p.1)));
    let full = (u1 - u0) * (v1 - v0);
    let clipped = (u1.min(w as f64) - u0.max(0.0)).max(0.0) * (v1.min(h as f64) - v0.max(0.0)).max(0.0);
    if full <= 0.0 {
        return 0.0;
    }
    (1.0 - clipped / full).clamp(0.0, 1.0)
}
