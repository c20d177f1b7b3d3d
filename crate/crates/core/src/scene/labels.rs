//! Text formats: 15-field object labels, `P2:` calibration and ground-plane files,
//! and the conversion between camera-frame labels and ego boxes.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::boxes::{normalize_angle, Box3D, ObjectClass};
use crate::eval::DifficultyLevel;
use crate::geometry::{ego_to_cam, project_cam, CameraIntrinsics, GroundPlane, Point3, VirtualCameraFrame};

use super::SceneError;

/// One object line.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub category: String,
    pub truncation: f64,
    pub occlusion: i64,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    /// `(h, w, l)` in meters.
    pub dimensions: [f64; 3],
    /// Bottom center in the camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl LabelRecord {
    pub fn class(&self) -> Option<ObjectClass> {
        self.category.parse().ok()
    }

    pub fn difficulty(&self) -> DifficultyLevel {
        DifficultyLevel::from_occlusion(self.occlusion)
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {} {}", self.category, self.truncation, self.occlusion, self.alpha);
        for v in self.bbox2d.iter().chain(&self.dimensions).chain(&self.location) {
            write!(s, " {v}").expect("string write");
        }
        write!(s, " {}", self.rotation_y).expect("string write");
        s
    }
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, SceneError> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| SceneError::Parse { line, msg: format!("{what}: `{tok}` is not a finite number") })
}

/// Blank lines are skipped; every other line needs exactly 15 fields.
pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>, SceneError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t: Vec<&str> = raw.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        if t.len() != 15 {
            return Err(SceneError::Parse { line, msg: format!("expected 15 fields, found {}", t.len()) });
        }
        let f = |k: usize, what: &str| parse_f64(t[k], line, what);
        let occlusion = t[2]
            .parse::<i64>()
            .map_err(|_| SceneError::Parse { line, msg: format!("occlusion: `{}` is not an integer", t[2]) })?;
        let rec = LabelRecord {
            category: t[0].to_string(),
            truncation: f(1, "truncation")?,
            occlusion,
            alpha: f(3, "alpha")?,
            bbox2d: [f(4, "bbox")?, f(5, "bbox")?, f(6, "bbox")?, f(7, "bbox")?],
            dimensions: [f(8, "height")?, f(9, "width")?, f(10, "length")?],
            location: [f(11, "x")?, f(12, "y")?, f(13, "z")?],
            rotation_y: f(14, "rotation_y")?,
        };
        if rec.dimensions.iter().any(|&d| d <= 0.0) {
            return Err(SceneError::Parse { line, msg: format!("dimensions must be positive: {:?}", rec.dimensions) });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn serialize_labels(labels: &[LabelRecord]) -> String {
    labels.iter().map(|l| l.to_line() + "\n").collect()
}

/// Intrinsics from the first `P2:` line (row-major 3×4 projection).
pub fn parse_calib(text: &str) -> Result<CameraIntrinsics, SceneError> {
    for (i, raw) in text.lines().enumerate() {
        let Some(rest) = raw.trim_start().strip_prefix("P2:") else { continue };
        let vals = rest
            .split_whitespace()
            .map(|t| parse_f64(t, i + 1, "P2"))
            .collect::<Result<Vec<f64>, _>>()?;
        let p: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| SceneError::Parse {
            line: i + 1,
            msg: format!("P2 needs 12 values, found {}", v.len()),
        })?;
        return CameraIntrinsics::from_projection(&p).map_err(|e| SceneError::Parse { line: i + 1, msg: e.to_string() });
    }
    Err(SceneError::Parse { line: 0, msg: "no `P2:` line".into() })
}

pub fn serialize_calib(k: &CameraIntrinsics) -> String {
    let vals: Vec<String> = k.projection().iter().map(|v| v.to_string()).collect();
    format!("P2: {}\n", vals.join(" "))
}

/// Four plane coefficients `a b c d`, whitespace separated; rescaled to a unit normal.
pub fn parse_ground_plane(text: &str) -> Result<GroundPlane, SceneError> {
    let vals = text
        .split_whitespace()
        .map(|t| parse_f64(t, 1, "plane"))
        .collect::<Result<Vec<f64>, _>>()?;
    if vals.len() != 4 {
        return Err(SceneError::Parse { line: 1, msg: format!("ground plane needs 4 values, found {}", vals.len()) });
    }
    GroundPlane::normalized(vals[0], vals[1], vals[2], vals[3])
        .map_err(|e| SceneError::Parse { line: 1, msg: e.to_string() })
}

pub fn serialize_ground_plane(p: &GroundPlane) -> String {
    format!("{} {} {} {}\n", p.a, p.b, p.c, p.d)
}

/// Heading in the virtual frame for a rotation about its vertical axis.
fn virtual_heading(ry: f64) -> Vector3<f64> {
    Vector3::new(ry.cos(), 0.0, -ry.sin())
}

/// Ego yaw of a label heading. `rotation_y` turns about the ground normal
/// (the virtual frame's vertical axis); under the canonical ego map this is
/// `yaw = −π/2 − rotation_y`.
pub fn ego_yaw_from_rotation_y(ry: f64, frame: &VirtualCameraFrame) -> f64 {
    let h = frame.virtual_to_ego.apply_vector(&virtual_heading(ry));
    normalize_angle(h.y.atan2(h.x))
}

pub fn rotation_y_from_ego_yaw(yaw: f64, frame: &VirtualCameraFrame) -> f64 {
    let h = frame.virtual_to_ego.inverse().apply_vector(&Vector3::new(yaw.cos(), yaw.sin(), 0.0));
    normalize_angle((-h.z).atan2(h.x))
}

/// A label turned into an evaluation/training object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoObject {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub difficulty: DifficultyLevel,
}

/// Labels of unknown categories are ignored; labels at or behind the camera
/// plane are skipped and counted.
pub fn gt_to_ego_boxes(labels: &[LabelRecord], frame: &VirtualCameraFrame) -> (Vec<EgoObject>, usize) {
    let cam_to_ego = frame.cam_to_ego();
    let mut out = Vec::new();
    let mut behind = 0;
    for l in labels {
        let Some(class) = l.class() else { continue };
        let [x, y, z] = l.location;
        if !(z > 0.0) {
            behind += 1;
            continue;
        }
        let bottom = cam_to_ego.apply(&Point3::new(x, y, z));
        let [h, w, len] = l.dimensions;
        let yaw = ego_yaw_from_rotation_y(l.rotation_y, frame);
        match Box3D::new(bottom.x, bottom.y, bottom.z + h / 2.0, len, w, h, yaw) {
            Ok(bbox) => out.push(EgoObject { bbox, class, difficulty: l.difficulty() }),
            Err(_) => behind += 1,
        }
    }
    (out, behind)
}

/// Ego box corners, bottom four then top four.
pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    let fp = b.bev_footprint();
    let (z0, z1) = b.z_range();
    let mut out = [Point3::zeros(); 8];
    for (i, (x, y)) in fp.iter().enumerate() {
        out[i] = Point3::new(*x, *y, z0);
        out[i + 4] = Point3::new(*x, *y, z1);
    }
    out
}

/// Label for an ego box. The 2D box is the projected corner hull clipped to
/// the image; `alpha` is the heading relative to the viewing ray.
pub fn ego_to_label(
    obj: &EgoObject,
    occlusion: i64,
    truncation: f64,
    frame: &VirtualCameraFrame,
    image: (usize, usize),
) -> LabelRecord {
    let b = &obj.bbox;
    let loc = ego_to_cam(&Point3::new(b.cx, b.cy, b.cz - b.h / 2.0), frame);
    let ry = rotation_y_from_ego_yaw(b.yaw, frame);
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in box_corners(b) {
        if let Ok((u, v)) = project_cam(&ego_to_cam(&c, frame), &frame.intrinsics) {
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
    }
    let (w, h) = (image.0 as f64, image.1 as f64);
    let bbox2d = if u0.is_finite() {
        [u0.clamp(0.0, w), v0.clamp(0.0, h), u1.clamp(0.0, w), v1.clamp(0.0, h)]
    } else {
        [0.0; 4]
    };
    let center_cam = ego_to_cam(&Point3::new(b.cx, b.cy, b.cz), frame);
    let alpha = normalize_angle(ry - center_cam.x.atan2(center_cam.z));
    LabelRecord {
        category: obj.class.name().to_string(),
        truncation,
        occlusion,
        alpha,
        bbox2d,
        dimensions: [b.h, b.w, b.l],
        location: [loc.x, loc.y, loc.z],
        rotation_y: ry,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    const LINE: &str = "Car 0 1 -1.5 10.5 20.25 30 40 1.5 1.8 4.2 1.25 5.5 20 0.3";

    fn frame(pitch_deg: f64, h: f64) -> VirtualCameraFrame {
        let k = CameraIntrinsics::new(60.0, 60.0, 48.0, 32.0).unwrap();
        VirtualCameraFrame::from_calibration(&GroundPlane::from_pitch(pitch_deg.to_radians(), h).unwrap(), k).unwrap()
    }

    #[test]
    fn label_fields_and_round_trip() {
        let l = parse_labels(LINE).unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].category, "Car");
        assert_eq!(l[0].occlusion, 1);
        assert_eq!(l[0].dimensions, [1.5, 1.8, 4.2]);
        assert_eq!(l[0].location, [1.25, 5.5, 20.0]);
        assert_eq!(l[0].difficulty(), DifficultyLevel::Mid);
        let text = serialize_labels(&l);
        assert_eq!(text, format!("{LINE}\n"));
        assert_eq!(parse_labels(&text).unwrap(), l);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let short = "Car 0 1 -1.5 10.5 20.25 30 40 1.5 1.8 4.2 1.25 5.5 20";
        let err = parse_labels(&format!("{LINE}\n\n{short}\n")).unwrap_err();
        assert!(matches!(err, SceneError::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));
        let bad = LINE.replace("4.2", "abc");
        assert!(matches!(parse_labels(&bad), Err(SceneError::Parse { line: 1, .. })));
        let neg = LINE.replace("4.2", "-4.2");
        assert!(parse_labels(&neg).is_err());
    }

    #[test]
    fn calib_and_plane() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nP2: 721.5 0 609.5 44.8 0 721.5 172.8 0.2 0 0 1 0.003\n";
        let k = parse_calib(text).unwrap();
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (721.5, 721.5, 609.5, 172.8));
        assert!(matches!(parse_calib("P2: 1 2 3"), Err(SceneError::Parse { line: 1, .. })));
        assert!(parse_calib("P0: 1").is_err());
        let k = CameraIntrinsics::new(60.5, 61.0, 48.25, 32.0).unwrap();
        assert_eq!(parse_calib(&serialize_calib(&k)).unwrap(), k);

        let p = GroundPlane::from_pitch(0.2, 6.5).unwrap();
        let back = parse_ground_plane(&serialize_ground_plane(&p)).unwrap();
        assert!((back.a - p.a).abs() < 1e-15 && (back.b - p.b).abs() < 1e-15 && (back.d - p.d).abs() < 1e-14);
        let scaled = parse_ground_plane("0 -2 0 10").unwrap();
        assert_eq!(scaled.camera_height(), 5.0);
        assert!(parse_ground_plane("0 1 0").is_err());
    }

    #[test]
    fn level_camera_box_on_ground() {
        let f = frame(0.0, 6.0);
        // bottom center 6 m below a level camera is on the ground
        let l = parse_labels("Car 0 0 0 0 0 0 0 1.5 1.8 4.0 0 6 20 0").unwrap();
        let (objs, skipped) = gt_to_ego_boxes(&l, &f);
        assert_eq!(skipped, 0);
        let b = objs[0].bbox;
        assert!((b.cz - 0.75).abs() < 1e-12);
        assert!((b.cx - 20.0).abs() < 1e-12 && b.cy.abs() < 1e-12);
        // documented offset: yaw = −π/2 − rotation_y
        for ry in [0.0, 0.4, -2.0, PI] {
            let yaw = ego_yaw_from_rotation_y(ry, &f);
            assert!(normalize_angle(yaw - (-FRAC_PI_2 - ry)).abs() < 1e-12);
        }
    }

    #[test]
    fn behind_camera_and_unknown_classes() {
        let f = frame(10.0, 6.0);
        let text = "Car 0 0 0 0 0 0 0 1.5 1.8 4.0 0 6 -3 0\nDontCare 0 0 0 0 0 0 0 1 1 1 0 6 10 0\n";
        let (objs, skipped) = gt_to_ego_boxes(&parse_labels(text).unwrap(), &f);
        assert!(objs.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn ego_camera_ego_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let f = frame(rng.gen_range(5.0..15.0), rng.gen_range(4.0..8.0));
            let obj = EgoObject {
                bbox: Box3D::new(
                    rng.gen_range(5.0..50.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(1.0..10.0),
                    rng.gen_range(0.5..3.0),
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(-PI..PI),
                )
                .unwrap(),
                class: ObjectClass::Car,
                difficulty: DifficultyLevel::Easy,
            };
            let label = ego_to_label(&obj, 0, 0.0, &f, (96, 64));
            let text = serialize_labels(&[label]);
            let (back, _) = gt_to_ego_boxes(&parse_labels(&text).unwrap(), &f);
            let (a, b) = (obj.bbox, back[0].bbox);
            for (p, q) in a.to_array()[..6].iter().zip(&b.to_array()[..6]) {
                assert!((p - q).abs() < 1e-9, "{a:?} vs {b:?}");
            }
            assert!(normalize_angle(a.yaw - b.yaw).abs() < 1e-9);
        }
    }
}
