//! Oriented 3D boxes, object classes and rotated-box overlap.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box dimensions must be positive and finite, got L={l} W={w} H={h}")]
    Dimensions { l: f64, w: f64, h: f64 },
    #[error("box center and yaw must be finite")]
    NonFinite,
    #[error("unknown object class `{0}`")]
    UnknownClass(String),
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Detected object categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    #[serde(rename = "Big_vehicle")]
    BigVehicle,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::BigVehicle, ObjectClass::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::BigVehicle => "Big_vehicle",
            ObjectClass::Cyclist => "Cyclist",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = BoxError;

    /// Accepts the canonical names and a few common spellings.
    fn from_str(s: &str) -> Result<Self, BoxError> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "car" => Ok(ObjectClass::Car),
            "big_vehicle" | "bigvehicle" | "truck" | "bus" | "van" => Ok(ObjectClass::BigVehicle),
            "cyclist" | "motorcyclist" | "tricyclist" => Ok(ObjectClass::Cyclist),
            _ => Err(BoxError::UnknownClass(s.to_string())),
        }
    }
}

/// Oriented box in the ego frame: center, length along the heading,
/// width across it, height along z, and yaw about z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

pub type Point2 = (f64, f64);

impl Box3D {
    /// Validates dimensions and normalizes the yaw.
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self, BoxError> {
        if !(l > 0.0 && w > 0.0 && h > 0.0 && l.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(BoxError::Dimensions { l, w, h });
        }
        if !(cx.is_finite() && cy.is_finite() && cz.is_finite() && yaw.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        Ok(Self { cx, cy, cz, l, w, h, yaw: normalize_angle(yaw) })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self, BoxError> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.cz - self.h / 2.0, self.cz + self.h / 2.0)
    }

    /// Corners in ego `(x, y)`, counter-clockwise.
    pub fn bev_footprint(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let mut pts = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(x, y)| (self.cx + c * x - s * y, self.cy + s * x + c * y));
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        pts
    }
}

/// Shoelace signed area; positive for counter-clockwise polygons.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn line_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let (d1, d2) = (cross(a, b, p), cross(a, b, q));
    let t = d1 / (d1 - d2);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
pub fn clip_polygon(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (cross(a, b, cur) >= 0.0, cross(a, b, prev) >= 0.0);
            if cur_in {
                if !prev_in {
                    out.push(line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

/// Area of the intersection of two box footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_polygon(&a.bev_footprint(), &b.bev_footprint());
    if poly.len() < 3 {
        return 0.0;
    }
    signed_area(&poly).abs()
}

/// Rotated IoU of the footprints alone.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Footprint intersection times vertical overlap, over the union volume.
pub fn rotated_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
