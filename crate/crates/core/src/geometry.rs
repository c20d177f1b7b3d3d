//! Camera model and height-based frustum projection.
//!
//! Frames:
//! - camera: x right, y down, z forward (optical axis);
//! - virtual: origin at the optical center, rotated so +y points straight
//!   down at the ground, which is the plane `y = H`;
//! - ego: road-aligned, x forward, y left, z up, ground at `z = 0`.
//!
//! A pixel `(u, v)` with an estimated height `h` above the ground is lifted
//! by intersecting its viewing ray with the horizontal plane `h` meters above
//! the ground: normalize through `K⁻¹`, rotate into the virtual frame, scale
//! by similar triangles `(H − h) / y`, and map into the ego frame.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Point3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("invalid ground plane: {0}")]
    InvalidPlane(String),
    #[error("ray does not descend toward the ground (y_ref = {y_ref})")]
    Horizon { y_ref: f64 },
    #[error("height {h} m is not below the camera height {camera_height} m")]
    HeightExceedsCamera { h: f64, camera_height: f64 },
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("every frustum sample is invalid for this camera")]
    DegenerateCamera,
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

const ROT_TOL: f64 = 1e-9;

/// Pinhole intrinsics (zero skew).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!("fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Reads intrinsics from the left 3×3 block of a row-major 3×4 projection.
    pub fn from_projection(p: &[f64; 12]) -> Result<Self> {
        Self::new(p[0], p[5], p[2], p[6])
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Row-major 3×4 projection `[K | 0]`.
    pub fn projection(&self) -> [f64; 12] {
        [self.fx, 0.0, self.cx, 0.0, 0.0, self.fy, self.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > ROT_TOL || (rotation.determinant() - 1.0).abs() > ROT_TOL {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Ground plane `a·x + b·y + c·z + d = 0` in camera coordinates with a unit normal.
///
/// Either sign convention is accepted: the side containing the camera is
/// taken from the sign of `d`, so `(0, 1, 0, -5)` and `(0, -1, 0, 5)` both
/// describe flat ground five meters below a level camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl GroundPlane {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let n = (a * a + b * b + c * c).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPlane(format!("normal ({a}, {b}, {c}) has norm {n}")));
        }
        if d == 0.0 || !d.is_finite() {
            return Err(GeometryError::InvalidPlane(format!("camera lies on the plane (d = {d})")));
        }
        Ok(Self { a, b, c, d })
    }

    /// Rescales arbitrary coefficients to a unit normal.
    pub fn normalized(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let n = (a * a + b * b + c * c).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::InvalidPlane("zero normal".into()));
        }
        Self::new(a / n, b / n, c / n, d / n)
    }

    /// Ground under a camera pitched down by `pitch` radians at `height` meters,
    /// with the normal pointing up toward the camera.
    pub fn from_pitch(pitch: f64, height: f64) -> Result<Self> {
        Self::new(0.0, -pitch.cos(), -pitch.sin(), height)
    }

    /// Unit normal pointing from the camera down to the ground.
    pub fn down_normal(&self) -> Vector3<f64> {
        -self.d.signum() * Vector3::new(self.a, self.b, self.c)
    }

    /// Distance from the camera center to the plane.
    pub fn camera_height(&self) -> f64 {
        self.d.abs()
    }
}

/// Ground-aligned frame attached to one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VirtualCameraFrame {
    pub intrinsics: CameraIntrinsics,
    pub cam_to_virtual: RigidTransform,
    pub virtual_to_ego: RigidTransform,
    pub camera_height: f64,
}

/// An image location with an estimated height above the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHeightSample {
    pub u: f64,
    pub v: f64,
    pub h: f64,
}

impl PixelHeightSample {
    pub fn new(u: f64, v: f64, h: f64) -> Self {
        Self { u, v, h }
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Smallest rotation taking unit vector `from` onto unit vector `to`.
/// The antiparallel case rotates 180° about the x-axis.
fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let axis = from.cross(to);
    let cos = from.dot(to);
    if axis.norm() < 1e-12 {
        return if cos > 0.0 { Matrix3::identity() } else { Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)) };
    }
    let k = skew(&axis);
    Matrix3::identity() + k + k * k * (1.0 / (1.0 + cos))
}

/// Re-orthonormalizes a numerically near-rotation via Gram–Schmidt on its rows.
fn orthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let r0 = m.row(0).transpose().normalize();
    let r1 = (m.row(1).transpose() - r0 * r0.dot(&m.row(1).transpose())).normalize();
    let r2 = r0.cross(&r1);
    Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()])
}

impl VirtualCameraFrame {
    /// Derives the camera→virtual rotation and camera height from the ground
    /// plane. The virtual origin is the camera center and the ego transform
    /// is left as the identity; see [`VirtualCameraFrame::with_canonical_ego`].
    pub fn from_ground_plane(plane: &GroundPlane, k: CameraIntrinsics) -> Result<Self> {
        let down = plane.down_normal();
        let rot = orthonormalize(minimal_rotation(&down, &Vector3::y()));
        Ok(Self {
            intrinsics: k,
            cam_to_virtual: RigidTransform::new(rot, Vector3::zeros())?,
            virtual_to_ego: RigidTransform::identity(),
            camera_height: plane.camera_height(),
        })
    }

    /// Frame from a ground plane with the canonical road-aligned ego transform.
    pub fn from_calibration(plane: &GroundPlane, k: CameraIntrinsics) -> Result<Self> {
        Ok(Self::from_ground_plane(plane, k)?.with_canonical_ego())
    }

    /// Installs the canonical virtual→ego map `(x, y, z) ↦ (z, −x, H − y)`.
    pub fn with_canonical_ego(mut self) -> Self {
        self.virtual_to_ego = canonical_virtual_to_ego(self.camera_height);
        self
    }

    /// Camera→ego rigid transform.
    pub fn cam_to_ego(&self) -> RigidTransform {
        self.virtual_to_ego.compose(&self.cam_to_virtual)
    }
}

/// Ego x = virtual z, ego y = −virtual x, ego z = H − virtual y.
pub fn canonical_virtual_to_ego(camera_height: f64) -> RigidTransform {
    let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    RigidTransform { rotation: r, translation: Vector3::new(0.0, 0.0, camera_height) }
}

/// Pixel onto the depth-1 reference plane of the camera; the height rides along.
pub fn pixel_to_cam_ref(s: &PixelHeightSample, k: &CameraIntrinsics) -> (Point3, f64) {
    (Vector3::new((s.u - k.cx) / k.fx, (s.v - k.cy) / k.fy, 1.0), s.h)
}

pub fn cam_to_virtual(p_cam: &Point3, f: &VirtualCameraFrame) -> Point3 {
    f.cam_to_virtual.apply(p_cam)
}

/// Similar-triangles intersection of the ray through `p_ref_virt` with the
/// horizontal plane `h` meters above the ground.
pub fn ground_intersect(p_ref_virt: &Point3, h: f64, f: &VirtualCameraFrame) -> Result<Point3> {
    let y = p_ref_virt.y;
    if !(y > 1e-9) {
        return Err(GeometryError::Horizon { y_ref: y });
    }
    if !(h < f.camera_height) {
        return Err(GeometryError::HeightExceedsCamera { h, camera_height: f.camera_height });
    }
    let drop = f.camera_height - h;
    let mut p = p_ref_virt * (drop / y);
    p.y = drop;
    Ok(p)
}

pub fn virtual_to_ego(p_virt: &Point3, f: &VirtualCameraFrame) -> Point3 {
    f.virtual_to_ego.apply(p_virt)
}

/// Full lift of a pixel with height into the ego frame.
pub fn lift_pixel(s: &PixelHeightSample, f: &VirtualCameraFrame) -> Result<Point3> {
    let (p_cam, h) = pixel_to_cam_ref(s, &f.intrinsics);
    let p_virt = cam_to_virtual(&p_cam, f);
    let p_h = ground_intersect(&p_virt, h, f)?;
    Ok(virtual_to_ego(&p_h, f))
}

/// Ego point to camera coordinates.
pub fn ego_to_cam(p_ego: &Point3, f: &VirtualCameraFrame) -> Point3 {
    f.cam_to_ego().inverse().apply(p_ego)
}

/// Perspective projection of an ego point; `h` is its ego z.
pub fn project_ego_to_pixel(p_ego: &Point3, f: &VirtualCameraFrame) -> Result<PixelHeightSample> {
    let p_cam = ego_to_cam(p_ego, f);
    project_cam(&p_cam, &f.intrinsics).map(|(u, v)| PixelHeightSample::new(u, v, p_ego.z))
}

/// Pinhole projection of a camera-frame point.
pub fn project_cam(p_cam: &Point3, k: &CameraIntrinsics) -> Result<(f64, f64)> {
    let z = p_cam.z;
    if !(z > 0.0) {
        return Err(GeometryError::BehindCamera { depth: z });
    }
    Ok((k.fx * p_cam.x / z + k.cx, k.fy * p_cam.y / z + k.cy))
}
