//! Pinhole projection, rigid poses and the L1 reprojection residual.
//!
//! Poses are stored camera-to-world. Mapping a world point into the camera
//! frame therefore always goes through the inverse pose.

use nalgebra::{Matrix3, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// World-frame 3D point, in scene units.
pub type ScenePoint = Point3<f64>;

/// Points whose camera-frame depth does not exceed this are behind the camera.
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
}

/// Continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn l1_distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).abs() + (self.v - other.v).abs()
    }
}

/// Zero-skew pinhole calibration together with the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if self.width < 8 || self.height < 8 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "frame {}x{} is smaller than 8x8",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, y: &Pixel) -> bool {
        y.u >= 0.0 && y.v >= 0.0 && y.u < self.width as f64 && y.v < self.height as f64
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Unit-depth ray direction (camera frame) through `y`.
    pub fn ray(&self, y: &Pixel) -> Vector3<f64> {
        Vector3::new((y.u - self.cx) / self.fx, (y.v - self.cy) / self.fy, 1.0)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Quaternion sign is not meaningful; keep `w >= 0` so equal rotations
/// compare and serialize identically.
fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(UnitQuaternion::new_normalize(rotation.into_inner())),
            translation,
        }
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeometryError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::DegenerateQuaternion);
        }
        Ok(Self::from_parts(
            UnitQuaternion::new_unchecked(quat / n),
            Vector3::new(t[0], t[1], t[2]),
        ))
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self::from_parts(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`,
    /// with image "down" (+v) roughly along `-up`.
    pub fn look_at(eye: &ScenePoint, target: &ScenePoint, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize() * -1.0;
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::from_rotation_matrix(&r, eye.coords)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::from_parts(r_inv, -(r_inv * self.translation))
    }

    pub fn transform_point(&self, p: &ScenePoint) -> ScenePoint {
        self.rotation * p + self.translation
    }

    /// World point expressed in this camera's frame.
    pub fn world_to_camera(&self, p: &ScenePoint) -> Vector3<f64> {
        self.rotation.inverse() * (p.coords - self.translation)
    }

    pub fn camera_center(&self) -> ScenePoint {
        Point3::from(self.translation)
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Free-function form of [`Pose::inverse`].
pub fn invert(p: &Pose) -> Pose {
    p.inverse()
}

/// Projects a camera-frame point. `None` when it is not in front of the camera.
pub fn project_camera_point(pc: &Vector3<f64>, k: &CameraIntrinsics) -> Option<Pixel> {
    if pc.z <= Z_MIN {
        return None;
    }
    Some(Pixel::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// Projects a world point through `K · H⁻¹`. `None` means behind the camera.
/// The pixel may fall outside the frame.
pub fn project(p: &ScenePoint, k: &CameraIntrinsics, h: &Pose) -> Option<Pixel> {
    project_camera_point(&h.world_to_camera(p), k)
}

/// L1 distance between `y` and the projection of `x`; `None` behind the camera.
pub fn reprojection_residual(
    x: &ScenePoint,
    y: &Pixel,
    k: &CameraIntrinsics,
    h: &Pose,
) -> Option<f64> {
    project(x, k, h).map(|p| p.l1_distance(y))
}

/// World point at camera-frame depth `depth` on the viewing ray through `y`.
pub fn backproject_ray(
    y: &Pixel,
    k: &CameraIntrinsics,
    h: &Pose,
    depth: f64,
) -> Result<ScenePoint, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let pc = k.ray(y) * depth;
    Ok(h.transform_point(&Point3::from(pc)))
}

/// Angle of the rotation `a⁻¹ b`, in radians.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b)
}
