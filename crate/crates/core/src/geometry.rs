//! Pinhole cameras, rigid ego-to-camera transforms and the project/unproject
//! primitives.
//!
//! Frames:
//! - ego: x forward, y left, z up (meters);
//! - camera: x right, y down, z along the optical axis.
//!
//! [`Extrinsics`] maps ego points into the camera frame, `p_cam = R p_ego + t`.
//! The yaw-only and Euler constructors are expressed in the *level-camera
//! reference frame* (camera axes with zero rotation), where yaw turns about the
//! vertical camera axis y, pitch about x and roll about the optical axis z. Use
//! [`Extrinsics::vehicle_mounted`] to place a level camera on a z-up vehicle.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame depths closer to zero than this cannot be projected.
pub const DEGENERATE_DEPTH: f64 = 1e-9;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A point in the ego frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EgoPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &EgoPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    /// Distance in the ground (x-y) plane.
    pub fn bev_distance(&self, other: &EgoPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Image coordinates (pixels) plus depth along the optical axis (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64, d: f64) -> Self {
        Self { u, v, d }
    }
}

/// Pinhole intrinsics. Field names double as the rig JSON keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self {
            fu,
            fv,
            cu,
            cv,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            f64::from(width) / 2.0,
            f64::from(height) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidIntrinsics(msg));
        if !(self.fu > 0.0 && self.fu.is_finite()) || !(self.fv > 0.0 && self.fv.is_finite()) {
            return bad(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fu, self.fv
            ));
        }
        if !(self.cu > 0.0 && self.cu < f64::from(self.width)) {
            return bad(format!("c_u = {} outside (0, {})", self.cu, self.width));
        }
        if !(self.cv > 0.0 && self.cv < f64::from(self.height)) {
            return bad(format!("c_v = {} outside (0, {})", self.cv, self.height));
        }
        Ok(())
    }

    /// Resize the image by `scale` then crop the centered `width` x `height`
    /// window, as done when feeding native-resolution frames to a fixed input size.
    pub fn resize_and_center_crop(&self, scale: f64, width: u32, height: u32) -> Result<Self> {
        let scaled_w = f64::from(self.width) * scale;
        let scaled_h = f64::from(self.height) * scale;
        let off_u = (scaled_w - f64::from(width)) / 2.0;
        let off_v = (scaled_h - f64::from(height)) / 2.0;
        Self::new(
            self.fu * scale,
            self.fv * scale,
            self.cu * scale - off_u,
            self.cv * scale - off_v,
            width,
            height,
        )
    }

    pub fn is_square(&self) -> bool {
        self.fu == self.fv
    }
}

/// Rotation about the vertical camera axis (y). This is exactly the rotation
/// block of the simplified yaw-only extrinsic.
pub fn rot_yaw(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the lateral camera axis (x).
pub fn rot_pitch(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about the optical axis (z).
pub fn rot_roll(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Euler rotation, yaw applied first, then pitch, then roll:
/// `R = R_roll * R_pitch * R_yaw`.
pub fn euler_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    rot_roll(roll) * rot_pitch(pitch) * rot_yaw(yaw)
}

/// Fixed axis change from the z-up ego frame to the level-camera reference
/// frame looking along ego +x: cam x = -ego y, cam y = -ego z, cam z = ego x.
pub fn level_camera_axes() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

/// Rigid ego-to-camera transform, `p_cam = rotation * p_ego + translation`.
/// Serialized as a row-major rotation and a translation; deserialization
/// re-validates the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExtrinsicsRecord", into = "ExtrinsicsRecord")]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsRecord {
    /// Row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TryFrom<ExtrinsicsRecord> for Extrinsics {
    type Error = Error;

    fn try_from(r: ExtrinsicsRecord) -> Result<Self> {
        Extrinsics::new(Matrix3::from_row_slice(&r.rotation), Vector3::from(r.translation))
    }
}

impl From<Extrinsics> for ExtrinsicsRecord {
    fn from(e: Extrinsics) -> Self {
        Self {
            rotation: std::array::from_fn(|k| e.rotation[(k / 3, k % 3)]),
            translation: e.translation.into(),
        }
    }
}

impl Extrinsics {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho_err <= ROTATION_TOLERANCE) {
            return Err(Error::InvalidExtrinsics(format!(
                "rotation is not orthonormal (max |R^T R - I| = {ortho_err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidExtrinsics(format!("rotation determinant is {det}")));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidExtrinsics("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from a rotation and the camera center expressed in the ego frame.
    fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Simplified extrinsic: the camera only turns about its vertical axis.
    /// `position` is the camera center in the ego frame, so the inverse transform
    /// is `p_ego = R^T p_cam + position`.
    pub fn yaw_only(theta: f64, position: Vector3<f64>) -> Self {
        Self::from_center(rot_yaw(theta), position)
    }

    /// Full yaw/pitch/roll pose in the level-camera reference frame (see
    /// [`euler_rotation`]). With `pitch = roll = 0` this equals [`Self::yaw_only`].
    pub fn euler_pose(yaw: f64, pitch: f64, roll: f64, position: Vector3<f64>) -> Self {
        Self::from_center(euler_rotation(yaw, pitch, roll), position)
    }

    /// A camera mounted on a z-up vehicle. `yaw` is the heading of the optical
    /// axis measured counter-clockwise from ego +x; positive pitch tilts it down.
    pub fn vehicle_mounted(yaw: f64, pitch: f64, roll: f64, position: Vector3<f64>) -> Self {
        Self::from_center(euler_rotation(yaw, pitch, roll) * level_camera_axes(), position)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Exact inverse (camera-to-ego), expressed with the same type.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Extrinsics) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotate the camera about its own axes by `delta` (pre-multiplied) and move
    /// its center by `shift` in the ego frame.
    pub fn perturbed(&self, delta: &Matrix3<f64>, shift: &Vector3<f64>) -> Self {
        Self::from_center(delta * self.rotation, self.center() + shift)
    }

    /// Max deviation from another transform, over rotation and translation entries.
    pub fn max_abs_diff(&self, other: &Extrinsics) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// One view of the rig: intrinsics plus ego-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraModel {
    pub fn new(name: impl Into<String>, intrinsics: Intrinsics, extrinsics: Extrinsics) -> Self {
        Self {
            name: name.into(),
            intrinsics,
            extrinsics,
        }
    }

    pub fn project(&self, p: &EgoPoint) -> Result<PixelPoint> {
        project(p, self)
    }

    pub fn unproject(&self, pix: &PixelPoint) -> Result<EgoPoint> {
        unproject(pix, self)
    }

    /// Whether (u, v) lies inside the image.
    pub fn in_frame(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.intrinsics.width) && v < f64::from(self.intrinsics.height)
    }

    /// Unit optical axis in the ego frame.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.extrinsics.rotation().transpose() * Vector3::z()
    }
}

/// Project an ego point: `u = f_u X/Z + c_u`, `v = f_v Y/Z + c_v`, `d = Z`.
pub fn project(p: &EgoPoint, cam: &CameraModel) -> Result<PixelPoint> {
    let pc = cam.extrinsics.apply(&p.to_vector());
    if pc.z.abs() < DEGENERATE_DEPTH {
        return Err(Error::DegenerateProjection(pc.z));
    }
    let k = &cam.intrinsics;
    Ok(PixelPoint::new(
        k.fu * pc.x / pc.z + k.cu,
        k.fv * pc.y / pc.z + k.cv,
        pc.z,
    ))
}

/// Inverse of [`project`] for a pixel with known optical-axis depth.
pub fn unproject(pix: &PixelPoint, cam: &CameraModel) -> Result<EgoPoint> {
    if !(pix.d > 0.0) {
        return Err(Error::InvalidDepth(pix.d));
    }
    let k = &cam.intrinsics;
    let pc = Vector3::new((pix.u - k.cu) * pix.d / k.fu, (pix.v - k.cv) * pix.d / k.fv, pix.d);
    let r = cam.extrinsics.rotation();
    Ok(EgoPoint::from_vector(
        r.transpose() * (pc - cam.extrinsics.translation()),
    ))
}

/// Yaw-only extrinsics with the camera at `position` (ego frame).
pub fn yaw_only_extrinsics(theta: f64, position: Vector3<f64>) -> Extrinsics {
    Extrinsics::yaw_only(theta, position)
}

/// Yaw/pitch/roll extrinsics (see [`Extrinsics::euler_pose`]).
pub fn euler_pose(yaw: f64, pitch: f64, roll: f64, position: Vector3<f64>) -> Extrinsics {
    Extrinsics::euler_pose(yaw, pitch, roll, position)
}
