//! Closed-form perspective bias and its brute-force re-projection oracle.
//!
//! A detector reports `L = L_gt + ΔL_img + ΔL_bev`: the image encoder places
//! the object at a wrong depth along its viewing ray (`ΔL_img`, a scalar depth
//! error) and the BEV encoder then moves it by a 3-vector (`ΔL_bev`). Seen from
//! one camera the result is a pixel shift `(Δu, Δv)`.
//!
//! Under a yaw-only extrinsic with square pixels the shift has the closed form
//!
//! ```text
//! Δu = (k_u (u - c_u) + b_u) / d(u,v)      Δv = (k_v (v - c_v) + b_v) / d(u,v)
//! k_u = k_v = ΔL_x tanθ - ΔL_z
//! b_u = f ΔL_x + f ΔL_z tanθ              b_v = f ΔL_y secθ
//! d(u,v) = (d_gt + ΔL_img) secθ + ΔL_z - ΔL_x tanθ
//! ```
//!
//! with `ΔL_bev` expressed in the frame where the camera rotation is
//! [`rot_yaw`](crate::geometry::rot_yaw). [`oracle_bias`] evaluates the same
//! quantity by projecting, unprojecting at the biased depth, shifting and
//! re-projecting, for any camera.

use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{level_camera_axes, project, unproject, CameraModel, EgoPoint, PixelPoint};

/// Guard for `|cos θ|` and for the biased-depth denominator.
pub const SINGULARITY_GUARD: f64 = 1e-9;

/// Tolerance for recognizing a yaw-only rotation inside a general camera.
const YAW_ONLY_TOLERANCE: f64 = 1e-9;

/// Encoder biases: a scalar depth error along the viewing ray and an additive
/// location shift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasDecomposition {
    /// Depth error of the image encoder, meters (`d_img = d_gt + dl_img`).
    pub dl_img: f64,
    /// Location shift added by the BEV encoder, meters.
    pub dl_bev: Vector3<f64>,
}

impl BiasDecomposition {
    pub fn new(dl_img: f64, dl_bev: Vector3<f64>) -> Self {
        Self { dl_img, dl_bev }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.dl_img.is_finite() && self.dl_bev.iter().all(|x| x.is_finite())
    }

    pub fn negated_bev(&self) -> Self {
        Self::new(self.dl_img, -self.dl_bev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCoefficients {
    pub k_u: f64,
    pub b_u: f64,
    pub k_v: f64,
    pub b_v: f64,
    /// `d(u,v)`, the denominator shared by both components, meters.
    pub denom_depth: f64,
}

/// Coefficients of the closed-form bias for a yaw-only camera at angle `theta`
/// with square focal length `focal`, for an object at ground-truth depth `d_gt`.
pub fn bias_coefficients(bias: &BiasDecomposition, theta: f64, focal: f64, d_gt: f64) -> Result<BiasCoefficients> {
    if !(focal > 0.0) {
        return Err(Error::param("focal", format!("must be positive, got {focal}")));
    }
    let cos = theta.cos();
    if cos.abs() <= SINGULARITY_GUARD {
        return Err(Error::SingularView(theta));
    }
    let sec = 1.0 / cos;
    let tan = theta.tan();
    let [dx, dy, dz] = [bias.dl_bev.x, bias.dl_bev.y, bias.dl_bev.z];

    let k_u = dx * tan - dz;
    let b_u = dx * focal + dz * focal * tan;
    let b_v = dy * focal * sec;
    let denom_depth = (d_gt + bias.dl_img) * sec + dz - dx * tan;
    if denom_depth.abs() <= SINGULARITY_GUARD {
        return Err(Error::DegenerateBias(denom_depth));
    }
    Ok(BiasCoefficients {
        k_u,
        b_u,
        k_v: k_u,
        b_v,
        denom_depth,
    })
}

/// Pixel shift at `(u, v)` given precomputed coefficients.
pub fn analytic_bias(coeffs: &BiasCoefficients, u: f64, v: f64, c_u: f64, c_v: f64) -> (f64, f64) {
    (
        (coeffs.k_u * (u - c_u) + coeffs.b_u) / coeffs.denom_depth,
        (coeffs.k_v * (v - c_v) + coeffs.b_v) / coeffs.denom_depth,
    )
}

/// Numerical ground truth for the pixel shift of `p_gt` in `cam`:
/// project, unproject at `d_gt + dl_img`, add `dl_bev` in the ego frame,
/// re-project and take the difference.
pub fn oracle_bias(p_gt: &EgoPoint, bias: &BiasDecomposition, cam: &CameraModel) -> Result<(f64, f64)> {
    let pix = project(p_gt, cam)?;
    let shifted = apply_bias_in_view(p_gt, bias, cam)?;
    let re = project(&shifted, cam)?;
    Ok((re.u - pix.u, re.v - pix.v))
}

/// The biased ego location of `p_gt` as seen through `cam`: depth error along
/// the camera ray followed by the BEV shift.
pub fn apply_bias_in_view(p_gt: &EgoPoint, bias: &BiasDecomposition, cam: &CameraModel) -> Result<EgoPoint> {
    let pix = project(p_gt, cam)?;
    let lifted = unproject(&PixelPoint::new(pix.u, pix.v, pix.d + bias.dl_img), cam)?;
    Ok(EgoPoint::from_vector(lifted.to_vector() + bias.dl_bev))
}

/// Coefficients for a concrete camera, checking the closed form's assumptions:
/// square pixels and a rotation that is either a pure yaw in the reference frame
/// or a level camera mounted on a z-up vehicle. For the latter, `dl_bev` (ego
/// frame) is rotated into the reference frame first.
pub fn bias_coefficients_for_camera(
    bias: &BiasDecomposition,
    cam: &CameraModel,
    d_gt: f64,
) -> Result<BiasCoefficients> {
    let k = &cam.intrinsics;
    if !k.is_square() {
        return Err(Error::OutsideValidityDomain(format!(
            "non-square pixels (f_u = {}, f_v = {})",
            k.fu, k.fv
        )));
    }
    let (theta, local) =
        yaw_only_view(cam).ok_or_else(|| Error::OutsideValidityDomain("camera rotation has pitch or roll".into()))?;
    let local_bias = BiasDecomposition::new(bias.dl_img, local * bias.dl_bev);
    bias_coefficients(&local_bias, theta, k.fu, d_gt)
}

/// If `cam` is yaw-only (directly, or after removing the level-camera axis
/// change), returns the yaw angle and the rotation taking ego vectors into the
/// frame where the camera rotation is a pure yaw.
fn yaw_only_view(cam: &CameraModel) -> Option<(f64, nalgebra::Matrix3<f64>)> {
    let r = cam.extrinsics.rotation();
    let candidates = [nalgebra::Matrix3::identity(), level_camera_axes()];
    candidates.into_iter().find_map(|base| {
        // r = R_yaw * base  =>  R_yaw = r * base^T
        let ry = r * base.transpose();
        let off = [ry[(0, 1)], ry[(1, 0)], ry[(1, 2)], ry[(2, 1)], ry[(1, 1)] - 1.0];
        if off.iter().all(|e| e.abs() <= YAW_ONLY_TOLERANCE) {
            Some((ry[(0, 2)].atan2(ry[(0, 0)]), base))
        } else {
            None
        }
    })
}

/// Bias evaluated on a `cols` x `rows` grid of pixel centers covering the image,
/// for objects at constant ground-truth depth `d_gt`.
#[derive(Debug, Clone)]
pub struct BiasField {
    pub coefficients: BiasCoefficients,
    /// Indexed `[row, col]`.
    pub du: Array2<f64>,
    pub dv: Array2<f64>,
}

impl BiasField {
    pub fn magnitude(&self) -> Array2<f64> {
        &self.du.mapv(f64::abs) + &self.dv.mapv(f64::abs)
    }

    pub fn max_abs(&self) -> (f64, f64) {
        let m = |a: &Array2<f64>| a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        (m(&self.du), m(&self.dv))
    }
}

/// Pixel-center coordinates of cell `(col, row)` on a `cols` x `rows` grid
/// laid over the camera's image.
pub fn grid_pixel_center(cam: &CameraModel, cols: usize, rows: usize, col: usize, row: usize) -> (f64, f64) {
    let sx = f64::from(cam.intrinsics.width) / cols as f64;
    let sy = f64::from(cam.intrinsics.height) / rows as f64;
    ((col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy)
}

pub fn bias_field(
    bias: &BiasDecomposition,
    cam: &CameraModel,
    d_gt: f64,
    cols: usize,
    rows: usize,
) -> Result<BiasField> {
    if cols == 0 || rows == 0 {
        return Err(Error::param("grid", "needs at least one row and column"));
    }
    let coefficients = bias_coefficients_for_camera(bias, cam, d_gt)?;
    let k = &cam.intrinsics;
    let mut du = Array2::zeros((rows, cols));
    let mut dv = Array2::zeros((rows, cols));
    for row in 0..rows {
        for col in 0..cols {
            let (u, v) = grid_pixel_center(cam, cols, rows, col, row);
            let (a, b) = analytic_bias(&coefficients, u, v, k.cu, k.cv);
            du[(row, col)] = a;
            dv[(row, col)] = b;
        }
    }
    Ok(BiasField { coefficients, du, dv })
}
