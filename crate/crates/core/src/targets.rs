//! Ground-truth heatmaps, size attributes and foreground depth from 3D boxes.
//!
//! Maps live on the render plane: map pixel `(w, h)` covers image pixels
//! `[w s, (w+1) s) x [h s, (h+1) s)` for stride `s`, so a projected center
//! `(u, v)` lands in map pixel `(floor(u / s), floor(v / s))`.

use nalgebra::{Rotation3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPoint, PixelPoint};

/// Centers nearer than this (meters, along the optical axis) are culled.
pub const MIN_CENTER_DEPTH: f64 = 0.1;

pub const MIN_OVERLAP: f64 = 0.7;
pub const MIN_RADIUS: usize = 2;

/// Oriented 3D box in the ego frame. `size` is `(length, width, height)`;
/// length runs along the heading `yaw` (counter-clockwise from ego +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: EgoPoint,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: EgoPoint, size: [f64; 3], yaw: f64, class_id: usize) -> Result<Self> {
        if !size.iter().all(|s| *s > 0.0 && s.is_finite()) || !center.is_finite() || !yaw.is_finite() {
            return Err(Error::param(
                "box",
                format!("sizes must be positive and finite, got {size:?}"),
            ));
        }
        Ok(Self {
            center,
            size,
            yaw,
            class_id,
        })
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn corners(&self) -> [EgoPoint; 8] {
        let r = self.rotation();
        let c = self.center.to_vector();
        let [l, w, h] = self.size.map(|s| s / 2.0);
        let mut out = [EgoPoint::default(); 8];
        let mut k = 0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out[k] = EgoPoint::from_vector(c + r * Vector3::new(sx * l, sy * w, sz * h));
                    k += 1;
                }
            }
        }
        out
    }

    /// Whether the ground-plane point `(x, y)` is under the box.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let local = self.rotation().inverse() * Vector3::new(x - self.center.x, y - self.center.y, 0.0);
        local.x.abs() <= self.size[0] / 2.0 && local.y.abs() <= self.size[1] / 2.0
    }

    /// Entry distance of the ray `origin + t dir` (t > 0), if it hits the box
    /// from outside.
    pub fn ray_entry(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let inv = self.rotation().inverse();
        let o = inv * (origin - self.center.to_vector());
        let d = inv * dir;
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let half = self.size[a] / 2.0;
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((-half - o[a]) / d[a], (half - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

/// CenterNet min-overlap radius for a box of `w_px` x `h_px` pixels,
/// floored to an integer and to at least [`MIN_RADIUS`].
pub fn gaussian_radius(w_px: f64, h_px: f64) -> usize {
    let r = gaussian_radius_raw(w_px, h_px, MIN_OVERLAP);
    if r.is_finite() {
        (r.floor() as usize).max(MIN_RADIUS)
    } else {
        MIN_RADIUS
    }
}

/// The smallest of the three quadratic-root bounds, unfloored.
pub fn gaussian_radius_raw(w: f64, h: f64, o: f64) -> f64 {
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Gaussian standard deviation used for a splat of integer radius `r`.
pub fn gaussian_sigma(radius: usize) -> f64 {
    (2.0 * radius as f64 + 1.0) / 6.0
}

/// A box as seen on the map plane of one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    /// Center in map pixels (image pixels divided by stride), depth in meters.
    pub center: PixelPoint,
    /// Map-pixel bounding rectangle of the corners in front of the camera,
    /// `[u_min, v_min, u_max, v_max]`.
    pub rect: [f64; 4],
    pub radius: usize,
}

impl ProjectedBox {
    pub fn peak_pixel(&self) -> (i64, i64) {
        (self.center.u.floor() as i64, self.center.v.floor() as i64)
    }
}

/// Projection of `b` onto the map plane of `cam` at `stride`, or `None` when
/// the center is too close or outside the frame padded by one gaussian radius.
pub fn project_box(b: &Box3D, cam: &CameraModel, stride: f64) -> Option<ProjectedBox> {
    let (center, rect) = center_and_rect(b, cam, stride)?;
    let radius = gaussian_radius(rect[2] - rect[0], rect[3] - rect[1]);
    let pad = radius as f64;
    let w = f64::from(cam.intrinsics.width) / stride;
    let h = f64::from(cam.intrinsics.height) / stride;
    if center.u < -pad || center.v < -pad || center.u >= w + pad || center.v >= h + pad {
        return None;
    }
    Some(ProjectedBox { center, rect, radius })
}

/// Scaled center and corner rectangle, culling only on center depth.
fn center_and_rect(b: &Box3D, cam: &CameraModel, stride: f64) -> Option<(PixelPoint, [f64; 4])> {
    let c = cam.project(&b.center).ok()?;
    if c.d <= MIN_CENTER_DEPTH {
        return None;
    }
    let center = PixelPoint::new(c.u / stride, c.v / stride, c.d);
    let mut rect = [center.u, center.v, center.u, center.v];
    for corner in b.corners() {
        if let Ok(p) = cam.project(&corner) {
            if p.d > MIN_CENTER_DEPTH {
                rect[0] = rect[0].min(p.u / stride);
                rect[1] = rect[1].min(p.v / stride);
                rect[2] = rect[2].max(p.u / stride);
                rect[3] = rect[3].max(p.v / stride);
            }
        }
    }
    Some((center, rect))
}

pub fn project_box_center(b: &Box3D, cam: &CameraModel, stride: f64) -> Option<PixelPoint> {
    project_box(b, cam, stride).map(|p| p.center)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `[N_cls, H, W]`.
    pub heatmaps: Array3<f64>,
    /// `[3, H, W]`, `(l, w, h)` meters at object centers.
    pub attributes: Array3<f64>,
    /// `[H, W]`.
    pub attr_mask: Array2<bool>,
}

/// Max-merge an unnormalized gaussian of radius `r` peaking at `(cu, cv)`.
pub fn splat_gaussian(map: &mut ndarray::ArrayViewMut2<f64>, cu: i64, cv: i64, r: usize) {
    splat_gaussian_scaled(map, cu, cv, r, 1.0);
}

/// [`splat_gaussian`] with peak value `peak`.
pub fn splat_gaussian_scaled(map: &mut ndarray::ArrayViewMut2<f64>, cu: i64, cv: i64, r: usize, peak: f64) {
    let (h, w) = map.dim();
    let sigma = gaussian_sigma(r);
    let denom = 2.0 * sigma * sigma;
    let r = r as i64;
    for dy in -r..=r {
        let y = cv + dy;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for dx in -r..=r {
            let x = cu + dx;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let g = peak * (-((dx * dx + dy * dy) as f64) / denom).exp();
            let cell = &mut map[(y as usize, x as usize)];
            if g > *cell {
                *cell = g;
            }
        }
    }
}

/// Heatmap and attribute targets of `boxes` for one camera. When two centers
/// share a pixel the attribute of the nearer box wins, so the result does not
/// depend on box order.
pub fn build_targets(
    boxes: &[Box3D],
    n_classes: usize,
    cam: &CameraModel,
    stride: f64,
    width: usize,
    height: usize,
) -> Result<TargetMaps> {
    check_map_args(stride, width, height)?;
    let mut heatmaps = Array3::zeros((n_classes, height, width));
    let mut attributes = Array3::zeros((3, height, width));
    let mut attr_mask = Array2::from_elem((height, width), false);
    let mut attr_depth = Array2::from_elem((height, width), f64::INFINITY);
    for b in boxes {
        if b.class_id >= n_classes {
            return Err(Error::param(
                "class_id",
                format!("{} not below {n_classes}", b.class_id),
            ));
        }
        let Some(p) = project_box(b, cam, stride) else {
            continue;
        };
        let (cu, cv) = p.peak_pixel();
        splat_gaussian(
            &mut heatmaps.index_axis_mut(ndarray::Axis(0), b.class_id),
            cu,
            cv,
            p.radius,
        );
        if cu >= 0 && cv >= 0 && (cu as usize) < width && (cv as usize) < height {
            let (x, y) = (cu as usize, cv as usize);
            let d = p.center.d;
            let prev = attr_depth[(y, x)];
            let wins = d < prev
                || (d == prev
                    && b.size
                        .partial_cmp(&[attributes[(0, y, x)], attributes[(1, y, x)], attributes[(2, y, x)]])
                        == Some(std::cmp::Ordering::Greater));
            if wins {
                attr_depth[(y, x)] = d;
                for k in 0..3 {
                    attributes[(k, y, x)] = b.size[k];
                }
                attr_mask[(y, x)] = true;
            }
        }
    }
    Ok(TargetMaps {
        heatmaps,
        attributes,
        attr_mask,
    })
}

fn check_map_args(stride: f64, width: usize, height: usize) -> Result<()> {
    if !(stride > 0.0) || width == 0 || height == 0 {
        return Err(Error::param(
            "map",
            format!("need stride > 0 and a non-empty map, got {stride}, {width}x{height}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// Center depth over the projected corner rectangle.
    BoxCenter,
    /// First ray-box surface hit, as a simulated range sensor would see it.
    Surface,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTargets {
    /// `[H, W]` optical-axis depth, meters; zero where invalid.
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
    pub mode: DepthMode,
}

impl DepthTargets {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Per-pixel foreground depth on a `width` x `height` map laid over the image.
/// Map pixel `(w, h)` samples the image at its pixel center, the same point
/// the renderer casts its ray through. Overlaps keep the nearest depth.
pub fn build_depth_targets(
    boxes: &[Box3D],
    cam: &CameraModel,
    width: usize,
    height: usize,
    mode: DepthMode,
) -> Result<DepthTargets> {
    check_map_args(1.0, width, height)?;
    let k = &cam.intrinsics;
    let su = f64::from(k.width) / width as f64;
    let sv = f64::from(k.height) / height as f64;
    let mut depth = Array2::from_elem((height, width), f64::INFINITY);
    match mode {
        DepthMode::BoxCenter => {
            for b in boxes {
                let Some((center, [u0, v0, u1, v1])) = center_and_rect(b, cam, 1.0) else {
                    continue;
                };
                for h in 0..height {
                    let v = (h as f64 + 0.5) * sv;
                    if v < v0 || v > v1 {
                        continue;
                    }
                    for w in 0..width {
                        let u = (w as f64 + 0.5) * su;
                        if u >= u0 && u <= u1 && center.d < depth[(h, w)] {
                            depth[(h, w)] = center.d;
                        }
                    }
                }
            }
        }
        DepthMode::Surface => {
            let origin = cam.extrinsics.center();
            let rt = cam.extrinsics.rotation().transpose();
            for h in 0..height {
                for w in 0..width {
                    let (u, v) = ((w as f64 + 0.5) * su, (h as f64 + 0.5) * sv);
                    // unnormalized: unit optical-axis component, so t is z-depth
                    let dir = rt * Vector3::new((u - k.cu) / k.fu, (v - k.cv) / k.fv, 1.0);
                    for b in boxes {
                        if let Some(t) = b.ray_entry(&origin, &dir) {
                            if t > MIN_CENTER_DEPTH && t < depth[(h, w)] {
                                depth[(h, w)] = t;
                            }
                        }
                    }
                }
            }
        }
    }
    let valid = depth.mapv(f64::is_finite);
    depth.mapv_inplace(|d| if d.is_finite() { d } else { 0.0 });
    Ok(DepthTargets { depth, valid, mode })
}
