//! Ray-marched rendering of an implicit foreground volume into a camera plane.
//!
//! Each render pixel casts one ray from the camera center through the
//! corresponding image-space pixel center. Samples sit at optical-axis depths
//! `near + (i + 0.5) * (far - near) / n` and the pixel value is the plain sum of
//! the trilinearly interpolated volume over those samples.

use nalgebra::Vector3;
use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_rotation, CameraModel, EgoPoint};
use crate::ifv::IfVolume;

/// Generator behind every seeded draw; recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), seed_from_u64 + one stream per view";

/// Independent, reproducible generator for view `view` of a run seeded with `seed`.
pub fn view_rng(seed: u64, view: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view);
    rng
}

/// Half-widths of the uniform pose jitter applied before rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePerturbation {
    /// `(dx, dy, dz)` in meters, ego frame.
    pub d_pos: [f64; 3],
    /// `(yaw, pitch, roll)` in radians, about the camera's own axes.
    pub d_ang: [f64; 3],
}

impl Default for PosePerturbation {
    fn default() -> Self {
        Self {
            d_pos: [0.5, 0.5, 0.25],
            d_ang: [0.2, 0.04, 0.04],
        }
    }
}

impl PosePerturbation {
    pub fn none() -> Self {
        Self {
            d_pos: [0.0; 3],
            d_ang: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pos.iter().chain(&self.d_ang).all(|r| r.is_finite() && *r >= 0.0) {
            Ok(())
        } else {
            Err(Error::param("perturbation", "ranges must be finite and non-negative"))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.d_pos.iter().chain(&self.d_ang).all(|r| *r == 0.0)
    }
}

/// Jitter the pose of `cam`. Draw order is `dx, dy, dz, yaw, pitch, roll`;
/// all six are drawn even when their range is zero so the stream position
/// does not depend on the ranges.
pub fn perturb_pose<R: Rng + ?Sized>(cam: &CameraModel, pert: &PosePerturbation, rng: &mut R) -> CameraModel {
    let mut draw = |r: f64| r * rng.random_range(-1.0..=1.0);
    let shift = Vector3::new(draw(pert.d_pos[0]), draw(pert.d_pos[1]), draw(pert.d_pos[2]));
    let (yaw, pitch, roll) = (draw(pert.d_ang[0]), draw(pert.d_ang[1]), draw(pert.d_ang[2]));
    if pert.is_zero() {
        return cam.clone();
    }
    let delta = euler_rotation(yaw, pitch, roll);
    CameraModel {
        extrinsics: cam.extrinsics.perturbed(&delta, &shift),
        ..cam.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for RenderConfig {
    /// 88 x 48 render plane (stride 8 on 704 x 384), 64 samples on [1, 61.2] m.
    fn default() -> Self {
        Self {
            width: 88,
            height: 48,
            samples: 64,
            near: 1.0,
            far: 61.2,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.samples == 0 {
            return Err(Error::param("render", "width, height and samples must be at least 1"));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::param(
                "render",
                format!("need 0 < near < far, got near {} far {}", self.near, self.far),
            ));
        }
        Ok(())
    }
}

/// One ray per render pixel, all leaving the pinhole center.
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub origin: Vector3<f64>,
    /// Unit directions in the ego frame, indexed `h * width + w`.
    pub directions: Vec<Vector3<f64>>,
    /// Cosine between each direction and the optical axis.
    pub axis_cos: Vec<f64>,
    pub camera: CameraModel,
}

impl RayBundle {
    /// Optical-axis depth spacing between samples.
    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }

    pub fn sample_depth(&self, i: usize) -> f64 {
        self.near + (i as f64 + 0.5) * self.step()
    }

    pub fn origin(&self, _w: usize, _h: usize) -> Vector3<f64> {
        self.origin
    }

    pub fn direction(&self, w: usize, h: usize) -> Vector3<f64> {
        self.directions[h * self.width + w]
    }

    /// Ego-frame position of sample `i` along the ray of pixel `(w, h)`.
    pub fn sample_point(&self, w: usize, h: usize, i: usize) -> EgoPoint {
        let k = h * self.width + w;
        let t = self.sample_depth(i) / self.axis_cos[k];
        EgoPoint::from_vector(self.origin + self.directions[k] * t)
    }

    /// Image-space pixel that render pixel `(w, h)` looks through.
    pub fn image_pixel(&self, w: usize, h: usize) -> (f64, f64) {
        image_pixel(&self.camera, self.width, self.height, w, h)
    }
}

fn image_pixel(cam: &CameraModel, width: usize, height: usize, w: usize, h: usize) -> (f64, f64) {
    let k = &cam.intrinsics;
    (
        (w as f64 + 0.5) * f64::from(k.width) / width as f64,
        (h as f64 + 0.5) * f64::from(k.height) / height as f64,
    )
}

pub fn make_rays(cam: &CameraModel, cfg: &RenderConfig) -> Result<RayBundle> {
    cfg.validate()?;
    let k = &cam.intrinsics;
    let rt = cam.extrinsics.rotation().transpose();
    let mut directions = Vec::with_capacity(cfg.width * cfg.height);
    let mut axis_cos = Vec::with_capacity(cfg.width * cfg.height);
    for h in 0..cfg.height {
        for w in 0..cfg.width {
            let (u, v) = image_pixel(cam, cfg.width, cfg.height, w, h);
            let d_cam = Vector3::new((u - k.cu) / k.fu, (v - k.cv) / k.fv, 1.0).normalize();
            axis_cos.push(d_cam.z);
            directions.push(rt * d_cam);
        }
    }
    Ok(RayBundle {
        width: cfg.width,
        height: cfg.height,
        samples: cfg.samples,
        near: cfg.near,
        far: cfg.far,
        origin: cam.extrinsics.center(),
        directions,
        axis_cos,
        camera: cam.clone(),
    })
}

/// Rendered features, stored `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFeatureMap {
    pub data: Array3<f64>,
    pub camera: CameraModel,
}

impl RenderedFeatureMap {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    /// `(w, h)` of the largest value in channel `c`; ties resolve to the first in row-major order.
    pub fn argmax(&self, c: usize) -> (usize, usize) {
        argmax_2d(&self.data.index_axis(Axis(0), c))
    }
}

pub(crate) fn argmax_2d(m: &ndarray::ArrayView2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((h, w), &v) in m.indexed_iter() {
        if v > best_v {
            best_v = v;
            best = (w, h);
        }
    }
    best
}

pub fn render_view(vol: &IfVolume, rays: &RayBundle) -> RenderedFeatureMap {
    let c = vol.channels();
    let (width, height) = (rays.width, rays.height);
    let pixels: Vec<Vec<f64>> = (0..width * height)
        .into_par_iter()
        .map(|k| {
            let (w, h) = (k % width, k / width);
            let mut acc = vec![0.0; c];
            for i in 0..rays.samples {
                vol.accumulate_trilinear(&rays.sample_point(w, h, i), &mut acc);
            }
            acc
        })
        .collect();
    let mut data = Array3::zeros((c, height, width));
    for (k, px) in pixels.iter().enumerate() {
        for (ci, v) in px.iter().enumerate() {
            data[(ci, k / width, k % width)] = *v;
        }
    }
    RenderedFeatureMap {
        data,
        camera: rays.camera.clone(),
    }
}

/// Heatmaps and size attributes read directly off a rendered map whose first
/// `n_classes` channels carry class occupancy and whose last three carry
/// occupancy-weighted `(l, w, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedHeads {
    /// `[N_cls, H, W]` in `[0, 1]`, each channel scaled by its maximum.
    pub heatmap: Array3<f64>,
    /// `[3, H, W]` meters; zero where no occupancy was rendered.
    pub attributes: Array3<f64>,
}

/// Occupancy below this is treated as empty when dividing out sizes.
const OCCUPANCY_FLOOR: f64 = 1e-9;

pub fn identity_head(map: &RenderedFeatureMap, n_classes: usize) -> Result<RenderedHeads> {
    let c = map.channels();
    if c != n_classes + 3 {
        return Err(Error::Dimension(format!(
            "identity head expects {} classes + 3 size channels, map has {c} channels",
            n_classes
        )));
    }
    let mut heatmap = map.data.slice(s![..n_classes, .., ..]).to_owned();
    for mut ch in heatmap.axis_iter_mut(Axis(0)) {
        let m = ch.iter().fold(0.0f64, |a, &b| a.max(b));
        if m > 0.0 {
            ch.mapv_inplace(|v| (v / m).clamp(0.0, 1.0));
        } else {
            ch.fill(0.0);
        }
    }
    let occ = map.data.slice(s![..n_classes, .., ..]).sum_axis(Axis(0));
    let mut attributes = map.data.slice(s![n_classes.., .., ..]).to_owned();
    for mut ch in attributes.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut ch).and(&occ).for_each(|a, &o| {
            *a = if o > OCCUPANCY_FLOOR { *a / o } else { 0.0 };
        });
    }
    Ok(RenderedHeads { heatmap, attributes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Extrinsics, Intrinsics};
    use crate::ifv::{HeightSpec, PlaneSpec};
    use proptest::prelude::*;

    fn front_cam() -> CameraModel {
        CameraModel::new(
            "front",
            Intrinsics::new(554.4, 554.4, 352.0, 192.0, 704, 384).unwrap(),
            Extrinsics::vehicle_mounted(0.0, 0.0, 0.0, Vector3::new(0.0, 0.0, 1.6)),
        )
    }

    fn small_volume() -> IfVolume {
        IfVolume::zeros(
            PlaneSpec::new([0.0, 40.0], [-20.0, 20.0], 1.0).unwrap(),
            HeightSpec::default(),
            2,
        )
    }

    fn cfg() -> RenderConfig {
        RenderConfig {
            width: 44,
            height: 24,
            samples: 48,
            near: 1.0,
            far: 45.0,
        }
    }

    #[test]
    fn center_ray_of_identity_camera() {
        let cam = CameraModel::new(
            "id",
            Intrinsics::centered(500.0, 64, 32).unwrap(),
            Extrinsics::identity(),
        );
        let one = RenderConfig {
            width: 1,
            height: 1,
            ..cfg()
        };
        let rays = make_rays(&cam, &one).unwrap();
        assert_eq!(rays.direction(0, 0), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(rays.origin(0, 0), Vector3::zeros());
    }

    #[test]
    fn ray_construction() {
        let rays = make_rays(&front_cam(), &cfg()).unwrap();
        assert!(rays.directions.iter().all(|d| (d.norm() - 1.0).abs() <= 1e-12));
        assert_eq!(rays.sample_depth(0), 1.0 + 0.5 * 44.0 / 48.0);
        assert_eq!(rays.sample_depth(47), 1.0 + 47.5 * 44.0 / 48.0);
        // every sample re-projects to the ray's image pixel at its stated depth
        let cam = front_cam();
        for &(w, h, i) in &[(0, 0, 0), (43, 23, 47), (17, 5, 20)] {
            let p = cam.project(&rays.sample_point(w, h, i)).unwrap();
            let (u, v) = rays.image_pixel(w, h);
            assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9);
            assert!((p.d - rays.sample_depth(i)).abs() < 1e-9);
        }
        assert!(make_rays(&cam, &RenderConfig { samples: 0, ..cfg() }).is_err());
        assert!(make_rays(
            &cam,
            &RenderConfig {
                near: 5.0,
                far: 5.0,
                ..cfg()
            }
        )
        .is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let cam = front_cam();
        let mut rng = view_rng(3, 0);
        assert_eq!(perturb_pose(&cam, &PosePerturbation::none(), &mut rng), cam);
    }

    #[test]
    fn perturbation_stays_in_range_and_replays() {
        let cam = front_cam();
        let pert = PosePerturbation::default();
        let a = perturb_pose(&cam, &pert, &mut view_rng(11, 2));
        let b = perturb_pose(&cam, &pert, &mut view_rng(11, 2));
        assert_eq!(a, b);
        let c = perturb_pose(&cam, &pert, &mut view_rng(11, 3));
        assert_ne!(a, c);
        for k in 0..200 {
            let p = perturb_pose(&cam, &pert, &mut view_rng(k, 0));
            let d = p.extrinsics.center() - cam.extrinsics.center();
            assert!(d.x.abs() <= 0.5 && d.y.abs() <= 0.5 && d.z.abs() <= 0.25);
            let cos = p.optical_axis().dot(&cam.optical_axis());
            // yaw, pitch and roll bounded by (0.2, 0.04, 0.04)
            assert!(cos >= (0.2f64).cos() * (0.04f64).cos() - 1e-12);
            assert_eq!(p.intrinsics, cam.intrinsics);
        }
    }

    #[test]
    fn empty_volume_renders_zero() {
        let rays = make_rays(&front_cam(), &cfg()).unwrap();
        let map = render_view(&small_volume(), &rays);
        assert_eq!(map.data.dim(), (2, 24, 44));
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_peak_matches_projection() {
        let cam = front_cam();
        let rays = make_rays(&cam, &cfg()).unwrap();
        let mut vol = small_volume();
        let (ix, iz, iy) = (12, 1, 23);
        vol.values[(0, iz, ix, iy)] = 1.0;
        let map = render_view(&vol, &rays);
        let (w, h) = map.argmax(0);
        let p = cam.project(&vol.voxel_center(ix, iz, iy).unwrap()).unwrap();
        let (tw, th) = (p.u / 16.0, p.v / 16.0);
        assert!((w as f64 - tw.floor()).abs() <= 1.0, "{w} vs {tw}");
        assert!((h as f64 - th.floor()).abs() <= 1.0, "{h} vs {th}");
        assert!(map.data.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn locality_of_support() {
        let cam = front_cam();
        let rays = make_rays(&cam, &cfg()).unwrap();
        let mut vol = small_volume();
        let (ix, iz, iy) = (15, 1, 18);
        vol.values[(0, iz, ix, iy)] = 1.0;
        let map = render_view(&vol, &rays);
        // trilinear support is the box of +-1 cell around the voxel center
        let c = vol.voxel_center(ix, iz, iy).unwrap();
        let (dx, dz) = (vol.plane.cell_size, vol.height.cell_height());
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let q = EgoPoint::new(c.x + sx * dx, c.y + sy * dx, c.z + sz * dz);
                    let p = cam.project(&q).unwrap();
                    umin = umin.min(p.u);
                    umax = umax.max(p.u);
                    vmin = vmin.min(p.v);
                    vmax = vmax.max(p.v);
                }
            }
        }
        let mut nonzero = 0;
        for ((_, h, w), &v) in map.data.indexed_iter() {
            if v != 0.0 {
                nonzero += 1;
                let (u, vv) = rays.image_pixel(w, h);
                assert!(
                    u > umin && u < umax && vv > vmin && vv < vmax,
                    "pixel ({w},{h}) lit outside support"
                );
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn content_behind_camera_is_invisible() {
        let cam = front_cam();
        let rays = make_rays(&cam, &cfg()).unwrap();
        let vol_plane = PlaneSpec::new([-40.0, 40.0], [-20.0, 20.0], 1.0).unwrap();
        let mut a = IfVolume::zeros(vol_plane, HeightSpec::default(), 1);
        a.values[(0, 1, 60, 20)] = 1.0;
        let base = render_view(&a, &rays);
        let mut b = a.clone();
        // cells behind the camera (x < 0) are never sampled
        for ix in 0..38 {
            for iy in 0..40 {
                for iz in 0..4 {
                    b.values[(0, iz, ix, iy)] = 7.0;
                }
            }
        }
        assert_eq!(render_view(&b, &rays).data, base.data);
    }

    #[test]
    fn identity_head_normalizes_and_divides() {
        let mut data = Array3::zeros((4, 2, 3));
        data[(0, 0, 1)] = 2.0;
        data[(0, 1, 2)] = 4.0;
        for (i, s) in [4.5, 1.8, 1.5].iter().enumerate() {
            data[(1 + i, 0, 1)] = 2.0 * s;
            data[(1 + i, 1, 2)] = 4.0 * s;
        }
        let map = RenderedFeatureMap {
            data,
            camera: front_cam(),
        };
        let heads = identity_head(&map, 1).unwrap();
        assert_eq!(heads.heatmap[(0, 1, 2)], 1.0);
        assert_eq!(heads.heatmap[(0, 0, 1)], 0.5);
        assert_eq!(heads.attributes[(0, 0, 1)], 4.5);
        assert_eq!(heads.attributes[(2, 1, 2)], 1.5);
        assert_eq!(heads.attributes[(1, 0, 0)], 0.0);
        assert!(identity_head(&map, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rendering_is_linear(
            a in -3.0..3.0f64, b in -3.0..3.0f64,
            cells in prop::collection::vec((0usize..40, 0usize..4, 0usize..40, 0.0..2.0f64), 1..12),
        ) {
            let rays = make_rays(&front_cam(), &RenderConfig { width: 22, height: 12, ..cfg() }).unwrap();
            let mut v1 = small_volume();
            let mut v2 = small_volume();
            for (k, &(x, z, y, val)) in cells.iter().enumerate() {
                let c = k % 2;
                v1.values[(c, z, x, y)] += val;
                v2.values[(1 - c, z, y, x)] += val * 0.5;
            }
            let mut mix = small_volume();
            mix.values = &v1.values * a + &v2.values * b;
            let r1 = render_view(&v1, &rays).data;
            let r2 = render_view(&v2, &rays).data;
            let rm = render_view(&mix, &rays).data;
            for ((x, y), z) in r1.iter().zip(r2.iter()).zip(rm.iter()) {
                let expect = a * x + b * y;
                prop_assert!((z - expect).abs() <= 1e-12 * (1.0 + (a * x).abs() + (b * y).abs()));
            }
            // doubling is exact in floating point
            prop_assert_eq!(render_view(&v1.scaled(2.0), &rays).data, r1.mapv(|v| 2.0 * v));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cam = perturb_pose(&front_cam(), &PosePerturbation::default(), &mut view_rng(7, 1));
        let rays = make_rays(&cam, &cfg()).unwrap();
        let mut vol = small_volume();
        vol.values
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = ((i * 7919) % 13) as f64 * 0.1);
        assert_eq!(render_view(&vol, &rays), render_view(&vol, &rays));
    }
}
