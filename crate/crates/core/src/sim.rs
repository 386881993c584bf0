//! Deterministic synthetic scenes: camera rigs, box placement, idealized BEV
//! features and height logits, simulated 2D detector heatmaps and forward
//! simulation of a biased 3D detector.

use std::f64::consts::PI;

use nalgebra::Vector3;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bias::{apply_bias_in_view, BiasDecomposition};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPoint, Extrinsics, Intrinsics};
use crate::ifv::{logit, sigmoid, BevGrid, HeightLogits, HeightSpec, PlaneSpec};
use crate::targets::{project_box, splat_gaussian_scaled, Box3D};

/// Network input size every preset is resized and cropped to.
pub const INPUT_WIDTH: u32 = 704;
pub const INPUT_HEIGHT: u32 = 384;
pub const CAMERA_NAMES: [&str; 6] = [
    "CAM_FRONT",
    "CAM_FRONT_LEFT",
    "CAM_BACK_LEFT",
    "CAM_BACK",
    "CAM_BACK_RIGHT",
    "CAM_FRONT_RIGHT",
];
pub const MOUNT_HEIGHT: f64 = 1.6;
/// Horizontal offset of each camera from the ego origin along its heading.
pub const MOUNT_RADIUS: f64 = 0.3;
/// Rejections allowed per box before a spec is declared overcrowded.
pub const MAX_REJECTIONS: usize = 10_000;
/// Height logit magnitude used by the idealized encoder.
pub const HEIGHT_LOGIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigPreset {
    DeepAccident,
    Nuscenes,
    Lyft,
}

impl RigPreset {
    pub const ALL: [RigPreset; 3] = [RigPreset::DeepAccident, RigPreset::Nuscenes, RigPreset::Lyft];

    pub fn name(&self) -> &'static str {
        match self {
            RigPreset::DeepAccident => "deepaccident",
            RigPreset::Nuscenes => "nuscenes",
            RigPreset::Lyft => "lyft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::param("preset", format!("unknown preset `{s}` (deepaccident, nuscenes, lyft)")))
    }

    /// Native `(width, height, focal)` of camera slot `i` (see [`CAMERA_NAMES`]).
    pub fn native_camera(&self, i: usize) -> (u32, u32, f64) {
        let back = i == 3;
        match (self, back) {
            (RigPreset::DeepAccident, false) => (1600, 900, 1142.0),
            (RigPreset::DeepAccident, true) => (1600, 900, 560.0),
            (RigPreset::Nuscenes, _) => (1600, 900, 1260.0),
            (RigPreset::Lyft, false) => (1224, 1024, 1109.0),
            (RigPreset::Lyft, true) => (1600, 900, 878.0),
        }
    }

    /// Six level cameras at 60 degree spacing, resized to the network input.
    pub fn rig(&self) -> Vec<CameraModel> {
        (0..6)
            .map(|i| {
                let (w, h, f) = self.native_camera(i);
                let native = Intrinsics::centered(f, w, h).expect("preset intrinsics are valid");
                let scale = f64::from(INPUT_WIDTH) / f64::from(w);
                let intr = native
                    .resize_and_center_crop(scale, INPUT_WIDTH, INPUT_HEIGHT)
                    .expect("presets cover the input window");
                let yaw = i as f64 * PI / 3.0;
                let pos = Vector3::new(MOUNT_RADIUS * yaw.cos(), MOUNT_RADIUS * yaw.sin(), MOUNT_HEIGHT);
                CameraModel::new(CAMERA_NAMES[i], intr, Extrinsics::vehicle_mounted(yaw, 0.0, 0.0, pos))
            })
            .collect()
    }
}

/// Camera rig of a domain: a named preset or explicit cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigSpec {
    Preset(RigPreset),
    Custom(Vec<CameraModel>),
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec::Preset(RigPreset::Nuscenes)
    }
}

impl RigSpec {
    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        match self {
            RigSpec::Preset(p) => Ok(p.rig()),
            RigSpec::Custom(cams) => {
                if cams.is_empty() {
                    return Err(Error::param("rig", "custom rig has no cameras"));
                }
                for c in cams {
                    c.intrinsics.validate()?;
                }
                Ok(cams.clone())
            }
        }
    }

    pub fn name(&self) -> &str {
        match self {
            RigSpec::Preset(p) => p.name(),
            RigSpec::Custom(_) => "custom",
        }
    }
}

/// Target domain: its rig and, optionally, the encoder bias of a model
/// deployed there.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub rig: RigSpec,
    #[serde(default)]
    pub bias: Option<BiasDecomposition>,
}

impl DomainShiftSpec {
    /// Detections the biased model reports for `boxes` on this domain's rig.
    pub fn apply(&self, boxes: &[Box3D]) -> Result<Vec<Box3D>> {
        match &self.bias {
            Some(b) => inject_bias(boxes, b, &self.rig.cameras()?),
            None => Ok(boxes.to_vec()),
        }
    }
}

/// Distribution of synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Inclusive range of box counts.
    pub n_boxes: [usize; 2],
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Placement region for box centers, ego x and y.
    pub region_x: [f64; 2],
    pub region_y: [f64; 2],
    /// No box center closer to the ego origin than this, meters.
    pub ego_clearance: f64,
    pub min_separation: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_boxes: [4, 12],
            length: [3.8, 5.0],
            width: [1.6, 2.0],
            height: [1.4, 1.8],
            region_x: [-40.0, 40.0],
            region_y: [-40.0, 40.0],
            ego_clearance: 3.0,
            min_separation: 1.0,
            n_classes: 1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, plane: &PlaneSpec) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.n_boxes[0] > self.n_boxes[1] {
            return Err(Error::param("n_boxes", "min exceeds max"));
        }
        for (name, r) in [("length", self.length), ("width", self.width), ("height", self.height)] {
            if !range_ok(r) || r[0] <= 0.0 {
                return Err(Error::param(
                    "box size",
                    format!("{name} range {r:?} must be positive and ordered"),
                ));
            }
        }
        if !range_ok(self.region_x) || !range_ok(self.region_y) {
            return Err(Error::param("region", "ranges must be finite and ordered"));
        }
        if self.region_x[0] < plane.x_range[0]
            || self.region_x[1] > plane.x_range[1]
            || self.region_y[0] < plane.y_range[0]
            || self.region_y[1] > plane.y_range[1]
        {
            return Err(Error::param("region", "placement region must lie inside the BEV range"));
        }
        if self.n_classes == 0 {
            return Err(Error::param("n_classes", "need at least one class"));
        }
        if !(self.min_separation >= 0.0 && self.ego_clearance >= 0.0) {
            return Err(Error::param("separation", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub boxes: Vec<Box3D>,
    pub rig: Vec<CameraModel>,
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Rejection-sample a scene. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, plane: &PlaneSpec, rig: Vec<CameraModel>) -> Result<SceneAnnotation> {
    spec.validate(plane)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.random_range(spec.n_boxes[0]..=spec.n_boxes[1]);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut rejections = 0;
        let (x, y) = loop {
            let x = uniform(&mut rng, spec.region_x);
            let y = uniform(&mut rng, spec.region_y);
            let clear = x.hypot(y) >= spec.ego_clearance;
            let apart = boxes
                .iter()
                .all(|b| b.center.bev_distance(&EgoPoint::new(x, y, 0.0)) >= spec.min_separation);
            if clear && apart {
                break (x, y);
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Overcrowded(MAX_REJECTIONS));
            }
        };
        let size = [
            uniform(&mut rng, spec.length),
            uniform(&mut rng, spec.width),
            uniform(&mut rng, spec.height),
        ];
        let yaw = rng.random_range(-PI..PI);
        let class_id = rng.random_range(0..spec.n_classes);
        boxes.push(Box3D::new(EgoPoint::new(x, y, size[2] / 2.0), size, yaw, class_id)?);
    }
    Ok(SceneAnnotation {
        boxes,
        rig,
        seed: spec.seed,
    })
}

/// How the idealized encoder writes a box into the BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BevEncoding {
    /// Occupancy 1 on cells whose centers fall under the footprint; height
    /// logits `+10` on z-cells overlapping the box's vertical span, `-10` elsewhere.
    #[default]
    Footprint,
    /// Isotropic 3D gaussian of standard deviation `sigma` meters centered on
    /// the box: horizontal falloff in the features, vertical falloff in the
    /// height logits (clamped to `±10`). The lifted volume then peaks exactly
    /// at the box center.
    CenterPeaked { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GridConfig {
    pub plane: PlaneSpec,
    pub height: HeightSpec,
}

/// Feature channels: one occupancy channel per class followed by
/// occupancy-weighted `(l, w, h)`.
pub fn feature_channels(n_classes: usize) -> usize {
    n_classes + 3
}

/// Gaussians are cut off beyond this many standard deviations.
const GAUSS_CUTOFF: f64 = 4.0;

pub fn synthesize_bev(
    boxes: &[Box3D],
    n_classes: usize,
    grid: &GridConfig,
    encoding: BevEncoding,
) -> Result<(BevGrid, HeightLogits)> {
    let plane = grid.plane;
    plane.validate()?;
    grid.height.validate()?;
    if let BevEncoding::CenterPeaked { sigma } = encoding {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
        }
    }
    let (nx, ny, nz) = (plane.nx(), plane.ny(), grid.height.nz);
    let mut features = Array3::zeros((feature_channels(n_classes), nx, ny));
    let mut logits = Array3::from_elem((nz, nx, ny), -HEIGHT_LOGIT);
    // strongest occupancy written so far per column; decides who owns the column
    let mut owner = Array2::<f64>::zeros((nx, ny));
    let p_lo = sigmoid(-HEIGHT_LOGIT);
    let p_hi = sigmoid(HEIGHT_LOGIT);
    for b in boxes {
        if b.class_id >= n_classes {
            return Err(Error::param(
                "class_id",
                format!("{} not below {n_classes}", b.class_id),
            ));
        }
        let reach = match encoding {
            BevEncoding::Footprint => 0.5 * b.size[0].hypot(b.size[1]),
            BevEncoding::CenterPeaked { sigma } => GAUSS_CUTOFF * sigma,
        };
        let ix0 = (((b.center.x - reach - plane.x_range[0]) / plane.cell_size)
            .floor()
            .max(0.0)) as usize;
        let iy0 = (((b.center.y - reach - plane.y_range[0]) / plane.cell_size)
            .floor()
            .max(0.0)) as usize;
        let ix1 = ((((b.center.x + reach - plane.x_range[0]) / plane.cell_size).ceil()).max(0.0) as usize).min(nx);
        let iy1 = ((((b.center.y + reach - plane.y_range[0]) / plane.cell_size).ceil()).max(0.0) as usize).min(ny);
        for ix in ix0..ix1 {
            for iy in iy0..iy1 {
                let (x, y) = plane.cell_center(ix, iy);
                let occ = match encoding {
                    BevEncoding::Footprint => {
                        if b.footprint_contains(x, y) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    BevEncoding::CenterPeaked { sigma } => {
                        let r2 = (x - b.center.x).powi(2) + (y - b.center.y).powi(2);
                        if r2 > (GAUSS_CUTOFF * sigma).powi(2) {
                            0.0
                        } else {
                            (-r2 / (2.0 * sigma * sigma)).exp()
                        }
                    }
                };
                if occ <= owner[(ix, iy)] {
                    continue;
                }
                owner[(ix, iy)] = occ;
                for c in 0..n_classes {
                    features[(c, ix, iy)] = if c == b.class_id { occ } else { 0.0 };
                }
                for k in 0..3 {
                    features[(n_classes + k, ix, iy)] = b.size[k] * occ;
                }
                for iz in 0..nz {
                    logits[(iz, ix, iy)] = match encoding {
                        BevEncoding::Footprint => {
                            let z0 = grid.height.z_range[0] + iz as f64 * grid.height.cell_height();
                            let z1 = z0 + grid.height.cell_height();
                            let (b0, b1) = (b.center.z - b.size[2] / 2.0, b.center.z + b.size[2] / 2.0);
                            if z1 > b0 && z0 < b1 {
                                HEIGHT_LOGIT
                            } else {
                                -HEIGHT_LOGIT
                            }
                        }
                        BevEncoding::CenterPeaked { sigma } => {
                            let dz = grid.height.cell_center(iz) - b.center.z;
                            let p = (-dz * dz / (2.0 * sigma * sigma)).exp();
                            logit(p.clamp(p_lo, p_hi))
                        }
                    };
                }
            }
        }
    }
    Ok((BevGrid::new(plane, features)?, HeightLogits::new(grid.height, logits)?))
}

/// Imperfections of the simulated 2D detector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoNoise {
    /// Standard deviation of the peak-score jitter; peaks are clamped to `[0, 1]`.
    pub score_sigma: f64,
    /// Probability that a visible object is missed.
    pub fn_rate: f64,
    /// Probability, per visible object, of an extra spurious peak.
    pub fp_rate: f64,
}

impl PseudoNoise {
    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.score_sigma >= 0.0 && self.score_sigma.is_finite() && p(self.fn_rate) && p(self.fp_rate)) {
            return Err(Error::param("pseudo noise", format!("{self:?} out of range")));
        }
        Ok(())
    }
}

/// Heatmaps `[N_cls, H, W]` a 2D detector trained on this rig might output:
/// the ground-truth splats with jittered peaks, random misses and spurious peaks.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_pseudo_2d<R: Rng + ?Sized>(
    boxes: &[Box3D],
    n_classes: usize,
    cam: &CameraModel,
    stride: f64,
    width: usize,
    height: usize,
    noise: &PseudoNoise,
    rng: &mut R,
) -> Result<Array3<f64>> {
    noise.validate()?;
    let mut maps = Array3::zeros((n_classes, height, width));
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
        let missed = rng.random::<f64>() < noise.fn_rate;
        let z: f64 = StandardNormal.sample(rng);
        let spurious = rng.random::<f64>() < noise.fp_rate;
        if !missed {
            let peak = (1.0 + noise.score_sigma * z).clamp(0.0, 1.0);
            let (cu, cv) = p.peak_pixel();
            splat_gaussian_scaled(&mut maps.index_axis_mut(Axis(0), b.class_id), cu, cv, p.radius, peak);
        }
        if spurious {
            let cu = rng.random_range(0..width) as i64;
            let cv = rng.random_range(0..height) as i64;
            let c = rng.random_range(0..n_classes);
            let r = rng.random_range(2..=4);
            let score = rng.random_range(0.3..=1.0);
            splat_gaussian_scaled(&mut maps.index_axis_mut(Axis(0), c), cu, cv, r, score);
        }
    }
    Ok(maps)
}

/// Camera whose optical axis makes the smallest angle with the direction to `p`.
pub fn nearest_camera<'a>(p: &EgoPoint, rig: &'a [CameraModel]) -> Option<&'a CameraModel> {
    rig.iter()
        .map(|c| {
            let dir = p.to_vector() - c.extrinsics.center();
            let cos = dir.dot(&c.optical_axis()) / dir.norm().max(f64::MIN_POSITIVE);
            (cos, c)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// Where a detector with encoder biases `bias` would report each box: the
/// depth error acts along the ray of the camera that sees the center most
/// squarely, then the BEV shift is added in the ego frame. Size, heading and
/// class are unchanged.
pub fn inject_bias(boxes: &[Box3D], bias: &BiasDecomposition, rig: &[CameraModel]) -> Result<Vec<Box3D>> {
    if rig.is_empty() {
        return Err(Error::param("rig", "needs at least one camera"));
    }
    boxes
        .iter()
        .map(|b| {
            let cam = nearest_camera(&b.center, rig).expect("rig is non-empty");
            let center = apply_bias_in_view(&b.center, bias, cam)?;
            Ok(Box3D { center, ..*b })
        })
        .collect()
}
