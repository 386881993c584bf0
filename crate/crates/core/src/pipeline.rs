//! End-to-end runs over simulated scenes: simulate, lift, (perturb and)
//! render, build targets, evaluate the domain's losses and the detection
//! metrics, and write every artifact under one directory with a manifest of
//! content hashes.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::BiasDecomposition;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::ifv::{lift_to_ifv, IfVolume};
use crate::io::{self, SceneFile};
use crate::losses::{
    bce_depth, consistency_loss, focal_loss, l1_masked, total_loss, DepthBins, LossParts, LossReport, LossWeights,
    DEFAULT_TAU, DEFAULT_U,
};
use crate::metrics::{evaluate, Detection, MetricsReport, DEFAULT_THRESHOLDS};
use crate::render::{
    identity_head, make_rays, perturb_pose, render_view, view_rng, PosePerturbation, RenderConfig, RenderedHeads,
    RNG_ALGORITHM,
};
use crate::sim::{
    generate_scene, inject_bias, synthesize_bev, synthesize_pseudo_2d, BevEncoding, GridConfig, PseudoNoise, RigSpec,
    SceneSpec,
};
use crate::targets::{build_depth_targets, build_targets, project_box, Box3D, DepthMode};

/// Which half of the loss a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Labeled data: render, depth and 2D-detector losses on perturbed views.
    #[default]
    Source,
    /// Unlabeled data: consistency with the 2D detector on the original views.
    Target,
}

impl Domain {
    pub fn weights(self) -> LossWeights {
        match self {
            Domain::Source => LossWeights::SOURCE,
            Domain::Target => LossWeights::TARGET,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::param(
                "domain",
                format!("expected `source` or `target`, got `{s}`"),
            )),
        }
    }
}

/// Everything a run depends on. The output directory is deliberately not part
/// of it, so the same config reproduces the same manifest anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub domain: Domain,
    /// Scenes per run; each gets its own seed drawn from `seed`.
    pub scenes: usize,
    pub rig: RigSpec,
    /// Scene distribution; its `seed` field is replaced per scene.
    pub scene: SceneSpec,
    pub grid: GridConfig,
    pub encoding: BevEncoding,
    pub render: RenderConfig,
    /// Image pixels per map pixel; `render.width * stride` must equal the image width.
    pub stride: f64,
    pub perturbation: PosePerturbation,
    pub tau: f64,
    pub virtual_u: f64,
    pub bins: DepthBins,
    pub depth_mode: DepthMode,
    pub pseudo_noise: PseudoNoise,
    /// Encoder bias of the simulated model; `None` for an unbiased model.
    pub bias: Option<BiasDecomposition>,
    pub thresholds: Vec<f64>,
    /// Also write a PGM of each rendered class-0 heatmap.
    pub images: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domain: Domain::Source,
            scenes: 2,
            rig: RigSpec::default(),
            scene: SceneSpec::default(),
            grid: GridConfig::default(),
            encoding: BevEncoding::default(),
            render: RenderConfig::default(),
            stride: 8.0,
            perturbation: PosePerturbation::default(),
            tau: DEFAULT_TAU,
            virtual_u: DEFAULT_U,
            bins: DepthBins::default(),
            depth_mode: DepthMode::BoxCenter,
            pseudo_noise: PseudoNoise {
                score_sigma: 0.05,
                fn_rate: 0.05,
                fp_rate: 0.05,
            },
            bias: None,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            images: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::param("scenes", "need at least one scene"));
        }
        self.scene.validate(&self.grid.plane)?;
        self.grid.plane.validate()?;
        self.grid.height.validate()?;
        self.render.validate()?;
        self.perturbation.validate()?;
        self.bins.validate()?;
        self.pseudo_noise.validate()?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param("tau", format!("must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.virtual_u > 0.0 && self.virtual_u.is_finite()) {
            return Err(Error::param(
                "virtual_u",
                format!("must be positive, got {}", self.virtual_u),
            ));
        }
        if self.thresholds.is_empty() || !self.thresholds.iter().all(|t| *t > 0.0 && t.is_finite()) {
            return Err(Error::param("thresholds", "need at least one positive distance"));
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::param("stride", format!("must be positive, got {}", self.stride)));
        }
        if let Some(b) = &self.bias {
            if !b.is_finite() {
                return Err(Error::param("bias", "must be finite"));
            }
        }
        if let BevEncoding::CenterPeaked { sigma } = self.encoding {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
            }
        }
        for cam in self.rig.cameras()? {
            let k = &cam.intrinsics;
            let w = self.render.width as f64 * self.stride;
            let h = self.render.height as f64 * self.stride;
            if w != f64::from(k.width) || h != f64::from(k.height) {
                return Err(Error::param(
                    "stride",
                    format!(
                        "render {}x{} at stride {} covers {w}x{h}, camera {} is {}x{}",
                        self.render.width, self.render.height, self.stride, cam.name, k.width, k.height
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Per-scene seeds, drawn from a generator seeded with `seed`.
    pub fn scene_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.scenes).map(|_| rng.next_u64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub document: String,
    pub tensor: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub rng: String,
    pub formats: FormatVersions,
    pub config: RunConfig,
    pub scene_seeds: Vec<u64>,
    pub losses: LossReport,
    pub metrics: MetricsReport,
    /// Sorted by path.
    pub artifacts: Vec<Artifact>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes files below a root and records their hashes.
struct ArtifactWriter {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        io::write_bytes(&self.root.join(rel), bytes)?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: io::sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn put_tensor<D: ndarray::Dimension>(
        &mut self,
        rel_stem: &str,
        array: &ndarray::ArrayView<'_, f64, D>,
        meta: serde_json::Value,
    ) -> Result<()> {
        let stem = Path::new(rel_stem);
        let (header, data) = io::encode_tensor(stem, array.shape(), array.iter().copied(), meta)?;
        self.put(&format!("{rel_stem}.f32"), &data)?;
        self.put(&format!("{rel_stem}.json"), &header)
    }

    fn put_document<T: Serialize>(&mut self, rel: &str, kind: &str, body: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            format_version: &'a str,
            kind: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let bytes = io::to_json_bytes(&Doc {
            format_version: io::FORMAT_VERSION,
            kind,
            body,
        })?;
        self.put(rel, &bytes)
    }
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

/// Spread, in bins, of the depth distribution the simulated model predicts
/// around its (possibly biased) depth.
const PREDICTED_DEPTH_SPREAD: f64 = 1.0;

/// Depth distribution `[D, H, W]` of a model that believes the scene is
/// `pred`: a discretized gaussian around the believed bin on foreground
/// pixels, uniform elsewhere.
pub fn predicted_depth_bins(pred: &[Box3D], cam: &CameraModel, cfg: &RunConfig) -> Result<Array3<f64>> {
    let (w, h) = (cfg.render.width, cfg.render.height);
    let d = build_depth_targets(pred, cam, w, h, cfg.depth_mode)?;
    let n = cfg.bins.count;
    let mut out = Array3::from_elem((n, h, w), 1.0 / n as f64);
    for ((y, x), &depth) in d.depth.indexed_iter() {
        if !d.valid[(y, x)] {
            continue;
        }
        let Some(center) = cfg.bins.bin_of(depth, &cam.intrinsics, cfg.virtual_u)? else {
            continue;
        };
        let weights: Vec<f64> = (0..n)
            .map(|b| (-((b as f64 - center as f64) / PREDICTED_DEPTH_SPREAD).powi(2) / 2.0).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for (b, wgt) in weights.into_iter().enumerate() {
            out[(b, y, x)] = wgt / total;
        }
    }
    Ok(out)
}

/// Render the model's class heatmaps and sizes for one camera.
fn render_heads(vol: &IfVolume, cam: &CameraModel, cfg: &RunConfig) -> Result<RenderedHeads> {
    let map = render_view(vol, &make_rays(cam, &cfg.render)?);
    identity_head(&map, cfg.scene.n_classes)
}

/// Model-side volume: the BEV the (possibly biased) model would encode.
fn model_volume(pred: &[Box3D], cfg: &RunConfig) -> Result<IfVolume> {
    let (bev, h) = synthesize_bev(pred, cfg.scene.n_classes, &cfg.grid, cfg.encoding)?;
    lift_to_ifv(&bev, &h)
}

/// Mean consistency loss over the rig of a model that encodes `pred` while
/// the 2D detector, free of noise, sees `gt`. Views the renderer sees nothing
/// in still count, so scenes are comparable across bias settings.
pub fn consistency_probe(pred: &[Box3D], gt: &[Box3D], rig: &[CameraModel], cfg: &RunConfig) -> Result<f64> {
    let vol = model_volume(pred, cfg)?;
    let mut sum = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cam in rig {
        let heads = render_heads(&vol, cam, cfg)?;
        let pseudo = synthesize_pseudo_2d(
            gt,
            cfg.scene.n_classes,
            cam,
            cfg.stride,
            cfg.render.width,
            cfg.render.height,
            &PseudoNoise::default(),
            &mut rng,
        )?;
        sum += consistency_loss(&heads.heatmap, &pseudo, cfg.tau)?.value;
    }
    Ok(sum / rig.len() as f64)
}

fn rel(scene: usize, name: &str) -> String {
    format!("scene_{scene:03}/{name}")
}

/// Runs the configured pipeline and writes all artifacts plus `manifest.json`
/// under `out`. Output bytes depend only on `cfg`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let rig = cfg.rig.cameras()?;
    let weights = cfg.domain.weights();
    let seeds = cfg.scene_seeds();
    let mut writer = ArtifactWriter {
        root: out.to_path_buf(),
        artifacts: Vec::new(),
    };
    let mut parts = LossParts::default();
    let mut n_views = 0usize;
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    let n_cls = cfg.scene.n_classes;
    let (w, h) = (cfg.render.width, cfg.render.height);

    for (si, &scene_seed) in seeds.iter().enumerate() {
        let spec = SceneSpec {
            seed: scene_seed,
            ..cfg.scene.clone()
        };
        let scene = generate_scene(&spec, &cfg.grid.plane, rig.clone())?;
        let gt = &scene.boxes;
        let pred = match &cfg.bias {
            Some(b) => inject_bias(gt, b, &rig)?,
            None => gt.clone(),
        };
        writer.put_document(
            &rel(si, "scene.json"),
            "scene",
            &SceneFile {
                seed: scene_seed,
                boxes: gt.clone(),
                rig: rig.clone(),
            },
        )?;
        let (bev, logits) = synthesize_bev(&pred, n_cls, &cfg.grid, cfg.encoding)?;
        writer.put_tensor(
            &rel(si, "bev"),
            &bev.features.view(),
            serde_json::json!({"layout": "[C,X,Y]"}),
        )?;
        writer.put_tensor(
            &rel(si, "height_logits"),
            &logits.logits.view(),
            serde_json::json!({"layout": "[Z,X,Y]"}),
        )?;
        let vol = lift_to_ifv(&bev, &logits)?;
        let mut scores = vec![0.0f64; pred.len()];

        for (vi, cam) in rig.iter().enumerate() {
            let mut rng = view_rng(scene_seed, vi as u64);
            let view_cam = match cfg.domain {
                Domain::Source => perturb_pose(cam, &cfg.perturbation, &mut rng),
                Domain::Target => cam.clone(),
            };
            let heads = render_heads(&vol, &view_cam, cfg)?;
            let meta = serde_json::json!({"layout": "[C,H,W]", "camera": cam.name});
            writer.put_tensor(
                &rel(si, &format!("render_{}", cam.name)),
                &heads.heatmap.view(),
                meta.clone(),
            )?;
            if cfg.images {
                let (bytes, scale) = io::encode_pgm(&heads.heatmap.index_axis(Axis(0), 0));
                writer.put(&rel(si, &format!("render_{}.pgm", cam.name)), &bytes)?;
                writer.put_document(
                    &rel(si, &format!("render_{}.scale.json", cam.name)),
                    "pgm-scale",
                    &scale,
                )?;
            }
            for (k, b) in pred.iter().enumerate() {
                if let Some(p) = project_box(b, &view_cam, cfg.stride) {
                    let (u, v) = p.peak_pixel();
                    if u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h {
                        scores[k] = scores[k].max(heads.heatmap[(b.class_id, v as usize, u as usize)]);
                    }
                }
            }
            // the 2D detector always sees the original camera
            let detector = synthesize_pseudo_2d(gt, n_cls, cam, cfg.stride, w, h, &cfg.pseudo_noise, &mut rng)?;
            match cfg.domain {
                Domain::Source => {
                    let t = build_targets(gt, n_cls, &view_cam, cfg.stride, w, h)?;
                    let mask = t.attr_mask.broadcast((3, h, w)).expect("mask matches map size");
                    parts.render += focal_loss(&heads.heatmap, &t.heatmaps)?.value
                        + l1_masked(&heads.attributes, &t.attributes, &mask)?.value;
                    let t2d = build_targets(gt, n_cls, cam, cfg.stride, w, h)?;
                    parts.ps += focal_loss(&detector, &t2d.heatmaps)?.value;
                    let depth = build_depth_targets(gt, cam, w, h, cfg.depth_mode)?;
                    let (onehot, valid) =
                        cfg.bins
                            .one_hot(&depth.depth, &depth.valid, &cam.intrinsics, cfg.virtual_u)?;
                    let predicted = predicted_depth_bins(&pred, cam, cfg)?;
                    parts.pg += bce_depth(&predicted, &onehot, &valid)?.value;
                    writer.put_tensor(&rel(si, &format!("targets_{}", cam.name)), &t.heatmaps.view(), meta)?;
                }
                Domain::Target => {
                    parts.con += consistency_loss(&heads.heatmap, &detector, cfg.tau)?.value;
                    writer.put_tensor(&rel(si, &format!("pseudo_{}", cam.name)), &detector.view(), meta)?;
                }
            }
            n_views += 1;
        }
        for (b, s) in pred.iter().zip(scores) {
            all_dets.push(Detection::new(*b, s.clamp(0.0, 1.0))?);
        }
        all_gts.extend_from_slice(gt);
    }

    let n = n_views as f64;
    let parts = LossParts {
        det: 0.0,
        render: parts.render / n,
        pg: parts.pg / n,
        ps: parts.ps / n,
        con: parts.con / n,
    };
    let losses = total_loss(&parts, weights)?;
    let classes: Vec<usize> = (0..n_cls).collect();
    let metrics = evaluate(&all_dets, &all_gts, &classes, &cfg.thresholds)?;
    writer.put_document(
        "detections.json",
        "detections",
        &serde_json::json!({ "detections": all_dets }),
    )?;
    writer.put_document("losses.json", "loss-report", &losses)?;
    writer.put_document("metrics.json", "metrics", &metrics)?;
    writer.put_document("config.json", "run-config", cfg)?;

    let mut artifacts = writer.artifacts;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        tool: format!("bevdebias {}", env!("CARGO_PKG_VERSION")),
        rng: RNG_ALGORITHM.to_string(),
        formats: FormatVersions {
            document: io::FORMAT_VERSION.to_string(),
            tensor: io::FORMAT_VERSION.to_string(),
            image: "P5".to_string(),
        },
        config: cfg.clone(),
        scene_seeds: seeds,
        losses,
        metrics,
        artifacts,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    io::write_document(&manifest_path, "manifest", &manifest)?;
    Ok(RunReport {
        manifest,
        manifest_path,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    io::read_document(path, "manifest")
}

/// Re-hashes every artifact listed in a manifest; returns the paths whose
/// content no longer matches.
pub fn verify_manifest(run_dir: &Path, manifest: &Manifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for a in &manifest.artifacts {
        let bytes = io::read_bytes(&run_dir.join(&a.path))?;
        if io::sha256_hex(&bytes) != a.sha256 || bytes.len() as u64 != a.bytes {
            bad.push(a.path.clone());
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn small() -> RunConfig {
        RunConfig {
            scenes: 1,
            scene: SceneSpec {
                n_boxes: [3, 5],
                region_x: [-25.0, 25.0],
                region_y: [-25.0, 25.0],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn source_run_reports_source_losses() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline(&small(), dir.path()).unwrap();
        let l = r.manifest.losses;
        assert!(l.render > 0.0 && l.pg > 0.0 && l.ps > 0.0);
        assert_eq!(l.con, 0.0);
        assert_eq!(l.det, 0.0);
        assert_abs_diff_eq!(l.total, l.render + l.pg + l.ps, epsilon = 1e-12);
        assert!(verify_manifest(dir.path(), &r.manifest).unwrap().is_empty());
        assert!(r.manifest.artifacts.windows(2).all(|w| w[0].path < w[1].path));
        assert_eq!(read_manifest(&r.manifest_path).unwrap(), r.manifest);
    }

    #[test]
    fn target_run_reports_consistency_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            domain: Domain::Target,
            ..small()
        };
        let l = run_pipeline(&cfg, dir.path()).unwrap().manifest.losses;
        assert!(l.con > 0.0);
        assert_eq!((l.render, l.pg, l.ps), (0.0, 0.0, 0.0));
        assert_eq!(l.total, l.con);
    }

    #[test]
    fn replay_from_manifest_config() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seed: 11, ..small() };
        let first = run_pipeline(&cfg, a.path()).unwrap();
        let again = run_pipeline(&first.manifest.config, b.path()).unwrap();
        assert_eq!(
            std::fs::read(&first.manifest_path).unwrap(),
            std::fs::read(&again.manifest_path).unwrap()
        );
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline(&small(), dir.path()).unwrap();
        std::fs::write(dir.path().join("losses.json"), b"{}").unwrap();
        assert_eq!(
            verify_manifest(dir.path(), &r.manifest).unwrap(),
            vec!["losses.json".to_string()]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = [
            RunConfig { scenes: 0, ..small() },
            RunConfig { tau: 1.0, ..small() },
            RunConfig {
                virtual_u: 0.0,
                ..small()
            },
            RunConfig { stride: 4.0, ..small() },
            RunConfig {
                thresholds: vec![],
                ..small()
            },
        ];
        for cfg in bad {
            let e = run_pipeline(&cfg, dir.path()).unwrap_err();
            assert!(e.is_validation(), "{e}");
        }
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5, "domain": "target"}"#).unwrap();
        assert_eq!((partial.seed, partial.domain), (5, Domain::Target));
    }

    #[test]
    fn biased_model_scores_worse() {
        let gt = vec![Box3D::new(crate::geometry::EgoPoint::new(15.0, 1.0, 0.8), [4.5, 1.8, 1.6], 0.2, 0).unwrap()];
        let cfg = RunConfig::default();
        let rig = cfg.rig.cameras().unwrap();
        let shifted = inject_bias(&gt, &BiasDecomposition::new(0.0, Vector3::new(1.0, 1.0, 0.0)), &rig).unwrap();
        let clean = consistency_probe(&gt, &gt, &rig, &cfg).unwrap();
        let biased = consistency_probe(&shifted, &gt, &rig, &cfg).unwrap();
        assert!(biased > clean, "{biased} vs {clean}");
    }
}
