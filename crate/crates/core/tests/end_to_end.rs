//! Cross-module flows through the public API.

use approx::assert_abs_diff_eq;
use bevdebias_core::bias::BiasDecomposition;
use bevdebias_core::geometry::EgoPoint;
use bevdebias_core::ifv::{lift_to_ifv, HeightSpec, PlaneSpec};
use bevdebias_core::losses::{bce_depth, DepthBins, DEFAULT_U};
use bevdebias_core::pipeline::{run_pipeline, RunConfig};
use bevdebias_core::render::{identity_head, make_rays, render_view, RenderConfig};
use bevdebias_core::sim::{synthesize_bev, BevEncoding, GridConfig, RigPreset, SceneSpec};
use bevdebias_core::targets::{build_depth_targets, Box3D, DepthMode};
use nalgebra::Vector3;

fn fine_grid(cx: f64, cy: f64) -> GridConfig {
    GridConfig {
        plane: PlaneSpec::centered(cx, cy, 6.0, 60).unwrap(),
        height: HeightSpec {
            z_range: [-1.0, 3.0],
            nz: 40,
        },
    }
}

#[test]
fn rendered_attributes_recover_box_size() {
    let b = Box3D::new(EgoPoint::new(14.0, -2.0, 0.85), [4.4, 1.9, 1.7], 0.7, 0).unwrap();
    let (bev, h) = synthesize_bev(
        &[b],
        1,
        &fine_grid(14.0, -2.0),
        BevEncoding::CenterPeaked { sigma: 0.6 },
    )
    .unwrap();
    let vol = lift_to_ifv(&bev, &h).unwrap();
    let cam = &RigPreset::Nuscenes.rig()[0];
    let heads = identity_head(
        &render_view(&vol, &make_rays(cam, &RenderConfig::default()).unwrap()),
        1,
    )
    .unwrap();
    let peak = heads
        .heatmap
        .indexed_iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|((_, v, u), _)| (v, u))
        .unwrap();
    assert_eq!(heads.heatmap[(0, peak.0, peak.1)], 1.0);
    for k in 0..3 {
        assert_abs_diff_eq!(heads.attributes[(k, peak.0, peak.1)], b.size[k], epsilon = 1e-9);
    }
}

#[test]
fn rendering_is_independent_of_thread_count() {
    let b = Box3D::new(EgoPoint::new(9.0, 3.0, 0.8), [4.0, 1.8, 1.6], 0.0, 0).unwrap();
    let (bev, h) = synthesize_bev(&[b], 1, &fine_grid(9.0, 3.0), BevEncoding::CenterPeaked { sigma: 0.6 }).unwrap();
    let vol = lift_to_ifv(&bev, &h).unwrap();
    let rays = make_rays(&RigPreset::Lyft.rig()[0], &RenderConfig::default()).unwrap();
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(|| render_view(&vol, &rays));
    let four = pool(4).install(|| render_view(&vol, &rays));
    assert_eq!(one, four);
}

#[test]
fn biased_pipeline_reports_the_translation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        scenes: 2,
        images: false,
        bias: Some(BiasDecomposition::new(0.0, Vector3::new(0.3, -0.4, 0.0))),
        scene: SceneSpec {
            n_boxes: [3, 6],
            ..Default::default()
        },
        ..Default::default()
    };
    let m = run_pipeline(&cfg, dir.path()).unwrap().manifest.metrics;
    assert_abs_diff_eq!(m.mate, 0.5, epsilon = 1e-9);
    assert_eq!((m.mase, m.maoe), (0.0, 0.0));
    // a 0.5 m shift still matches at every threshold >= 0.5 m
    assert!(m.map > 0.0);
}

#[test]
fn perfect_depth_prediction_costs_nothing() {
    let cam = &RigPreset::Nuscenes.rig()[0];
    let boxes = [
        Box3D::new(EgoPoint::new(12.0, 1.0, 0.8), [4.5, 1.8, 1.6], 0.3, 0).unwrap(),
        Box3D::new(EgoPoint::new(30.0, -5.0, 0.8), [4.5, 1.8, 1.6], 1.3, 0).unwrap(),
    ];
    let bins = DepthBins::default();
    for mode in [DepthMode::BoxCenter, DepthMode::Surface] {
        let d = build_depth_targets(&boxes, cam, 88, 48, mode).unwrap();
        assert!(d.valid_count() > 0);
        let (onehot, valid) = bins.one_hot(&d.depth, &d.valid, &cam.intrinsics, DEFAULT_U).unwrap();
        assert_eq!(valid, d.valid);
        let l = bce_depth(&onehot, &onehot, &valid).unwrap();
        assert!(l.value <= 1e-5, "{mode:?}: {}", l.value);
    }
}
