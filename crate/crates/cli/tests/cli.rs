//! Subcommands end to end through the built binary.

use std::path::Path;
use std::process::{Command, Output};

use bevdebias_core::io;
use bevdebias_core::pipeline::{read_manifest, verify_manifest};

fn bevdebias(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevdebias"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn simulate_then_render() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = bevdebias(
        &["simulate", "--preset", "deepaccident", "--seed", "4", "--n", "2"],
        &sim,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scene = io::read_scene(&sim.join("scene_001/scene.json")).unwrap();
    assert_eq!(scene.rig.len(), 6);
    let (bev, _) = io::read_tensor(&sim.join("scene_001/bev.json")).unwrap();
    assert_eq!(bev.shape(), &[4, 128, 128]);
    assert_eq!(io::read_rig(&sim.join("rig.json")).unwrap(), scene.rig);

    let r = dir.path().join("render");
    let o = bevdebias(
        &["render", "--scene", sim.join("scene_001/scene.json").to_str().unwrap()],
        &r,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (heat, _) = io::read_tensor(&r.join("heatmap_CAM_FRONT.json")).unwrap();
    assert_eq!(heat.shape(), &[1, 48, 88]);
    let pgm = std::fs::read(r.join("heatmap_CAM_FRONT.pgm")).unwrap();
    assert_eq!(io::decode_pgm(&pgm).unwrap().0, 88);
}

#[test]
fn custom_rig_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rig_path = dir.path().join("rig.json");
    let rig = bevdebias_core::sim::RigPreset::Lyft.rig();
    io::write_rig(&rig_path, &rig[..3]).unwrap();
    let o = bevdebias(
        &["simulate", "--rig", rig_path.to_str().unwrap()],
        &dir.path().join("s"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(io::read_rig(&dir.path().join("s/rig.json")).unwrap().len(), 3);
}

#[test]
fn run_writes_a_verifiable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevdebias(&["run", "--seed", "3", "--domain", "target"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert!(verify_manifest(dir.path(), &m).unwrap().is_empty());
    assert_eq!(m.config.seed, 3);
    assert!(m.losses.con > 0.0 && m.losses.render == 0.0);
}

#[test]
fn eval_and_bias_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scenes": 1, "images": false}"#).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&bevdebias(&["run", "--config", cfg.to_str().unwrap()], &run)), 0);
    let o = bevdebias(
        &[
            "eval",
            "--dets",
            run.join("detections.json").to_str().unwrap(),
            "--gts",
            run.join("scene_000/scene.json").to_str().unwrap(),
            "--class",
            "0",
            "--thresholds",
            "0.5,1,2,4",
        ],
        &dir.path().join("eval"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["mAP"], 1.0);
    assert_eq!(report["nds_star"], 1.0);

    let o = bevdebias(
        &[
            "bias-analyze",
            "--dl-img",
            "-0.4",
            "--dl-bev",
            "0,0.5,0",
            "--camera",
            "2",
        ],
        &dir.path().join("bias"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["camera"], "CAM_BACK_LEFT");
    assert!(report["max_abs_du"].as_f64().unwrap() > 0.0);
}

#[test]
fn debias_demo_reports_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scenes": 1, "images": false}"#).unwrap();
    let o = bevdebias(
        &[
            "debias-demo",
            "--config",
            cfg.to_str().unwrap(),
            "--dl-bev",
            "0.5,0.5,0",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("debias_demo.json")).unwrap()).unwrap();
    assert_eq!(r["losses"]["source"]["con"], 0.0);
    assert_eq!(r["losses"]["target"]["render"], 0.0);
    let probe = &r["consistency"][0];
    assert!(probe["biased"].as_f64().unwrap() > probe["unbiased"].as_f64().unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"tau": 1.5}"#).unwrap();
    assert_eq!(
        code(&bevdebias(&["run", "--config", bad_cfg.to_str().unwrap()], dir.path())),
        2
    );
    std::fs::write(&bad_cfg, r#"{"taux": 0.5}"#).unwrap();
    assert_eq!(
        code(&bevdebias(&["run", "--config", bad_cfg.to_str().unwrap()], dir.path())),
        2
    );
    assert_eq!(code(&bevdebias(&["bias-analyze", "--camera", "9"], dir.path())), 2);
    assert_eq!(code(&bevdebias(&["bias-analyze", "--dl-bev", "1,2"], dir.path())), 2);
    assert_eq!(code(&bevdebias(&["no-such-command"], dir.path())), 2);
    let v2 = dir.path().join("scene.json");
    std::fs::write(
        &v2,
        r#"{"format_version": "2.0", "kind": "scene", "seed": 0, "boxes": [], "rig": []}"#,
    )
    .unwrap();
    assert_eq!(
        code(&bevdebias(&["render", "--scene", v2.to_str().unwrap()], dir.path())),
        2
    );
    // unreadable input is an I/O failure, not a validation error
    let missing = dir.path().join("missing.json");
    assert_eq!(
        code(&bevdebias(
            &["render", "--scene", missing.to_str().unwrap()],
            dir.path()
        )),
        1
    );
}
