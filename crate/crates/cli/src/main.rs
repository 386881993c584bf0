use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bevdebias_core::bias::{bias_field, BiasDecomposition};
use bevdebias_core::ifv::lift_to_ifv;
use bevdebias_core::io::{self, SceneFile};
use bevdebias_core::metrics::{evaluate, DEFAULT_THRESHOLDS};
use bevdebias_core::pipeline::{consistency_probe, run_pipeline, Domain, RunConfig};
use bevdebias_core::render::{identity_head, make_rays, perturb_pose, render_view, view_rng};
use bevdebias_core::sim::{generate_scene, inject_bias, synthesize_bev, RigPreset, RigSpec, SceneSpec};
use bevdebias_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use ndarray::Axis;

#[derive(Parser, Debug)]
#[command(
    name = "bevdebias",
    version,
    about = "Perspective-bias analysis and debiasing losses for multi-camera BEV detection"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Loss domain; overrides the config file.
    #[arg(long, global = true, value_enum)]
    domain: Option<DomainArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Deepaccident,
    Nuscenes,
    Lyft,
}

impl From<PresetArg> for RigPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Deepaccident => RigPreset::DeepAccident,
            PresetArg::Nuscenes => RigPreset::Nuscenes,
            PresetArg::Lyft => RigPreset::Lyft,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes and write their annotations, BEV features and height logits.
    Simulate {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Custom rig JSON instead of a preset.
        #[arg(long, conflicts_with = "preset")]
        rig: Option<PathBuf>,
        /// Number of scenes.
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Render a scene file from every camera of its rig.
    Render {
        /// Scene JSON written by `simulate`.
        #[arg(long)]
        scene: PathBuf,
        /// Apply the configured random pose perturbation per view.
        #[arg(long)]
        perturb: bool,
    },
    /// Per-pixel perspective bias of one camera for a given encoder bias.
    BiasAnalyze {
        #[arg(long, value_enum, default_value = "nuscenes")]
        preset: PresetArg,
        /// Camera index within the rig (0 = front, counter-clockwise).
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Depth error along the viewing ray, meters.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dl_img: f64,
        /// BEV offset `x,y,z` in the ego frame, meters.
        #[arg(long, default_value = "0.5,0,0", value_parser = parse_vec3, allow_negative_numbers = true)]
        dl_bev: Vector3<f64>,
        /// Ground-truth depth, meters.
        #[arg(long, default_value_t = 20.0)]
        depth: f64,
        /// Grid columns sampled across the image width.
        #[arg(long, default_value_t = 44)]
        cols: usize,
        /// Grid rows sampled across the image height.
        #[arg(long, default_value_t = 24)]
        rows: usize,
    },
    /// Score detections against a scene's ground truth.
    Eval {
        /// Detections JSON, e.g. the one written by `run`.
        #[arg(long)]
        dets: PathBuf,
        /// Scene JSON holding the ground-truth boxes.
        #[arg(long)]
        gts: PathBuf,
        /// Classes to average over (repeatable); defaults to all ground-truth classes.
        #[arg(long = "class")]
        classes: Vec<usize>,
        /// Matching distances, meters.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Loss evaluation in both domains, plus the consistency gap a biased model opens.
    DebiasDemo {
        /// BEV offset of the simulated biased model, `x,y,z` meters.
        #[arg(long, default_value = "0.5,0,0", value_parser = parse_vec3, allow_negative_numbers = true)]
        dl_bev: Vector3<f64>,
        /// Depth error of the simulated biased model, meters.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        dl_img: f64,
    },
    /// Full pipeline with a hashed manifest.
    Run,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("expected three finite comma-separated numbers, got `{s}`")),
    }
}

fn load_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let bytes = io::read_bytes(p)?;
            serde_json::from_slice::<RunConfig>(&bytes)
                .map_err(Error::from)
                .with_context(|| format!("reading config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = g.domain {
        cfg.domain = match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        };
    }
    Ok(cfg)
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    io::write_bytes(path, &io::to_json_bytes(value)?)?;
    Ok(())
}

fn simulate(g: &Global, preset: Option<PresetArg>, rig: Option<&Path>, n: usize) -> anyhow::Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(p) = preset {
        cfg.rig = RigSpec::Preset(p.into());
    }
    if let Some(path) = rig {
        cfg.rig = RigSpec::Custom(io::read_rig(path)?);
    }
    cfg.scenes = n;
    cfg.validate()?;
    let cameras = cfg.rig.cameras()?;
    io::write_rig(&g.out.join("rig.json"), &cameras)?;
    for (i, seed) in cfg.scene_seeds().into_iter().enumerate() {
        let spec = SceneSpec {
            seed,
            ..cfg.scene.clone()
        };
        let scene = generate_scene(&spec, &cfg.grid.plane, cameras.clone())?;
        let dir = g.out.join(format!("scene_{i:03}"));
        io::write_scene(
            &dir.join("scene.json"),
            &SceneFile {
                seed,
                boxes: scene.boxes.clone(),
                rig: cameras.clone(),
            },
        )?;
        let (bev, h) = synthesize_bev(&scene.boxes, cfg.scene.n_classes, &cfg.grid, cfg.encoding)?;
        io::write_tensor(
            &dir.join("bev"),
            &bev.features.view(),
            serde_json::json!({"layout": "[C,X,Y]"}),
        )?;
        io::write_tensor(
            &dir.join("height_logits"),
            &h.logits.view(),
            serde_json::json!({"layout": "[Z,X,Y]"}),
        )?;
        log::info!("scene {i}: seed {seed}, {} boxes", scene.boxes.len());
    }
    emit(&format!("wrote {n} scene(s) to {}", g.out.display()));
    Ok(())
}

fn render(g: &Global, scene_path: &Path, perturb: bool) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let scene = io::read_scene(scene_path)?;
    let (bev, h) = synthesize_bev(&scene.boxes, cfg.scene.n_classes, &cfg.grid, cfg.encoding)?;
    let vol = lift_to_ifv(&bev, &h)?;
    for (vi, cam) in scene.rig.iter().enumerate() {
        let view_cam = if perturb {
            perturb_pose(cam, &cfg.perturbation, &mut view_rng(cfg.seed, vi as u64))
        } else {
            cam.clone()
        };
        let map = render_view(&vol, &make_rays(&view_cam, &cfg.render)?);
        let heads = identity_head(&map, cfg.scene.n_classes)?;
        let meta = serde_json::json!({"layout": "[C,H,W]", "camera": cam.name, "perturbed": perturb});
        io::write_tensor(
            &g.out.join(format!("render_{}", cam.name)),
            &map.data.view(),
            meta.clone(),
        )?;
        io::write_tensor(
            &g.out.join(format!("heatmap_{}", cam.name)),
            &heads.heatmap.view(),
            meta,
        )?;
        io::emit_heatmap_image(
            &heads.heatmap.index_axis(Axis(0), 0),
            &g.out.join(format!("heatmap_{}.pgm", cam.name)),
        )?;
    }
    emit(&format!("rendered {} view(s) to {}", scene.rig.len(), g.out.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bias_analyze(
    g: &Global,
    preset: PresetArg,
    camera: usize,
    dl_img: f64,
    dl_bev: Vector3<f64>,
    depth: f64,
    cols: usize,
    rows: usize,
) -> anyhow::Result<()> {
    let rig = RigPreset::from(preset).rig();
    let cam = rig.get(camera).ok_or_else(|| Error::InvalidParameter {
        name: "camera",
        reason: format!("index {camera} outside a {}-camera rig", rig.len()),
    })?;
    let bias = BiasDecomposition::new(dl_img, dl_bev);
    let field = bias_field(&bias, cam, depth, cols, rows)?;
    let (max_du, max_dv) = field.max_abs();
    let report = serde_json::json!({
        "format_version": io::FORMAT_VERSION,
        "kind": "bias-field",
        "camera": cam.name,
        "depth": depth,
        "bias": bias,
        "coefficients": field.coefficients,
        "max_abs_du": max_du,
        "max_abs_dv": max_dv,
        "grid": [rows, cols],
    });
    write_json(&g.out.join("bias_field.json"), &report)?;
    io::write_tensor(
        &g.out.join("bias_du"),
        &field.du.view(),
        serde_json::json!({"layout": "[row,col]"}),
    )?;
    io::write_tensor(
        &g.out.join("bias_dv"),
        &field.dv.view(),
        serde_json::json!({"layout": "[row,col]"}),
    )?;
    io::emit_heatmap_image(&field.magnitude().view(), &g.out.join("bias_magnitude.pgm"))?;
    emit(&serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(g: &Global, dets: &Path, gts: &Path, classes: &[usize], thresholds: Option<&[f64]>) -> anyhow::Result<()> {
    let dets = io::read_detections(dets)?;
    let scene = io::read_scene(gts)?;
    let classes: Vec<usize> = if classes.is_empty() {
        let mut c: Vec<usize> = scene.boxes.iter().map(|b| b.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    } else {
        classes.to_vec()
    };
    let thresholds = thresholds.unwrap_or(&DEFAULT_THRESHOLDS);
    let report = evaluate(&dets, &scene.boxes, &classes, thresholds)?;
    io::write_document(&g.out.join("metrics.json"), "metrics", &report)?;
    emit(&serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn debias_demo(g: &Global, dl_img: f64, dl_bev: Vector3<f64>) -> anyhow::Result<()> {
    let base = load_config(g)?;
    let bias = BiasDecomposition::new(dl_img, dl_bev);
    let mut reports = serde_json::Map::new();
    for (name, domain) in [("source", Domain::Source), ("target", Domain::Target)] {
        let cfg = RunConfig {
            domain,
            bias: Some(bias),
            ..base.clone()
        };
        let r = run_pipeline(&cfg, &g.out.join(name))?;
        reports.insert(name.into(), serde_json::to_value(r.manifest.losses)?);
    }
    let rig = base.rig.cameras()?;
    let mut probes = Vec::new();
    for seed in base.scene_seeds() {
        let spec = SceneSpec {
            seed,
            ..base.scene.clone()
        };
        let scene = generate_scene(&spec, &base.grid.plane, rig.clone())?;
        let shifted = inject_bias(&scene.boxes, &bias, &rig)?;
        let unbiased = consistency_probe(&scene.boxes, &scene.boxes, &rig, &base)?;
        let biased = consistency_probe(&shifted, &scene.boxes, &rig, &base)?;
        probes.push(serde_json::json!({"scene_seed": seed, "unbiased": unbiased, "biased": biased}));
    }
    let report = serde_json::json!({
        "format_version": io::FORMAT_VERSION,
        "kind": "debias-demo",
        "bias": bias,
        "losses": reports,
        "consistency": probes,
    });
    write_json(&g.out.join("debias_demo.json"), &report)?;
    emit(&serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(g: &Global) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let r = run_pipeline(&cfg, &g.out)?;
    let l = r.manifest.losses;
    emit(&format!(
        "manifest {} ({} artifacts): total {:.6} = render {:.6} + pg {:.6} + ps {:.6} + con {:.6}; NDS* {:.4}",
        r.manifest_path.display(),
        r.manifest.artifacts.len(),
        l.total,
        l.render,
        l.pg,
        l.ps,
        l.con,
        r.manifest.metrics.nds_star
    ));
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { preset, rig, n } => simulate(g, *preset, rig.as_deref(), *n),
        Command::Render { scene, perturb } => render(g, scene, *perturb),
        Command::BiasAnalyze {
            preset,
            camera,
            dl_img,
            dl_bev,
            depth,
            cols,
            rows,
        } => bias_analyze(g, *preset, *camera, *dl_img, *dl_bev, *depth, *cols, *rows),
        Command::Eval {
            dets,
            gts,
            classes,
            thresholds,
        } => eval(g, dets, gts, classes, thresholds.as_deref()),
        Command::DebiasDemo { dl_bev, dl_img } => debias_demo(g, *dl_img, *dl_bev),
        Command::Run => run(g),
    }
}

/// 2 for bad input, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
