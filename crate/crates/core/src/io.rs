//! On-disk formats. Every JSON document carries `format_version` ("major.minor")
//! and a `kind`; readers reject other majors and other kinds. Tensors are a JSON
//! header plus a sibling raw little-endian f32 file. Heatmap images are binary
//! PGM with the linear scale in a sibling JSON.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayView2, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::metrics::Detection;
use crate::targets::Box3D;

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Serialize, Deserialize)]
struct Versioned<T> {
    format_version: String,
    kind: String,
    #[serde(flatten)]
    body: T,
}

/// Accepts `"<FORMAT_MAJOR>"` or `"<FORMAT_MAJOR>.<minor>"`.
pub fn check_version(found: &str) -> Result<()> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::FormatVersion {
            found: found.to_string(),
            supported: FORMAT_MAJOR,
        });
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline; serde_json keeps struct field order,
/// so equal values give equal bytes.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_document<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let doc = Versioned {
        format_version: FORMAT_VERSION.to_string(),
        kind: kind.to_string(),
        body,
    };
    write_bytes(path, &to_json_bytes(&doc)?)
}

pub fn read_document<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = read_bytes(path)?;
    parse_document(path, &bytes, kind)
}

fn parse_document<T: DeserializeOwned>(path: &Path, bytes: &[u8], kind: &str) -> Result<T> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let raw: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| format(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| format("missing string field `format_version`".into()))?;
    check_version(version)?;
    let found = raw.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if found != kind {
        return Err(format(format!("expected kind `{kind}`, found `{found}`")));
    }
    let doc: Versioned<T> = serde_json::from_value(raw).map_err(|e| format(e.to_string()))?;
    Ok(doc.body)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RigBody {
    cameras: Vec<CameraModel>,
}

pub fn write_rig(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    write_document(
        path,
        "rig",
        &RigBody {
            cameras: cameras.to_vec(),
        },
    )
}

/// Cameras are validated after parsing.
pub fn read_rig(path: &Path) -> Result<Vec<CameraModel>> {
    let body: RigBody = read_document(path, "rig")?;
    if body.cameras.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "rig has no cameras".into(),
        });
    }
    for c in &body.cameras {
        c.intrinsics.validate()?;
    }
    Ok(body.cameras)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub boxes: Vec<Box3D>,
    pub rig: Vec<CameraModel>,
}

pub fn write_scene(path: &Path, scene: &SceneFile) -> Result<()> {
    write_document(path, "scene", scene)
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    let s: SceneFile = read_document(path, "scene")?;
    for b in &s.boxes {
        Box3D::new(b.center, b.size, b.yaw, b.class_id)?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionsBody {
    detections: Vec<Detection>,
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_document(
        path,
        "detections",
        &DetectionsBody {
            detections: dets.to_vec(),
        },
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let body: DetectionsBody = read_document(path, "detections")?;
    body.detections
        .into_iter()
        .map(|d| {
            let b = Box3D::new(d.bbox.center, d.bbox.size, d.bbox.yaw, d.bbox.class_id)?;
            Detection::new(b, d.score)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
    /// File name of the raw data, relative to the header.
    pub data: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Header path `<stem>.json` and data path `<stem>.f32`.
pub fn tensor_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f32"))
}

/// Encodes `values` (row-major) as the header and data bytes of a tensor.
pub fn encode_tensor(
    stem: &Path,
    shape: &[usize],
    values: impl IntoIterator<Item = f64>,
    meta: serde_json::Value,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let (_, data_path) = tensor_paths(stem);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(4 * n);
    for v in values {
        data.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if data.len() != 4 * n {
        return Err(Error::Dimension(format!(
            "{} values for shape {shape:?}",
            data.len() / 4
        )));
    }
    let header = Versioned {
        format_version: FORMAT_VERSION.to_string(),
        kind: "tensor".to_string(),
        body: TensorHeader {
            dtype: "f32".into(),
            shape: shape.to_vec(),
            order: "row-major".into(),
            data: data_path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            meta,
        },
    };
    Ok((to_json_bytes(&header)?, data))
}

/// Writes `<stem>.json` and `<stem>.f32`; returns both paths.
pub fn write_tensor<'a, D: ndarray::Dimension>(
    stem: &Path,
    array: &ndarray::ArrayView<'a, f64, D>,
    meta: serde_json::Value,
) -> Result<[PathBuf; 2]> {
    let (hp, dp) = tensor_paths(stem);
    let (header, data) = encode_tensor(stem, array.shape(), array.iter().copied(), meta)?;
    write_bytes(&dp, &data)?;
    write_bytes(&hp, &header)?;
    Ok([hp, dp])
}

/// Reads a tensor through its header, widening to f64.
pub fn read_tensor(header_path: &Path) -> Result<(ArrayD<f64>, TensorHeader)> {
    let h: TensorHeader = read_document(header_path, "tensor")?;
    let format = |reason: String| Error::Format {
        path: header_path.to_path_buf(),
        reason,
    };
    if h.dtype != "f32" || h.order != "row-major" {
        return Err(format(format!("unsupported dtype/order {}/{}", h.dtype, h.order)));
    }
    let data_path = header_path.parent().unwrap_or(Path::new("")).join(&h.data);
    let bytes = read_bytes(&data_path)?;
    let n: usize = h.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(format(format!("{} data bytes for shape {:?}", bytes.len(), h.shape)));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let array = ArrayD::from_shape_vec(IxDyn(&h.shape), values).map_err(|e| format(e.to_string()))?;
    Ok((array, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScale {
    /// Grid value mapped to 255; 0 maps to 0.
    pub max: f64,
    pub width: usize,
    pub height: usize,
}

/// P5 bytes and scale for an `[H, W]` grid: `round(255 v / max)` with
/// negatives clamped to 0, all black when `max <= 0`.
pub fn encode_pgm(grid: &ArrayView2<f64>) -> (Vec<u8>, ImageScale) {
    let (h, w) = grid.dim();
    let max = grid.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.iter().map(|&v| {
        if max > 0.0 && v.is_finite() {
            (255.0 * v.max(0.0) / max).round().min(255.0) as u8
        } else {
            0
        }
    }));
    (
        out,
        ImageScale {
            max,
            width: w,
            height: h,
        },
    )
}

/// Writes the PGM to `path` and its scale next to it as `<stem>.scale.json`,
/// so it never collides with a tensor header of the same stem. Returns both paths.
pub fn emit_heatmap_image(grid: &ArrayView2<f64>, path: &Path) -> Result<[PathBuf; 2]> {
    let (bytes, scale) = encode_pgm(grid);
    let sidecar = path.with_extension("scale.json");
    write_bytes(path, &bytes)?;
    write_document(&sidecar, "pgm-scale", &scale)?;
    Ok([path.to_path_buf(), sidecar])
}

/// Parses a P5 image written by [`encode_pgm`]: `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let pixels = bytes.get(pos + 1..)?.to_vec();
    (pixels.len() == w * h).then_some((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EgoPoint;
    use crate::sim::RigPreset;
    use ndarray::{array, Array2, Array3};

    #[test]
    fn versions() {
        assert!(check_version("1.0").is_ok());
        assert!(check_version("1.7").is_ok());
        assert!(check_version("1").is_ok());
        assert!(matches!(check_version("2.0"), Err(Error::FormatVersion { .. })));
        assert!(check_version("x").is_err());
    }

    #[test]
    fn documents_reject_other_majors_and_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_rig(&p, &RigPreset::Lyft.rig()).unwrap();
        assert_eq!(read_rig(&p).unwrap(), RigPreset::Lyft.rig());
        assert!(read_scene(&p).is_err());
        let text = fs::read_to_string(&p).unwrap().replace("\"1.0\"", "\"2.0\"");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_rig(&p), Err(Error::FormatVersion { .. })));
        fs::write(&p, "{\"kind\":\"rig\",\"cameras\":[]}").unwrap();
        assert!(matches!(read_rig(&p), Err(Error::Format { .. })));
        assert!(matches!(
            read_rig(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rig_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rig.json");
        let rig = RigPreset::Lyft.rig();
        write_rig(&p, &rig).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        let cam = &v["cameras"][1];
        assert_eq!(cam["name"], "CAM_FRONT_LEFT");
        for key in ["fu", "fv", "cu", "cv", "width", "height"] {
            assert!(cam["intrinsics"][key].is_number(), "{key}");
        }
        let r = cam["extrinsics"]["rotation"].as_array().unwrap();
        assert_eq!(r.len(), 9);
        assert_eq!(r[1].as_f64().unwrap(), rig[1].extrinsics.rotation()[(0, 1)]);
        assert_eq!(cam["extrinsics"]["translation"].as_array().unwrap().len(), 3);
        assert_eq!(read_rig(&p).unwrap(), rig);
    }

    #[test]
    fn scene_and_detection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = Box3D::new(EgoPoint::new(3.0, -2.0, 0.8), [4.2, 1.8, 1.6], 0.4, 1).unwrap();
        let scene = SceneFile {
            seed: 7,
            boxes: vec![b],
            rig: RigPreset::Nuscenes.rig(),
        };
        let p = dir.path().join("s.json");
        write_scene(&p, &scene).unwrap();
        assert_eq!(read_scene(&p).unwrap(), scene);
        let dets = vec![Detection::new(b, 0.9).unwrap()];
        let q = dir.path().join("d.json");
        write_detections(&q, &dets).unwrap();
        assert_eq!(read_detections(&q).unwrap(), dets);
        let text = fs::read_to_string(&q).unwrap();
        assert!(text.contains("\"box\""));
        fs::write(&q, text.replace("0.9", "1.5")).unwrap();
        assert!(read_detections(&q).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::from_shape_fn((2, 3, 4), |(c, h, w)| c as f64 - 0.25 * h as f64 + 0.5 * w as f64);
        let stem = dir.path().join("sub/t");
        let [hp, dp] = write_tensor(&stem, &a.view(), serde_json::json!({"layout": "[C,H,W]"})).unwrap();
        assert_eq!(fs::metadata(&dp).unwrap().len(), 4 * 24);
        let (b, h) = read_tensor(&hp).unwrap();
        assert_eq!(b.shape(), &[2, 3, 4]);
        assert_eq!(b.into_dimensionality::<ndarray::Ix3>().unwrap(), a);
        assert_eq!(h.meta["layout"], "[C,H,W]");
        assert_eq!(h.data, "t.f32");
        fs::write(&dp, [0u8; 8]).unwrap();
        assert!(read_tensor(&hp).is_err());
    }

    #[test]
    fn pgm_golden_4x4() {
        let grid = array![
            [0.0, 0.5, 1.0, 2.0],
            [-1.0, 0.25, 0.75, 1.5],
            [0.0, 0.0, 0.0, 0.0],
            [2.0, 1.0, 0.1, 0.01],
        ];
        let (bytes, scale) = encode_pgm(&grid.view());
        let mut golden = b"P5\n4 4\n255\n".to_vec();
        golden.extend_from_slice(&[0, 64, 128, 255, 0, 32, 96, 191, 0, 0, 0, 0, 255, 128, 13, 1]);
        assert_eq!(bytes, golden);
        assert_eq!(scale.max, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        let [img, side] = emit_heatmap_image(&grid.view(), &p).unwrap();
        assert_eq!(fs::read(&img).unwrap(), golden);
        let s: ImageScale = read_document(&side, "pgm-scale").unwrap();
        assert_eq!(s, scale);
        assert_eq!(decode_pgm(&golden).unwrap(), (4, 4, golden[11..].to_vec()));
    }

    #[test]
    fn pgm_zero_and_single_peak() {
        let z = Array2::<f64>::zeros((3, 5));
        let (b, s) = encode_pgm(&z.view());
        assert!(b[b.len() - 15..].iter().all(|&p| p == 0));
        assert_eq!(s.max, 0.0);
        let mut one = Array2::<f64>::zeros((3, 5));
        one[(2, 1)] = 0.3;
        let (_, _, px) = decode_pgm(&encode_pgm(&one.view()).0).unwrap();
        let lit: Vec<usize> = px.iter().enumerate().filter(|(_, p)| **p > 0).map(|(i, _)| i).collect();
        assert_eq!(lit, vec![2 * 5 + 1]);
        assert_eq!(px[11], 255);
    }

    #[test]
    fn hashes() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
