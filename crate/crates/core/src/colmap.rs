//! One-way conversion from a COLMAP text model (`cameras.txt`, `images.txt`,
//! optional `points3D.txt`) to `cameras.json` and `points.ply`.
//!
//! COLMAP stores world-to-camera poses with the camera looking down `+z`,
//! which is the convention used here, so poses carry over unchanged. Only
//! undistorted pinhole models are accepted.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::gaussian::quat_to_matrix;
use crate::ply;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Intrinsics {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, tok: Option<&str>) -> Result<T> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::format(path, format!("line {line}: malformed field")))
}

fn parse_cameras(path: &Path) -> Result<HashMap<u64, Intrinsics>> {
    let text = read(path)?;
    let mut out = HashMap::new();
    for (n, line) in data_lines(&text) {
        let mut t = line.split_whitespace();
        let id: u64 = parse(path, n, t.next())?;
        let model = t.next().unwrap_or_default();
        let width = parse(path, n, t.next())?;
        let height = parse(path, n, t.next())?;
        let params: Vec<f64> = t.map(|v| parse(path, n, Some(v))).collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {n}: camera model {model} with {} params unsupported; undistort to PINHOLE first", params.len()),
                ))
            }
        };
        out.insert(id, Intrinsics { width, height, fx, fy, cx, cy });
    }
    Ok(out)
}

fn parse_images(path: &Path, intr: &HashMap<u64, Intrinsics>) -> Result<Vec<CameraRecord>> {
    let text = read(path)?;
    let mut out = Vec::new();
    // Each pose line is followed by a 2D-point line, which may be blank.
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.starts_with('#'));
    while let Some((n, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        lines.next();
        let mut t = line.split_whitespace();
        let _image_id: u64 = parse(path, n, t.next())?;
        let q: Vec<f64> = (0..4).map(|_| parse(path, n, t.next())).collect::<Result<_>>()?;
        let tr: Vec<f64> = (0..3).map(|_| parse(path, n, t.next())).collect::<Result<_>>()?;
        let cam_id: u64 = parse(path, n, t.next())?;
        let name = t.next().ok_or_else(|| Error::format(path, format!("line {n}: missing image name")))?;
        let i = intr.get(&cam_id).ok_or_else(|| Error::format(path, format!("line {n}: unknown camera {cam_id}")))?;
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::format(path, format!("line {n}: zero quaternion")));
        }
        let qn = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
        let cam = Camera {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
            rotation: quat_to_matrix(&qn),
            translation: Vector3::new(tr[0], tr[1], tr[2]),
        };
        cam.validate().map_err(|e| Error::format(path, format!("line {n}: {e}")))?;
        let id = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
        out.push(CameraRecord::from_camera(id, &cam));
    }
    Ok(out)
}

fn parse_points(path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let text = read(path)?;
    let mut pts = Vec::new();
    let mut cols = Vec::new();
    for (n, line) in data_lines(&text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 7 {
            return Err(Error::format(path, format!("line {n}: expected id, xyz, rgb")));
        }
        let xyz: Vec<f64> = f[1..4].iter().map(|v| parse(path, n, Some(v))).collect::<Result<_>>()?;
        let rgb: Vec<u8> = f[4..7].iter().map(|v| parse(path, n, Some(v))).collect::<Result<_>>()?;
        pts.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
        cols.push(Vector3::new(rgb[0] as f64, rgb[1] as f64, rgb[2] as f64) / 255.0);
    }
    Ok((pts, cols))
}

/// Camera records in `images.txt` order, plus the sparse points if present.
pub fn read_colmap_text(
    sparse_dir: &Path,
) -> Result<(Vec<CameraRecord>, Option<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)>)> {
    let intr = parse_cameras(&sparse_dir.join("cameras.txt"))?;
    let records = parse_images(&sparse_dir.join("images.txt"), &intr)?;
    let pts_path = sparse_dir.join("points3D.txt");
    let points = if pts_path.exists() { Some(parse_points(&pts_path)?) } else { None };
    Ok((records, points))
}

/// Writes `cameras.json` (and `points.ply` when points exist) under `out_root`.
/// Returns the number of cameras converted.
pub fn convert_colmap(sparse_dir: &Path, out_root: &Path) -> Result<usize> {
    let (records, points) = read_colmap_text(sparse_dir)?;
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let path = out_root.join("cameras.json");
    let text = serde_json::to_string_pretty(&records).expect("camera records serialize");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if let Some((p, c)) = points {
        ply::write_points(&out_root.join("points.ply"), &p, &c)?;
    }
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::read_cameras;

    const CAMERAS: &str = "# Camera list\n1 PINHOLE 64 48 50 52 32 24\n2 SIMPLE_PINHOLE 32 32 40 16 16\n";
    const IMAGES: &str = "# Image list\n\
        1 1 0 0 0 0.5 -0.25 3 1 frame_a.png\n\
        10.0 20.0 -1 11.0 5.0 3\n\
        2 0.7071067811865476 0 0.7071067811865476 0 0 0 2 2 frame_b.jpg\n\
        \n";
    const POINTS: &str = "1 0.1 0.2 0.3 255 0 128 0.5 1 0\n2 -1 2 -3 0 0 0 0.1\n";

    fn write_model(dir: &Path) {
        std::fs::write(dir.join("cameras.txt"), CAMERAS).unwrap();
        std::fs::write(dir.join("images.txt"), IMAGES).unwrap();
        std::fs::write(dir.join("points3D.txt"), POINTS).unwrap();
    }

    #[test]
    fn converts_poses_and_points() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_model(src.path());
        assert_eq!(convert_colmap(src.path(), out.path()).unwrap(), 2);
        let cams = read_cameras(&out.path().join("cameras.json")).unwrap();
        assert_eq!(cams[0].0, "frame_a");
        assert_eq!(cams[1].0, "frame_b");
        let a = &cams[0].1;
        assert_eq!((a.fx, a.fy, a.cx, a.cy, a.width, a.height), (50.0, 52.0, 32.0, 24.0, 64, 48));
        assert_eq!(a.translation, Vector3::new(0.5, -0.25, 3.0));
        // 90° about +y maps world +x to camera −z.
        let b = &cams[1].1;
        assert!((b.rotation * Vector3::x() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let (p, c) = ply::read_points(&out.path().join("points.ply")).unwrap();
        assert_eq!(p[1], Vector3::new(-1.0, 2.0, -3.0));
        assert!((c[0] - Vector3::new(1.0, 0.0, 128.0 / 255.0)).norm() < 1e-12);
    }

    #[test]
    fn distortion_models_rejected() {
        let src = tempfile::tempdir().unwrap();
        write_model(src.path());
        std::fs::write(src.path().join("cameras.txt"), "1 OPENCV 64 48 50 50 32 24 0.1 0 0 0\n").unwrap();
        let err = read_colmap_text(src.path()).unwrap_err();
        assert!(err.to_string().contains("OPENCV"), "{err}");
    }

    #[test]
    fn missing_images_file() {
        let src = tempfile::tempdir().unwrap();
        std::fs::write(src.path().join("cameras.txt"), CAMERAS).unwrap();
        assert!(matches!(read_colmap_text(src.path()), Err(Error::MissingFile(_))));
    }
}
