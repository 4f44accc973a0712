//! Binary little-endian PLY for Gaussian sets and colored point clouds.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, SideTag};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

/// Vertex columns by property name.
struct VertexTable {
    count: usize,
    columns: Vec<(String, Vec<f64>)>,
}

impl VertexTable {
    fn column(&self, name: &str, path: &Path) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::format(path, format!("missing vertex property {name:?}")))
    }

    fn has(&self, name: &str) -> bool {
        self.columns.iter().any(|(n, _)| n == name)
    }
}

fn read_vertices(path: &Path) -> Result<VertexTable> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut line = String::new();
    let read_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "unexpected end of PLY header"));
        }
        Ok(())
    };
    read_line(&mut r, &mut line)?;
    if line.trim() != "ply" {
        return Err(bad("not a PLY file"));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        read_line(&mut r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad(&format!("unsupported PLY format {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => return Err(bad("list properties are not supported")),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| bad(&format!("unknown property type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => return Err(bad(&format!("unrecognized header line {:?}", line.trim()))),
        }
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    for el in &elements {
        let row: usize = el.props.iter().map(|(_, t)| t.size()).sum();
        let bytes = el.count * row;
        if body.len() < offset + bytes {
            return Err(bad("truncated PLY body"));
        }
        if el.name == "vertex" {
            let mut columns: Vec<(String, Vec<f64>)> =
                el.props.iter().map(|(n, _)| (n.clone(), Vec::with_capacity(el.count))).collect();
            for i in 0..el.count {
                let mut at = offset + i * row;
                for (k, (_, ty)) in el.props.iter().enumerate() {
                    columns[k].1.push(ty.decode(&body[at..at + ty.size()]));
                    at += ty.size();
                }
            }
            return Ok(VertexTable { count: el.count, columns });
        }
        offset += bytes;
    }
    Err(bad("no vertex element"))
}

fn write_ply(path: &Path, count: usize, props: &[(String, &str)], body: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for (name, ty) in props {
        header.push_str(&format!("property {ty} {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(body).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn gaussian_props(sh_len: usize) -> Vec<String> {
    let mut names: Vec<String> = [
        "x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "log_scale_x", "log_scale_y", "log_scale_z",
        "opacity_logit", "mirror_logit",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for ch in ["r", "g", "b"] {
        for k in 0..sh_len {
            names.push(format!("sh_{ch}_{k}"));
        }
    }
    names
}

/// Writes Gaussians with `f64` properties, SH flattened channel-major, and a
/// `uchar side_tag`.
pub fn write_gaussians(path: &Path, gaussians: &[Gaussian3D], sh_len: usize) -> Result<()> {
    if let Some(g) = gaussians.iter().find(|g| g.sh.len() != sh_len) {
        return Err(Error::DimensionMismatch(format!(
            "Gaussian with {} SH coefficients in a {sh_len}-coefficient file",
            g.sh.len()
        )));
    }
    let names = gaussian_props(sh_len);
    let mut props: Vec<(String, &str)> = names.into_iter().map(|n| (n, "double")).collect();
    props.push(("side_tag".into(), "uchar"));
    let mut body = Vec::with_capacity(gaussians.len() * (8 * (props.len() - 1) + 1));
    for g in gaussians {
        let mut vals: Vec<f64> = g.mean.iter().copied().collect();
        vals.extend_from_slice(&g.rotation);
        vals.extend(g.log_scale.iter());
        vals.push(g.opacity_logit);
        vals.push(g.mirror_logit);
        for ch in 0..3 {
            vals.extend(g.sh.iter().map(|c| c[ch]));
        }
        for v in vals {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.push(g.side.as_u8());
    }
    write_ply(path, gaussians.len(), &props, &body)
}

pub fn read_gaussians(path: &Path) -> Result<Vec<Gaussian3D>> {
    let t = read_vertices(path)?;
    let mut sh_len = 0;
    while t.has(&format!("sh_r_{sh_len}")) {
        sh_len += 1;
    }
    if sh::degree_for_count(sh_len).is_none_or(|d| d > sh::MAX_DEGREE) {
        return Err(Error::format(path, format!("{sh_len} SH coefficients per channel is not supported")));
    }
    let names = gaussian_props(sh_len);
    let cols: Vec<&[f64]> = names.iter().map(|n| t.column(n, path)).collect::<Result<_>>()?;
    let sides = t.column("side_tag", path)?;
    (0..t.count)
        .map(|i| {
            let v = |k: usize| cols[k][i];
            let side = SideTag::from_u8(sides[i] as u8)
                .ok_or_else(|| Error::format(path, format!("bad side_tag {} at vertex {i}", sides[i])))?;
            Ok(Gaussian3D {
                mean: Vector3::new(v(0), v(1), v(2)),
                rotation: [v(3), v(4), v(5), v(6)],
                log_scale: Vector3::new(v(7), v(8), v(9)),
                opacity_logit: v(10),
                mirror_logit: v(11),
                sh: (0..sh_len).map(|k| Vector3::new(v(12 + k), v(12 + sh_len + k), v(12 + 2 * sh_len + k))).collect(),
                side,
            })
        })
        .collect()
}

/// Point cloud with `double` positions and `uchar` colors.
pub fn write_points(path: &Path, points: &[Vector3<f64>], colors: &[Vector3<f64>]) -> Result<()> {
    if points.len() != colors.len() {
        return Err(Error::DimensionMismatch(format!("{} points but {} colors", points.len(), colors.len())));
    }
    let props: Vec<(String, &str)> = [("x", "double"), ("y", "double"), ("z", "double"), ("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
        .iter()
        .map(|(n, t)| (n.to_string(), *t))
        .collect();
    let mut body = Vec::with_capacity(points.len() * 27);
    for (p, c) in points.iter().zip(colors) {
        for v in p.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        for v in c.iter() {
            body.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_ply(path, points.len(), &props, &body)
}

/// Points and colors in `[0,1]`; missing color properties read as mid-gray.
pub fn read_points(path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let t = read_vertices(path)?;
    let (x, y, z) = (t.column("x", path)?, t.column("y", path)?, t.column("z", path)?);
    let points = (0..t.count).map(|i| Vector3::new(x[i], y[i], z[i])).collect();
    let colors = if t.has("red") {
        let (r, g, b) = (t.column("red", path)?, t.column("green", path)?, t.column("blue", path)?);
        (0..t.count).map(|i| Vector3::new(r[i], g[i], b[i]) / 255.0).collect()
    } else {
        vec![Vector3::repeat(0.5); t.count]
    };
    Ok((points, colors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussians_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let mut gs = Vec::new();
        for i in 0..5 {
            let mut g = Gaussian3D::isotropic(Vector3::new(i as f64 * 0.1, -0.3, 1.0 / 3.0), 0.05, 0.4, Vector3::new(0.1, 0.5, 0.9), 2);
            g.sh[5] = Vector3::new(0.1, -0.2, std::f64::consts::PI);
            g.rotation = [0.5, 0.5, -0.5, 0.5];
            g.side = SideTag::from_u8(i % 4).unwrap();
            gs.push(g);
        }
        write_gaussians(&path, &gs, 9).unwrap();
        assert_eq!(read_gaussians(&path).unwrap(), gs);
        let text = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&text[..text.len().min(2000)]);
        assert!(header.contains("property uchar side_tag"));
        assert!(header.contains("property double sh_g_0"));
    }

    #[test]
    fn empty_gaussian_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        write_gaussians(&path, &[], 4).unwrap();
        assert!(read_gaussians(&path).unwrap().is_empty());
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let pts = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-0.25, 0.5, 1e-3)];
        let cols = vec![Vector3::new(1.0, 0.0, 128.0 / 255.0), Vector3::repeat(0.2)];
        write_points(&path, &pts, &cols).unwrap();
        let (p, c) = read_points(&path).unwrap();
        assert_eq!(p, pts);
        assert!((c[0] - cols[0]).norm() < 1e-12);
        assert!((c[1] - cols[1]).norm() < 0.5 / 255.0 * 2.0);
    }

    #[test]
    fn reads_float_properties_from_other_writers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment other tool\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let (p, c) = read_points(&path).unwrap();
        assert_eq!(p[1], Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(c[0], Vector3::repeat(0.5));
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
        assert!(matches!(read_points(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\nend_header\nabc").unwrap();
        assert!(matches!(read_points(&path), Err(Error::Format { .. })));
        assert!(matches!(read_points(&dir.path().join("none.ply")), Err(Error::MissingFile(_))));
    }
}
