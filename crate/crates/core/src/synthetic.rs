//! Synthetic mirror scenes with a deliberately occluded face.
//!
//! A textured box sits at the origin with world up `+z`. Training cameras
//! span an arc around `+x`; a planar mirror stands on the `−x` side, so the
//! box's `−x` face is only ever seen in reflection. Held-out cameras sit
//! between the box and the mirror (which is removed for them) and look at
//! that face directly.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{DetailBox, Frame, SceneDataset};
use crate::error::{Error, Result};
use crate::gaussian::{logit, matrix_to_quat, Gaussian3D};
use crate::image::Image;
use crate::mirror::{reflect_gaussian, reflect_point, MirrorPlane};
use crate::raster::{render, RenderMode, RenderSettings};
use crate::sh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub train_cameras: usize,
    pub heldout_cameras: usize,
    /// Total azimuth span of the training arc, centered on `+x`.
    pub arc_degrees: f64,
    pub camera_radius: f64,
    pub camera_elevation_deg: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub heldout_radius: f64,
    pub heldout_arc_degrees: f64,
    pub heldout_elevation_deg: f64,
    pub heldout_focal_factor: f64,
    pub box_half_extent: f64,
    /// Disks per face edge.
    pub face_grid: usize,
    /// Distance from the origin to the mirror plane.
    pub mirror_distance: f64,
    /// Rotation of the mirror normal about `+z`, away from `+x`.
    pub mirror_yaw_deg: f64,
    pub mirror_half_width: f64,
    pub mirror_half_height: f64,
    pub mirror_center_height: f64,
    /// Marker points seeded on the mirror surface, per side.
    pub mirror_markers: [usize; 2],
    /// Standard deviation of the position noise on initial points.
    pub point_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 64,
            height: 64,
            train_cameras: 20,
            heldout_cameras: 4,
            arc_degrees: 100.0,
            camera_radius: 3.5,
            camera_elevation_deg: 25.0,
            focal_factor: 0.95,
            heldout_radius: 1.35,
            heldout_arc_degrees: 60.0,
            heldout_elevation_deg: 10.0,
            heldout_focal_factor: 0.6,
            box_half_extent: 0.5,
            face_grid: 5,
            mirror_distance: 1.6,
            mirror_yaw_deg: 10.0,
            mirror_half_width: 2.2,
            mirror_half_height: 1.6,
            mirror_center_height: 0.3,
            mirror_markers: [20, 12],
            point_noise: 0.01,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.train_cameras == 0 {
            return bad("at least one training camera is required");
        }
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16x16");
        }
        if self.face_grid == 0 || self.mirror_markers.contains(&0) {
            return bad("face grid and mirror marker counts must be positive");
        }
        let positive = [
            self.camera_radius,
            self.focal_factor,
            self.heldout_radius,
            self.heldout_focal_factor,
            self.box_half_extent,
            self.mirror_distance,
            self.mirror_half_width,
            self.mirror_half_height,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("radii, focal factors, extents and mirror size must be positive");
        }
        if !(self.point_noise >= 0.0) || !(0.0..360.0).contains(&self.arc_degrees) {
            return bad("point noise must be non-negative and the arc below 360 degrees");
        }
        if self.mirror_distance <= self.box_half_extent * 3f64.sqrt() {
            return bad("the mirror plane intersects the box");
        }
        Ok(())
    }

    pub fn plane(&self) -> MirrorPlane {
        let yaw = self.mirror_yaw_deg.to_radians();
        MirrorPlane::new(Vector3::new(yaw.cos(), yaw.sin(), 0.0), self.mirror_distance).expect("unit normal")
    }

    /// Mirror rectangle corners in order around the boundary.
    pub fn mirror_corners(&self) -> [Vector3<f64>; 4] {
        let n = self.plane().normal();
        let u = Vector3::z().cross(&n).normalize();
        let v = Vector3::z();
        let c = -self.mirror_distance * n + self.mirror_center_height * v;
        let (a, b) = (self.mirror_half_width, self.mirror_half_height);
        [c - a * u - b * v, c + a * u - b * v, c + a * u + b * v, c - a * u + b * v]
    }
}

/// Faces in the order `+x, −x, +y, −y, +z, −z`; the occluded face is `−x`.
pub const HIDDEN_FACE: usize = 1;

fn face_frame(face: usize) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let n: Vector3<f64> = match face {
        0 => Vector3::x(),
        1 => -Vector3::x(),
        2 => Vector3::y(),
        3 => -Vector3::y(),
        4 => Vector3::z(),
        _ => -Vector3::z(),
    };
    let t1 = if n.z.abs() > 0.5 { Vector3::x() } else { Vector3::z().cross(&n) };
    let t2 = n.cross(&t1);
    (n, t1, t2)
}

fn face_color(face: usize, i: usize, j: usize, k: usize) -> Vector3<f64> {
    if face == HIDDEN_FACE {
        // Coarse two-tone checker: readable at low resolution.
        let block = (2 * i / k + 2 * j / k) % 2;
        return if block == 0 { Vector3::new(0.95, 0.8, 0.1) } else { Vector3::new(0.1, 0.25, 0.85) };
    }
    let base = [
        Vector3::new(0.85, 0.2, 0.2),
        Vector3::zeros(),
        Vector3::new(0.2, 0.75, 0.3),
        Vector3::new(0.3, 0.7, 0.75),
        Vector3::new(0.8, 0.8, 0.8),
        Vector3::new(0.6, 0.35, 0.6),
    ][face];
    if (i + j) % 2 == 0 {
        base
    } else {
        base * 0.6
    }
}

/// Ground-truth box Gaussians: flat, nearly opaque disks tiling each face.
pub fn object_gaussians(spec: &SyntheticSpec) -> Vec<Gaussian3D> {
    let k = spec.face_grid;
    let half = spec.box_half_extent;
    let h = 2.0 * half / k as f64;
    let mut out = Vec::with_capacity(6 * k * k);
    for face in 0..6 {
        let (n, t1, t2) = face_frame(face);
        let rot = matrix_to_quat(&Matrix3::from_columns(&[t1, t2, n]));
        for i in 0..k {
            for j in 0..k {
                let a = -half + (i as f64 + 0.5) * h;
                let b = -half + (j as f64 + 0.5) * h;
                let mut g = Gaussian3D::isotropic(half * n + a * t1 + b * t2, 1.0, 0.95, face_color(face, i, j, k), 0);
                g.rotation = rot;
                g.log_scale = Vector3::new(0.6 * h, 0.6 * h, 0.06 * h).map(f64::ln);
                g.mirror_logit = logit(0.01);
                out.push(g);
            }
        }
    }
    out
}

pub fn face_corners(spec: &SyntheticSpec, face: usize) -> [Vector3<f64>; 4] {
    let (n, t1, t2) = face_frame(face);
    let s = spec.box_half_extent;
    let c = s * n;
    [c - s * t1 - s * t2, c + s * t1 - s * t2, c + s * t1 + s * t2, c - s * t1 + s * t2]
}

pub fn training_cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>> {
    let n = spec.train_cameras;
    let elev = spec.camera_elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let az = ((t - 0.5) * spec.arc_degrees).to_radians();
            let eye = spec.camera_radius * Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let fx = spec.focal_factor * spec.width as f64;
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), fx, spec.width, spec.height)
        })
        .collect()
}

pub fn heldout_cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>> {
    let n = spec.heldout_cameras;
    let elev = spec.heldout_elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let az = (180.0 + (t - 0.5) * spec.heldout_arc_degrees).to_radians();
            let eye = spec.heldout_radius * Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let fx = spec.heldout_focal_factor * spec.width as f64;
            Camera::look_at(eye, Vector3::zeros(), Vector3::z(), fx, spec.width, spec.height)
        })
        .collect()
}

/// Pixels whose centers fall inside the projected convex quad.
pub fn rasterize_quad(cam: &Camera, corners: &[Vector3<f64>; 4]) -> Result<Image> {
    let mut pts = [(0.0, 0.0); 4];
    for (p, c) in pts.iter_mut().zip(corners) {
        let pc = cam.to_camera(c);
        if pc.z <= 1e-6 {
            return Err(Error::InvalidSpec("mirror corner behind a training camera".into()));
        }
        *p = cam.project_camera_point(&pc);
    }
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    Ok(Image::from_fn(cam.width, cam.height, 1, |x, y, _| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let s: Vec<f64> = (0..4).map(|i| edge(pts[i], pts[(i + 1) % 4], p)).collect();
        let inside = s.iter().all(|v| *v >= 0.0) || s.iter().all(|v| *v <= 0.0);
        if inside {
            1.0
        } else {
            0.0
        }
    }))
}

/// Ground truth for one training view: the direct render, with the
/// reflected world composited behind it inside the mirror rectangle. The
/// mask is the projected rectangle itself; an object in front of the mirror
/// does not carve it, just as it does not block the mask render.
pub fn render_training_view(
    object: &[Gaussian3D],
    reflected: &[Gaussian3D],
    corners: &[Vector3<f64>; 4],
    cam: &Camera,
) -> Result<(Image, Image)> {
    let settings = RenderSettings::default();
    let direct = render(object, cam, RenderMode::Color, &settings)?;
    let virt = render(reflected, cam, RenderMode::Color, &settings)?;
    let rect = rasterize_quad(cam, corners)?;
    let mut image = direct.color.clone();
    for p in 0..rect.data.len() {
        if rect.data[p] > 0.0 {
            let a = direct.alpha_acc.data[p];
            for c in 0..3 {
                image.data[3 * p + c] += (1.0 - a) * virt.color.data[3 * p + c];
            }
        }
    }
    image.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((image, rect))
}

fn faces_seen(spec: &SyntheticSpec, cams: &[Camera], plane: &MirrorPlane) -> ([bool; 6], [bool; 6]) {
    let t = plane.transform();
    let corners = spec.mirror_corners();
    let n = plane.normal();
    let u = Vector3::z().cross(&n).normalize();
    let center = corners.iter().sum::<Vector3<f64>>() / 4.0;
    let mut direct = [false; 6];
    let mut mirrored = [false; 6];
    for face in 0..6 {
        let (fnormal, _, _) = face_frame(face);
        let fc = spec.box_half_extent * fnormal;
        for cam in cams {
            let c = cam.center();
            if fnormal.dot(&(c - fc)) > 0.0 {
                direct[face] = true;
            }
            let c_ref = reflect_point(&c, &t);
            let hit = ray_plane(&c, &(reflect_point(&fc, &t) - c), plane);
            let in_window = hit.is_some_and(|p| {
                let d = p - center;
                d.dot(&u).abs() <= spec.mirror_half_width && d.z.abs() <= spec.mirror_half_height
            });
            if fnormal.dot(&(c_ref - fc)) > 0.0 && in_window {
                mirrored[face] = true;
            }
        }
    }
    (direct, mirrored)
}

/// Intersection of the ray `o + s·dir` (s > 0) with the plane.
pub fn ray_plane(o: &Vector3<f64>, dir: &Vector3<f64>, plane: &MirrorPlane) -> Option<Vector3<f64>> {
    let denom = plane.normal().dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let s = -plane.signed_distance(o) / denom;
    (s > 0.0).then(|| o + s * dir)
}

fn detail_box(spec: &SyntheticSpec, cam: &Camera) -> Option<DetailBox> {
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for c in face_corners(spec, HIDDEN_FACE) {
        let pc = cam.to_camera(&c);
        if pc.z <= 0.0 {
            return None;
        }
        let (u, v) = cam.project_camera_point(&pc);
        lo = (lo.0.min(u), lo.1.min(v));
        hi = (hi.0.max(u), hi.1.max(v));
    }
    let clamp = |v: f64, max: usize| (v.max(0.0) as usize).min(max);
    let (w, h) = (cam.width, cam.height);
    let mut x0 = clamp(lo.0.floor(), w);
    let mut y0 = clamp(lo.1.floor(), h);
    let mut x1 = clamp(hi.0.ceil(), w);
    let mut y1 = clamp(hi.1.ceil(), h);
    // SSIM needs at least one full window.
    let min = crate::ssim::WINDOW;
    if x1 - x0 < min {
        let grow = min - (x1 - x0);
        x0 = x0.saturating_sub(grow.div_ceil(2));
        x1 = (x0 + min).min(w);
        x0 = x1.saturating_sub(min);
    }
    if y1 - y0 < min {
        let grow = min - (y1 - y0);
        y0 = y0.saturating_sub(grow.div_ceil(2));
        y1 = (y0 + min).min(h);
        y0 = y1.saturating_sub(min);
    }
    Some([x0, y0, x1 - x0, y1 - y0])
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub dataset: SceneDataset,
    /// Ground-truth box Gaussians.
    pub object: Vec<Gaussian3D>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let plane = spec.plane();
    let t = plane.transform();
    let object = object_gaussians(spec);
    if let Some(g) = object.iter().find(|g| plane.signed_distance(&g.mean) <= 0.0) {
        return Err(Error::InvalidSpec(format!("object Gaussian at {:?} is not on the camera side", g.mean.as_slice())));
    }
    let reflected: Vec<Gaussian3D> = object.iter().map(|g| reflect_gaussian(g, &t)).collect::<Result<_>>()?;
    let corners = spec.mirror_corners();
    let cams = training_cameras(spec)?;
    for c in &cams {
        if plane.signed_distance(&c.center()) <= 0.0 {
            return Err(Error::InvalidSpec("a training camera lies behind the mirror".into()));
        }
    }
    let train_frames = cams
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let (image, mask) = render_training_view(&object, &reflected, &corners, cam)?;
            Ok(Frame { id: format!("train_{i:03}"), image, mask, camera: cam.clone() })
        })
        .collect::<Result<Vec<_>>>()?;

    let held = heldout_cameras(spec)?;
    let mut detail_boxes = BTreeMap::new();
    let mut held_out_frames = Vec::with_capacity(held.len());
    for (i, cam) in held.iter().enumerate() {
        if plane.signed_distance(&cam.center()) <= 0.0 {
            return Err(Error::InvalidSpec("a held-out camera lies behind the mirror plane".into()));
        }
        let id = format!("heldout_{i:03}");
        let out = render(&object, cam, RenderMode::Color, &RenderSettings::default())?;
        if let Some(b) = detail_box(spec, cam) {
            detail_boxes.insert(id.clone(), b);
        }
        held_out_frames.push(Frame { id, image: out.color, mask: Image::new(cam.width, cam.height, 1), camera: cam.clone() });
    }

    // Initial points: what a structure-from-motion run would triangulate.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.point_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let jitter = |p: Vector3<f64>, rng: &mut ChaCha8Rng| {
        if spec.point_noise > 0.0 {
            p + Vector3::from_fn(|_, _| noise.sample(rng))
        } else {
            p
        }
    };
    let (direct, mirrored) = faces_seen(spec, &cams, &plane);
    let per_face = spec.face_grid * spec.face_grid;
    let mut init_points = Vec::new();
    let mut init_colors = Vec::new();
    for (idx, g) in object.iter().enumerate() {
        let face = idx / per_face;
        let color = sh::dc_to_rgb(&g.sh[0]);
        if direct[face] {
            init_points.push(jitter(g.mean, &mut rng));
            init_colors.push(color);
        }
        if mirrored[face] {
            init_points.push(jitter(reflected[idx].mean, &mut rng));
            init_colors.push(color);
        }
    }
    let [mu, mv] = spec.mirror_markers;
    for i in 0..mu {
        for j in 0..mv {
            let a = (i as f64 + 0.5) / mu as f64;
            let b = (j as f64 + 0.5) / mv as f64;
            let p = corners[0] + a * (corners[1] - corners[0]) + b * (corners[3] - corners[0]);
            init_points.push(jitter(p, &mut rng));
            init_colors.push(Vector3::repeat(0.5));
        }
    }

    let dataset = SceneDataset {
        train_frames,
        held_out_frames,
        init_points,
        init_colors,
        gt_plane: Some(plane),
        detail_boxes,
    };
    dataset.validate()?;
    Ok(SyntheticScene { dataset, object })
}
