//! Tile-parallel EWA splatting with analytic gradients.
//!
//! Splats are sorted globally by camera depth (ties by Gaussian index) and
//! composited front to back per pixel. Both passes run in parallel over
//! 16×16 tiles; the backward pass accumulates into per-tile buffers that are
//! reduced in tile order, so results do not depend on the thread count.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{param, quat_matrix_backward, quat_to_matrix, Gaussian3D, SCALE_FLOOR};
use crate::image::Image;
use crate::sh;

pub const TILE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub background: Vector3<f64>,
    /// Added to the projected covariance diagonal, in px².
    pub low_pass: f64,
    pub z_near: f64,
    /// Contributions with Mahalanobis distance above this many sigmas are dropped.
    pub cutoff_sigma: f64,
    /// A pixel stops compositing once its transmittance falls below this.
    pub min_transmittance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: Vector3::zeros(),
            low_pass: 0.3,
            z_near: 0.01,
            cutoff_sigma: 3.0,
            min_transmittance: 1e-4,
        }
    }
}

/// How each splat's opacity and color are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RenderMode {
    /// Opacity `α`, SH color.
    Color,
    /// Opacity `m·α`, constant white: grayscale mirror probability.
    MirrorMask,
    /// Opacity `(1 − m)·α`, SH color. Mirror-surface splats turn clear so the
    /// virtual content behind the plane shows through them.
    Transmissive,
}

impl RenderMode {
    fn effective_alpha(self, g: &Gaussian3D) -> f64 {
        let a = g.opacity();
        match self {
            RenderMode::Color => a,
            RenderMode::MirrorMask => g.mirror_factor() * a,
            RenderMode::Transmissive => (1.0 - g.mirror_factor()) * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub alpha: f64,
    clamped: [bool; 3],
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha_acc: Image,
}

/// Forward-pass bookkeeping consumed by [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderState {
    fingerprint: u64,
    width: usize,
    height: usize,
    splats: Vec<Splat2D>,
    tiles: Vec<Vec<u32>>,
}

impl RenderState {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }
}

/// Parameter gradients laid out as consecutive [`Gaussian3D::write_params`] blocks.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub stride: usize,
    pub params: Vec<f64>,
    /// Norm of the screen-space mean gradient in normalized device units.
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl Gradients {
    pub fn zeros(count: usize, sh_len: usize) -> Self {
        let stride = Gaussian3D::param_count(sh_len);
        Gradients {
            stride,
            params: vec![0.0; count * stride],
            mean2d_norm: vec![0.0; count],
            visible: vec![false; count],
        }
    }

    pub fn of(&self, i: usize) -> &[f64] {
        &self.params[i * self.stride..(i + 1) * self.stride]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
        for (a, b) in self.mean2d_norm.iter_mut().zip(&other.mean2d_norm) {
            *a += b;
        }
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            *a |= b;
        }
    }
}

fn view_dir(g: &Gaussian3D, cam: &Camera) -> (Vector3<f64>, f64) {
    let v = cam.center() - g.mean;
    let n = v.norm();
    (v / n, n)
}

fn jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz2,
    )
}

fn scale_matrix(g: &Gaussian3D) -> Matrix3<f64> {
    Matrix3::from_diagonal(&g.log_scale.map(|l| l.exp().max(SCALE_FLOOR)))
}

/// Projects one Gaussian. `Ok(None)` means culled by the near plane.
pub fn project(
    g: &Gaussian3D,
    index: usize,
    cam: &Camera,
    mode: RenderMode,
    settings: &RenderSettings,
) -> Result<Option<Splat2D>> {
    let sigma = g.covariance()?.0;
    let p = cam.to_camera(&g.mean);
    if p.z <= settings.z_near {
        return Ok(None);
    }
    let (u, v) = cam.project_camera_point(&p);
    let t = jacobian(cam, &p) * cam.rotation;
    let mut cov2d = t * sigma * t.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5 + Matrix2::identity() * settings.low_pass;
    let conic = cov2d.try_inverse().ok_or_else(|| {
        Error::DegenerateGaussian(format!("projected covariance of Gaussian {index} is singular"))
    })?;
    let (color, clamped) = match mode {
        RenderMode::MirrorMask => (Vector3::repeat(1.0), [false; 3]),
        _ => {
            let raw = sh::eval(&g.sh, &view_dir(g, cam).0).add_scalar(0.5);
            let clamped = [0, 1, 2].map(|c| !(0.0..=1.0).contains(&raw[c]));
            (raw.map(|c| c.clamp(0.0, 1.0)), clamped)
        }
    };
    Ok(Some(Splat2D {
        index,
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        depth: p.z,
        color,
        alpha: mode.effective_alpha(g),
        clamped,
    }))
}

fn fingerprint(gaussians: &[Gaussian3D], cam: &Camera, mode: RenderMode, s: &RenderSettings) -> u64 {
    let mut h = DefaultHasher::new();
    let mut put = |v: f64| v.to_bits().hash(&mut h);
    for g in gaussians {
        g.mean.iter().chain(&g.rotation).chain(g.log_scale.iter()).for_each(|&v| put(v));
        put(g.opacity_logit);
        put(g.mirror_logit);
        g.sh.iter().flat_map(|c| c.iter()).for_each(|&v| put(v));
    }
    [cam.fx, cam.fy, cam.cx, cam.cy].iter().for_each(|&v| put(v));
    cam.rotation.iter().chain(cam.translation.iter()).for_each(|&v| put(v));
    s.background.iter().for_each(|&v| put(v));
    [s.low_pass, s.z_near, s.cutoff_sigma, s.min_transmittance].iter().for_each(|&v| put(v));
    let mut h2 = DefaultHasher::new();
    h.finish().hash(&mut h2);
    (cam.width, cam.height, gaussians.len(), mode).hash(&mut h2);
    for g in gaussians {
        g.side.hash(&mut h2);
    }
    h2.finish()
}

fn tiles_x(width: usize) -> usize {
    width.div_ceil(TILE)
}

fn bin_splats(splats: &[Splat2D], width: usize, height: usize, cutoff: f64) -> Vec<Vec<u32>> {
    let (ntx, nty) = (tiles_x(width), height.div_ceil(TILE));
    let mut tiles = vec![Vec::new(); ntx * nty];
    for (k, s) in splats.iter().enumerate() {
        let rx = cutoff * s.cov2d[(0, 0)].sqrt();
        let ry = cutoff * s.cov2d[(1, 1)].sqrt();
        // Pixel centers sit at i + 0.5.
        let x0 = (s.mean2d.x - rx - 0.5).ceil().max(0.0);
        let x1 = (s.mean2d.x + rx - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (s.mean2d.y - ry - 0.5).ceil().max(0.0);
        let y1 = (s.mean2d.y + ry - 0.5).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * ntx + tx].push(k as u32);
            }
        }
    }
    tiles
}

#[derive(Debug, Clone, Copy)]
struct Contrib {
    local: usize,
    a: f64,
    g: f64,
    t: f64,
}

/// Composites one pixel; returns the color (without background) and final
/// transmittance, optionally recording each contribution.
fn blend_pixel(
    splats: &[Splat2D],
    list: &[u32],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    mut record: Option<&mut Vec<Contrib>>,
) -> (Vector3<f64>, f64) {
    let max_q = settings.cutoff_sigma * settings.cutoff_sigma;
    let mut color = Vector3::zeros();
    let mut t = 1.0;
    for (local, &k) in list.iter().enumerate() {
        let s = &splats[k as usize];
        let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
        let q = s.conic[(0, 0)] * d.x * d.x
            + 2.0 * s.conic[(0, 1)] * d.x * d.y
            + s.conic[(1, 1)] * d.y * d.y;
        if q > max_q {
            continue;
        }
        let g = (-0.5 * q).exp();
        let a = s.alpha * g;
        if a <= 0.0 {
            continue;
        }
        color += s.color * (a * t);
        if let Some(r) = record.as_deref_mut() {
            r.push(Contrib { local, a, g, t });
        }
        t *= 1.0 - a;
        if t < settings.min_transmittance {
            break;
        }
    }
    (color, t)
}

fn check_sh_lengths(gaussians: &[Gaussian3D]) -> Result<usize> {
    let sh_len = gaussians.first().map_or(1, |g| g.sh.len());
    if let Some(i) = gaussians.iter().position(|g| g.sh.len() != sh_len) {
        return Err(Error::DimensionMismatch(format!(
            "Gaussian {i} has {} SH coefficients, expected {sh_len}",
            gaussians[i].sh.len()
        )));
    }
    Ok(sh_len)
}

pub fn render(
    gaussians: &[Gaussian3D],
    cam: &Camera,
    mode: RenderMode,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    render_with_state(gaussians, cam, mode, settings).map(|(out, _)| out)
}

pub fn render_with_state(
    gaussians: &[Gaussian3D],
    cam: &Camera,
    mode: RenderMode,
    settings: &RenderSettings,
) -> Result<(RenderOutput, RenderState)> {
    cam.validate()?;
    check_sh_lengths(gaussians)?;
    let projected: Vec<Option<Splat2D>> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project(g, i, cam, mode, settings))
        .collect::<Result<_>>()?;
    let mut splats: Vec<Splat2D> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let (w, h) = (cam.width, cam.height);
    let tiles = bin_splats(&splats, w, h, settings.cutoff_sigma);
    let ntx = tiles_x(w);

    let tile_pixels: Vec<Vec<(usize, Vector3<f64>, f64)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (tx, ty) = (ti % ntx, ti / ntx);
            let mut out = Vec::with_capacity(TILE * TILE);
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let (c, t) =
                        blend_pixel(&splats, list, x as f64 + 0.5, y as f64 + 0.5, settings, None);
                    out.push((y * w + x, c + settings.background * t, t));
                }
            }
            out
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut alpha_acc = Image::new(w, h, 1);
    for (p, c, t) in tile_pixels.into_iter().flatten() {
        color.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
        alpha_acc.data[p] = 1.0 - t;
    }
    let state = RenderState {
        fingerprint: fingerprint(gaussians, cam, mode, settings),
        width: w,
        height: h,
        splats,
        tiles,
    };
    Ok((RenderOutput { color, alpha_acc }, state))
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    /// d/d(conic_xx), d/d(conic_xy) with the off-diagonal counted once, d/d(conic_yy).
    conic: [f64; 3],
    color: Vector3<f64>,
    alpha: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.color += o.color;
        self.alpha += o.alpha;
    }
}

/// Gradients of `Σ upstream · color` with respect to every Gaussian parameter.
pub fn render_backward(
    gaussians: &[Gaussian3D],
    cam: &Camera,
    mode: RenderMode,
    settings: &RenderSettings,
    state: &RenderState,
    upstream: &Image,
) -> Result<Gradients> {
    if state.fingerprint != fingerprint(gaussians, cam, mode, settings) {
        return Err(Error::StaleState(
            "render state does not match these Gaussians, camera and mode".into(),
        ));
    }
    let (w, h) = (state.width, state.height);
    if upstream.width != w || upstream.height != h || upstream.channels != 3 {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {}x{}x{}, render is {w}x{h}x3",
            upstream.width, upstream.height, upstream.channels
        )));
    }
    let sh_len = check_sh_lengths(gaussians)?;
    let splats = &state.splats;
    let ntx = tiles_x(w);

    let tile_grads: Vec<Vec<SplatGrad>> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (tx, ty) = (ti % ntx, ti / ntx);
            let mut contribs = Vec::new();
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let i = upstream.index(x, y, 0);
                    let up = Vector3::new(upstream.data[i], upstream.data[i + 1], upstream.data[i + 2]);
                    if up == Vector3::zeros() {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contribs.clear();
                    blend_pixel(splats, list, px, py, settings, Some(&mut contribs));
                    // Color seen just behind the current splat, background included.
                    let mut behind = settings.background;
                    for c in contribs.iter().rev() {
                        let s = &splats[list[c.local] as usize];
                        let gr = &mut local[c.local];
                        gr.color += up * (c.a * c.t);
                        let grad_a = c.t * (s.color - behind).dot(&up);
                        behind = s.color * c.a + behind * (1.0 - c.a);
                        gr.alpha += grad_a * c.g;
                        let dq = -0.5 * grad_a * s.alpha * c.g;
                        let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
                        gr.conic[0] += dq * d.x * d.x;
                        gr.conic[1] += dq * 2.0 * d.x * d.y;
                        gr.conic[2] += dq * d.y * d.y;
                        gr.mean2d += -2.0 * dq * (s.conic * d);
                    }
                }
            }
            local
        })
        .collect();

    let mut per_splat = vec![SplatGrad::default(); splats.len()];
    for (list, local) in state.tiles.iter().zip(&tile_grads) {
        for (&k, g) in list.iter().zip(local) {
            per_splat[k as usize].add(g);
        }
    }
    let mut splat_of = vec![usize::MAX; gaussians.len()];
    for (k, s) in splats.iter().enumerate() {
        splat_of[s.index] = k;
    }

    let mut grads = Gradients::zeros(gaussians.len(), sh_len);
    let stride = grads.stride;
    let ndc = Vector2::new(w as f64 / 2.0, h as f64 / 2.0);
    grads
        .params
        .par_chunks_mut(stride)
        .zip(grads.mean2d_norm.par_iter_mut())
        .zip(grads.visible.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((out, norm), vis))| {
            let k = splat_of[i];
            if k == usize::MAX {
                return;
            }
            *vis = true;
            let sg = &per_splat[k];
            *norm = sg.mean2d.component_mul(&ndc).norm();
            splat_backward(&gaussians[i], cam, mode, &splats[k], sg, out);
        });
    Ok(grads)
}

fn splat_backward(
    g: &Gaussian3D,
    cam: &Camera,
    mode: RenderMode,
    s: &Splat2D,
    sg: &SplatGrad,
    out: &mut [f64],
) {
    // Opacity.
    let a = g.opacity();
    let m = g.mirror_factor();
    let da_dlogit = a * (1.0 - a);
    let dm_dlogit = m * (1.0 - m);
    match mode {
        RenderMode::Color => out[param::OPACITY] = sg.alpha * da_dlogit,
        RenderMode::MirrorMask => {
            out[param::OPACITY] = sg.alpha * m * da_dlogit;
            out[param::MIRROR] = sg.alpha * a * dm_dlogit;
        }
        RenderMode::Transmissive => {
            out[param::OPACITY] = sg.alpha * (1.0 - m) * da_dlogit;
            out[param::MIRROR] = -sg.alpha * a * dm_dlogit;
        }
    }

    let mut d_mean = Vector3::zeros();

    // Color through SH and the view direction.
    if mode != RenderMode::MirrorMask {
        let dc = Vector3::from_fn(|c, _| if s.clamped[c] { 0.0 } else { sg.color[c] });
        if dc != Vector3::zeros() {
            let (dir, dist) = view_dir(g, cam);
            let (basis, basis_grad) = sh::basis_with_gradient(&dir, g.sh_degree());
            let mut d_dir = Vector3::zeros();
            for (k, (b, bg)) in basis.iter().zip(&basis_grad).enumerate() {
                let base = param::SH + 3 * k;
                for c in 0..3 {
                    out[base + c] = b * dc[c];
                }
                d_dir += bg * g.sh[k].dot(&dc);
            }
            let d_v = (d_dir - dir * dir.dot(&d_dir)) / dist;
            d_mean -= d_v;
        }
    }

    // Conic to 2D covariance.
    let gm = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let d_cov2d = -s.conic * gm * s.conic;

    let p = cam.to_camera(&g.mean);
    let j = jacobian(cam, &p);
    let w = cam.rotation;
    let t = j * w;
    let rot = quat_to_matrix(&g.rotation);
    let smat = scale_matrix(g);
    let mm = rot * smat;
    let sigma = mm * mm.transpose();

    let d_sigma = t.transpose() * d_cov2d * t;
    let d_t = 2.0 * d_cov2d * t * sigma;
    let d_j = d_t * w.transpose();

    let (iz, iz2, iz3) = (1.0 / p.z, 1.0 / (p.z * p.z), 1.0 / (p.z * p.z * p.z));
    let (fx, fy) = (cam.fx, cam.fy);
    let dm = sg.mean2d;
    let d_p = Vector3::new(
        dm.x * fx * iz - d_j[(0, 2)] * fx * iz2,
        dm.y * fy * iz - d_j[(1, 2)] * fy * iz2,
        -dm.x * fx * p.x * iz2 - dm.y * fy * p.y * iz2 - d_j[(0, 0)] * fx * iz2
            + d_j[(0, 2)] * 2.0 * fx * p.x * iz3
            - d_j[(1, 1)] * fy * iz2
            + d_j[(1, 2)] * 2.0 * fy * p.y * iz3,
    );
    d_mean += w.transpose() * d_p;
    out[param::MEAN..param::MEAN + 3].copy_from_slice(d_mean.as_slice());

    // Σ = M Mᵀ with M = R S.
    let d_m = 2.0 * d_sigma * mm;
    let d_rot = d_m * smat;
    for jx in 0..3 {
        let s_j = smat[(jx, jx)];
        let ds: f64 = (0..3).map(|i| d_m[(i, jx)] * rot[(i, jx)]).sum();
        out[param::LOG_SCALE + jx] = if g.log_scale[jx].exp() > SCALE_FLOOR { ds * s_j } else { 0.0 };
    }
    let dq = quat_matrix_backward(&g.rotation, &d_rot);
    out[param::ROTATION..param::ROTATION + 4].copy_from_slice(&dq);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axial_cam() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn small_cam() -> Camera {
        Camera::look_at(Vector3::new(0.3, -0.2, -3.0), Vector3::zeros(), -Vector3::y(), 40.0, 32, 32)
            .unwrap()
    }

    #[test]
    fn axial_projection() {
        let cam = axial_cam();
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.02, 0.5, Vector3::repeat(0.5), 0);
        let s = project(&g, 0, &cam, RenderMode::Color, &RenderSettings::default()).unwrap().unwrap();
        assert_eq!(s.mean2d, Vector2::new(50.0, 50.0));
        // (f σ / z)² + λ on the diagonal: (100 · 0.02 / 1)² + 0.3 = 4.3.
        let z = 2.0;
        let g2 = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, z), 0.02, 0.5, Vector3::repeat(0.5), 0);
        let s2 = project(&g2, 0, &cam, RenderMode::Color, &RenderSettings::default()).unwrap().unwrap();
        assert!((s.cov2d - Matrix2::from_diagonal(&Vector2::new(4.3, 4.3))).abs().max() < 1e-12);
        assert!((s2.cov2d - Matrix2::from_diagonal(&Vector2::new(1.3, 1.3))).abs().max() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.5, Vector3::zeros(), 0);
        let s = project(&g, 0, &axial_cam(), RenderMode::Color, &RenderSettings::default()).unwrap();
        assert!(s.is_none());
    }

    fn centered_splat(depth: f64, opacity_logit: f64, rgb: Vector3<f64>) -> Gaussian3D {
        let mut g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, depth), 0.05, 0.5, rgb, 0);
        g.opacity_logit = opacity_logit;
        g
    }

    /// Pixel (50, 50) in the axial camera has center (50.5, 50.5); shift the
    /// principal point so the optical axis hits that center exactly.
    fn pixel_cam() -> Camera {
        Camera { cx: 50.5, cy: 50.5, ..axial_cam() }
    }

    #[test]
    fn opaque_single_splat_gives_its_color() {
        let g = centered_splat(1.0, 40.0, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(g.opacity(), 1.0);
        let out = render(&[g], &pixel_cam(), RenderMode::Color, &RenderSettings::default()).unwrap();
        assert_eq!(
            [out.color.get(50, 50, 0), out.color.get(50, 50, 1), out.color.get(50, 50, 2)],
            [1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn half_transparent_white_over_black_is_mid_gray() {
        let front = centered_splat(1.0, logit(0.5), Vector3::repeat(1.0));
        let back = centered_splat(2.0, 40.0, Vector3::zeros());
        let out =
            render(&[back, front], &pixel_cam(), RenderMode::Color, &RenderSettings::default()).unwrap();
        for c in 0..3 {
            assert!((out.color.get(50, 50, c) - 0.5).abs() < 1e-12);
        }
        assert!((out.alpha_acc.get(50, 50, 0) - 1.0).abs() < 1e-12);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> Vec<Gaussian3D> {
        (0..n)
            .map(|_| {
                let mut g = Gaussian3D::isotropic(
                    Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6)),
                    1.0,
                    0.5,
                    Vector3::zeros(),
                    degree,
                );
                g.rotation = [0; 4].map(|_| rng.random_range(-1.0..1.0));
                g.normalize_rotation();
                g.log_scale = Vector3::from_fn(|_, _| rng.random_range(-2.6..-1.4));
                g.opacity_logit = rng.random_range(-1.5..2.0);
                g.mirror_logit = rng.random_range(-2.0..2.0);
                for c in g.sh.iter_mut() {
                    *c = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
                }
                g
            })
            .collect()
    }

    #[test]
    fn all_zero_mirror_factors_render_background_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scene = random_scene(&mut rng, 6, 1);
        for g in &mut scene {
            g.mirror_logit = -800.0;
        }
        let out = render(&scene, &small_cam(), RenderMode::MirrorMask, &RenderSettings::default()).unwrap();
        assert!(out.color.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn front_to_back_matches_back_to_front_over() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 8, 1);
        let cam = small_cam();
        let settings = RenderSettings { min_transmittance: 0.0, ..Default::default() };
        let (out, state) = render_with_state(&scene, &cam, RenderMode::Color, &settings).unwrap();
        let max_q = settings.cutoff_sigma.powi(2);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut c = settings.background;
                for s in state.splats().iter().rev() {
                    let d = Vector2::new(px, py) - s.mean2d;
                    let q = (d.transpose() * s.conic * d)[0];
                    if q > max_q {
                        continue;
                    }
                    let a = s.alpha * (-0.5 * q).exp();
                    c = s.color * a + c * (1.0 - a);
                }
                for ch in 0..3 {
                    assert!((out.color.get(x, y, ch) - c[ch]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn stale_state_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scene = random_scene(&mut rng, 3, 1);
        let cam = small_cam();
        let s = RenderSettings::default();
        let (_, state) = render_with_state(&scene, &cam, RenderMode::Color, &s).unwrap();
        scene[1].mean.x += 1e-3;
        let up = Image::filled(32, 32, 3, 1.0);
        let err = render_backward(&scene, &cam, RenderMode::Color, &s, &state, &up).unwrap_err();
        assert!(matches!(err, Error::StaleState(_)));
        let err = render_backward(&scene, &cam, RenderMode::MirrorMask, &s, &state, &up).unwrap_err();
        assert!(matches!(err, Error::StaleState(_)));
    }

    fn weighted_loss(scene: &[Gaussian3D], cam: &Camera, mode: RenderMode, up: &Image) -> f64 {
        let out = render(scene, cam, mode, &RenderSettings::default()).unwrap();
        out.color.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
    }

    fn check_gradients(seed: u64, mode: RenderMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 5, 1);
        let cam = small_cam();
        let up = Image::from_fn(32, 32, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let s = RenderSettings::default();
        let (_, state) = render_with_state(&scene, &cam, mode, &s).unwrap();
        let grads = render_backward(&scene, &cam, mode, &s, &state, &up).unwrap();
        let stride = grads.stride;
        let eps = 1e-6;
        for i in 0..scene.len() {
            let mut flat = vec![0.0; stride];
            scene[i].write_params(&mut flat);
            for p in 0..stride {
                let eval = |delta: f64| {
                    let mut sc = scene.clone();
                    let mut f = flat.clone();
                    f[p] += delta;
                    sc[i].read_params(&f);
                    weighted_loss(&sc, &cam, mode, &up)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = grads.of(i)[p];
                let ok = if an.abs() < 1e-3 && fd.abs() < 1e-3 {
                    (an - fd).abs() < 1e-6
                } else {
                    (an - fd).abs() / an.abs().max(fd.abs()) < 1e-3
                };
                assert!(ok, "{mode:?} seed {seed} gaussian {i} param {p}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        check_gradients(1, RenderMode::Color);
        check_gradients(2, RenderMode::Transmissive);
    }

    #[test]
    fn mask_gradients_match_finite_differences() {
        check_gradients(3, RenderMode::MirrorMask);
    }

    #[test]
    fn mask_mode_ignores_sh_and_drives_mirror_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 4, 1);
        let cam = small_cam();
        let s = RenderSettings::default();
        let up = Image::filled(32, 32, 3, 1.0);
        let (_, state) = render_with_state(&scene, &cam, RenderMode::MirrorMask, &s).unwrap();
        let g = render_backward(&scene, &cam, RenderMode::MirrorMask, &s, &state, &up).unwrap();
        let mut any_mirror = false;
        for i in 0..scene.len() {
            let p = g.of(i);
            assert!(p[param::SH..].iter().all(|&v| v == 0.0));
            any_mirror |= p[param::MIRROR] != 0.0;
        }
        assert!(any_mirror);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(&mut rng, 4, 1);
        let cam = small_cam();
        let s = RenderSettings::default();
        let (_, state) = render_with_state(&scene, &cam, RenderMode::Color, &s).unwrap();
        let g = render_backward(&scene, &cam, RenderMode::Color, &s, &state, &Image::new(32, 32, 3))
            .unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = random_scene(&mut rng, 10, 1);
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), -Vector3::y(), 60.0, 48, 40)
            .unwrap();
        let up = Image::from_fn(48, 40, 3, |x, y, c| ((x + 2 * y + c) % 5) as f64 - 2.0);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let s = RenderSettings::default();
                let (out, st) = render_with_state(&scene, &cam, RenderMode::Color, &s).unwrap();
                let g = render_backward(&scene, &cam, RenderMode::Color, &s, &st, &up).unwrap();
                (out.color.data, g.params)
            })
        };
        assert_eq!(run(1), run(4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn mask_is_monotone_in_mirror_logit(seed in 0u64..10_000, which in 0usize..6, bump in 0.01f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scene = random_scene(&mut rng, 6, 0);
                let cam = small_cam();
                let s = RenderSettings::default();
                let base = render(&scene, &cam, RenderMode::MirrorMask, &s).unwrap();
                let mut raised = scene.clone();
                raised[which].mirror_logit += bump;
                let up = render(&raised, &cam, RenderMode::MirrorMask, &s).unwrap();
                // Early termination can stop a pixel up to `min_transmittance` short.
                for (a, b) in base.color.data.iter().zip(&up.color.data) {
                    prop_assert!(*b >= *a - s.min_transmittance);
                }
            }

            #[test]
            fn pixels_stay_in_unit_range(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scene = random_scene(&mut rng, 8, 1);
                let out = render(&scene, &small_cam(), RenderMode::Color, &RenderSettings::default()).unwrap();
                prop_assert!(out.color.data.iter().chain(&out.alpha_acc.data).all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn coverage_grows_as_splats_are_added(seed in 0u64..10_000, keep in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scene = random_scene(&mut rng, 8, 0);
                let s = RenderSettings::default();
                let part = render(&scene[..keep], &small_cam(), RenderMode::Color, &s).unwrap();
                let all = render(&scene, &small_cam(), RenderMode::Color, &s).unwrap();
                for (a, b) in part.alpha_acc.data.iter().zip(&all.alpha_acc.data) {
                    prop_assert!(*b >= *a - s.min_transmittance);
                }
            }
        }
    }
}
