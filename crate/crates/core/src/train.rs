//! Two-stage optimization.
//!
//! Stage 1 fits appearance and mirror factors against images and masks.
//! The transition fits the mirror plane to high-mirror-factor centers and
//! builds the merged scene; stage 2 then adds the symmetry loss.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::gaussian::{param, Gaussian3D, SideTag};
use crate::image::Image;
use crate::loss::{mask_loss, rgb_loss, symmetry_loss, total_loss, LossReport, LossWeights};
use crate::mirror::{
    bbox_diagonal, build_merged_scene, front_sign, ransac_fit_plane, select_mirror_points, MirrorPlane,
    PlaneFit, DEFAULT_INLIER_FRACTION, DEFAULT_MIRROR_THRESHOLD, DEFAULT_RANSAC_ITERS, PLANE_EPS_FRACTION,
};
use crate::optim::Adam;
use crate::raster::{render_backward, render_with_state, RenderMode, RenderSettings};
use crate::sh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Position rate in units of the camera extent; decays exponentially to
    /// `lr_position * lr_position_final_factor` over the whole run.
    pub lr_position: f64,
    pub lr_position_final_factor: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_mirror: f64,
    pub densify_interval: usize,
    pub densify_start: usize,
    pub densify_stop: usize,
    /// Threshold on the mean screen-space gradient norm (normalized device units).
    pub densify_grad_threshold: f64,
    pub prune_opacity_threshold: f64,
    /// Gaussians larger than this fraction of the camera extent split; smaller ones clone.
    pub percent_dense: f64,
    pub max_gaussians: usize,
    pub weights: LossWeights,
    pub mirror_threshold: f64,
    pub ransac_iters: usize,
    /// RANSAC inlier tolerance as a fraction of the scene bounding-box diagonal.
    pub ransac_inlier_fraction: f64,
    /// Stage-2 plane refit period; 0 disables refitting.
    pub refit_interval: usize,
    pub freeze_mirror_factors: bool,
    /// Freeze the behind-plane population during stage 2.
    pub freeze_mirror_region: bool,
    /// When false, stage 1 runs for the whole budget and no plane is fitted.
    pub merge_stage2: bool,
    /// Relative error injected into every fitted plane.
    pub plane_perturbation: f64,
    pub sh_degree: usize,
    pub seed: u64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: 3000,
            stage2_iters: 7000,
            lr_position: 1.6e-4,
            lr_position_final_factor: 0.01,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lr_mirror: 5e-2,
            densify_interval: 100,
            densify_start: 500,
            densify_stop: 8000,
            densify_grad_threshold: 2e-4,
            prune_opacity_threshold: 0.005,
            percent_dense: 0.01,
            max_gaussians: 20_000,
            weights: LossWeights::default(),
            mirror_threshold: DEFAULT_MIRROR_THRESHOLD,
            ransac_iters: DEFAULT_RANSAC_ITERS,
            ransac_inlier_fraction: DEFAULT_INLIER_FRACTION,
            refit_interval: 1000,
            freeze_mirror_factors: true,
            freeze_mirror_region: false,
            merge_stage2: true,
            plane_perturbation: 0.0,
            sh_degree: 1,
            seed: 0,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [
            self.lr_position,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_sh,
            self.lr_mirror,
        ];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::InvalidParameter(format!("learning rates must be non-negative: {lrs:?}")));
        }
        if !(self.lr_position_final_factor > 0.0) {
            return Err(Error::InvalidParameter("position decay factor must be positive".into()));
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(Error::UnsupportedShDegree(self.sh_degree));
        }
        if !(self.mirror_threshold > 0.0 && self.mirror_threshold < 1.0) {
            return Err(Error::InvalidParameter("mirror threshold must lie in (0,1)".into()));
        }
        if !(self.ransac_inlier_fraction > 0.0) {
            return Err(Error::InvalidParameter("RANSAC inlier fraction must be positive".into()));
        }
        if !(self.plane_perturbation.abs() < 1.0) {
            return Err(Error::InvalidParameter("plane perturbation must be below 100%".into()));
        }
        self.weights.validate()
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { background: Vector3::from(self.background), ..RenderSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneState {
    /// Raw RANSAC result.
    pub fit: PlaneFit,
    /// Plane actually used for merging and the symmetry loss.
    pub plane: MirrorPlane,
    /// Scene bounding-box diagonal normalizing the symmetry loss.
    pub diagonal: f64,
    /// Sign of the observable half-space.
    pub front_sign: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub gaussians: Vec<Gaussian3D>,
    pub adam: Adam,
    pub iteration: usize,
    pub stage: Stage,
    pub plane: Option<PlaneState>,
    /// Radius of the camera rig, scaling position rates and the clone/split size.
    pub extent: f64,
    sh_len: usize,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
    rng: ChaCha8Rng,
}

/// 1.1 × the largest camera distance from the rig centroid.
pub fn camera_extent(centers: &[Vector3<f64>]) -> f64 {
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Mean distance to the (up to) three nearest other points.
fn mean_knn_distance(points: &[Vector3<f64>]) -> Vec<Option<f64>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64)
        })
        .collect()
}

pub fn init_from_points(
    points: &[Vector3<f64>],
    colors: &[Vector3<f64>],
    camera_centers: &[Vector3<f64>],
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidParameter("cannot initialize from an empty point set".into()));
    }
    if points.len() != colors.len() {
        return Err(Error::DimensionMismatch(format!("{} points but {} colors", points.len(), colors.len())));
    }
    let extent = camera_extent(camera_centers);
    let dists = mean_knn_distance(points);
    let gaussians: Vec<Gaussian3D> = points
        .iter()
        .zip(colors)
        .zip(dists)
        .map(|((p, c), d)| {
            let scale = d.unwrap_or(0.01 * extent).max(1e-7);
            Gaussian3D::isotropic(*p, scale, 0.1, *c, config.sh_degree)
        })
        .collect();
    let sh_len = sh::coeff_count(config.sh_degree);
    let n = gaussians.len();
    Ok(TrainState {
        adam: Adam::new(n * Gaussian3D::param_count(sh_len)),
        gaussians,
        iteration: 0,
        stage: Stage::One,
        plane: None,
        extent,
        sh_len,
        grad_accum: vec![0.0; n],
        grad_count: vec![0; n],
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_de45),
    })
}

impl TrainState {
    /// Wraps an existing Gaussian set (e.g. a checkpoint) with fresh optimizer state.
    pub fn from_gaussians(gaussians: Vec<Gaussian3D>, extent: f64, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let sh_len = sh::coeff_count(config.sh_degree);
        if let Some(g) = gaussians.iter().find(|g| g.sh.len() != sh_len) {
            return Err(Error::DimensionMismatch(format!("Gaussian has {} SH coefficients, config wants {sh_len}", g.sh.len())));
        }
        let n = gaussians.len();
        Ok(TrainState {
            adam: Adam::new(n * Gaussian3D::param_count(sh_len)),
            gaussians,
            iteration: 0,
            stage: Stage::One,
            plane: None,
            extent,
            sh_len,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_de45),
        })
    }

    pub fn stride(&self) -> usize {
        Gaussian3D::param_count(self.sh_len)
    }

    pub fn sh_len(&self) -> usize {
        self.sh_len
    }

    /// Optimizer and statistics buffers match the live Gaussian set.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.gaussians.len();
        if self.adam.len() != n * self.stride() || self.grad_accum.len() != n || self.grad_count.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "optimizer holds {} entries for {n} Gaussians of stride {}",
                self.adam.len(),
                self.stride()
            )));
        }
        Ok(())
    }

    fn learning_rates(&self, config: &TrainConfig) -> Vec<f64> {
        let stride = self.stride();
        let progress = (self.iteration as f64 / config.total_iters().max(1) as f64).min(1.0);
        let lr_pos = config.lr_position * self.extent * config.lr_position_final_factor.powf(progress);
        let mut row = vec![0.0; stride];
        row[param::MEAN..param::MEAN + 3].fill(lr_pos);
        row[param::ROTATION..param::ROTATION + 4].fill(config.lr_rotation);
        row[param::LOG_SCALE..param::LOG_SCALE + 3].fill(config.lr_scale);
        row[param::OPACITY] = config.lr_opacity;
        row[param::MIRROR] =
            if self.stage == Stage::Two && config.freeze_mirror_factors { 0.0 } else { config.lr_mirror };
        row[param::SH..].fill(config.lr_sh);
        let frozen = vec![0.0; stride];
        let mut lrs = Vec::with_capacity(stride * self.gaussians.len());
        for g in &self.gaussians {
            let skip = self.stage == Stage::Two && config.freeze_mirror_region && g.side == SideTag::MirrorRegion;
            lrs.extend_from_slice(if skip { &frozen } else { &row });
        }
        lrs
    }

    /// Gaussians to render for a view on the observable side: after the
    /// plane fit, everything strictly behind the plane is dropped.
    pub fn front_gaussians(&self) -> Vec<Gaussian3D> {
        front_subset(&self.gaussians, self.plane.as_ref())
    }
}

pub fn front_subset(gaussians: &[Gaussian3D], plane: Option<&PlaneState>) -> Vec<Gaussian3D> {
    match plane {
        None => gaussians.to_vec(),
        Some(p) => gaussians
            .iter()
            .filter(|g| crate::mirror::is_front(&p.plane, p.front_sign, &g.mean, p.eps))
            .cloned()
            .collect(),
    }
}

/// One optimization step on `frame`.
pub fn train_step(state: &mut TrainState, frame: &Frame, config: &TrainConfig) -> Result<LossReport> {
    frame.validate()?;
    state.check_shapes()?;
    let w = &config.weights;
    let settings = config.render_settings();
    let cam = &frame.camera;
    let diverged = |e: Error, it: usize| match e {
        Error::Divergence { detail, .. } => Error::Divergence { iteration: it, detail },
        other => other,
    };

    let (out, rs) = render_with_state(&state.gaussians, cam, RenderMode::Transmissive, &settings)?;
    let (l_rgb, g_rgb) = rgb_loss(&out.color, &frame.image, w.lambda_dssim)?;
    let mut grads = render_backward(&state.gaussians, cam, RenderMode::Transmissive, &settings, &rs, &g_rgb)?;

    let mut l_m = 0.0;
    if w.lambda_m > 0.0 {
        let (mout, ms) = render_with_state(&state.gaussians, cam, RenderMode::MirrorMask, &settings)?;
        let (lm, gm) = mask_loss(&mout.color.channel(0), &frame.mask)?;
        l_m = lm;
        let up = Image::from_fn(cam.width, cam.height, 3, |x, y, c| if c == 0 { w.lambda_m * gm.get(x, y, 0) } else { 0.0 });
        let mg = render_backward(&state.gaussians, cam, RenderMode::MirrorMask, &settings, &ms, &up)?;
        for (a, b) in grads.params.iter_mut().zip(&mg.params) {
            *a += b;
        }
    }

    let mut l_sym = 0.0;
    if let (Stage::Two, Some(p)) = (state.stage, state.plane.as_ref()) {
        let (ls, gs) = symmetry_loss(&state.gaussians, &p.plane, p.diagonal)?;
        l_sym = ls;
        if w.lambda_sym > 0.0 {
            let stride = grads.stride;
            for (i, g) in gs.iter().enumerate() {
                for a in 0..3 {
                    grads.params[i * stride + param::MEAN + a] += w.lambda_sym * g[a];
                }
            }
        }
    }

    let report = total_loss(l_rgb, l_m, l_sym, w).map_err(|e| diverged(e, state.iteration))?;

    let stride = state.stride();
    let mut flat = vec![0.0; stride * state.gaussians.len()];
    for (g, row) in state.gaussians.iter().zip(flat.chunks_mut(stride)) {
        g.write_params(row);
    }
    let lrs = state.learning_rates(config);
    state.adam.step(&mut flat, &grads.params, &lrs)?;
    for (g, row) in state.gaussians.iter_mut().zip(flat.chunks(stride)) {
        g.read_params(row);
        let n2: f64 = g.rotation.iter().map(|q| q * q).sum();
        if (n2 - 1.0).abs() > 1e-12 {
            g.normalize_rotation();
        }
    }
    for i in 0..state.gaussians.len() {
        if grads.visible[i] {
            state.grad_accum[i] += grads.mean2d_norm[i];
            state.grad_count[i] += 1;
        }
    }
    state.iteration += 1;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// near-transparent ones. New entries start with zero optimizer state.
pub fn densify_and_prune(state: &mut TrainState, config: &TrainConfig) -> Result<DensifyReport> {
    state.check_shapes()?;
    let n = state.gaussians.len();
    let pruned: Vec<bool> = state.gaussians.iter().map(|g| g.opacity() < config.prune_opacity_threshold).collect();
    let n_pruned = pruned.iter().filter(|&&p| p).count();
    let mut budget = config.max_gaussians.saturating_sub(n - n_pruned);
    let dense = config.percent_dense * state.extent;

    #[derive(Clone, Copy, PartialEq)]
    enum Grow {
        Keep,
        Clone,
        Split,
    }
    let mut grow = vec![Grow::Keep; n];
    for i in 0..n {
        if budget == 0 {
            break;
        }
        if pruned[i] || state.grad_count[i] == 0 {
            continue;
        }
        let avg = state.grad_accum[i] / state.grad_count[i] as f64;
        if avg >= config.densify_grad_threshold {
            grow[i] = if state.gaussians[i].scales().max() > dense { Grow::Split } else { Grow::Clone };
            budget -= 1;
        }
    }

    let mut report = DensifyReport { pruned: n_pruned, ..Default::default() };
    let mut kept = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut born = Vec::new();
    for i in 0..n {
        let g = &state.gaussians[i];
        match grow[i] {
            _ if pruned[i] => {}
            Grow::Keep => {
                kept.push(g.clone());
                sources.push(Some(i));
            }
            Grow::Clone => {
                kept.push(g.clone());
                sources.push(Some(i));
                born.push(g.clone());
                report.cloned += 1;
            }
            Grow::Split => {
                let rot = crate::gaussian::quat_to_matrix(&g.rotation);
                let s = g.scales();
                for _ in 0..2 {
                    let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut state.rng));
                    let mut child = g.clone();
                    child.mean = g.mean + rot * s.component_mul(&z);
                    child.log_scale = s.map(|v| (v * 0.6).ln());
                    born.push(child);
                }
                report.split += 1;
            }
        }
    }
    sources.extend(std::iter::repeat_n(None, born.len()));
    kept.extend(born);
    state.gaussians = kept;
    let stride = state.stride();
    state.adam.remap(stride, &sources);
    state.grad_accum = vec![0.0; state.gaussians.len()];
    state.grad_count = vec![0; state.gaussians.len()];
    state.check_shapes()?;
    Ok(report)
}

/// Ten-bin histogram of mirror factors, for fit diagnostics.
pub fn mirror_histogram(gaussians: &[Gaussian3D]) -> [usize; 10] {
    let mut h = [0; 10];
    for g in gaussians {
        h[((g.mirror_factor() * 10.0) as usize).min(9)] += 1;
    }
    h
}

/// Mirror-point selection plus RANSAC with the configured tolerances.
pub fn fit_plane(gaussians: &[Gaussian3D], config: &TrainConfig) -> Result<PlaneFit> {
    let points = select_mirror_points(gaussians, config.mirror_threshold)?;
    let diagonal = bbox_diagonal(gaussians.iter().map(|g| &g.mean));
    let tol = (config.ransac_inlier_fraction * diagonal).max(f64::MIN_POSITIVE);
    ransac_fit_plane(&points, config.ransac_iters, tol, config.seed).map_err(|e| match e {
        Error::FitFailure(m) => Error::FitFailure(format!(
            "{m}; {} of {} Gaussians exceed mirror threshold {}; mirror-factor histogram {:?}",
            points.len(),
            gaussians.len(),
            config.mirror_threshold,
            mirror_histogram(gaussians)
        )),
        other => other,
    })
}

fn plane_state(state: &TrainState, fit: PlaneFit, config: &TrainConfig, sign: f64) -> Result<PlaneState> {
    let plane = if config.plane_perturbation != 0.0 { fit.plane.perturbed(config.plane_perturbation)? } else { fit.plane };
    let diagonal = bbox_diagonal(state.gaussians.iter().map(|g| &g.mean)).max(f64::MIN_POSITIVE);
    Ok(PlaneState { fit, plane, diagonal, front_sign: sign, eps: PLANE_EPS_FRACTION * diagonal })
}

/// Fits the plane and replaces the Gaussian set with the merged scene.
pub fn transition_to_stage2(state: &mut TrainState, config: &TrainConfig, camera_centers: &[Vector3<f64>]) -> Result<()> {
    if state.stage == Stage::Two {
        return Err(Error::InvalidParameter("already in stage 2".into()));
    }
    let fit = fit_plane(&state.gaussians, config)?;
    let sign = front_sign(&fit.plane, camera_centers);
    let ps = plane_state(state, fit, config, sign)?;
    let merged = build_merged_scene(&state.gaussians, &ps.plane, camera_centers, ps.eps)?;
    let n = state.gaussians.len();
    let sources: Vec<Option<usize>> = (0..merged.len()).map(|k| (k < n).then_some(k)).collect();
    let stride = state.stride();
    state.adam.remap(stride, &sources);
    state.gaussians = merged;
    state.grad_accum = vec![0.0; state.gaussians.len()];
    state.grad_count = vec![0; state.gaussians.len()];
    state.plane = Some(ps);
    state.stage = Stage::Two;
    state.check_shapes()?;
    log::info!(
        "plane fit: normal {:?} offset {:.4} inliers {} rmse {:.2e}; merged scene has {} Gaussians",
        fit.plane.normal().as_slice(),
        fit.plane.offset(),
        fit.inliers,
        fit.fit_rmse,
        state.gaussians.len()
    );
    Ok(())
}

/// Refits the plane in stage 2; a failed refit keeps the previous plane.
pub fn refit_plane(state: &mut TrainState, config: &TrainConfig) -> Result<()> {
    let Some(old) = state.plane else {
        return Ok(());
    };
    match fit_plane(&state.gaussians, config) {
        Ok(fit) => {
            state.plane = Some(plane_state(state, fit, config, old.front_sign)?);
            Ok(())
        }
        Err(Error::FitFailure(m)) => {
            log::warn!("plane refit at iteration {} failed, keeping previous plane: {m}", state.iteration);
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Per-epoch seeded shuffle of frame indices.
#[derive(Debug, Clone)]
pub struct FrameOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl FrameOrder {
    pub fn new(count: usize, seed: u64) -> Self {
        FrameOrder { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..count).collect(), pos: count }
    }

    pub fn next_index(&mut self) -> usize {
        use rand::seq::SliceRandom;
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Runs the full schedule over `frames`, calling `on_step` after every iteration.
pub fn train(
    state: &mut TrainState,
    frames: &[Frame],
    camera_centers: &[Vector3<f64>],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::InvalidParameter("no training frames".into()));
    }
    let mut order = FrameOrder::new(frames.len(), config.seed);
    let total = config.total_iters();
    while state.iteration < total {
        if config.merge_stage2 && state.stage == Stage::One && state.iteration == config.stage1_iters {
            transition_to_stage2(state, config, camera_centers)?;
        }
        let frame = &frames[order.next_index()];
        let report = train_step(state, frame, config)?;
        on_step(state, &report)?;
        let it = state.iteration;
        if config.densify_interval > 0
            && it % config.densify_interval == 0
            && it >= config.densify_start
            && it < config.densify_stop
            && it != config.stage1_iters
        {
            let r = densify_and_prune(state, config)?;
            log::debug!("iteration {it}: cloned {} split {} pruned {} -> {}", r.cloned, r.split, r.pruned, state.gaussians.len());
        }
        if state.stage == Stage::Two
            && config.refit_interval > 0
            && it > config.stage1_iters
            && (it - config.stage1_iters) % config.refit_interval == 0
        {
            refit_plane(state, config)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::gaussian::logit;

    fn grid(n: usize, h: f64) -> Vec<Vector3<f64>> {
        (0..n * n).map(|i| Vector3::new((i % n) as f64 * h, (i / n) as f64 * h, 0.0)).collect()
    }

    #[test]
    fn init_single_point() {
        let s = init_from_points(&[Vector3::new(1.0, 2.0, 3.0)], &[Vector3::repeat(0.5)], &[], &TrainConfig::default()).unwrap();
        assert_eq!(s.gaussians.len(), 1);
        assert_eq!(s.gaussians[0].mean, Vector3::new(1.0, 2.0, 3.0));
        assert!(init_from_points(&[], &[], &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn init_grid_scales_are_log_spacing() {
        let pts = grid(6, 0.25);
        let cols = vec![Vector3::repeat(0.5); pts.len()];
        let s = init_from_points(&pts, &cols, &[], &TrainConfig::default()).unwrap();
        for (i, g) in s.gaussians.iter().enumerate() {
            let (x, y) = (i % 6, i / 6);
            if (1..5).contains(&x) && (1..5).contains(&y) {
                assert!((g.log_scale - Vector3::repeat(0.25f64.ln())).norm() < 1e-12);
            }
            assert!((g.opacity() - 0.1).abs() < 1e-12);
            assert!((g.mirror_factor() - 0.1).abs() < 1e-12);
            assert!(g.sh[0].norm() < 1e-15, "mid-gray has zero DC");
            assert!(g.sh[1..].iter().all(|c| *c == Vector3::zeros()));
        }
    }

    fn tiny_frame(target: &[Gaussian3D]) -> Frame {
        let camera = Camera::look_at(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), -Vector3::y(), 30.0, 16, 16).unwrap();
        let out = crate::raster::render(target, &camera, RenderMode::Transmissive, &RenderSettings::default()).unwrap();
        let mask = crate::raster::render(target, &camera, RenderMode::MirrorMask, &RenderSettings::default()).unwrap();
        Frame { id: "f".into(), image: out.color, mask: mask.color.channel(0), camera }
    }

    fn single() -> Vec<Gaussian3D> {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 0.2, 0.8, Vector3::new(0.7, 0.3, 0.2), 1);
        g.mirror_logit = logit(0.3);
        vec![g]
    }

    #[test]
    fn zero_learning_rates_leave_parameters() {
        let cfg = TrainConfig {
            lr_position: 0.0,
            lr_rotation: 0.0,
            lr_scale: 0.0,
            lr_opacity: 0.0,
            lr_sh: 0.0,
            lr_mirror: 0.0,
            ..Default::default()
        };
        let mut target = single();
        target[0].mean.x = 0.1;
        let frame = tiny_frame(&target);
        let mut s = TrainState::from_gaussians(single(), 1.0, &cfg).unwrap();
        let r = train_step(&mut s, &frame, &cfg).unwrap();
        assert!(r.l_rgb > 0.0);
        assert_eq!(s.gaussians, single());
    }

    #[test]
    fn matching_target_gives_zero_loss() {
        let cfg = TrainConfig { weights: LossWeights { lambda_m: 0.0, ..Default::default() }, ..Default::default() };
        let frame = tiny_frame(&single());
        let mut s = TrainState::from_gaussians(single(), 1.0, &cfg).unwrap();
        let r = train_step(&mut s, &frame, &cfg).unwrap();
        assert_eq!(r.l_rgb, 0.0);
        // Adam normalizes round-off gradients, so only the step bound holds.
        assert!(s.gaussians[0].mean.amax() <= cfg.lr_position * (1.0 + 1e-9));
    }

    #[test]
    fn divergence_reports_iteration() {
        let cfg = TrainConfig::default();
        let mut frame = tiny_frame(&single());
        frame.image.data[5] = f64::NAN;
        let mut s = TrainState::from_gaussians(single(), 1.0, &cfg).unwrap();
        s.iteration = 17;
        match train_step(&mut s, &frame, &cfg) {
            Err(Error::Divergence { iteration, .. }) => assert_eq!(iteration, 17),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn prune_transparent_gaussian() {
        let cfg = TrainConfig::default();
        let mut gs = single();
        gs.push(gs[0].clone());
        gs[1].opacity_logit = -1e3;
        let mut s = TrainState::from_gaussians(gs, 1.0, &cfg).unwrap();
        let r = densify_and_prune(&mut s, &cfg).unwrap();
        assert_eq!((r.pruned, s.gaussians.len()), (1, 1));
    }

    #[test]
    fn no_gradient_means_no_growth() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::from_gaussians(single(), 1.0, &cfg).unwrap();
        let r = densify_and_prune(&mut s, &cfg).unwrap();
        assert_eq!(r, DensifyReport::default());
        assert_eq!(s.gaussians.len(), 1);
    }

    #[test]
    fn split_and_clone_counts() {
        let cfg = TrainConfig { percent_dense: 0.1, ..Default::default() };
        let mut gs = single();
        let mut small = gs[0].clone();
        small.log_scale = Vector3::repeat(0.01f64.ln());
        gs.push(small);
        let mut s = TrainState::from_gaussians(gs, 1.0, &cfg).unwrap();
        s.grad_accum = vec![1.0, 1.0];
        s.grad_count = vec![1, 1];
        let r = densify_and_prune(&mut s, &cfg).unwrap();
        assert_eq!((r.split, r.cloned), (1, 1));
        // Large parent replaced by two children; small one kept plus a copy.
        assert_eq!(s.gaussians.len(), 4);
        assert!(s.gaussians[2..].iter().any(|g| (g.scales().x - 0.2 * 0.6).abs() < 1e-12));
        s.check_shapes().unwrap();
    }

    #[test]
    fn transition_without_mirror_points_fails_with_histogram() {
        let cfg = TrainConfig::default();
        let pts = grid(4, 0.3);
        let mut s = init_from_points(&pts, &vec![Vector3::repeat(0.5); 16], &[], &cfg).unwrap();
        match transition_to_stage2(&mut s, &cfg, &[Vector3::new(0.0, 0.0, 3.0)]) {
            Err(Error::FitFailure(m)) => assert!(m.contains("histogram"), "{m}"),
            other => panic!("expected fit failure, got {other:?}"),
        }
    }

    #[test]
    fn transition_recovers_plane_and_grows_scene() {
        let cfg = TrainConfig::default();
        let mut pts = grid(8, 0.2);
        let mut cols = vec![Vector3::repeat(0.5); pts.len()];
        let n_mirror = pts.len();
        pts.extend((0..10).map(|i| Vector3::new(0.1 * i as f64, 0.3, 0.5 + 0.05 * i as f64)));
        cols.extend(vec![Vector3::new(0.9, 0.1, 0.1); 10]);
        let mut s = init_from_points(&pts, &cols, &[], &cfg).unwrap();
        for g in &mut s.gaussians[..n_mirror] {
            g.mirror_logit = logit(0.95);
        }
        let before = s.gaussians.len();
        transition_to_stage2(&mut s, &cfg, &[Vector3::new(0.5, 0.5, 3.0)]).unwrap();
        let p = s.plane.unwrap();
        assert!(p.fit.plane.angle_to(&MirrorPlane::new(Vector3::z(), 0.0).unwrap()) < 1.0);
        assert!(s.gaussians.len() >= before);
        s.check_shapes().unwrap();
    }

    #[test]
    fn frame_order_is_a_permutation_per_epoch() {
        let mut o = FrameOrder::new(7, 3);
        let mut first: Vec<usize> = (0..7).map(|_| o.next_index()).collect();
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut again = FrameOrder::new(7, 3);
        let mut o2 = FrameOrder::new(7, 3);
        assert_eq!((0..20).map(|_| again.next_index()).collect::<Vec<_>>(), (0..20).map(|_| o2.next_index()).collect::<Vec<_>>());
    }
}
