//! End-to-end runs: ablation setup, training with logging, and rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::image::Image;
use crate::loss::{LossLog, LossReport};
use crate::mirror::{PlaneFit, PlaneRecord};
use crate::raster::{render, RenderMode, RenderSettings};
use crate::train::{front_subset, init_from_points, train, PlaneState, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Mirror pixels painted white; no plane fit or merging.
    NoReflection,
    /// Relative error injected into every fitted plane.
    PlaneError(f64),
    /// Symmetry loss weight set to zero.
    NoSymLoss,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::None => f.write_str("none"),
            Ablation::NoReflection => f.write_str("no-reflection"),
            Ablation::PlaneError(p) => write!(f, "plane-error={p}"),
            Ablation::NoSymLoss => f.write_str("no-sym-loss"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-reflection" => Ok(Ablation::NoReflection),
            "no-sym-loss" => Ok(Ablation::NoSymLoss),
            _ => match s.strip_prefix("plane-error=") {
                Some(p) => {
                    let v: f64 = p.parse().map_err(|_| Error::InvalidParameter(format!("bad plane error {p:?}")))?;
                    if !(v.is_finite() && v.abs() < 1.0) {
                        return Err(Error::InvalidParameter(format!("plane error {v} must lie in (-1, 1)")));
                    }
                    Ok(Ablation::PlaneError(v))
                }
                None => Err(Error::InvalidParameter(format!(
                    "unknown ablation {s:?} (expected none, no-reflection, plane-error=P, no-sym-loss)"
                ))),
            },
        }
    }
}

impl Ablation {
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Ablation::None => {}
            Ablation::NoReflection => c.merge_stage2 = false,
            Ablation::PlaneError(p) => c.plane_perturbation = p,
            Ablation::NoSymLoss => c.weights.lambda_sym = 0.0,
        }
        c
    }

    /// Dataset pre-pass; only no-reflection alters the inputs.
    pub fn prepare(self, ds: &SceneDataset) -> SceneDataset {
        let mut out = ds.clone();
        if self == Ablation::NoReflection {
            out.overlay_mirror_white();
        }
        out
    }
}

/// Trains on `ds` with `config` as given. When `out_dir` is set, writes
/// `train_log.csv`, `model.ply` with its sidecar and, after a plane fit,
/// `plane.json` (plane in use) and `plane_fit.json` (raw fit).
pub fn run_training(
    ds: &SceneDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&TrainState, &LossReport),
) -> Result<TrainState> {
    ds.validate()?;
    let centers = ds.camera_centers();
    let mut state = init_from_points(&ds.init_points, &ds.init_colors, &centers, config)?;
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(LossLog::create(&d.join("train_log.csv"))?)
        }
        None => None,
    };
    train(&mut state, &ds.train_frames, &centers, config, |s, r| {
        if let Some(l) = log.as_mut() {
            l.append(s.iteration - 1, r, s.gaussians.len())?;
        }
        progress(s, r);
        Ok(())
    })?;
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Some(d) = out_dir {
        save_checkpoint(&d.join("model.ply"), &Checkpoint::from_state(&state, config))?;
        if let Some(p) = &state.plane {
            write_plane_files(d, p)?;
        }
    }
    Ok(state)
}

pub fn write_plane_files(dir: &Path, p: &PlaneState) -> Result<()> {
    PlaneRecord::from_fit(&PlaneFit { plane: p.plane, ..p.fit }).save(&dir.join("plane.json"))?;
    PlaneRecord::from_fit(&p.fit).save(&dir.join("plane_fit.json"))
}

/// Renders each camera. With `mirror_removed`, Gaussians behind the plane
/// are dropped, as for views captured after taking the mirror away.
pub fn render_views(
    gaussians: &[Gaussian3D],
    plane: Option<&PlaneState>,
    cameras: &[(String, Camera)],
    settings: &RenderSettings,
    mirror_removed: bool,
) -> Result<BTreeMap<String, Image>> {
    let visible = if mirror_removed { front_subset(gaussians, plane) } else { gaussians.to_vec() };
    cameras
        .par_iter()
        .map(|(id, cam)| Ok((id.clone(), render(&visible, cam, RenderMode::Transmissive, settings)?.color)))
        .collect()
}

/// Held-out renders for a trained state.
pub fn render_heldout(state: &TrainState, ds: &SceneDataset, config: &TrainConfig) -> Result<BTreeMap<String, Image>> {
    let cams: Vec<(String, Camera)> = ds.held_out_frames.iter().map(|f| (f.id.clone(), f.camera.clone())).collect();
    render_views(&state.gaussians, state.plane.as_ref(), &cams, &config.render_settings(), true)
}

/// Mirror-probability masks for every training frame.
pub fn render_masks(gaussians: &[Gaussian3D], ds: &SceneDataset, settings: &RenderSettings) -> Result<Vec<Image>> {
    ds.train_frames
        .par_iter()
        .map(|f| Ok(render(gaussians, &f.camera, RenderMode::MirrorMask, settings)?.color.channel(0)))
        .collect()
}

/// Intersection over union of `pred > threshold` against a binary mask.
pub fn mask_iou(pred: &Image, gt: &Image, threshold: f64) -> Result<f64> {
    pred.check_shape(gt, "mask IoU")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (*p > threshold, *g >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
