//! Checkpoints: Gaussians as PLY plus a JSON sidecar with training metadata.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::mirror::{MirrorPlane, PlaneFit};
use crate::ply;
use crate::sh;
use crate::train::{PlaneState, Stage, TrainConfig, TrainState};

/// Hex SHA-256 of a value's JSON serialization.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("hashable value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn config_hash(config: &TrainConfig) -> String {
    json_hash(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneMeta {
    /// Plane in use (after any injected error).
    pub normal: [f64; 3],
    pub offset: f64,
    /// Raw RANSAC output.
    pub fitted_normal: [f64; 3],
    pub fitted_offset: f64,
    pub inliers: usize,
    pub fit_rmse: f64,
    pub diagonal: f64,
    pub front_sign: f64,
    pub eps: f64,
}

impl PlaneMeta {
    pub fn from_state(p: &PlaneState) -> Self {
        let (n, f) = (p.plane.normal(), p.fit.plane.normal());
        PlaneMeta {
            normal: [n.x, n.y, n.z],
            offset: p.plane.offset(),
            fitted_normal: [f.x, f.y, f.z],
            fitted_offset: p.fit.plane.offset(),
            inliers: p.fit.inliers,
            fit_rmse: p.fit.fit_rmse,
            diagonal: p.diagonal,
            front_sign: p.front_sign,
            eps: p.eps,
        }
    }

    pub fn to_state(&self) -> Result<PlaneState> {
        Ok(PlaneState {
            fit: PlaneFit {
                plane: MirrorPlane::new(Vector3::from(self.fitted_normal), self.fitted_offset)?,
                inliers: self.inliers,
                fit_rmse: self.fit_rmse,
            },
            plane: MirrorPlane::new(Vector3::from(self.normal), self.offset)?,
            diagonal: self.diagonal,
            front_sign: self.front_sign,
            eps: self.eps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub stage: Stage,
    pub sh_degree: usize,
    pub gaussian_count: usize,
    pub extent: f64,
    pub config_hash: String,
    pub plane: Option<PlaneMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub gaussians: Vec<Gaussian3D>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Self {
        Checkpoint {
            gaussians: state.gaussians.clone(),
            meta: CheckpointMeta {
                iteration: state.iteration,
                stage: state.stage,
                sh_degree: config.sh_degree,
                gaussian_count: state.gaussians.len(),
                extent: state.extent,
                config_hash: config_hash(config),
                plane: state.plane.as_ref().map(PlaneMeta::from_state),
            },
        }
    }

    pub fn plane_state(&self) -> Result<Option<PlaneState>> {
        self.meta.plane.as_ref().map(PlaneMeta::to_state).transpose()
    }
}

pub fn sidecar_path(ply_path: &Path) -> PathBuf {
    ply_path.with_extension("json")
}

pub fn save_checkpoint(ply_path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ply::write_gaussians(ply_path, &ckpt.gaussians, sh::coeff_count(ckpt.meta.sh_degree))?;
    let side = sidecar_path(ply_path);
    let text = serde_json::to_string_pretty(&ckpt.meta).expect("metadata serializes");
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(ply_path: &Path) -> Result<Checkpoint> {
    if !ply_path.exists() {
        return Err(Error::MissingFile(ply_path.to_path_buf()));
    }
    let gaussians = ply::read_gaussians(ply_path)?;
    let side = sidecar_path(ply_path);
    if !side.exists() {
        return Err(Error::MissingFile(side));
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.gaussian_count != gaussians.len() {
        return Err(Error::format(
            &side,
            format!("sidecar lists {} Gaussians, PLY holds {}", meta.gaussian_count, gaussians.len()),
        ));
    }
    Ok(Checkpoint { gaussians, meta })
}
