use std::fs::File;
use std::path::Path;

use nalgebra::Vector3;
use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::image::Image;
use crate::mirror::{reflect_point, MirrorPlane};
use crate::ssim;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_sym: f64,
    pub lambda_dssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_m: 1.0, lambda_sym: 10.0, lambda_dssim: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.lambda_m) && ok(self.lambda_sym) && ok(self.lambda_dssim) && self.lambda_dssim <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("loss weights out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rgb: f64,
    pub l_m: f64,
    pub l_sym: f64,
    pub total: f64,
}

/// Mean absolute difference and its gradient with respect to `rendered`.
fn l1(rendered: &Image, target: &Image) -> (f64, Image) {
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height, rendered.channels);
    let mut sum = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (sum / n, grad)
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)/2` and its gradient with respect to `rendered`.
pub fn rgb_loss(rendered: &Image, target: &Image, lambda_dssim: f64) -> Result<(f64, Image)> {
    rendered.check_shape(target, "rgb loss")?;
    let (l1v, mut grad) = l1(rendered, target);
    let mut loss = (1.0 - lambda_dssim) * l1v;
    grad.data.iter_mut().for_each(|g| *g *= 1.0 - lambda_dssim);
    if lambda_dssim > 0.0 {
        let (s, sg) = ssim::ssim_with_grad(rendered, target)?;
        loss += lambda_dssim * (1.0 - s) / 2.0;
        for (g, d) in grad.data.iter_mut().zip(&sg.data) {
            *g -= lambda_dssim * 0.5 * d;
        }
    }
    Ok((loss, grad))
}

/// L1 between a rendered grayscale mask and the binary ground truth.
pub fn mask_loss(rendered_mask: &Image, gt_mask: &Image) -> Result<(f64, Image)> {
    rendered_mask.check_shape(gt_mask, "mask loss")?;
    Ok(l1(rendered_mask, gt_mask))
}

/// Mean distance from every center to the nearest reflected center,
/// normalized by `diagonal`, with gradients for every center.
///
/// Each query's gradient goes to itself and to the center whose reflection it
/// matched. Ties pick the lowest index.
pub fn symmetry_loss(
    merged: &[Gaussian3D],
    plane: &MirrorPlane,
    diagonal: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if merged.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if !(diagonal > 0.0 && diagonal.is_finite()) {
        return Err(Error::InvalidParameter(format!("normalization diagonal {diagonal} must be positive")));
    }
    let t = plane.transform();
    let h = t.linear();
    let reflected: Vec<Vector3<f64>> = merged.iter().map(|g| reflect_point(&g.mean, &t)).collect();
    let coords: Vec<[f64; 3]> = reflected.iter().map(|r| [r.x, r.y, r.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords);
    let matches: Vec<(usize, f64)> = merged
        .par_iter()
        .map(|g| {
            let q = [g.mean.x, g.mean.y, g.mean.z];
            let nn = tree.nearest_one::<SquaredEuclidean>(&q);
            let j = tree
                .within_unsorted::<SquaredEuclidean>(&q, nn.distance)
                .iter()
                .filter(|c| c.distance == nn.distance)
                .map(|c| c.item)
                .min()
                .unwrap_or(nn.item) as usize;
            (j, (g.mean - reflected[j]).norm())
        })
        .collect();
    let scale = 1.0 / (merged.len() as f64 * diagonal);
    let mut grads = vec![Vector3::zeros(); merged.len()];
    let mut sum = 0.0;
    for (i, &(j, d)) in matches.iter().enumerate() {
        sum += d;
        if d > 0.0 {
            let u = (merged[i].mean - reflected[j]) / d;
            grads[i] += u * scale;
            grads[j] -= h * u * scale;
        }
    }
    Ok((sum * scale, grads))
}

/// `l_rgb + λ_m·l_m + λ_sym·l_sym`; non-finite components are divergence.
pub fn total_loss(l_rgb: f64, l_m: f64, l_sym: f64, w: &LossWeights) -> Result<LossReport> {
    if !(l_rgb.is_finite() && l_m.is_finite() && l_sym.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            detail: format!("non-finite loss component (rgb {l_rgb}, mask {l_m}, sym {l_sym})"),
        });
    }
    let total = l_rgb + w.lambda_m * l_m + w.lambda_sym * l_sym;
    Ok(LossReport { l_rgb, l_m, l_sym, total })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub l_rgb: f64,
    pub l_m: f64,
    pub l_sym: f64,
    pub total: f64,
    pub gaussian_count: usize,
}

/// Appends one CSV row per training iteration.
pub struct LossLog {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(LossLog { writer, path: path.to_path_buf() })
    }

    pub fn append(&mut self, iteration: usize, r: &LossReport, gaussian_count: usize) -> Result<()> {
        let row = LogRow { iteration, l_rgb: r.l_rgb, l_m: r.l_m, l_sym: r.l_sym, total: r.total, gaussian_count };
        self.writer.serialize(row).map_err(|e| Error::format(&self.path, e.to_string()))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}
