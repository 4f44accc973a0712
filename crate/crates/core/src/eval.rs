//! Image-quality metrics over full frames and detail crops.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DetailBox, Frame};
use crate::error::{Error, Result};
use crate::image::Image;

/// Reported for identical images, where PSNR is unbounded.
pub const PSNR_SENTINEL: f64 = 99.0;

/// `10·log10(1/MSE)`, capped at [`PSNR_SENTINEL`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b, "psnr")?;
    if a.data.is_empty() {
        return Err(Error::DimensionMismatch("psnr of empty images".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_SENTINEL))
}

/// Mean windowed SSIM over valid windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    crate::ssim::ssim(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    FullScene,
    DetailView,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::FullScene => "full_scene",
            Scope::DetailView => "detail_view",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub frame_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scope: Scope,
    /// Sorted by frame id.
    pub frames: Vec<FrameMetric>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    fn from_frames(scope: Scope, mut frames: Vec<FrameMetric>) -> Self {
        frames.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
        let n = frames.len().max(1) as f64;
        let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        MetricReport { scope, frames, mean_psnr, mean_ssim }
    }
}

fn crop_box(img: &Image, b: &DetailBox) -> Result<Image> {
    img.crop(b[0], b[1], b[2], b[3])
}

/// Full-scene metrics, plus detail-view metrics over the boxes when given.
///
/// Renders are matched to frames by id; the id sets must agree exactly.
pub fn evaluate(
    renders: &BTreeMap<String, Image>,
    frames: &[Frame],
    boxes: Option<&BTreeMap<String, DetailBox>>,
) -> Result<(MetricReport, Option<MetricReport>)> {
    let mut missing: Vec<&str> = frames.iter().filter(|f| !renders.contains_key(&f.id)).map(|f| f.id.as_str()).collect();
    let known: std::collections::HashSet<&str> = frames.iter().map(|f| f.id.as_str()).collect();
    let extra: Vec<&str> = renders.keys().map(String::as_str).filter(|id| !known.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort();
        return Err(Error::FrameMismatch(format!("no render for {missing:?}; no frame for {extra:?}")));
    }
    if let Some(b) = boxes {
        if let Some(f) = frames.iter().find(|f| !b.contains_key(&f.id)) {
            return Err(Error::FrameMismatch(format!("no detail box for frame {}", f.id)));
        }
    }
    let rows: Vec<(FrameMetric, Option<FrameMetric>)> = frames
        .par_iter()
        .map(|f| {
            let r = &renders[&f.id];
            r.check_shape(&f.image, &format!("render of {}", f.id))?;
            let full = FrameMetric { frame_id: f.id.clone(), psnr: psnr(r, &f.image)?, ssim: ssim(r, &f.image)? };
            let detail = match boxes {
                Some(b) => {
                    let (rc, gc) = (crop_box(r, &b[&f.id])?, crop_box(&f.image, &b[&f.id])?);
                    Some(FrameMetric { frame_id: f.id.clone(), psnr: psnr(&rc, &gc)?, ssim: ssim(&rc, &gc)? })
                }
                None => None,
            };
            Ok((full, detail))
        })
        .collect::<Result<_>>()?;
    let (full, detail): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let full = MetricReport::from_frames(Scope::FullScene, full);
    let detail = boxes.map(|_| MetricReport::from_frames(Scope::DetailView, detail.into_iter().flatten().collect()));
    Ok((full, detail))
}

/// One row per frame and scope. The `lpips` column is reserved and empty.
pub fn write_csv(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["frame_id", "scope", "psnr", "ssim", "lpips"]).map_err(fail)?;
    for r in reports {
        for f in &r.frames {
            w.write_record([f.frame_id.as_str(), r.scope.as_str(), &f.psnr.to_string(), &f.ssim.to_string(), ""])
                .map_err(fail)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeSummary {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub frames: usize,
}

pub fn summary(reports: &[&MetricReport]) -> BTreeMap<String, ScopeSummary> {
    reports
        .iter()
        .map(|r| {
            (r.scope.as_str().to_string(), ScopeSummary { mean_psnr: r.mean_psnr, mean_ssim: r.mean_ssim, frames: r.frames.len() })
        })
        .collect()
}

pub fn write_summary(path: &Path, reports: &[&MetricReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(&summary(reports)).expect("summary serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plain-text comparison table, one row per named run.
pub fn format_table(runs: &[(String, MetricReport, Option<MetricReport>)]) -> String {
    let width = runs.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:width$}  {:>9}  {:>9}  {:>11}  {:>11}", "run", "full PSNR", "full SSIM", "detail PSNR", "detail SSIM");
    for (name, full, detail) in runs {
        let (dp, ds) = match detail {
            Some(d) => (format!("{:.3}", d.mean_psnr), format!("{:.4}", d.mean_ssim)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(out, "{name:width$}  {:>9.3}  {:>9.4}  {dp:>11}  {ds:>11}", full.mean_psnr, full.mean_ssim);
    }
    out
}

/// Ground truth, render and absolute difference side by side.
pub fn comparison_strip(gt: &Image, render: &Image) -> Result<Image> {
    gt.check_shape(render, "comparison strip")?;
    let (w, h, c) = (gt.width, gt.height, gt.channels);
    Ok(Image::from_fn(3 * w, h, c, |x, y, ch| {
        let (panel, xx) = (x / w, x % w);
        match panel {
            0 => gt.get(xx, y, ch),
            1 => render.get(xx, y, ch),
            _ => (gt.get(xx, y, ch) - render.get(xx, y, ch)).abs(),
        }
    }))
}
