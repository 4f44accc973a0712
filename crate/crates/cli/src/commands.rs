use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mirror_splat::checkpoint::{json_hash, load_checkpoint, Checkpoint};
use mirror_splat::dataset::{load_dataset, read_cameras, Frame};
use mirror_splat::eval::{comparison_strip, evaluate, format_table, write_csv, write_summary, MetricReport};
use mirror_splat::mirror::PlaneRecord;
use mirror_splat::pipeline::{render_views, run_training, Ablation};
use mirror_splat::synthetic::{generate_synthetic, SyntheticSpec};
use mirror_splat::train::{fit_plane, TrainConfig};
use mirror_splat::{Error, Image, RenderSettings};

use crate::manifest::RunManifest;
use crate::{Cli, Command, ConvertArgs, EvalArgs, FitPlaneArgs, GenerateArgs, RenderArgs, Split, TrainArgs};

/// 1 usage, 3 numerical failure, 2 for data errors and anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidParameter(_) | Error::UnsupportedShDegree(_)) => 1,
        Some(Error::Divergence { .. } | Error::DegenerateGaussian(_)) => 3,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a, cli.threads),
        Command::Train(a) => train(a, cli.threads),
        Command::Render(a) => render(a, cli.threads),
        Command::Eval(a) => eval(a, cli.threads),
        Command::FitPlane(a) => fit(a),
        Command::ConvertColmap(a) => convert(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidParameter(msg.into()).into()
}

/// Reads a JSON config whose schema matches `T`; unknown keys are rejected.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?)
}

fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

/// Runs `body`, then writes the manifest whatever the outcome.
fn with_manifest(
    dir: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut Vec<PathBuf>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let mut outputs = Vec::new();
    let result = body(&mut outputs);
    manifest.outputs = outputs;
    let status = match &result {
        Ok(()) => "success".to_string(),
        Err(e) => format!("failed: {e:#}"),
    };
    manifest.finish(dir, status)?;
    result
}

fn begin<T: Serialize>(command: &str, config: &T, seed: u64, threads: Option<usize>) -> anyhow::Result<RunManifest> {
    let value = serde_json::to_value(config)?;
    Ok(RunManifest::begin(command, value, json_hash(config), seed, threads))
}

fn generate(a: &GenerateArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let mut spec: SyntheticSpec = read_config(a.config.as_deref())?;
    set(&mut spec.width, a.width);
    set(&mut spec.height, a.height);
    set(&mut spec.train_cameras, a.cameras);
    set(&mut spec.heldout_cameras, a.heldout);
    set(&mut spec.mirror_yaw_deg, a.mirror_yaw);
    set(&mut spec.mirror_distance, a.mirror_distance);
    set(&mut spec.face_grid, a.face_grid);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = begin("generate", &spec, a.seed, threads)?;
    with_manifest(&a.out, manifest, |outputs| {
        let scene = generate_synthetic(&spec, a.seed)?;
        scene.dataset.save(&a.out)?;
        log::info!(
            "wrote {} training and {} held-out frames, {} init points to {}",
            scene.dataset.train_frames.len(),
            scene.dataset.held_out_frames.len(),
            scene.dataset.init_points.len(),
            a.out.display()
        );
        outputs.push(a.out.clone());
        Ok(())
    })
}

#[derive(Serialize)]
struct TrainRun<'a> {
    data: &'a Path,
    ablation: String,
    train: &'a TrainConfig,
}

fn train(a: &TrainArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let ablation: Ablation = a.ablate.parse()?;
    let mut base: TrainConfig = read_config(a.config.as_deref())?;
    set(&mut base.seed, a.seed);
    set(&mut base.stage1_iters, a.stage1_iters);
    set(&mut base.stage2_iters, a.stage2_iters);
    set(&mut base.weights.lambda_m, a.lambda_m);
    set(&mut base.weights.lambda_sym, a.lambda_sym);
    set(&mut base.sh_degree, a.sh_degree);
    set(&mut base.max_gaussians, a.max_gaussians);
    set(&mut base.refit_interval, a.refit_interval);
    if a.train_mirror_factors {
        base.freeze_mirror_factors = false;
    }
    let config = ablation.configure(&base);
    config.validate()?;
    let run = TrainRun { data: &a.data, ablation: ablation.to_string(), train: &config };
    let manifest = begin("train", &run, config.seed, threads)?;
    with_manifest(&a.out, manifest, |outputs| {
        let ds = ablation.prepare(&load_dataset(&a.data)?);
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let text = serde_json::to_string_pretty(&config)?;
        std::fs::write(a.out.join("config.json"), text).context("writing config.json")?;
        outputs.push(a.out.join("config.json"));
        let total = config.total_iters();
        let state = run_training(&ds, &config, Some(&a.out), |s, r| {
            if s.iteration % 500 == 0 || s.iteration == total {
                log::info!(
                    "iter {}/{} {:?} n={} rgb={:.5} mask={:.5} sym={:.5}",
                    s.iteration,
                    total,
                    s.stage,
                    s.gaussians.len(),
                    r.l_rgb,
                    r.l_m,
                    r.l_sym
                );
            }
        })?;
        outputs.extend(["train_log.csv", "model.ply", "model.json"].map(|f| a.out.join(f)));
        if let Some(p) = &state.plane {
            let n = p.plane.normal();
            log::info!("plane n=({:.4}, {:.4}, {:.4}) d={:.4} inliers={}", n.x, n.y, n.z, p.plane.offset(), p.fit.inliers);
            outputs.extend(["plane.json", "plane_fit.json"].map(|f| a.out.join(f)));
        }
        Ok(())
    })
}

fn render_settings(v: &Option<Vec<f64>>) -> anyhow::Result<([f64; 3], RenderSettings)> {
    let mut bg = [0.0; 3];
    if let Some(b) = v {
        if b.len() != 3 || b.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(usage(format!("background {b:?} must be three values in [0,1]")));
        }
        bg.copy_from_slice(b);
    }
    Ok((bg, TrainConfig { background: bg, ..TrainConfig::default() }.render_settings()))
}

#[derive(Serialize)]
struct RenderRun<'a> {
    checkpoint: &'a Path,
    cameras: &'a Path,
    mirror_removed: bool,
    background: [f64; 3],
}

fn render(a: &RenderArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let (background, settings) = render_settings(&a.background)?;
    let run = RenderRun { checkpoint: &a.checkpoint, cameras: &a.cameras, mirror_removed: a.mirror_removed, background };
    let manifest = begin("render", &run, 0, threads)?;
    with_manifest(&a.out, manifest, |outputs| {
        let ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
        let plane = ckpt.plane_state()?;
        if a.mirror_removed && plane.is_none() {
            log::warn!("checkpoint has no plane; --mirror-removed renders every Gaussian");
        }
        let cams = read_cameras(&a.cameras)?;
        let images = render_views(&ckpt.gaussians, plane.as_ref(), &cams, &settings, a.mirror_removed)?;
        std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        for (id, img) in &images {
            let path = a.out.join(format!("{id}.png"));
            img.save_png(&path)?;
            outputs.push(path);
        }
        log::info!("rendered {} views from {} Gaussians", images.len(), ckpt.gaussians.len());
        Ok(())
    })
}

/// `<id>.png` files in a render directory, keyed by id.
fn load_renders(dir: &Path) -> anyhow::Result<BTreeMap<String, Image>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()).into());
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            let id = path.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?.to_string();
            out.insert(id, Image::load_png(&path, 3)?);
        }
    }
    Ok(out)
}

/// Distinct display names for the render directories.
fn run_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        let base = d.file_name().and_then(|s| s.to_str()).unwrap_or("renders").to_string();
        let name = if names.contains(&base) { format!("{base}_{i}") } else { base };
        names.push(name);
    }
    names
}

#[derive(Serialize)]
struct EvalRun<'a> {
    data: &'a Path,
    renders: &'a [PathBuf],
    detail: bool,
    strips: bool,
    split: &'static str,
}

fn eval(a: &EvalArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let split = match a.split {
        Split::Heldout => "heldout",
        Split::Train => "train",
    };
    let run = EvalRun { data: &a.data, renders: &a.renders, detail: a.detail, strips: a.strips, split };
    let manifest = begin("eval", &run, 0, threads)?;
    with_manifest(&a.out, manifest, |outputs| {
        let ds = load_dataset(&a.data)?;
        let frames: &[Frame] = match a.split {
            Split::Heldout => &ds.held_out_frames,
            Split::Train => &ds.train_frames,
        };
        if frames.is_empty() {
            bail!(Error::FrameMismatch(format!("dataset has no {split} frames")));
        }
        let boxes = if a.detail {
            if ds.detail_boxes.is_empty() {
                bail!(Error::MissingFile(a.data.join("detail_boxes.json")));
            }
            Some(&ds.detail_boxes)
        } else {
            None
        };
        let mut table: Vec<(String, MetricReport, Option<MetricReport>)> = Vec::new();
        for (dir, name) in a.renders.iter().zip(run_names(&a.renders)) {
            let renders = load_renders(dir)?;
            let (full, detail) = evaluate(&renders, frames, boxes).with_context(|| format!("scoring {}", dir.display()))?;
            let run_dir = a.out.join(&name);
            std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            let reports: Vec<&MetricReport> = std::iter::once(&full).chain(detail.as_ref()).collect();
            write_csv(&run_dir.join("metrics.csv"), &reports)?;
            write_summary(&run_dir.join("summary.json"), &reports)?;
            outputs.extend([run_dir.join("metrics.csv"), run_dir.join("summary.json")]);
            if a.strips {
                let strip_dir = run_dir.join("strips");
                std::fs::create_dir_all(&strip_dir).map_err(|e| Error::io(&strip_dir, e))?;
                for f in frames {
                    comparison_strip(&f.image, &renders[&f.id])?.save_png(&strip_dir.join(format!("{}.png", f.id)))?;
                }
                outputs.push(strip_dir);
            }
            table.push((name, full, detail));
        }
        let text = format_table(&table);
        print!("{text}");
        std::fs::write(a.out.join("table.txt"), &text).context("writing table.txt")?;
        outputs.push(a.out.join("table.txt"));
        Ok(())
    })
}

fn fit(a: &FitPlaneArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let config = TrainConfig {
        mirror_threshold: a.threshold,
        ransac_iters: a.iters,
        ransac_inlier_fraction: a.inlier_fraction,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let fit = fit_plane(&ckpt.gaussians, &config)?;
    let rec = PlaneRecord::from_fit(&fit);
    println!("{}", serde_json::to_string_pretty(&rec)?);
    if let Some(out) = &a.out {
        rec.save(out)?;
    }
    Ok(())
}

fn convert(a: &ConvertArgs) -> anyhow::Result<()> {
    let n = mirror_splat::colmap::convert_colmap(&a.sparse, &a.out)?;
    log::info!("converted {n} cameras to {}", a.out.display());
    Ok(())
}
