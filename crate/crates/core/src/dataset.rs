//! On-disk scene layout:
//!
//! ```text
//! root/images/<id>.png      training images
//! root/masks/<id>.png       binary mirror masks
//! root/cameras.json         [{id, fx, fy, cx, cy, width, height, rotation, translation}]
//! root/points.ply           initial point cloud with colors
//! root/plane.json           optional ground-truth plane
//! root/detail_boxes.json    optional {held-out id: [x, y, w, h]}
//! root/heldout/images/<id>.png, root/heldout/cameras.json
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mirror::{MirrorPlane, PlaneRecord};
use crate::ply;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    /// RGB in `[0,1]`.
    pub image: Image,
    /// Single channel, values in `{0, 1}`.
    pub mask: Image,
    pub camera: Camera,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width != w || self.image.height != h || self.image.channels != 3 {
            return Err(Error::DimensionMismatch(format!(
                "frame {}: image is {}x{}x{}, camera is {w}x{h}",
                self.id, self.image.width, self.image.height, self.image.channels
            )));
        }
        if self.mask.width != w || self.mask.height != h || self.mask.channels != 1 {
            return Err(Error::DimensionMismatch(format!(
                "frame {}: mask is {}x{}, camera is {w}x{h}",
                self.id, self.mask.width, self.mask.height
            )));
        }
        Ok(())
    }
}

/// Pixel rectangle `[x, y, w, h]`.
pub type DetailBox = [usize; 4];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneDataset {
    pub train_frames: Vec<Frame>,
    /// Held-out frames carry all-zero masks.
    pub held_out_frames: Vec<Frame>,
    pub init_points: Vec<Vector3<f64>>,
    pub init_colors: Vec<Vector3<f64>>,
    pub gt_plane: Option<MirrorPlane>,
    pub detail_boxes: BTreeMap<String, DetailBox>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        for f in self.train_frames.iter().chain(&self.held_out_frames) {
            f.validate()?;
        }
        let train: HashSet<&str> = self.train_frames.iter().map(|f| f.id.as_str()).collect();
        if train.len() != self.train_frames.len() {
            return Err(Error::FrameMismatch("duplicate training frame ids".into()));
        }
        let mut held = HashSet::new();
        for f in &self.held_out_frames {
            if train.contains(f.id.as_str()) || !held.insert(f.id.as_str()) {
                return Err(Error::FrameMismatch(format!("frame id {} is not unique", f.id)));
            }
        }
        if self.init_points.len() != self.init_colors.len() {
            return Err(Error::DimensionMismatch("point and color counts differ".into()));
        }
        for (id, b) in &self.detail_boxes {
            let f = self
                .held_out_frames
                .iter()
                .find(|f| &f.id == id)
                .ok_or_else(|| Error::FrameMismatch(format!("detail box for unknown held-out frame {id}")))?;
            if b[2] == 0 || b[3] == 0 || b[0] + b[2] > f.camera.width || b[1] + b[3] > f.camera.height {
                return Err(Error::InvalidParameter(format!("detail box {b:?} outside frame {id}")));
            }
        }
        Ok(())
    }

    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.train_frames.iter().map(|f| f.camera.center()).collect()
    }

    /// Paints every mirror-mask pixel of the training images white.
    pub fn overlay_mirror_white(&mut self) {
        for f in &mut self.train_frames {
            for p in 0..f.mask.data.len() {
                if f.mask.data[p] >= 0.5 {
                    f.image.data[3 * p..3 * p + 3].fill(1.0);
                }
            }
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for d in ["images", "masks", "heldout/images"] {
            let p = root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.train_frames.par_iter().try_for_each(|f| {
            f.image.save_png(&root.join("images").join(format!("{}.png", f.id)))?;
            f.mask.save_png(&root.join("masks").join(format!("{}.png", f.id)))
        })?;
        self.held_out_frames
            .par_iter()
            .try_for_each(|f| f.image.save_png(&root.join("heldout/images").join(format!("{}.png", f.id))))?;
        write_cameras(&root.join("cameras.json"), &self.train_frames)?;
        write_cameras(&root.join("heldout/cameras.json"), &self.held_out_frames)?;
        ply::write_points(&root.join("points.ply"), &self.init_points, &self.init_colors)?;
        if let Some(p) = &self.gt_plane {
            let n = p.normal();
            PlaneRecord { normal: [n.x, n.y, n.z], offset: p.offset(), inliers: 0, fit_rmse: 0.0 }
                .save(&root.join("plane.json"))?;
        }
        if !self.detail_boxes.is_empty() {
            write_json(&root.join("detail_boxes.json"), &self.detail_boxes)?;
        }
        Ok(())
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_cameras(path: &Path, frames: &[Frame]) -> Result<()> {
    let recs: Vec<CameraRecord> = frames.iter().map(|f| CameraRecord::from_camera(f.id.clone(), &f.camera)).collect();
    write_json(path, &recs)
}

/// Cameras in file order, with their ids.
pub fn read_cameras(path: &Path) -> Result<Vec<(String, Camera)>> {
    let recs: Vec<CameraRecord> = read_json(path)?;
    recs.into_iter()
        .map(|r| {
            let cam = r.to_camera().map_err(|e| Error::format(path, e.to_string()))?;
            Ok((r.id, cam))
        })
        .collect()
}

fn load_frames(cameras: Vec<(String, Camera)>, images: &Path, masks: Option<&Path>) -> Result<Vec<Frame>> {
    cameras
        .into_par_iter()
        .map(|(id, camera)| {
            let image = Image::load_png(&images.join(format!("{id}.png")), 3)?;
            let mask = match masks {
                Some(dir) => {
                    let mut m = Image::load_png(&dir.join(format!("{id}.png")), 1)?;
                    m.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
                    m
                }
                None => Image::new(camera.width, camera.height, 1),
            };
            let frame = Frame { id, image, mask, camera };
            frame.validate()?;
            Ok(frame)
        })
        .collect()
}

pub fn load_dataset(root: &Path) -> Result<SceneDataset> {
    let masks = root.join("masks");
    if !masks.is_dir() {
        return Err(Error::MissingFile(masks));
    }
    let train_frames = load_frames(read_cameras(&root.join("cameras.json"))?, &root.join("images"), Some(&masks))?;
    let held_cams = root.join("heldout/cameras.json");
    let held_out_frames = if held_cams.exists() {
        load_frames(read_cameras(&held_cams)?, &root.join("heldout/images"), None)?
    } else {
        Vec::new()
    };
    let (init_points, init_colors) = ply::read_points(&root.join("points.ply"))?;
    let plane_path = root.join("plane.json");
    let gt_plane = if plane_path.exists() {
        Some(PlaneRecord::load(&plane_path)?.plane().map_err(|e| Error::format(&plane_path, e.to_string()))?)
    } else {
        None
    };
    let boxes_path = root.join("detail_boxes.json");
    let detail_boxes = if boxes_path.exists() { read_json(&boxes_path)? } else { BTreeMap::new() };
    let ds = SceneDataset { train_frames, held_out_frames, init_points, init_colors, gt_plane, detail_boxes };
    ds.validate()?;
    Ok(ds)
}
