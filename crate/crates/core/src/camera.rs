use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera. `rotation`/`translation` map world points into camera
/// space (`p_cam = R p + t`); the camera looks down +z with +y pointing down
/// the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be at least 1x1".into()));
        }
        let ortho = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if !(ortho < 1e-9) || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "camera rotation is not a proper orthonormal matrix".into(),
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.cx.is_finite() || !self.cy.is_finite()
        {
            return Err(Error::InvalidParameter("non-finite camera parameters".into()));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (pixel centers at `i + 0.5`).
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world up
    /// direction (image rows grow against it).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::InvalidParameter("eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidParameter("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Camera {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// On-disk camera record (one entry of `cameras.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(id: impl Into<String>, cam: &Camera) -> Self {
        let r = &cam.rotation;
        CameraRecord {
            id: id.into(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let r = &self.rotation;
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: Vector3::from(self.translation),
        };
        cam.validate()
            .map_err(|e| Error::InvalidParameter(format!("camera {}: {e}", self.id)))?;
        Ok(cam)
    }
}
