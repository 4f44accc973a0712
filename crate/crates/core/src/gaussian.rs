//! The Gaussian primitive and its covariance / density math.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh;

/// Floor applied to `exp(log_scale)` before building a covariance.
pub const SCALE_FLOOR: f64 = 1e-7;

/// Role of a Gaussian in the merged symmetric scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SideTag {
    /// Directly observed, in front of the mirror.
    #[default]
    Real,
    /// Virtual content behind the mirror plane.
    MirrorRegion,
    /// Reflection of a `Real` Gaussian, placed behind the plane.
    ReflectedReal,
    /// Reflection of a `MirrorRegion` Gaussian, placed in front of the plane.
    ReflectedMirror,
}

impl SideTag {
    pub fn as_u8(self) -> u8 {
        match self {
            SideTag::Real => 0,
            SideTag::MirrorRegion => 1,
            SideTag::ReflectedReal => 2,
            SideTag::ReflectedMirror => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => SideTag::Real,
            1 => SideTag::MirrorRegion,
            2 => SideTag::ReflectedReal,
            3 => SideTag::ReflectedMirror,
            _ => return None,
        })
    }

    /// Tag carried by the reflection of a Gaussian with this tag.
    pub fn reflected(self) -> Self {
        match self {
            SideTag::Real => SideTag::ReflectedReal,
            SideTag::MirrorRegion => SideTag::ReflectedMirror,
            SideTag::ReflectedReal => SideTag::Real,
            SideTag::ReflectedMirror => SideTag::MirrorRegion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; unit length after every optimizer step.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// RGB spherical-harmonic coefficients, `(degree + 1)^2` entries.
    pub sh: Vec<Vector3<f64>>,
    pub mirror_logit: f64,
    pub side: SideTag,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian3D {
    /// Isotropic Gaussian with a constant color and all higher SH bands zero.
    pub fn isotropic(
        mean: Vector3<f64>,
        scale: f64,
        opacity: f64,
        color: Vector3<f64>,
        sh_degree: usize,
    ) -> Self {
        let mut sh = vec![Vector3::zeros(); sh::coeff_count(sh_degree)];
        sh[0] = sh::rgb_to_dc(&color);
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh,
            mirror_logit: logit(0.1),
            side: SideTag::Real,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn mirror_factor(&self) -> f64 {
        sigmoid(self.mirror_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(|s| s.exp().max(SCALE_FLOOR))
    }

    pub fn sh_degree(&self) -> usize {
        sh::degree_for_count(self.sh.len()).expect("sh length is a perfect square")
    }

    pub fn covariance(&self) -> Result<Covariance3> {
        build_covariance(&self.rotation, &self.log_scale)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.mirror_logit.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rotation);
        if n > 0.0 {
            for q in &mut self.rotation {
                *q /= n;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    /// Number of scalar parameters for a Gaussian with `sh_len` coefficients.
    pub fn param_count(sh_len: usize) -> usize {
        param::SH + 3 * sh_len
    }

    /// Writes the trainable parameters into `out` using the [`param`] layout.
    pub fn write_params(&self, out: &mut [f64]) {
        out[param::MEAN..param::MEAN + 3].copy_from_slice(self.mean.as_slice());
        out[param::ROTATION..param::ROTATION + 4].copy_from_slice(&self.rotation);
        out[param::LOG_SCALE..param::LOG_SCALE + 3].copy_from_slice(self.log_scale.as_slice());
        out[param::OPACITY] = self.opacity_logit;
        out[param::MIRROR] = self.mirror_logit;
        for (k, c) in self.sh.iter().enumerate() {
            out[param::SH + 3 * k..param::SH + 3 * k + 3].copy_from_slice(c.as_slice());
        }
    }

    pub fn read_params(&mut self, src: &[f64]) {
        self.mean = Vector3::from_column_slice(&src[param::MEAN..param::MEAN + 3]);
        self.rotation.copy_from_slice(&src[param::ROTATION..param::ROTATION + 4]);
        self.log_scale = Vector3::from_column_slice(&src[param::LOG_SCALE..param::LOG_SCALE + 3]);
        self.opacity_logit = src[param::OPACITY];
        self.mirror_logit = src[param::MIRROR];
        for (k, c) in self.sh.iter_mut().enumerate() {
            *c = Vector3::from_column_slice(&src[param::SH + 3 * k..param::SH + 3 * k + 3]);
        }
    }
}

/// Offsets of each parameter group inside a flat per-Gaussian row.
pub mod param {
    pub const MEAN: usize = 0;
    pub const ROTATION: usize = 3;
    pub const LOG_SCALE: usize = 7;
    pub const OPACITY: usize = 10;
    pub const MIRROR: usize = 11;
    pub const SH: usize = 12;
}

/// Symmetric positive semidefinite 3x3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion the matrix was built from.
pub fn quat_matrix_backward(q: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = d_rot;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    // Project out the radial direction: d(q/|q|)/dq = (I - q̂q̂ᵀ)/|q|.
    let qh = [w, x, y, z];
    let dq = [dw, dx, dy, dz];
    let radial: f64 = (0..4).map(|i| dq[i] * qh[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (dq[i] - radial * qh[i]) / n;
    }
    out
}

/// Unit quaternion `(w, x, y, z)` of a proper rotation matrix.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = quat_norm(&q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(max(exp(log_scale), SCALE_FLOOR))`.
pub fn build_covariance(rotation: &[f64; 4], log_scale: &Vector3<f64>) -> Result<Covariance3> {
    if !rotation.iter().chain(log_scale.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite rotation or log-scale".into(),
        ));
    }
    if quat_norm(rotation) == 0.0 {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    let r = quat_to_matrix(rotation);
    let s = log_scale.map(|v| v.exp().max(SCALE_FLOOR));
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    Ok(Covariance3((sigma + sigma.transpose()) * 0.5))
}

/// `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn eval_density(g: &Gaussian3D, x: &Vector3<f64>) -> Result<f64> {
    let cov = g.covariance()?;
    let chol = cov
        .0
        .cholesky()
        .ok_or_else(|| Error::DegenerateGaussian("covariance is not positive definite".into()))?;
    let d = x - g.mean;
    let solved = chol.solve(&d);
    let maha = d.dot(&solved);
    if !maha.is_finite() {
        return Err(Error::DegenerateGaussian("non-finite Mahalanobis distance".into()));
    }
    Ok((-0.5 * maha.max(0.0)).exp())
}
