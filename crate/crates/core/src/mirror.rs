//! Mirror plane estimation and the reflection it induces on points,
//! Gaussians and view-dependent color.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{matrix_to_quat, quat_to_matrix, Gaussian3D, SideTag};
use crate::sh::ShTransform;

/// Default mirror-factor threshold for selecting plane-fit candidates.
///
/// Gaussians that only help paint the mask (virtual image, occluded
/// interior) settle below this; surface Gaussians saturate above it.
pub const DEFAULT_MIRROR_THRESHOLD: f64 = 0.9;
pub const DEFAULT_RANSAC_ITERS: usize = 1000;
/// Default RANSAC inlier tolerance as a fraction of the bounding-box diagonal.
pub const DEFAULT_INLIER_FRACTION: f64 = 0.005;
/// On-plane tie band as a fraction of the bounding-box diagonal.
pub const PLANE_EPS_FRACTION: f64 = 1e-6;

/// Plane `n·x + d = 0` with `|n| = 1` and the first non-negligible component
/// of `n` positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorPlane {
    normal: Vector3<f64>,
    offset: f64,
}

impl MirrorPlane {
    /// Normalizes and canonicalizes `(normal, offset)`.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0 && n.is_finite() && offset.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "plane normal {normal:?} / offset {offset} is degenerate"
            )));
        }
        // Already-unit normals (e.g. read back from disk) are kept bit-exact.
        let n = if (n - 1.0).abs() <= 1e-14 { 1.0 } else { n };
        let (mut normal, mut offset) = (normal / n, offset / n);
        if let Some(&lead) = normal.iter().find(|c| c.abs() > 1e-12) {
            if lead < 0.0 {
                normal = -normal;
                offset = -offset;
            }
        }
        Ok(MirrorPlane { normal, offset })
    }

    pub fn from_coefficients(abcd: [f64; 4]) -> Result<Self> {
        Self::new(Vector3::new(abcd[0], abcd[1], abcd[2]), abcd[3])
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.normal.x, self.normal.y, self.normal.z, self.offset]
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn transform(&self) -> ReflectionTransform {
        reflection_transform(self)
    }

    /// Scales `(a, b, c, d)` by `(1+P, 1−P, 1+P, 1−P)` and renormalizes.
    pub fn perturbed(&self, rel: f64) -> Result<Self> {
        let [a, b, c, d] = self.coefficients();
        Self::from_coefficients([a * (1.0 + rel), b * (1.0 - rel), c * (1.0 + rel), d * (1.0 - rel)])
    }

    /// Angle between normals in degrees, ignoring orientation.
    pub fn angle_to(&self, other: &MirrorPlane) -> f64 {
        self.normal.dot(&other.normal).abs().min(1.0).acos().to_degrees()
    }
}

/// Homogeneous 4×4 reflection across a [`MirrorPlane`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectionTransform {
    pub matrix: Matrix4<f64>,
}

impl ReflectionTransform {
    /// Linear part `H = I − 2nnᵀ`.
    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

pub fn reflection_transform(plane: &MirrorPlane) -> ReflectionTransform {
    let n = plane.normal;
    let h = Matrix3::identity() - 2.0 * n * n.transpose();
    let t = -2.0 * plane.offset * n;
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&h);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    ReflectionTransform { matrix: m }
}

pub fn reflect_point(p: &Vector3<f64>, t: &ReflectionTransform) -> Vector3<f64> {
    (t.matrix * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
}

/// SH coefficients `c'` with `eval(c', v) = eval(c, H v)` for every direction `v`.
pub fn reflect_sh(sh: &[Vector3<f64>], t: &ReflectionTransform) -> Result<Vec<Vector3<f64>>> {
    let degree = crate::sh::degree_for_count(sh.len())
        .ok_or_else(|| Error::InvalidParameter(format!("{} is not an SH coefficient count", sh.len())))?;
    ShTransform::new(&t.linear(), degree)?.apply(sh)
}

/// Mirror image of `g`. `H R` is improper, so the third local axis is flipped:
/// `R' = H R diag(1, 1, −1)` is a rotation and `R' S² R'ᵀ = H Σ Hᵀ` with the
/// scales unchanged.
pub fn reflect_gaussian(g: &Gaussian3D, t: &ReflectionTransform) -> Result<Gaussian3D> {
    if !g.is_finite() {
        return Err(Error::InvalidParameter("cannot reflect a non-finite Gaussian".into()));
    }
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    let r = t.linear() * quat_to_matrix(&g.rotation) * flip;
    Ok(Gaussian3D {
        mean: reflect_point(&g.mean, t),
        rotation: matrix_to_quat(&r),
        log_scale: g.log_scale,
        opacity_logit: g.opacity_logit,
        sh: reflect_sh(&g.sh, t)?,
        mirror_logit: g.mirror_logit,
        side: g.side.reflected(),
    })
}

/// Centers of Gaussians whose mirror factor exceeds `threshold`.
pub fn select_mirror_points(gaussians: &[Gaussian3D], threshold: f64) -> Result<Vec<Vector3<f64>>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("mirror threshold {threshold} not in (0,1)")));
    }
    Ok(gaussians.iter().filter(|g| g.mirror_factor() > threshold).map(|g| g.mean).collect())
}

/// Length of the axis-aligned bounding-box diagonal.
pub fn bbox_diagonal<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
        any = true;
    }
    if any {
        (hi - lo).norm()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub plane: MirrorPlane,
    pub inliers: usize,
    /// Root-mean-square distance of the inliers to the refined plane.
    pub fit_rmse: f64,
}

fn count_inliers(points: &[Vector3<f64>], plane: &MirrorPlane, tol: f64) -> usize {
    points.iter().filter(|p| plane.signed_distance(p).abs() <= tol).count()
}

fn least_squares_plane(points: &[Vector3<f64>]) -> Option<MirrorPlane> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    MirrorPlane::new(normal, -normal.dot(&centroid)).ok()
}

/// RANSAC plane fit followed by a least-squares refit over the inliers.
///
/// Iteration `i` draws its sample from its own ChaCha stream, so the result
/// does not depend on how iterations are scheduled. The best count wins with
/// ties going to the lowest iteration.
pub fn ransac_fit_plane(
    points: &[Vector3<f64>],
    n_iters: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::FitFailure(format!("need at least 3 points, got {}", points.len())));
    }
    if !(inlier_tol > 0.0) {
        return Err(Error::InvalidParameter(format!("inlier tolerance {inlier_tol} must be positive")));
    }
    let candidates: Vec<Option<(usize, MirrorPlane)>> = (0..n_iters)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let idx = rand::seq::index::sample(&mut rng, points.len(), 3);
            let (a, b, c) = (points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]);
            let (u, v) = (b - a, c - a);
            let normal = u.cross(&v);
            if normal.norm() <= 1e-12 * u.norm() * v.norm() {
                return None;
            }
            let plane = MirrorPlane::new(normal, -normal.dot(&a)).ok()?;
            Some((count_inliers(points, &plane, inlier_tol), plane))
        })
        .collect();
    let mut best: Option<(usize, MirrorPlane)> = None;
    for cand in candidates.into_iter().flatten() {
        if best.is_none_or(|(n, _)| cand.0 > n) {
            best = Some(cand);
        }
    }
    let (_, sample_plane) = best.ok_or_else(|| {
        Error::FitFailure(format!("all {n_iters} RANSAC samples were collinear"))
    })?;
    let inliers: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| sample_plane.signed_distance(p).abs() <= inlier_tol)
        .copied()
        .collect();
    let plane = if inliers.len() >= 3 {
        least_squares_plane(&inliers).unwrap_or(sample_plane)
    } else {
        sample_plane
    };
    let final_inliers: Vec<f64> = points
        .iter()
        .map(|p| plane.signed_distance(p))
        .filter(|d| d.abs() <= inlier_tol)
        .collect();
    let fit_rmse = if final_inliers.is_empty() {
        0.0
    } else {
        (final_inliers.iter().map(|d| d * d).sum::<f64>() / final_inliers.len() as f64).sqrt()
    };
    Ok(PlaneFit { plane, inliers: final_inliers.len(), fit_rmse })
}

/// `+1` or `−1`: the sign of the mean camera signed distance, which marks the
/// observable half-space. A zero mean counts as positive.
pub fn front_sign(plane: &MirrorPlane, camera_centers: &[Vector3<f64>]) -> f64 {
    let mean: f64 = camera_centers.iter().map(|c| plane.signed_distance(c)).sum::<f64>()
        / camera_centers.len().max(1) as f64;
    if mean < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Whether a point lies on the observable side; points within `eps` of the
/// plane count as front.
pub fn is_front(plane: &MirrorPlane, sign: f64, p: &Vector3<f64>, eps: f64) -> bool {
    let d = plane.signed_distance(p);
    d.abs() <= eps || d * sign > 0.0
}

/// Front flags for every Gaussian, relative to the cameras' half-space.
pub fn classify_side(
    gaussians: &[Gaussian3D],
    plane: &MirrorPlane,
    camera_centers: &[Vector3<f64>],
    eps: f64,
) -> Vec<bool> {
    let sign = front_sign(plane, camera_centers);
    gaussians.iter().map(|g| is_front(plane, sign, &g.mean, eps)).collect()
}

/// Real and mirror-region Gaussians followed by their valid reflections.
///
/// Front Gaussians become `Real` and behind ones `MirrorRegion`; each
/// reflection is kept only if it lands on the opposite side from its source.
pub fn build_merged_scene(
    gaussians: &[Gaussian3D],
    plane: &MirrorPlane,
    camera_centers: &[Vector3<f64>],
    eps: f64,
) -> Result<Vec<Gaussian3D>> {
    let sign = front_sign(plane, camera_centers);
    let t = plane.transform();
    let mut merged = Vec::with_capacity(2 * gaussians.len());
    let mut reflected = Vec::with_capacity(gaussians.len());
    for g in gaussians {
        let front = is_front(plane, sign, &g.mean, eps);
        let mut src = g.clone();
        src.side = if front { SideTag::Real } else { SideTag::MirrorRegion };
        let r = reflect_gaussian(&src, &t)?;
        if is_front(plane, sign, &r.mean, eps) != front {
            reflected.push(r);
        }
        merged.push(src);
    }
    merged.extend(reflected);
    Ok(merged)
}

/// On-disk plane record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inliers: usize,
    pub fit_rmse: f64,
}

impl PlaneRecord {
    pub fn from_fit(fit: &PlaneFit) -> Self {
        let n = fit.plane.normal;
        PlaneRecord { normal: [n.x, n.y, n.z], offset: fit.plane.offset, inliers: fit.inliers, fit_rmse: fit.fit_rmse }
    }

    pub fn plane(&self) -> Result<MirrorPlane> {
        MirrorPlane::new(Vector3::from(self.normal), self.offset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("plane record serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Random unit vector, used by tests and the synthetic generator.
pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::eval_density;
    use crate::sh;
    use nalgebra::DMatrix;

    fn plane(n: [f64; 3], d: f64) -> MirrorPlane {
        MirrorPlane::new(Vector3::from(n), d).unwrap()
    }

    #[test]
    fn z_plane_transform_is_diagonal() {
        let t = reflection_transform(&plane([0.0, 0.0, 1.0], 0.0));
        assert_eq!(t.matrix, Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, -1.0, 1.0)));
    }

    #[test]
    fn reflect_about_x_equals_one() {
        let t = plane([1.0, 0.0, 0.0], -1.0).transform();
        let p = reflect_point(&Vector3::new(3.0, 5.0, 7.0), &t);
        assert!((p - Vector3::new(-1.0, 5.0, 7.0)).norm() < 1e-15);
        assert_eq!(reflect_point(&Vector3::new(1.0, 2.0, 3.0), &plane([0.0, 0.0, 1.0], 0.0).transform()),
            Vector3::new(1.0, 2.0, -3.0));
    }

    #[test]
    fn canonical_orientation() {
        let p = plane([-2.0, 0.0, 0.0], 4.0);
        assert_eq!(p.normal(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(p.offset(), -2.0);
        let q = plane([0.0, -3.0, 4.0], 5.0);
        assert!((q.normal() - Vector3::new(0.0, 0.6, -0.8)).norm() < 1e-15);
        assert!((q.offset() + 1.0).abs() < 1e-15);
        assert!(MirrorPlane::new(Vector3::zeros(), 1.0).is_err());
    }

    #[test]
    fn reflected_isotropic_gaussian_keeps_covariance() {
        let g = Gaussian3D::isotropic(Vector3::new(0.5, 1.0, 2.0), 0.3, 0.5, Vector3::repeat(0.2), 1);
        let r = reflect_gaussian(&g, &plane([0.0, 0.0, 1.0], 0.0).transform()).unwrap();
        assert!((r.covariance().unwrap().0 - g.covariance().unwrap().0).abs().max() < 1e-12);
        assert_eq!(r.mean, Vector3::new(0.5, 1.0, -2.0));
        assert_eq!(r.side, SideTag::ReflectedReal);
    }

    #[test]
    fn axis_aligned_ellipsoid_about_x_plane() {
        let mut g = Gaussian3D::isotropic(Vector3::new(1.0, 0.0, 0.0), 1.0, 0.5, Vector3::zeros(), 0);
        g.log_scale.x = 2f64.ln();
        let r = reflect_gaussian(&g, &plane([1.0, 0.0, 0.0], 0.0).transform()).unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((r.covariance().unwrap().0 - expect).abs().max() < 1e-12);
    }

    #[test]
    fn principal_axis_at_45_degrees_maps_to_135() {
        let half = std::f64::consts::FRAC_PI_8; // rotation by 45° about z
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros(), 0);
        g.rotation = [half.cos(), 0.0, 0.0, half.sin()];
        g.log_scale = Vector3::new(3f64.ln(), 0.0, 0.0);
        let r = reflect_gaussian(&g, &plane([1.0, 0.0, 0.0], 0.0).transform()).unwrap();
        let eig = SymmetricEigen::new(r.covariance().unwrap().0);
        let axis = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        let expect = Vector3::new(-1.0, 1.0, 0.0) / 2f64.sqrt();
        assert!((axis.dot(&expect).abs() - 1.0).abs() < 1e-12, "axis {axis:?}");
        assert!((eig.eigenvalues.max() - 9.0).abs() < 1e-12);
    }

    /// Least-squares SH transform from sampled directions, independent of the
    /// polynomial substitution used by `ShTransform`.
    fn sampled_sh_oracle(c: &[Vector3<f64>], h: &Matrix3<f64>, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        let degree = sh::degree_for_count(c.len()).unwrap();
        let n = c.len();
        let m = 4 * n + 8;
        let dirs: Vec<Vector3<f64>> = (0..m).map(|_| random_unit(rng)).collect();
        let b = DMatrix::from_fn(m, n, |i, k| sh::basis(&dirs[i], degree)[k]);
        let pinv = b.clone().pseudo_inverse(1e-12).unwrap();
        let mut out = vec![Vector3::zeros(); n];
        for ch in 0..3 {
            let y = nalgebra::DVector::from_fn(m, |i, _| sh::eval(c, &(h * dirs[i]))[ch]);
            let x = &pinv * y;
            for k in 0..n {
                out[k][ch] = x[k];
            }
        }
        out
    }

    #[test]
    fn sh_reflection_matches_sampled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for degree in 0..=3 {
            for _ in 0..5 {
                let p = MirrorPlane::new(random_unit(&mut rng), rng.random_range(-2.0..2.0)).unwrap();
                let t = p.transform();
                let c: Vec<Vector3<f64>> = (0..sh::coeff_count(degree))
                    .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let closed = reflect_sh(&c, &t).unwrap();
                let oracle = sampled_sh_oracle(&c, &t.linear(), &mut rng);
                for (a, b) in closed.iter().zip(&oracle) {
                    assert!((a - b).norm() < 1e-9);
                }
                for _ in 0..20 {
                    let v = random_unit(&mut rng);
                    assert!((sh::eval(&closed, &v) - sh::eval(&c, &(t.linear() * v))).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ransac_exact_plane() {
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|i| Vector3::new(2.0, (i % 10) as f64 * 0.3, (i / 10) as f64 * 0.2))
            .collect();
        let fit = ransac_fit_plane(&pts, 200, 1e-6, 1).unwrap();
        assert!((fit.plane.normal() - Vector3::x()).norm() < 1e-12);
        assert!((fit.plane.offset() + 2.0).abs() < 1e-12);
        assert_eq!(fit.inliers, 100);
    }

    #[test]
    fn ransac_with_cube_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(2.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        pts.extend((0..30).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..1.0))));
        let fit = ransac_fit_plane(&pts, 1000, 0.01, 3).unwrap();
        assert!(fit.plane.angle_to(&plane([1.0, 0.0, 0.0], -2.0)) < 1.0);
        assert!((fit.plane.offset() + 2.0).abs() < 0.01);
    }

    #[test]
    fn ransac_rejects_too_few_or_collinear_points() {
        let two = [Vector3::zeros(), Vector3::x()];
        assert!(matches!(ransac_fit_plane(&two, 10, 0.1, 0), Err(Error::FitFailure(_))));
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(ransac_fit_plane(&line, 50, 0.1, 0), Err(Error::FitFailure(_))));
    }

    #[test]
    fn ransac_is_deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|i| {
                if i % 3 == 0 {
                    Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))
                } else {
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3)
                }
            })
            .collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| ransac_fit_plane(&pts, 300, 0.01, 9).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn select_points_by_threshold() {
        let mut gs: Vec<Gaussian3D> = (0..6)
            .map(|i| Gaussian3D::isotropic(Vector3::new(i as f64, 0.0, 0.0), 0.1, 0.5, Vector3::zeros(), 0))
            .collect();
        for g in &mut gs {
            g.mirror_logit = crate::gaussian::logit(0.01);
        }
        assert!(select_mirror_points(&gs, 0.5).unwrap().is_empty());
        gs[2].mirror_logit = crate::gaussian::logit(0.9);
        gs[4].mirror_logit = crate::gaussian::logit(0.9);
        assert_eq!(
            select_mirror_points(&gs, 0.5).unwrap(),
            vec![Vector3::new(2.0, 0.0, 0.0), Vector3::new(4.0, 0.0, 0.0)]
        );
        assert!(select_mirror_points(&gs, 1.0).is_err());
    }

    #[test]
    fn select_points_uniform_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ms: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
        let gs: Vec<Gaussian3D> = ms
            .iter()
            .map(|&m| {
                let mut g = Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::zeros(), 0);
                g.mirror_logit = crate::gaussian::logit(m);
                g
            })
            .collect();
        let expect = ms.iter().filter(|&&m| m > 0.5).count();
        assert_eq!(select_mirror_points(&gs, 0.5).unwrap().len(), expect);
        assert!((expect as i64 - 500).abs() < 60);
    }

    fn at(x: f64) -> Gaussian3D {
        Gaussian3D::isotropic(Vector3::new(x, 0.3, -0.2), 0.1, 0.5, Vector3::zeros(), 1)
    }

    #[test]
    fn classify_front_behind_and_ties() {
        let p = plane([1.0, 0.0, 0.0], -2.0);
        let cams = [Vector3::new(5.0, 0.0, 0.0), Vector3::new(4.0, 1.0, -1.0)];
        let flags = classify_side(&[at(3.0), at(1.0), at(2.0)], &p, &cams, 1e-9);
        assert_eq!(flags, vec![true, false, true]);
    }

    #[test]
    fn merged_scene_populations() {
        let p = plane([1.0, 0.0, 0.0], -2.0);
        let cams = [Vector3::new(5.0, 0.0, 0.0)];
        let merged = build_merged_scene(&[at(3.0), at(2.5), at(1.0), at(2.0)], &p, &cams, 1e-9).unwrap();
        let tags: Vec<SideTag> = merged.iter().map(|g| g.side).collect();
        use SideTag::*;
        assert_eq!(tags, vec![Real, Real, MirrorRegion, Real, ReflectedReal, ReflectedReal, ReflectedMirror]);
        assert!(merged.len() <= 8);
        assert_eq!(merged[6].mean.x, 3.0);

        let front_only = build_merged_scene(&[at(3.0), at(4.0)], &p, &cams, 1e-9).unwrap();
        assert_eq!(front_only.iter().filter(|g| g.side == Real).count(), 2);
        assert_eq!(front_only.iter().filter(|g| g.side == ReflectedReal).count(), 2);
    }

    #[test]
    fn merged_symmetric_scene_stays_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = MirrorPlane::new(random_unit(&mut rng), 0.4).unwrap();
        let t = p.transform();
        let cams = [p.normal() * 5.0];
        let mut scene = Vec::new();
        for _ in 0..20 {
            let g = Gaussian3D::isotropic(Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)), 0.1, 0.5, Vector3::zeros(), 1);
            scene.push(reflect_gaussian(&g, &t).unwrap());
            scene.push(g);
        }
        let merged = build_merged_scene(&scene, &p, &cams, 1e-9).unwrap();
        for g in &merged {
            let r = reflect_point(&g.mean, &t);
            let best = merged.iter().map(|o| (o.mean - r).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9);
        }
    }

    #[test]
    fn plane_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plane.json");
        let fit = PlaneFit { plane: plane([0.1, 0.2, 0.9], -1.3), inliers: 42, fit_rmse: 0.003 };
        let rec = PlaneRecord::from_fit(&fit);
        rec.save(&path).unwrap();
        let back = PlaneRecord::load(&path).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.plane().unwrap(), fit.plane);
    }

    #[test]
    fn perturbation_scales_coefficients() {
        let p = plane([0.6, 0.0, 0.8], -2.0);
        let q = p.perturbed(0.05).unwrap();
        let [a, b, c, d] = p.coefficients();
        let raw = Vector4::new(a * 1.05, b * 0.95, c * 1.05, d * 0.95);
        let raw = raw / raw.xyz().norm();
        assert!((Vector4::from(q.coefficients()) - raw).norm() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn arb_plane() -> impl Strategy<Value = MirrorPlane> {
            (prop::array::uniform3(-1.0f64..1.0), -3.0f64..3.0)
                .prop_filter("non-degenerate normal", |(n, _)| Vector3::from(*n).norm() > 1e-2)
                .prop_map(|(n, d)| MirrorPlane::new(Vector3::from(n), d).unwrap())
        }

        fn arb_point() -> impl Strategy<Value = Vector3<f64>> {
            prop::array::uniform3(-5.0f64..5.0).prop_map(Vector3::from)
        }

        proptest! {
            #[test]
            fn reflection_is_an_involutive_isometry(p in arb_plane(), a in arb_point(), b in arb_point()) {
                let t = p.transform();
                prop_assert!(((t.matrix * t.matrix) - Matrix4::identity()).abs().max() < 1e-10);
                prop_assert!((t.linear().determinant() + 1.0).abs() < 1e-10);
                prop_assert!((reflect_point(&reflect_point(&a, &t), &t) - a).norm() < 1e-10);
                let d = (reflect_point(&a, &t) - reflect_point(&b, &t)).norm();
                prop_assert!((d - (a - b).norm()).abs() < 1e-10);
                prop_assert!((p.signed_distance(&reflect_point(&a, &t)) + p.signed_distance(&a)).abs() < 1e-12);
            }

            #[test]
            fn density_is_equivariant(p in arb_plane(), mean in arb_point(), x in arb_point(),
                                      q in prop::array::uniform4(-1.0f64..1.0), ls in prop::array::uniform3(-1.0f64..1.0)) {
                prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
                let mut g = Gaussian3D::isotropic(mean, 1.0, 0.5, Vector3::zeros(), 1);
                g.rotation = q;
                g.normalize_rotation();
                g.log_scale = Vector3::from(ls);
                let t = p.transform();
                let r = reflect_gaussian(&g, &t).unwrap();
                let a = eval_density(&g, &x).unwrap();
                let b = eval_density(&r, &reflect_point(&x, &t)).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
                let sigma = g.covariance().unwrap().0;
                let h = t.linear();
                prop_assert!((r.covariance().unwrap().0 - h * sigma * h.transpose()).abs().max() < 1e-9);
            }

            #[test]
            fn sh_reflection_is_involutive(p in arb_plane(), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c: Vec<Vector3<f64>> = (0..16).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
                let t = p.transform();
                let twice = reflect_sh(&reflect_sh(&c, &t).unwrap(), &t).unwrap();
                for (a, b) in twice.iter().zip(&c) {
                    prop_assert!((a - b).norm() < 1e-9);
                }
            }

            #[test]
            fn ransac_is_scale_consistent(seed in 0u64..500, k in 0.1f64..10.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = MirrorPlane::new(random_unit(&mut rng), rng.random_range(-1.0..1.0)).unwrap();
                let pts: Vec<Vector3<f64>> = (0..60).map(|i| {
                    let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    if i % 4 == 0 { x } else { x - p.normal() * (p.signed_distance(&x) + rng.random_range(-0.002..0.002)) }
                }).collect();
                let scaled: Vec<Vector3<f64>> = pts.iter().map(|v| v * k).collect();
                let a = ransac_fit_plane(&pts, 100, 0.01, seed).unwrap();
                let b = ransac_fit_plane(&scaled, 100, 0.01 * k, seed).unwrap();
                prop_assert!((a.plane.normal() - b.plane.normal()).norm() < 1e-9);
                prop_assert!((a.plane.offset() * k - b.plane.offset()).abs() < 1e-9 * k.max(1.0));
            }
        }
    }
}
