//! Real spherical harmonics up to degree 3, in the basis and sign
//! convention used by common splatting renderers.
//!
//! Every basis function is stored as a homogeneous harmonic polynomial in
//! `(x, y, z)`. Evaluation, direction gradients and the exact transform of
//! coefficients under an orthogonal map all come from that one table.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn degree_for_count(count: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&d| coeff_count(d) == count)
}

/// DC coefficient that renders as `rgb` (colors are `SH + 0.5`).
pub fn rgb_to_dc(rgb: &Vector3<f64>) -> Vector3<f64> {
    (rgb - Vector3::repeat(0.5)) / C0
}

pub fn dc_to_rgb(dc: &Vector3<f64>) -> Vector3<f64> {
    dc * C0 + Vector3::repeat(0.5)
}

/// One monomial term `coef · x^a y^b z^c`.
type Term = (f64, [u8; 3]);

fn basis_table() -> &'static [Vec<Term>] {
    static TABLE: OnceLock<Vec<Vec<Term>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        vec![
            vec![(C0, [0, 0, 0])],
            vec![(-C1, [0, 1, 0])],
            vec![(C1, [0, 0, 1])],
            vec![(-C1, [1, 0, 0])],
            vec![(C2[0], [1, 1, 0])],
            vec![(C2[1], [0, 1, 1])],
            vec![
                (2.0 * C2[2], [0, 0, 2]),
                (-C2[2], [2, 0, 0]),
                (-C2[2], [0, 2, 0]),
            ],
            vec![(C2[3], [1, 0, 1])],
            vec![(C2[4], [2, 0, 0]), (-C2[4], [0, 2, 0])],
            vec![(3.0 * C3[0], [2, 1, 0]), (-C3[0], [0, 3, 0])],
            vec![(C3[1], [1, 1, 1])],
            vec![
                (4.0 * C3[2], [0, 1, 2]),
                (-C3[2], [2, 1, 0]),
                (-C3[2], [0, 3, 0]),
            ],
            vec![
                (2.0 * C3[3], [0, 0, 3]),
                (-3.0 * C3[3], [2, 0, 1]),
                (-3.0 * C3[3], [0, 2, 1]),
            ],
            vec![
                (4.0 * C3[4], [1, 0, 2]),
                (-C3[4], [3, 0, 0]),
                (-C3[4], [1, 2, 0]),
            ],
            vec![(C3[5], [2, 0, 1]), (-C3[5], [0, 2, 1])],
            vec![(C3[6], [3, 0, 0]), (-3.0 * C3[6], [1, 2, 0])],
        ]
    })
}

fn powers(v: f64) -> [f64; 4] {
    [1.0, v, v * v, v * v * v]
}

/// Basis values `Y_k(dir)` for `k < (degree+1)^2`.
pub fn basis(dir: &Vector3<f64>, degree: usize) -> Vec<f64> {
    let (px, py, pz) = (powers(dir.x), powers(dir.y), powers(dir.z));
    basis_table()[..coeff_count(degree)]
        .iter()
        .map(|terms| {
            terms
                .iter()
                .map(|&(c, [a, b, e])| c * px[a as usize] * py[b as usize] * pz[e as usize])
                .sum()
        })
        .collect()
}

/// Basis values and their gradients with respect to the (unnormalized)
/// direction, treating each basis function as its polynomial.
pub fn basis_with_gradient(dir: &Vector3<f64>, degree: usize) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let (px, py, pz) = (powers(dir.x), powers(dir.y), powers(dir.z));
    let n = coeff_count(degree);
    let mut vals = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for terms in &basis_table()[..n] {
        let mut v = 0.0;
        let mut g = Vector3::zeros();
        for &(c, [a, b, e]) in terms {
            let (a, b, e) = (a as usize, b as usize, e as usize);
            v += c * px[a] * py[b] * pz[e];
            if a > 0 {
                g.x += c * a as f64 * px[a - 1] * py[b] * pz[e];
            }
            if b > 0 {
                g.y += c * b as f64 * px[a] * py[b - 1] * pz[e];
            }
            if e > 0 {
                g.z += c * e as f64 * px[a] * py[b] * pz[e - 1];
            }
        }
        vals.push(v);
        grads.push(g);
    }
    (vals, grads)
}

/// `Σ_k sh_k Y_k(dir)` without the +0.5 color offset.
pub fn eval(sh: &[Vector3<f64>], dir: &Vector3<f64>) -> Vector3<f64> {
    let degree = degree_for_count(sh.len()).expect("sh length is a perfect square");
    basis(dir, degree)
        .iter()
        .zip(sh)
        .fold(Vector3::zeros(), |acc, (y, c)| acc + c * *y)
}

fn monomials(degree: usize) -> Vec<[u8; 3]> {
    let mut out = Vec::new();
    for a in (0..=degree).rev() {
        for b in (0..=degree - a).rev() {
            out.push([a as u8, b as u8, (degree - a - b) as u8]);
        }
    }
    out
}

/// Homogeneous polynomial as a dense coefficient vector over `monomials(deg)`.
fn substitute(terms: &[Term], map: &Matrix3<f64>, degree: usize) -> Vec<f64> {
    use std::collections::BTreeMap;
    let mono = monomials(degree);
    let mut acc: BTreeMap<[u8; 3], f64> = BTreeMap::new();
    for &(coef, [a, b, c]) in terms {
        let mut poly: BTreeMap<[u8; 3], f64> = BTreeMap::new();
        poly.insert([0, 0, 0], coef);
        let factors = std::iter::repeat_n(0, a as usize)
            .chain(std::iter::repeat_n(1, b as usize))
            .chain(std::iter::repeat_n(2, c as usize));
        for row in factors {
            // (Mv)_row = Σ_j M[row, j] v_j
            let mut next: BTreeMap<[u8; 3], f64> = BTreeMap::new();
            for (exp, val) in &poly {
                for j in 0..3 {
                    let m = map[(row, j)];
                    if m == 0.0 {
                        continue;
                    }
                    let mut e = *exp;
                    e[j] += 1;
                    *next.entry(e).or_insert(0.0) += val * m;
                }
            }
            poly = next;
        }
        for (e, v) in poly {
            *acc.entry(e).or_insert(0.0) += v;
        }
    }
    mono.iter().map(|m| acc.get(m).copied().unwrap_or(0.0)).collect()
}

/// Per-band matrix `D` with `Y_k(M v) = Σ_j D[k][j] Y_j(v)` for an orthogonal
/// `M`. Exact: each band's harmonic polynomials are closed under orthogonal
/// substitution, so the projection onto the band basis has no residual.
pub fn band_transform(map: &Matrix3<f64>, band: usize) -> DMatrix<f64> {
    let table = basis_table();
    let start = band * band;
    let size = 2 * band + 1;
    let mono = monomials(band);
    let basis_coeffs = DMatrix::from_fn(mono.len(), size, |r, c| {
        let terms = &table[start + c];
        terms
            .iter()
            .filter(|t| t.1 == mono[r])
            .map(|t| t.0)
            .sum::<f64>()
    });
    let normal = basis_coeffs.transpose() * &basis_coeffs;
    let normal_inv = normal
        .try_inverse()
        .expect("band basis polynomials are linearly independent");
    let pinv = normal_inv * basis_coeffs.transpose();
    let mut d = DMatrix::zeros(size, size);
    for k in 0..size {
        let p = DVector::from_vec(substitute(&table[start + k], map, band));
        let row = &pinv * p;
        d.row_mut(k).copy_from(&row.transpose());
    }
    d
}

/// Precomputed coefficient transform for one orthogonal linear map.
#[derive(Debug, Clone)]
pub struct ShTransform {
    bands: Vec<DMatrix<f64>>,
}

impl ShTransform {
    /// Coefficients `c'` with `eval(c', v) = eval(c, M v)` for all `v`.
    pub fn new(map: &Matrix3<f64>, degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::UnsupportedShDegree(degree));
        }
        Ok(Self {
            bands: (0..=degree).map(|l| band_transform(map, l)).collect(),
        })
    }

    pub fn degree(&self) -> usize {
        self.bands.len() - 1
    }

    pub fn apply(&self, sh: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let degree = degree_for_count(sh.len()).ok_or(Error::UnsupportedShDegree(
            (sh.len() as f64).sqrt() as usize,
        ))?;
        if degree > self.degree() {
            return Err(Error::UnsupportedShDegree(degree));
        }
        let mut out = vec![Vector3::zeros(); sh.len()];
        for (l, d) in self.bands.iter().take(degree + 1).enumerate() {
            let start = l * l;
            let size = 2 * l + 1;
            // c'_j = Σ_k c_k D[k][j]
            for j in 0..size {
                let mut v = Vector3::zeros();
                for k in 0..size {
                    v += sh[start + k] * d[(k, j)];
                }
                out[start + j] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z).normalize()
    }

    /// Direct transcription of the usual hand-unrolled evaluation.
    fn reference_eval(sh: &[Vector3<f64>], d: &Vector3<f64>) -> Vector3<f64> {
        let (x, y, z) = (d.x, d.y, d.z);
        let mut r = sh[0] * C0;
        if sh.len() > 1 {
            r += -sh[1] * C1 * y + sh[2] * C1 * z - sh[3] * C1 * x;
        }
        if sh.len() > 4 {
            let (xx, yy, zz, xy, yz, xz) = (x * x, y * y, z * z, x * y, y * z, x * z);
            r += sh[4] * C2[0] * xy
                + sh[5] * C2[1] * yz
                + sh[6] * C2[2] * (2.0 * zz - xx - yy)
                + sh[7] * C2[3] * xz
                + sh[8] * C2[4] * (xx - yy);
            if sh.len() > 9 {
                r += sh[9] * C3[0] * y * (3.0 * xx - yy)
                    + sh[10] * C3[1] * xy * z
                    + sh[11] * C3[2] * y * (4.0 * zz - xx - yy)
                    + sh[12] * C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
                    + sh[13] * C3[4] * x * (4.0 * zz - xx - yy)
                    + sh[14] * C3[5] * z * (xx - yy)
                    + sh[15] * C3[6] * x * (xx - 3.0 * yy);
            }
        }
        r
    }

    fn coeffs(n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|k| {
                let k = k as f64;
                Vector3::new((k * 0.37).sin(), (k * 1.3 + 0.2).cos(), 0.1 * k - 0.5)
            })
            .collect()
    }

    #[test]
    fn table_matches_unrolled_evaluation() {
        let sh = coeffs(16);
        for d in [dir(1.0, 2.0, 3.0), dir(-0.3, 0.1, 0.9), dir(0.0, -1.0, 0.2)] {
            let a = eval(&sh, &d);
            let b = reference_eval(&sh, &d);
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn dc_round_trip() {
        let c = Vector3::new(0.2, 0.5, 0.9);
        assert!((dc_to_rgb(&rgb_to_dc(&c)) - c).norm() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = Vector3::new(0.3, -0.4, 0.8);
        let (_, grads) = basis_with_gradient(&d, 3);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = d;
            dp[axis] += h;
            let mut dm = d;
            dm[axis] -= h;
            let (vp, vm) = (basis(&dp, 3), basis(&dm, 3));
            for k in 0..16 {
                let fd = (vp[k] - vm[k]) / (2.0 * h);
                assert!((fd - grads[k][axis]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn z_reflection_flips_only_odd_z_terms_in_band_one() {
        let h = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let t = ShTransform::new(&h, 1).unwrap();
        let sh = coeffs(4);
        let out = t.apply(&sh).unwrap();
        assert!((out[0] - sh[0]).norm() < 1e-15);
        assert!((out[1] - sh[1]).norm() < 1e-15);
        assert!((out[2] + sh[2]).norm() < 1e-15);
        assert!((out[3] - sh[3]).norm() < 1e-15);
    }

    #[test]
    fn degree_zero_is_unchanged() {
        let n = Vector3::new(0.3, -0.2, 0.9).normalize();
        let h = Matrix3::identity() - 2.0 * n * n.transpose();
        let t = ShTransform::new(&h, 0).unwrap();
        let sh = vec![Vector3::new(0.4, -0.1, 0.7)];
        assert_eq!(t.apply(&sh).unwrap(), sh);
    }

    #[test]
    fn unsupported_degree() {
        assert!(matches!(
            ShTransform::new(&Matrix3::identity(), 4),
            Err(Error::UnsupportedShDegree(4))
        ));
        let t = ShTransform::new(&Matrix3::identity(), 1).unwrap();
        assert!(t.apply(&coeffs(9)).is_err());
    }
}
