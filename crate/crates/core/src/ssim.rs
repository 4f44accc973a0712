//! Windowed SSIM over valid 11×11 Gaussian windows (σ = 1.5) with an
//! analytic gradient.

use crate::error::{Error, Result};
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D window; the 2D window is its outer product.
pub fn window_1d() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Valid-mode separable filter of a `w×h` plane into `(w−10)×(h−10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a `(w−10)×(h−10)` map back to `w×h`.
fn filter_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..WINDOW {
                cols[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for i in 0..WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn check(a: &Image, b: &Image) -> Result<()> {
    a.check_shape(b, "ssim inputs")?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM over all valid windows and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    ssim_impl(a, b, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check(a, b)?;
    let k = window_1d();
    let (w, h, nc) = (a.width, a.height, a.channels);
    let n_win = ((w - WINDOW + 1) * (h - WINDOW + 1)) as f64;
    let scale = 1.0 / (n_win * nc as f64);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, nc));
    for c in 0..nc {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, w, h, &k);
        let mu_y = filter_valid(&y, w, h, &k);
        let e_xx = filter_valid(&xx, w, h, &k);
        let e_yy = filter_valid(&yy, w, h, &k);
        let e_xy = filter_valid(&xy, w, h, &k);
        let n = mu_x.len();
        let (mut d_mu, mut d_exx, mut d_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = e_xx[i] - mx * mx;
            let syy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            let num1 = 2.0 * mx * my + C1;
            let num2 = 2.0 * sxy + C2;
            let den1 = mx * mx + my * my + C1;
            let den2 = sxx + syy + C2;
            let s = num1 * num2 / (den1 * den2);
            total += s;
            if want_grad {
                let ds_dmu = 2.0 * my * num2 / (den1 * den2) - s * 2.0 * mx / den1;
                let ds_dsxx = -s / den2;
                let ds_dsxy = 2.0 * num1 / (den1 * den2);
                d_mu[i] = scale * (ds_dmu - 2.0 * mx * ds_dsxx - my * ds_dsxy);
                d_exx[i] = scale * ds_dsxx;
                d_exy[i] = scale * ds_dsxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = filter_adjoint(&d_mu, w, h, &k);
            let gxx = filter_adjoint(&d_exx, w, h, &k);
            let gxy = filter_adjoint(&d_exy, w, h, &k);
            for p in 0..w * h {
                g.data[p * nc + c] = gm[p] + 2.0 * x[p] * gxx[p] + y[p] * gxy[p];
            }
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
pub(crate) mod reference {
    use super::*;

    /// Direct 2D-window SSIM with per-window sums, no separable filtering.
    pub fn ssim_brute(a: &Image, b: &Image) -> f64 {
        let k = window_1d();
        let (w, h) = (a.width, a.height);
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..a.channels {
            for oy in 0..=h - WINDOW {
                for ox in 0..=w - WINDOW {
                    let (mut mx, mut my, mut vxx, mut vyy, mut vxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..WINDOW {
                        for i in 0..WINDOW {
                            let wt = k[i] * k[j];
                            mx += wt * a.get(ox + i, oy + j, c);
                            my += wt * b.get(ox + i, oy + j, c);
                        }
                    }
                    for j in 0..WINDOW {
                        for i in 0..WINDOW {
                            let wt = k[i] * k[j];
                            let dx = a.get(ox + i, oy + j, c) - mx;
                            let dy = b.get(ox + i, oy + j, c) - my;
                            vxx += wt * dx * dx;
                            vyy += wt * dy * dy;
                            vxy += wt * dx * dy;
                        }
                    }
                    total += ((2.0 * mx * my + C1) * (2.0 * vxy + C2))
                        / ((mx * mx + my * my + C1) * (vxx + vyy + C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}
