//! Image losses and evaluation metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) evaluated only where the
//! window fits inside the image ("valid" placements), with
//! `C₁ = 0.01²`, `C₂ = 0.03²` for unit dynamic range. The SSIM map is
//! computed per channel and averaged over placements and channels.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::Vec3;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / sum).collect()
    }

    pub fn window_2d(&self) -> Vec<f64> {
        let k = self.kernel_1d();
        k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect()
    }
}

/// Mean absolute difference and its gradient with respect to `a`.
/// The subgradient at ties is 0.
pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.ensure_same_dims(b)?;
    let n = a.data().len() as f64;
    let mut grad = ImageBuffer::new(a.width(), a.height());
    let mut sum = 0.0;
    for ((g, &x), &y) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        sum += d.abs();
        *g = sign(d) / n;
    }
    Ok((sum / n, grad))
}

pub(crate) fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio on unit range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MSE_FLOOR {
        Ok(PSNR_CAP_DB)
    } else {
        Ok(-10.0 * m.log10())
    }
}

/// `Σᵢ Π(sᵢ)` over Gaussians given by their log-scales, with the gradient
/// with respect to each log-scale.
pub fn fine_loss(log_scales: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut total = 0.0;
    let grads = log_scales
        .iter()
        .map(|ls| {
            let vol = ls.map(f64::exp).product();
            total += vol;
            // d(s₀s₁s₂)/d(log sₖ) = s₀s₁s₂.
            Vec3::repeat(vol)
        })
        .collect();
    (total, grads)
}

struct Geometry {
    w: usize,
    h: usize,
    ow: usize,
    oh: usize,
}

fn geometry(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<Geometry> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    if w < p.window || h < p.window {
        return Err(Error::InvalidParameter(format!(
            "image {w}x{h} is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    Ok(Geometry {
        w,
        h,
        ow: w - p.window + 1,
        oh: h - p.window + 1,
    })
}

/// Separable "valid" correlation of a `w×h` plane with `k ⊗ k`.
fn filter_valid(src: &[f64], g: &Geometry, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let mut tmp = vec![0.0; g.ow * g.h];
    for y in 0..g.h {
        let row = &src[y * g.w..(y + 1) * g.w];
        for x in 0..g.ow {
            tmp[y * g.ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; g.ow * g.oh];
    for y in 0..g.oh {
        for x in 0..g.ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * g.ow + x];
            }
            out[y * g.ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow×oh` map back to `w×h`.
fn filter_adjoint(src: &[f64], g: &Geometry, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let mut tmp = vec![0.0; g.ow * g.h];
    for y in 0..g.oh {
        for x in 0..g.ow {
            let v = src[y * g.ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * g.ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; g.w * g.h];
    for y in 0..g.h {
        for x in 0..g.ow {
            let v = tmp[y * g.ow + x];
            let row = &mut out[y * g.w + x..y * g.w + x + n];
            for (o, kv) in row.iter_mut().zip(k) {
                *o += kv * v;
            }
        }
    }
    out
}

fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    let g = geometry(a, b, p)?;
    let k = p.kernel_1d();
    let npos = (g.ow * g.oh) as f64;
    let norm = 1.0 / (npos * 3.0);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuffer::new(g.w, g.h));
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let mu_x = filter_valid(&x, &g, &k);
        let mu_y = filter_valid(&y, &g, &k);
        let e_xx = filter_valid(&xx, &g, &k);
        let e_yy = filter_valid(&yy, &g, &k);
        let e_xy = filter_valid(&xy, &g, &k);
        let m = mu_x.len();
        let (mut da, mut db, mut dc) = if want_grad {
            (vec![0.0; m], vec![0.0; m], vec![0.0; m])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for i in 0..m {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            let n1 = 2.0 * mx * my + p.c1;
            let n2 = 2.0 * cxy + p.c2;
            let d1 = mx * mx + my * my + p.c1;
            let d2 = vx + vy + p.c2;
            let s = (n1 * n2) / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmx = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                // S depends on x through μx, E[x²] (via vx) and E[xy] (via cxy).
                db[i] = ds_dvx * norm;
                dc[i] = ds_dcxy * norm;
                da[i] = (ds_dmx - 2.0 * ds_dvx * mx - ds_dcxy * my) * norm;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let ga = filter_adjoint(&da, &g, &k);
            let gb = filter_adjoint(&db, &g, &k);
            let gc = filter_adjoint(&dc, &g, &k);
            for q in 0..g.w * g.h {
                grad.data_mut()[q * 3 + ch] = ga[q] + 2.0 * x[q] * gb[q] + y[q] * gc[q];
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(a, b, p, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<(f64, ImageBuffer)> {
    let (v, g) = ssim_impl(a, b, p, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `1 − SSIM(a, b)` and its gradient with respect to `a`.
pub fn ssim_loss(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<(f64, ImageBuffer)> {
    let (v, g) = ssim_with_grad(a, b, p)?;
    Ok((1.0 - v, g.map(|x| -x)))
}
