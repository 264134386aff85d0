use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;

use super::{projection_jacobian, ForwardState, SplattedGaussian2D};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::{
    rotation_from_quat, rotation_quat_vjp, view_direction, Camera, GaussianPrimitive, Mat3, Vec3, SH_C1,
};

/// Per-Gaussian partials of a scalar loss, aligned with the input list.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub mean: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    /// With respect to the raw (unnormalized) quaternion.
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub sh1: Vec<[[f64; 3]; 3]>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vec3::zeros(); n],
            log_scale: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            sh1: vec![[[0.0; 3]; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().flatten().all(|x| x.is_finite())
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.color.iter().flatten().all(|x| x.is_finite())
            && self.sh1.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Gradients with respect to the 2D splat parameters.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    /// With respect to conic `[a, b, c]` where `b` is the shared off-diagonal.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// Back-propagates `upstream = dL/dC` (one value per pixel channel) through
/// the compositing, projection, covariance and activation functions.
pub fn render_backward(
    gaussians: &[GaussianPrimitive],
    cam: &Camera,
    state: &ForwardState,
    upstream: &ImageBuffer,
) -> Result<RenderGradients> {
    if state.n_gaussians != gaussians.len() || state.camera != *cam {
        return Err(Error::Usage(
            "forward state does not belong to this Gaussian list and camera".into(),
        ));
    }
    if upstream.dims() != (cam.width, cam.height) {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {}x{}, render is {}x{}",
            upstream.width(),
            upstream.height(),
            cam.width,
            cam.height
        )));
    }

    let splats = &state.splats;
    let per_tile: Vec<Vec<SplatGrad>> = state
        .tiles
        .par_iter()
        .map(|tile| {
            let mut grads = vec![SplatGrad::default(); tile.order.len()];
            let mut p = 0;
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let up = upstream.pixel(x, y);
                    let range = tile.pixel_start[p] as usize..tile.pixel_start[p + 1] as usize;
                    p += 1;
                    if up == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // Color of everything behind the current contributor, as
                    // seen from directly behind it.
                    let mut behind = [0.0; 3];
                    for c in tile.contribs[range].iter().rev() {
                        let s: &SplattedGaussian2D = &splats[tile.order[c.local as usize] as usize];
                        let g = &mut grads[c.local as usize];
                        let dx = px - s.mean2d[0];
                        let dy = py - s.mean2d[1];
                        let gauss = c.gauss;
                        let sigma = s.opacity * gauss;
                        let t = c.transmittance;
                        let mut d_sigma = 0.0;
                        for ch in 0..3 {
                            d_sigma += up[ch] * t * (s.color[ch] - behind[ch]);
                            g.color[ch] += up[ch] * sigma * t;
                            behind[ch] = s.color[ch] * sigma + (1.0 - sigma) * behind[ch];
                        }
                        g.opacity += d_sigma * gauss;
                        // d(hp) = -dG/G; G = exp(-hp).
                        let d_hp = -d_sigma * s.opacity * gauss;
                        let [a, b, cc] = s.conic;
                        g.conic[0] += d_hp * 0.5 * dx * dx;
                        g.conic[1] += d_hp * dx * dy;
                        g.conic[2] += d_hp * 0.5 * dy * dy;
                        g.mean2d[0] -= d_hp * (a * dx + b * dy);
                        g.mean2d[1] -= d_hp * (b * dx + cc * dy);
                    }
                }
            }
            grads
        })
        .collect();

    // Fixed tile order keeps the reduction deterministic for any worker count.
    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    for (tile, grads) in state.tiles.iter().zip(&per_tile) {
        for (local, &si) in tile.order.iter().enumerate() {
            splat_grads[si as usize].add(&grads[local]);
        }
    }

    let mut out = RenderGradients::zeros(gaussians.len());
    let center = cam.center();
    for (s, sg) in splats.iter().zip(&splat_grads) {
        backprop_gaussian(&gaussians[s.index], s, sg, cam, &center, &mut out, s.index);
    }
    Ok(out)
}

fn backprop_gaussian(
    g: &GaussianPrimitive,
    s: &SplattedGaussian2D,
    sg: &SplatGrad,
    cam: &Camera,
    center: &Vec3,
    out: &mut RenderGradients,
    i: usize,
) {
    // Opacity through the sigmoid.
    out.opacity_logit[i] += sg.opacity * s.opacity * (1.0 - s.opacity);

    // Color (with optional degree-1 SH) through the [0, 1] clamp.
    let dir = view_direction(center, &g.mean);
    let mut d_dir = Vec3::zeros();
    for ch in 0..3 {
        let mut raw = g.color[ch];
        if let Some(sh) = &g.sh1 {
            raw += SH_C1 * (-dir.y * sh[0][ch] + dir.z * sh[1][ch] - dir.x * sh[2][ch]);
        }
        if !(0.0..=1.0).contains(&raw) {
            continue;
        }
        let gc = sg.color[ch];
        out.color[i][ch] += gc;
        if let Some(sh) = &g.sh1 {
            out.sh1[i][0][ch] += gc * SH_C1 * -dir.y;
            out.sh1[i][1][ch] += gc * SH_C1 * dir.z;
            out.sh1[i][2][ch] += gc * SH_C1 * -dir.x;
            d_dir.x += gc * SH_C1 * -sh[2][ch];
            d_dir.y += gc * SH_C1 * -sh[0][ch];
            d_dir.z += gc * SH_C1 * sh[1][ch];
        }
    }
    if g.sh1.is_some() {
        let dist = (g.mean - center).norm();
        if dist > 0.0 {
            out.mean[i] += (d_dir - dir * d_dir.dot(&dir)) / dist;
        }
    }

    // Conic -> 2D covariance: dL/dM = -K (dL/dK) K with K symmetric.
    let k = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let gk = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let gm: Matrix2<f64> = -(k * gk * k);

    let w = &cam.rotation;
    let pc = cam.world_to_camera(&g.mean);
    let j: Matrix2x3<f64> = projection_jacobian(cam, &pc);
    let scale = g.scale();
    let r = match rotation_from_quat(&g.rotation) {
        Ok(r) => r,
        Err(_) => return,
    };
    let m3 = r * Mat3::from_diagonal(&scale);
    let sigma = m3 * m3.transpose();
    let sigma_cam = w * sigma * w.transpose();

    let g_sigma_cam: Mat3 = j.transpose() * gm * j;
    let g_j: Matrix2x3<f64> = 2.0 * gm * j * sigma_cam;
    let g_sigma: Mat3 = w.transpose() * g_sigma_cam * w;
    let g_m3: Mat3 = 2.0 * g_sigma * m3;
    let mut g_r = Mat3::zeros();
    for col in 0..3 {
        let mut d_s = 0.0;
        for row in 0..3 {
            g_r[(row, col)] = g_m3[(row, col)] * scale[col];
            d_s += g_m3[(row, col)] * r[(row, col)];
        }
        out.log_scale[i][col] += d_s * scale[col];
    }
    let dq = rotation_quat_vjp(&g.rotation, &g_r);
    for c in 0..4 {
        out.rotation[i][c] += dq[c];
    }

    // Mean: through the projected center and through the Jacobian entries.
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let [gu, gv] = sg.mean2d;
    let mut d_pc = Vec3::new(gu * fx * iz, gv * fy * iz, -(gu * fx * pc.x + gv * fy * pc.y) * iz2);
    d_pc.x += g_j[(0, 2)] * -fx * iz2;
    d_pc.y += g_j[(1, 2)] * -fy * iz2;
    d_pc.z += g_j[(0, 0)] * -fx * iz2
        + g_j[(0, 2)] * 2.0 * fx * pc.x * iz2 * iz
        + g_j[(1, 1)] * -fy * iz2
        + g_j[(1, 2)] * 2.0 * fy * pc.y * iz2 * iz;
    out.mean[i] += w.transpose() * d_pc;
}
