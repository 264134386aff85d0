//! Tile-based Gaussian rasterizer.
//!
//! Each Gaussian is projected to a 2D splat (perspective Jacobian at the
//! mean plus a 0.3 px² low-pass term), binned into 16×16 tiles by a
//! conservative footprint, sorted front to back per tile, and alpha
//! composited per pixel:
//!
//! ```text
//! C = Σᵢ cᵢ σᵢ Πⱼ<ᵢ (1 − σⱼ),   σᵢ = αᵢ · G′ᵢ(x′)
//! ```
//!
//! A splat is skipped at a pixel when `½ dᵀ Σ′⁻¹ d > 15` (`G′ < 3.1e-7`),
//! and a pixel stops accumulating once its transmittance falls below
//! `1e-4` (the contributor that crossed the threshold is kept). Ties in
//! depth are broken by input index. The sort itself carries no gradient.
//!
//! The forward pass keeps every pixel's contributor list together with the
//! transmittance in front of each contributor, which the backward pass
//! walks back to front without dividing by `1 − σ`.

mod backward;

pub use backward::{render_backward, RenderGradients};

use rayon::prelude::*;

use crate::image::ImageBuffer;
use crate::scene::{Camera, GaussianPrimitive, Mat3, Vec3};

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every projected covariance (pixels²).
pub const LOWPASS: f64 = 0.3;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Largest Mahalanobis half-power `½ dᵀ Σ′⁻¹ d` that still contributes.
pub const POWER_CUTOFF: f64 = 15.0;
pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Splats whose camera-space depth is at or below this are culled.
    pub near: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { near: DEFAULT_NEAR }
    }
}

/// A Gaussian after projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SplattedGaussian2D {
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Projected covariance `[xx, xy, yy]` including the low-pass term.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Footprint radius in pixels beyond which the splat never contributes.
    pub radius: f64,
}

impl SplattedGaussian2D {
    /// `½ dᵀ Σ′⁻¹ d` at pixel-space point `(px, py)`.
    #[inline]
    pub fn half_power(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.conic;
        0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
    }

    /// Half-widths along x and y of the region where `half_power ≤ POWER_CUTOFF`.
    #[inline]
    pub fn extent(&self) -> [f64; 2] {
        let k = 2.0 * POWER_CUTOFF * (1.0 + 1e-9);
        [(k * self.cov2d[0]).sqrt(), (k * self.cov2d[2]).sqrt()]
    }
}

/// Perspective Jacobian of `(fx x/z + cx, fy y/z + cy)` at camera point `pc`.
pub(crate) fn projection_jacobian(cam: &Camera, pc: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * pc.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * pc.y * iz * iz,
    )
}

/// Projects one Gaussian, or returns `None` when it is culled (behind the
/// near plane, degenerate, or with a footprint entirely off-image).
pub fn project_gaussian(
    g: &GaussianPrimitive,
    index: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> Option<SplattedGaussian2D> {
    let pc = cam.world_to_camera(&g.mean);
    if !(pc.z > settings.near) {
        return None;
    }
    let sigma = g.covariance().ok()?.0;
    let sigma_cam: Mat3 = cam.rotation * sigma * cam.rotation.transpose();
    let j = projection_jacobian(cam, &pc);
    let cov = j * sigma_cam * j.transpose();
    let (a, b, c) = (cov[(0, 0)] + LOWPASS, cov[(0, 1)], cov[(1, 1)] + LOWPASS);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (2.0 * POWER_CUTOFF * lambda_max).sqrt();
    let mean2d = cam.project_camera_point(&pc);
    if mean2d[0] + radius < 0.0
        || mean2d[1] + radius < 0.0
        || mean2d[0] - radius > cam.width as f64
        || mean2d[1] - radius > cam.height as f64
    {
        return None;
    }
    Some(SplattedGaussian2D {
        index,
        mean2d,
        cov2d: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: pc.z,
        opacity: g.opacity(),
        color: g.color_from(&cam.center()),
        radius,
    })
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    /// Accumulated opacity `1 − T_final`, row-major.
    pub alpha: Vec<f64>,
    /// Expected depth of the covered part (`Σ zᵢ σᵢ Tᵢ / alpha`), 0 where empty.
    pub depth: Vec<f64>,
    pub contributors: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Contribution {
    /// Index into the owning tile's sorted splat list.
    pub local: u32,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
    /// `exp(-half_power)` at the pixel.
    pub gauss: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct TileState {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Splat indices (into `ForwardState::splats`) sorted front to back.
    pub order: Vec<u32>,
    /// `pixel_start[p]..pixel_start[p+1]` indexes `contribs` for the
    /// tile's p-th pixel in row-major tile order.
    pub pixel_start: Vec<u32>,
    pub contribs: Vec<Contribution>,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub(crate) camera: Camera,
    pub(crate) n_gaussians: usize,
    pub(crate) splats: Vec<SplattedGaussian2D>,
    pub(crate) tiles: Vec<TileState>,
}

impl ForwardState {
    pub fn splats(&self) -> &[SplattedGaussian2D] {
        &self.splats
    }

    /// Contributors of pixel `(x, y)` front to back as
    /// `(gaussian index, transmittance in front, σ)`.
    pub fn pixel_trace(&self, x: usize, y: usize) -> Vec<(usize, f64, f64)> {
        let tiles_x = self.camera.width.div_ceil(TILE_SIZE);
        let tile = &self.tiles[(y / TILE_SIZE) * tiles_x + x / TILE_SIZE];
        let p = (y - tile.y0) * (tile.x1 - tile.x0) + (x - tile.x0);
        let range = tile.pixel_start[p] as usize..tile.pixel_start[p + 1] as usize;
        tile.contribs[range]
            .iter()
            .map(|c| {
                let s = &self.splats[tile.order[c.local as usize] as usize];
                (s.index, c.transmittance, s.opacity * c.gauss)
            })
            .collect()
    }
}

/// Renders `gaussians` from `cam` and keeps the state for [`render_backward`].
pub fn render(gaussians: &[GaussianPrimitive], cam: &Camera, settings: &RenderSettings) -> (RenderOutput, ForwardState) {
    let splats: Vec<SplattedGaussian2D> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, cam, settings))
        .collect();

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        // Pixel centers sit at +0.5, so a tile's centers span [x0+0.5, x1-0.5].
        let [ex, ey] = s.extent();
        let lo_x = ((s.mean2d[0] - ex - 0.5) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let lo_y = ((s.mean2d[1] - ey - 0.5) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let hi_x = ((s.mean2d[0] + ex - 0.5) / TILE_SIZE as f64).floor();
        let hi_y = ((s.mean2d[1] + ey - 0.5) / TILE_SIZE as f64).floor();
        if hi_x < 0.0 || hi_y < 0.0 {
            continue;
        }
        let hi_x = (hi_x as usize).min(tiles_x - 1);
        let hi_y = (hi_y as usize).min(tiles_y - 1);
        for ty in lo_y..=hi_y {
            for tx in lo_x..=hi_x {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    for bin in &mut bins {
        bin.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
        });
    }

    struct TileOut {
        state: TileState,
        color: Vec<[f64; 3]>,
        alpha: Vec<f64>,
        depth: Vec<f64>,
    }

    let outputs: Vec<TileOut> = bins
        .into_par_iter()
        .enumerate()
        .map(|(t, order)| {
            let x0 = (t % tiles_x) * TILE_SIZE;
            let y0 = (t / tiles_x) * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(cam.width);
            let y1 = (y0 + TILE_SIZE).min(cam.height);
            let npix = (x1 - x0) * (y1 - y0);
            let mut pixel_start = Vec::with_capacity(npix + 1);
            let mut contribs = Vec::new();
            let mut color = Vec::with_capacity(npix);
            let mut alpha = Vec::with_capacity(npix);
            let mut depth = Vec::with_capacity(npix);
            let extents: Vec<[f64; 2]> = order.iter().map(|&si| splats[si as usize].extent()).collect();
            let mut row: Vec<u32> = Vec::with_capacity(order.len());
            pixel_start.push(0u32);
            for y in y0..y1 {
                let py = y as f64 + 0.5;
                row.clear();
                row.extend((0..order.len() as u32).filter(|&l| {
                    (py - splats[order[l as usize] as usize].mean2d[1]).abs() <= extents[l as usize][1]
                }));
                for x in x0..x1 {
                    let px = x as f64 + 0.5;
                    let mut t_acc = 1.0;
                    let mut c = [0.0; 3];
                    let mut z = 0.0;
                    for &local in &row {
                        let s = &splats[order[local as usize] as usize];
                        if (px - s.mean2d[0]).abs() > extents[local as usize][0] {
                            continue;
                        }
                        let hp = s.half_power(px, py);
                        if hp > POWER_CUTOFF {
                            continue;
                        }
                        let gauss = (-hp).exp();
                        let sigma = s.opacity * gauss;
                        contribs.push(Contribution {
                            local,
                            transmittance: t_acc,
                            gauss,
                        });
                        let w = sigma * t_acc;
                        for ch in 0..3 {
                            c[ch] += s.color[ch] * w;
                        }
                        z += s.depth * w;
                        t_acc *= 1.0 - sigma;
                        if t_acc < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    pixel_start.push(contribs.len() as u32);
                    let a = 1.0 - t_acc;
                    color.push(c);
                    alpha.push(a);
                    depth.push(if a > 0.0 { z / a } else { 0.0 });
                }
            }
            TileOut {
                state: TileState {
                    x0,
                    y0,
                    x1,
                    y1,
                    order,
                    pixel_start,
                    contribs,
                },
                color,
                alpha,
                depth,
            }
        })
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut color = ImageBuffer::new(w, h);
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut contributors = vec![0u32; w * h];
    let mut tiles = Vec::with_capacity(outputs.len());
    for out in outputs {
        let st = &out.state;
        let mut p = 0;
        for y in st.y0..st.y1 {
            for x in st.x0..st.x1 {
                let idx = y * w + x;
                for ch in 0..3 {
                    color.set(x, y, ch, out.color[p][ch]);
                }
                alpha[idx] = out.alpha[p];
                depth[idx] = out.depth[p];
                contributors[idx] = st.pixel_start[p + 1] - st.pixel_start[p];
                p += 1;
            }
        }
        tiles.push(out.state);
    }

    (
        RenderOutput {
            color,
            alpha,
            depth,
            contributors,
        },
        ForwardState {
            camera: cam.clone(),
            n_gaussians: gaussians.len(),
            splats,
            tiles,
        },
    )
}

/// Forward-only convenience wrapper.
pub fn render_view(gaussians: &[GaussianPrimitive], cam: &Camera) -> RenderOutput {
    render(gaussians, cam, &RenderSettings::default()).0
}
