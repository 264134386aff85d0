//! Cross-view consistency loss over structurally similar view pairs and the
//! geometric pruning mask for floaters and outliers.
//!
//! Distances are compared against thresholds after dividing by a scene unit,
//! by default the diagonal of the training camera centers' bounding box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{sign, ssim, SsimParams};
use crate::scene::{Camera, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub i: usize,
    pub j: usize,
    /// SSIM between the two ground-truth images.
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneThresholds {
    /// Maximum ray distance `d_I`, in scene units.
    pub ray: f64,
    /// Camera proximity `d_C` below which a point counts as a floater, in
    /// scene units.
    pub camera: f64,
    /// Outlier threshold on `d_O` in multiples of the spatial sigma.
    pub outlier_sigmas: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        Self {
            ray: 0.01,
            camera: 0.5,
            outlier_sigmas: 3.0,
        }
    }
}

/// Scene-level quantities the mask is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneContext {
    pub unit: f64,
    pub centroid: Vec3,
    pub sigma: f64,
    pub thresholds: PruneThresholds,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneDecision {
    pub mask: Vec<bool>,
    /// World-unit distances per point.
    pub d_i: Vec<f64>,
    pub d_c: Vec<f64>,
    pub d_o: Vec<f64>,
    pub near_camera: Vec<bool>,
    pub outlier: Vec<bool>,
}

/// Summary of one pruning application, one JSON line per record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub iteration: u64,
    pub cameras: Vec<usize>,
    pub flagged_near_camera: usize,
    pub flagged_outlier: usize,
    pub removed_gaussians: usize,
    pub removed_anchors: usize,
    pub surviving_gaussians: usize,
    pub surviving_anchors: usize,
}

/// All unordered pairs whose ground-truth SSIM exceeds `threshold`.
pub fn select_view_pairs(images: &[ImageBuffer], threshold: f64, params: &SsimParams) -> Result<Vec<ViewPair>> {
    let mut pairs = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let s = ssim(&images[i], &images[j], params)?;
            if s > threshold {
                pairs.push(ViewPair { i, j, ssim: s });
            }
        }
    }
    Ok(pairs)
}

/// `SSIM(gt_i, gt_j) · mean|(gt_i − r_i) − (gt_j − r_j)|` with gradients
/// with respect to both renders. Pairs with non-positive weight contribute
/// nothing.
pub fn cvc_loss(
    pair: &ViewPair,
    gt_i: &ImageBuffer,
    gt_j: &ImageBuffer,
    render_i: &ImageBuffer,
    render_j: &ImageBuffer,
) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    for other in [gt_j, render_i, render_j] {
        if other.dims() != gt_i.dims() {
            return Err(Error::Usage(format!(
                "cross-view images must share dimensions: {:?} vs {:?}",
                gt_i.dims(),
                other.dims()
            )));
        }
    }
    let (w, h) = gt_i.dims();
    let mut gi = ImageBuffer::new(w, h);
    let mut gj = ImageBuffer::new(w, h);
    if pair.ssim <= 0.0 {
        return Ok((0.0, gi, gj));
    }
    let n = gt_i.data().len() as f64;
    let mut sum = 0.0;
    for q in 0..gt_i.data().len() {
        let ri = gt_i.data()[q] - render_i.data()[q];
        let rj = gt_j.data()[q] - render_j.data()[q];
        let d = ri - rj;
        sum += d.abs();
        let s = sign(d) * pair.ssim / n;
        // d/d(render_i) of |ri − rj| is −sign, d/d(render_j) is +sign.
        gi.data_mut()[q] = -s;
        gj.data_mut()[q] = s;
    }
    Ok((pair.ssim * sum / n, gi, gj))
}

/// Perpendicular distance from `p` to the ray through the center of the
/// pixel `p` projects into. Infinite when `p` is behind the camera or
/// projects outside the image.
pub fn ray_distance(p: &Vec3, cam: &Camera) -> f64 {
    let pc = cam.world_to_camera(p);
    if pc.z <= 0.0 {
        return f64::INFINITY;
    }
    let [u, v] = cam.project_camera_point(&pc);
    if !(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
        return f64::INFINITY;
    }
    let center = [u.floor() + 0.5, v.floor() + 0.5];
    point_ray_distance(p, cam, center)
}

/// Distance from `p` to the camera ray through pixel coordinate `uv`
/// (forward half-line).
pub fn point_ray_distance(p: &Vec3, cam: &Camera, uv: [f64; 2]) -> f64 {
    let origin = cam.center();
    let dir = cam.ray_direction(uv[0], uv[1]);
    let rel = p - origin;
    let t = rel.dot(&dir).max(0.0);
    (rel - dir * t).norm()
}

/// Exact minimum distance from `p` to any pixel-center ray of `cam`.
pub fn nearest_ray_distance(p: &Vec3, cam: &Camera) -> f64 {
    let mut best = f64::INFINITY;
    for y in 0..cam.height {
        for x in 0..cam.width {
            best = best.min(point_ray_distance(p, cam, [x as f64 + 0.5, y as f64 + 0.5]));
        }
    }
    best
}

/// Flags points lying on a camera ray that are either close to the camera
/// or far from the scene centroid.
pub fn prune_mask(points: &[Vec3], cam: &Camera, ctx: &PruneContext) -> PruneDecision {
    let center = cam.center();
    let t = &ctx.thresholds;
    let mut out = PruneDecision::default();
    for p in points {
        let d_i = ray_distance(p, cam);
        let d_c = (p - center).norm();
        let d_o = (p - ctx.centroid).norm();
        let on_ray = d_i / ctx.unit < t.ray;
        let near = d_c / ctx.unit < t.camera;
        let far = d_o > t.outlier_sigmas * ctx.sigma;
        out.d_i.push(d_i);
        out.d_c.push(d_c);
        out.d_o.push(d_o);
        out.near_camera.push(on_ray && near);
        out.outlier.push(on_ray && far);
        out.mask.push(on_ray && (near || far));
    }
    out
}

/// Union of the masks over several cameras.
pub fn combine_decisions(decisions: &[PruneDecision]) -> Vec<bool> {
    let n = decisions.first().map_or(0, |d| d.mask.len());
    (0..n).map(|i| decisions.iter().any(|d| d.mask[i])).collect()
}

/// Diagonal of the bounding box of the camera centers; used as the
/// distance unit for pruning thresholds.
pub fn camera_unit(cameras: &[Camera]) -> Option<f64> {
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let first = *centers.first()?;
    let (lo, hi) = centers.iter().fold((first, first), |(lo, hi), c| (lo.inf(c), hi.sup(c)));
    let d = (hi - lo).norm();
    (d > 0.0).then_some(d)
}
