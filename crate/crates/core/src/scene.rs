//! Scene-domain value types shared by every other module: Gaussian
//! primitives, anchors, cameras, scene bounds, and the small amount of
//! rotation math (quaternion to matrix and its vector-Jacobian product)
//! that the rasterizer backward pass needs.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Real spherical-harmonic constant for the degree-1 band.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Minimum scale as a fraction of the scene diagonal.
pub const SCALE_FLOOR_FRACTION: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// World-space anisotropic Gaussian.
///
/// Scale is stored as a log, opacity as a logit and rotation as a raw
/// quaternion `[w, x, y, z]` that is normalized wherever it is consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// Base RGB color.
    pub color: [f64; 3],
    /// Degree-1 SH coefficients indexed `[basis][channel]`.
    pub sh1: Option<[[f64; 3]; 3]>,
}

impl GaussianPrimitive {
    pub fn new(mean: Vec3, scale: Vec3, rotation: [f64; 4], opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            log_scale: scale.map(f64::ln),
            rotation: normalize_quat(&rotation).unwrap_or([1.0, 0.0, 0.0, 0.0]),
            opacity_logit: logit(opacity),
            color,
            sh1: None,
        }
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Covariance3> {
        build_covariance(&self.scale(), &self.rotation)
    }

    /// Renormalize the stored quaternion in place.
    pub fn renormalize(&mut self) {
        if let Some(q) = normalize_quat(&self.rotation) {
            self.rotation = q;
        }
    }

    /// View-dependent color seen from `camera_center`, clamped to `[0, 1]`.
    pub fn color_from(&self, camera_center: &Vec3) -> [f64; 3] {
        let mut c = self.color;
        if let Some(sh) = &self.sh1 {
            let d = view_direction(camera_center, &self.mean);
            for ch in 0..3 {
                c[ch] += SH_C1 * (-d.y * sh[0][ch] + d.z * sh[1][ch] - d.x * sh[2][ch]);
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Unit direction from `from` towards `to`; zero when they coincide.
pub fn view_direction(from: &Vec3, to: &Vec3) -> Vec3 {
    let d = to - from;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vec3::zeros()
    }
}

/// Symmetric positive semi-definite 3x3 covariance `R S Sᵀ Rᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Mat3);

impl Covariance3 {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

pub fn normalize_quat(q: &[f64; 4]) -> Option<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        Some(q.map(|v| v / n))
    } else {
        None
    }
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_from_unit_quat(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
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

/// Rotation matrix of an arbitrary non-zero quaternion (normalized first).
pub fn rotation_from_quat(q: &[f64; 4]) -> Result<Mat3> {
    let u = normalize_quat(q)
        .ok_or_else(|| Error::InvalidParameter(format!("quaternion {q:?} cannot be normalized")))?;
    Ok(rotation_from_unit_quat(&u))
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub fn rotation_quat_vjp(q_raw: &[f64; 4], d_r: &Mat3) -> [f64; 4] {
    let norm = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = q_raw.map(|v| v / norm);
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dq = [dw, dx, dy, dz];
    // Project out the radial component, then undo the normalization scale.
    let radial: f64 = dq.iter().zip(&q).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (dq[i] - radial * q[i]) / norm;
    }
    out
}

/// `Σ = R S Sᵀ Rᵀ` for a positive scale vector and a (normalizable) quaternion.
pub fn build_covariance(scale: &Vec3, rotation: &[f64; 4]) -> Result<Covariance3> {
    if !scale.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite covariance input: scale {scale:?}, rotation {rotation:?}"
        )));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParameter(format!("scale must be positive: {scale:?}")));
    }
    let r = rotation_from_quat(rotation)?;
    let m = r * Mat3::from_diagonal(scale);
    let sigma = m * m.transpose();
    // Symmetrize so the invariant holds bit-exactly.
    Ok(Covariance3((sigma + sigma.transpose()) * 0.5))
}

/// Unnormalized Gaussian density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn eval_gaussian(g: &GaussianPrimitive, x: &Vec3) -> Result<f64> {
    let sigma = g.covariance()?;
    let inv = sigma
        .0
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::NumericDegenerate(format!("singular covariance for mean {:?}", g.mean)))?;
    let d = x - g.mean;
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

/// Scaffold point that spawns `k` neural Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position: Vec3,
    /// Dimensionless offsets, scaled by the anchor scale.
    pub offsets: Vec<Vec3>,
    pub log_anchor_scale: f64,
    pub feature: Vec<f64>,
    pub log_offset_scales: Vec<Vec3>,
}

impl Anchor {
    pub fn anchor_scale(&self) -> f64 {
        self.log_anchor_scale.exp()
    }
}

/// Position of one spawned Gaussian: `x_a + O · l_a`.
#[inline]
pub fn spawn_position(anchor: &Vec3, offset: &Vec3, anchor_scale: f64) -> Vec3 {
    anchor + offset * anchor_scale
}

/// Means of the `k` Gaussians spawned by an anchor.
pub fn spawn_gaussians(a: &Anchor) -> Vec<Vec3> {
    let l = a.anchor_scale();
    a.offsets.iter().map(|o| spawn_position(&a.position, o, l)).collect()
}

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space looks down `+z` with `+y` pointing down the image. Pixel
/// `(i, j)` covers `[i, i+1) × [j, j+1)`, so its center is at `(i+½, j+½)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera image size must be non-zero".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Mat3::identity()).abs().max();
        if !(err <= 1e-8) {
            return Err(Error::InvalidParameter(format!(
                "camera rotation not orthonormal (error {err:e})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction
    /// that should appear towards the top of the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: &Vec3,
        target: &Vec3,
        up: &Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(0.0)
            .ok_or_else(|| Error::InvalidParameter("look_at: eye equals target".into()))?;
        let right = forward
            .cross(up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParameter("look_at: up parallel to view".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (no depth test).
    pub fn project_camera_point(&self, pc: &Vec3) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    /// World-space unit direction of the ray through pixel coordinate `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Axis-aligned bounds plus the point-cloud statistics used for pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBounds {
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
    pub centroid: Vec3,
    /// Root-mean-square distance of the points to `centroid`.
    pub spatial_sigma: f64,
}

impl SceneBounds {
    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Configuration("scene bounds need at least one point".into()));
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let (centroid, spatial_sigma) = point_statistics(points);
        let bounds = Self {
            aabb_min: lo,
            aabb_max: hi,
            centroid,
            spatial_sigma,
        };
        bounds.check_extent()?;
        Ok(bounds)
    }

    fn check_extent(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.aabb_max[axis] > self.aabb_min[axis]) {
                return Err(Error::Configuration(format!(
                    "degenerate scene bounds on axis {axis}: [{}, {}]",
                    self.aabb_min[axis], self.aabb_max[axis]
                )));
            }
        }
        Ok(())
    }

    /// Same statistics, box grown by `fraction` of its extent on every side.
    pub fn expanded(&self, fraction: f64) -> Self {
        let pad = (self.aabb_max - self.aabb_min) * fraction;
        Self {
            aabb_min: self.aabb_min - pad,
            aabb_max: self.aabb_max + pad,
            ..self.clone()
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.aabb_max - self.aabb_min).norm()
    }

    /// Smallest admissible Gaussian scale for this scene.
    pub fn scale_floor(&self) -> f64 {
        SCALE_FLOOR_FRACTION * self.diagonal()
    }

    /// Maps `p` into `[0, 1]³`, clamping points outside the box.
    pub fn normalize(&self, p: &Vec3) -> Result<Vec3> {
        self.check_extent()?;
        let mut out = Vec3::zeros();
        for axis in 0..3 {
            let lo = self.aabb_min[axis];
            let hi = self.aabb_max[axis];
            out[axis] = (p[axis].clamp(lo, hi) - lo) / (hi - lo);
        }
        Ok(out)
    }

    pub fn refresh_statistics(&mut self, points: &[Vec3]) {
        if !points.is_empty() {
            let (c, s) = point_statistics(points);
            self.centroid = c;
            self.spatial_sigma = s;
        }
    }
}

fn point_statistics(points: &[Vec3]) -> (Vec3, f64) {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let ms = points.iter().map(|p| (p - centroid).norm_squared()).sum::<f64>() / n;
    (centroid, ms.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneAxis {
    Xy,
    Xz,
    Yz,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Xz, PlaneAxis::Yz];

    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneAxis::Xy => (0, 1),
            PlaneAxis::Xz => (0, 2),
            PlaneAxis::Yz => (1, 2),
        }
    }
}

/// Drops the coordinate orthogonal to `plane` and normalizes to `[0, 1]²`.
pub fn project_to_plane(p: &Vec3, plane: PlaneAxis, bounds: &SceneBounds) -> Result<[f64; 2]> {
    let n = bounds.normalize(p)?;
    let (a, b) = plane.axes();
    Ok([n[a], n[b]])
}
