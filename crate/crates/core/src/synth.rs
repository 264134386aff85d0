//! Seeded synthetic scenes: colored Gaussians seen by a ring of cameras,
//! ground-truth renders and an initial point cloud with labeled artifacts.
//!
//! Floaters sit on a pixel ray close to a camera; outliers sit on a pixel
//! ray far beyond the scene. Both are injected only into the point cloud,
//! never into the ground-truth images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colmap::{write_file, write_model, write_points, Point3D, PosedImage};
use crate::cvpm::camera_unit;
use crate::error::{Error, Result};
use crate::image::{write_ppm, ImageBuffer};
use crate::raster::render_view;
use crate::scene::{Camera, GaussianPrimitive, SceneBounds, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub gaussians: usize,
    pub views: usize,
    pub size: usize,
    pub fov_degrees: f64,
    pub ring_radius: f64,
    pub height: f64,
    /// Ground-truth means are drawn uniformly from a ball of this radius.
    pub scene_radius: f64,
    /// Range of the ground-truth scales.
    pub min_scale: f64,
    pub max_scale: f64,
    pub floaters: usize,
    pub outliers: usize,
    /// Floater distance to its camera, as a fraction of the camera unit.
    pub floater_distance: [f64; 2],
    /// Uniform jitter added to ground-truth means in the point cloud.
    pub point_jitter: f64,
    /// Move every ground-truth mean onto the nearest pixel ray of some camera.
    pub snap_to_rays: bool,
    pub held_out: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussians: 150,
            views: 12,
            size: 64,
            fov_degrees: 40.0,
            ring_radius: 0.5 * std::f64::consts::FRAC_1_SQRT_2,
            height: 0.7,
            scene_radius: 0.2,
            min_scale: 0.012,
            max_scale: 0.035,
            floaters: 20,
            outliers: 10,
            floater_distance: [0.1, 0.4],
            point_jitter: 0.01,
            snap_to_rays: false,
            held_out: vec![3, 9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Clean,
    Floater,
    Outlier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub label: PointLabel,
    /// Camera whose pixel ray the artifact lies on.
    pub camera: usize,
    pub gaussian: GaussianPrimitive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SynthConfig,
    pub truth: Vec<GaussianPrimitive>,
    pub artifacts: Vec<Artifact>,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    /// Initial point cloud: jittered truth means followed by the artifacts.
    pub points: Vec<Vec3>,
    pub labels: Vec<PointLabel>,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    points: Vec<PointLabel>,
    artifact_cameras: Vec<usize>,
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (0.1..=1.0).contains(&n) {
            return q.map(|v| v / n);
        }
    }
}

/// Cameras evenly spaced on a horizontal ring, all looking at the origin.
pub fn ring_cameras(config: &SynthConfig) -> Result<Vec<Camera>> {
    let f = config.size as f64 / 2.0 / (config.fov_degrees.to_radians() / 2.0).tan();
    (0..config.views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / config.views as f64;
            let eye = Vec3::new(config.ring_radius * a.cos(), config.ring_radius * a.sin(), config.height);
            Camera::look_at(&eye, &Vec3::zeros(), &Vec3::z(), f, f, config.size, config.size)
        })
        .collect()
}

/// Unit direction of the ray through the center of pixel `(px, py)`.
fn pixel_ray(cam: &Camera, px: usize, py: usize) -> Vec3 {
    cam.ray_direction(px as f64 + 0.5, py as f64 + 0.5)
}

fn random_pixel_ray(cam: &Camera, rng: &mut impl Rng) -> Vec3 {
    pixel_ray(cam, rng.gen_range(0..cam.width), rng.gen_range(0..cam.height))
}

/// Moves `p` onto the ray through the pixel it projects into, keeping its
/// distance along the ray. `None` when `p` is off-image or behind `cam`.
pub fn snap_to_ray(p: &Vec3, cam: &Camera) -> Option<Vec3> {
    let pc = cam.world_to_camera(p);
    if pc.z <= 0.0 {
        return None;
    }
    let [u, v] = cam.project_camera_point(&pc);
    if !(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64) {
        return None;
    }
    let d = pixel_ray(cam, u as usize, v as usize);
    let c = cam.center();
    Some(c + d * (p - c).dot(&d))
}

impl SyntheticScene {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        if config.gaussians == 0 || config.views == 0 || config.size == 0 {
            return Err(Error::Configuration("synthetic scene needs Gaussians, views and pixels".into()));
        }
        if !(config.min_scale > 0.0 && config.max_scale >= config.min_scale) {
            return Err(Error::Configuration("bad scale range".into()));
        }
        if let Some(&v) = config.held_out.iter().find(|&&v| v >= config.views) {
            return Err(Error::Configuration(format!("held-out view {v} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cameras = ring_cameras(config)?;
        let unit = camera_unit(&cameras).unwrap_or(1.0);

        let (lo, hi) = (config.min_scale.ln(), config.max_scale.ln());
        let mut truth: Vec<GaussianPrimitive> = (0..config.gaussians)
            .map(|_| {
                let mean = loop {
                    let p = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                    if p.norm() <= 1.0 {
                        break p * config.scene_radius;
                    }
                };
                let scale = Vec3::from_fn(|_, _| rng.gen_range(lo..=hi).exp());
                let color = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
                GaussianPrimitive::new(mean, scale, random_rotation(&mut rng), rng.gen_range(0.6..0.95), color)
            })
            .collect();
        if config.snap_to_rays {
            for g in &mut truth {
                let start = rng.gen_range(0..cameras.len());
                g.mean = (0..cameras.len())
                    .find_map(|k| snap_to_ray(&g.mean, &cameras[(start + k) % cameras.len()]))
                    .ok_or_else(|| Error::Configuration("a Gaussian is outside every camera".into()))?;
            }
        }

        let mut artifacts = Vec::new();
        let [near_lo, near_hi] = config.floater_distance;
        for _ in 0..config.floaters {
            let camera = rng.gen_range(0..cameras.len());
            let cam = &cameras[camera];
            let t = rng.gen_range(near_lo..near_hi) * unit;
            let mean = cam.center() + random_pixel_ray(cam, &mut rng) * t;
            artifacts.push(Artifact {
                label: PointLabel::Floater,
                camera,
                gaussian: GaussianPrimitive::new(mean, Vec3::repeat(config.min_scale), [1.0, 0.0, 0.0, 0.0], 0.5, [0.5; 3]),
            });
        }
        let outlier_rays: Vec<(usize, Vec3)> = (0..config.outliers)
            .map(|_| {
                let camera = rng.gen_range(0..cameras.len());
                (camera, random_pixel_ray(&cameras[camera], &mut rng))
            })
            .collect();
        let outlier_spread: Vec<f64> = (0..config.outliers).map(|_| rng.gen_range(1.0..1.2)).collect();
        let base: Vec<Vec3> = truth
            .iter()
            .map(|g| g.mean)
            .chain(artifacts.iter().map(|a| a.gaussian.mean))
            .collect();
        let clean_sigma = SceneBounds::from_points(&base).map(|b| b.spatial_sigma).unwrap_or(config.scene_radius);
        let mut distance = 4.0 * clean_sigma;
        let mut attempts = 0;
        let outliers = loop {
            let placed: Vec<Vec3> = outlier_rays
                .iter()
                .zip(&outlier_spread)
                .map(|(&(camera, d), s)| {
                    let c = cameras[camera].center();
                    // Far root of |c + t·d| = r along the ray.
                    let r = distance * s;
                    let b = d.dot(&c);
                    let t = -b + (b * b - c.norm_squared() + r * r).max(0.0).sqrt();
                    c + d * t
                })
                .collect();
            let all: Vec<Vec3> = base.iter().chain(&placed).copied().collect();
            let ok = match SceneBounds::from_points(&all) {
                Ok(b) => placed.iter().all(|p| (p - b.centroid).norm() > 3.3 * b.spatial_sigma),
                Err(_) => true,
            };
            if ok {
                break placed;
            }
            attempts += 1;
            if attempts == 60 {
                // The outliers dominate the spread; no distance satisfies the test.
                return Err(Error::Configuration(format!(
                    "{} outliers cannot all exceed 3 sigma among {} points",
                    config.outliers,
                    all.len()
                )));
            }
            distance *= 1.25;
        };
        for ((camera, _), mean) in outlier_rays.into_iter().zip(outliers) {
            artifacts.push(Artifact {
                label: PointLabel::Outlier,
                camera,
                gaussian: GaussianPrimitive::new(mean, Vec3::repeat(config.min_scale), [1.0, 0.0, 0.0, 0.0], 0.5, [0.5; 3]),
            });
        }

        let images = cameras.iter().map(|c| render_view(&truth, c).color).collect();
        let j = config.point_jitter;
        let mut points: Vec<Vec3> = truth
            .iter()
            .map(|g| g.mean + Vec3::from_fn(|_, _| if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 }))
            .collect();
        let mut labels = vec![PointLabel::Clean; points.len()];
        for a in &artifacts {
            points.push(a.gaussian.mean);
            labels.push(a.label);
        }
        Ok(Self {
            config: config.clone(),
            truth,
            artifacts,
            cameras,
            images,
            points,
            labels,
        })
    }

    pub fn image_name(i: usize) -> String {
        format!("view_{i:02}.ppm")
    }

    /// Writes a dataset directory readable by [`crate::dataset::Dataset::load`]
    /// plus `labels.json` for the point cloud.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let posed: Vec<PosedImage> = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| PosedImage {
                name: Self::image_name(i),
                camera: c.clone(),
            })
            .collect();
        for (p, img) in posed.iter().zip(&self.images) {
            write_ppm(images_dir.join(&p.name), img)?;
        }
        write_model(dir, &posed)?;
        let points: Vec<Point3D> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, &position)| Point3D {
                id: i as u64 + 1,
                position,
                color: [128; 3],
            })
            .collect();
        write_points(&dir.join("points3D.txt"), &points)?;
        let test: String = self.config.held_out.iter().map(|&i| Self::image_name(i) + "\n").collect();
        write_file(&dir.join("test.txt"), &test)?;
        let labels = LabelFile {
            points: self.labels.clone(),
            artifact_cameras: self.artifacts.iter().map(|a| a.camera).collect(),
        };
        write_file(
            &dir.join("labels.json"),
            &serde_json::to_string_pretty(&labels).expect("labels serialize"),
        )
    }
}

/// Reads the per-point labels written next to a synthetic dataset.
pub fn read_labels(dir: &Path) -> Result<Vec<PointLabel>> {
    let path = dir.join("labels.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: LabelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(file.points)
}
