//! Scene generators and comparison helpers shared by unit tests,
//! integration tests and the acceptance suite.

use rand::Rng;

use crate::cscm::CscmConfig;
use crate::model::{ModelConfig, NeuralScene};
use crate::params::ParamGroup;
use crate::scene::{Camera, GaussianPrimitive, Vec3};

/// Central finite difference of `f` with step `h`.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `true` when `analytic` and `numeric` agree to relative error `rel`,
/// or differ by at most `abs_floor`.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff <= rel * analytic.abs().max(numeric.abs())
}

/// Camera on the `-y` axis at `distance`, looking at the origin with `+z` up.
pub fn front_camera(distance: f64, focal: f64, size: usize) -> Camera {
    Camera::look_at(
        &Vec3::new(0.0, -distance, 0.0),
        &Vec3::zeros(),
        &Vec3::z(),
        focal,
        focal,
        size,
        size,
    )
    .expect("valid camera")
}

pub fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 {
            return q.map(|v| v / n);
        }
    }
}

/// `n` Gaussians within `extent` of the origin with colors strictly inside
/// `(0, 1)` so that no clamp is active.
pub fn random_gaussians(rng: &mut impl Rng, n: usize, extent: f64, with_sh: bool) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let mean = Vec3::new(
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
            );
            let scale = Vec3::new(
                rng.gen_range(0.15..0.45),
                rng.gen_range(0.15..0.45),
                rng.gen_range(0.15..0.45),
            );
            let mut g = GaussianPrimitive::new(
                mean,
                scale,
                random_quat(rng),
                rng.gen_range(0.3..0.9),
                [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)],
            );
            if with_sh {
                g.sh1 = Some(std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-0.1..0.1))));
            }
            g
        })
        .collect()
}

/// Small model for finite-difference checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        k: 3,
        offset_spread: 0.8,
        scale_ratio: 0.6,
        spacing_neighbors: 1,
        feature_init: 0.5,
        cscm: CscmConfig {
            levels: 2,
            plane_resolution: 4,
            plane_channels: 2,
            feature_dim: 4,
            grid_resolution: 1,
            hidden: 4,
            anchor_feature_dim: 2,
            attention: true,
        },
    }
}

/// Randomizes every learnable tensor except the per-anchor ones so that
/// all decoder outputs and plane samples are generic.
pub fn randomize_networks(scene: &mut NeuralScene, rng: &mut impl Rng, scale: f64) {
    for id in scene.store.ids().collect::<Vec<_>>() {
        let t = scene.store.tensor(id);
        if matches!(t.group, ParamGroup::Mlp | ParamGroup::Planes) && !t.name.contains("bn") {
            scene.store.get_mut(id).iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
    }
}
