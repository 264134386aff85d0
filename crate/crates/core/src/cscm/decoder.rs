//! Attribute networks mapping `[x̂ᵃ, view direction, f_h]` to the raw
//! attributes of an anchor's `k` Gaussians.

use rand::Rng;

use crate::nn::{BnMode, Init, Mlp, MlpCache};
use crate::params::{Grads, ParamStore};
use crate::scene::Vec3;

/// Raw per-slot network outputs, row-major over anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedAttributes {
    pub n: usize,
    pub k: usize,
    /// `n × k` opacity logits.
    pub opacity_logit: Vec<f64>,
    /// `n × k × 7`: quaternion delta (4) then log-scale delta (3).
    pub covariance: Vec<f64>,
    /// `n × k × 3` color logits.
    pub color_logit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDecoder {
    pub opacity: Mlp,
    pub covariance: Mlp,
    pub color: Mlp,
    pub k: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    n: usize,
    opacity: MlpCache,
    covariance: MlpCache,
    color: MlpCache,
}

impl AttributeDecoder {
    /// Output layers start at zero: identity rotation, the anchor's own
    /// offset scales, opacity ½ and mid-gray color.
    pub fn new(store: &mut ParamStore, k: usize, feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let n_in = 6 + feature_dim;
        Self {
            opacity: Mlp::new(store, "decoder.opacity", n_in, hidden, k, false, Init::Zero, rng),
            covariance: Mlp::new(store, "decoder.covariance", n_in, hidden, 7 * k, false, Init::Zero, rng),
            color: Mlp::new(store, "decoder.color", n_in, hidden, 3 * k, false, Init::Zero, rng),
            k,
            feature_dim,
        }
    }

    pub fn input(&self, normalized: &[Vec3], dirs: &[Vec3], f_h: &[f64]) -> Vec<f64> {
        let d = self.feature_dim;
        let mut x = Vec::with_capacity(normalized.len() * (6 + d));
        for (a, (p, v)) in normalized.iter().zip(dirs).enumerate() {
            x.extend_from_slice(p.as_slice());
            x.extend_from_slice(v.as_slice());
            x.extend_from_slice(&f_h[a * d..(a + 1) * d]);
        }
        x
    }

    pub fn forward(&self, store: &ParamStore, normalized: &[Vec3], dirs: &[Vec3], f_h: &[f64]) -> (DecodedAttributes, DecodeCache) {
        let n = normalized.len();
        let x = self.input(normalized, dirs, f_h);
        let (opacity_logit, opacity) = self.opacity.forward(store, x.clone(), n, BnMode::Eval);
        let (covariance, cov_cache) = self.covariance.forward(store, x.clone(), n, BnMode::Eval);
        let (color_logit, color) = self.color.forward(store, x, n, BnMode::Eval);
        let attrs = DecodedAttributes {
            n,
            k: self.k,
            opacity_logit,
            covariance,
            color_logit,
        };
        let cache = DecodeCache {
            n,
            opacity,
            covariance: cov_cache,
            color,
        };
        (attrs, cache)
    }

    /// Accumulates network gradients and returns `dL/df_h` (`n × D`).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DecodeCache,
        d_opacity: &[f64],
        d_covariance: &[f64],
        d_color: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let d = self.feature_dim;
        let width = 6 + d;
        let mut d_fh = vec![0.0; cache.n * d];
        for dx in [
            self.opacity.backward(store, &cache.opacity, d_opacity, grads),
            self.covariance.backward(store, &cache.covariance, d_covariance, grads),
            self.color.backward(store, &cache.color, d_color, grads),
        ] {
            for a in 0..cache.n {
                for c in 0..d {
                    d_fh[a * d + c] += dx[a * width + 6 + c];
                }
            }
        }
        d_fh
    }
}
