//! Anchor-based neural scene: fixed anchor positions, learnable per-anchor
//! tensors, the feature module and the attribute decoder.
//!
//! Slot `s` of anchor `a` spawns a Gaussian at `xᵃ + O_s·lᵃ` whose opacity,
//! rotation, scale and color come from the decoder. Slots removed by pruning
//! are masked; an anchor is dropped once all of its slots are gone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cscm::{AnchorParams, AttributeDecoder, Cscm, CscmConfig, HdeCache};
use crate::error::{Error, Result};
use crate::nn::BnMode;
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::raster::{render_view, RenderGradients, RenderOutput};
use crate::scene::{sigmoid, view_direction, Camera, GaussianPrimitive, SceneBounds, Vec3};

/// Margin added around the anchor box before normalizing coordinates.
pub const BOUNDS_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Gaussians spawned per anchor.
    pub k: usize,
    /// Initial offsets are drawn from `U(-spread, spread)³`.
    pub offset_spread: f64,
    /// Initial Gaussian scale as a fraction of the anchor spacing.
    pub scale_ratio: f64,
    /// Neighbors averaged for the anchor spacing estimate.
    pub spacing_neighbors: usize,
    pub feature_init: f64,
    pub cscm: CscmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 5,
            offset_spread: 0.5,
            scale_ratio: 0.5,
            spacing_neighbors: 3,
            feature_init: 0.1,
            cscm: CscmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralScene {
    pub config: ModelConfig,
    pub positions: Vec<Vec3>,
    /// Normalization box plus point statistics.
    pub bounds: SceneBounds,
    pub scale_floor: f64,
    pub store: ParamStore,
    pub anchors: AnchorParams,
    /// `n × k` buffer, 1 for live slots.
    pub slot_alive: ParamId,
    pub cscm: Cscm,
    pub decoder: AttributeDecoder,
    /// Feature levels in use; grows with the training schedule.
    pub active_levels: usize,
    normalized: Vec<Vec3>,
}

/// Location of one rendered Gaussian in the anchor tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotRef {
    pub anchor: u32,
    pub slot: u32,
}

#[derive(Clone, Debug)]
pub struct ViewCache {
    decode: crate::cscm::DecodeCache,
    slots: Vec<SlotRef>,
    floored: Vec<[bool; 3]>,
    colors: Vec<[f64; 3]>,
}

impl ViewCache {
    pub fn slots(&self) -> &[SlotRef] {
        &self.slots
    }
}

/// Box used to normalize anchor coordinates: points farther than three
/// standard deviations from the centroid are left out so a few stray points
/// do not stretch the feature planes, then a margin is added.
pub fn normalization_bounds(points: &[Vec3]) -> Result<SceneBounds> {
    let all = SceneBounds::from_points(points)?;
    let inliers: Vec<Vec3> = points
        .iter()
        .filter(|p| (*p - all.centroid).norm() <= 3.0 * all.spatial_sigma)
        .copied()
        .collect();
    let mut b = match SceneBounds::from_points(&inliers) {
        Ok(b) if inliers.len() >= 2 => b,
        _ => all.clone(),
    };
    b.centroid = all.centroid;
    b.spatial_sigma = all.spatial_sigma;
    Ok(b.expanded(BOUNDS_MARGIN))
}

/// Mean distance from each point to its `k` nearest neighbors.
pub fn neighbor_spacing(points: &[Vec3], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            let k = k.min(d.len());
            if k == 0 {
                return 0.0;
            }
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

impl NeuralScene {
    pub fn from_points(points: &[Vec3], config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::Configuration("k must be at least 1".into()));
        }
        config.cscm.validate()?;
        let bounds = normalization_bounds(points)?;
        let n = points.len();
        let k = config.k;
        let f = config.cscm.anchor_feature_dim;
        let scale_floor = bounds.scale_floor();
        let fallback = bounds.diagonal() * 1e-2;
        let spacing: Vec<f64> = neighbor_spacing(points, config.spacing_neighbors)
            .into_iter()
            .map(|d| if d > scale_floor { d } else { fallback })
            .collect();

        let mut store = ParamStore::new();
        let spread = config.offset_spread;
        let offsets: Vec<f64> = (0..n * k * 3)
            .map(|_| if spread > 0.0 { rng.gen_range(-spread..spread) } else { 0.0 })
            .collect();
        let log_l: Vec<f64> = spacing.iter().map(|d| d.ln()).collect();
        let fi = config.feature_init;
        let feature: Vec<f64> = (0..n * f).map(|_| if fi > 0.0 { rng.gen_range(-fi..fi) } else { 0.0 }).collect();
        let log_s: Vec<f64> = spacing
            .iter()
            .flat_map(|d| std::iter::repeat((d * config.scale_ratio).max(scale_floor).ln()).take(k * 3))
            .collect();
        let anchors = AnchorParams {
            offsets: store.add_per_anchor("anchor.offsets", ParamGroup::Offsets, &[n, k, 3], offsets),
            log_anchor_scale: store.add_per_anchor("anchor.log_scale", ParamGroup::LogScales, &[n, 1], log_l),
            feature: store.add_per_anchor("anchor.feature", ParamGroup::Features, &[n, f], feature),
            log_offset_scales: store.add_per_anchor("anchor.log_offset_scales", ParamGroup::LogScales, &[n, k, 3], log_s),
            k,
        };
        let slot_alive = store.add_per_anchor("anchor.slot_alive", ParamGroup::Buffer, &[n, k], vec![1.0; n * k]);
        let normalized = points.iter().map(|p| bounds.normalize(p)).collect::<Result<Vec<_>>>()?;
        let cscm = Cscm::new(config.cscm.clone(), &mut store, &normalized, rng)?;
        let decoder = AttributeDecoder::new(&mut store, k, config.cscm.feature_dim, config.cscm.hidden, rng);
        Ok(Self {
            config,
            positions: points.to_vec(),
            bounds,
            scale_floor,
            store,
            anchors,
            slot_alive,
            cscm,
            decoder,
            active_levels: 1,
            normalized,
        })
    }

    pub fn anchor_count(&self) -> usize {
        self.positions.len()
    }

    pub fn live_slot_count(&self) -> usize {
        self.store.get(self.slot_alive).iter().filter(|&&v| v > 0.5).count()
    }

    pub fn normalized_positions(&self) -> &[Vec3] {
        &self.normalized
    }

    pub(crate) fn refresh_normalized(&mut self) -> Result<()> {
        self.normalized = self.positions.iter().map(|p| self.bounds.normalize(p)).collect::<Result<_>>()?;
        self.cscm.rebuild_grids(&self.normalized);
        Ok(())
    }

    /// Reassembles a scene from checkpoint parts.
    pub(crate) fn from_parts(
        config: ModelConfig,
        positions: Vec<Vec3>,
        bounds: SceneBounds,
        scale_floor: f64,
        saved: &ParamStore,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut scene = Self::from_points(&positions, config, &mut rng)?;
        scene.bounds = bounds;
        scene.scale_floor = scale_floor;
        scene.store.load_from(saved)?;
        scene.refresh_normalized()?;
        Ok(scene)
    }

    pub fn anchor_scale(&self, a: usize) -> f64 {
        self.store.get(self.anchors.log_anchor_scale)[a].exp()
    }

    pub fn slot_mean(&self, a: usize, s: usize) -> Vec3 {
        let o = &self.store.get(self.anchors.offsets)[(a * self.config.k + s) * 3..][..3];
        self.positions[a] + Vec3::new(o[0], o[1], o[2]) * self.anchor_scale(a)
    }

    /// Means of all live slots.
    pub fn live_means(&self) -> (Vec<SlotRef>, Vec<Vec3>) {
        let alive = self.store.get(self.slot_alive);
        let k = self.config.k;
        let mut refs = Vec::new();
        let mut means = Vec::new();
        for a in 0..self.anchor_count() {
            for s in 0..k {
                if alive[a * k + s] > 0.5 {
                    refs.push(SlotRef {
                        anchor: a as u32,
                        slot: s as u32,
                    });
                    means.push(self.slot_mean(a, s));
                }
            }
        }
        (refs, means)
    }

    /// Per-anchor features for levels `0..active`.
    pub fn features(&self, active: usize, mode: BnMode) -> Result<(Vec<f64>, HdeCache)> {
        self.cscm.forward(&self.store, &self.anchors, &self.normalized, active, mode)
    }

    /// Decodes the live Gaussians as seen from `cam`.
    pub fn decode_view(&self, f_h: &[f64], cam: &Camera) -> (Vec<GaussianPrimitive>, ViewCache) {
        let center = cam.center();
        let dirs: Vec<Vec3> = self.positions.iter().map(|p| view_direction(&center, p)).collect();
        let (attrs, decode) = self.decoder.forward(&self.store, &self.normalized, &dirs, f_h);
        let k = self.config.k;
        let alive = self.store.get(self.slot_alive);
        let log_s = self.store.get(self.anchors.log_offset_scales);
        let log_floor = self.scale_floor.ln();
        let mut gaussians = Vec::new();
        let mut slots = Vec::new();
        let mut floored = Vec::new();
        let mut colors = Vec::new();
        for a in 0..self.anchor_count() {
            for s in 0..k {
                let i = a * k + s;
                if alive[i] <= 0.5 {
                    continue;
                }
                let cov = &attrs.covariance[i * 7..(i + 1) * 7];
                let mut log_scale = Vec3::zeros();
                let mut fl = [false; 3];
                for axis in 0..3 {
                    let raw = log_s[i * 3 + axis] + cov[4 + axis];
                    fl[axis] = raw < log_floor;
                    log_scale[axis] = raw.max(log_floor);
                }
                let color = std::array::from_fn(|c| sigmoid(attrs.color_logit[i * 3 + c]));
                gaussians.push(GaussianPrimitive {
                    mean: self.slot_mean(a, s),
                    log_scale,
                    rotation: [1.0 + cov[0], cov[1], cov[2], cov[3]],
                    opacity_logit: attrs.opacity_logit[i],
                    color,
                    sh1: None,
                });
                slots.push(SlotRef {
                    anchor: a as u32,
                    slot: s as u32,
                });
                floored.push(fl);
                colors.push(color);
            }
        }
        let cache = ViewCache {
            decode,
            slots,
            floored,
            colors,
        };
        (gaussians, cache)
    }

    /// Renders `cam` with the active levels and running normalization
    /// statistics.
    pub fn render(&self, cam: &Camera) -> Result<RenderOutput> {
        let (f_h, _) = self.features(self.active_levels, BnMode::Eval)?;
        let (gs, _) = self.decode_view(&f_h, cam);
        Ok(render_view(&gs, cam))
    }

    /// View-path backward pass. `rg` holds the per-Gaussian gradients of
    /// the view's loss (rendering plus any direct log-scale terms). Writes
    /// decoder, offset and scale gradients into `grads` and returns
    /// `dL/df_h` for the structural pass.
    pub fn view_backward(&self, cache: &ViewCache, rg: &RenderGradients, grads: &mut Grads) -> Vec<f64> {
        let n = self.anchor_count();
        let k = self.config.k;
        let mut d_opacity = vec![0.0; n * k];
        let mut d_cov = vec![0.0; n * k * 7];
        let mut d_color = vec![0.0; n * k * 3];
        let offsets = self.store.get(self.anchors.offsets);
        for (g, r) in cache.slots.iter().enumerate() {
            let (a, s) = (r.anchor as usize, r.slot as usize);
            let i = a * k + s;
            let l = self.anchor_scale(a);
            let dm = rg.mean[g];
            let o = Vec3::new(offsets[i * 3], offsets[i * 3 + 1], offsets[i * 3 + 2]);
            {
                let go = grads.get_mut(self.anchors.offsets);
                for axis in 0..3 {
                    go[i * 3 + axis] += dm[axis] * l;
                }
            }
            grads.get_mut(self.anchors.log_anchor_scale)[a] += dm.dot(&o) * l;
            {
                let gs = grads.get_mut(self.anchors.log_offset_scales);
                for axis in 0..3 {
                    if !cache.floored[g][axis] {
                        gs[i * 3 + axis] += rg.log_scale[g][axis];
                        d_cov[i * 7 + 4 + axis] += rg.log_scale[g][axis];
                    }
                }
            }
            for c in 0..4 {
                d_cov[i * 7 + c] += rg.rotation[g][c];
            }
            d_opacity[i] += rg.opacity_logit[g];
            for c in 0..3 {
                let col = cache.colors[g][c];
                d_color[i * 3 + c] += rg.color[g][c] * col * (1.0 - col);
            }
        }
        self.decoder.backward(&self.store, &cache.decode, &d_opacity, &d_cov, &d_color, grads)
    }

    /// Structural backward pass from accumulated `dL/df_h`.
    pub fn structural_backward(&self, cache: &HdeCache, d_fh: &[f64], grads: &mut Grads) {
        self.cscm.backward(&self.store, &self.anchors, cache, d_fh, grads);
    }

    /// Kills the listed slots and drops anchors left without live slots.
    /// Returns the anchor keep-mask (for optimizer state) and the number of
    /// anchors removed.
    pub fn remove_slots(&mut self, dead: &[SlotRef]) -> Result<(Vec<bool>, usize)> {
        let k = self.config.k;
        {
            let alive = self.store.get_mut(self.slot_alive);
            for r in dead {
                alive[r.anchor as usize * k + r.slot as usize] = 0.0;
            }
        }
        let alive = self.store.get(self.slot_alive);
        let keep: Vec<bool> = (0..self.anchor_count())
            .map(|a| alive[a * k..(a + 1) * k].iter().any(|&v| v > 0.5))
            .collect();
        let removed = keep.iter().filter(|&&v| !v).count();
        if removed > 0 {
            self.store.retain_anchor_rows(&keep)?;
            let mut it = keep.iter();
            self.positions.retain(|_| *it.next().unwrap());
            self.refresh_normalized()?;
        }
        Ok((keep, removed))
    }
}

#[cfg(test)]
mod tests;
