//! Hierarchical per-anchor features from tri-planes and context grids.
//!
//! Each level ℓ owns three feature planes, a context grid and two decoders:
//! `φ_t` maps the six plane samples (base and attended, per plane) to half
//! of the feature, `φ_c` maps the grid aggregate of neighboring anchor
//! features to the other half. The per-anchor feature `f_h` is the sum of
//! the active levels' `[φ_t, φ_c]` outputs.

pub mod attention;
pub mod decoder;
pub mod grid;
pub mod planes;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnMode, Init, Mlp, MlpCache};
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::scene::{PlaneAxis, Vec3};

pub use attention::{AttentionCache, TriplaneAttention};
pub use decoder::{AttributeDecoder, DecodeCache, DecodedAttributes};
pub use grid::ContextGrid;
pub use planes::{bilinear_tap, BilinearTap};

/// Half-width of the initial uniform plane texel distribution.
pub const PLANE_INIT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CscmConfig {
    pub levels: usize,
    /// Level-1 plane resolution; doubles per level.
    pub plane_resolution: usize,
    pub plane_channels: usize,
    /// Dimension `D` of `f_h`; must be even.
    pub feature_dim: usize,
    /// Level-1 context cells per axis; doubles per level.
    pub grid_resolution: usize,
    pub hidden: usize,
    /// Dimension of the learnable per-anchor feature `f_p`.
    pub anchor_feature_dim: usize,
    pub attention: bool,
}

impl Default for CscmConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            plane_resolution: 32,
            plane_channels: 8,
            feature_dim: 32,
            grid_resolution: 4,
            hidden: 32,
            anchor_feature_dim: 16,
            attention: true,
        }
    }
}

impl CscmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        if self.feature_dim == 0 || self.feature_dim % 2 != 0 {
            return bad(format!("feature_dim must be even and positive, got {}", self.feature_dim));
        }
        if self.plane_resolution < 4 {
            return bad(format!("plane_resolution must be at least 4, got {}", self.plane_resolution));
        }
        if self.plane_channels == 0 || self.hidden == 0 || self.grid_resolution == 0 {
            return bad("plane_channels, hidden and grid_resolution must be positive".into());
        }
        Ok(())
    }

    pub fn level_plane_resolution(&self, level: usize) -> usize {
        self.plane_resolution << level
    }

    pub fn level_grid_resolution(&self, level: usize) -> usize {
        self.grid_resolution << level
    }

    /// Width of the vertex feature `[f_p, p, mean O, mean log s]`.
    pub fn vertex_feature_dim(&self) -> usize {
        self.anchor_feature_dim + 9
    }
}

/// Store handles of the per-anchor tensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorParams {
    /// `n × k × 3`.
    pub offsets: ParamId,
    /// `n × 1`.
    pub log_anchor_scale: ParamId,
    /// `n × F`.
    pub feature: ParamId,
    /// `n × k × 3`.
    pub log_offset_scales: ParamId,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub planes: [ParamId; 3],
    pub resolution: usize,
    pub phi_t: Mlp,
    pub phi_c: Mlp,
    pub grid: ContextGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cscm {
    pub config: CscmConfig,
    pub levels: Vec<Level>,
    /// Parameters exist even when disabled so checkpoints share one layout.
    pub attention: TriplaneAttention,
}

#[derive(Clone, Debug)]
struct LevelCache {
    taps: Vec<[BilinearTap; 3]>,
    attended: Option<(Vec<f64>, AttentionCache)>,
    phi_t: MlpCache,
    context_rows: Vec<usize>,
    context_weights: Vec<Vec<(usize, f64)>>,
    phi_c: MlpCache,
}

#[derive(Clone, Debug)]
pub struct HdeCache {
    n: usize,
    levels: Vec<LevelCache>,
}

impl HdeCache {
    pub fn active_levels(&self) -> usize {
        self.levels.len()
    }
}

impl Cscm {
    /// Registers all level parameters. Level 1 decoders are randomly
    /// initialized; deeper levels zero their output layers so switching
    /// them on leaves `f_h` unchanged.
    pub fn new(config: CscmConfig, store: &mut ParamStore, normalized_anchors: &[Vec3], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let m = config.plane_channels;
        let half = config.feature_dim / 2;
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let res = config.level_plane_resolution(l);
            let planes = PlaneAxis::ALL.map(|axis| {
                let data = (0..res * res * m).map(|_| rng.gen_range(-PLANE_INIT..PLANE_INIT)).collect();
                store.add(&format!("level{l}.plane_{}", plane_name(axis)), ParamGroup::Planes, &[res, res, m], data)
            });
            let out_init = if l == 0 { Init::Uniform } else { Init::Zero };
            let phi_t = Mlp::new(store, &format!("level{l}.phi_t"), 6 * m, config.hidden, half, false, out_init, rng);
            let phi_c = Mlp::new(
                store,
                &format!("level{l}.phi_c"),
                config.vertex_feature_dim(),
                config.hidden,
                half,
                true,
                out_init,
                rng,
            );
            let grid = ContextGrid::build(normalized_anchors, config.level_grid_resolution(l));
            levels.push(Level {
                planes,
                resolution: res,
                phi_t,
                phi_c,
                grid,
            });
        }
        let attention = TriplaneAttention::new(store, "attention", 3 * m, rng);
        Ok(Self {
            config,
            levels,
            attention,
        })
    }

    pub fn rebuild_grids(&mut self, normalized_anchors: &[Vec3]) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            level.grid = ContextGrid::build(normalized_anchors, self.config.level_grid_resolution(l));
        }
    }

    fn uses_attention(&self, level: usize) -> bool {
        self.config.attention && level == 0
    }

    /// Channels-last concatenation of the three planes of `level`.
    pub fn concat_planes(&self, store: &ParamStore, level: usize) -> Vec<f64> {
        let lv = &self.levels[level];
        let m = self.config.plane_channels;
        let np = lv.resolution * lv.resolution;
        let mut x = vec![0.0; np * 3 * m];
        for (i, id) in lv.planes.iter().enumerate() {
            let plane = store.get(*id);
            for p in 0..np {
                x[p * 3 * m + i * m..p * 3 * m + (i + 1) * m].copy_from_slice(&plane[p * m..(p + 1) * m]);
            }
        }
        x
    }

    /// Vertex feature `[f_p, p, mean O, mean log s]` of anchor `a`.
    pub fn vertex_feature(&self, store: &ParamStore, anchors: &AnchorParams, normalized: &[Vec3], a: usize) -> Vec<f64> {
        let f = self.config.anchor_feature_dim;
        let k = anchors.k;
        let mut out = Vec::with_capacity(f + 9);
        out.extend_from_slice(&store.get(anchors.feature)[a * f..(a + 1) * f]);
        out.extend_from_slice(normalized[a].as_slice());
        for id in [anchors.offsets, anchors.log_offset_scales] {
            let rows = &store.get(id)[a * k * 3..(a + 1) * k * 3];
            for axis in 0..3 {
                out.push((0..k).map(|s| rows[s * 3 + axis]).sum::<f64>() / k as f64);
            }
        }
        out
    }

    /// Computes `f_h` (`n × D`, row-major) for every anchor using levels
    /// `0..active`.
    pub fn forward(
        &self,
        store: &ParamStore,
        anchors: &AnchorParams,
        normalized: &[Vec3],
        active: usize,
        mode: BnMode,
    ) -> Result<(Vec<f64>, HdeCache)> {
        let n = normalized.len();
        let d = self.config.feature_dim;
        let half = d / 2;
        let m = self.config.plane_channels;
        let fg_dim = self.config.vertex_feature_dim();
        let active = active.clamp(1, self.levels.len());
        let mut f_h = vec![0.0; n * d];
        let mut caches = Vec::with_capacity(active);
        let vertex_features: Vec<Vec<f64>> = (0..n).map(|a| self.vertex_feature(store, anchors, normalized, a)).collect();
        for (l, level) in self.levels.iter().take(active).enumerate() {
            let res = level.resolution;
            let attended = if self.uses_attention(l) {
                let x = self.concat_planes(store, l);
                Some(self.attention.forward(store, &x, res, res)?)
            } else {
                None
            };

            let mut taps = Vec::with_capacity(n);
            let mut samples = vec![0.0; n * 6 * m];
            for (a, p) in normalized.iter().enumerate() {
                let row = &mut samples[a * 6 * m..(a + 1) * 6 * m];
                let t = PlaneAxis::ALL.map(|axis| {
                    let (i, j) = axis.axes();
                    bilinear_tap([p[i], p[j]], res, res)
                });
                for (pi, tap) in t.iter().enumerate() {
                    let plane = store.get(level.planes[pi]);
                    planes::sample_into(plane, m, tap, &mut row[2 * pi * m..(2 * pi + 1) * m]);
                    match &attended {
                        Some((y, _)) => {
                            let out = &mut row[(2 * pi + 1) * m..(2 * pi + 2) * m];
                            out.iter_mut().for_each(|v| *v = 0.0);
                            for (&tx, &wt) in tap.texels.iter().zip(&tap.weights) {
                                let src = &y[tx * 3 * m + pi * m..tx * 3 * m + (pi + 1) * m];
                                for (o, v) in out.iter_mut().zip(src) {
                                    *o += wt * v;
                                }
                            }
                        }
                        None => row.copy_within(2 * pi * m..(2 * pi + 1) * m, (2 * pi + 1) * m),
                    }
                }
                taps.push(t);
            }
            let (f_t, phi_t_cache) = level.phi_t.forward(store, samples, n, mode);

            let mut context_rows = Vec::new();
            let mut context_weights = Vec::new();
            let mut g = Vec::new();
            for (a, p) in normalized.iter().enumerate() {
                let q = level.grid.query(p);
                if q.is_empty() {
                    continue;
                }
                let mut row = vec![0.0; fg_dim];
                for &(b, w) in &q {
                    for (r, v) in row.iter_mut().zip(&vertex_features[b]) {
                        *r += w * v;
                    }
                }
                g.extend_from_slice(&row);
                context_rows.push(a);
                context_weights.push(q);
            }
            let (f_c, phi_c_cache) = level.phi_c.forward(store, g, context_rows.len(), mode);

            for a in 0..n {
                for c in 0..half {
                    f_h[a * d + c] += f_t[a * half + c];
                }
            }
            for (r, &a) in context_rows.iter().enumerate() {
                for c in 0..half {
                    f_h[a * d + half + c] += f_c[r * half + c];
                }
            }
            caches.push(LevelCache {
                taps,
                attended,
                phi_t: phi_t_cache,
                context_rows,
                context_weights,
                phi_c: phi_c_cache,
            });
        }
        Ok((f_h, HdeCache { n, levels: caches }))
    }

    /// Structural backward pass: routes `dL/df_h` into planes, attention,
    /// decoders and (through vertex features) the per-anchor tensors.
    pub fn backward(&self, store: &ParamStore, anchors: &AnchorParams, cache: &HdeCache, d_fh: &[f64], grads: &mut Grads) {
        let n = cache.n;
        let d = self.config.feature_dim;
        let half = d / 2;
        let m = self.config.plane_channels;
        let f = self.config.anchor_feature_dim;
        let k = anchors.k;
        for (l, lc) in cache.levels.iter().enumerate() {
            let level = &self.levels[l];
            let res = level.resolution;

            let mut d_ft = vec![0.0; n * half];
            for a in 0..n {
                d_ft[a * half..(a + 1) * half].copy_from_slice(&d_fh[a * d..a * d + half]);
            }
            let d_samples = level.phi_t.backward(store, &lc.phi_t, &d_ft, grads);
            let mut d_attended = lc.attended.as_ref().map(|_| vec![0.0; res * res * 3 * m]);
            for a in 0..n {
                let row = &d_samples[a * 6 * m..(a + 1) * 6 * m];
                for (pi, tap) in lc.taps[a].iter().enumerate() {
                    let base = &row[2 * pi * m..(2 * pi + 1) * m];
                    let att = &row[(2 * pi + 1) * m..(2 * pi + 2) * m];
                    let g = grads.get_mut(level.planes[pi]);
                    planes::sample_backward(g, m, tap, base);
                    match d_attended.as_mut() {
                        Some(dy) => {
                            for (&tx, &wt) in tap.texels.iter().zip(&tap.weights) {
                                let dst = &mut dy[tx * 3 * m + pi * m..tx * 3 * m + (pi + 1) * m];
                                for (o, v) in dst.iter_mut().zip(att) {
                                    *o += wt * v;
                                }
                            }
                        }
                        None => planes::sample_backward(g, m, tap, att),
                    }
                }
            }
            if let (Some(dy), Some((_, att_cache))) = (d_attended, lc.attended.as_ref()) {
                let dx = self.attention.backward(store, att_cache, &dy, grads);
                for (pi, id) in level.planes.iter().enumerate() {
                    let g = grads.get_mut(*id);
                    for p in 0..res * res {
                        for c in 0..m {
                            g[p * m + c] += dx[p * 3 * m + pi * m + c];
                        }
                    }
                }
            }

            let rows = lc.context_rows.len();
            let mut d_fc = vec![0.0; rows * half];
            for (r, &a) in lc.context_rows.iter().enumerate() {
                d_fc[r * half..(r + 1) * half].copy_from_slice(&d_fh[a * d + half..(a + 1) * d]);
            }
            let d_g = level.phi_c.backward(store, &lc.phi_c, &d_fc, grads);
            for (r, weights) in lc.context_weights.iter().enumerate() {
                let dg = &d_g[r * (f + 9)..(r + 1) * (f + 9)];
                for &(b, w) in weights {
                    let gf = grads.get_mut(anchors.feature);
                    for c in 0..f {
                        gf[b * f + c] += w * dg[c];
                    }
                    for (id, off) in [(anchors.offsets, f + 3), (anchors.log_offset_scales, f + 6)] {
                        let g = grads.get_mut(id);
                        for s in 0..k {
                            for axis in 0..3 {
                                g[(b * k + s) * 3 + axis] += w * dg[off + axis] / k as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds batch-norm statistics of a training pass into running estimates.
    pub fn update_running(&self, store: &mut ParamStore, cache: &HdeCache) {
        for (l, lc) in cache.levels.iter().enumerate() {
            self.levels[l].phi_c.update_running(store, &lc.phi_c);
        }
    }
}

pub fn plane_name(axis: PlaneAxis) -> &'static str {
    match axis {
        PlaneAxis::Xy => "xy",
        PlaneAxis::Xz => "xz",
        PlaneAxis::Yz => "yz",
    }
}

#[cfg(test)]
mod tests;
