use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testing::{central_difference, grad_close};

fn small_config(levels: usize, attention: bool) -> CscmConfig {
    CscmConfig {
        levels,
        plane_resolution: 4,
        plane_channels: 2,
        feature_dim: 4,
        grid_resolution: 2,
        hidden: 5,
        anchor_feature_dim: 3,
        attention,
    }
}

struct Fixture {
    store: ParamStore,
    anchors: AnchorParams,
    normalized: Vec<Vec3>,
    cscm: Cscm,
}

fn fixture(config: CscmConfig, n: usize, seed: u64, randomize: bool) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 2;
    let f = config.anchor_feature_dim;
    let normalized: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.02..0.98))).collect();
    let mut store = ParamStore::new();
    let mut draw = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-s..s)).collect() };
    let anchors = AnchorParams {
        offsets: store.add_per_anchor("offsets", ParamGroup::Offsets, &[n, k, 3], draw(n * k * 3, 1.0)),
        log_anchor_scale: store.add_per_anchor("log_anchor_scale", ParamGroup::LogScales, &[n, 1], draw(n, 0.5)),
        feature: store.add_per_anchor("feature", ParamGroup::Features, &[n, f], draw(n * f, 1.0)),
        log_offset_scales: store.add_per_anchor("log_offset_scales", ParamGroup::LogScales, &[n, k, 3], draw(n * k * 3, 1.0)),
        k,
    };
    let cscm = Cscm::new(config, &mut store, &normalized, &mut rng).unwrap();
    if randomize {
        // Make every tensor generic so no path is trivially zero.
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.tensor(id);
            if t.group == ParamGroup::Planes || (t.group == ParamGroup::Mlp && t.name.contains(".1.")) {
                store.get_mut(id).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
        }
    }
    Fixture {
        store,
        anchors,
        normalized,
        cscm,
    }
}

#[test]
fn deeper_levels_are_neutral_at_activation() {
    let fx = fixture(CscmConfig::default(), 40, 1, false);
    let (f1, _) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, 1, BnMode::Train).unwrap();
    for active in 2..=3 {
        let (fa, _) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, active, BnMode::Train).unwrap();
        assert_eq!(f1, fa);
    }
    assert!(f1.iter().any(|&v| v != 0.0));
}

#[test]
fn zeroing_a_level_is_a_no_op() {
    let mut fx = fixture(small_config(2, true), 10, 2, true);
    let (f1, _) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, 1, BnMode::Train).unwrap();
    let (f2, _) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, 2, BnMode::Train).unwrap();
    assert_ne!(f1, f2);
    let level = fx.cscm.levels[1].clone();
    for lin in [&level.phi_t.l2, &level.phi_c.l2] {
        fx.store.get_mut(lin.w).iter_mut().for_each(|v| *v = 0.0);
        fx.store.get_mut(lin.b).iter_mut().for_each(|v| *v = 0.0);
    }
    let (f2, _) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, 2, BnMode::Train).unwrap();
    assert_eq!(f1, f2);
}

/// Per-level feature recomputed with explicit texel weights and an
/// 8-corner loop over the grid.
fn level_oracle(fx: &Fixture, l: usize, attended: Option<&[f64]>) -> Vec<Vec<f64>> {
    let cfg = &fx.cscm.config;
    let level = &fx.cscm.levels[l];
    let (res, m, half) = (level.resolution, cfg.plane_channels, cfg.feature_dim / 2);
    let tent = |x: f64, i: usize| (1.0 - (x - i as f64).abs()).max(0.0);
    let mut rows = Vec::new();
    for p in &fx.normalized {
        let mut row = Vec::new();
        for (pi, axis) in PlaneAxis::ALL.iter().enumerate() {
            let (a, b) = axis.axes();
            let (x, y) = (p[a] * (res - 1) as f64, p[b] * (res - 1) as f64);
            let plane = fx.store.get(level.planes[pi]);
            let mut base = vec![0.0; m];
            let mut att = vec![0.0; m];
            for j in 0..res {
                for i in 0..res {
                    let w = tent(x, i) * tent(y, j);
                    for c in 0..m {
                        base[c] += w * plane[(j * res + i) * m + c];
                        att[c] += w * match attended {
                            Some(ta) => ta[(j * res + i) * 3 * m + pi * m + c],
                            None => plane[(j * res + i) * m + c],
                        };
                    }
                }
            }
            row.extend(base);
            row.extend(att);
        }
        rows.push(row);
    }
    let n = rows.len();
    let (ft, _) = level.phi_t.forward(&fx.store, rows.concat(), n, BnMode::Train);

    let alpha = level.grid.resolution;
    let mut g_rows = Vec::new();
    let mut owners = Vec::new();
    for (a, p) in fx.normalized.iter().enumerate() {
        let cell: Vec<usize> = (0..3).map(|ax| ((p[ax] * alpha as f64).floor() as usize).min(alpha - 1)).collect();
        let mut acc = vec![0.0; cfg.vertex_feature_dim()];
        let mut total = 0.0;
        for corner in 0..8 {
            let v = [cell[0] + (corner & 1), cell[1] + ((corner >> 1) & 1), cell[2] + ((corner >> 2) & 1)];
            let w: f64 = (0..3).map(|ax| 1.0 - (p[ax] * alpha as f64 - v[ax] as f64).abs()).product();
            let owner = level.grid.vertex_anchor[level.grid.vertex_index(v[0], v[1], v[2])];
            if owner == grid::EMPTY {
                continue;
            }
            total += w;
            let fg = fx.cscm.vertex_feature(&fx.store, &fx.anchors, &fx.normalized, owner as usize);
            for (o, x) in acc.iter_mut().zip(fg) {
                *o += w * x;
            }
        }
        if total > 0.0 {
            g_rows.push(acc.iter().map(|v| v / total).collect::<Vec<_>>());
            owners.push(a);
        }
    }
    let (fc, _) = level.phi_c.forward(&fx.store, g_rows.concat(), owners.len(), BnMode::Train);
    let mut out = vec![vec![0.0; 2 * half]; n];
    for a in 0..n {
        out[a][..half].copy_from_slice(&ft[a * half..(a + 1) * half]);
    }
    for (r, &a) in owners.iter().enumerate() {
        out[a][half..].copy_from_slice(&fc[r * half..(r + 1) * half]);
    }
    out
}

#[test]
fn three_levels_match_sum_of_level_oracles() {
    let mut cfg = small_config(3, true);
    cfg.plane_resolution = 8;
    let fx = fixture(cfg, 25, 3, true);
    let (f_h, _) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, 3, BnMode::Train).unwrap();
    let x = fx.cscm.concat_planes(&fx.store, 0);
    let (ta, _) = fx.cscm.attention.forward(&fx.store, &x, 8, 8).unwrap();
    let d = fx.cscm.config.feature_dim;
    let mut expected = vec![0.0; 25 * d];
    for l in 0..3 {
        let per = level_oracle(&fx, l, (l == 0).then_some(ta.as_slice()));
        for (a, row) in per.iter().enumerate() {
            for c in 0..d {
                expected[a * d + c] += row[c];
            }
        }
    }
    for (a, b) in f_h.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn context_feature_continuous_across_cell_faces() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Dense anchors so every vertex is populated.
    let anchors: Vec<Vec3> = (0..400).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
    let grid = ContextGrid::build(&anchors, 4);
    assert!(grid.vertex_anchor.iter().all(|&a| a != grid::EMPTY));
    let feat: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let agg = |p: Vec3| grid.query(&p).iter().map(|&(a, w)| w * feat[a]).sum::<f64>();
    for _ in 0..200 {
        let mut p = Vec3::from_fn(|_, _| rng.gen_range(0.05..0.95));
        let axis = rng.gen_range(0..3);
        p[axis] = rng.gen_range(1..4) as f64 * 0.25;
        let eps = 1e-9;
        let (mut lo, mut hi) = (p, p);
        lo[axis] -= eps;
        hi[axis] += eps;
        assert!((agg(lo) - agg(hi)).abs() < 1e-6);
    }
}

fn check_gradients(attention: bool, seed: u64) {
    let fx = fixture(small_config(2, attention), 8, seed, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let d = fx.cscm.config.feature_dim;
    let probe: Vec<f64> = (0..8 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |s: &ParamStore| -> f64 {
        let (f_h, _) = fx.cscm.forward(s, &fx.anchors, &fx.normalized, 2, BnMode::Train).unwrap();
        f_h.iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = fx.cscm.forward(&fx.store, &fx.anchors, &fx.normalized, 2, BnMode::Train).unwrap();
    let mut grads = Grads::zeros_like(&fx.store);
    fx.cscm.backward(&fx.store, &fx.anchors, &cache, &probe, &mut grads);
    for id in fx.store.ids() {
        let t = fx.store.tensor(id);
        if !t.group.learnable() {
            continue;
        }
        for j in 0..t.data.len() {
            let fd = central_difference(1e-6, |h| {
                let mut s = fx.store.clone();
                s.get_mut(id)[j] += h;
                loss(&s)
            });
            let a = grads.get(id)[j];
            assert!(grad_close(a, fd, 1e-4, 1e-7), "{}[{j}]: {a} vs {fd}", t.name);
        }
    }
}

#[test]
fn structural_gradients_match_finite_differences() {
    check_gradients(true, 5);
    check_gradients(false, 6);
}

#[test]
fn mismatched_plane_config_rejected() {
    let mut cfg = small_config(1, true);
    cfg.feature_dim = 5;
    assert!(matches!(cfg.validate(), Err(Error::Configuration(_))));
    cfg.feature_dim = 4;
    cfg.plane_resolution = 2;
    assert!(cfg.validate().is_err());
}

mod decoder_tests {
    use super::*;

    fn setup(seed: u64, zero: bool) -> (ParamStore, AttributeDecoder, Vec<Vec3>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = AttributeDecoder::new(&mut store, 3, 4, 6, &mut rng);
        if !zero {
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
        }
        let pos: Vec<Vec3> = (0..5).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        let f_h: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (store, dec, pos, f_h)
    }

    #[test]
    fn zero_output_layers_give_half_opacity() {
        let (store, dec, pos, f_h) = setup(1, true);
        let dirs = vec![Vec3::x(); 5];
        let (attrs, _) = dec.forward(&store, &pos, &dirs, &f_h);
        assert!(attrs.opacity_logit.iter().all(|&v| v == 0.0));
        assert!(attrs.opacity_logit.iter().all(|&v| crate::scene::sigmoid(v) == 0.5));
    }

    #[test]
    fn same_view_direction_same_attributes() {
        let (store, dec, pos, f_h) = setup(2, false);
        let dirs = vec![Vec3::new(0.0, 0.6, 0.8); 5];
        let (a, _) = dec.forward(&store, &pos, &dirs, &f_h);
        let (b, _) = dec.forward(&store, &pos, &dirs.clone(), &f_h);
        assert_eq!(a, b);
    }

    #[test]
    fn matches_scripted_forward() {
        let (store, dec, pos, f_h) = setup(3, false);
        let dirs: Vec<Vec3> = pos.iter().map(|p| (p - Vec3::new(2.0, 0.0, 0.0)).normalize()).collect();
        let (attrs, _) = dec.forward(&store, &pos, &dirs, &f_h);
        let net = &dec.covariance;
        for a in 0..5 {
            let x: Vec<f64> = pos[a].iter().chain(dirs[a].iter()).chain(&f_h[a * 4..a * 4 + 4]).copied().collect();
            let (w1, b1) = (store.get(net.l1.w), store.get(net.l1.b));
            let hidden: Vec<f64> = (0..6)
                .map(|h| (b1[h] + (0..10).map(|i| w1[h * 10 + i] * x[i]).sum::<f64>()).max(0.0))
                .collect();
            let (w2, b2) = (store.get(net.l2.w), store.get(net.l2.b));
            for o in 0..21 {
                let y = b2[o] + (0..6).map(|h| w2[o * 6 + h] * hidden[h]).sum::<f64>();
                assert!((attrs.covariance[a * 21 + o] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let (store, dec, pos, f_h) = setup(4, false);
        let dirs = vec![Vec3::z(); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wo: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..105).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wl: Vec<f64> = (0..45).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |f: &[f64]| {
            let (a, _) = dec.forward(&store, &pos, &dirs, f);
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            dot(&a.opacity_logit, &wo) + dot(&a.covariance, &wc) + dot(&a.color_logit, &wl)
        };
        let (_, cache) = dec.forward(&store, &pos, &dirs, &f_h);
        let mut grads = Grads::zeros_like(&store);
        let d = dec.backward(&store, &cache, &wo, &wc, &wl, &mut grads);
        for i in 0..f_h.len() {
            let fd = central_difference(1e-6, |h| {
                let mut f = f_h.clone();
                f[i] += h;
                loss(&f)
            });
            assert!(grad_close(d[i], fd, 1e-6, 1e-9));
        }
    }
}
