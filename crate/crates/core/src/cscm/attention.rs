//! Channel and spatial attention over the three concatenated level-1 planes.
//!
//! Input and output are `h × w × c` maps (channels last) where `c = 3m` holds
//! the xy, xz and yz planes side by side. The channel gate is
//! `σ(mlp(avgpool) + mlp(maxpool))`; the spatial gate is a 7×7 convolution
//! (reflect padding) of the channel-wise mean and max maps, then a sigmoid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BnMode, Init, Mlp};
use crate::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::scene::sigmoid;

pub const KERNEL: usize = 7;
const PAD: isize = (KERNEL / 2) as isize;

#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneAttention {
    pub channel_mlp: Mlp,
    /// `2 × 7 × 7`: the mean map's kernel, then the max map's.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    w: usize,
    h: usize,
    x: Vec<f64>,
    channel_argmax: Vec<usize>,
    mlp_cache: crate::nn::MlpCache,
    channel_gate: Vec<f64>,
    x1: Vec<f64>,
    spatial: [Vec<f64>; 2],
    spatial_argmax: Vec<usize>,
    spatial_gate: Vec<f64>,
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

impl TriplaneAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let reduced = (channels / 4).max(1);
        let channel_mlp = Mlp::new(store, &format!("{name}.channel"), channels, reduced, channels, false, Init::Uniform, rng);
        let n = 2 * KERNEL * KERNEL;
        let bound = 1.0 / (n as f64).sqrt();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = vec![rng.gen_range(-bound..bound)];
        Self {
            channel_mlp,
            conv_w: store.add(&format!("{name}.spatial.weight"), ParamGroup::Mlp, &[2, KERNEL, KERNEL], w),
            conv_b: store.add(&format!("{name}.spatial.bias"), ParamGroup::Mlp, &[1], b),
            channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], w: usize, h: usize) -> Result<(Vec<f64>, AttentionCache)> {
        let c = self.channels;
        let np = w * h;
        if x.len() != np * c {
            return Err(Error::Configuration(format!(
                "attention input has {} values, expected {w}x{h}x{c}",
                x.len()
            )));
        }
        if w <= PAD as usize || h <= PAD as usize {
            return Err(Error::Configuration(format!(
                "planes of {w}x{h} texels are too small for a {KERNEL}x{KERNEL} reflect-padded kernel"
            )));
        }

        // Channel attention.
        let mut pooled = vec![0.0; 2 * c];
        let mut channel_argmax = vec![0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            for p in 0..np {
                let v = x[p * c + ch];
                sum += v;
                if v > best {
                    best = v;
                    channel_argmax[ch] = p;
                }
            }
            pooled[ch] = sum / np as f64;
            pooled[c + ch] = best;
        }
        let (mlp_out, mlp_cache) = self.channel_mlp.forward(store, pooled, 2, BnMode::Eval);
        let channel_gate: Vec<f64> = (0..c).map(|ch| sigmoid(mlp_out[ch] + mlp_out[c + ch])).collect();
        let mut x1 = vec![0.0; np * c];
        for p in 0..np {
            for ch in 0..c {
                x1[p * c + ch] = x[p * c + ch] * channel_gate[ch];
            }
        }

        // Spatial attention.
        let mut s_mean = vec![0.0; np];
        let mut s_max = vec![0.0; np];
        let mut spatial_argmax = vec![0; np];
        for p in 0..np {
            let row = &x1[p * c..(p + 1) * c];
            s_mean[p] = row.iter().sum::<f64>() / c as f64;
            let mut best = f64::NEG_INFINITY;
            for (ch, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    spatial_argmax[p] = ch;
                }
            }
            s_max[p] = best;
        }
        let kw = store.get(self.conv_w);
        let bias = store.get(self.conv_b)[0];
        let spatial = [s_mean, s_max];
        let mut spatial_gate = vec![0.0; np];
        for py in 0..h {
            for px in 0..w {
                let mut z = bias;
                for (k, map) in spatial.iter().enumerate() {
                    for ky in 0..KERNEL {
                        let sy = reflect(py as isize + ky as isize - PAD, h);
                        for kx in 0..KERNEL {
                            let sx = reflect(px as isize + kx as isize - PAD, w);
                            z += kw[(k * KERNEL + ky) * KERNEL + kx] * map[sy * w + sx];
                        }
                    }
                }
                spatial_gate[py * w + px] = sigmoid(z);
            }
        }
        let mut y = vec![0.0; np * c];
        for p in 0..np {
            for ch in 0..c {
                y[p * c + ch] = x1[p * c + ch] * spatial_gate[p];
            }
        }
        let cache = AttentionCache {
            w,
            h,
            x: x.to_vec(),
            channel_argmax,
            mlp_cache,
            channel_gate,
            x1,
            spatial,
            spatial_argmax,
            spatial_gate,
        };
        Ok((y, cache))
    }

    pub fn backward(&self, store: &ParamStore, cache: &AttentionCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let c = self.channels;
        let (w, h) = (cache.w, cache.h);
        let np = w * h;

        // Spatial gate.
        let mut dx1 = vec![0.0; np * c];
        let mut dz = vec![0.0; np];
        for p in 0..np {
            let gs = cache.spatial_gate[p];
            let mut dg = 0.0;
            for ch in 0..c {
                let i = p * c + ch;
                dx1[i] = dy[i] * gs;
                dg += dy[i] * cache.x1[i];
            }
            dz[p] = dg * gs * (1.0 - gs);
        }
        let kw = store.get(self.conv_w);
        let mut d_maps = [vec![0.0; np], vec![0.0; np]];
        {
            let gw = grads.get_mut(self.conv_w);
            for py in 0..h {
                for px in 0..w {
                    let d = dz[py * w + px];
                    if d == 0.0 {
                        continue;
                    }
                    for k in 0..2 {
                        for ky in 0..KERNEL {
                            let sy = reflect(py as isize + ky as isize - PAD, h);
                            for kx in 0..KERNEL {
                                let sx = reflect(px as isize + kx as isize - PAD, w);
                                let ki = (k * KERNEL + ky) * KERNEL + kx;
                                gw[ki] += d * cache.spatial[k][sy * w + sx];
                                d_maps[k][sy * w + sx] += d * kw[ki];
                            }
                        }
                    }
                }
            }
        }
        grads.get_mut(self.conv_b)[0] += dz.iter().sum::<f64>();
        for p in 0..np {
            let dm = d_maps[0][p] / c as f64;
            for ch in 0..c {
                dx1[p * c + ch] += dm;
            }
            dx1[p * c + cache.spatial_argmax[p]] += d_maps[1][p];
        }

        // Channel gate.
        let mut dx = vec![0.0; np * c];
        let mut d_logit = vec![0.0; c];
        for ch in 0..c {
            let gc = cache.channel_gate[ch];
            let mut dg = 0.0;
            for p in 0..np {
                let i = p * c + ch;
                dx[i] = dx1[i] * gc;
                dg += dx1[i] * cache.x[i];
            }
            d_logit[ch] = dg * gc * (1.0 - gc);
        }
        let mut d_mlp = d_logit.clone();
        d_mlp.extend_from_slice(&d_logit);
        let d_pooled = self.channel_mlp.backward(store, &cache.mlp_cache, &d_mlp, grads);
        for ch in 0..c {
            let d_avg = d_pooled[ch] / np as f64;
            for p in 0..np {
                dx[p * c + ch] += d_avg;
            }
            dx[cache.channel_argmax[ch] * c + ch] += d_pooled[c + ch];
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{central_difference, grad_close};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(channels: usize, seed: u64) -> (ParamStore, TriplaneAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = TriplaneAttention::new(&mut store, "att", channels, &mut rng);
        (store, att)
    }

    #[test]
    fn zero_planes_stay_zero() {
        let (store, att) = setup(6, 1);
        let (y, _) = att.forward(&store, &vec![0.0; 8 * 8 * 6], 8, 8).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_planes_give_constant_spatial_gate() {
        let (store, att) = setup(6, 2);
        let (_, cache) = att.forward(&store, &vec![0.7; 8 * 8 * 6], 8, 8).unwrap();
        let g0 = cache.spatial_gate[0];
        assert!(cache.spatial_gate.iter().all(|&g| (g - g0).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_shapes() {
        let (store, att) = setup(6, 3);
        assert!(matches!(att.forward(&store, &[0.0; 10], 8, 8), Err(Error::Configuration(_))));
        assert!(matches!(att.forward(&store, &[0.0; 3 * 3 * 6], 3, 3), Err(Error::Configuration(_))));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(6, 4), 0);
        assert_eq!(reflect(2, 4), 2);
    }

    /// Scripted re-derivation of both gates with explicit loops.
    #[test]
    fn matches_gating_oracle() {
        let (store, att) = setup(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h, c) = (5, 6, 6);
        let x: Vec<f64> = (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (y, _) = att.forward(&store, &x, w, h).unwrap();

        let mlp = |v: &[f64]| att.channel_mlp.forward(&store, v.to_vec(), 1, BnMode::Eval).0;
        let avg: Vec<f64> = (0..c).map(|ch| (0..w * h).map(|p| x[p * c + ch]).sum::<f64>() / (w * h) as f64).collect();
        let mx: Vec<f64> = (0..c).map(|ch| (0..w * h).map(|p| x[p * c + ch]).fold(f64::MIN, f64::max)).collect();
        let (ma, mm) = (mlp(&avg), mlp(&mx));
        let gate_c: Vec<f64> = (0..c).map(|ch| 1.0 / (1.0 + (-(ma[ch] + mm[ch])).exp())).collect();
        let x1: Vec<f64> = (0..w * h * c).map(|i| x[i] * gate_c[i % c]).collect();
        let kw = store.get(att.conv_w);
        let b = store.get(att.conv_b)[0];
        let mirror = |i: i64, n: i64| if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
        for py in 0..h as i64 {
            for px in 0..w as i64 {
                let mut z = b;
                for ky in 0..7i64 {
                    for kx in 0..7i64 {
                        let sy = mirror(py + ky - 3, h as i64) as usize;
                        let sx = mirror(px + kx - 3, w as i64) as usize;
                        let row = &x1[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let max = row.iter().cloned().fold(f64::MIN, f64::max);
                        z += kw[(ky * 7 + kx) as usize] * mean + kw[49 + (ky * 7 + kx) as usize] * max;
                    }
                }
                let gs = 1.0 / (1.0 + (-z).exp());
                assert!(gs > 0.0 && gs < 1.0);
                let p = py as usize * w + px as usize;
                for ch in 0..c {
                    assert!((y[p * c + ch] - x1[p * c + ch] * gs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, att) = setup(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, h, c) = (4, 4, 6);
        let x: Vec<f64> = (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |s: &ParamStore, xs: &[f64]| -> f64 {
            let (y, _) = att.forward(s, xs, w, h).unwrap();
            y.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = att.forward(&store, &x, w, h).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let dx = att.backward(&store, &cache, &probe, &mut grads);
        for i in 0..x.len() {
            let fd = central_difference(1e-6, |d| {
                let mut xp = x.clone();
                xp[i] += d;
                loss(&store, &xp)
            });
            assert!(grad_close(dx[i], fd, 1e-4, 1e-8), "dx[{i}] {} vs {fd}", dx[i]);
        }
        for id in store.ids() {
            for j in 0..store.get(id).len() {
                let fd = central_difference(1e-6, |d| {
                    let mut s = store.clone();
                    s.get_mut(id)[j] += d;
                    loss(&s, &x)
                });
                let a = grads.get(id)[j];
                assert!(grad_close(a, fd, 1e-4, 1e-8), "{}[{j}] {a} vs {fd}", store.tensor(id).name);
            }
        }
    }
}
