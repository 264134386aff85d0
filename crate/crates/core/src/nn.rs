//! Small dense layers with hand-written backward passes.
//!
//! Activations are row-major `n × dim` slices. Weights are stored
//! `out × in` row-major in a [`ParamStore`].

use rand::Rng;

use crate::params::{Grads, ParamGroup, ParamId, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/√in, 1/√in)` for weights and biases.
    Uniform,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            match init {
                Init::Uniform => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                Init::Zero => vec![0.0; n],
            }
        };
        let w = draw(n_in * n_out);
        let b = draw(n_out);
        Self {
            w: store.add(&format!("{name}.weight"), ParamGroup::Mlp, &[n_out, n_in], w),
            b: store.add(&format!("{name}.bias"), ParamGroup::Mlp, &[n_out], b),
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.n_in);
        let w = store.get(self.w);
        let b = store.get(self.b);
        let mut y = vec![0.0; n * self.n_out];
        for r in 0..n {
            let xr = &x[r * self.n_in..(r + 1) * self.n_in];
            for o in 0..self.n_out {
                let wr = &w[o * self.n_in..(o + 1) * self.n_in];
                y[r * self.n_out + o] = b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        y
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, x: &[f64], n: usize, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let w = store.get(self.w);
        let mut dx = vec![0.0; n * self.n_in];
        {
            let gw = grads.get_mut(self.w);
            for r in 0..n {
                let xr = &x[r * self.n_in..(r + 1) * self.n_in];
                let dxr = &mut dx[r * self.n_in..(r + 1) * self.n_in];
                for o in 0..self.n_out {
                    let g = dy[r * self.n_out + o];
                    if g == 0.0 {
                        continue;
                    }
                    let off = o * self.n_in;
                    for i in 0..self.n_in {
                        gw[off + i] += g * xr[i];
                        dxr[i] += g * w[off + i];
                    }
                }
            }
        }
        let gb = grads.get_mut(self.b);
        for r in 0..n {
            for o in 0..self.n_out {
                gb[o] += dy[r * self.n_out + o];
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    n: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), ParamGroup::Mlp, &[dim], vec![1.0; dim]),
            beta: store.add(&format!("{name}.beta"), ParamGroup::Mlp, &[dim], vec![0.0; dim]),
            running_mean: store.add(&format!("{name}.running_mean"), ParamGroup::Buffer, &[dim], vec![0.0; dim]),
            running_var: store.add(&format!("{name}.running_var"), ParamGroup::Buffer, &[dim], vec![1.0; dim]),
            dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], n: usize, mode: BnMode) -> (Vec<f64>, BnCache) {
        let d = self.dim;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                if n > 0 {
                    for r in 0..n {
                        for c in 0..d {
                            mean[c] += x[r * d + c];
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    for r in 0..n {
                        for c in 0..d {
                            let e = x[r * d + c] - mean[c];
                            var[c] += e * e;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= n as f64);
                }
                (mean, var)
            }
            BnMode::Eval => (store.get(self.running_mean).to_vec(), store.get(self.running_var).to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = vec![0.0; n * d];
        let mut y = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let h = (x[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                y[r * d + c] = gamma[c] * h + beta[c];
            }
        }
        let cache = BnCache {
            mode,
            n,
            xhat,
            inv_std,
            mean,
            var,
        };
        (y, cache)
    }

    pub fn backward(&self, store: &ParamStore, cache: &BnCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let d = self.dim;
        let n = cache.n;
        let gamma = store.get(self.gamma);
        let mut sum_dy = vec![0.0; d];
        let mut sum_dy_xhat = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                sum_dy[c] += dy[r * d + c];
                sum_dy_xhat[c] += dy[r * d + c] * cache.xhat[r * d + c];
            }
        }
        for c in 0..d {
            grads.get_mut(self.gamma)[c] += sum_dy_xhat[c];
            grads.get_mut(self.beta)[c] += sum_dy[c];
        }
        let mut dx = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let i = r * d + c;
                let k = gamma[c] * cache.inv_std[c];
                dx[i] = match cache.mode {
                    BnMode::Eval => k * dy[i],
                    BnMode::Train => {
                        let nf = n as f64;
                        k * (dy[i] - sum_dy[c] / nf - cache.xhat[i] * sum_dy_xhat[c] / nf)
                    }
                };
            }
        }
        dx
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates (unbiased variance).
    pub fn update_running(&self, store: &mut ParamStore, cache: &BnCache) {
        if cache.mode != BnMode::Train || cache.n == 0 {
            return;
        }
        let n = cache.n as f64;
        let correction = if cache.n > 1 { n / (n - 1.0) } else { 1.0 };
        for (m, b) in store.get_mut(self.running_mean).iter_mut().zip(&cache.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        for (v, b) in store.get_mut(self.running_var).iter_mut().zip(&cache.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * correction;
        }
    }
}

/// `Linear → [BatchNorm] → ReLU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub bn: Option<BatchNorm>,
    pub l2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    n: usize,
    x: Vec<f64>,
    z: Vec<f64>,
    bn: Option<BnCache>,
    a: Vec<f64>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        hidden: usize,
        n_out: usize,
        batch_norm: bool,
        output_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.0"), n_in, hidden, Init::Uniform, rng);
        let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), hidden));
        let l2 = Linear::new(store, &format!("{name}.1"), hidden, n_out, output_init, rng);
        Self { l1, bn, l2 }
    }

    pub fn n_in(&self) -> usize {
        self.l1.n_in
    }

    pub fn n_out(&self) -> usize {
        self.l2.n_out
    }

    pub fn forward(&self, store: &ParamStore, x: Vec<f64>, n: usize, mode: BnMode) -> (Vec<f64>, MlpCache) {
        let z = self.l1.forward(store, &x, n);
        let (pre, bn) = match &self.bn {
            Some(bn) => {
                let (y, c) = bn.forward(store, &z, n, mode);
                (y, Some(c))
            }
            None => (z.clone(), None),
        };
        let a: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let y = self.l2.forward(store, &a, n);
        (y, MlpCache { n, x, z: pre, bn, a })
    }

    pub fn backward(&self, store: &ParamStore, cache: &MlpCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut da = self.l2.backward(store, &cache.a, cache.n, dy, grads);
        for (d, z) in da.iter_mut().zip(&cache.z) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let dz = match (&self.bn, &cache.bn) {
            (Some(bn), Some(c)) => bn.backward(store, c, &da, grads),
            _ => da,
        };
        self.l1.backward(store, &cache.x, cache.n, &dz, grads)
    }

    pub fn update_running(&self, store: &mut ParamStore, cache: &MlpCache) {
        if let (Some(bn), Some(c)) = (&self.bn, &cache.bn) {
            bn.update_running(store, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{central_difference, grad_close};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe(y: &[f64], w: &[f64]) -> f64 {
        y.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn check_mlp(batch_norm: bool, mode: BnMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 4, 6, 3, batch_norm, Init::Uniform, &mut rng);
        if let Some(bn) = &mlp.bn {
            store.get_mut(bn.running_mean).iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            store.get_mut(bn.running_var).iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            store.get_mut(bn.gamma).iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
        let n = 5;
        let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (y, cache) = mlp.forward(&store, x.clone(), n, mode);
        let mut grads = Grads::zeros_like(&store);
        let dx = mlp.backward(&store, &cache, &w, &mut grads);
        for i in 0..x.len() {
            let fd = central_difference(1e-6, |d| {
                let mut xp = x.clone();
                xp[i] += d;
                probe(&mlp.forward(&store, xp, n, mode).0, &w)
            });
            assert!(grad_close(dx[i], fd, 1e-5, 1e-8), "dx[{i}] {} vs {fd}", dx[i]);
        }
        for id in store.ids().filter(|id| store.tensor(*id).group.learnable()) {
            for j in 0..store.get(id).len() {
                let fd = central_difference(1e-6, |d| {
                    let mut s = store.clone();
                    s.get_mut(id)[j] += d;
                    probe(&mlp.forward(&s, x.clone(), n, mode).0, &w)
                });
                let a = grads.get(id)[j];
                assert!(grad_close(a, fd, 1e-5, 1e-8), "{}[{j}] {a} vs {fd}", store.tensor(id).name);
            }
        }
        assert_eq!(y.len(), n * 3);
    }

    #[test]
    fn mlp_gradients() {
        check_mlp(false, BnMode::Train);
        check_mlp(true, BnMode::Train);
        check_mlp(true, BnMode::Eval);
    }

    #[test]
    fn zero_init_output_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 3, 4, 2, true, Init::Zero, &mut rng);
        let (y, _) = mlp.forward(&store, vec![0.3; 6], 2, BnMode::Train);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = [1.0, 2.0, 3.0, 4.0];
        let (y, cache) = bn.forward(&store, &x, 4, BnMode::Train);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + BN_EPS)).abs() < 1e-12);
        bn.update_running(&mut store, &cache);
        assert!((store.get(bn.running_mean)[0] - 0.25).abs() < 1e-12);
        // Unbiased batch variance 5/3.
        assert!((store.get(bn.running_var)[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
