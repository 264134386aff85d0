//! Adam with one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{retain_rows, Grads, ParamGroup, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub planes: f64,
    pub mlp: f64,
    pub offsets: f64,
    pub log_scales: f64,
    pub features: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            planes: 1e-2,
            mlp: 2e-3,
            offsets: 1e-3,
            log_scales: 5e-3,
            features: 5e-3,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Planes => self.planes,
            ParamGroup::Mlp => self.mlp,
            ParamGroup::Offsets => self.offsets,
            ParamGroup::LogScales => self.log_scales,
            ParamGroup::Features => self.features,
            ParamGroup::Buffer => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: AdamParams) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect::<Vec<_>>();
        Self {
            params,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Length of the moment buffers kept for `id`.
    pub fn moment_len(&self, id: ParamId) -> usize {
        self.m[id.0].len()
    }

    /// Applies one update. Groups containing a non-finite gradient are left
    /// untouched (parameters and moments) and returned.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: &LearningRates) -> Vec<ParamGroup> {
        let rejected: Vec<ParamGroup> = ParamGroup::ALL
            .into_iter()
            .filter(|g| g.learnable())
            .filter(|&g| store.ids().any(|id| store.tensor(id).group == g && !grads.is_finite(id)))
            .collect();
        let AdamParams { beta1, beta2, eps } = self.params;
        for id in store.ids().collect::<Vec<_>>() {
            let group = store.tensor(id).group;
            if !group.learnable() || rejected.contains(&group) {
                continue;
            }
            let rate = lr.for_group(group);
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in store.get_mut(id).iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        rejected
    }

    /// Drops moment rows of per-anchor tensors in step with
    /// [`ParamStore::retain_anchor_rows`]. `keep` indexes the rows the
    /// moments currently hold.
    pub fn retain_anchor_rows(&mut self, store: &ParamStore, keep: &[bool]) -> Result<()> {
        for (i, t) in store.tensors().iter().enumerate() {
            if !t.per_anchor {
                continue;
            }
            let row_len = t.row_len().max(1);
            for buf in [&mut self.m[i], &mut self.v[i]] {
                let mut shape = t.shape.clone();
                shape[0] = buf.len() / row_len;
                let mut tmp = Tensor {
                    name: t.name.clone(),
                    group: t.group,
                    shape,
                    per_anchor: true,
                    data: std::mem::take(buf),
                };
                retain_rows(&mut tmp, keep)?;
                *buf = tmp.data;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::Mlp, &[1], vec![v]);
        s.add("q", ParamGroup::Planes, &[1], vec![v]);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(&s, AdamParams::default());
        let g = Grads::zeros_like(&s);
        for _ in 0..5 {
            adam.step(&mut s, &g, &LearningRates::default());
        }
        assert_eq!(s.get(ParamId(0)), &[1.5]);
    }

    #[test]
    fn matches_textbook_recurrence() {
        let mut s = scalar_store(0.3);
        let mut adam = Adam::new(&s, AdamParams::default());
        let lr = LearningRates::default();
        let mut g = Grads::zeros_like(&s);
        g.get_mut(ParamId(0))[0] = 0.7;
        let (mut x, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            adam.step(&mut s, &g, &lr);
            m = 0.9 * m + 0.1 * 0.7;
            v = 0.999 * v + 0.001 * 0.49;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr.mlp * mh / (vh.sqrt() + 1e-15);
            assert!((s.get(ParamId(0))[0] - x).abs() < 1e-12);
        }
        assert!(x < 0.3);
    }

    #[test]
    fn nan_rejects_only_its_group() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s, AdamParams::default());
        let mut g = Grads::zeros_like(&s);
        g.get_mut(ParamId(0))[0] = f64::NAN;
        g.get_mut(ParamId(1))[0] = 1.0;
        let rejected = adam.step(&mut s, &g, &LearningRates::default());
        assert_eq!(rejected, vec![ParamGroup::Mlp]);
        assert_eq!(s.get(ParamId(0)), &[1.0]);
        assert!(s.get(ParamId(1))[0] < 1.0);
    }

    #[test]
    fn retains_moment_rows() {
        let mut s = ParamStore::new();
        s.add_per_anchor("o", ParamGroup::Offsets, &[3, 1], vec![0.0; 3]);
        let mut adam = Adam::new(&s, AdamParams::default());
        let mut g = Grads::zeros_like(&s);
        g.get_mut(ParamId(0)).copy_from_slice(&[1.0, 2.0, 3.0]);
        adam.step(&mut s, &g, &LearningRates::default());
        adam.retain_anchor_rows(&s, &[true, false, true]).unwrap();
        assert_eq!(adam.m[0].len(), 2);
        assert!((adam.m[0][0] - 0.1).abs() < 1e-12 && (adam.m[0][1] - 0.3).abs() < 1e-12);
    }
}
