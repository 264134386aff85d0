//! Flat store of named parameter tensors.
//!
//! Every learnable quantity of the neural scene lives here so that the
//! optimizer, checkpoints and gradient reports can iterate over one list.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Tri-plane texels.
    Planes,
    /// Decoder, attention and attribute network weights.
    Mlp,
    /// Per-anchor offsets.
    Offsets,
    /// Per-anchor log scale and per-offset log scales.
    LogScales,
    /// Per-anchor feature vectors.
    Features,
    /// Non-learnable state (batch-norm running statistics, slot masks).
    Buffer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Planes,
        ParamGroup::Mlp,
        ParamGroup::Offsets,
        ParamGroup::LogScales,
        ParamGroup::Features,
        ParamGroup::Buffer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Planes => "planes",
            ParamGroup::Mlp => "mlp",
            ParamGroup::Offsets => "offsets",
            ParamGroup::LogScales => "log_scales",
            ParamGroup::Features => "features",
            ParamGroup::Buffer => "buffer",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn learnable(self) -> bool {
        self != ParamGroup::Buffer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// `true` when the leading dimension indexes anchors.
    pub per_anchor: bool,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, shape: &[usize], data: Vec<f64>) -> ParamId {
        self.push(name, group, shape, false, data)
    }

    pub fn add_per_anchor(&mut self, name: &str, group: ParamGroup, shape: &[usize], data: Vec<f64>) -> ParamId {
        self.push(name, group, shape, true, data)
    }

    fn push(&mut self, name: &str, group: ParamGroup, shape: &[usize], per_anchor: bool, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor `{name}` shape/data mismatch");
        assert!(self.find(name).is_none(), "duplicate tensor `{name}`");
        self.tensors.push(Tensor {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            per_anchor,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.tensors.iter().filter(|t| t.group == group).map(|t| t.data.len()).sum()
    }

    /// Keeps the rows of every per-anchor tensor where `keep` is set.
    pub fn retain_anchor_rows(&mut self, keep: &[bool]) -> Result<()> {
        for t in &mut self.tensors {
            if t.per_anchor {
                retain_rows(t, keep)?;
            }
        }
        Ok(())
    }

    /// Replaces the data of every tensor, checking names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.tensors.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.name != theirs.name || mine.group != theirs.group || mine.per_anchor != theirs.per_anchor {
                return Err(Error::Checkpoint(format!("tensor `{}` does not match `{}`", mine.name, theirs.name)));
            }
            if mine.row_len() != theirs.row_len() || mine.shape.len() != theirs.shape.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}", theirs.name, theirs.shape)));
            }
            if !mine.per_anchor && mine.shape != theirs.shape {
                return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}", theirs.name, theirs.shape)));
            }
            mine.shape = theirs.shape.clone();
            mine.data = theirs.data.clone();
        }
        Ok(())
    }
}

pub(crate) fn retain_rows(t: &mut Tensor, keep: &[bool]) -> Result<()> {
    let rows = t.shape[0];
    if keep.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "row mask of length {} for tensor `{}` with {rows} rows",
            keep.len(),
            t.name
        )));
    }
    let rl = t.row_len();
    let mut data = Vec::with_capacity(t.data.len());
    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        data.extend_from_slice(&t.data[r * rl..(r + 1) * rl]);
    }
    t.shape[0] = keep.iter().filter(|&&k| k).count();
    t.data = data;
    Ok(())
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().flatten().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self, id: ParamId) -> bool {
        self.data[id.0].iter().all(|v| v.is_finite())
    }

    /// L2 norm over all tensors of `group`.
    pub fn group_norm(&self, store: &ParamStore, group: ParamGroup) -> f64 {
        store
            .tensors
            .iter()
            .zip(&self.data)
            .filter(|(t, _)| t.group == group)
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Mlp, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        s.add_per_anchor("off", ParamGroup::Offsets, &[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        s
    }

    #[test]
    fn retain_rows_drops_only_per_anchor_rows() {
        let mut s = store();
        s.retain_anchor_rows(&[true, false, true]).unwrap();
        assert_eq!(s.get(ParamId(0)), &[1.0, 2.0, 3.0, 4.0]);
        let off = s.tensor(ParamId(1));
        assert_eq!(off.shape, vec![2, 2]);
        assert_eq!(off.data, vec![0.0, 1.0, 20.0, 21.0]);
        assert!(s.retain_anchor_rows(&[true]).is_err());
    }

    #[test]
    fn group_norms() {
        let s = store();
        let mut g = Grads::zeros_like(&s);
        g.get_mut(ParamId(0)).copy_from_slice(&[3.0, 0.0, 0.0, 4.0]);
        g.get_mut(ParamId(1))[5] = 1.0;
        assert_eq!(g.group_norm(&s, ParamGroup::Mlp), 5.0);
        assert_eq!(g.group_norm(&s, ParamGroup::Offsets), 1.0);
        assert_eq!(g.group_norm(&s, ParamGroup::Planes), 0.0);
        let mut h = g.clone();
        h.add_assign(&g);
        assert_eq!(h.group_norm(&s, ParamGroup::Mlp), 10.0);
    }

    #[test]
    fn group_codes_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::from_code(g.code()), Some(g));
        }
        assert_eq!(ParamGroup::from_code(42), None);
    }

    #[test]
    fn load_checks_names() {
        let mut a = store();
        let mut b = ParamStore::new();
        b.add("x", ParamGroup::Mlp, &[2, 2], vec![0.0; 4]);
        b.add_per_anchor("off", ParamGroup::Offsets, &[1, 2], vec![0.0; 2]);
        assert!(a.load_from(&b).is_err());
        let mut c = store();
        c.retain_anchor_rows(&[false, true, false]).unwrap();
        a.load_from(&c).unwrap();
        assert_eq!(a.tensor(ParamId(1)).shape, vec![1, 2]);
    }
}
