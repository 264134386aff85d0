//! Context grid: a lattice of `α³` cells over normalized scene space whose
//! vertices borrow the features of nearby anchors.

use crate::scene::Vec3;

/// Vertex whose neighborhood holds no anchor.
pub const EMPTY: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextGrid {
    /// Cells per axis.
    pub resolution: usize,
    /// Anchor index per vertex, `EMPTY` when unassigned. Vertex `(i, j, k)`
    /// is stored at `(k·(α+1) + j)·(α+1) + i`.
    pub vertex_anchor: Vec<u32>,
}

impl ContextGrid {
    /// Each vertex adopts the nearest anchor within one cell diagonal
    /// (lowest index on ties). `anchors` are normalized to `[0, 1]³`.
    pub fn build(anchors: &[Vec3], resolution: usize) -> Self {
        assert!(resolution >= 1);
        let nv = resolution + 1;
        let cell = 1.0 / resolution as f64;
        let radius2 = 3.0 * cell * cell;
        let mut vertex_anchor = vec![EMPTY; nv * nv * nv];
        // Bucket anchors by cell so each vertex only scans nearby ones.
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); resolution * resolution * resolution];
        let cell_of = |v: f64| ((v * resolution as f64).floor().max(0.0) as usize).min(resolution - 1);
        for (a, p) in anchors.iter().enumerate() {
            let (ci, cj, ck) = (cell_of(p.x), cell_of(p.y), cell_of(p.z));
            buckets[(ck * resolution + cj) * resolution + ci].push(a as u32);
        }
        for k in 0..nv {
            for j in 0..nv {
                for i in 0..nv {
                    let v = Vec3::new(i as f64, j as f64, k as f64) * cell;
                    let mut best = (f64::INFINITY, EMPTY);
                    // One diagonal spans at most two cells in each direction.
                    for ck in k.saturating_sub(2)..(k + 2).min(resolution) {
                        for cj in j.saturating_sub(2)..(j + 2).min(resolution) {
                            for ci in i.saturating_sub(2)..(i + 2).min(resolution) {
                                for &a in &buckets[(ck * resolution + cj) * resolution + ci] {
                                    let d2 = (anchors[a as usize] - v).norm_squared();
                                    if d2 <= radius2 && (d2, a) < best {
                                        best = (d2, a);
                                    }
                                }
                            }
                        }
                    }
                    vertex_anchor[(k * nv + j) * nv + i] = best.1;
                }
            }
        }
        Self {
            resolution,
            vertex_anchor,
        }
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        let nv = self.resolution + 1;
        (k * nv + j) * nv + i
    }

    /// Trilinear weights of the 8 corners of the cell containing `p`
    /// (clamped to `[0, 1]³`), as `(vertex index, weight)`.
    pub fn corner_weights(&self, p: &Vec3) -> [(usize, f64); 8] {
        let r = self.resolution;
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for axis in 0..3 {
            let x = p[axis].clamp(0.0, 1.0) * r as f64;
            base[axis] = (x.floor() as usize).min(r - 1);
            t[axis] = x - base[axis] as f64;
        }
        let mut out = [(0, 0.0); 8];
        for (corner, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let w = |d: usize, t: f64| if d == 1 { t } else { 1.0 - t };
            *slot = (
                self.vertex_index(base[0] + di, base[1] + dj, base[2] + dk),
                w(di, t[0]) * w(dj, t[1]) * w(dk, t[2]),
            );
        }
        out
    }

    /// Anchors and renormalized weights contributing to a query at `p`.
    /// Empty vertices are dropped; an all-empty neighborhood yields an empty
    /// list. Corners sharing an anchor are merged.
    pub fn query(&self, p: &Vec3) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(8);
        let mut total = 0.0;
        for (v, w) in self.corner_weights(p) {
            let a = self.vertex_anchor[v];
            if a == EMPTY || w == 0.0 {
                continue;
            }
            total += w;
            match out.iter_mut().find(|(b, _)| *b == a as usize) {
                Some(entry) => entry.1 += w,
                None => out.push((a as usize, w)),
            }
        }
        if total > 0.0 {
            out.iter_mut().for_each(|e| e.1 /= total);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_grid(res: usize) -> (Vec<Vec3>, ContextGrid) {
        // One anchor near every vertex so no vertex is empty.
        let nv = res + 1;
        let mut anchors = Vec::new();
        for k in 0..nv {
            for j in 0..nv {
                for i in 0..nv {
                    anchors.push(Vec3::new(i as f64, j as f64, k as f64) / res as f64 + Vec3::repeat(1e-3));
                }
            }
        }
        let grid = ContextGrid::build(&anchors, res);
        (anchors, grid)
    }

    #[test]
    fn vertex_and_center_weights() {
        let (_, grid) = dense_grid(4);
        let at_vertex = grid.corner_weights(&Vec3::new(0.25, 0.5, 0.75));
        let ones: Vec<_> = at_vertex.iter().filter(|(_, w)| *w == 1.0).collect();
        assert_eq!(ones.len(), 1);
        assert_eq!(ones[0].0, grid.vertex_index(1, 2, 3));
        assert_eq!(at_vertex.iter().map(|e| e.1).sum::<f64>(), 1.0);
        let center = grid.corner_weights(&Vec3::repeat(0.125));
        assert!(center.iter().all(|&(_, w)| w == 0.125));
    }

    #[test]
    fn vertices_adopt_nearest_anchor_in_range() {
        let anchors = vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.45, 0.5, 0.5)];
        let grid = ContextGrid::build(&anchors, 2);
        assert_eq!(grid.vertex_anchor[grid.vertex_index(0, 0, 0)], 0);
        assert_eq!(grid.vertex_anchor[grid.vertex_index(1, 1, 1)], 1);
        // Corner (2,2,2) is ≈0.95 from anchor 1, beyond the 0.866 diagonal.
        assert_eq!(grid.vertex_anchor[grid.vertex_index(2, 2, 2)], EMPTY);
        // A point near (1,1,1) only sees anchors through non-empty corners.
        let q = grid.query(&Vec3::new(0.9, 0.9, 0.9));
        assert!((q.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().all(|&(a, _)| a < 2));
    }

    #[test]
    fn all_empty_neighborhood_is_empty() {
        let grid = ContextGrid::build(&[Vec3::new(0.01, 0.01, 0.01)], 8);
        assert!(grid.query(&Vec3::repeat(0.9)).is_empty());
    }

    #[test]
    fn build_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchors: Vec<Vec3> = (0..60).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        for res in [1, 3, 7] {
            let grid = ContextGrid::build(&anchors, res);
            let cell = 1.0 / res as f64;
            for k in 0..=res {
                for j in 0..=res {
                    for i in 0..=res {
                        let v = Vec3::new(i as f64, j as f64, k as f64) * cell;
                        let mut best = (f64::INFINITY, EMPTY);
                        for (a, p) in anchors.iter().enumerate() {
                            let d2 = (p - v).norm_squared();
                            if d2 <= 3.0 * cell * cell && (d2, a as u32) < best {
                                best = (d2, a as u32);
                            }
                        }
                        assert_eq!(grid.vertex_anchor[grid.vertex_index(i, j, k)], best.1);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_partition_unity_and_match_oracle(x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0, res in 1usize..9) {
            let grid = ContextGrid { resolution: res, vertex_anchor: vec![0; (res + 1).pow(3)] };
            let p = Vec3::new(x, y, z);
            let w = grid.corner_weights(&p);
            prop_assert!((w.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() <= 1e-12);
            // Explicit 8-term oracle: weight of a vertex is Π(1 − |p − v|/cell).
            let cell = 1.0 / res as f64;
            for (vi, wt) in w {
                let nv = res + 1;
                let (i, j, k) = (vi % nv, (vi / nv) % nv, vi / (nv * nv));
                let v = Vec3::new(i as f64, j as f64, k as f64) * cell;
                let oracle: f64 = (0..3).map(|a| (1.0 - (p[a] - v[a]).abs() / cell).max(0.0)).product();
                prop_assert!((wt - oracle).abs() <= 1e-9);
            }
        }
    }
}
