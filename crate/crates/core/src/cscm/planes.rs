//! Bilinear sampling of `h × w × m` feature planes (row-major, channels last).
//!
//! A normalized coordinate `u ∈ [0, 1]` maps to texel column `u·(w−1)`, so
//! the corners of the unit square land exactly on corner texels.

/// Texel indices and weights of one bilinear lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub texels: [usize; 4],
    pub weights: [f64; 4],
}

/// `uv` is clamped to `[0, 1]²`. Requires `w, h ≥ 2`.
pub fn bilinear_tap(uv: [f64; 2], w: usize, h: usize) -> BilinearTap {
    debug_assert!(w >= 2 && h >= 2);
    let x = uv[0].clamp(0.0, 1.0) * (w - 1) as f64;
    let y = uv[1].clamp(0.0, 1.0) * (h - 1) as f64;
    let i0 = (x.floor() as usize).min(w - 2);
    let j0 = (y.floor() as usize).min(h - 2);
    let fx = x - i0 as f64;
    let fy = y - j0 as f64;
    BilinearTap {
        texels: [j0 * w + i0, j0 * w + i0 + 1, (j0 + 1) * w + i0, (j0 + 1) * w + i0 + 1],
        weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

/// Writes the `m` sampled channels into `out`.
pub fn sample_into(plane: &[f64], m: usize, tap: &BilinearTap, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (&t, &wt) in tap.texels.iter().zip(&tap.weights) {
        let texel = &plane[t * m..(t + 1) * m];
        for (o, v) in out.iter_mut().zip(texel) {
            *o += wt * v;
        }
    }
}

pub fn sample(plane: &[f64], w: usize, h: usize, m: usize, uv: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; m];
    sample_into(plane, m, &bilinear_tap(uv, w, h), &mut out);
    out
}

/// Scatters `d_out` (one value per channel) back onto the plane gradient.
pub fn sample_backward(grad: &mut [f64], m: usize, tap: &BilinearTap, d_out: &[f64]) {
    for (&t, &wt) in tap.texels.iter().zip(&tap.weights) {
        for (g, d) in grad[t * m..(t + 1) * m].iter_mut().zip(d_out) {
            *g += wt * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texel_field(w: usize, h: usize, m: usize, f: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; w * h * m];
        for j in 0..h {
            for i in 0..w {
                for c in 0..m {
                    out[(j * w + i) * m + c] = f(i, j, c);
                }
            }
        }
        out
    }

    #[test]
    fn texel_center_returns_texel() {
        let plane = texel_field(5, 4, 2, |i, j, c| (i * 10 + j) as f64 + c as f64 * 0.5);
        let s = sample(&plane, 5, 4, 2, [2.0 / 4.0, 1.0 / 3.0]);
        assert_eq!(s, vec![21.0, 21.5]);
        let corner = sample(&plane, 5, 4, 2, [1.0, 1.0]);
        assert_eq!(corner, vec![43.0, 43.5]);
    }

    #[test]
    fn midpoint_averages_four_texels() {
        let plane = vec![1.0, 2.0, 4.0, 8.0];
        let s = sample(&plane, 2, 2, 1, [0.5, 0.5]);
        assert_eq!(s, vec![3.75]);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let (w, h, m) = (4, 3, 2);
        let tap = bilinear_tap([0.37, 0.81], w, h);
        let plane = texel_field(w, h, m, |i, j, c| ((i * 7 + j * 3 + c) % 5) as f64);
        let mut out = vec![0.0; m];
        sample_into(&plane, m, &tap, &mut out);
        let d = [0.3, -1.2];
        let mut g = vec![0.0; w * h * m];
        sample_backward(&mut g, m, &tap, &d);
        let lhs: f64 = out.iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.iter().zip(&plane).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reproduces_affine_fields(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
            u in 0.0f64..=1.0, v in 0.0f64..=1.0,
            w in 2usize..9, h in 2usize..9,
        ) {
            let plane = texel_field(w, h, 1, |i, j, _| a * i as f64 + b * j as f64 + c);
            let s = sample(&plane, w, h, 1, [u, v])[0];
            let expected = a * u * (w - 1) as f64 + b * v * (h - 1) as f64 + c;
            prop_assert!((s - expected).abs() <= 1e-9);
        }

        #[test]
        fn weights_form_partition_of_unity(u in -0.5f64..1.5, v in -0.5f64..1.5) {
            let tap = bilinear_tap([u, v], 6, 5);
            prop_assert!((tap.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(tap.weights.iter().all(|&w| w >= 0.0));
        }
    }
}
