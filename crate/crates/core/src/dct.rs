//! Orthonormal type-II discrete cosine transform on square patches.
//!
//! Coefficient `(m, n)` of an `s x s` patch is
//! `c_m c_n sum_{i,j} x[i][j] cos(pi (2i+1) m / 2s) cos(pi (2j+1) n / 2s)`
//! with `c_0 = sqrt(1/s)` and `c_k = sqrt(2/s)` otherwise, so the transform
//! is orthogonal and its inverse is its transpose.

use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Row-major `s x s` basis matrix `D` with `D[k][i] = c_k cos(pi (2i+1) k / 2s)`.
pub(crate) fn basis(s: usize) -> Vec<f64> {
    let mut d = vec![0.0; s * s];
    for k in 0..s {
        let c = if k == 0 {
            (1.0 / s as f64).sqrt()
        } else {
            (2.0 / s as f64).sqrt()
        };
        for i in 0..s {
            d[k * s + i] = c * (PI * (2 * i + 1) as f64 * k as f64 / (2 * s) as f64).cos();
        }
    }
    d
}

pub(crate) fn check_patch_side(s: usize) -> Result<()> {
    ensure!(
        s >= 2 && s.is_multiple_of(2),
        "patch side must be even and >= 2, got {s}"
    );
    Ok(())
}

/// `out = D X D^T` (forward) or `D^T X D` (inverse) for one patch held in `buf`.
fn transform_in_place(basis: &[f64], s: usize, buf: &mut [f64], tmp: &mut [f64], inverse: bool) {
    // Rows: tmp = X D^T (forward) / X D (inverse).
    for r in 0..s {
        for k in 0..s {
            let mut acc = 0.0;
            for i in 0..s {
                let b = if inverse {
                    basis[i * s + k]
                } else {
                    basis[k * s + i]
                };
                acc += buf[r * s + i] * b;
            }
            tmp[r * s + k] = acc;
        }
    }
    // Columns: buf = D tmp (forward) / D^T tmp (inverse).
    for k in 0..s {
        for c in 0..s {
            let mut acc = 0.0;
            for i in 0..s {
                let b = if inverse {
                    basis[i * s + k]
                } else {
                    basis[k * s + i]
                };
                acc += b * tmp[i * s + c];
            }
            buf[k * s + c] = acc;
        }
    }
}

/// 2D DCT of a single `s x s` patch. `inverse` applies the exact inverse.
pub fn dct2d(patch: &Tensor, inverse: bool) -> Result<Tensor> {
    let shape = patch.shape();
    ensure!(
        shape.len() == 2 && shape[0] == shape[1],
        "dct2d expects a square matrix, got shape {:?}",
        shape
    );
    let s = shape[0];
    check_patch_side(s)?;
    let d = basis(s);
    let mut buf = patch.data().to_vec();
    let mut tmp = vec![0.0; s * s];
    transform_in_place(&d, s, &mut buf, &mut tmp, inverse);
    Tensor::new(vec![s, s], buf)
}

/// Geometry of a `[C, H, W]` image split into non-overlapping `s x s` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub side: usize,
}

impl PatchGrid {
    pub fn new(shape: &[usize], side: usize) -> Result<Self> {
        check_patch_side(side)?;
        ensure!(
            shape.len() == 3,
            "expected a [C, H, W] image, got shape {:?}",
            shape
        );
        let (channels, height, width) = (shape[0], shape[1], shape[2]);
        ensure!(
            height % side == 0 && width % side == 0,
            "patch side {side} does not divide image of shape {:?}",
            shape
        );
        Ok(Self {
            channels,
            height,
            width,
            side,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.channels * (self.height / self.side) * (self.width / self.side)
    }

    /// True when in-patch position `(m, n)` lies in the bottom-right quarter.
    pub fn is_high(&self, m: usize, n: usize) -> bool {
        let half = self.side / 2;
        m >= half && n >= half
    }

    /// Calls `f(offset_of_patch_origin)` for every patch; element `(m, n)` of
    /// the patch lives at `origin + m * width + n`.
    pub(crate) fn for_each_patch(&self, mut f: impl FnMut(usize)) {
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for py in (0..self.height).step_by(self.side) {
                for px in (0..self.width).step_by(self.side) {
                    f(c * plane + py * self.width + px);
                }
            }
        }
    }
}

/// Applies the DCT to every patch of `data` (laid out as `grid`) and writes
/// the coefficients in place of the pixels they came from.
pub fn patch_dct(grid: &PatchGrid, data: &[f64], inverse: bool) -> Vec<f64> {
    let s = grid.side;
    let w = grid.width;
    let d = basis(s);
    let mut out = vec![0.0; data.len()];
    let mut buf = vec![0.0; s * s];
    let mut tmp = vec![0.0; s * s];
    grid.for_each_patch(|origin| {
        for m in 0..s {
            buf[m * s..(m + 1) * s].copy_from_slice(&data[origin + m * w..origin + m * w + s]);
        }
        transform_in_place(&d, s, &mut buf, &mut tmp, inverse);
        for m in 0..s {
            out[origin + m * w..origin + m * w + s].copy_from_slice(&buf[m * s..(m + 1) * s]);
        }
    });
    out
}

/// Like [`patch_dct`] (forward only), but each patch is shifted by its first
/// pixel before transforming and the DC term is restored from the patch
/// mean afterwards. AC coefficients of a constant patch come out exactly 0.
pub fn patch_dct_exact_ac(grid: &PatchGrid, data: &[f64]) -> Vec<f64> {
    let s = grid.side;
    let w = grid.width;
    let mut shifted = data.to_vec();
    let mut means = Vec::with_capacity(grid.patch_count());
    grid.for_each_patch(|origin| {
        let pivot = data[origin];
        let mut sum = 0.0;
        for m in 0..s {
            for v in &mut shifted[origin + m * w..origin + m * w + s] {
                sum += *v;
                *v -= pivot;
            }
        }
        means.push(sum / (s * s) as f64);
    });
    let mut out = patch_dct(grid, &shifted, false);
    let mut k = 0;
    grid.for_each_patch(|origin| {
        out[origin] = s as f64 * means[k];
        k += 1;
    });
    out
}

/// Mask over a `[C, H, W]` coefficient layout selecting each patch's
/// high-frequency quarter.
pub fn high_quarter_mask(grid: &PatchGrid) -> Vec<f64> {
    let s = grid.side;
    let w = grid.width;
    let mut mask = vec![0.0; grid.channels * grid.height * w];
    grid.for_each_patch(|origin| {
        for m in s / 2..s {
            for n in s / 2..s {
                mask[origin + m * w + n] = 1.0;
            }
        }
    });
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct O(s^4) cosine sum.
    fn brute_dct(x: &[f64], s: usize) -> Vec<f64> {
        let c = |k: usize| {
            if k == 0 {
                (1.0 / s as f64).sqrt()
            } else {
                (2.0 / s as f64).sqrt()
            }
        };
        let mut out = vec![0.0; s * s];
        for m in 0..s {
            for n in 0..s {
                let mut acc = 0.0;
                for i in 0..s {
                    for j in 0..s {
                        acc += x[i * s + j]
                            * (PI * (2 * i + 1) as f64 * m as f64 / (2 * s) as f64).cos()
                            * (PI * (2 * j + 1) as f64 * n as f64 / (2 * s) as f64).cos();
                    }
                }
                out[m * s + n] = c(m) * c(n) * acc;
            }
        }
        out
    }

    #[test]
    fn constant_patch_is_dc_only() {
        let c = 0.37;
        let y = dct2d(&Tensor::full(&[8, 8], c), false).unwrap();
        assert!((y.data()[0] - 8.0 * c).abs() < 1e-12);
        for &v in &y.data()[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_matches_cosine_sum() {
        let mut x = vec![0.0; 16];
        x[0] = 1.0;
        let expected = brute_dct(&x, 4);
        let got = dct2d(&Tensor::new(vec![4, 4], x).unwrap(), false).unwrap();
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        // c_m c_n cos(pi m / 8) cos(pi n / 8) at (1, 1) = (2/4) cos^2(pi/8)
        let v11 = 0.5 * (PI / 8.0).cos().powi(2);
        assert!((got.data()[5] - v11).abs() < 1e-14);
    }

    #[test]
    fn rejects_odd_or_zero_side() {
        assert!(dct2d(&Tensor::zeros(&[3, 3]), false).is_err());
        assert!(dct2d(&Tensor::zeros(&[0, 0]), false).is_err());
        assert!(dct2d(&Tensor::zeros(&[4, 2]), false).is_err());
    }

    #[test]
    fn patch_grid_rejects_indivisible() {
        assert!(PatchGrid::new(&[1, 12, 12], 8).is_err());
        assert!(PatchGrid::new(&[1, 16, 16], 8).is_ok());
    }

    #[test]
    fn patch_dct_matches_per_patch_dct() {
        let grid = PatchGrid::new(&[2, 8, 8], 4).unwrap();
        let data: Vec<f64> = (0..128).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let coeffs = patch_dct(&grid, &data, false);
        // patch at channel 1, rows 4.., cols 0..
        let origin = 64 + 4 * 8;
        let patch: Vec<f64> = (0..4)
            .flat_map(|m| data[origin + m * 8..origin + m * 8 + 4].to_vec())
            .collect();
        let expected = brute_dct(&patch, 4);
        for m in 0..4 {
            for n in 0..4 {
                assert!((coeffs[origin + m * 8 + n] - expected[m * 4 + n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_ac_agrees_with_plain_transform() {
        let grid = PatchGrid::new(&[1, 8, 8], 4).unwrap();
        let data: Vec<f64> = (0..64).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let a = patch_dct(&grid, &data, false);
        let b = patch_dct_exact_ac(&grid, &data);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let flat = patch_dct_exact_ac(&grid, &[0.3; 64]);
        let dc = [0, 4, 32, 36];
        for (k, v) in flat.iter().enumerate() {
            if !dc.contains(&k) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_and_parseval(half in 1usize..6, seed in any::<u64>()) {
            let s = 2 * half;
            let mut state = seed;
            let x: Vec<f64> = (0..s * s).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            }).collect();
            let t = Tensor::new(vec![s, s], x.clone()).unwrap();
            let y = dct2d(&t, false).unwrap();
            let e_in: f64 = x.iter().map(|v| v * v).sum();
            let e_out: f64 = y.data().iter().map(|v| v * v).sum();
            prop_assert!((e_in - e_out).abs() < 1e-10);
            let back = dct2d(&y, true).unwrap();
            prop_assert!(back.linf_distance(&t).unwrap() < 1e-10);
        }
    }
}
