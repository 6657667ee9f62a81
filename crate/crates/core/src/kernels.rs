//! Dense affine-layer kernels over row-major matrices.
//!
//! Weights are stored input-major: `w[k * out_dim + j]` multiplies input `k`
//! into output `j`. Every output element accumulates as
//! `bias + x_0 w_0 + x_1 w_1 + ...` in ascending input order with fused
//! multiply-adds, independent of how rows are blocked, so evaluating a row
//! alone or inside a larger batch gives bit-identical results.

use crate::real::Real;

const ROW_BLOCK: usize = 4;
const LANES: usize = 16;

/// `y[r, j] = bias[j] + sum_k x[r, k] * w[k, j]`.
pub fn affine<T: Real>(
    x: &[T],
    rows: usize,
    in_dim: usize,
    w: &[T],
    bias: &[T],
    out_dim: usize,
    y: &mut [T],
) {
    debug_assert!(x.len() >= rows * in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(bias.len(), out_dim);
    debug_assert!(y.len() >= rows * out_dim);
    let mut r = 0;
    while r + ROW_BLOCK <= rows {
        affine_rows::<T, ROW_BLOCK>(x, r, in_dim, w, bias, out_dim, y);
        r += ROW_BLOCK;
    }
    while r < rows {
        affine_rows::<T, 1>(x, r, in_dim, w, bias, out_dim, y);
        r += 1;
    }
}

#[inline(always)]
fn affine_rows<T: Real, const R: usize>(
    x: &[T],
    r0: usize,
    in_dim: usize,
    w: &[T],
    bias: &[T],
    out_dim: usize,
    y: &mut [T],
) {
    let xs: [&[T]; R] = std::array::from_fn(|i| &x[(r0 + i) * in_dim..(r0 + i + 1) * in_dim]);
    let mut j = 0;
    while j + LANES <= out_dim {
        let mut acc = [[T::zero(); LANES]; R];
        for row in acc.iter_mut() {
            row.copy_from_slice(&bias[j..j + LANES]);
        }
        for k in 0..in_dim {
            let wk: &[T; LANES] = w[k * out_dim + j..k * out_dim + j + LANES]
                .try_into()
                .unwrap();
            for i in 0..R {
                let xv = xs[i][k];
                for c in 0..LANES {
                    acc[i][c] = xv.mul_add(wk[c], acc[i][c]);
                }
            }
        }
        for i in 0..R {
            let base = (r0 + i) * out_dim + j;
            y[base..base + LANES].copy_from_slice(&acc[i]);
        }
        j += LANES;
    }
    // Narrow tail (e.g. the 3-wide color head, 1-wide density head).
    while j < out_dim {
        for i in 0..R {
            let mut acc = bias[j];
            for k in 0..in_dim {
                acc = xs[i][k].mul_add(w[k * out_dim + j], acc);
            }
            y[(r0 + i) * out_dim + j] = acc;
        }
        j += 1;
    }
}

/// `dx[r, k] = sum_j dy[r, j] * w[k, j]` (overwrites `dx`).
pub fn affine_grad_input<T: Real>(
    dy: &[T],
    rows: usize,
    out_dim: usize,
    w: &[T],
    in_dim: usize,
    dx: &mut [T],
) {
    let mut wt = vec![T::zero(); in_dim * out_dim];
    for k in 0..in_dim {
        for j in 0..out_dim {
            wt[j * in_dim + k] = w[k * out_dim + j];
        }
    }
    let zero = vec![T::zero(); in_dim];
    affine(dy, rows, out_dim, &wt, &zero, in_dim, dx);
}

/// Accumulates `dw[k, j] += sum_r x[r, k] * dy[r, j]` and
/// `db[j] += sum_r dy[r, j]`.
pub fn affine_grad_params<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    debug_assert_eq!(dw.len(), in_dim * out_dim);
    for r in 0..rows {
        let row = &dy[r * out_dim..(r + 1) * out_dim];
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut k = 0;
    while k + ROW_BLOCK <= in_dim {
        grad_cols::<T, ROW_BLOCK>(x, dy, rows, in_dim, out_dim, k, dw);
        k += ROW_BLOCK;
    }
    while k < in_dim {
        grad_cols::<T, 1>(x, dy, rows, in_dim, out_dim, k, dw);
        k += 1;
    }
}

#[inline(always)]
fn grad_cols<T: Real, const R: usize>(
    x: &[T],
    dy: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    k0: usize,
    dw: &mut [T],
) {
    let mut j = 0;
    while j + LANES <= out_dim {
        let mut acc = [[T::zero(); LANES]; R];
        for r in 0..rows {
            let g: &[T; LANES] = dy[r * out_dim + j..r * out_dim + j + LANES]
                .try_into()
                .unwrap();
            for i in 0..R {
                let xv = x[r * in_dim + k0 + i];
                for c in 0..LANES {
                    acc[i][c] = xv.mul_add(g[c], acc[i][c]);
                }
            }
        }
        for i in 0..R {
            let base = (k0 + i) * out_dim + j;
            for c in 0..LANES {
                dw[base + c] += acc[i][c];
            }
        }
        j += LANES;
    }
    while j < out_dim {
        for i in 0..R {
            let mut acc = T::zero();
            for r in 0..rows {
                acc = x[r * in_dim + k0 + i].mul_add(dy[r * out_dim + j], acc);
            }
            dw[(k0 + i) * out_dim + j] += acc;
        }
        j += 1;
    }
}
