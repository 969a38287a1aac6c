//! Dense kernels behind the tape operations.
//!
//! All loops accumulate in a fixed index order so results are bitwise
//! reproducible; parallel paths only ever split disjoint output rows.

use rayon::prelude::*;

/// C (m x n) += A (m x k) @ B (k x n), row-major.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // Parallel over output rows: each row is written by exactly one task
    // and accumulated in ascending k order, so scheduling cannot change
    // the result.
    if m * k * n >= 1 << 18 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| {
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += a_ip * bj;
                }
            }
        });
    } else {
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += a_ip * bj;
                }
            }
        }
    }
}

/// C (m x n) += Aᵀ @ B where A is (k x m) and B is (k x n), row-major.
pub fn matmul_t_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    if m * k * n >= 1 << 18 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| {
            for p in 0..k {
                let a_pi = a[p * m + i];
                let b_row = &b[p * n..(p + 1) * n];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += a_pi * bj;
                }
            }
        });
    } else {
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let a_pi = a[p * m + i];
                let b_row = &b[p * n..(p + 1) * n];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += a_pi * bj;
                }
            }
        }
    }
}

/// Row-major transpose: src (m x n) -> dst (n x m).
pub fn transpose(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut dst = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
    dst
}

/// Unrolls one sample of a (c_i, h, w) image into the 3x3/pad-1/stride-1
/// column matrix of shape (c_i*9, h*w).
pub fn im2col3(x: &[f64], c_i: usize, h: usize, w: usize, col: &mut [f64]) {
    debug_assert_eq!(x.len(), c_i * h * w);
    debug_assert_eq!(col.len(), c_i * 9 * h * w);
    let hw = h * w;
    col.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..c_i {
        let plane = &x[c * hw..(c + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut col[((c * 3 + dy) * 3 + dx) * hw..((c * 3 + dy) * 3 + dx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // input column ix = xo + dx - 1 for output column xo
                    let xo0 = usize::from(dx == 0);
                    let ix0 = usize::from(dx == 2);
                    let len = w - xo0 - ix0;
                    row[y * w + xo0..y * w + xo0 + len]
                        .copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + len]);
                }
            }
        }
    }
}

/// Adjoint of `im2col3`: scatter-adds the column matrix back into the image.
pub fn col2im3(col: &[f64], c_i: usize, h: usize, w: usize, x: &mut [f64]) {
    debug_assert_eq!(x.len(), c_i * h * w);
    debug_assert_eq!(col.len(), c_i * 9 * h * w);
    let hw = h * w;
    for c in 0..c_i {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &col[((c * 3 + dy) * 3 + dx) * hw..((c * 3 + dy) * 3 + dx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let xo0 = usize::from(dx == 0);
                    let ix0 = usize::from(dx == 2);
                    let len = w - xo0 - ix0;
                    for t in 0..len {
                        plane[iy * w + ix0 + t] += row[y * w + xo0 + t];
                    }
                }
            }
        }
    }
}
