//! Matrix multiply on strided views, row-blocked across threads.

use crate::par;

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

const ROW_BLOCK: usize = 64;

/// `c = a · b` (or `c += a · b` when `accumulate`), with `c` row-major and
/// contiguous. Each output row is produced by exactly one kernel call so
/// the summation order does not depend on the thread count.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner extents");
    assert_eq!(c.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    let parallel = m * k * n >= par::MIN_PARALLEL_WORK && m > ROW_BLOCK;
    par::for_each_chunk_mut(c, ROW_BLOCK * n, parallel, |blk, c_blk| {
        let r0 = blk * ROW_BLOCK;
        let rows = c_blk.len() / n;
        // SAFETY: the view covers rows r0..r0+rows of `a`, all inside `a.data`
        // by construction of the caller's strides; `c_blk` is exclusively owned.
        unsafe {
            let a_ptr = a.data.as_ptr().offset(r0 as isize * a.rs);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr,
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_including_transposed_views() {
        let (m, k, n) = (130, 17, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 * 0.5).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(
            MatRef::row_major(&a, m, k),
            MatRef::row_major(&b, k, n),
            &mut c,
            false,
        );
        assert_eq!(c, want);

        // b stored transposed (n×k) and read through a transposed view.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(
            MatRef::row_major(&a, m, k),
            MatRef::row_major(&bt, n, k).t(),
            &mut c2,
            true,
        );
        for (x, y) in c2.iter().zip(&want) {
            assert_eq!(*x, y + 1.0);
        }
    }
}
