//! Small dense matrix kernels backing convolution.
//!
//! Row-major throughout. The hot loop is an axpy over contiguous output
//! rows, blocked four rows of A at a time so the compiler can keep four
//! accumulator vectors live and reuse each loaded B row.

use crate::scalar::Scalar;

/// c += a * b for row-major a (m x k), b (k x n), c (m x n).
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] = a0.mul_add(bv, c0[j]);
                c1[j] = a1.mul_add(bv, c1[j]);
                c2[j] = a2.mul_add(bv, c2[j]);
                c3[j] = a3.mul_add(bv, c3[j]);
            }
        }
        i += 4;
    }
    while i < m {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] = av.mul_add(br[j], cr[j]);
            }
        }
        i += 1;
    }
}

/// c += a^T * b for row-major a (k x m), b (k x n), c (m x n).
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        let mut i = 0;
        while i + 4 <= m {
            let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            let a0 = ar[i];
            let a1 = ar[i + 1];
            let a2 = ar[i + 2];
            let a3 = ar[i + 3];
            for j in 0..n {
                let bv = br[j];
                c0[j] = a0.mul_add(bv, c0[j]);
                c1[j] = a1.mul_add(bv, c1[j]);
                c2[j] = a2.mul_add(bv, c2[j]);
                c3[j] = a3.mul_add(bv, c3[j]);
            }
            i += 4;
        }
        while i < m {
            let av = ar[i];
            let cr = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                cr[j] = av.mul_add(br[j], cr[j]);
            }
            i += 1;
        }
    }
}
