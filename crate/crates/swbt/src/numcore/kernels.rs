//! Matrix kernels shared by the graph ops.
//!
//! Both kernels keep the inner loop free of reductions (every inner-loop
//! iteration writes a distinct output element), so LLVM vectorizes them
//! without reassociating float adds. That keeps results bit-identical to the
//! scalar loop while still using the wide units.

use crate::Scalar;

/// C[m,n] += A[m,k] * B[k,n], all row-major.
pub fn mm_nn_acc<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (aval, brow) in arow.iter().zip(b.chunks_exact(n)) {
            let s = *aval;
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += s * *bv;
            }
        }
    }
}

/// C[k,n] += Aᵀ * B where A is [m,k] and B is [m,n], all row-major.
pub fn mm_tn_acc<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (aval, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            let s = *aval;
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += s * *bv;
            }
        }
    }
}

/// dst = srcᵀ where src is [rows, cols] row-major; dst gets [cols, rows].
pub fn transpose_into<S: Scalar>(dst: &mut [S], src: &[S], rows: usize, cols: usize) {
    debug_assert_eq!(dst.len(), rows * cols);
    debug_assert_eq!(src.len(), rows * cols);
    for r in 0..rows {
        let srow = &src[r * cols..(r + 1) * cols];
        for (c, v) in srow.iter().enumerate() {
            dst[c * rows + r] = *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let mut c = vec![0.0; m * n];
        mm_nn_acc(&mut c, &a, &b, m, k, n);
        let want = naive_mm(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_matches_transposed_naive() {
        let (m, k, n) = (6, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64).cos()).collect();
        let mut at = vec![0.0; m * k];
        transpose_into(&mut at, &a, m, k);
        let want = naive_mm(&at, &b, k, m, n);
        let mut c = vec![0.0; k * n];
        mm_tn_acc(&mut c, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulates_instead_of_overwriting() {
        let mut c = vec![10.0f64];
        mm_nn_acc(&mut c, &[2.0], &[3.0], 1, 1, 1);
        assert_eq!(c[0], 16.0);
    }

    // Rough throughput probe; prints so tuning runs can read it from test
    // output. Always passes.
    #[test]
    fn throughput_probe() {
        let d = 128;
        let a: Vec<f32> = (0..d * d).map(|i| (i as f32) * 1e-4).collect();
        let b = a.clone();
        let mut c = vec![0.0f32; d * d];
        let reps = 200;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            mm_nn_acc(&mut c, &a, &b, d, d, d);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (d * d * d) as f64 * reps as f64) / dt / 1e9;
        println!("mm_nn_acc f32 {d}x{d}: {gflops:.2} GFLOP/s");
        assert!(c[0].is_finite());
    }
}
