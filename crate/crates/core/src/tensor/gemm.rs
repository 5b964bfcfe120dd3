//! Matrix-multiply kernels.
//!
//! Row-major `i-k-j` loops: the inner `j` sweep runs over contiguous rows of
//! `b` and `out`, which autovectorizes. Accumulation order over `k` is fixed
//! and ascending for every output element, so results are bit-deterministic
//! regardless of how rows are split across threads.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Running count of multiply-accumulates issued by `gemm`/`bmm`, for the
/// instrumented FLOP oracle and the benchmark runner.
static MAC_COUNT: AtomicU64 = AtomicU64::new(0);

pub fn reset_mac_count() {
    MAC_COUNT.store(0, Ordering::Relaxed);
}

pub fn mac_count() -> u64 {
    MAC_COUNT.load(Ordering::Relaxed)
}

// Below this many MACs the rayon dispatch overhead outweighs the win.
const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m x n] = a[m x k] . b[k x n]`, all row-major. Overwrites `out`.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    MAC_COUNT.fetch_add((m * k * n) as u64, Ordering::Relaxed);

    let row = |i: usize, orow: &mut [T]| {
        orow.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    };

    if m * k * n < PAR_THRESHOLD {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            row(i, orow);
        });
    }
}

/// Grouped matrix product: `a` is `[batch, groups, k]` (row-major, `batch` may
/// be 1), `b` is `[groups, k, n]`; `out[β, g, :] = a[β, g, :] . b[g]`.
pub fn bmm<T: Scalar>(
    batch: usize,
    groups: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), batch * groups * k);
    debug_assert_eq!(b.len(), groups * k * n);
    debug_assert_eq!(out.len(), batch * groups * n);
    MAC_COUNT.fetch_add((batch * groups * k * n) as u64, Ordering::Relaxed);

    let row = |idx: usize, orow: &mut [T]| {
        let g = idx % groups;
        orow.fill(T::zero());
        let arow = &a[idx * k..(idx + 1) * k];
        let bmat = &b[g * k * n..(g + 1) * k * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &bmat[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    };

    if batch * groups * k * n < PAR_THRESHOLD {
        for (idx, orow) in out.chunks_mut(n).enumerate() {
            row(idx, orow);
        }
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(idx, orow)| {
            row(idx, orow);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_parallel_matches_serial() {
        // Big enough to cross PAR_THRESHOLD; compare against the small path.
        let m = 64;
        let k = 32;
        let n = 48;
        let mut rng = crate::rng::seeded(11);
        let a = crate::rng::uniform_tensor::<f64>(&[m, k], -1.0, 1.0, &mut rng);
        let b = crate::rng::uniform_tensor::<f64>(&[k, n], -1.0, 1.0, &mut rng);
        let mut big = vec![0.0; m * n];
        gemm(m, k, n, a.data(), b.data(), &mut big);
        // Row-by-row serial evaluation with the same accumulation order.
        for i in 0..m {
            let mut row = vec![0.0f64; n];
            for p in 0..k {
                let aip = a.data()[i * k + p];
                for j in 0..n {
                    row[j] += aip * b.data()[p * n + j];
                }
            }
            for j in 0..n {
                assert_eq!(big[i * n + j], row[j], "bit-exact at ({i},{j})");
            }
        }
    }

    #[test]
    fn bmm_per_group_weights() {
        // Two groups with distinct weights; batch of one.
        let a = [1.0, 2.0, /* g1 */ 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0, /* g1: swap */ 0.0, 1.0, 1.0, 0.0];
        let mut out = [0.0; 4];
        bmm(1, 2, 2, 2, &a, &b, &mut out);
        assert_eq!(out, [1.0, 2.0, 4.0, 3.0]);
    }

    #[test]
    fn mac_counter_counts_mkn() {
        reset_mac_count();
        let a = vec![1.0f32; 6];
        let b = vec![1.0f32; 12];
        let mut out = vec![0.0f32; 8];
        gemm(2, 3, 4, &a, &b, &mut out);
        assert_eq!(mac_count(), 24);
    }
}

/// Worker threads available to the parallel kernels.
pub fn threads() -> usize {
    rayon::current_num_threads()
}
