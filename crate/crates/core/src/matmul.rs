//! Row-major f32 matrix kernels backing conv2d and linear layers.
//!
//! Each output element is produced by exactly one task, so results are
//! deterministic regardless of thread count.

use rayon::prelude::*;

const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// C[m,n] = A[m,k] * B[k,n].
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    let row = |ci: &mut [f32], i: usize| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cij, bpj) in ci.iter_mut().zip(brow) {
                *cij += aip * bpj;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[m,n] = A^T * B where A is [k,m] and B is [k,n].
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    let row = |ci: &mut [f32], i: usize| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cij, bpj) in ci.iter_mut().zip(brow) {
                *cij += api * bpj;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// Dot product with eight independent accumulator lanes so the loop
/// vectorizes despite float non-associativity.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let chunks = a.len() / LANES;
    let mut acc = [0.0f32; LANES];
    for t in 0..chunks {
        let abase = &a[t * LANES..(t + 1) * LANES];
        let bbase = &b[t * LANES..(t + 1) * LANES];
        for l in 0..LANES {
            acc[l] += abase[l] * bbase[l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// C[m,n] = A * B^T where A is [m,k] and B is [n,k].
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    let row = |ci: &mut [f32], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cij) in ci.iter_mut().enumerate() {
            *cij = dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}
