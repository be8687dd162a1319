//! Shared numeric kernels.
//!
//! Both the autodiff graph and the cached inference paths call these, so a
//! position computed incrementally is bit-identical to the same position
//! computed in a batched forward. `matmul` accumulates along `k` in a fixed
//! order for every output row, independent of the number of rows in the
//! batch — that property is what makes the prefix tests exact.

use super::Real;

/// C[m,n] = A[m,k] @ B[k,n]. Row-stable accumulation (k ascending).
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

pub fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[k,n] with A implicitly transposed: A is stored [k,m].
/// Used by matmul backward (dB = Aᵀ·dC).
pub fn matmul_tn_acc<T: Real>(a_t: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a_t.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a_t[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a_row[i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_pi * b_v;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[k,n] with B implicitly transposed: B is stored [n,k].
/// Used by matmul backward (dA = dC·Bᵀ).
pub fn matmul_nt_acc<T: Real>(a: &[T], b_t: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b_t.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b_t[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulator lanes (fixed summation
/// order: lanes 0..8 then the tail), so it vectorizes while staying
/// deterministic for any given length.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let chunks = a.len() / LANES;
    let mut acc = [T::zero(); LANES];
    for c in 0..chunks {
        let base = c * LANES;
        for (l, slot) in acc.iter_mut().enumerate() {
            *slot += a[base + l] * b[base + l];
        }
    }
    let mut s = T::zero();
    for slot in acc {
        s += slot;
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn add_row_inplace<T: Real>(x: &mut [T], bias: &[T]) {
    debug_assert_eq!(x.len() % bias.len(), 0);
    for chunk in x.chunks_mut(bias.len()) {
        for (v, &b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Numerically stable softmax: subtracts the row max before exponentiating.
pub fn softmax_row_inplace<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable log-softmax: `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax_row_inplace<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Layer normalization over one row with learned scale and shift.
pub fn layernorm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) {
    let n = T::from_f64(x.len() as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
    }
}

/// Index of the largest entry; ties break to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn all_finite<T: Real>(data: &[T]) -> bool {
    data.iter().all(|v| v.is_finite())
}
