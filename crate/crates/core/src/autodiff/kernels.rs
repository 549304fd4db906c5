//! Plain loops behind the graph operations.
//!
//! Every output row of a matrix product is accumulated in the same order
//! regardless of how many other rows exist, which keeps results bit-stable
//! under padding and batch composition.

use super::SeqLayout;
use crate::scalar::Scalar;

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · b[k×n]ᵀ`, giving `m×k`.
pub(crate) fn matmul_a_bt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]`, giving `k×n`.
pub(crate) fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Returns the attention output and the probabilities, laid out as
/// `[sentence][head][query][key]` with `max_len` slots per key axis.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    layout: &SeqLayout,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let t = layout.max_len;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); layout.sentences * heads * t * t];
    let mut scores = vec![T::zero(); t];
    for (s, &len) in layout.lengths.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..t {
                let qi = &q[(s * t + i) * d + c0..(s * t + i) * d + c0 + dh];
                for (j, sc) in scores[..len].iter_mut().enumerate() {
                    let kj = &k[(s * t + j) * d + c0..(s * t + j) * d + c0 + dh];
                    *sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut scores[..len]);
                let p0 = ((s * heads + h) * t + i) * t;
                probs[p0..p0 + len].copy_from_slice(&scores[..len]);
                let orow = &mut out[(s * t + i) * d + c0..(s * t + i) * d + c0 + dh];
                for (j, &p) in scores[..len].iter().enumerate() {
                    let vj = &v[(s * t + j) * d + c0..(s * t + j) * d + c0 + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    layout: &SeqLayout,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let t = layout.max_len;
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); t];
    for (s, &len) in layout.lengths.iter().enumerate() {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..t {
                let qrow = (s * t + i) * d + c0;
                let gi = &g[qrow..qrow + dh];
                let p0 = ((s * heads + h) * t + i) * t;
                let p = &probs[p0..p0 + len];
                for j in 0..len {
                    let vrow = (s * t + j) * d + c0;
                    dp[j] = gi
                        .iter()
                        .zip(&v[vrow..vrow + dh])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for c in 0..dh {
                        dv[vrow + c] += p[j] * gi[c];
                    }
                }
                let dot: T = p.iter().zip(&dp[..len]).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (s * t + j) * d + c0;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
