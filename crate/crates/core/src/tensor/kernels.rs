//! Plain loop kernels. Every reduction runs in a fixed order so results are
//! bit-identical across runs.

use crate::real::Real;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bpj) in o_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bpj) in o_row.iter_mut().zip(b_row) {
                *o += api * bpj;
            }
        }
    }
}

pub fn transpose_into<S: Copy>(src: &[S], dst: &mut [S], m: usize, k: usize) {
    for i in 0..m {
        for j in 0..k {
            dst[j * m + i] = src[i * k + j];
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<S: Real>(row: &[S], out: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        total += e;
    }
    let inv = S::one() / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `log(sum(exp(row)))`, stable.
pub fn logsumexp<S: Real>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let total = row.iter().fold(S::zero(), |acc, &x| acc + (x - max).exp());
    max + total.ln()
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn silu<S: Real>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Real>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }

        let mut nn = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut nn, m, k, n);

        let mut bt = vec![0.0; k * n];
        transpose_into(&b, &mut bt, k, n);
        let mut nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut nt, m, k, n);

        let mut at = vec![0.0; m * k];
        transpose_into(&a, &mut at, m, k);
        let mut tn = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut tn, m, k, n);

        for idx in 0..m * n {
            assert!((nn[idx] - naive[idx]).abs() < 1e-12);
            assert!((nt[idx] - naive[idx]).abs() < 1e-12);
            assert!((tn[idx] - naive[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let row = [1.0f64, 2.0, 3.0];
        let shifted = [1001.0f64, 1002.0, 1003.0];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        softmax_row(&row, &mut a);
        softmax_row(&shifted, &mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-15);
        }
    }
}
