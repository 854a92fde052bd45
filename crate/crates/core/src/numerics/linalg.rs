use super::{Matrix, Real, Tensor3};
use crate::error::{Error, Result};

/// `a[m x k] * b[k x n]`, accumulated in `f64`.
pub(crate) fn gemm_nn<A: Real, B: Real>(a: &[A], b: &[B], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += av * bv.to_f64();
            }
        }
    }
    out
}

/// `a^T * b` where `a` is stored `[k x m]` and `b` is `[k x n]`.
pub(crate) fn gemm_tn<A: Real, B: Real>(a: &[A], b: &[B], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f64; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let acc = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += av * bv.to_f64();
            }
        }
    }
    out
}

/// `a * b^T` where `a` is `[m x k]` and `b` is stored `[n x k]`.
pub(crate) fn gemm_nt<A: Real, B: Real>(a: &[A], b: &[B], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row
                .iter()
                .zip(b_row)
                .map(|(&x, &y)| x.to_f64() * y.to_f64())
                .sum();
        }
    }
    out
}

/// Matrix product with `f64` accumulation.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let out = gemm_nn(a.as_slice(), b.as_slice(), a.rows(), a.cols(), b.cols());
    Ok(Matrix::from_f64_vec(a.rows(), b.cols(), out))
}

/// Inclusive prefix sum along the sequence axis.
pub fn cumsum_seq<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let [batch, len, dim] = x.shape();
    let src = x.as_slice();
    let mut out = Vec::with_capacity(src.len());
    let mut running = vec![0.0f64; dim];
    for b in 0..batch {
        running.iter_mut().for_each(|r| *r = 0.0);
        for l in 0..len {
            let row = &src[(b * len + l) * dim..(b * len + l + 1) * dim];
            for (r, v) in running.iter_mut().zip(row) {
                *r += v.to_f64();
            }
            out.extend(running.iter().map(|&r| T::from_f64(r)));
        }
    }
    Tensor3::from_raw(batch, len, dim, out)
}
