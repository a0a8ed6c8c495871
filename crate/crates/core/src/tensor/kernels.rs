//! Raw row-major kernels shared by the graph ops.

use crate::exec::Exec;
use crate::tensor::Scalar;

/// Products with fewer multiply-adds than this stay on the calling thread.
pub const PARALLEL_THRESHOLD: usize = 1 << 15;

/// `[m×k] · [k×n]`, picking parallel row dispatch for large products.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let exec = if m * k * n >= PARALLEL_THRESHOLD {
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    matmul_with(exec, a, b, m, k, n)
}

pub fn matmul_with<T: Scalar>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    exec.for_each_row(&mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `aᵀ · b` for `a: [m×k]`, `b: [m×n]` → `[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul(&transpose(a, m, k), b, k, m, n)
}

/// `a · bᵀ` for `a: [m×n]`, `b: [k×n]` → `[m×k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    matmul(a, &transpose(b, k, n), m, n, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (m, k, n) = (37, 29, 41);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 % 11) as f32 - 5.0) * 0.2).collect();
        let s = matmul_with(Exec::Sequential, &a, &b, m, k, n);
        let p = matmul_with(Exec::Parallel, &a, &b, m, k, n);
        assert_eq!(s, p);
    }

    #[test]
    fn transposed_products() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul_tn(&a, &b, 2, 2, 2), vec![26.0, 30.0, 38.0, 44.0]);
        assert_eq!(matmul_nt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
    }
}
