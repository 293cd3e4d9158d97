//! Dense kernels with a sequential path and, behind the `parallel` feature, a
//! rayon path.
//!
//! Both paths produce bitwise-identical results: work is split only across
//! independent output rows and each row is reduced in the same fixed order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a matmul stays on the calling thread.
pub const PAR_MATMUL_MIN_WORK: usize = 1 << 16;

/// Maps `f` over `0..n`, preserving order. Runs on the rayon pool when the
/// `parallel` feature is enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

fn matmul_row(a: &[f64], b: &[f64], inner: usize, cols: usize, i: usize, out: &mut [f64]) {
    out.fill(0.0);
    let a_row = &a[i * inner..(i + 1) * inner];
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = &b[k * cols..(k + 1) * cols];
        for (o, &bkj) in out.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// `out = a · b` for row-major `a: rows×inner`, `b: inner×cols`.
pub fn matmul_seq(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if cols == 0 {
        return out;
    }
    for (i, row) in out.chunks_mut(cols).enumerate() {
        matmul_row(a, b, inner, cols, i, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if cols == 0 {
        return out;
    }
    out.par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| matmul_row(a, b, inner, cols, i, row));
    out
}

/// Dispatches to the parallel kernel for large products when available.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if rows * inner * cols >= PAR_MATMUL_MIN_WORK && rows > 1 {
        return matmul_par(a, b, rows, inner, cols);
    }
    matmul_seq(a, b, rows, inner, cols)
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
