//! Dense matmul kernels.
//!
//! Three layouts are needed throughout the crate: `A*B`, `A*B^T` and `A^T*B`.
//! Each comes in a sequential and (behind the `parallel` feature) a
//! rayon-chunked variant that splits the output into disjoint row blocks, so
//! results are bit-identical across backends and thread counts. An adaptive
//! skip-zero path handles the heavily masked matrices produced by epsilon
//! sparsification, where most of a row is exactly zero.

use crate::error::{IdglError, Result};
use crate::linalg::dense::Dense;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many flops a parallel split is not worth the fork overhead.
const PAR_MIN_FLOPS: usize = 1 << 17;
/// Zero fraction above which the skip-zero row kernel beats packed gemm.
const SKIPZERO_MIN_ZERO_FRAC: f64 = 0.75;

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_nn(a: &Dense, b: &Dense) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(IdglError::dims("matmul", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_nt(a: &Dense, b: &Dense) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(IdglError::dims("matmul_nt", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_tn(a: &Dense, b: &Dense) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(IdglError::dims("matmul_tn", a.shape(), b.shape()));
    }
    Ok(())
}

/// dgemm on a row block of the output. `a_ptr` must already point at the
/// operand entry corresponding to output row `0` of the block.
#[allow(clippy::too_many_arguments)]
fn dgemm_block(
    m: usize,
    k: usize,
    n: usize,
    a_ptr: *const f64,
    rsa: isize,
    csa: isize,
    b_ptr: *const f64,
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    // Safety: strides describe valid in-bounds layouts for the borrowed
    // slices, and the output block is exclusively owned by this call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a_ptr,
            rsa,
            csa,
            b_ptr,
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul_seq(a: &Dense, b: &Dense) -> Result<Dense> {
    check_nn(a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    dgemm_block(
        m,
        k,
        n,
        a.as_slice().as_ptr(),
        k as isize,
        1,
        b.as_slice().as_ptr(),
        n as isize,
        1,
        c.as_mut_slice(),
    );
    Ok(c)
}

pub fn matmul_nt_seq(a: &Dense, b: &Dense) -> Result<Dense> {
    check_nt(a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    dgemm_block(
        m,
        k,
        n,
        a.as_slice().as_ptr(),
        k as isize,
        1,
        b.as_slice().as_ptr(),
        1,
        k as isize,
        c.as_mut_slice(),
    );
    Ok(c)
}

pub fn matmul_tn_seq(a: &Dense, b: &Dense) -> Result<Dense> {
    check_tn(a, b)?;
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    dgemm_block(
        m,
        k,
        n,
        a.as_slice().as_ptr(),
        1,
        a.cols() as isize,
        b.as_slice().as_ptr(),
        n as isize,
        1,
        c.as_mut_slice(),
    );
    Ok(c)
}

#[cfg(feature = "parallel")]
fn row_block_len(m: usize, k: usize, n: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    let per_thread = m.div_ceil(threads);
    // Keep blocks large enough that packing overhead stays amortized.
    let min_rows = (PAR_MIN_FLOPS / (2 * k * n + 1)).clamp(1, m.max(1));
    per_thread.max(min_rows)
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &Dense, b: &Dense) -> Result<Dense> {
    check_nn(a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    let block = row_block_len(m, k, n);
    let a_slice = a.as_slice();
    let b_ptr = SendPtr(b.as_slice().as_ptr());
    c.as_mut_slice()
        .par_chunks_mut(block * n)
        .enumerate()
        .for_each(|(bi, chunk)| {
            let r0 = bi * block;
            let rows = chunk.len() / n;
            dgemm_block(
                rows,
                k,
                n,
                a_slice[r0 * k..].as_ptr(),
                k as isize,
                1,
                b_ptr.get(),
                n as isize,
                1,
                chunk,
            );
        });
    Ok(c)
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &Dense, b: &Dense) -> Result<Dense> {
    check_nt(a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    let block = row_block_len(m, k, n);
    let a_slice = a.as_slice();
    let b_ptr = SendPtr(b.as_slice().as_ptr());
    c.as_mut_slice()
        .par_chunks_mut(block * n)
        .enumerate()
        .for_each(|(bi, chunk)| {
            let r0 = bi * block;
            let rows = chunk.len() / n;
            dgemm_block(
                rows,
                k,
                n,
                a_slice[r0 * k..].as_ptr(),
                k as isize,
                1,
                b_ptr.get(),
                1,
                k as isize,
                chunk,
            );
        });
    Ok(c)
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &Dense, b: &Dense) -> Result<Dense> {
    check_tn(a, b)?;
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    let block = row_block_len(m, k, n);
    let a_cols = a.cols();
    let a_slice = a.as_slice();
    let b_ptr = SendPtr(b.as_slice().as_ptr());
    c.as_mut_slice()
        .par_chunks_mut(block * n)
        .enumerate()
        .for_each(|(bi, chunk)| {
            let r0 = bi * block;
            let rows = chunk.len() / n;
            dgemm_block(
                rows,
                k,
                n,
                a_slice[r0..].as_ptr(),
                1,
                a_cols as isize,
                b_ptr.get(),
                n as isize,
                1,
                chunk,
            );
        });
    Ok(c)
}

#[cfg(feature = "parallel")]
#[derive(Clone, Copy)]
struct SendPtr(*const f64);

#[cfg(feature = "parallel")]
// Safety: the pointer refers to an immutable slice that outlives the scope
// of the parallel loop; workers only read through it.
unsafe impl Send for SendPtr {}
#[cfg(feature = "parallel")]
unsafe impl Sync for SendPtr {}

#[cfg(feature = "parallel")]
impl SendPtr {
    #[inline]
    fn get(self) -> *const f64 {
        self.0
    }
}

/// `C = A * B` skipping exact zeros of `A` row by row. Worthwhile once most
/// of `A` is zero, which is the normal state of sparsified adjacencies and
/// of gradients flowing back through them.
pub fn matmul_skipzero(a: &Dense, b: &Dense) -> Result<Dense> {
    check_nn(a, b)?;
    let (m, n) = (a.rows(), b.cols());
    let mut c = Dense::zeros(m, n);
    if m == 0 || n == 0 || a.cols() == 0 {
        return Ok(c);
    }
    let do_row = |i: usize, out: &mut [f64]| {
        for (kk, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(kk), out);
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        c.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out)| do_row(i, out));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for i in 0..m {
            do_row(i, c.row_mut(i));
        }
    }
    Ok(c)
}

fn pick_parallel(m: usize, k: usize, n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        2 * m * k * n >= PAR_MIN_FLOPS && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = (m, k, n);
        false
    }
}

/// `C = A * B`, dispatching between packed gemm, the parallel split and the
/// skip-zero kernel based on shape and the measured zero fraction of `A`.
pub fn matmul(a: &Dense, b: &Dense) -> Result<Dense> {
    check_nn(a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if n >= 8 && m * k >= 4096 && a.zero_fraction() >= SKIPZERO_MIN_ZERO_FRAC {
        return matmul_skipzero(a, b);
    }
    if pick_parallel(m, k, n) {
        #[cfg(feature = "parallel")]
        return matmul_par(a, b);
    }
    matmul_seq(a, b)
}

/// `C = A * B^T`.
pub fn matmul_nt(a: &Dense, b: &Dense) -> Result<Dense> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if pick_parallel(m, k, n) {
        #[cfg(feature = "parallel")]
        return matmul_nt_par(a, b);
    }
    matmul_nt_seq(a, b)
}

/// `C = A^T * B`.
pub fn matmul_tn(a: &Dense, b: &Dense) -> Result<Dense> {
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    if pick_parallel(m, k, n) {
        #[cfg(feature = "parallel")]
        return matmul_tn_par(a, b);
    }
    matmul_tn_seq(a, b)
}
