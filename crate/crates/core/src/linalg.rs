//! Small dense kernels with a fixed floating-point summation order.
//!
//! Every routine here accumulates in a deterministic order that does not
//! depend on batch sizes, thread counts or call context, so repeated runs
//! (and runs with different parallelism) produce bitwise-identical results.

use ndarray::{Array2, ArrayView2};

/// Dot product with eight independent accumulator chains combined in a fixed
/// tree order. The unrolling breaks the add latency chain and lets LLVM
/// vectorize each lane without reassociating the sum.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let i = c * 8;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        acc[4] += a[i + 4] * b[i + 4];
        acc[5] += a[i + 5] * b[i + 5];
        acc[6] += a[i + 6] * b[i + 6];
        acc[7] += a[i + 7] * b[i + 7];
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out[j] = dot(w.row(j), x)` for a row-major matrix `w`.
#[inline]
pub fn matvec(w: ArrayView2<'_, f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = w.dim();
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    let ws = w.as_slice().expect("matrix must be contiguous row-major");
    for j in 0..rows {
        out[j] = dot(&ws[j * cols..(j + 1) * cols], x);
    }
}

/// `out[j] = sum_k w[k][j] * x[k]` (transpose matvec), computed as an
/// ascending sweep of axpy updates over the rows of `w` so that memory access
/// stays contiguous and the per-element summation order stays fixed.
#[inline]
pub fn matvec_transpose(w: ArrayView2<'_, f64>, x: &[f64], out: &mut [f64]) {
    let (rows, cols) = w.dim();
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(out.len(), cols);
    let ws = w.as_slice().expect("matrix must be contiguous row-major");
    out.fill(0.0);
    for k in 0..rows {
        axpy(x[k], &ws[k * cols..(k + 1) * cols], out);
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Squared Euclidean norm with the same fixed-order accumulation as [`dot`].
#[inline]
pub fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

const SAMPLE_CHUNK: usize = 32;
const ROW_BLOCK: usize = 16;

/// Work size below which the batched kernels skip the thread pool.
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// `out[i] = w * xs[i]` for every sample row of `xs`.
///
/// Samples are processed in fixed chunks with the rows of `w` blocked so a
/// block stays cache-resident across the chunk. Each output element is one
/// [`dot`] call, so results do not depend on chunking or thread count.
pub fn batch_matvec(w: ArrayView2<'_, f64>, xs: ArrayView2<'_, f64>) -> Array2<f64> {
    let (p, n) = w.dim();
    let (d, xn) = xs.dim();
    debug_assert_eq!(n, xn);
    let ws = w.as_slice().expect("matrix must be contiguous row-major");
    let xss = xs.as_slice().expect("matrix must be contiguous row-major");
    let mut out = Array2::zeros((d, p));
    let run_chunk = |chunk_index: usize, out_chunk: &mut [f64]| {
        let i0 = chunk_index * SAMPLE_CHUNK;
        let rows = (out_chunk.len()) / p;
        for jb in (0..p).step_by(ROW_BLOCK) {
            let jend = (jb + ROW_BLOCK).min(p);
            for r in 0..rows {
                let x = &xss[(i0 + r) * n..(i0 + r + 1) * n];
                for j in jb..jend {
                    out_chunk[r * p + j] = dot(&ws[j * n..(j + 1) * n], x);
                }
            }
        }
    };
    let out_slice = out.as_slice_mut().unwrap();
    if d * p * n < PARALLEL_THRESHOLD {
        for (ci, chunk) in out_slice.chunks_mut(SAMPLE_CHUNK * p).enumerate() {
            run_chunk(ci, chunk);
        }
    } else {
        use rayon::prelude::*;
        out_slice
            .par_chunks_mut(SAMPLE_CHUNK * p)
            .enumerate()
            .for_each(|(ci, chunk)| run_chunk(ci, chunk));
    }
    out
}

/// `out[i] = w^T * vs[i]` for every sample row of `vs`.
///
/// Accumulates over the rows of `w` in ascending blocks, so every output
/// element has a fixed summation order independent of batching.
pub fn batch_matvec_transpose(w: ArrayView2<'_, f64>, vs: ArrayView2<'_, f64>) -> Array2<f64> {
    let (r, c) = w.dim();
    let (d, vr) = vs.dim();
    debug_assert_eq!(r, vr);
    let ws = w.as_slice().expect("matrix must be contiguous row-major");
    let vss = vs.as_slice().expect("matrix must be contiguous row-major");
    let mut out = Array2::zeros((d, c));
    let run_chunk = |chunk_index: usize, out_chunk: &mut [f64]| {
        let i0 = chunk_index * SAMPLE_CHUNK;
        let rows = out_chunk.len() / c;
        for kb in (0..r).step_by(ROW_BLOCK) {
            let kend = (kb + ROW_BLOCK).min(r);
            for i in 0..rows {
                let v = &vss[(i0 + i) * r..(i0 + i + 1) * r];
                let orow = &mut out_chunk[i * c..(i + 1) * c];
                for k in kb..kend {
                    axpy(v[k], &ws[k * c..(k + 1) * c], orow);
                }
            }
        }
    };
    let out_slice = out.as_slice_mut().unwrap();
    if d * r * c < PARALLEL_THRESHOLD {
        for (ci, chunk) in out_slice.chunks_mut(SAMPLE_CHUNK * c).enumerate() {
            run_chunk(ci, chunk);
        }
    } else {
        use rayon::prelude::*;
        out_slice
            .par_chunks_mut(SAMPLE_CHUNK * c)
            .enumerate()
            .for_each(|(ci, chunk)| run_chunk(ci, chunk));
    }
    out
}

/// `g[j] += sum_i deltas[i][j] * xs[i]`, samples accumulated in ascending
/// order per row of `g`. Rows of `g` are partitioned across threads; a row's
/// value never depends on the partition.
pub fn accumulate_outer(
    g: &mut Array2<f64>,
    deltas: ArrayView2<'_, f64>,
    xs: ArrayView2<'_, f64>,
) {
    let (p, q) = g.dim();
    let (d, dp) = deltas.dim();
    let (dx, xq) = xs.dim();
    debug_assert_eq!(p, dp);
    debug_assert_eq!(q, xq);
    debug_assert_eq!(d, dx);
    let ds = deltas.as_slice().expect("matrix must be contiguous row-major");
    let xss = xs.as_slice().expect("matrix must be contiguous row-major");
    let run_block = |jb: usize, block: &mut [f64]| {
        let rows = block.len() / q;
        for i in 0..d {
            let x = &xss[i * q..(i + 1) * q];
            for r in 0..rows {
                let coef = ds[i * p + jb + r];
                if coef != 0.0 {
                    axpy(coef, x, &mut block[r * q..(r + 1) * q]);
                }
            }
        }
    };
    let gs = g.as_slice_mut().unwrap();
    if d * p * q < PARALLEL_THRESHOLD {
        for (bi, block) in gs.chunks_mut(ROW_BLOCK * q).enumerate() {
            run_block(bi * ROW_BLOCK, block);
        }
    } else {
        use rayon::prelude::*;
        gs.par_chunks_mut(ROW_BLOCK * q)
            .enumerate()
            .for_each(|(bi, block)| run_block(bi * ROW_BLOCK, block));
    }
}

/// Column sums of `m`, rows accumulated in ascending order.
pub fn column_sums(m: ArrayView2<'_, f64>) -> Vec<f64> {
    let (rows, cols) = m.dim();
    let ms = m.as_slice().expect("matrix must be contiguous row-major");
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        axpy(1.0, &ms[i * cols..(i + 1) * cols], &mut out);
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
///
/// Intended for the small class-count matrices that show up in the loss
/// geometry (C x C with C <= a few dozen); the sweep order is fixed so the
/// result is deterministic.
pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let mut a = m.clone();
    // Symmetrize defensively; callers pass analytically symmetric matrices.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = s;
            a[[j, i]] = s;
        }
    }
    let off = |a: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[[i, j]] * a[[i, j]];
                }
            }
        }
        s
    };
    for _sweep in 0..100 {
        if off(&a) < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}
