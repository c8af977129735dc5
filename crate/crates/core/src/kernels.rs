//! Compute kernels shared by the tape operations.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! a rayon path splits work across independent output elements. Reductions
//! always run in a fixed order inside a single task, so the parallel and
//! sequential paths produce bit-identical results and runs are reproducible
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work threshold (in multiply-adds) below which the sequential path is used
/// even when the `parallel` feature is enabled. Spawn overhead dominates
/// below roughly this size.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 15;

/// Dot product with eight independent accumulator lanes, combined in a fixed
/// order. The lane split keeps the reduction order data-independent while
/// letting the compiler vectorize.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let whole = n - n % LANES;
    let mut acc = [T::zero(); LANES];
    let mut i = 0;
    while i < whole {
        for l in 0..LANES {
            acc[l] += a[i + l] * b[i + l];
        }
        i += LANES;
    }
    let mut tail = T::zero();
    for j in whole..n {
        tail += a[j] * b[j];
    }
    let mut sum = T::zero();
    for l in 0..LANES {
        sum += acc[l];
    }
    sum + tail
}

/// `out += alpha * x`, element-wise.
pub fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += alpha * v;
    }
}

/// Plain left-to-right sum. Used where a spec'd summation order must be the
/// ascending element order (sum pooling, axis reductions).
pub fn sum_seq<T: Scalar>(x: &[T]) -> T {
    let mut s = T::zero();
    for &v in x {
        s += v;
    }
    s
}

// ── Element-wise maps ─────────────────────────────────────────────────────

pub fn map1<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Send + Sync) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if x.len() >= PAR_MIN_WORK {
        return x.par_iter().map(|&v| f(v)).collect();
    }
    x.iter().map(|&v| f(v)).collect()
}

pub fn map2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Send + Sync) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    if a.len() >= PAR_MIN_WORK {
        return a
            .par_iter()
            .zip(b.par_iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
    }
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

// ── Matrix multiply ───────────────────────────────────────────────────────

/// `out[m×n] = a[m×k] · b[k×n]`, row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MIN_WORK {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        matmul_row(a, b, k, n, i, &mut out[i * n..(i + 1) * n]);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_row(a, b, k, n, i, row));
    out
}

#[inline]
fn matmul_row<T: Scalar>(a: &[T], b: &[T], k: usize, n: usize, i: usize, row: &mut [T]) {
    for j in 0..k {
        axpy(row, a[i * k + j], &b[j * n..(j + 1) * n]);
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`. Backward of matmul w.r.t. its left input.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let work = m * k * n;
    #[cfg(feature = "parallel")]
    if m > 1 && work >= PAR_MIN_WORK {
        let mut out = vec![T::zero(); m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, o) in row.iter_mut().enumerate() {
                *o = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
            }
        });
        return out;
    }
    let _ = work;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`. Backward of matmul w.r.t. its right input.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let work = m * k * n;
    #[cfg(feature = "parallel")]
    if k > 1 && work >= PAR_MIN_WORK {
        let mut out = vec![T::zero(); k * n];
        out.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
            for i in 0..m {
                axpy(row, a[i * k + j], &b[i * n..(i + 1) * n]);
            }
        });
        return out;
    }
    let _ = work;
    let mut out = vec![T::zero(); k * n];
    for j in 0..k {
        let row = &mut out[j * n..(j + 1) * n];
        for i in 0..m {
            axpy(row, a[i * k + j], &b[i * n..(i + 1) * n]);
        }
    }
    out
}

// ── 2-D convolution, NHWC layout ──────────────────────────────────────────

/// Geometry of one convolution call: input `[batch, h, w, c_in]`, kernel
/// `[kh, kw, c_in, c_out]`, zero padding split as `(top/left, bottom/right)`
/// with the extra row on the high side.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let cells = g.batch * g.out_h * g.out_w;
    let work = cells * g.kh * g.kw * g.c_in * g.c_out;
    let mut out = vec![T::zero(); cells * g.c_out];
    #[cfg(feature = "parallel")]
    if cells > 1 && work >= PAR_MIN_WORK {
        out.par_chunks_mut(g.c_out)
            .enumerate()
            .for_each(|(cell, acc)| conv_cell_forward(input, kernel, g, cell, acc));
        return out;
    }
    let _ = work;
    for cell in 0..cells {
        let acc = &mut out[cell * g.c_out..(cell + 1) * g.c_out];
        conv_cell_forward(input, kernel, g, cell, acc);
    }
    out
}

#[inline]
fn conv_cell_forward<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeom, cell: usize, acc: &mut [T]) {
    let ox = cell % g.out_w;
    let oy = (cell / g.out_w) % g.out_h;
    let b = cell / (g.out_w * g.out_h);
    for ky in 0..g.kh {
        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
        if iy < 0 || iy >= g.in_h as isize {
            continue;
        }
        for kx in 0..g.kw {
            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
            if ix < 0 || ix >= g.in_w as isize {
                continue;
            }
            let in_base = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.c_in;
            let k_base = ((ky * g.kw + kx) * g.c_in) * g.c_out;
            for ic in 0..g.c_in {
                let v = input[in_base + ic];
                axpy(acc, v, &kernel[k_base + ic * g.c_out..k_base + (ic + 1) * g.c_out]);
            }
        }
    }
}

pub fn conv2d_backward_input<T: Scalar>(upstream: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let cells = g.batch * g.in_h * g.in_w;
    let work = cells * g.kh * g.kw * g.c_in * g.c_out;
    let mut out = vec![T::zero(); cells * g.c_in];
    #[cfg(feature = "parallel")]
    if cells > 1 && work >= PAR_MIN_WORK {
        out.par_chunks_mut(g.c_in)
            .enumerate()
            .for_each(|(cell, acc)| conv_cell_backward_input(upstream, kernel, g, cell, acc));
        return out;
    }
    let _ = work;
    for cell in 0..cells {
        let acc = &mut out[cell * g.c_in..(cell + 1) * g.c_in];
        conv_cell_backward_input(upstream, kernel, g, cell, acc);
    }
    out
}

#[inline]
fn conv_cell_backward_input<T: Scalar>(
    upstream: &[T],
    kernel: &[T],
    g: &ConvGeom,
    cell: usize,
    acc: &mut [T],
) {
    let ix = cell % g.in_w;
    let iy = (cell / g.in_w) % g.in_h;
    let b = cell / (g.in_w * g.in_h);
    for ky in 0..g.kh {
        let oy_num = iy as isize + g.pad_top as isize - ky as isize;
        if oy_num < 0 || oy_num % g.stride as isize != 0 {
            continue;
        }
        let oy = (oy_num / g.stride as isize) as usize;
        if oy >= g.out_h {
            continue;
        }
        for kx in 0..g.kw {
            let ox_num = ix as isize + g.pad_left as isize - kx as isize;
            if ox_num < 0 || ox_num % g.stride as isize != 0 {
                continue;
            }
            let ox = (ox_num / g.stride as isize) as usize;
            if ox >= g.out_w {
                continue;
            }
            let up_base = ((b * g.out_h + oy) * g.out_w + ox) * g.c_out;
            let up_row = &upstream[up_base..up_base + g.c_out];
            let k_base = ((ky * g.kw + kx) * g.c_in) * g.c_out;
            for (ic, a) in acc.iter_mut().enumerate() {
                *a += dot(up_row, &kernel[k_base + ic * g.c_out..k_base + (ic + 1) * g.c_out]);
            }
        }
    }
}

pub fn conv2d_backward_kernel<T: Scalar>(input: &[T], upstream: &[T], g: &ConvGeom) -> Vec<T> {
    let rows = g.kh * g.kw * g.c_in;
    let work = rows * g.batch * g.out_h * g.out_w * g.c_out;
    let mut out = vec![T::zero(); rows * g.c_out];
    #[cfg(feature = "parallel")]
    if rows > 1 && work >= PAR_MIN_WORK {
        out.par_chunks_mut(g.c_out)
            .enumerate()
            .for_each(|(row, acc)| conv_row_backward_kernel(input, upstream, g, row, acc));
        return out;
    }
    let _ = work;
    for row in 0..rows {
        let acc = &mut out[row * g.c_out..(row + 1) * g.c_out];
        conv_row_backward_kernel(input, upstream, g, row, acc);
    }
    out
}

#[inline]
fn conv_row_backward_kernel<T: Scalar>(
    input: &[T],
    upstream: &[T],
    g: &ConvGeom,
    row: usize,
    acc: &mut [T],
) {
    let ic = row % g.c_in;
    let kx = (row / g.c_in) % g.kw;
    let ky = row / (g.c_in * g.kw);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
            if iy < 0 || iy >= g.in_h as isize {
                continue;
            }
            for ox in 0..g.out_w {
                let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                if ix < 0 || ix >= g.in_w as isize {
                    continue;
                }
                let v = input[((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.c_in + ic];
                let up_base = ((b * g.out_h + oy) * g.out_w + ox) * g.c_out;
                axpy(acc, v, &upstream[up_base..up_base + g.c_out]);
            }
        }
    }
}
