//! Compute kernels on raw slices.
//!
//! Every kernel has a fixed per-element accumulation order, and parallel
//! variants only split work across disjoint output regions, so results are
//! bit-identical run to run regardless of thread count.

use rayon::prelude::*;

use super::tensor::{c, Scalar};

/// Below this many multiply-adds a serial loop beats the rayon dispatch cost.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        out_row.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (l, &al) in arow.iter().enumerate() {
            if al == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o = *o + al * bv;
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// c[m,n] = a[m,k] * b[n,k]^T  (b given row-major as [n,k])
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// c[m,n] = a[k,m]^T * b[k,n]  (a given row-major as [k,m])
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        out_row.fill(T::zero());
        for l in 0..k {
            let al = a[l * m + i];
            if al == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o = *o + al * bv;
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// Rowwise softmax over the last axis, in place. Max-subtracted for stability.
/// Logits at or below `-1e8` relative to the row max underflow to exactly 0.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation; smooth everywhere, which the gradient checks rely on.
    let c0: T = c(0.797_884_560_802_865_4);
    let c1: T = c(0.044_715);
    let u = c0 * (x + c1 * x * x * x);
    let half: T = c(0.5);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c0: T = c(0.797_884_560_802_865_4);
    let c1: T = c(0.044_715);
    let three: T = c(3.0);
    let half: T = c(0.5);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}

/// im2col for 1D convolution: x[B,C,L] -> cols[B*Lout, C*K].
pub fn im2col_1d<T: Scalar>(
    x: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); batch * lout * ch * kernel];
    let ck = ch * kernel;
    cols.par_chunks_mut(lout * ck)
        .enumerate()
        .for_each(|(b, dst)| {
            let xb = &x[b * ch * len..(b + 1) * ch * len];
            for o in 0..lout {
                let row = &mut dst[o * ck..(o + 1) * ck];
                for ci in 0..ch {
                    for kk in 0..kernel {
                        let pos = (o * stride + kk) as isize - pad as isize;
                        row[ci * kernel + kk] = if pos >= 0 && (pos as usize) < len {
                            xb[ci * len + pos as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        });
    cols
}

/// Scatter-add of column gradients back to the 1D input layout.
pub fn col2im_1d<T: Scalar>(
    dcols: &[T],
    _batch: usize,
    ch: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    dx: &mut [T],
) {
    let ck = ch * kernel;
    dx.par_chunks_mut(ch * len).enumerate().for_each(|(b, db)| {
        let src = &dcols[b * lout * ck..(b + 1) * lout * ck];
        for o in 0..lout {
            let row = &src[o * ck..(o + 1) * ck];
            for ci in 0..ch {
                for kk in 0..kernel {
                    let pos = (o * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        let idx = ci * len + pos as usize;
                        db[idx] = db[idx] + row[ci * kernel + kk];
                    }
                }
            }
        }
    });
}

/// im2col for 2D convolution: x[B,C,H,W] -> cols[B*Hout*Wout, C*K*K].
#[allow(clippy::too_many_arguments)]
pub fn im2col_2d<T: Scalar>(
    x: &[T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<T> {
    let ckk = ch * kernel * kernel;
    let mut cols = vec![T::zero(); batch * hout * wout * ckk];
    cols.par_chunks_mut(hout * wout * ckk)
        .enumerate()
        .for_each(|(b, dst)| {
            let xb = &x[b * ch * h * w..(b + 1) * ch * h * w];
            for oy in 0..hout {
                for ox in 0..wout {
                    let row = &mut dst[(oy * wout + ox) * ckk..(oy * wout + ox + 1) * ckk];
                    for ci in 0..ch {
                        for ky in 0..kernel {
                            let py = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kernel {
                                let px = (ox * stride + kx) as isize - pad as isize;
                                let v = if py >= 0
                                    && (py as usize) < h
                                    && px >= 0
                                    && (px as usize) < w
                                {
                                    xb[ci * h * w + py as usize * w + px as usize]
                                } else {
                                    T::zero()
                                };
                                row[ci * kernel * kernel + ky * kernel + kx] = v;
                            }
                        }
                    }
                }
            }
        });
    cols
}

#[allow(clippy::too_many_arguments)]
pub fn col2im_2d<T: Scalar>(
    dcols: &[T],
    _batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    dx: &mut [T],
) {
    let ckk = ch * kernel * kernel;
    dx.par_chunks_mut(ch * h * w).enumerate().for_each(|(b, db)| {
        let src = &dcols[b * hout * wout * ckk..(b + 1) * hout * wout * ckk];
        for oy in 0..hout {
            for ox in 0..wout {
                let row = &src[(oy * wout + ox) * ckk..(oy * wout + ox + 1) * ckk];
                for ci in 0..ch {
                    for ky in 0..kernel {
                        let py = (oy * stride + ky) as isize - pad as isize;
                        if py < 0 || (py as usize) >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let px = (ox * stride + kx) as isize - pad as isize;
                            if px < 0 || (px as usize) >= w {
                                continue;
                            }
                            let idx = ci * h * w + py as usize * w + px as usize;
                            db[idx] = db[idx] + row[ci * kernel * kernel + ky * kernel + kx];
                        }
                    }
                }
            }
        }
    });
}
