//! Convolution kernels: forward, input-gradient and weight-gradient.
//!
//! All three are lowered to im2col/col2im plus a dgemm call so they run
//! at matrix-multiply speed. They form a closed family under
//! differentiation: the gradient of each member is expressed through the
//! other two, which is what makes second-order backprop through the
//! critic possible.

use matrixmultiply::dgemm;
use rayon::prelude::*;

/// floor((size + 2 pad - k) / stride) + 1
pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Scatter x[n] into cols[(oh*ow), (i*k*k)], zero-filling out-of-range taps.
fn im2col(
    x: &[f64],
    i_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let l = i_ch * k * k;
    cols.fill(0.0);
    for out_r in 0..oh {
        for out_c in 0..ow {
            let m = out_r * ow + out_c;
            let row = &mut cols[m * l..(m + 1) * l];
            for ic in 0..i_ch {
                for kr in 0..k {
                    let in_r = (out_r * stride + kr) as isize - pad as isize;
                    if in_r < 0 || in_r as usize >= h {
                        continue;
                    }
                    for kc in 0..k {
                        let in_c = (out_c * stride + kc) as isize - pad as isize;
                        if in_c < 0 || in_c as usize >= w {
                            continue;
                        }
                        row[(ic * k + kr) * k + kc] =
                            x[(ic * h + in_r as usize) * w + in_c as usize];
                    }
                }
            }
        }
    }
}

/// Accumulate cols[(i*k*k), (oh*ow)] back into dx[n] (transpose of im2col).
fn col2im_add(
    cols: &[f64],
    i_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let m_total = oh * ow;
    for ic in 0..i_ch {
        for kr in 0..k {
            for kc in 0..k {
                let lrow = &cols[((ic * k + kr) * k + kc) * m_total..][..m_total];
                for out_r in 0..oh {
                    let in_r = (out_r * stride + kr) as isize - pad as isize;
                    if in_r < 0 || in_r as usize >= h {
                        continue;
                    }
                    for out_c in 0..ow {
                        let in_c = (out_c * stride + kc) as isize - pad as isize;
                        if in_c < 0 || in_c as usize >= w {
                            continue;
                        }
                        dx[(ic * h + in_r as usize) * w + in_c as usize] +=
                            lrow[out_r * ow + out_c];
                    }
                }
            }
        }
    }
}

/// out[n,o,oh,ow] = sum_{i,kh,kw} x[n,i,oh*s+kh-p,ow*s+kw-p] * w[o,i,kh,kw]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    n: usize,
    i_ch: usize,
    h: usize,
    wd: usize,
    o_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let l = i_ch * k * k;
    let m = oh * ow;
    let mut out = vec![0.0; n * o_ch * m];
    out.par_chunks_mut(o_ch * m)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let mut cols = vec![0.0; m * l];
            im2col(
                &x[ni * i_ch * h * wd..][..i_ch * h * wd],
                i_ch,
                h,
                wd,
                k,
                stride,
                pad,
                oh,
                ow,
                &mut cols,
            );
            // out_n (O x M) = w (O x L) * cols^T (L x M)
            unsafe {
                dgemm(
                    o_ch,
                    l,
                    m,
                    1.0,
                    w.as_ptr(),
                    l as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    l as isize,
                    0.0,
                    out_n.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
        });
    out
}

/// dx[n,i,h,w] = sum over taps of g[n,o,oh,ow] * w[o,i,kh,kw] (transposed conv).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_input_grad(
    g: &[f64],
    w: &[f64],
    n: usize,
    i_ch: usize,
    h: usize,
    wd: usize,
    o_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let l = i_ch * k * k;
    let m = oh * ow;
    let mut dx = vec![0.0; n * i_ch * h * wd];
    dx.par_chunks_mut(i_ch * h * wd)
        .enumerate()
        .for_each(|(ni, dx_n)| {
            let g_n = &g[ni * o_ch * m..][..o_ch * m];
            let mut cols = vec![0.0; l * m];
            // cols (L x M) = w^T (L x O) * g_n (O x M)
            unsafe {
                dgemm(
                    l,
                    o_ch,
                    m,
                    1.0,
                    w.as_ptr(),
                    1,
                    l as isize,
                    g_n.as_ptr(),
                    m as isize,
                    1,
                    0.0,
                    cols.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
            col2im_add(&cols, i_ch, h, wd, k, stride, pad, oh, ow, dx_n);
        });
    dx
}

/// dw[o,i,kh,kw] = sum_{n,oh,ow} x[n,i,oh*s+kh-p,ow*s+kw-p] * g[n,o,oh,ow]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_weight_grad(
    x: &[f64],
    g: &[f64],
    n: usize,
    i_ch: usize,
    h: usize,
    wd: usize,
    o_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let l = i_ch * k * k;
    let m = oh * ow;
    // Per-example partials summed in index order keeps the reduction
    // deterministic regardless of thread scheduling.
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut cols = vec![0.0; m * l];
            im2col(
                &x[ni * i_ch * h * wd..][..i_ch * h * wd],
                i_ch,
                h,
                wd,
                k,
                stride,
                pad,
                oh,
                ow,
                &mut cols,
            );
            let mut dw = vec![0.0; o_ch * l];
            // dw (O x L) = g_n (O x M) * cols (M x L)
            unsafe {
                dgemm(
                    o_ch,
                    m,
                    l,
                    1.0,
                    g[ni * o_ch * m..].as_ptr(),
                    m as isize,
                    1,
                    cols.as_ptr(),
                    l as isize,
                    1,
                    0.0,
                    dw.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; o_ch * l];
    for p in partials {
        for (d, s) in dw.iter_mut().zip(p) {
            *d += s;
        }
    }
    dw
}

/// c (m x n) = a (m x k) * b (k x n), all row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}
