//! Bilinear gather/scatter kernels behind the differentiable sampler.
//!
//! Coordinates are absolute (row, col) pixel positions in channel-first
//! layout (N,2,H',W'). Out-of-range positions clamp to the border pixel.

use rayon::prelude::*;

/// Corner decomposition of one clamped coordinate: (low index, fraction,
/// pass-through flag for the coordinate gradient).
#[inline]
fn split(c: f64, size: usize) -> (usize, f64, bool) {
    if size == 1 {
        return (0, 0.0, false);
    }
    let hi = (size - 1) as f64;
    let cl = c.clamp(0.0, hi);
    let mut lo = cl.floor();
    if lo > hi - 1.0 {
        lo = hi - 1.0;
    }
    ((lo as usize), cl - lo, c > 0.0 && c < hi)
}

/// out[n,c,i,j] = bilinear sample of img[n,c] at coords[n,:,i,j].
pub(crate) fn grid_sample(
    img: &[f64],
    coords: &[f64],
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let plane = oh * ow;
    let mut out = vec![0.0; n * ch * plane];
    out.par_chunks_mut(ch * plane).enumerate().for_each(|(ni, out_n)| {
        let img_n = &img[ni * ch * h * w..][..ch * h * w];
        let rows = &coords[ni * 2 * plane..][..plane];
        let colz = &coords[ni * 2 * plane + plane..][..plane];
        for p in 0..plane {
            let (r0, fr, _) = split(rows[p], h);
            let (c0, fc, _) = split(colz[p], w);
            let (r1, c1) = (r0 + 1, c0 + 1);
            let (w00, w01, w10, w11) = (
                (1.0 - fr) * (1.0 - fc),
                (1.0 - fr) * fc,
                fr * (1.0 - fc),
                fr * fc,
            );
            for c in 0..ch {
                let pl = &img_n[c * h * w..][..h * w];
                out_n[c * plane + p] = w00 * pl[r0 * w + c0]
                    + w01 * pl[r0 * w + c1.min(w - 1)]
                    + w10 * pl[r1.min(h - 1) * w + c0]
                    + w11 * pl[r1.min(h - 1) * w + c1.min(w - 1)];
            }
        }
    });
    out
}

/// Transpose of `grid_sample`: scatter vals into an (h x w) image with the
/// same corner weights.
pub(crate) fn grid_scatter(
    vals: &[f64],
    coords: &[f64],
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let plane = oh * ow;
    let mut out = vec![0.0; n * ch * h * w];
    out.par_chunks_mut(ch * h * w).enumerate().for_each(|(ni, out_n)| {
        let vals_n = &vals[ni * ch * plane..][..ch * plane];
        let rows = &coords[ni * 2 * plane..][..plane];
        let colz = &coords[ni * 2 * plane + plane..][..plane];
        for p in 0..plane {
            let (r0, fr, _) = split(rows[p], h);
            let (c0, fc, _) = split(colz[p], w);
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (w00, w01, w10, w11) = (
                (1.0 - fr) * (1.0 - fc),
                (1.0 - fr) * fc,
                fr * (1.0 - fc),
                fr * fc,
            );
            for c in 0..ch {
                let v = vals_n[c * plane + p];
                let pl = &mut out_n[c * h * w..][..h * w];
                pl[r0 * w + c0] += w00 * v;
                pl[r0 * w + c1] += w01 * v;
                pl[r1 * w + c0] += w10 * v;
                pl[r1 * w + c1] += w11 * v;
            }
        }
    });
    out
}

/// d(sum(upstream * sample)) / d coords — the (N,2,H',W') coordinate
/// gradient. Saturated (clamped) coordinates receive zero.
pub(crate) fn grid_sample_coord_grad(
    img: &[f64],
    coords: &[f64],
    upstream: &[f64],
    n: usize,
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let plane = oh * ow;
    let mut out = vec![0.0; n * 2 * plane];
    out.par_chunks_mut(2 * plane).enumerate().for_each(|(ni, out_n)| {
        let img_n = &img[ni * ch * h * w..][..ch * h * w];
        let up_n = &upstream[ni * ch * plane..][..ch * plane];
        let rows = &coords[ni * 2 * plane..][..plane];
        let colz = &coords[ni * 2 * plane + plane..][..plane];
        for p in 0..plane {
            let (r0, fr, r_live) = split(rows[p], h);
            let (c0, fc, c_live) = split(colz[p], w);
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (mut dr, mut dc) = (0.0, 0.0);
            for c in 0..ch {
                let pl = &img_n[c * h * w..][..h * w];
                let (v00, v01, v10, v11) = (
                    pl[r0 * w + c0],
                    pl[r0 * w + c1],
                    pl[r1 * w + c0],
                    pl[r1 * w + c1],
                );
                let g = up_n[c * plane + p];
                dr += g * ((1.0 - fc) * (v10 - v00) + fc * (v11 - v01));
                dc += g * ((1.0 - fr) * (v01 - v00) + fr * (v11 - v10));
            }
            out_n[p] = if r_live { dr } else { 0.0 };
            out_n[plane + p] = if c_live { dc } else { 0.0 };
        }
    });
    out
}
