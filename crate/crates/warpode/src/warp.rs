//! Applying a warp field to images and the two field regularizers.
//!
//! Coordinate convention, used everywhere in this crate: positions are
//! (row, col) pairs in pixel units, row axis first. A warp field stores a
//! *displacement*; pixels of the output are sampled from
//! `grid + displacement`, so the zero field is the identity warp.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Mesh coordinate system: coords[i][j] = (i, j) in pixel units.
#[derive(Clone, Debug)]
pub struct Grid {
    h: usize,
    w: usize,
    coords: Tensor,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        let coords = Tensor::from_fn(&[2, h, w], |ix| {
            if ix[0] == 0 {
                ix[1] as f64
            } else {
                ix[2] as f64
            }
        });
        Grid { h, w, coords }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// (row, col) at a mesh point.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        (self.coords.at(&[0, i, j]), self.coords.at(&[1, i, j]))
    }

    /// Channel-first (2, h, w) coordinate tensor.
    pub fn coords(&self) -> &Tensor {
        &self.coords
    }
}

/// An image as h x w x c floats, nominally in [0, 1]. Values are clamped
/// only at load/export; intermediate results may leave the range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    h: usize,
    w: usize,
    c: usize,
    pixels: Vec<f64>,
}

impl ImageFrame {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != h * w * c {
            return Err(TensorError::ShapeLen {
                shape: vec![h, w, c],
                len: pixels.len(),
            });
        }
        Ok(ImageFrame { h, w, c, pixels })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        ImageFrame {
            h,
            w,
            c,
            pixels: vec![0.0; h * w * c],
        }
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut pixels = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    pixels.push(f(i, j, ch));
                }
            }
        }
        ImageFrame { h, w, c, pixels }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.pixels[(i * self.w + j) * self.c + ch]
    }

    pub fn set(&mut self, i: usize, j: usize, ch: usize, v: f64) {
        self.pixels[(i * self.w + j) * self.c + ch] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Clamp all values into [0, 1] (for export).
    pub fn clamped(&self) -> ImageFrame {
        ImageFrame {
            h: self.h,
            w: self.w,
            c: self.c,
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Channel-first (1, c, h, w) tensor for network consumption.
    pub fn to_nchw(&self) -> Tensor {
        let mut data = vec![0.0; self.c * self.h * self.w];
        for i in 0..self.h {
            for j in 0..self.w {
                for ch in 0..self.c {
                    data[(ch * self.h + i) * self.w + j] = self.get(i, j, ch);
                }
            }
        }
        Tensor::from_parts(vec![1, self.c, self.h, self.w], data)
    }

    /// Rebuild from a (1, c, h, w) or (c, h, w) tensor.
    pub fn from_nchw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(TensorError::Rank {
                    op: "ImageFrame::from_nchw",
                    expect: 4,
                    shape: s.to_vec(),
                })
            }
        };
        let data = t.data();
        let mut out = ImageFrame::zeros(h, w, c);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.set(i, j, ch, data[(ch * h + i) * w + j]);
                }
            }
        }
        Ok(out)
    }

    /// Batch a set of equally-sized frames into (n, c, h, w).
    pub fn batch_nchw(frames: &[&ImageFrame]) -> Result<Tensor> {
        assert!(!frames.is_empty());
        let (h, w, c) = (frames[0].h, frames[0].w, frames[0].c);
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        for f in frames {
            if f.h != h || f.w != w || f.c != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_nchw",
                    lhs: vec![h, w, c],
                    rhs: vec![f.h, f.w, f.c],
                });
            }
            data.extend_from_slice(f.to_nchw().data());
        }
        Ok(Tensor::from_parts(vec![frames.len(), c, h, w], data))
    }
}

/// Dense displacement field over an h x w pixel grid.
///
/// Stored as h x w x 2 with axis 0 = row offset, axis 1 = column offset.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    h: usize,
    w: usize,
    disp: Tensor,
}

impl WarpField {
    pub fn identity(h: usize, w: usize) -> Self {
        WarpField {
            h,
            w,
            disp: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn new(h: usize, w: usize, disp: Tensor) -> Result<Self> {
        if disp.shape() != [h, w, 2] {
            return Err(TensorError::ShapeLen {
                shape: disp.shape().to_vec(),
                len: h * w * 2,
            });
        }
        Ok(WarpField { h, w, disp })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let disp = Tensor::from_fn(&[h, w, 2], |ix| {
            let (dr, dc) = f(ix[0], ix[1]);
            if ix[2] == 0 {
                dr
            } else {
                dc
            }
        });
        WarpField { h, w, disp }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// (row offset, col offset) at a pixel.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        (self.disp.at(&[i, j, 0]), self.disp.at(&[i, j, 1]))
    }

    pub fn disp(&self) -> &Tensor {
        &self.disp
    }

    pub fn is_finite(&self) -> bool {
        self.disp.all_finite()
    }

    /// Channel-first (1, 2, h, w) tensor.
    pub fn to_nchw(&self) -> Tensor {
        let mut data = vec![0.0; 2 * self.h * self.w];
        for i in 0..self.h {
            for j in 0..self.w {
                data[i * self.w + j] = self.disp.at(&[i, j, 0]);
                data[self.h * self.w + i * self.w + j] = self.disp.at(&[i, j, 1]);
            }
        }
        Tensor::from_parts(vec![1, 2, self.h, self.w], data)
    }

    /// Rebuild from a (1, 2, h, w) or (2, h, w) tensor.
    pub fn from_nchw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s.len() {
            4 if s[0] == 1 && s[1] == 2 => (s[2], s[3]),
            3 if s[0] == 2 => (s[1], s[2]),
            _ => {
                return Err(TensorError::Rank {
                    op: "WarpField::from_nchw",
                    expect: 4,
                    shape: s.to_vec(),
                })
            }
        };
        let data = t.data();
        let disp = Tensor::from_fn(&[h, w, 2], |ix| data[(ix[2] * h + ix[0]) * w + ix[1]]);
        Ok(WarpField { h, w, disp })
    }
}

/// Bilinear sample of every channel at an absolute (row, col) location.
/// Exact at integer locations; out-of-range locations clamp to the border.
pub fn bilinear_sample(x: &ImageFrame, loc: (f64, f64)) -> Vec<f64> {
    let split = |c: f64, size: usize| -> (usize, usize, f64) {
        if size == 1 {
            return (0, 0, 0.0);
        }
        let hi = (size - 1) as f64;
        let cl = c.clamp(0.0, hi);
        let lo = cl.floor().min(hi - 1.0);
        (lo as usize, lo as usize + 1, cl - lo)
    };
    let (r0, r1, fr) = split(loc.0, x.h());
    let (c0, c1, fc) = split(loc.1, x.w());
    (0..x.channels())
        .map(|ch| {
            (1.0 - fr) * (1.0 - fc) * x.get(r0, c0, ch)
                + (1.0 - fr) * fc * x.get(r0, c1, ch)
                + fr * (1.0 - fc) * x.get(r1, c0, ch)
                + fr * fc * x.get(r1, c1, ch)
        })
        .collect()
}

/// Differentiable warp on tape values: out[i,j] = x sampled at
/// grid[i,j] + phi[i,j]. `x` is (N,C,H,W), `phi` is (N,2,H,W).
pub fn warp_image_on(tape: &mut Tape, x: Var, phi: Var) -> Result<Var> {
    let (sx, sp) = (tape.shape(x).to_vec(), tape.shape(phi).to_vec());
    if sx.len() != 4 || sp.len() != 4 || sx[2] != sp[2] || sx[3] != sp[3] || sp[1] != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "warp_image",
            lhs: sx,
            rhs: sp,
        });
    }
    let grid = tape.constant(Grid::new(sx[2], sx[3]).coords().clone());
    let coords = tape.add(phi, grid)?;
    tape.grid_sample(x, coords)
}

/// Warp a detached image by a detached field.
pub fn warp_image(x: &ImageFrame, phi: &WarpField) -> Result<ImageFrame> {
    if x.h() != phi.h() || x.w() != phi.w() {
        return Err(TensorError::ShapeMismatch {
            op: "warp_image",
            lhs: vec![x.h(), x.w()],
            rhs: vec![phi.h(), phi.w()],
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_nchw());
    let pv = tape.constant(phi.to_nchw());
    let out = warp_image_on(&mut tape, xv, pv)?;
    ImageFrame::from_nchw(tape.value(out))
}

/// Determinant of the forward-difference Jacobian of the coordinate map
/// `grid + phi` at each interior corner: phi (N,2,H,W) -> (N,H-1,W-1).
pub fn jacobian_determinant_on(tape: &mut Tape, phi: Var) -> Result<Var> {
    let s = tape.shape(phi).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(TensorError::Rank {
            op: "jacobian_determinant",
            expect: 4,
            shape: s,
        });
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(TensorError::Invalid(format!(
            "jacobian_determinant needs at least 2x2 fields, got {h}x{w}"
        )));
    }
    let grid = tape.constant(Grid::new(h, w).coords().clone());
    let m = tape.add(phi, grid)?;
    // Row-direction differences, cropped to (H-1, W-1).
    let hi = tape.narrow(m, 2, 1, h - 1)?;
    let lo = tape.narrow(m, 2, 0, h - 1)?;
    let di = tape.sub(hi, lo)?;
    let di = tape.narrow(di, 3, 0, w - 1)?;
    // Column-direction differences, cropped likewise.
    let ri = tape.narrow(m, 3, 1, w - 1)?;
    let le = tape.narrow(m, 3, 0, w - 1)?;
    let dj = tape.sub(ri, le)?;
    let dj = tape.narrow(dj, 2, 0, h - 1)?;

    let di0 = tape.narrow(di, 1, 0, 1)?;
    let di1 = tape.narrow(di, 1, 1, 1)?;
    let dj0 = tape.narrow(dj, 1, 0, 1)?;
    let dj1 = tape.narrow(dj, 1, 1, 1)?;
    let a = tape.mul(di0, dj1)?;
    let b = tape.mul(di1, dj0)?;
    let det = tape.sub(a, b)?;
    tape.reshape(det, &[n, h - 1, w - 1])
}

/// Detached Jacobian determinant of a single field: (h-1) x (w-1).
pub fn jacobian_determinant(phi: &WarpField) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = tape.constant(phi.to_nchw());
    let det = jacobian_determinant_on(&mut tape, pv)?;
    let v = tape.value(det);
    v.reshaped(&[phi.h() - 1, phi.w() - 1])
}

/// Folding penalty over a set of fields: sum of |det J| - det J, which is
/// 2 max(0, -det) pointwise — zero exactly when no determinant is negative.
pub fn jd_penalty_on(tape: &mut Tape, fields: &[Var]) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for &phi in fields {
        let det = jacobian_determinant_on(tape, phi)?;
        let mag = tape.abs(det);
        let excess = tape.sub(mag, det)?;
        let s = tape.sum_all(excess)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Out-of-grid penalty: per axis, relu of how far each mapped coordinate
/// exits [0, size-1]. Zero exactly when every coordinate stays in range.
pub fn og_penalty_on(tape: &mut Tape, fields: &[Var]) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for &phi in fields {
        let s = tape.shape(phi).to_vec();
        let (h, w) = (s[2], s[3]);
        let grid = tape.constant(Grid::new(h, w).coords().clone());
        let m = tape.add(phi, grid)?;
        for (axis, size) in [(0usize, h), (1usize, w)] {
            let comp = tape.narrow(m, 1, axis, 1)?;
            let over = tape.add_scalar(comp, -((size - 1) as f64));
            let over = tape.relu(over);
            let neg = tape.neg(comp);
            let under = tape.relu(neg);
            let o = tape.sum_all(over)?;
            let u = tape.sum_all(under)?;
            total = tape.add(total, o)?;
            total = tape.add(total, u)?;
        }
    }
    Ok(total)
}

/// Detached folding penalty of a field sequence.
pub fn jd_penalty(fields: &[WarpField]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = fields.iter().map(|f| tape.constant(f.to_nchw())).collect();
    let p = jd_penalty_on(&mut tape, &vars)?;
    Ok(tape.value(p).item())
}

/// Detached out-of-grid penalty of a field sequence.
pub fn og_penalty(fields: &[WarpField]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = fields.iter().map(|f| tape.constant(f.to_nchw())).collect();
    let p = og_penalty_on(&mut tape, &vars)?;
    Ok(tape.value(p).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn grid_corners() {
        let g = Grid::new(4, 5);
        assert_eq!(g.at(0, 0), (0.0, 0.0));
        assert_eq!(g.at(3, 4), (3.0, 4.0));
    }

    #[test]
    fn identity_warp_is_bitwise_exact() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = ImageFrame::from_fn(5, 7, 2, |_, _, _| rng.random_range(0.0..1.0));
        let out = warp_image(&x, &WarpField::identity(5, 7)).unwrap();
        assert_eq!(out.pixels(), x.pixels());
    }

    #[test]
    fn unit_shift_on_ramp_clamps_at_border() {
        let w = 6;
        let x = ImageFrame::from_fn(3, w, 1, |_, j, _| j as f64 / (w - 1) as f64);
        let phi = WarpField::from_fn(3, w, |_, _| (0.0, 1.0));
        let out = warp_image(&x, &phi).unwrap();
        for i in 0..3 {
            for j in 0..w {
                let expect = (j + 1).min(w - 1) as f64 / (w - 1) as f64;
                assert!((out.get(i, j, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn warp_matches_reference_sampler() {
        // Direct per-pixel bilinear formula, written independently of the
        // library sampler.
        fn reference(x: &ImageFrame, r: f64, c: f64, ch: usize) -> f64 {
            let rr = r.clamp(0.0, (x.h() - 1) as f64);
            let cc = c.clamp(0.0, (x.w() - 1) as f64);
            let (r0, c0) = (
                (rr.floor() as usize).min(x.h() - 2),
                (cc.floor() as usize).min(x.w() - 2),
            );
            let (fr, fc) = (rr - r0 as f64, cc - c0 as f64);
            x.get(r0, c0, ch) * (1.0 - fr) * (1.0 - fc)
                + x.get(r0, c0 + 1, ch) * (1.0 - fr) * fc
                + x.get(r0 + 1, c0, ch) * fr * (1.0 - fc)
                + x.get(r0 + 1, c0 + 1, ch) * fr * fc
        }
        let mut rng = StdRng::seed_from_u64(2);
        let x = ImageFrame::from_fn(6, 6, 1, |_, _, _| rng.random_range(0.0..1.0));
        let phi = WarpField::from_fn(6, 6, |_, _| {
            (
                rng.random_range(-4..4) as f64 * 0.5,
                rng.random_range(-4..4) as f64 * 0.5,
            )
        });
        let out = warp_image(&x, &phi).unwrap();
        let g = Grid::new(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let (gr, gc) = g.at(i, j);
                let (dr, dc) = phi.at(i, j);
                let expect = reference(&x, gr + dr, gc + dc, 0);
                assert!((out.get(i, j, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_examples() {
        let x = ImageFrame::new(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&x, (0.0, 1.0)), vec![0.0]);
        assert_eq!(bilinear_sample(&x, (1.0, 0.0)), vec![1.0]);
        assert!((bilinear_sample(&x, (0.5, 0.5))[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_is_linear_in_the_image() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = ImageFrame::from_fn(5, 5, 1, |_, _, _| rng.random_range(0.0..1.0));
        let b = ImageFrame::from_fn(5, 5, 1, |_, _, _| rng.random_range(0.0..1.0));
        let (ca, cb) = (0.7, -0.3);
        let mixed = ImageFrame::from_fn(5, 5, 1, |i, j, ch| {
            ca * a.get(i, j, ch) + cb * b.get(i, j, ch)
        });
        for _ in 0..50 {
            let loc = (rng.random_range(-1.0..5.5), rng.random_range(-1.0..5.5));
            let lhs = bilinear_sample(&mixed, loc)[0];
            let rhs = ca * bilinear_sample(&a, loc)[0] + cb * bilinear_sample(&b, loc)[0];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_identity_scale_flip() {
        let id = WarpField::identity(4, 4);
        let det = jacobian_determinant(&id).unwrap();
        assert!(det.data().iter().all(|&d| (d - 1.0).abs() < 1e-15));

        // m = 2 grid, i.e. disp = grid
        let scale = WarpField::from_fn(4, 4, |i, j| (i as f64, j as f64));
        let det = jacobian_determinant(&scale).unwrap();
        assert!(det.data().iter().all(|&d| (d - 4.0).abs() < 1e-15));

        // horizontal flip: m = (i, w-1-j) so disp = (0, w-1-2j)
        let w = 5usize;
        let flip = WarpField::from_fn(5, w, |_, j| (0.0, (w as f64 - 1.0) - 2.0 * j as f64));
        let det = jacobian_determinant(&flip).unwrap();
        assert!(det.data().iter().all(|&d| (d + 1.0).abs() < 1e-15));
    }

    #[test]
    fn jd_penalty_examples() {
        let id = WarpField::identity(5, 5);
        assert_eq!(jd_penalty(&[id]).unwrap(), 0.0);

        let w = 5usize;
        let flip = WarpField::from_fn(5, w, |_, j| (0.0, (w as f64 - 1.0) - 2.0 * j as f64));
        let p = jd_penalty(&[flip]).unwrap();
        assert_eq!(p, 32.0); // 4x4 interior dets of -1, each contributing 2

        let mut rng = StdRng::seed_from_u64(4);
        let small = WarpField::from_fn(8, 8, |_, _| {
            (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))
        });
        // oracle: verify every det is positive first
        let det = jacobian_determinant(&small).unwrap();
        assert!(det.data().iter().all(|&d| d > 0.0));
        assert_eq!(jd_penalty(&[small]).unwrap(), 0.0);
    }

    #[test]
    fn jd_penalty_iff_negative_det() {
        // one folded cell -> positive penalty; the identity -> zero
        let mut disp = vec![0.0; 3 * 3 * 2];
        disp[(3 + 0) * 2] = -2.0; // row offset of pixel (1,0), folds the first cell
        let folded = WarpField::new(3, 3, Tensor::new(&[3, 3, 2], disp).unwrap()).unwrap();
        let det = jacobian_determinant(&folded).unwrap();
        assert!(det.data().iter().any(|&d| d < 0.0));
        assert!(jd_penalty(&[folded]).unwrap() > 0.0);
    }

    #[test]
    fn og_penalty_examples() {
        assert_eq!(og_penalty(&[WarpField::identity(4, 4)]).unwrap(), 0.0);

        // one row, four columns, shift +2 in cols: columns map to 2,3,4,5
        let shift = WarpField::from_fn(1, 4, |_, _| (0.0, 2.0));
        assert_eq!(og_penalty(&[shift]).unwrap(), 3.0);

        // three rows, one column, shift -1 in rows: rows map to -1,0,1
        let up = WarpField::from_fn(3, 1, |_, _| (-1.0, 0.0));
        assert_eq!(og_penalty(&[up]).unwrap(), 1.0);
    }

    #[test]
    fn og_penalty_iff_out_of_range() {
        // in-range non-trivial field has zero penalty
        let inside = WarpField::from_fn(4, 4, |i, j| {
            (0.3 * (1.0 - i as f64 / 3.0), -0.2 * (j as f64 / 3.0))
        });
        assert_eq!(og_penalty(&[inside]).unwrap(), 0.0);
        // any single escaping coordinate makes it positive
        let mut disp = vec![0.0; 4 * 4 * 2];
        disp[1] = -0.25; // col coordinate of pixel (0,0) maps to -0.25
        let out = WarpField::new(4, 4, Tensor::new(&[4, 4, 2], disp).unwrap()).unwrap();
        assert!(og_penalty(&[out]).unwrap() > 0.0);
    }

    #[test]
    fn shift_composition_approximates_sum() {
        // band-limited image: smooth cosines
        let n = 16usize;
        let img = ImageFrame::from_fn(n, n, 1, |i, j, _| {
            let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
            0.5 + 0.25 * (std::f64::consts::TAU * x).cos() * (std::f64::consts::TAU * y).sin()
        });
        let c1 = (0.6, -0.4);
        let c2 = (0.3, 0.9);
        let w1 = WarpField::from_fn(n, n, |_, _| c1);
        let w2 = WarpField::from_fn(n, n, |_, _| c2);
        let w12 = WarpField::from_fn(n, n, |_, _| (c1.0 + c2.0, c1.1 + c2.1));
        let two_step = warp_image(&warp_image(&img, &w2).unwrap(), &w1).unwrap();
        let one_step = warp_image(&img, &w12).unwrap();
        // compare away from the clamped border
        let mut max_diff = 0.0f64;
        for i in 2..n - 2 {
            for j in 2..n - 2 {
                max_diff = max_diff.max((two_step.get(i, j, 0) - one_step.get(i, j, 0)).abs());
            }
        }
        assert!(max_diff < 0.02, "max diff {max_diff}");
    }

    #[test]
    fn warp_gradients_pass_grad_check() {
        let mut rng = StdRng::seed_from_u64(5);
        let img = ImageFrame::from_fn(8, 8, 1, |_, _, _| rng.random_range(0.0..1.0));
        let img_t = img.to_nchw();
        // fractional offsets keep finite differences inside one bilinear cell
        let phi0 = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.random_range(0.15..0.35));

        // w.r.t. the field
        let img_c = img_t.clone();
        let err = grad_check(
            |t, phi| {
                let x = t.constant(img_c.clone());
                let y = warp_image_on(t, x, phi)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &phi0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "phi grad err {err}");

        // w.r.t. the image
        let phi_c = phi0.clone();
        let err = grad_check(
            |t, x| {
                let phi = t.constant(phi_c.clone());
                let y = warp_image_on(t, x, phi)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &img_t,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "image grad err {err}");
    }

    #[test]
    fn penalty_gradients_pass_grad_check() {
        let mut rng = StdRng::seed_from_u64(6);
        let phi0 = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.random_range(-0.4..0.4));
        let err = grad_check(|t, phi| jd_penalty_on(t, &[phi]), &phi0, 1e-5).unwrap();
        assert!(err < 1e-4, "jd grad err {err}");

        // bias the field outward so some coordinates are out of range and
        // the og hinge is active (and smooth) there
        let phi1 = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(1.3..2.3));
        let err = grad_check(|t, phi| og_penalty_on(t, &[phi]), &phi1, 1e-5).unwrap();
        assert!(err < 1e-4, "og grad err {err}");
    }

    #[test]
    fn dim_mismatch_errors() {
        let x = ImageFrame::zeros(4, 4, 1);
        let phi = WarpField::identity(4, 5);
        assert!(warp_image(&x, &phi).is_err());
    }
}
