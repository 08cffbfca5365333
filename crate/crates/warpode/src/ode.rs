//! Fixed-step integration of the flow equation dPhi/dt = V(Phi), from the
//! identity field to any time in [-1, 1].
//!
//! Negative end times integrate the same field backwards, which is the
//! proper inverse warp for a stationary velocity: the flow is a
//! one-parameter group, so Phi_{-t} composed with Phi_t is the identity
//! up to solver and interpolation error.

use crate::nn::{BoundVelocityNet, VelocityNet};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::warp::{bilinear_sample, Grid, ImageFrame, WarpField};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("integration produced a non-finite field at step {step}")]
    NonFinite { step: usize },
    #[error("trajectory times must be strictly increasing")]
    UnsortedTimes,
    #[error("{0}")]
    BadArg(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OdeError>;

/// Integration scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(format!("unknown method '{other}' (expected euler|rk4)")),
        }
    }
}

/// A velocity field evaluated on tape values. `phi` is the current
/// displacement (N,2,H,W) and `x0` the conditioning image (N,C,H,W);
/// the result has phi's shape.
pub trait Velocity {
    fn velocity(&self, tape: &mut Tape, phi: Var, x0: Var) -> crate::tensor::Result<Var>;
}

impl Velocity for BoundVelocityNet {
    fn velocity(&self, tape: &mut Tape, phi: Var, x0: Var) -> crate::tensor::Result<Var> {
        self.forward(tape, phi, x0)
    }
}

/// The unbound network rebinds its parameters as frozen constants on each
/// evaluation — handy for detached evaluation; use `bind` for training.
impl Velocity for VelocityNet {
    fn velocity(&self, tape: &mut Tape, phi: Var, x0: Var) -> crate::tensor::Result<Var> {
        self.bind(tape, false).forward(tape, phi, x0)
    }
}

/// Analytic test fields.
pub mod fields {
    use super::*;

    /// V = 0: the flow stays at the identity.
    pub struct ZeroVelocity;

    impl Velocity for ZeroVelocity {
        fn velocity(&self, tape: &mut Tape, phi: Var, _x0: Var) -> crate::tensor::Result<Var> {
            let shape = tape.shape(phi).to_vec();
            Ok(tape.constant(Tensor::zeros(&shape)))
        }
    }

    /// Spatially-uniform velocity (rows per unit time, cols per unit time).
    pub struct ConstVelocity(pub f64, pub f64);

    impl Velocity for ConstVelocity {
        fn velocity(&self, tape: &mut Tape, phi: Var, _x0: Var) -> crate::tensor::Result<Var> {
            let shape = tape.shape(phi).to_vec();
            let c = tape.constant(Tensor::new(&[2, 1, 1], vec![self.0, self.1]).unwrap());
            tape.broadcast_to(c, &shape)
        }
    }

    /// V(m) = A m on the absolute coordinate map m = grid + phi, so the
    /// exact flow is m(t) = exp(tA) grid.
    pub struct LinearVelocity(pub [[f64; 2]; 2]);

    impl Velocity for LinearVelocity {
        fn velocity(&self, tape: &mut Tape, phi: Var, _x0: Var) -> crate::tensor::Result<Var> {
            let s = tape.shape(phi).to_vec();
            let (h, w) = (s[2], s[3]);
            let grid = tape.constant(Grid::new(h, w).coords().clone());
            let m = tape.add(phi, grid)?;
            let m0 = tape.narrow(m, 1, 0, 1)?;
            let m1 = tape.narrow(m, 1, 1, 1)?;
            let a = self.0;
            let r0 = tape.scale(m0, a[0][0]);
            let r1 = tape.scale(m1, a[0][1]);
            let vr = tape.add(r0, r1)?;
            let c0 = tape.scale(m0, a[1][0]);
            let c1 = tape.scale(m1, a[1][1]);
            let vc = tape.add(c0, c1)?;
            tape.concat(1, &[vr, vc])
        }
    }
}

/// Advance an existing field by `dt` in `steps` fixed substeps.
pub fn advance_on<V: Velocity + ?Sized>(
    tape: &mut Tape,
    vel: &V,
    x0: Var,
    mut phi: Var,
    dt: f64,
    steps: usize,
    method: Method,
) -> Result<Var> {
    if steps == 0 {
        return Err(OdeError::BadArg("advance needs at least one step".into()));
    }
    let h = dt / steps as f64;
    for step in 0..steps {
        phi = match method {
            Method::Euler => {
                let k1 = vel.velocity(tape, phi, x0)?;
                let inc = tape.scale(k1, h);
                tape.add(phi, inc)?
            }
            Method::Rk4 => {
                let k1 = vel.velocity(tape, phi, x0)?;
                let half1 = tape.scale(k1, h * 0.5);
                let p2 = tape.add(phi, half1)?;
                let k2 = vel.velocity(tape, p2, x0)?;
                let half2 = tape.scale(k2, h * 0.5);
                let p3 = tape.add(phi, half2)?;
                let k3 = vel.velocity(tape, p3, x0)?;
                let full = tape.scale(k3, h);
                let p4 = tape.add(phi, full)?;
                let k4 = vel.velocity(tape, p4, x0)?;
                // k1 + 2 k2 + 2 k3 + k4
                let k22 = tape.scale(k2, 2.0);
                let k32 = tape.scale(k3, 2.0);
                let s = tape.add(k1, k22)?;
                let s = tape.add(s, k32)?;
                let s = tape.add(s, k4)?;
                let inc = tape.scale(s, h / 6.0);
                tape.add(phi, inc)?
            }
        };
        if !tape.value(phi).all_finite() {
            return Err(OdeError::NonFinite { step });
        }
    }
    Ok(phi)
}

/// Integrate from the identity to `t_end` in `steps` fixed steps; the
/// whole computation lands on `tape`, so it is differentiable when the
/// velocity is. `x0` is (N,C,H,W); the result is (N,2,H,W).
pub fn integrate_on<V: Velocity + ?Sized>(
    tape: &mut Tape,
    vel: &V,
    x0: Var,
    t_end: f64,
    steps: usize,
    method: Method,
) -> Result<Var> {
    if steps == 0 {
        return Err(OdeError::BadArg("integrate needs at least one step".into()));
    }
    if !(-1.0..=1.0).contains(&t_end) {
        return Err(OdeError::BadArg(format!("|t_end| must be <= 1, got {t_end}")));
    }
    let s = tape.shape(x0).to_vec();
    if s.len() != 4 {
        return Err(OdeError::BadArg(format!(
            "x0 must be (N,C,H,W), got {s:?}"
        )));
    }
    let phi0 = tape.constant(Tensor::zeros(&[s[0], 2, s[2], s[3]]));
    if t_end == 0.0 {
        return Ok(phi0);
    }
    advance_on(tape, vel, x0, phi0, t_end, steps, method)
}

/// Detached single-image integration; `vel` must not capture another tape
/// (networks implement this via their rebinding `Velocity` impl).
pub fn integrate<V: Velocity + ?Sized>(
    vel: &V,
    x0: &ImageFrame,
    t_end: f64,
    steps: usize,
    method: Method,
) -> Result<WarpField> {
    let mut tape = Tape::new();
    let xv = tape.constant(x0.to_nchw());
    let phi = integrate_on(&mut tape, vel, xv, t_end, steps, method)?;
    Ok(WarpField::from_nchw(tape.value(phi))?)
}

/// One ODE solve evaluated at several times.
#[derive(Clone, Debug)]
pub struct Trajectory {
    times: Vec<f64>,
    fields: Vec<WarpField>,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn fields(&self) -> &[WarpField] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn field_at(&self, t: f64) -> Option<&WarpField> {
        self.times
            .iter()
            .position(|&x| x == t)
            .map(|i| &self.fields[i])
    }

    /// Folding penalty summed over all emitted fields.
    pub fn jd_penalty(&self) -> crate::tensor::Result<f64> {
        crate::warp::jd_penalty(&self.fields)
    }

    /// Out-of-grid penalty summed over all emitted fields.
    pub fn og_penalty(&self) -> crate::tensor::Result<f64> {
        crate::warp::og_penalty(&self.fields)
    }
}

fn validate_times(times: &[f64]) -> Result<()> {
    for pair in times.windows(2) {
        if pair[0] >= pair[1] {
            return Err(OdeError::UnsortedTimes);
        }
    }
    if times.iter().any(|t| !(-1.0..=1.0).contains(t)) {
        return Err(OdeError::BadArg("trajectory times must lie in [-1, 1]".into()));
    }
    Ok(())
}

/// Number of substeps for a span of `dt` at `steps_per_unit` resolution.
fn span_steps(dt: f64, steps_per_unit: usize) -> usize {
    ((dt * steps_per_unit as f64).ceil() as usize).max(1)
}

/// Tape-level trajectory: one continuous solve per time direction,
/// emitting the field at each requested time. Times must be sorted; t = 0
/// (the identity) is always included in the result.
pub fn trajectory_on<V: Velocity + ?Sized>(
    tape: &mut Tape,
    vel: &V,
    x0: Var,
    times: &[f64],
    steps_per_unit: usize,
    method: Method,
) -> Result<Vec<(f64, Var)>> {
    validate_times(times)?;
    if steps_per_unit == 0 {
        return Err(OdeError::BadArg("steps_per_unit must be positive".into()));
    }
    let s = tape.shape(x0).to_vec();
    let identity = tape.constant(Tensor::zeros(&[s[0], 2, s[2], s[3]]));

    let mut out: Vec<(f64, Var)> = Vec::new();
    // backward branch: walk negative times from 0 downward
    let mut phi = identity;
    let mut prev = 0.0;
    for &t in times.iter().rev().filter(|&&t| t < 0.0) {
        let steps = span_steps(prev - t, steps_per_unit);
        phi = advance_on(tape, vel, x0, phi, t - prev, steps, method)?;
        out.push((t, phi));
        prev = t;
    }
    out.reverse();
    out.push((0.0, identity));
    // forward branch
    let mut phi = identity;
    let mut prev = 0.0;
    for &t in times.iter().filter(|&&t| t > 0.0) {
        let steps = span_steps(t - prev, steps_per_unit);
        phi = advance_on(tape, vel, x0, phi, t - prev, steps, method)?;
        out.push((t, phi));
        prev = t;
    }
    Ok(out)
}

/// Detached trajectory for a single image.
pub fn trajectory<V: Velocity + ?Sized>(
    vel: &V,
    x0: &ImageFrame,
    times: &[f64],
    steps_per_unit: usize,
    method: Method,
) -> Result<Trajectory> {
    let mut tape = Tape::new();
    let xv = tape.constant(x0.to_nchw());
    let pairs = trajectory_on(&mut tape, vel, xv, times, steps_per_unit, method)?;
    let mut times = Vec::with_capacity(pairs.len());
    let mut fields = Vec::with_capacity(pairs.len());
    for (t, v) in pairs {
        times.push(t);
        fields.push(WarpField::from_nchw(tape.value(v))?);
    }
    Ok(Trajectory { times, fields })
}

/// Integrate to +1 and -1, compose the two coordinate maps through
/// bilinear interpolation, and report the maximum deviation from the
/// identity over interior pixels (in pixels).
pub fn invertibility_residual<V: Velocity + ?Sized>(
    vel: &V,
    x0: &ImageFrame,
    steps: usize,
    method: Method,
) -> Result<f64> {
    let fwd = integrate(vel, x0, 1.0, steps, method)?;
    let bwd = integrate(vel, x0, -1.0, steps, method)?;
    let (h, w) = (fwd.h(), fwd.w());
    // backward coordinate map as a 2-channel image
    let bmap = ImageFrame::from_fn(h, w, 2, |i, j, ch| {
        let (dr, dc) = bwd.at(i, j);
        if ch == 0 {
            i as f64 + dr
        } else {
            j as f64 + dc
        }
    });
    let mut worst = 0.0f64;
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let (dr, dc) = fwd.at(i, j);
            let target = (i as f64 + dr, j as f64 + dc);
            let composed = bilinear_sample(&bmap, target);
            let er = composed[0] - i as f64;
            let ec = composed[1] - j as f64;
            worst = worst.max((er * er + ec * ec).sqrt());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::fields::*;
    use super::*;

    /// exp(A) for 2x2 A by scaling-and-squaring on a Taylor series —
    /// the oracle for linear-field solves.
    fn exp2x2(a: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
        let mut m = [[a[0][0] * t, a[0][1] * t], [a[1][0] * t, a[1][1] * t]];
        let norm = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        let k = norm.log2().ceil().max(0.0) as u32 + 4;
        let s = 0.5f64.powi(k as i32);
        for row in &mut m {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let matmul = |x: [[f64; 2]; 2], y: [[f64; 2]; 2]| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
                }
            }
            r
        };
        // Taylor: I + m + m^2/2! + ... (14 terms)
        let mut result = [[1.0, 0.0], [0.0, 1.0]];
        let mut term = [[1.0, 0.0], [0.0, 1.0]];
        for n in 1..=14 {
            term = matmul(term, m);
            for row in term.iter_mut() {
                for v in row.iter_mut() {
                    *v /= n as f64;
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..k {
            result = matmul(result, result);
        }
        result
    }

    /// disp expected from the linear flow: (exp(tA) - I) grid.
    fn linear_expected(a: [[f64; 2]; 2], t: f64, h: usize, w: usize) -> WarpField {
        let e = exp2x2(a, t);
        WarpField::from_fn(h, w, |i, j| {
            let (r, c) = (i as f64, j as f64);
            (
                (e[0][0] - 1.0) * r + e[0][1] * c,
                e[1][0] * r + (e[1][1] - 1.0) * c,
            )
        })
    }

    fn max_disp_err(got: &WarpField, expect: &WarpField) -> f64 {
        got.disp()
            .data()
            .iter()
            .zip(expect.disp().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn gray(h: usize, w: usize) -> ImageFrame {
        ImageFrame::from_fn(h, w, 1, |i, j, _| ((i + j) % 2) as f64)
    }

    #[test]
    fn zero_velocity_stays_identity_exactly() {
        let x0 = gray(6, 6);
        for method in [Method::Euler, Method::Rk4] {
            for t in [1.0, -1.0, 0.35] {
                let phi = integrate(&ZeroVelocity, &x0, t, 5, method).unwrap();
                assert!(phi.disp().data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn constant_velocity_integrates_to_t_c() {
        let x0 = gray(6, 6);
        let c = (0.5, -0.25);
        let vel = ConstVelocity(c.0, c.1);
        // euler with dyadic h is exact to the bit
        let phi = integrate(&vel, &x0, 1.0, 4, Method::Euler).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(phi.at(i, j), c);
            }
        }
        let phi = integrate(&vel, &x0, -1.0, 4, Method::Euler).unwrap();
        assert_eq!(phi.at(3, 3), (-c.0, -c.1));
        // rk4 agrees to rounding noise
        for t in [1.0, 0.5, -0.75] {
            let phi = integrate(&vel, &x0, t, 4, Method::Rk4).unwrap();
            for i in 0..6 {
                let (dr, dc) = phi.at(i, i);
                assert!((dr - t * c.0).abs() < 1e-14);
                assert!((dc - t * c.1).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_field_matches_matrix_exponential() {
        let a = [[0.05, -0.8], [0.8, 0.05]];
        let x0 = gray(8, 8);
        let phi = integrate(&LinearVelocity(a), &x0, 1.0, 16, Method::Rk4).unwrap();
        let expect = linear_expected(a, 1.0, 8, 8);
        let err = max_disp_err(&phi, &expect);
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn rk4_error_shrinks_16x_per_halving() {
        let a = [[0.0, -0.9], [0.9, 0.0]];
        let x0 = gray(8, 8);
        let expect = linear_expected(a, 1.0, 8, 8);
        let err = |steps: usize| {
            let phi = integrate(&LinearVelocity(a), &x0, 1.0, steps, Method::Rk4).unwrap();
            max_disp_err(&phi, &expect)
        };
        let ratio = err(4) / err(8);
        assert!((12.0..=20.0).contains(&ratio), "rk4 ratio {ratio}");
    }

    #[test]
    fn euler_error_shrinks_2x_per_halving() {
        let a = [[0.0, -0.5], [0.5, 0.0]];
        let x0 = gray(8, 8);
        let expect = linear_expected(a, 1.0, 8, 8);
        let err = |steps: usize| {
            let phi = integrate(&LinearVelocity(a), &x0, 1.0, steps, Method::Euler).unwrap();
            max_disp_err(&phi, &expect)
        };
        let ratio = err(16) / err(32);
        assert!((1.7..=2.3).contains(&ratio), "euler ratio {ratio}");
    }

    #[test]
    fn trajectory_single_zero_time() {
        let x0 = gray(4, 4);
        let traj = trajectory(&ConstVelocity(1.0, 0.0), &x0, &[0.0], 8, Method::Rk4).unwrap();
        assert_eq!(traj.times(), &[0.0]);
        assert!(traj.fields()[0].disp().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectory_constant_fractions() {
        let x0 = gray(4, 4);
        let c = (0.5, 0.25);
        let traj = trajectory(
            &ConstVelocity(c.0, c.1),
            &x0,
            &[0.0, 0.5, 1.0],
            8,
            Method::Euler,
        )
        .unwrap();
        assert_eq!(traj.times(), &[0.0, 0.5, 1.0]);
        let (dr, dc) = traj.fields()[1].at(2, 2);
        assert!((dr - 0.25).abs() < 1e-15 && (dc - 0.125).abs() < 1e-15);
        let (dr, dc) = traj.fields()[2].at(2, 2);
        assert!((dr - 0.5).abs() < 1e-15 && (dc - 0.25).abs() < 1e-15);
    }

    #[test]
    fn trajectory_inserts_time_zero() {
        let x0 = gray(4, 4);
        let traj =
            trajectory(&ConstVelocity(0.3, 0.0), &x0, &[-0.5, 0.5], 4, Method::Rk4).unwrap();
        assert_eq!(traj.times(), &[-0.5, 0.0, 0.5]);
        assert!(traj.field_at(0.0).unwrap().disp().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectory_matches_one_shot_bitwise() {
        let a = [[0.02, -0.6], [0.6, 0.02]];
        let x0 = gray(8, 8);
        let traj =
            trajectory(&LinearVelocity(a), &x0, &[0.0, 1.0], 8, Method::Rk4).unwrap();
        let oneshot = integrate(&LinearVelocity(a), &x0, 1.0, 8, Method::Rk4).unwrap();
        assert_eq!(traj.field_at(1.0).unwrap().disp().data(), oneshot.disp().data());
    }

    #[test]
    fn split_solve_matches_one_shot_bitwise() {
        // integrate to 0.5, continue to 1.0 == integrate straight to 1.0
        let a = [[0.0, -0.7], [0.7, 0.0]];
        let x0 = gray(8, 8);
        let vel = LinearVelocity(a);
        let mut tape = Tape::new();
        let xv = tape.constant(x0.to_nchw());
        let half = integrate_on(&mut tape, &vel, xv, 0.5, 4, Method::Rk4).unwrap();
        let full = advance_on(&mut tape, &vel, xv, half, 0.5, 4, Method::Rk4).unwrap();
        let oneshot = integrate_on(&mut tape, &vel, xv, 1.0, 8, Method::Rk4).unwrap();
        assert_eq!(tape.value(full).data(), tape.value(oneshot).data());
    }

    #[test]
    fn unsorted_times_rejected() {
        let x0 = gray(4, 4);
        let err = trajectory(&ZeroVelocity, &x0, &[0.5, 0.2], 4, Method::Rk4).unwrap_err();
        assert!(matches!(err, OdeError::UnsortedTimes));
    }

    #[test]
    fn nan_velocity_aborts_with_step_index() {
        let x0 = gray(4, 4);
        let err = integrate(&ConstVelocity(f64::NAN, 0.0), &x0, 1.0, 3, Method::Euler)
            .unwrap_err();
        match err {
            OdeError::NonFinite { step } => assert_eq!(step, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn invertibility_zero_and_constant() {
        let x0 = gray(8, 8);
        let r = invertibility_residual(&ZeroVelocity, &x0, 8, Method::Rk4).unwrap();
        assert_eq!(r, 0.0);
        // small in-bounds translation: exact inverse up to float noise
        let r = invertibility_residual(&ConstVelocity(0.8, -0.6), &x0, 8, Method::Rk4).unwrap();
        assert!(r < 1e-10, "residual {r}");
    }

    #[test]
    fn invertibility_linear_small_norm() {
        let a = [[0.01, -0.05], [0.05, 0.01]];
        let x0 = gray(12, 12);
        let r = invertibility_residual(&LinearVelocity(a), &x0, 32, Method::Rk4).unwrap();
        assert!(r < 0.05, "residual {r}");
    }
}
