//! Agent dynamics: exact zero-order-hold steps and analytic linearizations.
//!
//! Two state-space models are provided, both with four states:
//!
//! ```text
//! double integrator   s = [x, y, vx, vy]     u = [ax, ay]
//! extended unicycle   s = [X, Y, phi, v]     u = [omega, a]
//! ```
//!
//! Steps integrate the continuous dynamics exactly over one interval `dt`
//! under piecewise-constant controls.  For the unicycle the closed form uses
//! the trigonometric moment integrals
//!
//! ```text
//! IC_k = integral_0^dt  tau^k cos(phi + omega tau) dtau
//! IS_k = integral_0^dt  tau^k sin(phi + omega tau) dtau
//! ```
//!
//! so that `dX = v IC_0 + a IC_1` and `dY = v IS_0 + a IS_1`.  The same
//! moments give every Jacobian entry in closed form (for example
//! `d(dX)/d(omega) = -(v IS_1 + a IS_2)`), which keeps the step and its
//! linearization consistent to machine precision.  Below `|omega * dt| < 1e-6`
//! the moments switch to a truncated power series in `omega * dt`; the series
//! carries enough terms that both branches agree far below 1e-9 at the switch.
//!
//! Headings are not wrapped by the step: trajectories accumulate angle
//! continuously, and wrapping to `(-pi, pi]` happens only when scene data is
//! ingested (see [`crate::scenes::wrap_angle`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Threshold on `|omega * dt|` below which the unicycle moment integrals use
/// the series branch instead of the closed form divided by `omega`.
///
/// The closed forms subtract nearly equal trig values and divide by up to
/// `omega^3`, which costs about six digits near `|omega * dt| ~ 1e-6`.  The
/// series carries terms through `x^11`, so it is exact to machine precision
/// everywhere below this threshold and the two branches agree to ~1e-15 at
/// the switch itself.
pub const OMEGA_SWITCH: f64 = 0.25;

/// Kind of agent in a scene.  The class fixes the state-space model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentClass {
    /// Double integrator on foot: `[x, y, vx, vy]`, acceleration controls.
    Pedestrian,
    /// Dynamically extended unicycle: `[X, Y, phi, v]`, controls `[omega, a]`.
    Vehicle,
    /// Double integrator point mass (synthetic worlds), acceleration controls.
    Particle,
}

impl AgentClass {
    /// State dimension of this class.
    pub fn state_dim(self) -> usize {
        4
    }

    /// Control dimension when an agent of this class is directly actuated.
    pub fn control_dim(self) -> usize {
        2
    }

    /// True when the class follows unicycle dynamics (vs. double integrator).
    pub fn is_unicycle(self) -> bool {
        matches!(self, AgentClass::Vehicle)
    }
}

/// Errors from dynamics evaluation.
#[derive(Debug, Error)]
pub enum DynamicsError {
    /// A state or control entry was NaN or infinite.
    #[error("non-finite {0} input")]
    NonFinite(&'static str),
    /// The step length must be strictly positive.
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    /// A vector had the wrong length.
    #[error("expected {expected}-dim {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// First-order expansion of a one-step map around a nominal point:
/// `step(s, u) ~= a_mat * s + b_mat * u + c_vec`, exact at the nominal.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    /// State Jacobian `d step / d s` at the nominal point (4 x 4).
    pub a_mat: DMatrix<f64>,
    /// Control Jacobian `d step / d u` at the nominal point (4 x 2).
    pub b_mat: DMatrix<f64>,
    /// Affine offset making the expansion exact at the nominal point.
    pub c_vec: DVector<f64>,
    /// Step length the expansion was built for (seconds).
    pub dt: f64,
}

fn check_inputs(
    state: &DVector<f64>,
    control: &DVector<f64>,
    dt: f64,
) -> Result<(), DynamicsError> {
    if state.len() != 4 {
        return Err(DynamicsError::Dimension {
            what: "state",
            expected: 4,
            got: state.len(),
        });
    }
    if control.len() != 2 {
        return Err(DynamicsError::Dimension {
            what: "control",
            expected: 2,
            got: control.len(),
        });
    }
    if !state.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !control.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite("control"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::NonPositiveDt(dt));
    }
    Ok(())
}

/// Exact step of the planar double integrator:
/// positions gain `v dt + a dt^2 / 2`, velocities gain `a dt`.
pub fn double_integrator_step(
    state: &DVector<f64>,
    control: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    check_inputs(state, control, dt)?;
    let (x, y, vx, vy) = (state[0], state[1], state[2], state[3]);
    let (ax, ay) = (control[0], control[1]);
    let h = 0.5 * dt * dt;
    Ok(DVector::from_vec(vec![
        x + vx * dt + ax * h,
        y + vy * dt + ay * h,
        vx + ax * dt,
        vy + ay * dt,
    ]))
}

/// Trigonometric moment integrals `IC_k`, `IS_k` for `k = 0, 1, 2`.
///
/// Exact closed forms divide by powers of `omega`; for `|omega * dt|` below
/// [`OMEGA_SWITCH`] a truncated series in `x = omega * dt` is used instead
/// (terms through `x^4`/`x^5`, truncation error below 1e-26 relative at the
/// switch point).
fn trig_moments(phi: f64, omega: f64, dt: f64) -> ([f64; 3], [f64; 3]) {
    let (s0, c0) = phi.sin_cos();
    if (omega * dt).abs() < OMEGA_SWITCH {
        let x = omega * dt;
        let x2 = x * x;
        let mut ic = [0.0; 3];
        let mut is = [0.0; 3];
        let mut dt_pow = dt; // dt^(k+1)
        for k in 0..3 {
            let kf = k as f64;
            // integral tau^k cos(omega tau) and tau^k sin(omega tau), as
            // series in x = omega dt with the dt^(k+1) factor pulled out:
            //   h_k = sum_m (-1)^m x^(2m)   / ((2m)!   (k + 2m + 1))
            //   g_k = sum_m (-1)^m x^(2m+1) / ((2m+1)! (k + 2m + 2))
            let mut ck = 0.0;
            let mut sk = 0.0;
            let mut even_term = 1.0; // (-1)^m x^(2m) / (2m)!
            for m in 0..6 {
                let mf = m as f64;
                ck += even_term / (kf + 2.0 * mf + 1.0);
                let odd_term = even_term * x / (2.0 * mf + 1.0);
                sk += odd_term / (kf + 2.0 * mf + 2.0);
                even_term *= -x2 / ((2.0 * mf + 1.0) * (2.0 * mf + 2.0));
            }
            ck *= dt_pow;
            sk *= dt_pow;
            // Rotate by the initial heading: cos(phi + w t) = cos phi cos(w t) - ...
            ic[k] = c0 * ck - s0 * sk;
            is[k] = s0 * ck + c0 * sk;
            dt_pow *= dt;
        }
        (ic, is)
    } else {
        let w = omega;
        let phi1 = phi + w * dt;
        let (s1, c1) = phi1.sin_cos();
        let w2 = w * w;
        let w3 = w2 * w;
        let ic0 = (s1 - s0) / w;
        let is0 = (c0 - c1) / w;
        let ic1 = dt * s1 / w + (c1 - c0) / w2;
        let is1 = -dt * c1 / w + (s1 - s0) / w2;
        let ic2 = dt * dt * s1 / w + 2.0 * dt * c1 / w2 - 2.0 * (s1 - s0) / w3;
        let is2 = -dt * dt * c1 / w + 2.0 * dt * s1 / w2 + 2.0 * (c1 - c0) / w3;
        ([ic0, ic1, ic2], [is0, is1, is2])
    }
}

/// Exact zero-order-hold step of the dynamically extended unicycle.
///
/// With constant `omega` and `a` over the interval, heading and speed are
/// affine in time and the position increments are the moment integrals:
/// `dX = v IC_0 + a IC_1`, `dY = v IS_0 + a IS_1`, `phi += omega dt`,
/// `v += a dt`.  The heading is not wrapped.
pub fn unicycle_step(
    state: &DVector<f64>,
    control: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    check_inputs(state, control, dt)?;
    let (x, y, phi, v) = (state[0], state[1], state[2], state[3]);
    let (omega, a) = (control[0], control[1]);
    let (ic, is) = trig_moments(phi, omega, dt);
    Ok(DVector::from_vec(vec![
        x + v * ic[0] + a * ic[1],
        y + v * is[0] + a * is[1],
        phi + omega * dt,
        v + a * dt,
    ]))
}

/// One exact step of the class dynamics.
pub fn step(
    class: AgentClass,
    state: &DVector<f64>,
    control: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    if class.is_unicycle() {
        unicycle_step(state, control, dt)
    } else {
        double_integrator_step(state, control, dt)
    }
}

/// Analytic linearization of the one-step map at a nominal point.
///
/// The returned expansion is exact at the nominal: `c_vec` is computed as
/// `step(nominal) - a_mat * nominal_state - b_mat * nominal_control`.  For the
/// double integrator the map is already affine, so `a_mat`/`b_mat` do not
/// depend on the nominal point and `c_vec` is exactly zero.
pub fn linearize(
    class: AgentClass,
    nominal_state: &DVector<f64>,
    nominal_control: &DVector<f64>,
    dt: f64,
) -> Result<LinearizedStep, DynamicsError> {
    check_inputs(nominal_state, nominal_control, dt)?;
    if !class.is_unicycle() {
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::zeros(4, 2);
        let h = 0.5 * dt * dt;
        b[(0, 0)] = h;
        b[(1, 1)] = h;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        return Ok(LinearizedStep {
            a_mat: a,
            b_mat: b,
            c_vec: DVector::zeros(4),
            dt,
        });
    }

    let phi = nominal_state[2];
    let v = nominal_state[3];
    let (omega, acc) = (nominal_control[0], nominal_control[1]);
    let (ic, is) = trig_moments(phi, omega, dt);

    // Position increments and their derivatives, all in terms of the moments.
    let dx = v * ic[0] + acc * ic[1];
    let dy = v * is[0] + acc * is[1];

    let mut a = DMatrix::identity(4, 4);
    // d(dX)/d(phi) = -dY and d(dY)/d(phi) = dX: the heading only rotates the
    // integrand, so differentiating swaps cos <-> -sin under the integral.
    a[(0, 2)] = -dy;
    a[(0, 3)] = ic[0];
    a[(1, 2)] = dx;
    a[(1, 3)] = is[0];

    let mut b = DMatrix::zeros(4, 2);
    // d/d(omega) pulls one factor of -tau sin / tau cos into the integrand.
    b[(0, 0)] = -(v * is[1] + acc * is[2]);
    b[(1, 0)] = v * ic[1] + acc * ic[2];
    b[(2, 0)] = dt;
    b[(0, 1)] = ic[1];
    b[(1, 1)] = is[1];
    b[(3, 1)] = dt;

    let stepped = unicycle_step(nominal_state, nominal_control, dt)?;
    let c = stepped - &a * nominal_state - &b * nominal_control;
    Ok(LinearizedStep {
        a_mat: a,
        b_mat: b,
        c_vec: c,
        dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v4(a: f64, b: f64, c: f64, d: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b, c, d])
    }

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn double_integrator_constant_acceleration_quarter_second() {
        // One step at [0,0,1,0] with a=[1,0]: x gains dt + dt^2/2 worth.
        let s = double_integrator_step(&v4(0.0, 0.0, 1.0, 0.0), &v2(1.0, 0.0), 0.25).unwrap();
        assert_relative_eq!(s[0], 0.25 + 0.5 * 0.0625, epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(s[2], 1.25, epsilon = 1e-15);
        assert_relative_eq!(s[3], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unicycle_straight_line_when_omega_zero() {
        // omega = 0, a = 0: pure straight-line coasting along the heading.
        let s = unicycle_step(&v4(1.0, 2.0, 0.3, 4.0), &v2(0.0, 0.0), 0.5).unwrap();
        assert_relative_eq!(s[0], 1.0 + 4.0 * 0.5 * 0.3_f64.cos(), epsilon = 1e-14);
        assert_relative_eq!(s[1], 2.0 + 4.0 * 0.5 * 0.3_f64.sin(), epsilon = 1e-14);
        assert_relative_eq!(s[2], 0.3, epsilon = 1e-15);
        assert_relative_eq!(s[3], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn unicycle_heading_accumulates_without_wrapping() {
        // Many steps of strong turning: heading exceeds pi and keeps growing.
        let mut s = v4(0.0, 0.0, 0.0, 1.0);
        for _ in 0..20 {
            s = unicycle_step(&s, &v2(0.7, 0.0), 0.25).unwrap();
        }
        assert_relative_eq!(s[2], 0.7 * 0.25 * 20.0, epsilon = 1e-12);
        assert!(s[2] > std::f64::consts::PI);
    }

    #[test]
    fn series_and_closed_form_branches_agree_at_the_switch() {
        // Evaluate just below and just above the switch threshold; the step
        // must be continuous in omega across the branch change.  The probe
        // offset is tiny enough that the physical difference between the two
        // omegas is ~1e-12, so anything larger is branch disagreement.
        let dt = 0.25;
        let s = v4(1.0, -2.0, 0.9, 11.0);
        let below = OMEGA_SWITCH / dt * (1.0 - 1e-12);
        let above = OMEGA_SWITCH / dt * (1.0 + 1e-12);
        let s_below = unicycle_step(&s, &v2(below, 2.5), dt).unwrap();
        let s_above = unicycle_step(&s, &v2(above, 2.5), dt).unwrap();
        for i in 0..4 {
            assert!(
                (s_below[i] - s_above[i]).abs() < 1e-9,
                "state {i} jumped across the switch: {} vs {}",
                s_below[i],
                s_above[i]
            );
        }
    }

    #[test]
    fn linearization_is_exact_at_the_nominal_point() {
        for class in [AgentClass::Vehicle, AgentClass::Particle] {
            let s = v4(0.5, -0.25, 1.1, 6.0);
            let u = v2(0.4, -1.0);
            let lin = linearize(class, &s, &u, 0.25).unwrap();
            let exact = step(class, &s, &u, 0.25).unwrap();
            let affine = &lin.a_mat * &s + &lin.b_mat * &u + &lin.c_vec;
            assert_relative_eq!(exact, affine, epsilon = 1e-13);
        }
    }

    #[test]
    fn double_integrator_linearization_has_zero_offset() {
        let lin = linearize(
            AgentClass::Pedestrian,
            &v4(3.0, 4.0, -1.0, 2.0),
            &v2(0.7, -0.3),
            0.1,
        )
        .unwrap();
        assert_eq!(lin.c_vec, DVector::zeros(4));
        assert_eq!(lin.a_mat[(0, 2)], 0.1);
        assert_eq!(lin.b_mat[(2, 0)], 0.1);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let bad = v4(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(
            double_integrator_step(&bad, &v2(0.0, 0.0), 0.1),
            Err(DynamicsError::NonFinite(_))
        ));
        assert!(matches!(
            unicycle_step(&v4(0.0, 0.0, 0.0, 1.0), &v2(f64::INFINITY, 0.0), 0.1),
            Err(DynamicsError::NonFinite(_))
        ));
        assert!(matches!(
            unicycle_step(&v4(0.0, 0.0, 0.0, 1.0), &v2(0.0, 0.0), 0.0),
            Err(DynamicsError::NonPositiveDt(_))
        ));
        assert!(matches!(
            linearize(AgentClass::Vehicle, &v4(0.0, 0.0, 0.0, 1.0), &v2(0.0, 0.0), -1.0),
            Err(DynamicsError::NonPositiveDt(_))
        ));
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let s3 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            double_integrator_step(&s3, &v2(0.0, 0.0), 0.1),
            Err(DynamicsError::Dimension { .. })
        ));
    }
}
