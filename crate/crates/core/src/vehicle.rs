//! Longitudinal vehicle model: first-order force actuation, road resistance,
//! the polynomial fuel estimate used as stage cost, and the local
//! expansions consumed by the trajectory optimizer.

use nalgebra::{Matrix3, Matrix3x2, Matrix5, SymmetricEigen, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Road pitch as a function of route position.
pub trait RoadGrade {
    /// Pitch angle (rad) at position `s`.
    fn grade(&self, s: f64) -> f64;
    /// d(grade)/ds at `s`, used for the chain rule through the grade model.
    fn grade_slope(&self, s: f64) -> f64;
}

/// A road with constant pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantGrade(pub f64);

impl RoadGrade for ConstantGrade {
    fn grade(&self, _s: f64) -> f64 {
        self.0
    }

    fn grade_slope(&self, _s: f64) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position along the route (m).
    pub s: f64,
    /// Velocity (m/s).
    pub v: f64,
    /// Realized wheel force (N).
    pub force: f64,
}

impl VehicleState {
    pub const fn new(s: f64, v: f64, force: f64) -> Self {
        Self { s, v, force }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.s, self.v, self.force)
    }

    pub fn from_vector(x: &Vector3<f64>) -> Self {
        Self::new(x[0], x[1], x[2])
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite() && self.v.is_finite() && self.force.is_finite()
    }
}

/// Desired wheel-level traction (>= 0) and braking (<= 0) forces.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub traction: f64,
    pub braking: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput {
        traction: 0.0,
        braking: 0.0,
    };

    pub const fn new(traction: f64, braking: f64) -> Self {
        Self { traction, braking }
    }

    /// Splits a signed net force command into its traction and braking parts.
    pub fn from_net(net: f64) -> Self {
        if net >= 0.0 {
            Self::new(net, 0.0)
        } else {
            Self::new(0.0, net)
        }
    }

    pub fn net(&self) -> f64 {
        self.traction + self.braking
    }

    /// Projection onto the admissible input box.
    pub fn saturate(&self, p: &VehicleParams) -> Self {
        Self {
            traction: self.traction.clamp(0.0, p.f_max),
            braking: self.braking.clamp(p.f_min, 0.0),
        }
    }

    pub fn is_admissible(&self, p: &VehicleParams) -> bool {
        (0.0..=p.f_max).contains(&self.traction) && (p.f_min..=0.0).contains(&self.braking)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Mass (kg).
    pub mass: f64,
    /// Force actuation time constant (s).
    pub tau: f64,
    /// Sampling time (s).
    pub t_s: f64,
    pub g: f64,
    /// Rolling resistance coefficient.
    pub c_r: f64,
    /// Air density (kg/m^3).
    pub rho: f64,
    /// Frontal area (m^2).
    pub area: f64,
    /// Drag coefficient.
    pub c_d: f64,
    pub v_max: f64,
    pub f_max: f64,
    pub f_min: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            tau: 0.5,
            t_s: 0.1,
            g: 9.81,
            c_r: 0.01,
            rho: 1.225,
            area: 2.5,
            c_d: 0.32,
            v_max: 20.0,
            f_max: 4000.0,
            f_min: -6000.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.mass, self.tau, self.t_s, self.g, self.c_r, self.rho, self.area, self.c_d,
            self.v_max, self.f_max, self.f_min,
        ];
        if fields.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("vehicle parameters must be finite"));
        }
        if self.mass <= 0.0 || self.tau <= 0.0 || self.v_max <= 0.0 {
            return Err(Error::invalid("mass, tau and v_max must be positive"));
        }
        if !(self.t_s > 0.0 && self.t_s <= self.tau) {
            return Err(Error::invalid(format!(
                "sampling time must satisfy 0 < t_s <= tau (t_s = {}, tau = {})",
                self.t_s, self.tau
            )));
        }
        if !(self.f_min < 0.0 && self.f_max > 0.0) {
            return Err(Error::invalid("force bounds must satisfy f_min < 0 < f_max"));
        }
        Ok(())
    }

    /// Coefficient of the previous force in the actuation filter, 1 - t_s/tau.
    pub fn force_decay(&self) -> f64 {
        1.0 - self.t_s / self.tau
    }

    fn drag_coefficient(&self) -> f64 {
        0.5 * self.rho * self.area * self.c_d
    }
}

/// Coefficients of the fuel polynomial. All must be nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuelParams {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for FuelParams {
    fn default() -> Self {
        Self {
            b0: 0.005,
            b1: 1e-4,
            b2: 1e-5,
            c0: 2e-4,
            c1: 5e-5,
            c2: 1e-6,
        }
    }
}

impl FuelParams {
    pub fn validate(&self) -> Result<()> {
        let c = [self.b0, self.b1, self.b2, self.c0, self.c1, self.c2];
        if c.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid("fuel coefficients must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            b0: self.b0 * alpha,
            b1: self.b1 * alpha,
            b2: self.b2 * alpha,
            c0: self.c0 * alpha,
            c1: self.c1 * alpha,
            c2: self.c2 * alpha,
        }
    }
}

/// Signed resistance force entering the velocity update. Drag, rolling
/// resistance and uphill grade all come out negative.
pub fn resistance_force(v: f64, theta: f64, p: &VehicleParams) -> Result<f64> {
    if !v.is_finite() || !theta.is_finite() {
        return Err(Error::invalid(format!(
            "resistance force needs finite inputs (v = {v}, theta = {theta})"
        )));
    }
    if v < 0.0 {
        return Err(Error::invalid(format!("velocity must be nonnegative, got {v}")));
    }
    if theta.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::invalid(format!("grade angle out of range: {theta}")));
    }
    Ok(resistance(v, theta, p))
}

/// Unchecked resistance; the optimizer may probe slightly negative speeds.
pub(crate) fn resistance(v: f64, theta: f64, p: &VehicleParams) -> f64 {
    let mg = p.mass * p.g;
    -(mg * p.c_r * theta.cos() + mg * theta.sin() + p.drag_coefficient() * v * v)
}

/// The smooth discrete-time model, without the standstill clamp.
pub fn model_step(x: &VehicleState, u: &ControlInput, theta: f64, p: &VehicleParams) -> VehicleState {
    let f_r = resistance(x.v, theta, p);
    VehicleState {
        s: x.s + p.t_s * x.v,
        v: x.v + p.t_s / p.mass * (x.force + f_r),
        force: p.force_decay() * x.force + p.t_s / p.tau * u.net(),
    }
}

/// One plant step. The velocity is clamped at zero: a stopped vehicle is
/// held by its brakes and does not roll backward.
pub fn step_dynamics(x: &VehicleState, u: &ControlInput, theta: f64, p: &VehicleParams) -> VehicleState {
    let mut next = model_step(x, u, theta, p);
    if next.v < 0.0 {
        next.v = 0.0;
    }
    next
}

/// Fuel consumed during one step; the stage cost of the optimal control problem.
pub fn fuel_rate(v: f64, traction: f64, fp: &FuelParams) -> Result<f64> {
    if !(v >= 0.0) || !(traction >= 0.0) {
        return Err(Error::invalid(format!(
            "fuel rate needs v >= 0 and F_t >= 0 (v = {v}, F_t = {traction})"
        )));
    }
    Ok(fuel(v, traction, fp))
}

pub(crate) fn fuel(v: f64, traction: f64, fp: &FuelParams) -> f64 {
    let cruise = v * (fp.b0 + v * (fp.b1 + v * fp.b2));
    let accel = traction * (fp.c0 + v * (fp.c1 + v * fp.c2));
    cruise + accel
}

/// Affine model x' ~ A x + B u + c around a reference state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: Vector3<f64>,
}

impl LinearizedStep {
    pub fn apply(&self, x: &VehicleState, u: &ControlInput) -> VehicleState {
        let next = self.a * x.to_vector()
            + self.b * nalgebra::Vector2::new(u.traction, u.braking)
            + self.c;
        VehicleState::from_vector(&next)
    }
}

/// Jacobians of the smooth model at `xbar`, with the grade evaluated through
/// `grade` so that d/ds picks up the slope of the grade model.
pub fn linearize_dynamics(xbar: &VehicleState, grade: &impl RoadGrade, p: &VehicleParams) -> LinearizedStep {
    let theta = grade.grade(xbar.s);
    let dtheta = grade.grade_slope(xbar.s);
    let dv_ds = -p.t_s * p.g * (theta.cos() - p.c_r * theta.sin()) * dtheta;
    let dv_dv = 1.0 - p.t_s / p.mass * 2.0 * p.drag_coefficient() * xbar.v;
    let dv_df = p.t_s / p.mass;
    let a = Matrix3::new(
        1.0, p.t_s, 0.0, //
        dv_ds, dv_dv, dv_df, //
        0.0, 0.0, p.force_decay(),
    );
    let k = p.t_s / p.tau;
    let b = Matrix3x2::new(0.0, 0.0, 0.0, 0.0, k, k);
    let f0 = model_step(xbar, &ControlInput::ZERO, theta, p).to_vector();
    let c = f0 - a * xbar.to_vector();
    LinearizedStep { a, b, c }
}

/// Second-order expansion of the stage cost over stacked (s, v, F, F_t, F_b).
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    /// Positive semidefinite approximation of the Hessian.
    pub hessian: Matrix5<f64>,
    pub gradient: Vector5<f64>,
    pub value: f64,
}

pub fn quadraticize_cost(xbar: &VehicleState, ubar: &ControlInput, fp: &FuelParams) -> CostExpansion {
    let v = xbar.v;
    let ft = ubar.traction;
    let value = fuel(v, ft, fp);
    let accel_factor = fp.c0 + v * (fp.c1 + v * fp.c2);
    let d_v = fp.b0 + v * (2.0 * fp.b1 + 3.0 * fp.b2 * v) + ft * (fp.c1 + 2.0 * fp.c2 * v);
    let gradient = Vector5::new(0.0, d_v, 0.0, accel_factor, 0.0);
    let mut h = Matrix5::zeros();
    h[(1, 1)] = 2.0 * fp.b1 + 6.0 * fp.b2 * v + 2.0 * fp.c2 * ft;
    h[(1, 3)] = fp.c1 + 2.0 * fp.c2 * v;
    h[(3, 1)] = h[(1, 3)];
    CostExpansion {
        hessian: project_psd(h),
        gradient,
        value,
    }
}

/// Clamps negative eigenvalues of a symmetric matrix to zero.
pub(crate) fn project_psd(h: Matrix5<f64>) -> Matrix5<f64> {
    let eig = SymmetricEigen::new(h);
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = eig.eigenvectors;
    let out = q * Matrix5::from_diagonal(&clamped) * q.transpose();
    (out + out.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn no_roll() -> VehicleParams {
        VehicleParams {
            c_r: 0.0,
            ..VehicleParams::default()
        }
    }

    #[test]
    fn resistance_vanishes_on_flat_standstill_without_rolling() {
        assert_eq!(resistance_force(0.0, 0.0, &no_roll()).unwrap(), 0.0);
    }

    #[test]
    fn rolling_resistance_at_standstill() {
        let p = VehicleParams::default();
        // m g c_r = 1500 * 9.81 * 0.01
        let expected = -(1500.0 * 9.81 * 0.01);
        assert_relative_eq!(resistance_force(0.0, 0.0, &p).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, -147.15, epsilon = 1e-9);
    }

    #[test]
    fn grade_term_is_odd() {
        let p = no_roll();
        let up = resistance_force(0.0, 0.04, &p).unwrap();
        let down = resistance_force(0.0, -0.04, &p).unwrap();
        assert_eq!(up, -down);
        assert!(up < 0.0);
    }

    #[test]
    fn resistance_rejects_bad_input() {
        let p = VehicleParams::default();
        assert!(resistance_force(f64::NAN, 0.0, &p).is_err());
        assert!(resistance_force(1.0, f64::INFINITY, &p).is_err());
        assert!(resistance_force(-1.0, 0.0, &p).is_err());
    }

    #[test]
    fn standstill_is_a_fixed_point_without_rolling() {
        let x = step_dynamics(&VehicleState::default(), &ControlInput::ZERO, 0.0, &no_roll());
        assert_eq!(x, VehicleState::default());
    }

    #[test]
    fn position_row_is_exact() {
        let p = VehicleParams::default();
        for theta in [-0.1, 0.0, 0.07] {
            let x = step_dynamics(&VehicleState::new(0.0, 10.0, 0.0), &ControlInput::ZERO, theta, &p);
            assert_eq!(x.s, 1.0);
        }
    }

    #[test]
    fn force_filter_row() {
        let p = VehicleParams::default();
        let x = step_dynamics(&VehicleState::default(), &ControlInput::new(1000.0, 0.0), 0.0, &p);
        // (t_s / tau) * 1000 = 0.2 * 1000
        assert_relative_eq!(x.force, 200.0, epsilon = 1e-9);
    }

    #[test]
    fn plant_clamps_backward_roll() {
        let p = VehicleParams::default();
        let x = step_dynamics(&VehicleState::default(), &ControlInput::ZERO, 0.05, &p);
        assert_eq!(x.v, 0.0);
        assert!(model_step(&VehicleState::default(), &ControlInput::ZERO, 0.05, &p).v < 0.0);
    }

    #[test]
    fn fuel_rate_values() {
        let fp = FuelParams::default();
        assert_eq!(fuel_rate(0.0, 0.0, &fp).unwrap(), 0.0);
        let cruise = fp.b0 * 10.0 + fp.b1 * 100.0 + fp.b2 * 1000.0;
        assert_relative_eq!(fuel_rate(10.0, 0.0, &fp).unwrap(), cruise, max_relative = 1e-14);
        assert!(fuel_rate(-1.0, 0.0, &fp).is_err());
        assert!(fuel_rate(1.0, -1.0, &fp).is_err());
    }

    #[test]
    fn fuel_rate_matches_direct_polynomial() {
        let fp = FuelParams::default();
        let (v, ft): (f64, f64) = (5.0, 500.0);
        let direct = fp.b0 * v + fp.b1 * v.powi(2) + fp.b2 * v.powi(3)
            + ft * fp.c0
            + ft * fp.c1 * v
            + ft * fp.c2 * v.powi(2);
        assert_relative_eq!(fuel_rate(v, ft, &fp).unwrap(), direct, max_relative = 1e-14);
    }

    #[test]
    fn linearization_structure() {
        let p = VehicleParams::default();
        let lin = linearize_dynamics(&VehicleState::new(3.0, 0.0, 0.0), &ConstantGrade(0.0), &p);
        assert_relative_eq!(lin.a[(2, 2)], 1.0 - p.t_s / p.tau);
        assert_eq!(lin.b.column(0), lin.b.column(1));
    }

    #[test]
    fn linearization_is_exact_at_reference() {
        let p = VehicleParams::default();
        let grade = ConstantGrade(0.03);
        let x = VehicleState::new(12.0, 7.0, 350.0);
        let u = ControlInput::new(800.0, -50.0);
        let lin = linearize_dynamics(&x, &grade, &p);
        let exact = model_step(&x, &u, 0.03, &p);
        let affine = lin.apply(&x, &u);
        assert_relative_eq!(exact.s, affine.s, max_relative = 1e-13);
        assert_relative_eq!(exact.v, affine.v, max_relative = 1e-13);
        assert_relative_eq!(exact.force, affine.force, max_relative = 1e-13);
    }

    #[test]
    fn cost_gradient_at_origin() {
        let fp = FuelParams::default();
        let e = quadraticize_cost(&VehicleState::default(), &ControlInput::ZERO, &fp);
        assert_eq!(e.gradient[3], fp.c0);
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn projected_hessian_is_psd() {
        let fp = FuelParams::default();
        let e = quadraticize_cost(&VehicleState::new(0.0, 12.0, 0.0), &ControlInput::new(900.0, 0.0), &fp);
        let min = SymmetricEigen::new(e.hessian).eigenvalues.min();
        assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn saturation() {
        let p = VehicleParams::default();
        let u = ControlInput::new(2.0 * p.f_max, 1.0).saturate(&p);
        assert_eq!(u, ControlInput::new(p.f_max, 0.0));
        let ok = ControlInput::new(100.0, -20.0);
        assert_eq!(ok.saturate(&p), ok);
    }

    #[test]
    fn params_validation() {
        assert!(VehicleParams::default().validate().is_ok());
        let bad = VehicleParams {
            t_s: 1.0,
            ..VehicleParams::default()
        };
        assert!(bad.validate().is_err());
        let bad_fuel = FuelParams {
            c1: -1.0,
            ..FuelParams::default()
        };
        assert!(bad_fuel.validate().is_err());
    }
}
