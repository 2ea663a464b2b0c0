//! Receding-horizon learning controller.
//!
//! Each step refits the local grade model and the terminal model from the
//! previous trip, solves the finite-horizon problem and applies the first
//! input. Near the end of the previous trip's duration the terminal model is
//! replaced first by the previous trip's stored state at the horizon end and
//! then by pinning the goal at the previous arrival step. Every prediction
//! step at or past the time budget is pinned to the goal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{fit_local_quadratic, GradeCoeffs, ObservationStore};
use crate::memory::{fit_safe_set_model, IterationLog, SafeSetModel, StepDiagnostics, StepStatus};
use crate::ocp::{solve_ocp, GradeModel, OcpOptions, OcpProblem, OcpSolution, OcpStatus, StageCost};
use crate::route::ArrivalTolerance;
use crate::vehicle::{ControlInput, FuelParams, VehicleParams, VehicleState};

/// Numerical settings of the trajectory optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_sqp_iters: usize,
    pub trust_radius: f64,
    pub penalty: f64,
    pub step_tol: f64,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub qp_tol: f64,
    pub proximal: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = OcpOptions::default();
        Self {
            max_sqp_iters: o.max_sqp_iters,
            trust_radius: o.trust_radius,
            penalty: o.penalty,
            step_tol: o.step_tol,
            kkt_tol: o.kkt_tol,
            feas_tol: o.feas_tol,
            qp_tol: o.qp_tol,
            proximal: o.proximal,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> OcpOptions {
        OcpOptions {
            max_sqp_iters: self.max_sqp_iters,
            trust_radius: self.trust_radius,
            penalty: self.penalty,
            step_tol: self.step_tol,
            kkt_tol: self.kkt_tol,
            feas_tol: self.feas_tol,
            qp_tol: self.qp_tol,
            proximal: self.proximal,
            ..OcpOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("trust_radius", self.trust_radius),
            ("penalty", self.penalty),
            ("step_tol", self.step_tol),
            ("kkt_tol", self.kkt_tol),
            ("feas_tol", self.feas_tol),
            ("qp_tol", self.qp_tol),
            ("proximal", self.proximal),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if self.max_sqp_iters == 0 {
            return Err(Error::Config("solver.max_sqp_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Prediction horizon in steps.
    #[serde(rename = "N")]
    pub horizon: usize,
    /// Time budget of one trip in steps.
    #[serde(rename = "N_f")]
    pub time_budget: usize,
    /// Look-ahead distance of the grade and terminal-model fits (m).
    pub lookahead_m: f64,
    /// Refit the local models every this many steps.
    pub refit_every: usize,
    /// Ridge weight of all least-squares fits (scaled basis).
    pub fit_damping: f64,
    /// Earliest prediction step at which the goal may be pinned.
    pub min_arrival_pin: usize,
    /// When the previous trip arrives within this many steps after the
    /// horizon end, the terminal state is pinned to its stored state instead
    /// of the fitted manifold.
    pub exact_terminal_steps: usize,
    /// Largest scaled constraint violation of a minimum-violation plan that
    /// is still applied instead of the fallback tracker.
    pub elastic_accept: f64,
    /// Proportional gain of the fallback tracker (fraction of the speed error removed per step).
    pub fallback_gain: f64,
    /// Deceleration of the fallback stopping ramp (m/s^2).
    pub fallback_decel: f64,
    /// Lowest speed the fallback tracker aims for away from the goal (m/s).
    pub creep_speed: f64,
    pub solver: SolverConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            time_budget: 600,
            lookahead_m: 150.0,
            refit_every: 1,
            fit_damping: 1e-9,
            min_arrival_pin: 3,
            exact_terminal_steps: 10,
            elastic_accept: 2e-3,
            fallback_gain: 0.2,
            fallback_decel: 1.5,
            creep_speed: 1.0,
            solver: SolverConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.horizon > self.time_budget {
            return Err(Error::Config(format!(
                "controller.N must satisfy 1 <= N <= N_f (N = {}, N_f = {})",
                self.horizon, self.time_budget
            )));
        }
        if !(self.lookahead_m > 0.0 && self.lookahead_m.is_finite()) {
            return Err(Error::Config("controller.lookahead_m must be positive".into()));
        }
        if self.refit_every == 0 {
            return Err(Error::Config("controller.refit_every must be at least 1".into()));
        }
        if !(self.fit_damping >= 0.0 && self.fit_damping.is_finite()) {
            return Err(Error::Config("controller.fit_damping must be nonnegative".into()));
        }
        if !(self.elastic_accept >= 0.0 && self.elastic_accept.is_finite()) {
            return Err(Error::Config("controller.elastic_accept must be nonnegative".into()));
        }
        if !(self.fallback_gain > 0.0 && self.fallback_gain <= 1.0) {
            return Err(Error::Config("controller.fallback_gain must lie in (0, 1]".into()));
        }
        if !(self.fallback_decel > 0.0) || !(self.creep_speed >= 0.0) {
            return Err(Error::Config("controller fallback parameters must be positive".into()));
        }
        self.solver.validate()
    }
}

/// What the controller carries from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub model: SafeSetModel,
    pub grade: GradeCoeffs,
    /// Inputs used to warm-start the next solve; `horizon` entries.
    pub warm_start: Vec<ControlInput>,
    pub last_solution: Option<OcpSolution>,
    pub fallback_engaged: bool,
    last_refit: Option<usize>,
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub input: ControlInput,
    pub diagnostics: StepDiagnostics,
}

/// Proportional speed tracker with a stopping ramp toward the goal. Shared
/// by the baseline trip and the fallback path.
pub fn tracking_input(x: &VehicleState, v_target: f64, gain: f64, route_length: f64, decel: f64, p: &VehicleParams) -> ControlInput {
    let ramp = (2.0 * decel * (route_length - x.s).max(0.0)).sqrt();
    let v_ref = v_target.min(ramp);
    ControlInput::from_net(gain * p.mass * (v_ref - x.v) / p.t_s).saturate(p)
}

pub struct LmpcController {
    pub cfg: ControllerConfig,
    pub params: VehicleParams,
    pub fuel: FuelParams,
    pub tolerance: ArrivalTolerance,
    pub route_length: f64,
    prev: IterationLog,
    state: ControllerState,
}

impl LmpcController {
    pub fn new(
        cfg: ControllerConfig,
        params: VehicleParams,
        fuel: FuelParams,
        tolerance: ArrivalTolerance,
        route_length: f64,
        prev: IterationLog,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = fit_safe_set_model(&prev, 0.0, cfg.horizon, cfg.lookahead_m, cfg.fit_damping);
        let state = ControllerState {
            model,
            grade: GradeCoeffs::flat(0.0, cfg.lookahead_m),
            warm_start: previous_inputs(&prev, 0, cfg.horizon),
            last_solution: None,
            fallback_engaged: false,
            last_refit: None,
        };
        Ok(Self {
            cfg,
            params,
            fuel,
            tolerance,
            route_length,
            prev,
            state,
        })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn previous(&self) -> &IterationLog {
        &self.prev
    }

    pub fn goal(&self) -> VehicleState {
        VehicleState::new(self.route_length, 0.0, 0.0)
    }

    /// Refreshes the grade and terminal models for position `s` at time `t`.
    pub fn refit(&mut self, s: f64, t: usize, store: &ObservationStore) {
        let cfg = &self.cfg;
        self.state.grade = fit_local_quadratic(store, s, cfg.lookahead_m, cfg.fit_damping).coeffs;
        self.state.model = fit_safe_set_model(&self.prev, s, t + cfg.horizon, cfg.lookahead_m, cfg.fit_damping);
        self.state.last_refit = Some(t);
    }

    /// Prediction step at which the goal is pinned, if any.
    pub fn arrival_pin(&self, t: usize) -> Option<usize> {
        let n = self.cfg.horizon;
        let deadline = self.cfg.time_budget.saturating_sub(t).max(1);
        let previous = self
            .prev
            .arrival_step
            .saturating_sub(t)
            .max(self.cfg.min_arrival_pin.min(n));
        let k = previous.min(deadline);
        (k <= n).then_some(k)
    }

    pub fn build_ocp(&self, x: &VehicleState, t: usize) -> Result<OcpProblem> {
        let cfg = &self.cfg;
        if t >= cfg.time_budget {
            return Err(Error::ContractViolation(format!(
                "control requested at step {t}, past the budget of {} steps",
                cfg.time_budget
            )));
        }
        let mut prob = OcpProblem::new(
            cfg.horizon,
            *x,
            self.params,
            GradeModel::Coeffs(self.state.grade),
            StageCost::Fuel(self.fuel),
        );
        prob.position_scale = self.route_length.max(1.0);
        let goal = self.goal();
        match self.arrival_pin(t) {
            Some(k) => prob.pins = (k..=cfg.horizon).map(|j| (j, goal)).collect(),
            None if self.prev.arrival_step <= t + cfg.horizon + cfg.exact_terminal_steps => {
                prob.pins = vec![(cfg.horizon, self.prev.states[t + cfg.horizon])];
            }
            None => {
                let m = &self.state.model;
                prob.s_floor = Some(m.s_floor);
                if !m.degenerate {
                    prob.terminal_manifold = Some(m.lambda);
                    prob.terminal_band = m.residual;
                    prob.terminal_cost = m.delta;
                }
            }
        }
        Ok(prob)
    }

    /// Speed-tracking input used when the optimizer fails.
    pub fn fallback_input(&self, x: &VehicleState) -> ControlInput {
        let cfg = &self.cfg;
        let m = &self.state.model;
        let manifold_speed = if m.degenerate { 0.0 } else { m.manifold_velocity(x.s) };
        let ramp = (2.0 * cfg.fallback_decel * (self.route_length - x.s).max(0.0)).sqrt();
        let target = manifold_speed.max(cfg.creep_speed.min(ramp));
        tracking_input(x, target, cfg.fallback_gain, self.route_length, cfg.fallback_decel, &self.params)
    }

    pub fn control_step(&mut self, x: &VehicleState, t: usize, store: &ObservationStore) -> Result<StepOutput> {
        if t >= self.cfg.time_budget {
            return Err(Error::ContractViolation(format!(
                "control requested at step {t}, past the budget of {} steps",
                self.cfg.time_budget
            )));
        }
        if self.tolerance.has_arrived(x, self.route_length) {
            return Ok(StepOutput {
                input: ControlInput::ZERO,
                diagnostics: StepDiagnostics::ARRIVED,
            });
        }
        let due = self.state.last_refit.is_none_or(|r| t >= r + self.cfg.refit_every);
        if due {
            self.refit(x.s, t, store);
        }
        let prob = self.build_ocp(x, t)?;
        let warm = if self.state.fallback_engaged || self.state.last_solution.is_none() {
            previous_inputs(&self.prev, t, self.cfg.horizon)
        } else {
            self.state.warm_start.clone()
        };
        let solved = solve_ocp(&prob, &warm, &self.cfg.solver.options());
        match solved {
            Ok(sol) if sol.status != OcpStatus::Infeasible || sol.max_violation <= self.cfg.elastic_accept => {
                let input = sol.inputs[0];
                let status = match sol.status {
                    OcpStatus::Optimal => StepStatus::Optimal,
                    OcpStatus::MaxIterations => StepStatus::MaxIterations,
                    OcpStatus::Infeasible => StepStatus::Infeasible,
                };
                let diagnostics = StepDiagnostics {
                    status,
                    sqp_iterations: sol.sqp_iterations,
                    kkt_residual: sol.kkt_residual,
                    fallback: false,
                };
                self.state.warm_start = shift(&sol.inputs);
                self.state.last_solution = Some(sol);
                self.state.fallback_engaged = false;
                Ok(StepOutput { input, diagnostics })
            }
            other => {
                let (iters, kkt) = match &other {
                    Ok(sol) => (sol.sqp_iterations, sol.kkt_residual),
                    Err(_) => (0, f64::NAN),
                };
                self.state.fallback_engaged = true;
                self.state.last_solution = None;
                Ok(StepOutput {
                    input: self.fallback_input(x),
                    diagnostics: StepDiagnostics {
                        status: StepStatus::Infeasible,
                        sqp_iterations: iters,
                        kkt_residual: kkt,
                        fallback: true,
                    },
                })
            }
        }
    }
}

/// Inputs of the previous trip from step `t` on, zero past its end.
fn previous_inputs(prev: &IterationLog, t: usize, n: usize) -> Vec<ControlInput> {
    (0..n)
        .map(|k| prev.inputs.get(t + k).copied().unwrap_or(ControlInput::ZERO))
        .collect()
}

/// Drops the applied input and repeats the last one.
fn shift(inputs: &[ControlInput]) -> Vec<ControlInput> {
    let mut out: Vec<ControlInput> = inputs.iter().skip(1).copied().collect();
    if let Some(last) = inputs.last() {
        out.push(*last);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{finalize_iteration, RawIteration};

    /// A straight-line previous trip: constant speed, then stopped at the goal.
    fn previous_trip(n_f: usize, arrival: usize, length: f64) -> IterationLog {
        let v = length / (arrival as f64 * 0.2);
        let states: Vec<VehicleState> = (0..=n_f)
            .map(|k| {
                if k >= arrival {
                    VehicleState::new(length, 0.0, 0.0)
                } else {
                    VehicleState::new(k as f64 * 0.2 * v, v, 200.0)
                }
            })
            .collect();
        let mut costs: Vec<f64> = (0..=n_f).map(|k| if k < arrival { 0.1 } else { 0.0 }).collect();
        costs[n_f] = 0.0;
        let n = states.len();
        finalize_iteration(
            RawIteration {
                iteration: 0,
                arrival_step: Some(arrival),
                states,
                inputs: vec![ControlInput::new(200.0, 0.0); n],
                stage_costs: costs,
                theta_true: vec![0.0; n],
                theta_bar: vec![None; n],
                diagnostics: vec![StepDiagnostics::ARRIVED; n],
            },
            length,
            &ArrivalTolerance::default(),
        )
        .unwrap()
    }

    fn controller(n: usize, n_f: usize) -> LmpcController {
        let p = VehicleParams {
            t_s: 0.2,
            ..VehicleParams::default()
        };
        let cfg = ControllerConfig {
            horizon: n,
            time_budget: n_f,
            ..ControllerConfig::default()
        };
        LmpcController::new(cfg, p, FuelParams::default(), ArrivalTolerance::default(), 200.0, previous_trip(n_f, 100, 200.0))
            .unwrap()
    }

    #[test]
    fn no_pins_far_from_deadline() {
        let c = controller(5, 150);
        let prob = c.build_ocp(&VehicleState::new(10.0, 10.0, 0.0), 10).unwrap();
        assert!(prob.pins.is_empty());
        assert!(prob.s_floor.is_some());
    }

    #[test]
    fn deadline_pins_use_absolute_time() {
        let mut c = controller(5, 150);
        // Previous arrival far away so only the budget matters.
        c.prev.arrival_step = 150;
        let t = 148;
        let prob = c.build_ocp(&VehicleState::new(190.0, 1.0, 0.0), t).unwrap();
        let steps: Vec<usize> = prob.pins.iter().map(|(k, _)| *k).collect();
        assert_eq!(steps, vec![2, 3, 4, 5]);
        assert!(prob.pins.iter().all(|(_, x)| *x == c.goal()));
        assert!(c.build_ocp(&VehicleState::default(), 150).is_err());
    }

    #[test]
    fn arrival_pin_follows_previous_trip() {
        let c = controller(20, 150);
        assert_eq!(c.arrival_pin(79), None);
        assert_eq!(c.arrival_pin(80), Some(20));
        assert_eq!(c.arrival_pin(90), Some(10));
        assert_eq!(c.arrival_pin(99), Some(3));
    }

    #[test]
    fn stored_state_terminal_before_arrival_pin() {
        let c = controller(20, 150);
        let prob = c.build_ocp(&VehicleState::new(120.0, 10.0, 0.0), 75).unwrap();
        assert_eq!(prob.pins, vec![(20, c.prev.states[95])]);
        assert!(prob.s_floor.is_none() && prob.terminal_manifold.is_none());
        let prob = c.build_ocp(&VehicleState::new(100.0, 10.0, 0.0), 69).unwrap();
        assert!(prob.pins.is_empty() && prob.terminal_manifold.is_some());
    }

    #[test]
    fn fallback_sign_split() {
        let c = controller(5, 150);
        let v_ref = c.state.model.manifold_velocity(0.0);
        assert!((v_ref - 10.0).abs() < 1e-6);
        let at = c.fallback_input(&VehicleState::new(0.0, v_ref, 0.0));
        assert!(at.net().abs() < 1e-3);
        let slow = c.fallback_input(&VehicleState::new(0.0, 5.0, 0.0));
        assert!(slow.traction > 0.0 && slow.braking == 0.0);
        let fast = c.fallback_input(&VehicleState::new(0.0, 15.0, 0.0));
        assert!(fast.braking < 0.0 && fast.traction == 0.0);
    }

    #[test]
    fn at_goal_gives_zero_input() {
        let mut c = controller(5, 150);
        let out = c.control_step(&c.goal(), 40, &ObservationStore::default()).unwrap();
        assert_eq!(out.input, ControlInput::ZERO);
        assert_eq!(out.diagnostics.status, StepStatus::Arrived);
    }

    #[test]
    fn applied_input_is_first_planned_input() {
        let mut c = controller(10, 150);
        let x = VehicleState::new(0.0, 10.0, 200.0);
        let out = c.control_step(&x, 0, &ObservationStore::default()).unwrap();
        if let Some(sol) = &c.state.last_solution {
            assert_eq!(out.input, sol.inputs[0]);
            assert!(!out.diagnostics.fallback);
        } else {
            assert!(out.diagnostics.fallback);
        }
    }
}
