//! Stored trips and the terminal ingredients derived from them.
//!
//! Exact forms (the time-sampled safe set and its minimum cost-to-go) are
//! kept for verification on small instances. The controller uses the
//! relaxed forms: a quadratic-in-position manifold for `(v, F)` and a cubic
//! cost-to-go polynomial, both fitted to the previous trip over a
//! look-ahead window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyfit::{eval_poly, eval_poly_derivative, fit_polynomial};
use crate::route::ArrivalTolerance;
use crate::vehicle::{ControlInput, VehicleParams, VehicleState};

/// How the controller produced the input at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Baseline,
    Optimal,
    MaxIterations,
    Infeasible,
    /// Vehicle at the goal; zero input.
    Arrived,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Baseline => "baseline",
            StepStatus::Optimal => "optimal",
            StepStatus::MaxIterations => "max_iterations",
            StepStatus::Infeasible => "infeasible",
            StepStatus::Arrived => "arrived",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "baseline" => StepStatus::Baseline,
            "optimal" => StepStatus::Optimal,
            "max_iterations" => StepStatus::MaxIterations,
            "infeasible" => StepStatus::Infeasible,
            "arrived" => StepStatus::Arrived,
            _ => return None,
        })
    }
}

/// Per-step controller diagnostics stored alongside the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub status: StepStatus,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    pub fallback: bool,
}

impl StepDiagnostics {
    pub const ARRIVED: StepDiagnostics = StepDiagnostics {
        status: StepStatus::Arrived,
        sqp_iterations: 0,
        kkt_residual: 0.0,
        fallback: false,
    };
}

/// A completed trip before cost-to-go accounting.
///
/// All per-step arrays have `horizon + 1` entries. Entries after arrival
/// hold the goal state with zero input and zero stage cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RawIteration {
    pub iteration: usize,
    pub arrival_step: Option<usize>,
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub stage_costs: Vec<f64>,
    pub theta_true: Vec<f64>,
    pub theta_bar: Vec<Option<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    /// Time budget N_f; the arrays cover steps `0..=horizon`.
    pub horizon: usize,
    pub arrival_step: usize,
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub stage_costs: Vec<f64>,
    pub theta_true: Vec<f64>,
    pub theta_bar: Vec<Option<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Suffix sums of the stage costs: `J_k = sum_{i >= k} h_i`.
    pub cost_to_go: Vec<f64>,
}

impl IterationLog {
    pub fn total_cost(&self) -> f64 {
        self.cost_to_go[0]
    }

    pub fn fallback_steps(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.fallback).count()
    }

    /// Mean SQP iterations over the steps where the optimizer ran.
    pub fn mean_solver_iterations(&self) -> f64 {
        let solved: Vec<usize> = self
            .diagnostics
            .iter()
            .filter(|d| !matches!(d.status, StepStatus::Baseline | StepStatus::Arrived))
            .map(|d| d.sqp_iterations)
            .collect();
        if solved.is_empty() {
            0.0
        } else {
            solved.iter().sum::<usize>() as f64 / solved.len() as f64
        }
    }

    /// Step indices up to arrival whose position lies in `[lo, hi]`. The
    /// padding after arrival repeats the goal and would dominate a fit.
    fn window(&self, lo: f64, hi: f64) -> impl Iterator<Item = usize> + '_ {
        self.states[..=self.arrival_step]
            .iter()
            .enumerate()
            .filter(move |(_, x)| x.s >= lo && x.s <= hi)
            .map(|(k, _)| k)
    }
}

/// Suffix sums of `stage_costs`.
pub fn suffix_costs(stage_costs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; stage_costs.len()];
    let mut acc = 0.0;
    for (k, h) in stage_costs.iter().enumerate().rev() {
        acc += h;
        out[k] = acc;
    }
    out
}

/// Computes the cost-to-go of a finished trip and checks the log invariants.
pub fn finalize_iteration(raw: RawIteration, route_length: f64, tol: &ArrivalTolerance) -> Result<IterationLog> {
    let fail = |reason: String| Error::IterationFailed {
        iteration: raw.iteration,
        reason,
    };
    let n = raw.states.len();
    if n == 0 {
        return Err(fail("empty trajectory".into()));
    }
    let horizon = n - 1;
    for (name, len) in [
        ("inputs", raw.inputs.len()),
        ("stage costs", raw.stage_costs.len()),
        ("true grade", raw.theta_true.len()),
        ("grade observations", raw.theta_bar.len()),
        ("diagnostics", raw.diagnostics.len()),
    ] {
        if len != n {
            return Err(fail(format!("{name} has {len} entries, expected {n}")));
        }
    }
    let Some(arrival_step) = raw.arrival_step else {
        return Err(fail(format!("vehicle did not arrive within {horizon} steps")));
    };
    if arrival_step > horizon {
        return Err(fail(format!("arrival step {arrival_step} exceeds budget {horizon}")));
    }
    if !tol.has_arrived(&raw.states[arrival_step], route_length) {
        return Err(fail(format!(
            "state at arrival step {arrival_step} is outside the goal tolerance: {:?}",
            raw.states[arrival_step]
        )));
    }
    if raw.stage_costs.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
        return Err(fail("stage costs must be finite and nonnegative".into()));
    }
    if raw.stage_costs[horizon] != 0.0 {
        return Err(fail("stage cost at the final step must be zero".into()));
    }
    let cost_to_go = suffix_costs(&raw.stage_costs);
    Ok(IterationLog {
        iteration: raw.iteration,
        horizon,
        arrival_step,
        states: raw.states,
        inputs: raw.inputs,
        stage_costs: raw.stage_costs,
        theta_true: raw.theta_true,
        theta_bar: raw.theta_bar,
        diagnostics: raw.diagnostics,
        cost_to_go,
    })
}

/// All finalized trips, in order.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    logs: Vec<IterationLog>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, log: IterationLog) {
        self.logs.push(log);
    }

    pub fn logs(&self) -> &[IterationLog] {
        &self.logs
    }

    pub fn last(&self) -> Option<&IterationLog> {
        self.logs.last()
    }

    pub fn exact_safe_set(&self) -> ExactSafeSet {
        ExactSafeSet::from_logs(&self.logs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeSetEntry {
    pub state: VehicleState,
    pub iteration: usize,
    pub step: usize,
    pub cost_to_go: f64,
}

/// Pooled states of all stored trips, tagged by trip and time step.
#[derive(Debug, Clone, Default)]
pub struct ExactSafeSet {
    entries: Vec<SafeSetEntry>,
    horizon: usize,
}

/// Matching tolerance for exact membership. Stored states are produced by
/// the simulator itself, so matches are bit-stable in practice.
pub const EXACT_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactQuery {
    pub member: bool,
    /// Minimum stored cost-to-go, `f64::INFINITY` outside the set.
    pub q: f64,
}

impl ExactSafeSet {
    pub fn from_logs(logs: &[IterationLog]) -> Self {
        let mut entries = Vec::new();
        let mut horizon = 0;
        for log in logs {
            horizon = horizon.max(log.horizon);
            for (k, x) in log.states.iter().enumerate() {
                entries.push(SafeSetEntry {
                    state: *x,
                    iteration: log.iteration,
                    step: k,
                    cost_to_go: log.cost_to_go[k],
                });
            }
        }
        Self { entries, horizon }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// States visited at step `t` or later.
    pub fn members(&self, t: usize) -> impl Iterator<Item = &SafeSetEntry> {
        self.entries.iter().filter(move |e| e.step >= t)
    }

    pub fn query(&self, x: &VehicleState, t: usize) -> ExactQuery {
        exact_ss_query(self, x, t)
    }
}

fn same_state(a: &VehicleState, b: &VehicleState) -> bool {
    (a.s - b.s).abs() <= EXACT_MATCH_TOL
        && (a.v - b.v).abs() <= EXACT_MATCH_TOL
        && (a.force - b.force).abs() <= EXACT_MATCH_TOL
}

/// Membership in the time-sampled safe set at time `t` and the minimum
/// cost-to-go over all stored occurrences of `x` at steps `>= t`.
pub fn exact_ss_query(ess: &ExactSafeSet, x: &VehicleState, t: usize) -> ExactQuery {
    let q = ess
        .members(t)
        .filter(|e| same_state(&e.state, x))
        .map(|e| e.cost_to_go)
        .fold(f64::INFINITY, f64::min);
    ExactQuery {
        member: q.is_finite(),
        q,
    }
}

/// Relaxed terminal model fitted to the previous trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeSetModel {
    /// Rows map `[1, s, s^2]` to velocity and force.
    pub lambda: [[f64; 3]; 2],
    /// Cost-to-go polynomial coefficients of `[1, s, s^2, s^3]`.
    pub delta: [f64; 4],
    /// Lower bound on the terminal position: the previous trip's position
    /// at the terminal time.
    pub s_floor: f64,
    /// Largest velocity and force residuals of the manifold fit over its window.
    pub residual: [f64; 2],
    pub fit_lo: f64,
    pub fit_hi: f64,
    /// True when the window held no data and the manifold is pinned to the goal.
    pub degenerate: bool,
}

impl SafeSetModel {
    pub fn manifold_velocity(&self, s: f64) -> f64 {
        eval_poly(&self.lambda[0], s)
    }

    pub fn manifold_force(&self, s: f64) -> f64 {
        eval_poly(&self.lambda[1], s)
    }

    pub fn cost(&self, s: f64) -> f64 {
        eval_poly(&self.delta, s)
    }

    pub fn cost_slope(&self, s: f64) -> f64 {
        eval_poly_derivative(&self.delta, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldFit {
    pub lambda: [[f64; 3]; 2],
    pub s_floor: f64,
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub samples: usize,
    pub degenerate: bool,
    /// Largest residuals of the velocity and force rows.
    pub max_residual: [f64; 2],
    pub optimality: [f64; 2],
}

/// Fits `(v, F) ~ Lambda [1, s, s^2]` to the previous trip's states with
/// position in `[s_now, s_now + lookahead]`.
///
/// `s_floor` is the previous trip's position at `min(terminal_step, arrival)`.
pub fn fit_safe_set_manifold(
    prev: &IterationLog,
    s_now: f64,
    terminal_step: usize,
    lookahead: f64,
    damping: f64,
) -> ManifoldFit {
    let fit_hi = s_now + lookahead;
    let s_floor = prev.states[terminal_step.min(prev.arrival_step)].s;
    let idx: Vec<usize> = prev.window(s_now, fit_hi).collect();
    if idx.is_empty() {
        return ManifoldFit {
            lambda: [[0.0; 3]; 2],
            s_floor,
            fit_lo: s_now,
            fit_hi,
            samples: 0,
            degenerate: true,
            max_residual: [0.0; 2],
            optimality: [0.0; 2],
        };
    }
    let xs: Vec<f64> = idx.iter().map(|&k| prev.states[k].s).collect();
    let vs: Vec<f64> = idx.iter().map(|&k| prev.states[k].v).collect();
    let fs: Vec<f64> = idx.iter().map(|&k| prev.states[k].force).collect();
    let fv = fit_polynomial(&xs, &vs, 2, s_now, lookahead, damping).expect("non-empty");
    let ff = fit_polynomial(&xs, &fs, 2, s_now, lookahead, damping).expect("non-empty");
    ManifoldFit {
        lambda: [
            [fv.raw[0], fv.raw[1], fv.raw[2]],
            [ff.raw[0], ff.raw[1], ff.raw[2]],
        ],
        s_floor,
        fit_lo: s_now,
        fit_hi,
        samples: idx.len(),
        degenerate: false,
        max_residual: [fv.max_residual, ff.max_residual],
        optimality: [fv.optimality, ff.optimality],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostFit {
    pub delta: [f64; 4],
    pub samples: usize,
    pub max_residual: f64,
    pub optimality: f64,
}

/// Fits `J ~ [1, s, s^2, s^3] Delta` over the same look-ahead window.
/// An empty window yields zero cost-to-go.
pub fn fit_cost_to_go(prev: &IterationLog, s_now: f64, lookahead: f64, damping: f64) -> CostFit {
    let idx: Vec<usize> = prev.window(s_now, s_now + lookahead).collect();
    if idx.is_empty() {
        return CostFit {
            delta: [0.0; 4],
            samples: 0,
            max_residual: 0.0,
            optimality: 0.0,
        };
    }
    let xs: Vec<f64> = idx.iter().map(|&k| prev.states[k].s).collect();
    let js: Vec<f64> = idx.iter().map(|&k| prev.cost_to_go[k]).collect();
    // The cost-to-go is of order 10^2 while positions are scaled to O(1);
    // damping is relative to the data magnitude so it stays negligible.
    let fit = fit_polynomial(&xs, &js, 3, s_now, lookahead, damping).expect("non-empty");
    CostFit {
        delta: [fit.raw[0], fit.raw[1], fit.raw[2], fit.raw[3]],
        samples: idx.len(),
        max_residual: fit.max_residual,
        optimality: fit.optimality,
    }
}

/// Refits the complete terminal model for the current position.
pub fn fit_safe_set_model(
    prev: &IterationLog,
    s_now: f64,
    terminal_step: usize,
    lookahead: f64,
    damping: f64,
) -> SafeSetModel {
    let m = fit_safe_set_manifold(prev, s_now, terminal_step, lookahead, damping);
    let c = fit_cost_to_go(prev, s_now, lookahead, damping);
    SafeSetModel {
        lambda: m.lambda,
        delta: c.delta,
        s_floor: m.s_floor,
        residual: m.max_residual,
        fit_lo: m.fit_lo,
        fit_hi: m.fit_hi,
        degenerate: m.degenerate,
    }
}

/// Tolerance for manifold membership in normalized units (v / v_max, F / F_max).
pub const MANIFOLD_TOL: f64 = 1e-3;

/// Relaxed terminal cost: `C(s)` within the fit band of the manifold above
/// `s_floor`, infinity elsewhere.
pub fn q_hat(x: &VehicleState, model: &SafeSetModel, p: &VehicleParams) -> f64 {
    if x.s < model.s_floor {
        return f64::INFINITY;
    }
    let dv = ((x.v - model.manifold_velocity(x.s)).abs() - model.residual[0]) / p.v_max;
    let df = ((x.force - model.manifold_force(x.s)).abs() - model.residual[1]) / p.f_max;
    if dv > MANIFOLD_TOL || df > MANIFOLD_TOL {
        return f64::INFINITY;
    }
    model.cost(x.s)
}
