//! Finite-horizon trajectory optimizer: trust-region SQP over convex QPs.
//!
//! The decision variables are the inputs, scaled by `F_max`; states are
//! obtained by simulating the smooth model, so predicted trajectories are
//! always dynamically consistent. State bounds, pinned states and terminal
//! conditions enter each QP as linearized rows relaxed by a single elastic
//! slack, which keeps every subproblem feasible.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, Matrix5, Vector5};

use crate::error::{Error, Result};
use crate::grade::GradeCoeffs;
use crate::polyfit::{eval_poly, eval_poly_derivative};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::route::RouteProfile;
use crate::vehicle::{
    linearize_dynamics, model_step, quadraticize_cost, ControlInput, CostExpansion, FuelParams, RoadGrade,
    VehicleParams, VehicleState,
};

/// Grade seen by the prediction model.
#[derive(Debug, Clone, PartialEq)]
pub enum GradeModel {
    Constant(f64),
    Coeffs(GradeCoeffs),
    Route(RouteProfile),
}

impl RoadGrade for GradeModel {
    fn grade(&self, s: f64) -> f64 {
        match self {
            GradeModel::Constant(t) => *t,
            GradeModel::Coeffs(c) => c.grade(s),
            GradeModel::Route(r) => r.grade(s),
        }
    }

    fn grade_slope(&self, s: f64) -> f64 {
        match self {
            GradeModel::Constant(_) => 0.0,
            GradeModel::Coeffs(c) => c.grade_slope(s),
            GradeModel::Route(r) => r.grade_slope(s),
        }
    }
}

/// `w_v (v - v_ref)^2 + w_t F_t^2 + w_b F_b^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCost {
    pub v_ref: f64,
    pub w_v: f64,
    pub w_traction: f64,
    pub w_braking: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageCost {
    Fuel(FuelParams),
    Quadratic(QuadraticCost),
}

impl StageCost {
    pub fn value(&self, x: &VehicleState, u: &ControlInput) -> f64 {
        match self {
            StageCost::Fuel(fp) => crate::vehicle::fuel(x.v.max(0.0), u.traction.max(0.0), fp),
            StageCost::Quadratic(q) => {
                q.w_v * (x.v - q.v_ref).powi(2) + q.w_traction * u.traction.powi(2) + q.w_braking * u.braking.powi(2)
            }
        }
    }

    fn expand(&self, x: &VehicleState, u: &ControlInput) -> CostExpansion {
        match self {
            StageCost::Fuel(fp) => {
                let xc = VehicleState { v: x.v.max(0.0), ..*x };
                let uc = ControlInput::new(u.traction.max(0.0), u.braking);
                // Keep only the velocity curvature. Clamping the indefinite
                // (v, F_t) block invents curvature along F_t, which the true
                // cost (linear in F_t) does not have, and stalls the SQP.
                let mut e = quadraticize_cost(&xc, &uc, fp);
                let hvv = 2.0 * fp.b1 + 6.0 * fp.b2 * xc.v + 2.0 * fp.c2 * uc.traction;
                e.hessian = Matrix5::zeros();
                e.hessian[(1, 1)] = hvv.max(0.0);
                e.value = self.value(x, u);
                e
            }
            StageCost::Quadratic(q) => {
                let mut hessian = Matrix5::zeros();
                hessian[(1, 1)] = 2.0 * q.w_v;
                hessian[(3, 3)] = 2.0 * q.w_traction;
                hessian[(4, 4)] = 2.0 * q.w_braking;
                let gradient = Vector5::new(
                    0.0,
                    2.0 * q.w_v * (x.v - q.v_ref),
                    0.0,
                    2.0 * q.w_traction * u.traction,
                    2.0 * q.w_braking * u.braking,
                );
                CostExpansion {
                    hessian,
                    gradient,
                    value: self.value(x, u),
                }
            }
        }
    }

    /// The same cost multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        match self {
            StageCost::Fuel(fp) => StageCost::Fuel(fp.scaled(alpha)),
            StageCost::Quadratic(q) => StageCost::Quadratic(QuadraticCost {
                v_ref: q.v_ref,
                w_v: q.w_v * alpha,
                w_traction: q.w_traction * alpha,
                w_braking: q.w_braking * alpha,
            }),
        }
    }
}

/// Terminal manifold `v_N = lambda[0] . [1, s_N, s_N^2]`, `F_N = lambda[1] . [1, s_N, s_N^2]`.
pub type Manifold = [[f64; 3]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    pub horizon: usize,
    pub x0: VehicleState,
    pub params: VehicleParams,
    pub grade: GradeModel,
    pub stage_cost: StageCost,
    /// Steps whose state is prescribed. Consecutive pins at the same state
    /// (or a pin equal to the state before it) make the vehicle hold that
    /// state with zero input in between.
    pub pins: Vec<(usize, VehicleState)>,
    pub terminal_manifold: Option<Manifold>,
    /// Half-widths `(m/s, N)` of the band around the manifold that the
    /// terminal velocity and force must lie in; zero for equalities.
    pub terminal_band: [f64; 2],
    pub s_floor: Option<f64>,
    /// Cubic terminal cost in `s_N`; all zeros for none.
    pub terminal_cost: [f64; 4],
    /// Position scale used for constraint rows (typically the route length).
    pub position_scale: f64,
}

impl OcpProblem {
    pub fn new(horizon: usize, x0: VehicleState, params: VehicleParams, grade: GradeModel, stage_cost: StageCost) -> Self {
        Self {
            horizon,
            x0,
            params,
            grade,
            stage_cost,
            pins: Vec::new(),
            terminal_manifold: None,
            terminal_band: [0.0; 2],
            s_floor: None,
            terminal_cost: [0.0; 4],
            position_scale: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least one step"));
        }
        if !self.x0.is_finite() {
            return Err(Error::invalid("initial state must be finite"));
        }
        for (k, x) in &self.pins {
            if *k > self.horizon {
                return Err(Error::invalid(format!("pinned step {k} beyond horizon {}", self.horizon)));
            }
            if !x.is_finite() {
                return Err(Error::invalid("pinned states must be finite"));
            }
            if *k == 0 && *x != self.x0 {
                return Err(Error::invalid("a pin at step 0 must equal the initial state"));
            }
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::invalid("position scale must be positive"));
        }
        if self.terminal_cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("terminal cost coefficients must be finite"));
        }
        Ok(())
    }

    pub fn pin_at(&self, k: usize) -> Option<VehicleState> {
        self.pins.iter().rev().find(|(j, _)| *j == k).map(|(_, x)| *x)
    }

    /// `hold[k]` is true when the transition `k -> k + 1` holds a pinned state.
    pub fn holds(&self) -> Vec<bool> {
        (0..self.horizon)
            .map(|k| {
                let Some(next) = self.pin_at(k + 1) else { return false };
                let here = if k == 0 { Some(self.x0) } else { self.pin_at(k) };
                here == Some(next)
            })
            .collect()
    }

    pub fn terminal_cost_value(&self, s: f64) -> f64 {
        eval_poly(&self.terminal_cost, s)
    }

    /// States produced by `inputs`, following the hold rule.
    pub fn rollout(&self, inputs: &[ControlInput]) -> Vec<VehicleState> {
        let holds = self.holds();
        let mut xs = Vec::with_capacity(self.horizon + 1);
        xs.push(self.x0);
        for k in 0..self.horizon {
            let x = xs[k];
            let next = if holds[k] {
                self.pin_at(k + 1).expect("hold implies a pin")
            } else {
                model_step(&x, &inputs[k], self.grade.grade(x.s), &self.params)
            };
            xs.push(next);
        }
        xs
    }

    /// Stage costs plus terminal cost along a rollout.
    pub fn objective(&self, states: &[VehicleState], inputs: &[ControlInput]) -> f64 {
        let stage: f64 = (0..self.horizon).map(|k| self.stage_cost.value(&states[k], &inputs[k])).sum();
        stage + self.terminal_cost_value(states[self.horizon].s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl OcpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OcpStatus::Optimal => "optimal",
            OcpStatus::MaxIterations => "max_iterations",
            OcpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub objective: f64,
    pub status: OcpStatus,
    pub kkt_residual: f64,
    pub sqp_iterations: usize,
    /// Largest violation of the controllable constraint rows, in scaled units.
    pub max_violation: f64,
    /// Merit value after each accepted step, starting with the warm start.
    pub merit_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpOptions {
    pub max_sqp_iters: usize,
    pub trust_radius: f64,
    pub max_trust_radius: f64,
    pub penalty: f64,
    pub step_tol: f64,
    pub kkt_tol: f64,
    /// Violation allowed for an `Optimal` status.
    pub feas_tol: f64,
    /// Violation allowed for an incumbent returned with `MaxIterations`.
    pub incumbent_feas_tol: f64,
    pub qp_tol: f64,
    /// Proximal weight added to the normalized QP Hessian.
    pub proximal: f64,
    pub accept_ratio: f64,
    /// When set, each QP is written to `<prefix>_<iter>.txt`.
    pub dump_prefix: Option<PathBuf>,
}

impl Default for OcpOptions {
    fn default() -> Self {
        Self {
            max_sqp_iters: 30,
            trust_radius: 0.2,
            max_trust_radius: 2.0,
            penalty: 1e3,
            step_tol: 1e-6,
            kkt_tol: 1e-5,
            feas_tol: 1e-8,
            incumbent_feas_tol: 1e-6,
            qp_tol: 1e-8,
            proximal: 1e-3,
            accept_ratio: 0.1,
            dump_prefix: None,
        }
    }
}

/// One linearized constraint row: `value + coef . dw >= 0`.
struct Row {
    value: f64,
    coef: DVector<f64>,
}

/// Which scaled state rows can be influenced by the inputs.
#[derive(Clone)]
struct Controllable {
    s: Vec<bool>,
    v: Vec<bool>,
    f: Vec<bool>,
}

struct Layout {
    holds: Vec<bool>,
    /// Index of the first of the two scaled inputs of step k, if free.
    var: Vec<Option<usize>>,
    n: usize,
}

impl Layout {
    fn new(prob: &OcpProblem) -> Self {
        let holds = prob.holds();
        let mut var = Vec::with_capacity(prob.horizon);
        let mut n = 0;
        for &h in &holds {
            if h {
                var.push(None);
            } else {
                var.push(Some(n));
                n += 2;
            }
        }
        Self { holds, var, n }
    }

    fn inputs(&self, w: &DVector<f64>, p: &VehicleParams) -> Vec<ControlInput> {
        self.var
            .iter()
            .map(|v| match v {
                Some(i) => ControlInput::new(w[*i] * p.f_max, w[*i + 1] * p.f_max),
                None => ControlInput::ZERO,
            })
            .collect()
    }

    fn bounds(&self, p: &VehicleParams) -> (DVector<f64>, DVector<f64>) {
        let lo = DVector::from_fn(self.n, |i, _| if i % 2 == 0 { 0.0 } else { p.f_min / p.f_max });
        let hi = DVector::from_fn(self.n, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
        (lo, hi)
    }
}

/// Evaluation of the problem at one input vector.
struct Point {
    w: DVector<f64>,
    states: Vec<VehicleState>,
    inputs: Vec<ControlInput>,
    objective: f64,
    violation: f64,
}

/// Scaled constraint residuals `r >= 0` at a rollout, controllable rows only.
fn residuals(prob: &OcpProblem, states: &[VehicleState], ctl: &Controllable, holds: &[bool]) -> Vec<f64> {
    let p = &prob.params;
    let mut out = Vec::new();
    for k in 1..=prob.horizon {
        if holds[k - 1] {
            continue;
        }
        let x = states[k];
        let pinned = prob.pin_at(k).is_some();
        if ctl.v[k] && !pinned {
            out.push(x.v / p.v_max);
            out.push((p.v_max - x.v) / p.v_max);
        }
        if let Some(pin) = prob.pin_at(k) {
            for (ok, d) in [
                (ctl.s[k], (x.s - pin.s) / prob.position_scale),
                (ctl.v[k], (x.v - pin.v) / p.v_max),
                (ctl.f[k], (x.force - pin.force) / p.f_max),
            ] {
                if ok {
                    out.push(d);
                    out.push(-d);
                }
            }
        }
    }
    let n = prob.horizon;
    let xn = states[n];
    if !holds[n - 1] {
        if let Some(floor) = prob.s_floor {
            if ctl.s[n] {
                out.push((xn.s - floor) / prob.position_scale);
            }
        }
        if let Some(lam) = prob.terminal_manifold {
            let rv = (xn.v - eval_poly(&lam[0], xn.s)) / p.v_max;
            let rf = (xn.force - eval_poly(&lam[1], xn.s)) / p.f_max;
            let [bv, bf] = band(prob);
            if ctl.v[n] || ctl.s[n] {
                out.push(bv + rv);
                out.push(bv - rv);
            }
            if ctl.f[n] || ctl.s[n] {
                out.push(bf + rf);
                out.push(bf - rf);
            }
        }
    }
    out
}

/// Linearized rows, in the same order as [`residuals`].
fn rows(prob: &OcpProblem, states: &[VehicleState], sens: &[DMatrix<f64>], ctl: &Controllable, holds: &[bool]) -> Vec<Row> {
    let p = &prob.params;
    let mut out = Vec::new();
    let push_pair = |out: &mut Vec<Row>, value: f64, coef: DVector<f64>| push_band(out, value, coef, 0.0);
    for k in 1..=prob.horizon {
        if holds[k - 1] {
            continue;
        }
        let x = states[k];
        let srow = || sens[k].row(0).transpose() / prob.position_scale;
        let vrow = || sens[k].row(1).transpose() / p.v_max;
        let frow = || sens[k].row(2).transpose() / p.f_max;
        if ctl.v[k] && prob.pin_at(k).is_none() {
            out.push(Row {
                value: x.v / p.v_max,
                coef: vrow(),
            });
            out.push(Row {
                value: (p.v_max - x.v) / p.v_max,
                coef: -vrow(),
            });
        }
        if let Some(pin) = prob.pin_at(k) {
            if ctl.s[k] {
                push_pair(&mut out, (x.s - pin.s) / prob.position_scale, srow());
            }
            if ctl.v[k] {
                push_pair(&mut out, (x.v - pin.v) / p.v_max, vrow());
            }
            if ctl.f[k] {
                push_pair(&mut out, (x.force - pin.force) / p.f_max, frow());
            }
        }
    }
    let n = prob.horizon;
    let xn = states[n];
    if !holds[n - 1] {
        if let Some(floor) = prob.s_floor {
            if ctl.s[n] {
                out.push(Row {
                    value: (xn.s - floor) / prob.position_scale,
                    coef: sens[n].row(0).transpose() / prob.position_scale,
                });
            }
        }
        if let Some(lam) = prob.terminal_manifold {
            let ds = sens[n].row(0).transpose();
            let rv = (xn.v - eval_poly(&lam[0], xn.s)) / p.v_max;
            let cv = (sens[n].row(1).transpose() - &ds * eval_poly_derivative(&lam[0], xn.s)) / p.v_max;
            let rf = (xn.force - eval_poly(&lam[1], xn.s)) / p.f_max;
            let cf = (sens[n].row(2).transpose() - &ds * eval_poly_derivative(&lam[1], xn.s)) / p.f_max;
            let [bv, bf] = band(prob);
            if ctl.v[n] || ctl.s[n] {
                push_band(&mut out, rv, cv, bv);
            }
            if ctl.f[n] || ctl.s[n] {
                push_band(&mut out, rf, cf, bf);
            }
        }
    }
    out
}

/// Rows `-half <= value + coef . dw <= half`.
fn push_band(out: &mut Vec<Row>, value: f64, coef: DVector<f64>, half: f64) {
    out.push(Row {
        value: half + value,
        coef: coef.clone(),
    });
    out.push(Row {
        value: half - value,
        coef: -coef,
    });
}

/// Scaled terminal band half-widths.
fn band(prob: &OcpProblem) -> [f64; 2] {
    [
        prob.terminal_band[0].max(0.0) / prob.params.v_max,
        prob.terminal_band[1].max(0.0) / prob.params.f_max,
    ]
}

fn max_violation(res: &[f64]) -> f64 {
    res.iter().fold(0.0, |m, r| m.max(-r))
}

/// State sensitivities `d x_k / d w` (raw state units per scaled input).
fn sensitivities(prob: &OcpProblem, layout: &Layout, states: &[VehicleState]) -> Vec<DMatrix<f64>> {
    let p = &prob.params;
    let n = layout.n;
    let mut sens = Vec::with_capacity(prob.horizon + 1);
    sens.push(DMatrix::zeros(3, n));
    for k in 0..prob.horizon {
        if layout.holds[k] {
            sens.push(DMatrix::zeros(3, n));
            continue;
        }
        let lin = linearize_dynamics(&states[k], &prob.grade, p);
        let mut next = DMatrix::zeros(3, n);
        let prev = &sens[k];
        // Only columns of earlier inputs can be nonzero.
        let width = layout.var[..k].iter().flatten().last().map_or(0, |i| i + 2);
        for c in 0..width {
            for r in 0..3 {
                next[(r, c)] = lin.a[(r, 0)] * prev[(0, c)] + lin.a[(r, 1)] * prev[(1, c)] + lin.a[(r, 2)] * prev[(2, c)];
            }
        }
        if let Some(i) = layout.var[k] {
            for r in 0..3 {
                next[(r, i)] += lin.b[(r, 0)] * p.f_max;
                next[(r, i + 1)] += lin.b[(r, 1)] * p.f_max;
            }
        }
        sens.push(next);
    }
    sens
}

fn controllable(sens: &[DMatrix<f64>]) -> Controllable {
    let nonzero = |k: usize, r: usize| sens[k].row(r).iter().any(|v| *v != 0.0);
    Controllable {
        s: (0..sens.len()).map(|k| nonzero(k, 0)).collect(),
        v: (0..sens.len()).map(|k| nonzero(k, 1)).collect(),
        f: (0..sens.len()).map(|k| nonzero(k, 2)).collect(),
    }
}

/// Gradient and Gauss-Newton Hessian of the objective in scaled inputs.
fn cost_model(prob: &OcpProblem, layout: &Layout, pt: &Point, sens: &[DMatrix<f64>]) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.n;
    let p = &prob.params;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for k in 0..prob.horizon {
        if layout.holds[k] {
            continue;
        }
        let e = prob.stage_cost.expand(&pt.states[k], &pt.inputs[k]);
        // Z = d(s, v, F, F_t, F_b)/dw, 5 x n.
        let mut z = DMatrix::zeros(5, n);
        z.rows_mut(0, 3).copy_from(&sens[k]);
        if let Some(i) = layout.var[k] {
            z[(3, i)] = p.f_max;
            z[(4, i + 1)] = p.f_max;
        }
        let width = layout.var[..=k].iter().flatten().last().map_or(0, |i| i + 2);
        let zw = z.columns(0, width);
        let hz = e.hessian * zw;
        let mut hb = h.view_mut((0, 0), (width, width));
        hb.gemm_tr(1.0, &zw, &hz, 1.0);
        let mut gb = g.rows_mut(0, width);
        gb.gemv_tr(1.0, &zw, &e.gradient, 1.0);
    }
    let sn = pt.states[prob.horizon].s;
    let slope = eval_poly_derivative(&prob.terminal_cost, sn);
    if slope != 0.0 {
        g.axpy(slope, &sens[prob.horizon].row(0).transpose(), 1.0);
    }
    let h = (&h + h.transpose()) * 0.5;
    (h, g)
}

fn evaluate(prob: &OcpProblem, layout: &Layout, ctl: Option<&Controllable>, w: DVector<f64>) -> Point {
    let inputs = layout.inputs(&w, &prob.params);
    let states = prob.rollout(&inputs);
    let objective = prob.objective(&states, &inputs);
    let violation = ctl.map_or(0.0, |c| max_violation(&residuals(prob, &states, c, &layout.holds)));
    Point {
        w,
        states,
        inputs,
        objective,
        violation,
    }
}

fn initial_vector(prob: &OcpProblem, layout: &Layout, warm: &[ControlInput]) -> DVector<f64> {
    let p = &prob.params;
    let mut w = DVector::zeros(layout.n);
    for (k, v) in layout.var.iter().enumerate() {
        if let Some(i) = v {
            let u = warm.get(k).copied().unwrap_or(ControlInput::ZERO).saturate(p);
            w[*i] = u.traction / p.f_max;
            w[*i + 1] = u.braking / p.f_max;
        }
    }
    w
}

/// Solves the problem from `warm_start` (one input per step; missing
/// entries are zero, entries outside the input box are saturated).
pub fn solve_ocp(prob: &OcpProblem, warm_start: &[ControlInput], opts: &OcpOptions) -> Result<OcpSolution> {
    prob.validate()?;
    let layout = Layout::new(prob);
    let w0 = initial_vector(prob, &layout, warm_start);
    let first = evaluate(prob, &layout, None, w0);
    let sens0 = sensitivities(prob, &layout, &first.states);
    let ctl = controllable(&sens0);
    let mut cur = evaluate(prob, &layout, Some(&ctl), first.w);

    if layout.n == 0 {
        let status = if cur.violation <= opts.feas_tol {
            OcpStatus::Optimal
        } else {
            OcpStatus::Infeasible
        };
        return Ok(finish(cur, status, 0.0, 1, vec![]));
    }

    let (u_lo, u_hi) = layout.bounds(&prob.params);
    let mu = opts.penalty;
    let mut sens = sens0;
    let (mut h, mut g) = cost_model(prob, &layout, &cur, &sens);
    let cost_scale = {
        let gmax = g.amax();
        if gmax > 0.0 && gmax.is_finite() {
            gmax
        } else {
            1.0
        }
    };
    let merit = |pt: &Point| pt.objective / cost_scale + mu * pt.violation;
    let mut lin_rows = rows(prob, &cur.states, &sens, &ctl, &layout.holds);
    let mut radius = opts.trust_radius;
    let mut history = vec![merit(&cur)];
    let mut best_feasible: Option<(f64, usize)> = None;
    let mut accepted: Vec<Point> = Vec::new();
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;

    let n = layout.n;
    let m = lin_rows.len();
    while iters < opts.max_sqp_iters {
        iters += 1;
        // QP in (dw, sigma).
        let mut hq = DMatrix::zeros(n + 1, n + 1);
        hq.view_mut((0, 0), (n, n)).copy_from(&(&h / cost_scale));
        for i in 0..=n {
            hq[(i, i)] += opts.proximal;
        }
        let mut gq = DVector::zeros(n + 1);
        gq.rows_mut(0, n).copy_from(&(&g / cost_scale));
        gq[n] = mu;
        let mut a = DMatrix::zeros(m, n + 1);
        let mut b = DVector::zeros(m);
        for (r, row) in lin_rows.iter().enumerate() {
            a.view_mut((r, 0), (1, n)).copy_from(&row.coef.transpose());
            a[(r, n)] = 1.0;
            b[r] = -row.value;
        }
        let lo = DVector::from_fn(n + 1, |i, _| {
            if i == n {
                0.0
            } else {
                (u_lo[i] - cur.w[i]).max(-radius).min(0.0)
            }
        });
        let hi = DVector::from_fn(n + 1, |i, _| {
            if i == n {
                f64::INFINITY
            } else {
                (u_hi[i] - cur.w[i]).min(radius).max(0.0)
            }
        });
        let qp = QpProblem::new(hq.clone(), gq.clone())
            .with_inequalities(a, b)
            .with_bounds(lo.clone(), hi.clone());
        if let Some(prefix) = &opts.dump_prefix {
            let mut name = prefix.as_os_str().to_owned();
            name.push(format!("_{iters:02}.txt"));
            qp.dump(&PathBuf::from(name))?;
        }
        let sol = solve_qp(&qp, opts.qp_tol)?;
        if sol.status == QpStatus::Infeasible {
            // Cannot happen with the elastic slack unless the data is degenerate.
            break;
        }
        let dw = sol.x.rows(0, n).into_owned();

        // First-order optimality at the incumbent with the QP multipliers.
        kkt = {
            let mut stat = &g / cost_scale;
            for (r, row) in lin_rows.iter().enumerate() {
                stat.axpy(-sol.y_in[r], &row.coef, 1.0);
            }
            let mut comp: f64 = 0.0;
            for i in 0..n {
                let at_lo = (lo[i] - (u_lo[i] - cur.w[i])).abs() <= 1e-15;
                let at_hi = (hi[i] - (u_hi[i] - cur.w[i])).abs() <= 1e-15;
                if at_lo {
                    stat[i] -= sol.y_lower[i];
                    comp = comp.max(sol.y_lower[i] * (cur.w[i] - u_lo[i]));
                }
                if at_hi {
                    stat[i] += sol.y_upper[i];
                    comp = comp.max(sol.y_upper[i] * (u_hi[i] - cur.w[i]));
                }
            }
            for (r, row) in lin_rows.iter().enumerate() {
                comp = comp.max((sol.y_in[r] * row.value.max(0.0)).abs());
            }
            stat.amax().max(comp)
        };
        let step = dw.amax();
        if step <= opts.step_tol || (cur.violation <= opts.feas_tol && kkt <= opts.kkt_tol) {
            converged = true;
            break;
        }

        let lin_obj = (g.dot(&dw) + 0.5 * dw.dot(&(&h * &dw))) / cost_scale;
        let lin_viol = lin_rows
            .iter()
            .fold(0.0f64, |acc, row| acc.max(-(row.value + row.coef.dot(&dw))))
            .max(0.0);
        let predicted = -lin_obj + mu * (cur.violation - lin_viol);
        let mut trial_w = &cur.w + &dw;
        for i in 0..n {
            trial_w[i] = trial_w[i].clamp(u_lo[i], u_hi[i]);
        }
        let trial = evaluate(prob, &layout, Some(&ctl), trial_w);
        let actual = merit(&cur) - merit(&trial);
        let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };
        if predicted <= 1e-15 * (1.0 + merit(&cur).abs()) {
            converged = true;
            break;
        }
        if ratio > opts.accept_ratio && actual > 0.0 {
            let trust_active = step >= 0.999 * radius;
            if ratio > 0.75 && trust_active {
                radius = (radius * 2.0).min(opts.max_trust_radius);
            } else if ratio < 0.25 {
                radius *= 0.5;
            }
            let prev = std::mem::replace(&mut cur, trial);
            accepted.push(prev);
            history.push(merit(&cur));
            if cur.violation <= opts.incumbent_feas_tol
                && best_feasible.is_none_or(|(obj, _)| cur.objective < obj)
            {
                best_feasible = Some((cur.objective, accepted.len()));
            }
            sens = sensitivities(prob, &layout, &cur.states);
            (h, g) = cost_model(prob, &layout, &cur, &sens);
            lin_rows = rows(prob, &cur.states, &sens, &ctl, &layout.holds);
            debug_assert_eq!(lin_rows.len(), m);
        } else {
            radius *= 0.5;
            if radius < 1e-12 {
                converged = true;
                break;
            }
        }
    }

    let status = if converged {
        if cur.violation <= opts.feas_tol {
            OcpStatus::Optimal
        } else if cur.violation <= opts.incumbent_feas_tol {
            OcpStatus::MaxIterations
        } else {
            OcpStatus::Infeasible
        }
    } else if cur.violation <= opts.incumbent_feas_tol {
        OcpStatus::MaxIterations
    } else if let Some((_, idx)) = best_feasible {
        // The last iterate drifted; fall back to the best feasible one.
        let pt = if idx == accepted.len() { cur } else { accepted.swap_remove(idx) };
        return Ok(finish(pt, OcpStatus::MaxIterations, kkt, iters, history));
    } else {
        OcpStatus::Infeasible
    };
    Ok(finish(cur, status, kkt, iters, history))
}

fn finish(pt: Point, status: OcpStatus, kkt: f64, iters: usize, history: Vec<f64>) -> OcpSolution {
    OcpSolution {
        states: pt.states,
        inputs: pt.inputs,
        objective: pt.objective,
        status,
        kkt_residual: if kkt.is_finite() { kkt } else { 0.0 },
        sqp_iterations: iters,
        max_violation: pt.violation,
        merit_history: history,
    }
}
