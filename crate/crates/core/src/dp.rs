//! Grid dynamic programming over `(s, v, F)` for small instances.
//!
//! Inputs are discretized by the force node they lead to: from force `F_i`
//! the admissible commands are those with `(1 - a) F_i + a u = F_j` for a
//! grid node `F_j`, `a = t_s / tau`. Force therefore stays on its grid and
//! only position and velocity are interpolated (bilinearly).

use crate::config::CampaignConfig;
use crate::error::{Error, Result};
use crate::ocp::StageCost;
use crate::route::{ArrivalTolerance, RouteProfile};
use crate::vehicle::{step_dynamics, ControlInput, RoadGrade, VehicleParams, VehicleState};

/// Cost of commands that exceed the velocity limit.
pub const INFEASIBLE: f64 = 1e9;

/// Largest grid the solver accepts.
pub const MAX_NODES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpGrid {
    /// Position nodes span `[0, s_max]`; one node means position is not a state.
    pub s_max: f64,
    pub s_nodes: usize,
    /// Velocity nodes span `[0, v_top]`.
    pub v_top: f64,
    pub v_nodes: usize,
    /// Force nodes span `[f_min, f_max]`.
    pub f_nodes: usize,
}

impl DpGrid {
    pub fn nodes(&self) -> usize {
        self.s_nodes * self.v_nodes * self.f_nodes
    }

    /// Same ranges with `factor` times finer position and velocity spacing.
    pub fn refined(&self, factor: usize) -> Self {
        let refine = |n: usize| if n <= 1 { n } else { (n - 1) * factor + 1 };
        Self {
            s_nodes: refine(self.s_nodes),
            v_nodes: refine(self.v_nodes),
            ..*self
        }
    }

    /// Same ranges with half the position and velocity resolution.
    pub fn coarsened(&self) -> Self {
        let coarsen = |n: usize| if n <= 1 { n } else { (n - 1).div_ceil(2) + 1 };
        Self {
            s_nodes: coarsen(self.s_nodes),
            v_nodes: coarsen(self.v_nodes),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpGoal {
    pub route_length: f64,
    pub tolerance: ArrivalTolerance,
    /// Terminal cost per metre short of the goal region and per m/s above
    /// its speed bound, charged when the horizon ends outside it.
    pub penalty: f64,
}

impl DpGoal {
    fn terminal(&self, x: &VehicleState) -> f64 {
        let t = &self.tolerance;
        if t.has_arrived(x, self.route_length) {
            return 0.0;
        }
        self.penalty * ((self.route_length - t.eps_s - x.s).max(0.0) + (x.v - t.eps_v).max(0.0))
    }
}

pub struct DpProblem<'a> {
    pub horizon: usize,
    pub x0: VehicleState,
    pub params: VehicleParams,
    pub grade: &'a dyn RoadGrade,
    pub stage_cost: StageCost,
    /// Arrival region, absorbing with zero cost. `None` leaves the final
    /// state free.
    pub goal: Option<DpGoal>,
    pub grid: DpGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpResult {
    /// Grid cost-to-go from the start state, terminal penalty included.
    pub objective: f64,
    /// Cost of driving the plant with the nearest-node policy.
    pub rollout_cost: f64,
    /// Step at which that rollout reached the goal.
    pub rollout_arrival: Option<usize>,
    /// The rollout reached the goal, or there is no goal.
    pub feasible: bool,
    pub grid: DpGrid,
    /// Cost-to-go at step 0, indexed `[(i_s * v_nodes + i_v) * f_nodes + i_f]`.
    pub value: Vec<f64>,
}

impl DpResult {
    /// Discretization error estimate from a run on a coarser grid.
    pub fn slack(&self, coarse: &DpResult) -> f64 {
        (self.objective - coarse.objective).abs()
    }
}

struct Axis {
    lo: f64,
    step: f64,
    n: usize,
}

impl Axis {
    fn new(lo: f64, hi: f64, n: usize) -> Self {
        let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
        Self { lo, step, n }
    }

    fn at(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    /// Lower node and weight of the upper node, clamped to the axis.
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.n == 1 {
            return (0, 0.0);
        }
        let r = ((x - self.lo) / self.step).clamp(0.0, (self.n - 1) as f64);
        let i = (r.floor() as usize).min(self.n - 2);
        (i, r - i as f64)
    }

    fn nearest(&self, x: f64) -> usize {
        let (i, w) = self.locate(x);
        if w > 0.5 {
            i + 1
        } else {
            i
        }
    }
}

/// Backward recursion from the horizon to step 0, then a forward rollout of
/// the tabulated policy on the plant.
pub fn dp_solve(prob: &DpProblem) -> Result<DpResult> {
    let g = prob.grid;
    let p = &prob.params;
    p.validate()?;
    if g.s_nodes == 0 || g.v_nodes < 2 || g.f_nodes < 2 {
        return Err(Error::invalid("dp grid needs >= 1 position, >= 2 velocity and >= 2 force nodes"));
    }
    if g.nodes() > MAX_NODES {
        return Err(Error::invalid(format!("dp grid has {} nodes, limit {MAX_NODES}", g.nodes())));
    }
    if !(g.v_top > 0.0 && g.v_top <= p.v_max) || (g.s_nodes > 1 && !(g.s_max > 0.0)) {
        return Err(Error::invalid("dp grid ranges must be positive and v_top <= v_max"));
    }
    let sa = Axis::new(0.0, g.s_max, g.s_nodes);
    let va = Axis::new(0.0, g.v_top, g.v_nodes);
    let fa = Axis::new(p.f_min, p.f_max, g.f_nodes);
    let (ns, nv, nf) = (g.s_nodes, g.v_nodes, g.f_nodes);
    let idx = |i: usize, j: usize, l: usize| (i * nv + j) * nf + l;
    let a = p.t_s / p.tau;

    // Commands linking each pair of force nodes, when admissible.
    let mut links: Vec<Vec<(usize, ControlInput)>> = vec![Vec::new(); nf];
    for (from, out) in links.iter_mut().enumerate() {
        let f = fa.at(from);
        for to in 0..nf {
            let u = (fa.at(to) - (1.0 - a) * f) / a;
            if u >= p.f_min - 1e-9 && u <= p.f_max + 1e-9 {
                out.push((to, ControlInput::from_net(u.clamp(p.f_min, p.f_max))));
            }
        }
    }

    let arrived = |x: &VehicleState| prob.goal.is_some_and(|gl| gl.tolerance.has_arrived(x, gl.route_length));
    let terminal = |x: &VehicleState| prob.goal.map_or(0.0, |gl| gl.terminal(x));
    let interp = |v: &[f64], x: &VehicleState, l: usize| -> f64 {
        let (i, ws) = sa.locate(x.s);
        let (j, wv) = va.locate(x.v);
        let i1 = if ns > 1 { i + 1 } else { i };
        (1.0 - ws) * ((1.0 - wv) * v[idx(i, j, l)] + wv * v[idx(i, j + 1, l)])
            + ws * ((1.0 - wv) * v[idx(i1, j, l)] + wv * v[idx(i1, j + 1, l)])
    };
    // Bellman backup at a state whose force sits on node `l`: best value and
    // the index of the link achieving it.
    let backup = |x: &VehicleState, l: usize, next: &[f64]| -> (f64, u16) {
        if arrived(x) {
            return (0.0, 0);
        }
        let theta = prob.grade.grade(x.s);
        let mut best = (INFEASIBLE, 0u16);
        for (n, &(to, u)) in links[l].iter().enumerate() {
            let mut xn = step_dynamics(x, &u, theta, p);
            xn.force = fa.at(to);
            let tail = if arrived(&xn) {
                0.0
            } else if xn.v > p.v_max {
                INFEASIBLE
            } else {
                interp(next, &xn, to)
            };
            let total = prob.stage_cost.value(x, &u) + tail;
            if total < best.0 {
                best = (total, n as u16);
            }
        }
        best
    };

    let l0 = fa.nearest(prob.x0.force);
    let x0 = VehicleState {
        force: fa.at(l0),
        ..prob.x0
    };
    let mut next = vec![0.0; g.nodes()];
    for i in 0..ns {
        for j in 0..nv {
            for l in 0..nf {
                next[idx(i, j, l)] = terminal(&VehicleState::new(sa.at(i), va.at(j), fa.at(l)));
            }
        }
    }
    let mut cur = vec![0.0; g.nodes()];
    let mut policy = vec![0u16; prob.horizon * g.nodes()];
    let mut objective = terminal(&x0);
    for k in (0..prob.horizon).rev() {
        // The start state is backed up exactly rather than interpolated.
        objective = backup(&x0, l0, &next).0;
        let pol = &mut policy[k * g.nodes()..(k + 1) * g.nodes()];
        for i in 0..ns {
            for j in 0..nv {
                for l in 0..nf {
                    let n = idx(i, j, l);
                    (cur[n], pol[n]) = backup(&VehicleState::new(sa.at(i), va.at(j), fa.at(l)), l, &next);
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }

    let mut x = x0;
    let mut l = l0;
    let mut rollout_cost = 0.0;
    let mut rollout_arrival = arrived(&x).then_some(0);
    for k in 0..prob.horizon {
        if rollout_arrival.is_some() {
            break;
        }
        let n = idx(sa.nearest(x.s), va.nearest(x.v), l);
        let (to, u) = links[l][policy[k * g.nodes() + n] as usize];
        rollout_cost += prob.stage_cost.value(&x, &u);
        x = step_dynamics(&x, &u, prob.grade.grade(x.s), p);
        l = to;
        if arrived(&x) {
            rollout_arrival = Some(k + 1);
        }
    }
    Ok(DpResult {
        objective,
        rollout_cost,
        rollout_arrival,
        feasible: prob.goal.is_none() || rollout_arrival.is_some(),
        grid: g,
        value: next,
    })
}

/// Grid oracle for a campaign configuration: start at rest, reach the goal
/// within the time budget, true route grade, fuel stage cost.
pub fn dp_oracle(cfg: &CampaignConfig, route: &RouteProfile, grid: Option<DpGrid>) -> Result<DpResult> {
    let grid = grid.unwrap_or(DpGrid {
        s_max: route.length() + cfg.dp.position_margin,
        s_nodes: cfg.dp.position_nodes,
        v_top: cfg.dp.velocity_top.min(cfg.vehicle.v_max),
        v_nodes: cfg.dp.velocity_nodes,
        f_nodes: cfg.dp.force_nodes,
    });
    dp_solve(&DpProblem {
        horizon: cfg.controller.time_budget,
        x0: VehicleState::default(),
        params: cfg.vehicle,
        grade: route,
        stage_cost: StageCost::Fuel(cfg.fuel),
        goal: Some(DpGoal {
            route_length: route.length(),
            tolerance: cfg.arrival,
            penalty: cfg.dp.terminal_penalty,
        }),
        grid,
    })
}
