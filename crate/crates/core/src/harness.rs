//! Closed-loop trips and learning campaigns, plus the full-horizon oracle.

use serde::{Deserialize, Serialize};

use crate::config::CampaignConfig;
use crate::error::{Error, Result};
use crate::grade::{invert_grade, ObservationStore};
use crate::lmpc::{tracking_input, LmpcController, StepOutput};
use crate::memory::{finalize_iteration, IterationLog, Memory, RawIteration, StepDiagnostics, StepStatus};
use crate::ocp::{solve_ocp, GradeModel, OcpOptions, OcpProblem, OcpStatus, StageCost};
use crate::route::{plant_step, ArrivalTolerance, PlantState, RouteProfile};
use crate::vehicle::{fuel, ControlInput, FuelParams, RoadGrade, VehicleParams, VehicleState};

/// Anything that maps the current state and time to an input.
pub trait Controller {
    fn control(&mut self, x: &VehicleState, t: usize, store: &ObservationStore) -> Result<StepOutput>;
}

impl Controller for LmpcController {
    fn control(&mut self, x: &VehicleState, t: usize, store: &ObservationStore) -> Result<StepOutput> {
        self.control_step(x, t, store)
    }
}

/// Default gain and ramp deceleration of the baseline tracker.
pub const BASELINE_GAIN: f64 = 0.2;
pub const STOP_DECEL: f64 = 1.5;

/// Constant-speed tracker with a stopping ramp at the end of the route.
pub fn baseline_controller(x: &VehicleState, _t: usize, v_ref: f64, route_length: f64, p: &VehicleParams) -> ControlInput {
    tracking_input(x, v_ref, BASELINE_GAIN, route_length, STOP_DECEL, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineController {
    pub v_ref: f64,
    pub gain: f64,
    pub decel: f64,
    pub route_length: f64,
    pub params: VehicleParams,
}

impl Controller for BaselineController {
    fn control(&mut self, x: &VehicleState, _t: usize, _store: &ObservationStore) -> Result<StepOutput> {
        Ok(StepOutput {
            input: tracking_input(x, self.v_ref, self.gain, self.route_length, self.decel, &self.params),
            diagnostics: StepDiagnostics {
                status: StepStatus::Baseline,
                sqp_iterations: 0,
                kkt_residual: 0.0,
                fallback: false,
            },
        })
    }
}

/// Fixed data of one trip.
#[derive(Debug, Clone, Copy)]
pub struct TripSetup<'a> {
    pub route: &'a RouteProfile,
    pub params: &'a VehicleParams,
    pub fuel: &'a FuelParams,
    pub tolerance: &'a ArrivalTolerance,
    pub time_budget: usize,
}

/// Drives one trip from rest at the route start. Every transition feeds a
/// grade observation into `store`. Steps after arrival are logged at the goal
/// with zero input and zero cost.
pub fn run_iteration(
    iteration: usize,
    controller: &mut dyn Controller,
    setup: &TripSetup,
    store: &mut ObservationStore,
) -> Result<IterationLog> {
    let TripSetup {
        route,
        params: p,
        fuel: fp,
        tolerance: tol,
        time_budget: n_f,
    } = *setup;
    let length = route.length();
    let goal = VehicleState::new(length, 0.0, 0.0);
    let mut ps = PlantState::start(VehicleState::default(), route, tol);
    let mut raw = RawIteration {
        iteration,
        arrival_step: None,
        states: Vec::with_capacity(n_f + 1),
        inputs: Vec::with_capacity(n_f + 1),
        stage_costs: Vec::with_capacity(n_f + 1),
        theta_true: Vec::with_capacity(n_f + 1),
        theta_bar: Vec::with_capacity(n_f + 1),
        diagnostics: Vec::with_capacity(n_f + 1),
    };
    let mut k = 0;
    while k < n_f && !ps.arrived {
        let x = ps.x;
        let out = controller.control(&x, k, store).map_err(|e| Error::IterationFailed {
            iteration,
            reason: format!("controller failed at step {k}: {e}"),
        })?;
        let u = out.input.saturate(p);
        let next = plant_step(&ps, &u, route, p, tol)?;
        let obs = invert_grade(&x, &next.x, p, iteration).ok();
        if let Some(o) = obs {
            store.push(o);
        }
        raw.states.push(x);
        raw.inputs.push(u);
        raw.stage_costs.push(fuel(x.v, u.traction, fp));
        raw.theta_true.push(route.grade(x.s));
        raw.theta_bar.push(obs.map(|o| o.theta_bar));
        raw.diagnostics.push(out.diagnostics);
        ps = next;
        k += 1;
    }
    if ps.arrived {
        raw.arrival_step = Some(k);
    }
    // The arrival state itself, then the goal held until the budget ends.
    raw.states.push(ps.x);
    raw.inputs.push(ControlInput::ZERO);
    raw.stage_costs.push(0.0);
    raw.theta_true.push(route.grade(ps.x.s));
    raw.theta_bar.push(None);
    raw.diagnostics.push(if ps.arrived {
        StepDiagnostics::ARRIVED
    } else {
        *raw.diagnostics.last().unwrap_or(&StepDiagnostics::ARRIVED)
    });
    for _ in k + 1..=n_f {
        raw.states.push(goal);
        raw.inputs.push(ControlInput::ZERO);
        raw.stage_costs.push(0.0);
        raw.theta_true.push(route.grade(length));
        raw.theta_bar.push(None);
        raw.diagnostics.push(StepDiagnostics::ARRIVED);
    }
    if !ps.arrived {
        let x = ps.x;
        return Err(Error::IterationFailed {
            iteration,
            reason: format!(
                "no arrival within {n_f} steps: final state s = {:.3} m, v = {:.3} m/s, F = {:.1} N, goal s = {length}",
                x.s, x.v, x.force
            ),
        });
    }
    finalize_iteration(raw, length, tol)
}

/// Per-iteration line of a campaign report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    /// Trajectory file of this iteration, relative to the report.
    pub log_file: String,
    pub total_fuel: f64,
    pub normalized_fuel: f64,
    pub arrival_step: usize,
    pub fallback_steps: usize,
    pub mean_solver_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub route_length: f64,
    pub horizon: usize,
    pub time_budget: usize,
    pub iterations: Vec<IterationSummary>,
}

impl CampaignReport {
    pub fn from_logs(logs: &[IterationLog], route_length: f64, horizon: usize, time_budget: usize) -> Self {
        let base = logs.first().map(|l| l.total_cost()).unwrap_or(1.0);
        let iterations = logs
            .iter()
            .map(|l| IterationSummary {
                iteration: l.iteration,
                log_file: crate::io::log_file_name(l.iteration),
                total_fuel: l.total_cost(),
                normalized_fuel: if base > 0.0 { l.total_cost() / base } else { 1.0 },
                arrival_step: l.arrival_step,
                fallback_steps: l.fallback_steps(),
                mean_solver_iterations: l.mean_solver_iterations(),
            })
            .collect();
        Self {
            route_length,
            horizon,
            time_budget,
            iterations,
        }
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.iterations.iter().map(|i| i.normalized_fuel).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub memory: Memory,
    pub report: CampaignReport,
}

/// Refuses configurations whose baseline trip cannot meet the budget.
pub fn check_baseline_feasible(cfg: &CampaignConfig, route_length: f64) -> Result<()> {
    let budget = cfg.controller.time_budget as f64 * cfg.vehicle.t_s;
    let needed = route_length / cfg.harness.baseline_speed;
    if needed >= 0.9 * budget {
        return Err(Error::Config(format!(
            "baseline speed {} m/s needs {needed:.1} s for {route_length} m, over 90% of the {budget:.1} s budget",
            cfg.harness.baseline_speed
        )));
    }
    Ok(())
}

/// A campaign driven one trip at a time.
#[derive(Debug, Clone)]
pub struct CampaignRunner {
    cfg: CampaignConfig,
    route: RouteProfile,
    store: ObservationStore,
    memory: Memory,
}

impl CampaignRunner {
    pub fn new(cfg: &CampaignConfig, route: &RouteProfile) -> Result<Self> {
        cfg.validate()?;
        check_baseline_feasible(cfg, route.length())?;
        Ok(Self {
            cfg: cfg.clone(),
            route: route.clone(),
            store: ObservationStore::default(),
            memory: Memory::new(),
        })
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    /// All configured trips are done.
    pub fn finished(&self) -> bool {
        self.memory.logs().len() > self.cfg.harness.iterations
    }

    /// Drives the next trip: the baseline first, then the learning
    /// controller. Returns `None` once the campaign is complete.
    pub fn step(&mut self) -> Result<Option<&IterationLog>> {
        if self.finished() {
            return Ok(None);
        }
        let cfg = &self.cfg;
        let length = self.route.length();
        let setup = TripSetup {
            route: &self.route,
            params: &cfg.vehicle,
            fuel: &cfg.fuel,
            tolerance: &cfg.arrival,
            time_budget: cfg.controller.time_budget,
        };
        let log = match self.memory.last() {
            None => {
                let mut baseline = BaselineController {
                    v_ref: cfg.harness.baseline_speed,
                    gain: cfg.harness.baseline_gain,
                    decel: cfg.harness.stop_decel,
                    route_length: length,
                    params: cfg.vehicle,
                };
                run_iteration(0, &mut baseline, &setup, &mut self.store)?
            }
            Some(prev) => {
                let j = prev.iteration + 1;
                let mut lmpc =
                    LmpcController::new(cfg.controller.clone(), cfg.vehicle, cfg.fuel, cfg.arrival, length, prev.clone())?;
                run_iteration(j, &mut lmpc, &setup, &mut self.store)?
            }
        };
        self.memory.push(log);
        Ok(self.memory.last())
    }

    pub fn into_campaign(self) -> Campaign {
        let c = &self.cfg.controller;
        let report = CampaignReport::from_logs(self.memory.logs(), self.route.length(), c.horizon, c.time_budget);
        Campaign {
            memory: self.memory,
            report,
        }
    }
}

/// Runs the baseline trip and `cfg.harness.iterations` learning trips.
/// `progress` is called after every finished trip.
pub fn run_campaign(cfg: &CampaignConfig, route: &RouteProfile, mut progress: impl FnMut(&IterationLog)) -> Result<Campaign> {
    let mut runner = CampaignRunner::new(cfg, route)?;
    while let Some(log) = runner.step()? {
        progress(log);
    }
    Ok(runner.into_campaign())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub objective: f64,
    pub status: OcpStatus,
    pub sqp_iterations: usize,
    pub max_violation: f64,
}

/// Solves the whole trip at once with the true grade: start at rest, end at
/// rest on the goal exactly at the budget. Warm-started from the baseline.
pub fn full_horizon_oracle(cfg: &CampaignConfig, route: &RouteProfile) -> Result<OracleResult> {
    cfg.validate()?;
    let length = route.length();
    let n_f = cfg.controller.time_budget;
    let x0 = VehicleState::default();
    let goal = VehicleState::new(length, 0.0, 0.0);
    if cfg.arrival.has_arrived(&x0, length) && length <= 0.0 {
        return Ok(OracleResult {
            states: vec![x0; n_f + 1],
            inputs: vec![ControlInput::ZERO; n_f],
            objective: 0.0,
            status: OcpStatus::Optimal,
            sqp_iterations: 0,
            max_violation: 0.0,
        });
    }
    let mut prob = OcpProblem::new(n_f, x0, cfg.vehicle, GradeModel::Route(route.clone()), StageCost::Fuel(cfg.fuel));
    prob.position_scale = length.max(1.0);
    prob.pins = vec![(n_f, goal)];

    // Baseline inputs make a feasible-looking warm start.
    let mut baseline = BaselineController {
        v_ref: cfg.harness.baseline_speed,
        gain: cfg.harness.baseline_gain,
        decel: cfg.harness.stop_decel,
        route_length: length,
        params: cfg.vehicle,
    };
    let setup = TripSetup {
        route,
        params: &cfg.vehicle,
        fuel: &cfg.fuel,
        tolerance: &cfg.arrival,
        time_budget: n_f,
    };
    let warm: Vec<ControlInput> = match run_iteration(0, &mut baseline, &setup, &mut ObservationStore::default()) {
        Ok(log) => log.inputs[..n_f].to_vec(),
        Err(_) => vec![ControlInput::ZERO; n_f],
    };
    let opts = OcpOptions {
        max_sqp_iters: 200,
        ..cfg.controller.solver.options()
    };
    let sol = solve_ocp(&prob, &warm, &opts)?;
    Ok(OracleResult {
        objective: sol.objective,
        status: sol.status,
        sqp_iterations: sol.sqp_iterations,
        max_violation: sol.max_violation,
        states: sol.states,
        inputs: sol.inputs,
    })
}
