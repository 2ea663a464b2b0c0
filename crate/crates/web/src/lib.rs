//! Browser bindings: route grades and a learning campaign that runs one trip
//! per call, so the page can redraw between trips.

use wasm_bindgen::prelude::*;

use pcc_lmpc::config::CampaignConfig;
use pcc_lmpc::harness::CampaignRunner;
use pcc_lmpc::route::RouteProfile;
use pcc_lmpc::vehicle::RoadGrade;

fn js_err(e: pcc_lmpc::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn builtin(name: &str) -> Result<RouteProfile, JsError> {
    RouteProfile::builtin(name).ok_or_else(|| JsError::new(&format!("unknown route {name:?}")))
}

/// Grade of a bundled route sampled every `spacing` metres, as
/// interleaved `[s0, theta0, s1, theta1, ...]`.
#[wasm_bindgen]
pub fn grade_profile(route: &str, spacing: f64) -> Result<Vec<f64>, JsError> {
    let r = builtin(route)?;
    if !(spacing > 0.0) {
        return Err(JsError::new("spacing must be positive"));
    }
    let n = (r.length() / spacing).floor() as usize;
    let mut out = Vec::with_capacity(2 * (n + 1));
    for i in 0..=n {
        let s = i as f64 * spacing;
        out.push(s);
        out.push(r.grade(s));
    }
    Ok(out)
}

/// A campaign on a bundled route.
#[wasm_bindgen]
pub struct Session {
    runner: CampaignRunner,
}

#[wasm_bindgen]
impl Session {
    /// `overrides` holds `section.key=value` lines, as on the command line.
    #[wasm_bindgen(constructor)]
    pub fn new(route: &str, overrides: &str) -> Result<Session, JsError> {
        let mut sets = vec![format!("route.path=builtin:{route}")];
        sets.extend(overrides.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
        let cfg = CampaignConfig::parse("", &sets).map_err(js_err)?;
        let r = cfg.load_route().map_err(js_err)?;
        let runner = CampaignRunner::new(&cfg, &r).map_err(js_err)?;
        Ok(Session { runner })
    }

    /// Drives the next trip. Returns false once every trip has run.
    pub fn step(&mut self) -> Result<bool, JsError> {
        Ok(self.runner.step().map_err(js_err)?.is_some())
    }

    pub fn finished(&self) -> bool {
        self.runner.finished()
    }

    /// Trips driven so far, baseline included.
    pub fn trips(&self) -> usize {
        self.runner.memory().logs().len()
    }

    /// Fuel of every trip divided by the baseline's.
    pub fn normalized_fuel(&self) -> Vec<f64> {
        let logs = self.runner.memory().logs();
        let Some(base) = logs.first().map(|l| l.total_cost()) else {
            return Vec::new();
        };
        logs.iter().map(|l| l.total_cost() / base).collect()
    }

    pub fn arrival_steps(&self) -> Vec<u32> {
        self.runner.memory().logs().iter().map(|l| l.arrival_step as u32).collect()
    }

    /// Velocity over position of trip `i` up to its arrival, as interleaved
    /// `[s0, v0, s1, v1, ...]`.
    pub fn velocity_profile(&self, i: usize) -> Result<Vec<f64>, JsError> {
        let log = self
            .runner
            .memory()
            .logs()
            .get(i)
            .ok_or_else(|| JsError::new(&format!("no trip {i}")))?;
        Ok(log.states[..=log.arrival_step].iter().flat_map(|x| [x.s, x.v]).collect())
    }
}
