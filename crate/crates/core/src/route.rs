//! Ground-truth road profiles and the simulation plant.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{step_dynamics, ControlInput, RoadGrade, VehicleParams, VehicleState};

/// Largest pitch a route file may contain (rad).
pub const MAX_ROUTE_GRADE: f64 = 0.3;

pub const ROUTE_HEADER: &str = "s_m,grade_rad";

/// Piecewise-linear pitch table over route position.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteProfile {
    samples: Vec<(f64, f64)>,
    length: f64,
}

impl RouteProfile {
    pub fn new(samples: Vec<(f64, f64)>, length: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("route needs at least one sample"));
        }
        if samples[0].0 != 0.0 {
            return Err(Error::invalid("route samples must start at s = 0"));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid(format!(
                    "route positions must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(s, theta)) = samples
            .iter()
            .find(|(s, t)| !s.is_finite() || !t.is_finite() || t.abs() >= MAX_ROUTE_GRADE)
        {
            return Err(Error::invalid(format!("bad route sample ({s}, {theta})")));
        }
        if !(length >= 0.0) || samples.last().unwrap().0 < length {
            return Err(Error::invalid(format!(
                "route length {length} must be covered by the samples"
            )));
        }
        Ok(Self { samples, length })
    }

    /// Samples `grade` on a uniform grid of `spacing` metres over `[0, length]`.
    pub fn from_fn(length: f64, spacing: f64, grade: impl Fn(f64) -> f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::invalid("sample spacing must be positive"));
        }
        let n = (length / spacing).ceil() as usize;
        let mut samples: Vec<(f64, f64)> = (0..n)
            .map(|i| i as f64 * spacing)
            .filter(|&s| s < length)
            .map(|s| (s, grade(s)))
            .collect();
        samples.push((length, grade(length)));
        Self::new(samples, length)
    }

    pub fn flat(length: f64) -> Self {
        Self::from_fn(length, length.max(1.0), |_| 0.0).expect("flat route is valid")
    }

    /// 1 km with two sine hills of 0.05 rad peak grade.
    pub fn rolling_1km() -> Self {
        Self::from_fn(1000.0, 5.0, |s| 0.05 * (2.0 * PI * s / 500.0).sin()).expect("builtin route")
    }

    /// 5 km of mixed grades bounded by 0.08 rad.
    pub fn hills_5km() -> Self {
        Self::from_fn(5000.0, 10.0, |s| {
            0.05 * (2.0 * PI * s / 1400.0).sin() + 0.03 * (2.0 * PI * s / 530.0 + 1.0).sin()
        })
        .expect("builtin route")
    }

    pub fn flat_200m() -> Self {
        Self::flat(200.0)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "rolling_1km" => Some(Self::rolling_1km()),
            "hills_5km" => Some(Self::hills_5km()),
            "flat_200m" => Some(Self::flat_200m()),
            _ => None,
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Interpolated pitch at `s`; positions past the table keep the last value.
    pub fn grade_at(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::invalid(format!("route position must be >= 0, got {s}")));
        }
        Ok(self.interpolate(s).0)
    }

    fn interpolate(&self, s: f64) -> (f64, f64) {
        let s = s.max(0.0);
        let idx = self.samples.partition_point(|&(si, _)| si <= s);
        if idx == 0 {
            return (self.samples[0].1, 0.0);
        }
        if idx == self.samples.len() {
            return (self.samples[idx - 1].1, 0.0);
        }
        let (s0, t0) = self.samples[idx - 1];
        let (s1, t1) = self.samples[idx];
        let slope = (t1 - t0) / (s1 - s0);
        (t0 + slope * (s - s0), slope)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == ROUTE_HEADER => {}
            Some((_, h)) => return Err(err(1, format!("expected header `{ROUTE_HEADER}`, found `{h}`"))),
            None => return Err(err(1, "empty route file".into())),
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(err(line_no, format!("expected two columns, found `{line}`")));
            };
            let s: f64 = a
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("bad position `{a}`")))?;
            let theta: f64 = b
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("bad grade `{b}`")))?;
            if !s.is_finite() || !theta.is_finite() {
                return Err(err(line_no, "non-finite value".into()));
            }
            if theta.abs() >= MAX_ROUTE_GRADE {
                return Err(err(line_no, format!("|grade| must be < {MAX_ROUTE_GRADE}, got {theta}")));
            }
            if let Some(&(prev, _)) = samples.last() {
                if s <= prev {
                    return Err(err(line_no, format!("position {s} does not increase (previous {prev})")));
                }
            } else if s != 0.0 {
                return Err(err(line_no, format!("first sample must be at s = 0, got {s}")));
            }
            samples.push((s, theta));
        }
        let Some(&(length, _)) = samples.last() else {
            return Err(err(2, "route has no samples".into()));
        };
        Self::new(samples, length)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUTE_HEADER);
        out.push('\n');
        for &(s, theta) in &self.samples {
            let _ = writeln!(out, "{},{}", s, theta);
        }
        out
    }
}

impl RoadGrade for RouteProfile {
    fn grade(&self, s: f64) -> f64 {
        self.interpolate(s).0
    }

    fn grade_slope(&self, s: f64) -> f64 {
        self.interpolate(s).1
    }
}

/// Tolerance ball around the goal state used to declare arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrivalTolerance {
    pub eps_s: f64,
    pub eps_v: f64,
    pub eps_force: f64,
}

impl Default for ArrivalTolerance {
    fn default() -> Self {
        Self {
            eps_s: 0.5,
            eps_v: 0.05,
            eps_force: 50.0,
        }
    }
}

impl ArrivalTolerance {
    pub fn has_arrived(&self, x: &VehicleState, route_length: f64) -> bool {
        x.s >= route_length - self.eps_s && x.v <= self.eps_v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub x: VehicleState,
    /// Absolute time step.
    pub k: usize,
    pub arrived: bool,
}

impl PlantState {
    pub fn start(x: VehicleState, route: &RouteProfile, tol: &ArrivalTolerance) -> Self {
        Self {
            x,
            k: 0,
            arrived: tol.has_arrived(&x, route.length()),
        }
    }
}

/// Saturates `u` to the admissible box and advances the true vehicle one step.
pub fn plant_step(
    ps: &PlantState,
    u: &ControlInput,
    route: &RouteProfile,
    p: &VehicleParams,
    tol: &ArrivalTolerance,
) -> Result<PlantState> {
    if ps.arrived {
        return Err(Error::ContractViolation(format!(
            "plant already arrived at step {}",
            ps.k
        )));
    }
    let u = u.saturate(p);
    let theta = route.grade(ps.x.s);
    let x = step_dynamics(&ps.x, &u, theta, p);
    Ok(PlantState {
        x,
        k: ps.k + 1,
        arrived: tol.has_arrived(&x, route.length()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> RouteProfile {
        RouteProfile::new(vec![(0.0, 0.0), (100.0, 0.02)], 100.0).unwrap()
    }

    #[test]
    fn interpolation() {
        let r = two_point();
        assert_eq!(r.grade_at(100.0).unwrap(), 0.02);
        assert_eq!(r.grade_at(0.0).unwrap(), 0.0);
        assert!((r.grade_at(50.0).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(r.grade_at(250.0).unwrap(), 0.02);
        assert!(r.grade_at(-1.0).is_err());
    }

    #[test]
    fn csv_roundtrip_and_line_numbers() {
        let r = RouteProfile::rolling_1km();
        let back = RouteProfile::parse_csv(&r.to_csv(), Path::new("x.csv")).unwrap();
        assert_eq!(r, back);

        let bad = "s_m,grade_rad\n0,0\n10,0.01\n5,0.0\n";
        match RouteProfile::parse_csv(bad, Path::new("bad.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let steep = "s_m,grade_rad\n0,0\n10,0.4\n";
        match RouteProfile::parse_csv(steep, Path::new("steep.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RouteProfile::parse_csv("s,theta\n0,0\n", Path::new("h.csv")).is_err());
    }

    #[test]
    fn builtin_routes_are_bounded() {
        for name in ["rolling_1km", "hills_5km", "flat_200m"] {
            let r = RouteProfile::builtin(name).unwrap();
            assert!(r.samples().iter().all(|(_, t)| t.abs() <= 0.08 + 1e-12));
        }
        assert_eq!(RouteProfile::rolling_1km().length(), 1000.0);
        assert_eq!(RouteProfile::hills_5km().length(), 5000.0);
    }

    #[test]
    fn flat_standstill_step() {
        let p = VehicleParams {
            c_r: 0.0,
            ..VehicleParams::default()
        };
        let route = RouteProfile::flat(100.0);
        let tol = ArrivalTolerance::default();
        let ps = PlantState::start(VehicleState::default(), &route, &tol);
        let next = plant_step(&ps, &ControlInput::ZERO, &route, &p, &tol).unwrap();
        assert_eq!(next.x, ps.x);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn plant_saturates_inputs() {
        let p = VehicleParams::default();
        let route = RouteProfile::flat(100.0);
        let tol = ArrivalTolerance::default();
        let ps = PlantState::start(VehicleState::default(), &route, &tol);
        let a = plant_step(&ps, &ControlInput::new(2.0 * p.f_max, 0.0), &route, &p, &tol).unwrap();
        let b = plant_step(&ps, &ControlInput::new(p.f_max, 0.0), &route, &p, &tol).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn arrival_threshold() {
        let tol = ArrivalTolerance::default();
        assert!(tol.has_arrived(&VehicleState::new(99.8, 0.01, 300.0), 100.0));
        assert!(!tol.has_arrived(&VehicleState::new(99.4, 0.01, 0.0), 100.0));
        assert!(!tol.has_arrived(&VehicleState::new(99.8, 0.2, 0.0), 100.0));
    }

    #[test]
    fn stepping_arrived_plant_is_an_error() {
        let route = RouteProfile::flat(100.0);
        let tol = ArrivalTolerance::default();
        let ps = PlantState {
            x: VehicleState::new(100.0, 0.0, 0.0),
            k: 3,
            arrived: true,
        };
        assert!(matches!(
            plant_step(&ps, &ControlInput::ZERO, &route, &VehicleParams::default(), &tol),
            Err(Error::ContractViolation(_))
        ));
    }
}
