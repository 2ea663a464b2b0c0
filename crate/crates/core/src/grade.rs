//! Road grade learning: per-step pitch observations recovered by inverting
//! the logged motion, pooled across trips and fitted locally by a quadratic
//! in position over a look-ahead window.

use serde::{Deserialize, Serialize};

use crate::polyfit::{eval_poly, fit_polynomial};
use crate::route::MAX_ROUTE_GRADE;
use crate::vehicle::{RoadGrade, VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradeObservation {
    pub s: f64,
    pub theta_bar: f64,
    pub iteration: usize,
}

/// Why a logged step produced no grade observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// The plant held the vehicle at zero speed, so the velocity update is not informative.
    Standstill,
    /// The implied gravity term exceeds what any pitch can produce.
    OutOfRange,
    NonFinite,
}

/// Recovers the pitch that explains the velocity change from `x` to `next`.
pub fn invert_grade(
    x: &VehicleState,
    next: &VehicleState,
    p: &VehicleParams,
    iteration: usize,
) -> Result<GradeObservation, Rejection> {
    if !x.is_finite() || !next.is_finite() {
        return Err(Rejection::NonFinite);
    }
    if next.v <= 0.0 {
        return Err(Rejection::Standstill);
    }
    let resistance = p.mass * (next.v - x.v) / p.t_s - x.force;
    let gravity_rolling = -resistance - 0.5 * p.rho * p.area * p.c_d * x.v * x.v;
    let mg = p.mass * p.g;
    let ratio = gravity_rolling / (mg * (1.0 + p.c_r * p.c_r).sqrt());
    if ratio.abs() > 1.0 {
        return Err(Rejection::OutOfRange);
    }
    // m g (c_r cos t + sin t) = m g sqrt(1 + c_r^2) sin(t + atan c_r)
    let theta_bar = ratio.asin() - p.c_r.atan();
    if theta_bar.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Rejection::OutOfRange);
    }
    Ok(GradeObservation {
        s: x.s,
        theta_bar,
        iteration,
    })
}

/// Observations from recent trips, kept sorted by position.
#[derive(Debug, Clone)]
pub struct ObservationStore {
    observations: Vec<GradeObservation>,
    max_iterations: usize,
}

impl Default for ObservationStore {
    fn default() -> Self {
        Self::new(5)
    }
}

impl ObservationStore {
    pub fn new(max_iterations: usize) -> Self {
        Self {
            observations: Vec::new(),
            max_iterations: max_iterations.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn as_slice(&self) -> &[GradeObservation] {
        &self.observations
    }

    pub fn push(&mut self, obs: GradeObservation) {
        let newest = self.observations.iter().map(|o| o.iteration).max();
        if newest.is_none_or(|n| obs.iteration > n) {
            let keep_from = (obs.iteration + 1).saturating_sub(self.max_iterations);
            self.observations.retain(|o| o.iteration >= keep_from);
        }
        let idx = self.observations.partition_point(|o| o.s <= obs.s);
        self.observations.insert(idx, obs);
    }

    /// Observations with `lo <= s <= hi`.
    pub fn window(&self, lo: f64, hi: f64) -> &[GradeObservation] {
        let start = self.observations.partition_point(|o| o.s < lo);
        let end = self.observations.partition_point(|o| o.s <= hi);
        &self.observations[start..end.max(start)]
    }

    pub fn nearest(&self, s: f64) -> Option<&GradeObservation> {
        let idx = self.observations.partition_point(|o| o.s < s);
        let after = self.observations.get(idx);
        let before = idx.checked_sub(1).and_then(|i| self.observations.get(i));
        match (before, after) {
            (Some(b), Some(a)) => Some(if (s - b.s) <= (a.s - s) { b } else { a }),
            (b, a) => b.or(a),
        }
    }
}

/// Local quadratic grade model `a0 + a1 s + a2 s^2`, contracted on
/// `[s_anchor, valid_to]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeCoeffs {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub s_anchor: f64,
    pub valid_to: f64,
}

impl GradeCoeffs {
    pub fn flat(s_anchor: f64, valid_to: f64) -> Self {
        Self::constant(0.0, s_anchor, valid_to)
    }

    pub fn constant(theta: f64, s_anchor: f64, valid_to: f64) -> Self {
        Self {
            a0: theta,
            a1: 0.0,
            a2: 0.0,
            s_anchor,
            valid_to,
        }
    }

    fn raw(&self, s: f64) -> f64 {
        eval_poly(&[self.a0, self.a1, self.a2], s)
    }

    pub fn in_window(&self, s: f64) -> bool {
        (self.s_anchor..=self.valid_to).contains(&s)
    }
}

/// Evaluates the grade model with a safety clamp at the largest admissible pitch.
pub fn eval_grade(c: &GradeCoeffs, s: f64) -> f64 {
    c.raw(s).clamp(-MAX_ROUTE_GRADE, MAX_ROUTE_GRADE)
}

impl RoadGrade for GradeCoeffs {
    fn grade(&self, s: f64) -> f64 {
        eval_grade(self, s)
    }

    fn grade_slope(&self, s: f64) -> f64 {
        if self.raw(s).abs() >= MAX_ROUTE_GRADE {
            0.0
        } else {
            self.a1 + 2.0 * self.a2 * s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradeFitKind {
    Quadratic,
    /// Fewer than three distinct positions in the window.
    Reduced,
    /// Empty window; constant at the nearest observation.
    Nearest,
    /// No observations at all; flat road assumed.
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradeFit {
    pub coeffs: GradeCoeffs,
    pub kind: GradeFitKind,
    pub samples: usize,
    /// First-order optimality of the damped normal equations (scaled basis).
    pub optimality: f64,
}

/// Least-squares quadratic through all stored observations in `[s_now, s_now + lookahead]`.
pub fn fit_local_quadratic(store: &ObservationStore, s_now: f64, lookahead: f64, damping: f64) -> GradeFit {
    let valid_to = s_now + lookahead;
    let window = store.window(s_now, valid_to);
    if window.is_empty() {
        return match store.nearest(s_now) {
            Some(o) => GradeFit {
                coeffs: GradeCoeffs::constant(o.theta_bar, s_now, valid_to),
                kind: GradeFitKind::Nearest,
                samples: 0,
                optimality: 0.0,
            },
            None => GradeFit {
                coeffs: GradeCoeffs::flat(s_now, valid_to),
                kind: GradeFitKind::NoData,
                samples: 0,
                optimality: 0.0,
            },
        };
    }
    let xs: Vec<f64> = window.iter().map(|o| o.s).collect();
    let ys: Vec<f64> = window.iter().map(|o| o.theta_bar).collect();
    let fit = fit_polynomial(&xs, &ys, 2, s_now, lookahead, damping).expect("non-empty window");
    GradeFit {
        coeffs: GradeCoeffs {
            a0: fit.raw[0],
            a1: fit.raw[1],
            a2: fit.raw[2],
            s_anchor: s_now,
            valid_to,
        },
        kind: if fit.degree == 2 {
            GradeFitKind::Quadratic
        } else {
            GradeFitKind::Reduced
        },
        samples: window.len(),
        optimality: fit.optimality,
    }
}
