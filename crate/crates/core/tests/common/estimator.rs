use pcc_lmpc::grade::{eval_grade, fit_local_quadratic, ObservationStore};
use pcc_lmpc::harness::{run_iteration, BaselineController, TripSetup};
use pcc_lmpc::memory::IterationLog;
use pcc_lmpc::route::{ArrivalTolerance, RouteProfile};
use pcc_lmpc::vehicle::{FuelParams, RoadGrade, VehicleParams};

/// Generating polynomial of the test route.
pub const QUAD: [f64; 3] = [0.03, -2.4e-4, 4e-7];

pub fn quad_grade(s: f64) -> f64 {
    QUAD[0] + s * (QUAD[1] + s * QUAD[2])
}

/// 600 m of quadratic grade, sampled every 0.25 m so the interpolated table
/// stays within 1e-9 rad of the polynomial. The table runs on past the goal
/// so braking overshoot still sees the same polynomial.
pub fn quadratic_route() -> RouteProfile {
    let samples = (0..=2600).map(|i| i as f64 * 0.25).map(|s| (s, quad_grade(s))).collect();
    RouteProfile::new(samples, 600.0).expect("route is valid")
}

/// Noiseless baseline trip over the quadratic route; returns the log and
/// the observations it produced.
pub fn logged_trip(route: &RouteProfile) -> (IterationLog, ObservationStore) {
    let params = VehicleParams {
        t_s: 0.2,
        ..VehicleParams::default()
    };
    let fuel = FuelParams::default();
    let tol = ArrivalTolerance::default();
    let setup = TripSetup {
        route,
        params: &params,
        fuel: &fuel,
        tolerance: &tol,
        time_budget: 600,
    };
    let mut c = BaselineController {
        v_ref: 10.0,
        gain: 0.2,
        decel: 1.5,
        route_length: route.length(),
        params,
    };
    let mut store = ObservationStore::default();
    let log = run_iteration(0, &mut c, &setup, &mut store).expect("baseline arrives");
    (log, store)
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorErrors {
    /// Largest |fit(s) - theta(s)| over observations inside each window.
    pub window_error: f64,
    /// Largest |fit(s) - p(s)| against the generating polynomial on a dense
    /// grid over the observed part of each window.
    pub polynomial_error: f64,
    pub windows: usize,
}

/// Fits a quadratic at every logged position and compares it with the truth.
pub fn round_trip(route: &RouteProfile, lookahead: f64) -> EstimatorErrors {
    let (log, store) = logged_trip(route);
    let mut window_error: f64 = 0.0;
    let mut polynomial_error: f64 = 0.0;
    let mut windows = 0;
    for x in &log.states[..log.arrival_step] {
        let fit = fit_local_quadratic(&store, x.s, lookahead, 0.0);
        if fit.samples < 3 {
            continue;
        }
        windows += 1;
        let window = store.window(x.s, x.s + lookahead);
        for o in window {
            window_error = window_error.max((eval_grade(&fit.coeffs, o.s) - route.grade(o.s)).abs());
        }
        // Compare over the span the data covers; beyond it the fit extrapolates.
        let (lo, hi) = (window[0].s, window[window.len() - 1].s);
        for i in 0..=50 {
            let s = lo + (hi - lo) * i as f64 / 50.0;
            polynomial_error = polynomial_error.max((eval_grade(&fit.coeffs, s) - quad_grade(s)).abs());
        }
    }
    EstimatorErrors {
        window_error,
        polynomial_error,
        windows,
    }
}
