use nalgebra::{Matrix3, Matrix3x2, Vector3, Vector5};
use pcc_lmpc::grade::GradeCoeffs;
use pcc_lmpc::vehicle::{
    linearize_dynamics, model_step, quadraticize_cost, ControlInput, FuelParams, RoadGrade, VehicleParams, VehicleState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A smooth grade model, quadratic over the whole sampled range.
pub fn smooth_grade() -> GradeCoeffs {
    GradeCoeffs {
        a0: 0.02,
        a1: -8e-5,
        a2: 6e-8,
        s_anchor: 0.0,
        valid_to: 1000.0,
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, p: &VehicleParams) -> (VehicleState, ControlInput) {
    let x = VehicleState::new(rng.gen_range(1.0..999.0), rng.gen_range(0.5..p.v_max), rng.gen_range(p.f_min..p.f_max));
    let u = ControlInput::new(rng.gen_range(0.0..p.f_max), rng.gen_range(p.f_min..0.0));
    (x, u)
}

fn step(x: &Vector3<f64>, u: &ControlInput, grade: &GradeCoeffs, p: &VehicleParams) -> Vector3<f64> {
    let x = VehicleState::from_vector(x);
    model_step(&x, u, grade.grade(x.s), p).to_vector()
}

/// Central differences of the model step in the state and input.
pub fn fd_jacobians(x: &VehicleState, u: &ControlInput, grade: &GradeCoeffs, p: &VehicleParams) -> (Matrix3<f64>, Matrix3x2<f64>) {
    let xv = x.to_vector();
    let mut a = Matrix3::zeros();
    for c in 0..3 {
        let h = 1e-6 * xv[c].abs().max(1.0);
        let mut hi = xv;
        let mut lo = xv;
        hi[c] += h;
        lo[c] -= h;
        a.set_column(c, &((step(&hi, u, grade, p) - step(&lo, u, grade, p)) / (2.0 * h)));
    }
    let mut b = Matrix3x2::zeros();
    for c in 0..2 {
        let h = 1e-3;
        let (mut hi, mut lo) = (*u, *u);
        if c == 0 {
            hi.traction += h;
            lo.traction -= h;
        } else {
            hi.braking += h;
            lo.braking -= h;
        }
        b.set_column(c, &((step(&xv, &hi, grade, p) - step(&xv, &lo, grade, p)) / (2.0 * h)));
    }
    (a, b)
}

/// Central differences of the fuel stage cost over (s, v, F, F_t, F_b).
pub fn fd_cost_gradient(x: &VehicleState, u: &ControlInput, fp: &FuelParams) -> Vector5<f64> {
    let f = |z: &Vector5<f64>| {
        quadraticize_cost(&VehicleState::new(z[0], z[1], z[2]), &ControlInput::new(z[3], z[4]), fp).value
    };
    let z = Vector5::new(x.s, x.v, x.force, u.traction, u.braking);
    let mut g = Vector5::zeros();
    for c in 0..5 {
        let h = 1e-6 * z[c].abs().max(1.0);
        let (mut hi, mut lo) = (z, z);
        hi[c] += h;
        lo[c] -= h;
        g[c] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

/// Largest relative mismatch (in the max norm of each matrix) between the
/// analytic linearizations and central differences over `count` points.
pub fn linearization_sweep(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = VehicleParams {
        t_s: 0.2,
        ..VehicleParams::default()
    };
    let fp = FuelParams::default();
    let grade = smooth_grade();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (x, u) = random_point(&mut rng, &p);
        let lin = linearize_dynamics(&x, &grade, &p);
        let (a, b) = fd_jacobians(&x, &u, &grade, &p);
        worst = worst.max((lin.a - a).amax() / lin.a.amax());
        worst = worst.max((lin.b - b).amax() / lin.b.amax());
        let g = quadraticize_cost(&x, &u, &fp).gradient;
        worst = worst.max((g - fd_cost_gradient(&x, &u, &fp)).amax() / g.amax());
    }
    worst
}
