mod common;

use pcc_lmpc::lmpc::SolverConfig;
use pcc_lmpc::ocp::{solve_ocp, GradeModel, OcpProblem, OcpSolution, OcpStatus, StageCost};
use pcc_lmpc::vehicle::{model_step, ControlInput, FuelParams, VehicleParams, VehicleState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instance whose terminal pin is reached by a known input sequence.
fn instance(seed: u64) -> OcpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = VehicleParams {
        t_s: 0.2,
        ..VehicleParams::default()
    };
    let n = rng.gen_range(10..25);
    let theta = rng.gen_range(-0.03..0.03);
    let x0 = VehicleState::new(0.0, rng.gen_range(3.0..12.0), rng.gen_range(-500.0..800.0));
    let mut x = x0;
    for _ in 0..n {
        let u = ControlInput::from_net(rng.gen_range(-800.0..1500.0));
        x = model_step(&x, &u, theta, &p);
    }
    let mut prob = OcpProblem::new(n, x0, p, GradeModel::Constant(theta), StageCost::Fuel(FuelParams::default()));
    prob.position_scale = 100.0;
    prob.pins.push((n, x));
    prob
}

fn solve(prob: &OcpProblem) -> OcpSolution {
    let opts = SolverConfig::default().options();
    solve_ocp(prob, &vec![ControlInput::ZERO; prob.horizon], &opts).unwrap()
}

/// Re-simulates the inputs and checks every constraint without using the
/// solver's own rollout. Returns the largest violation in physical units
/// divided by the variable scale.
fn violation(prob: &OcpProblem, sol: &OcpSolution) -> f64 {
    let p = &prob.params;
    let theta = match prob.grade {
        GradeModel::Constant(t) => t,
        _ => unreachable!(),
    };
    let mut worst: f64 = 0.0;
    let mut x = prob.x0;
    for (k, u) in sol.inputs.iter().enumerate() {
        worst = worst.max(-u.traction / p.f_max).max((u.traction - p.f_max) / p.f_max);
        worst = worst.max(u.braking / p.f_max).max((p.f_min - u.braking) / p.f_max);
        x = model_step(&x, u, theta, p);
        let logged = sol.states[k + 1];
        worst = worst
            .max((x.s - logged.s).abs() / prob.position_scale)
            .max((x.v - logged.v).abs() / p.v_max)
            .max((x.force - logged.force).abs() / p.f_max);
        worst = worst.max(-x.v / p.v_max).max((x.v - p.v_max) / p.v_max);
    }
    for (k, target) in &prob.pins {
        let y = sol.states[*k];
        worst = worst
            .max((y.s - target.s).abs() / prob.position_scale)
            .max((y.v - target.v).abs() / p.v_max)
            .max((y.force - target.force).abs() / p.f_max);
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimal_solutions_satisfy_every_constraint(seed in any::<u64>()) {
        let prob = instance(seed);
        let sol = solve(&prob);
        if sol.status == OcpStatus::Optimal {
            prop_assert!(violation(&prob, &sol) <= 1e-6, "violation {}", violation(&prob, &sol));
        }
    }

    #[test]
    fn merit_never_increases(seed in any::<u64>()) {
        let sol = solve(&instance(seed));
        prop_assert!(sol.merit_history.windows(2).all(|w| w[1] <= w[0]), "{:?}", sol.merit_history);
    }

    #[test]
    fn cost_scaling_leaves_the_argmin(seed in any::<u64>(), log_alpha in -1.0f64..1.0) {
        let alpha = 10f64.powf(log_alpha);
        let prob = instance(seed);
        let mut scaled = prob.clone();
        scaled.stage_cost = prob.stage_cost.scaled(alpha);
        let (a, b) = (solve(&prob), solve(&scaled));
        prop_assume!(a.status == OcpStatus::Optimal && b.status == OcpStatus::Optimal);
        for (x, y) in a.states.iter().zip(&b.states) {
            prop_assert!((x.s - y.s).abs() <= 1e-6 * prob.position_scale, "{x:?} {y:?}");
            prop_assert!((x.v - y.v).abs() <= 1e-6 * prob.params.v_max, "{x:?} {y:?}");
            prop_assert!((x.force - y.force).abs() <= 1e-6 * prob.params.f_max, "{x:?} {y:?}");
        }
        prop_assert!((b.objective - alpha * a.objective).abs() <= 1e-6 * (alpha * a.objective).abs().max(1e-9));
    }
}

#[test]
fn most_instances_solve_to_optimality() {
    let optimal = (0..40).filter(|&s| solve(&instance(s)).status == OcpStatus::Optimal).count();
    assert!(optimal >= 30, "{optimal}/40 optimal");
}
