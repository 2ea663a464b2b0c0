mod common;

use pcc_lmpc::dp::{dp_oracle, DpGrid, MAX_NODES};
use pcc_lmpc::harness::full_horizon_oracle;
use pcc_lmpc::ocp::OcpStatus;
use pcc_lmpc::route::RouteProfile;

fn flat_route() -> RouteProfile {
    RouteProfile::flat_200m()
}

#[test]
fn zero_length_route_costs_nothing() {
    let cfg = common::campaigns::flat_200m();
    let res = full_horizon_oracle(&cfg, &RouteProfile::flat(0.0)).unwrap();
    assert_eq!(res.objective, 0.0);
}

#[test]
fn full_horizon_oracle_beats_the_baseline() {
    let cfg = common::campaigns::config(&[
        "route.path=builtin:flat_200m",
        "controller.N_f=150",
        "harness.baseline_speed=8",
        "harness.iterations=1",
        "controller.N=10",
    ]);
    let route = flat_route();
    let oracle = full_horizon_oracle(&cfg, &route).unwrap();
    assert_eq!(oracle.status, OcpStatus::Optimal);
    let campaign = common::campaigns::run(&cfg, &route);
    let baseline = campaign.memory.logs()[0].total_cost();
    assert!(oracle.objective <= baseline, "{} > {baseline}", oracle.objective);
    let end = oracle.states[cfg.controller.time_budget];
    assert!((end.s - 200.0).abs() < 1e-6 && end.v.abs() < 1e-6);
}

#[test]
fn dp_grid_converges_towards_the_continuous_oracle() {
    let cfg = common::campaigns::flat_200m();
    let route = flat_route();
    let oracle = full_horizon_oracle(&cfg, &route).unwrap();
    assert_eq!(oracle.status, OcpStatus::Optimal);

    let fine = DpGrid {
        s_max: route.length() + cfg.dp.position_margin,
        s_nodes: cfg.dp.position_nodes,
        v_top: cfg.dp.velocity_top,
        v_nodes: cfg.dp.velocity_nodes,
        f_nodes: cfg.dp.force_nodes,
    };
    assert!(fine.nodes() <= MAX_NODES);
    let mid = fine.coarsened();
    let coarse = mid.coarsened();
    let run = |g: DpGrid| dp_oracle(&cfg, &route, Some(g)).unwrap();
    let (rc, rm, rf) = (run(coarse), run(mid), run(fine));
    assert!(rf.feasible, "fine-grid policy reaches the goal");

    // Slack of the middle grid, estimated against the coarse one.
    let slack = rm.slack(&rc);
    assert!(rm.objective >= oracle.objective - slack, "{} vs {} - {slack}", rm.objective, oracle.objective);
    assert!(rf.slack(&rm) < slack, "refinement moved {} >= {slack}", rf.slack(&rm));
    assert!(rf.objective >= oracle.objective - rf.slack(&rm));
}

#[test]
fn dp_default_grid_is_the_fine_one() {
    let cfg = common::campaigns::flat_200m();
    let a = dp_oracle(&cfg, &flat_route(), None).unwrap();
    assert_eq!(a.grid.nodes(), 101 * 41 * 11);
    assert_eq!(a.value.len(), a.grid.nodes());
}

#[test]
fn oversized_grid_is_rejected() {
    let cfg = common::campaigns::flat_200m();
    let g = DpGrid {
        s_max: 210.0,
        s_nodes: 1001,
        v_top: 10.0,
        v_nodes: 101,
        f_nodes: 11,
    };
    assert!(dp_oracle(&cfg, &flat_route(), Some(g)).is_err());
}
