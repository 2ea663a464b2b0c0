use pcc_lmpc::config::CampaignConfig;
use pcc_lmpc::harness::{run_campaign, Campaign};
use pcc_lmpc::route::RouteProfile;

pub fn config(overrides: &[&str]) -> CampaignConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    CampaignConfig::parse("", &o).expect("test config parses")
}

/// Default campaign: `rolling_1km`, 8 iterations.
pub fn rolling() -> CampaignConfig {
    config(&[])
}

/// 200 m flat road, 150 steps, 6 iterations.
pub fn flat_200m() -> CampaignConfig {
    config(&[
        "route.path=builtin:flat_200m",
        "controller.N_f=150",
        "harness.baseline_speed=8",
        "harness.iterations=6",
    ])
}

/// A 60 m trip with a short horizon, for exact-set checks.
pub fn toy() -> (CampaignConfig, RouteProfile) {
    let cfg = config(&[
        "controller.N=8",
        "controller.N_f=150",
        "controller.lookahead_m=40",
        "harness.baseline_speed=4",
        "harness.iterations=3",
    ]);
    let route = RouteProfile::from_fn(60.0, 2.0, |s| 0.02 * (s / 60.0 * std::f64::consts::PI).sin()).expect("toy route");
    (cfg, route)
}

pub fn run(cfg: &CampaignConfig, route: &RouteProfile) -> Campaign {
    run_campaign(cfg, route, |_| {}).expect("campaign completes")
}
