//! Campaign output files: per-iteration logs, the report, and plot data.
//!
//! Numbers are written with 12 significant digits in their shortest form,
//! so files are stable across runs and platforms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::CampaignConfig;
use crate::error::{Error, Result};
use crate::harness::{Campaign, CampaignReport, OracleResult};
use crate::memory::{suffix_costs, IterationLog, StepDiagnostics, StepStatus};
use crate::route::RouteProfile;
use crate::vehicle::{fuel, ControlInput, FuelParams, RoadGrade, VehicleState};

pub const LOG_HEADER: &str = "iter,k,s_m,v_mps,F_N,Ft_N,Fb_N,fuel,theta_true_rad,theta_bar_rad,solver_status,fallback";
pub const FUEL_HEADER: &str = "iter,total_fuel,normalized_fuel,arrival_step,fallback_steps";
pub const VELOCITY_HEADER: &str = "iter,k,s_m,v_mps";
pub const FORCE_HEADER: &str = "iter,k,s_m,F_N";
pub const ORACLE_HEADER: &str = "k,s_m,v_mps,F_N,Ft_N,Fb_N,fuel,theta_true_rad";

pub const REPORT_FILE: &str = "report.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const FUEL_FILE: &str = "fuel_per_iteration.csv";
pub const VELOCITY_FILE: &str = "velocity_profiles.csv";
pub const FORCE_FILE: &str = "force_profiles.csv";
pub const ORACLE_FILE: &str = "oracle_trajectory.csv";
pub const ORACLE_SUMMARY_FILE: &str = "oracle.toml";

pub fn log_file_name(iteration: usize) -> String {
    format!("iter_{iteration:03}.csv")
}

/// `x` rounded to 12 significant digits, printed in shortest form.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let r: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    // Avoid "-0" in files.
    format!("{}", if r == 0.0 { 0.0 } else { r })
}

pub fn log_to_csv(log: &IterationLog) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for k in 0..=log.horizon {
        let x = &log.states[k];
        let u = &log.inputs[k];
        let d = &log.diagnostics[k];
        let _ = writeln!(
            out,
            "{},{k},{},{},{},{},{},{},{},{},{},{}",
            log.iteration,
            fmt_num(x.s),
            fmt_num(x.v),
            fmt_num(x.force),
            fmt_num(u.traction),
            fmt_num(u.braking),
            fmt_num(log.stage_costs[k]),
            fmt_num(log.theta_true[k]),
            log.theta_bar[k].map(fmt_num).unwrap_or_default(),
            d.status.as_str(),
            u8::from(d.fallback),
        );
    }
    out
}

/// Reads a log written by [`log_to_csv`]. Solver iteration counts and KKT
/// residuals are not stored and come back as zero.
pub fn parse_log_csv(text: &str, path: &Path) -> Result<IterationLog> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOG_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header `{LOG_HEADER}`, found `{h}`"))),
        None => return Err(err(1, "empty log file".into())),
    }
    let mut iteration = None;
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut stage_costs = Vec::new();
    let mut theta_true = Vec::new();
    let mut theta_bar = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 12 {
            return Err(err(line_no, format!("expected 12 columns, found {}", cols.len())));
        }
        let int = |c: usize| -> Result<usize> {
            cols[c]
                .parse()
                .map_err(|_| err(line_no, format!("bad integer `{}` in column {}", cols[c], c + 1)))
        };
        let num = |c: usize| -> Result<f64> {
            cols[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line_no, format!("bad number `{}` in column {}", cols[c], c + 1)))
        };
        let it = int(0)?;
        if *iteration.get_or_insert(it) != it {
            return Err(err(line_no, format!("iteration {it} differs from the first row")));
        }
        if int(1)? != states.len() {
            return Err(err(line_no, format!("expected step {}, found {}", states.len(), cols[1])));
        }
        states.push(VehicleState::new(num(2)?, num(3)?, num(4)?));
        inputs.push(ControlInput::new(num(5)?, num(6)?));
        stage_costs.push(num(7)?);
        theta_true.push(num(8)?);
        theta_bar.push(if cols[9].is_empty() { None } else { Some(num(9)?) });
        let status = StepStatus::parse(cols[10]).ok_or_else(|| err(line_no, format!("unknown status `{}`", cols[10])))?;
        let fallback = match cols[11] {
            "0" => false,
            "1" => true,
            other => return Err(err(line_no, format!("bad fallback flag `{other}`"))),
        };
        diagnostics.push(StepDiagnostics {
            status,
            sqp_iterations: 0,
            kkt_residual: 0.0,
            fallback,
        });
    }
    let Some(iteration) = iteration else {
        return Err(err(2, "log has no rows".into()));
    };
    let arrival_step = diagnostics
        .iter()
        .position(|d| d.status == StepStatus::Arrived)
        .ok_or_else(|| err(2, "log never reaches the goal".into()))?;
    let cost_to_go = suffix_costs(&stage_costs);
    Ok(IterationLog {
        iteration,
        horizon: states.len() - 1,
        arrival_step,
        states,
        inputs,
        stage_costs,
        theta_true,
        theta_bar,
        diagnostics,
        cost_to_go,
    })
}

pub fn report_to_toml(report: &CampaignReport) -> String {
    toml::to_string(report).expect("report serializes")
}

pub fn parse_report(text: &str) -> Result<CampaignReport> {
    toml::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
}

/// Fuel per iteration, normalized to the first log.
pub fn fuel_csv(logs: &[IterationLog]) -> String {
    let base = logs.first().map(|l| l.total_cost()).unwrap_or(1.0);
    let mut out = String::from(FUEL_HEADER);
    out.push('\n');
    for l in logs {
        let norm = if base > 0.0 { l.total_cost() / base } else { 1.0 };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            l.iteration,
            fmt_num(l.total_cost()),
            fmt_num(norm),
            l.arrival_step,
            l.fallback_steps()
        );
    }
    out
}

fn profile_csv(logs: &[IterationLog], header: &str, value: impl Fn(&VehicleState) -> f64) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for l in logs {
        for (k, x) in l.states.iter().enumerate() {
            let _ = writeln!(out, "{},{k},{},{}", l.iteration, fmt_num(x.s), fmt_num(value(x)));
        }
    }
    out
}

pub fn velocity_profiles_csv(logs: &[IterationLog]) -> String {
    profile_csv(logs, VELOCITY_HEADER, |x| x.v)
}

pub fn force_profiles_csv(logs: &[IterationLog]) -> String {
    profile_csv(logs, FORCE_HEADER, |x| x.force)
}

pub fn oracle_to_csv(res: &OracleResult, route: &RouteProfile, fp: &FuelParams) -> String {
    let mut out = String::from(ORACLE_HEADER);
    out.push('\n');
    for (k, x) in res.states.iter().enumerate() {
        let u = res.inputs.get(k).copied().unwrap_or(ControlInput::ZERO);
        let h = if k < res.inputs.len() { fuel(x.v.max(0.0), u.traction, fp) } else { 0.0 };
        let _ = writeln!(
            out,
            "{k},{},{},{},{},{},{},{}",
            fmt_num(x.s),
            fmt_num(x.v),
            fmt_num(x.force),
            fmt_num(u.traction),
            fmt_num(u.braking),
            fmt_num(h),
            fmt_num(route.grade(x.s))
        );
    }
    out
}

pub fn oracle_summary(res: &OracleResult) -> String {
    format!(
        "objective = {}\nstatus = \"{}\"\nsqp_iterations = {}\nmax_violation = {}\n",
        fmt_num(res.objective),
        res.status.as_str(),
        res.sqp_iterations,
        fmt_num(res.max_violation)
    )
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the logs, the effective configuration, the report and the plot data.
pub fn write_campaign(dir: &Path, cfg: &CampaignConfig, campaign: &Campaign) -> Result<()> {
    create_dir(dir)?;
    for log in campaign.memory.logs() {
        write_file(&dir.join(log_file_name(log.iteration)), &log_to_csv(log))?;
    }
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write_file(&dir.join(REPORT_FILE), &report_to_toml(&campaign.report))?;
    write_products(dir)?;
    Ok(())
}

/// Log files in `dir`, sorted by name.
pub fn log_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("iter_") && name.ends_with(".csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_logs(dir: &Path) -> Result<Vec<IterationLog>> {
    let files = log_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no iteration logs in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_log_csv(&text, p)
        })
        .collect()
}

/// Regenerates the plot data from the logs on disk. Returns the paths written.
pub fn write_products(dir: &Path) -> Result<Vec<PathBuf>> {
    let logs = read_logs(dir)?;
    let products = [
        (FUEL_FILE, fuel_csv(&logs)),
        (VELOCITY_FILE, velocity_profiles_csv(&logs)),
        (FORCE_FILE, force_profiles_csv(&logs)),
    ];
    let mut written = Vec::new();
    for (name, text) in products {
        let path = dir.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}
