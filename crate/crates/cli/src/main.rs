use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcc_lmpc::config::CampaignConfig;
use pcc_lmpc::dp::dp_oracle;
use pcc_lmpc::error::Error;
use pcc_lmpc::harness::{full_horizon_oracle, run_campaign};
use pcc_lmpc::io::{self, fmt_num};
use pcc_lmpc::ocp::OcpStatus;
use pcc_lmpc::route::RouteProfile;

#[derive(Parser)]
#[command(name = "pcc-lmpc", version, about = "Learning MPC for fuel-efficient driving over repeated trips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the baseline trip and the learning iterations.
    Run {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Number of learning iterations after the baseline.
        #[arg(long, value_name = "J")]
        iterations: Option<usize>,
    },
    /// Solve the whole trip at once with the true grade.
    Oracle {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Also run the dynamic-programming oracle on the [dp] grid.
        #[arg(long)]
        dp: bool,
    },
    /// Regenerate the plot data of a finished campaign directory.
    Report {
        dir: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Parse a route file and print a summary.
    ValidateRoute { path: PathBuf },
}

#[derive(Args)]
struct ConfigOpts {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (default: harness.output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config value, e.g. `--set controller.N=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::IterationFailed { .. } | Error::ContractViolation(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { opts, iterations } => cmd_run(&opts, iterations),
        Command::Oracle { opts, dp } => cmd_oracle(&opts, dp),
        Command::Report { dir, quiet } => cmd_report(&dir, quiet),
        Command::ValidateRoute { path } => cmd_validate_route(&path),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(opts: &ConfigOpts, extra: &[String]) -> Result<(CampaignConfig, RouteProfile, PathBuf), Error> {
    if !opts.config.is_file() {
        return Err(Error::Config(format!("config file not found: {}", opts.config.display())));
    }
    let mut overrides = opts.overrides.clone();
    overrides.extend_from_slice(extra);
    let cfg = CampaignConfig::load(&opts.config, &overrides)?;
    cfg.validate()?;
    let route = cfg.load_route()?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.harness.output_dir));
    Ok((cfg, route, out))
}

fn cmd_run(opts: &ConfigOpts, iterations: Option<usize>) -> CmdResult {
    let extra: Vec<String> = iterations.map(|j| format!("harness.iterations={j}")).into_iter().collect();
    let (cfg, route, out) = load(opts, &extra)?;
    let quiet = opts.quiet;
    let mut first = None;
    let campaign = run_campaign(&cfg, &route, |log| {
        if quiet {
            return;
        }
        let cost = log.total_cost();
        let base = *first.get_or_insert(cost);
        eprintln!(
            "iteration {:>2}: fuel {:.4} ({:.4}), arrival step {}, fallback steps {}",
            log.iteration,
            cost,
            if base > 0.0 { cost / base } else { 1.0 },
            log.arrival_step,
            log.fallback_steps()
        );
    })?;
    io::write_campaign(&out, &cfg, &campaign)?;
    if !quiet {
        println!("wrote {} logs and the report to {}", campaign.memory.logs().len(), out.display());
    }
    Ok(())
}

fn cmd_oracle(opts: &ConfigOpts, with_dp: bool) -> CmdResult {
    let (cfg, route, out) = load(opts, &[])?;
    let res = full_horizon_oracle(&cfg, &route)?;
    io::create_dir(&out)?;
    io::write_file(&out.join(io::ORACLE_FILE), &io::oracle_to_csv(&res, &route, &cfg.fuel))?;
    let mut summary = io::oracle_summary(&res);
    let mut dp_feasible = true;
    if with_dp {
        let dp = dp_oracle(&cfg, &route, None)?;
        dp_feasible = dp.feasible;
        let _ = write!(
            summary,
            "\n[dp]\nobjective = {}\nrollout_cost = {}\nfeasible = {}\nnodes = {}\n",
            fmt_num(dp.objective),
            fmt_num(dp.rollout_cost),
            dp.feasible,
            dp.grid.nodes()
        );
        if let Some(k) = dp.rollout_arrival {
            let _ = writeln!(summary, "rollout_arrival = {k}");
        }
    }
    io::write_file(&out.join(io::ORACLE_SUMMARY_FILE), &summary)?;
    if !opts.quiet {
        println!(
            "oracle objective {} ({}), written to {}",
            fmt_num(res.objective),
            res.status.as_str(),
            out.display()
        );
    }
    if res.status == OcpStatus::Infeasible {
        return Err(Failure {
            code: 3,
            message: format!("oracle is infeasible (max violation {})", fmt_num(res.max_violation)),
        });
    }
    if !dp_feasible {
        return Err(Failure {
            code: 3,
            message: "dynamic-programming policy does not reach the goal within the budget".into(),
        });
    }
    Ok(())
}

fn cmd_report(dir: &Path, quiet: bool) -> CmdResult {
    let written = io::write_products(dir)?;
    if !quiet {
        for p in written {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn cmd_validate_route(path: &Path) -> CmdResult {
    if !path.is_file() {
        return Err(Error::Config(format!("route file not found: {}", path.display())).into());
    }
    let route = RouteProfile::load(path)?;
    let (lo, hi) = route
        .samples()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, g)| (lo.min(g), hi.max(g)));
    println!(
        "{}: {} m, {} samples, grade {} to {} rad",
        path.display(),
        fmt_num(route.length()),
        route.samples().len(),
        fmt_num(lo),
        fmt_num(hi)
    );
    Ok(())
}
