//! The `mfhom` command line.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::artifact::{num, Manifest, RunArtifact, SCHEMA_VERSION};
use super::config::{ExperimentConfig, FluctuationFn};
use super::studies::{self, Status};
use crate::dynamics::SlowFastSummary;
use crate::error::{Error, Result};
use crate::homogenize::{write_coefficient_csv, LimitSummary};
use crate::model::validate_model;
use crate::poisson::Integrand;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Probes of the `validate` subcommand.
const VALIDATE_PROBES: usize = 256;

#[derive(Parser, Debug)]
#[command(name = "mfhom", version, about = "Slow/fast McKean-Vlasov simulation and homogenization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Probe the dissipativity condition of the model.
    Validate(RunArgs),
    /// Run the ε-system for each ε and the limit equation.
    Simulate(RunArgs),
    /// Ergodicity study of the frozen and decoupled fast equations.
    Invariant(RunArgs),
    /// Validate the Poisson solver.
    Poisson(RunArgs),
    /// Effective coefficients and a long run of the limit equation.
    Homogenize(RunArgs),
    /// Weak error against ε and its log-log slope.
    Converge(RunArgs),
    /// Fluctuation integral of a centered function against ε.
    Fluctuate(RunArgs),
    /// Langevin constants and the Langevin-form limit.
    LangevinDemo(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat JSON config; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Simulate(_) => "simulate",
            Command::Invariant(_) => "invariant",
            Command::Poisson(_) => "poisson",
            Command::Homogenize(_) => "homogenize",
            Command::Converge(_) => "converge",
            Command::Fluctuate(_) => "fluctuate",
            Command::LangevinDemo(_) => "langevin-demo",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Validate(a)
            | Command::Simulate(a)
            | Command::Invariant(a)
            | Command::Poisson(a)
            | Command::Homogenize(a)
            | Command::Converge(a)
            | Command::Fluctuate(a)
            | Command::LangevinDemo(a) => a,
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                key: "--config".into(),
                reason: format!("cannot read {}: {e}", path.display()),
            })?;
            ExperimentConfig::from_json_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.check()?;
    cfg.model_spec()?;
    Ok(cfg)
}

/// Runs the command line; returns the process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    let name = cli.command.name();
    let args = cli.command.args();
    if args.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut art = match RunArtifact::create(&args.out) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: cannot create output directory {}: {e}", args.out.display());
            return EXIT_USAGE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    let started_at = chrono::Utc::now().to_rfc3339();
    let outcome = pool.install(|| run(&cli.command, &cfg, &mut art));
    let status = match outcome {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            let report = ErrorReport { schema_version: SCHEMA_VERSION, subcommand: name, status: Status::Fail, error: e.to_string() };
            if let Err(w) = art.write_json("report.json", &report) {
                eprintln!("error: {w}");
            }
            Status::Fail
        }
    };
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        engine: env!("CARGO_PKG_NAME").into(),
        engine_version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        seed: cfg.seed,
        threads: args.threads,
        config_hash: cfg.hash(),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        status: status.as_str().into(),
        files: vec![],
    };
    if let Err(e) = art.write_manifest(&manifest) {
        eprintln!("error: {e}");
        return EXIT_FAIL;
    }
    println!("{name}: {}", status.as_str());
    status.exit_code()
}

#[derive(Serialize)]
struct ErrorReport {
    schema_version: u32,
    subcommand: &'static str,
    status: Status,
    error: String,
}

/// Study reports carry their own schema version and status.
#[derive(Serialize)]
struct Tagged<'a, R: Serialize> {
    subcommand: &'a str,
    #[serde(flatten)]
    report: &'a R,
}

#[derive(Serialize)]
struct ValidateReport<'a> {
    schema_version: u32,
    status: Status,
    #[serde(flatten)]
    validation: &'a crate::model::ValidationReport,
}

fn write_report<R: Serialize>(art: &mut RunArtifact, sub: &str, report: &R) -> Result<()> {
    art.write_json("report.json", &Tagged { subcommand: sub, report })
}

fn slow_fast_rows(path: &[SlowFastSummary]) -> Vec<Vec<String>> {
    path.iter()
        .map(|s| {
            vec![
                num(s.t),
                num(s.slow_mean[0]),
                num(s.slow_var[0]),
                num(s.slow_second_moment[0]),
                num(s.fast_mean[0]),
                num(s.fast_var[0]),
            ]
        })
        .collect()
}

const SLOW_FAST_HEADER: [&str; 6] = ["t", "slow_mean", "slow_var", "slow_second_moment", "fast_mean", "fast_var"];
const LIMIT_HEADER: [&str; 4] = ["t", "mean", "variance", "second_moment"];

fn limit_rows(path: &[LimitSummary]) -> Vec<Vec<String>> {
    path.iter().map(|s| vec![num(s.t), num(s.mean[0]), num(s.variance[0]), num(s.second_moment[0])]).collect()
}

fn write_eps_paths(art: &mut RunArtifact, paths: &[(f64, Vec<SlowFastSummary>)]) -> Result<()> {
    for (k, (_, p)) in paths.iter().enumerate() {
        art.write_csv(&format!("plotdata/eps_{k}.csv"), &SLOW_FAST_HEADER, &slow_fast_rows(p))?;
    }
    Ok(())
}

fn run(cmd: &Command, cfg: &ExperimentConfig, art: &mut RunArtifact) -> Result<Status> {
    let sub = cmd.name();
    match cmd {
        Command::Validate(_) => {
            let model = cfg.model_spec()?;
            let r = validate_model(&model, VALIDATE_PROBES, cfg.seed)?;
            let status = if r.passed { Status::Pass } else { Status::Fail };
            art.write_csv(
                "summary.csv",
                &["passed", "probes", "violations", "worst_margin", "worst_probe", "c1", "c2"],
                &[vec![
                    r.passed.to_string(),
                    r.probes.to_string(),
                    r.violations.to_string(),
                    num(r.worst_margin),
                    r.worst_probe.to_string(),
                    num(r.c1),
                    num(r.c2),
                ]],
            )?;
            write_report(art, sub, &ValidateReport { schema_version: SCHEMA_VERSION, status, validation: &r })?;
            Ok(status)
        }
        Command::Simulate(_) => {
            let run = studies::run_simulate(cfg)?;
            let r = &run.report;
            let rows: Vec<Vec<String>> = r
                .rows
                .iter()
                .map(|w| {
                    vec![
                        num(w.eps),
                        num(w.h),
                        num(w.slow_mean),
                        num(w.slow_var),
                        num(w.fast_mean),
                        num(w.fast_var),
                        num(w.w2_to_limit),
                        num(w.noise_floor),
                    ]
                })
                .collect();
            art.write_csv(
                "summary.csv",
                &["eps", "h", "slow_mean", "slow_var", "fast_mean", "fast_var", "w2_to_limit", "noise_floor"],
                &rows,
            )?;
            write_eps_paths(art, &run.eps_paths)?;
            art.write_csv("plotdata/limit.csv", &LIMIT_HEADER, &limit_rows(&run.limit_path))?;
            write_report(art, sub, r)?;
            Ok(r.status)
        }
        Command::Invariant(_) => {
            let r = studies::run_ergodicity_test(cfg)?;
            let rows: Vec<Vec<String>> = r
                .runs
                .iter()
                .map(|u| {
                    vec![
                        num(u.init_mean),
                        num(u.init_var),
                        u.converged.to_string(),
                        num(u.burn_in),
                        num(u.fitted_rate),
                        num(u.final_mean),
                        num(u.final_var),
                        num(u.noise_floor),
                    ]
                })
                .collect();
            art.write_csv(
                "summary.csv",
                &["init_mean", "init_var", "converged", "burn_in", "fitted_rate", "final_mean", "final_var", "noise_floor"],
                &rows,
            )?;
            for (k, u) in r.runs.iter().enumerate() {
                let rows = u.times.iter().zip(&u.w2_to_final).map(|(t, w)| vec![num(*t), num(*w)]).collect::<Vec<_>>();
                art.write_csv(&format!("plotdata/decay_{k}.csv"), &["t", "w2_to_final"], &rows)?;
            }
            for (k, d) in r.decoupled.iter().enumerate() {
                let rows = (0..d.times.len())
                    .map(|j| vec![num(d.times[j]), num(d.gaps[j]), num(d.std_errors[j])])
                    .collect::<Vec<_>>();
                art.write_csv(&format!("plotdata/decoupled_{k}.csv"), &["t", "gap", "std_error"], &rows)?;
            }
            write_report(art, sub, &r)?;
            Ok(r.status)
        }
        Command::Poisson(_) => {
            let r = studies::run_poisson_validation(cfg)?;
            let rows: Vec<Vec<String>> = r
                .checks
                .iter()
                .map(|c| vec![c.name.clone(), c.status.as_str().into(), num(c.deviation), num(c.max_std_error)])
                .collect();
            art.write_csv("summary.csv", &["check", "status", "deviation", "max_std_error"], &rows)?;
            let rows: Vec<Vec<String>> = r
                .residuals
                .records
                .iter()
                .map(|q| vec![q.probe.to_string(), num(q.y[0]), num(q.nu_mean[0]), num(q.residual), num(q.std_error)])
                .collect();
            art.write_csv("plotdata/residuals.csv", &["probe", "y", "nu_mean", "residual", "std_error"], &rows)?;
            write_report(art, sub, &r)?;
            Ok(r.status)
        }
        Command::Homogenize(_) => {
            let run = studies::run_homogenize(cfg)?;
            let mut buf = Vec::new();
            write_coefficient_csv(&run.report.coefficients, &mut buf)?;
            art.write_bytes("summary.csv", &buf)?;
            art.write_csv("plotdata/limit.csv", &LIMIT_HEADER, &limit_rows(&run.limit_path))?;
            write_report(art, sub, &run.report)?;
            Ok(run.report.status)
        }
        Command::Converge(_) => {
            let run = studies::run_convergence(cfg)?;
            let r = &run.report;
            let rows: Vec<Vec<String>> = r
                .rows
                .iter()
                .map(|w| vec![num(w.eps), num(w.h), num(w.value), num(w.value_std_error), num(w.error), num(w.std_error)])
                .collect();
            art.write_csv("summary.csv", &["eps", "h", "value", "value_std_error", "error", "std_error"], &rows)?;
            write_eps_paths(art, &run.eps_paths)?;
            if !run.limit_path.is_empty() {
                art.write_csv("plotdata/limit.csv", &LIMIT_HEADER, &limit_rows(&run.limit_path))?;
            }
            write_report(art, sub, r)?;
            Ok(r.status)
        }
        Command::Fluctuate(_) => {
            let f: Integrand<'_, f64> = match cfg.fluctuation_f {
                FluctuationFn::Fast => Integrand::of_y(|y| y[0]),
                FluctuationFn::Zero => Integrand::zero(1),
                FluctuationFn::One => Integrand::of_y(|_| 1.0),
            };
            let r = studies::run_fluctuation_test(cfg, &f)?;
            let rows: Vec<Vec<String>> =
                r.rows.iter().map(|w| vec![num(w.eps), num(w.estimate), num(w.std_error)]).collect();
            art.write_csv("summary.csv", &["eps", "estimate", "std_error"], &rows)?;
            write_report(art, sub, &r)?;
            Ok(r.status)
        }
        Command::LangevinDemo(_) => {
            let run = studies::run_langevin_demo(cfg)?;
            let r = &run.report;
            let k = &r.constants;
            let rows: Vec<Vec<String>> = [("c1", k.c1), ("c2", k.c2), ("c3", k.c3)]
                .iter()
                .enumerate()
                .map(|(i, (n, v))| vec![n.to_string(), num(*v), num(k.std_errors[i]), num(r.expected[i])])
                .collect();
            art.write_csv("summary.csv", &["constant", "value", "std_error", "expected"], &rows)?;
            art.write_csv("plotdata/eps.csv", &SLOW_FAST_HEADER, &slow_fast_rows(&run.eps_path))?;
            art.write_csv("plotdata/general_limit.csv", &LIMIT_HEADER, &limit_rows(&run.general_path))?;
            art.write_csv("plotdata/langevin_limit.csv", &LIMIT_HEADER, &limit_rows(&run.langevin_path))?;
            write_report(art, sub, r)?;
            Ok(r.status)
        }
    }
}
