use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pdgd_core::experiment::ExperimentSection;
use pdgd_core::fixtures;
use pdgd_core::primal::uniform_occupancy;
use pdgd_core::{
    compute_metrics, run_matrix, run_with_oracle, solve_offline, Environment, ExperimentConfig, OccupancyPolytope,
};

#[derive(Parser)]
#[command(name = "pdgd", version, about = "Primal-dual learning in episodic constrained MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learner once and write its trace.
    Simulate(Common),
    /// Print the offline oracle report for each checkpoint.
    Oracle(Common),
    /// Run the experiment grid and evaluate its criteria.
    Matrix(Common),
    /// Self-test the built-in fixtures, and the config when one is given.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON with cmdp, environment, algorithm and
    /// experiment sections).
    #[arg(long)]
    config: PathBuf,
    /// Seed for `simulate`; first seed of the grid for `matrix`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Projection tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Confidence parameter.
    #[arg(long)]
    delta: Option<f64>,
    /// Episode budget, replacing the config's checkpoint grid.
    #[arg(long)]
    episodes: Option<usize>,
    /// Number of seeds per checkpoint (`matrix` only).
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Oracle(args) => oracle(&args),
        Command::Matrix(args) => matrix(&args),
        Command::Validate(args) => validate(&args),
    }
}

fn base_dir(path: &Path) -> Option<&Path> {
    path.parent().filter(|p| !p.as_os_str().is_empty())
}

fn load(args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(tol) = args.tol {
        cfg.algorithm.projection_tol = tol;
    }
    if let Some(delta) = args.delta {
        cfg.algorithm.delta = delta;
    }
    if let Some(t) = args.episodes {
        cfg.experiment.episodes = vec![t];
    }
    if let Some(n) = args.seeds {
        cfg.experiment.seeds = n;
    }
    if let Some(seed) = args.seed {
        cfg.experiment.seed_base = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn largest_checkpoint(e: &ExperimentSection) -> usize {
    e.episodes.iter().copied().max().unwrap_or_default()
}

fn simulate(args: &Common) -> Result<bool> {
    let cfg = load(args)?;
    let base = base_dir(&args.config);
    let p = cfg.cmdp.resolve(base)?;
    let spec = cfg.environment.resolve(base)?;
    let episodes = largest_checkpoint(&cfg.experiment);
    let env = Environment::new(&spec, p.layout(), episodes, base)?;
    let oracle = solve_offline(&env, &p)?;

    let mut rc = cfg.algorithm.run_config(episodes, cfg.experiment.seed_base);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        rc.trace_csv = Some(out.join("trace.csv"));
        rc.summary_json = Some(out.join("summary.json"));
    }
    let trace = run_with_oracle(&rc, &p, &env, &oracle)?;
    let metrics = compute_metrics(&trace, &oracle)?;
    if let Some(out) = &args.out {
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    }

    let s = &trace.summary;
    println!("episodes          {}", s.episodes);
    println!("seed              {}", s.seed);
    println!("OPT               {}", fmt_opt(s.opt));
    println!("rho               {:.6}", s.rho);
    println!("regret            {}", fmt_opt(s.regret));
    println!("violation         {:.6}", s.violation);
    println!("violation_pos     {:.6}", s.violation_pos);
    println!("cumulative_reward {:.6}", s.cumulative_reward);
    println!("max_lambda_l1     {:.6}", s.max_lambda_l1);
    println!("final_epoch       {}", s.final_epoch);
    println!("coverage_failures {}", s.coverage_failures);
    println!("wall_time_s       {:.3}", trace.wall_time_s);
    Ok(true)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}"))
}

fn oracle(args: &Common) -> Result<bool> {
    let cfg = load(args)?;
    let base = base_dir(&args.config);
    let p = cfg.cmdp.resolve(base)?;
    let spec = cfg.environment.resolve(base)?;
    let mut reports = Vec::new();
    let mut grid = cfg.experiment.episodes.clone();
    grid.sort_unstable();
    grid.dedup();
    for t in grid {
        let env = Environment::new(&spec, p.layout(), t, base)?;
        reports.push(solve_offline(&env, &p)?);
    }
    let text = serde_json::to_string_pretty(&reports)?;
    match &args.out {
        Some(out) => {
            fs::create_dir_all(out)?;
            fs::write(out.join("oracle.json"), &text)?;
            for r in &reports {
                println!(
                    "T={} OPT={} rho={:.6} zeta={} slater={} condition2={} (threshold {:.4})",
                    r.episodes,
                    fmt_opt(r.opt),
                    r.rho,
                    fmt_opt(r.zeta),
                    r.slater_holds,
                    r.condition2_holds,
                    r.condition2_threshold
                );
            }
        }
        None => println!("{text}"),
    }
    Ok(true)
}

fn matrix(args: &Common) -> Result<bool> {
    let cfg = load(args)?;
    let report = run_matrix(&cfg, base_dir(&args.config), args.out.as_deref())?;
    for a in &report.aggregates {
        let med = |s: Option<pdgd_core::experiment::Stats>| fmt_opt(s.map(|s| s.median));
        println!(
            "T={:<6} runs={:<4} failed={:<3} median regret={} violation_pos={} max_lambda_l1={}",
            a.episodes,
            a.runs,
            a.failed,
            med(a.regret),
            med(a.violation_pos),
            med(a.max_lambda_l1)
        );
    }
    for (name, fit) in &report.fits {
        println!("fit {name}: slope={:.4} intercept={:.4}", fit.slope, fit.intercept);
    }
    for c in &report.criteria {
        let req = if c.required { " [required]" } else { "" };
        println!("{}{req}", c.line());
    }
    println!("wall time {:.1}s", report.wall_time_s);
    Ok(report.required_pass())
}

struct Check {
    name: String,
    ok: bool,
    detail: String,
}

fn check(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        ok,
        detail: detail.into(),
    }
}

fn fixture_checks(tol: f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for name in fixtures::CMDP_FIXTURES {
        let p = fixtures::cmdp_by_name(name).expect("listed fixture");
        let poly = OccupancyPolytope::exact(&p);
        let q = poly.project(&uniform_occupancy(p.layout()), tol)?;
        out.push(check(
            format!("cmdp {name}: projection lands in the polytope"),
            poly.contains(q.q.values(), 1e-6),
            format!("residual {:.2e}", q.residual),
        ));
    }
    for name in fixtures::ENVIRONMENT_FIXTURES {
        let spec = fixtures::environment_by_name(name).expect("listed fixture");
        let host = fixtures::CMDP_FIXTURES.iter().find_map(|&c| {
            let p = fixtures::cmdp_by_name(c).expect("listed fixture");
            Environment::new(&spec, p.layout(), 100, None).ok().map(|env| (p, env))
        });
        let Some((p, env)) = host else {
            out.push(check(format!("environment {name}: fits a fixture cmdp"), false, "no matching layout"));
            continue;
        };
        let o = solve_offline(&env, &p)?;
        out.push(check(
            format!("environment {name}: oracle solves"),
            o.opt.is_some(),
            format!("OPT {} rho {:.4}", fmt_opt(o.opt), o.rho),
        ));
    }
    let p = fixtures::t1_cmdp();
    let env = Environment::new(&fixtures::t1_environment(), p.layout(), 2000, None)?;
    let o = solve_offline(&env, &p)?;
    let opt = o.opt.unwrap_or(f64::NAN);
    let zeta = o.zeta.unwrap_or(f64::NAN);
    out.push(check(
        "t1 oracle: OPT = 0.5, rho = 1, zeta = 80",
        (opt - 0.5).abs() <= 1e-7 && (o.rho - 1.0).abs() <= 1e-7 && (zeta - 80.0).abs() <= 1e-6,
        format!("OPT {opt:.9} rho {:.9} zeta {zeta:.6}", o.rho),
    ));
    Ok(out)
}

fn config_checks(path: &Path, tol: Option<f64>, delta: Option<f64>) -> Vec<Check> {
    let mut out = Vec::new();
    let cfg = match ExperimentConfig::from_path(path) {
        Ok(mut cfg) => {
            if let Some(t) = tol {
                cfg.algorithm.projection_tol = t;
            }
            if let Some(d) = delta {
                cfg.algorithm.delta = d;
            }
            cfg
        }
        Err(err) => {
            out.push(check("config parses", false, err.to_string()));
            return out;
        }
    };
    out.push(check("config parses", true, path.display().to_string()));
    let valid = cfg.validate();
    out.push(check("config is consistent", valid.is_ok(), valid.err().map(|e| e.to_string()).unwrap_or_default()));
    let base = base_dir(path);
    let resolved = cfg
        .cmdp
        .resolve(base)
        .and_then(|p| cfg.environment.resolve(base).map(|s| (p, s)));
    let (p, spec) = match resolved {
        Ok(v) => v,
        Err(err) => {
            out.push(check("cmdp and environment resolve", false, err.to_string()));
            return out;
        }
    };
    out.push(check(
        "cmdp and environment resolve",
        true,
        format!("{} states, {} actions, m = {}", p.layout().num_states(), p.layout().num_actions(), spec.m),
    ));
    for &t in &cfg.experiment.episodes {
        let res = Environment::new(&spec, p.layout(), t, base).and_then(|env| solve_offline(&env, &p));
        match res {
            Ok(o) => out.push(check(
                format!("oracle at T = {t}"),
                o.opt.is_some(),
                format!(
                    "OPT {} rho {:.4} slater {} condition2 {}",
                    fmt_opt(o.opt),
                    o.rho,
                    o.slater_holds,
                    o.condition2_holds
                ),
            )),
            Err(err) => out.push(check(format!("oracle at T = {t}"), false, err.to_string())),
        }
    }
    out
}

fn validate(args: &ValidateArgs) -> Result<bool> {
    let tol = args.tol.unwrap_or(1e-9);
    if !(tol > 0.0) {
        bail!("--tol must be positive");
    }
    let mut checks = fixture_checks(tol)?;
    if let Some(path) = &args.config {
        checks.extend(config_checks(path, args.tol, args.delta));
    }
    for c in &checks {
        println!("{} {}: {}", if c.ok { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.ok))
}
