use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mampc_bench::report::{self, RunOptions, RunOutput, RunSummary, SUMMARY_HEADER};
use mampc_bench::scenario::{build_models, roa_seed, train_policy};
use mampc_bench::{BenchError, Result, ScenarioConfig, TimingStats};
use mampc_core::lqr::largest_validated_radius;
use rayon::prelude::*;

/// Benchmark harness for the LQR / NN / MPC hybrid controller.
#[derive(Debug, Parser)]
#[command(name = "mampc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exit with status 3 when an acceptance gate fails.
    #[arg(long, global = true)]
    gate: bool,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "mampc-out")]
    out_dir: PathBuf,
    /// Timed repeats per controller (default from the config, normally 50).
    #[arg(long, global = true)]
    repeats: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Full pipeline: build, simulate, time and write all artifacts.
    Run,
    /// One run per value of a config key, e.g. `--param nn.hidden=20,50`.
    Sweep {
        #[arg(long)]
        param: String,
    },
    /// Sample the LQR ball on the nonlinear plant and search the largest
    /// passing radius.
    ValidateRoa {
        /// Bisection steps for the largest passing radius.
        #[arg(long, default_value_t = 12)]
        bisections: usize,
    },
    /// Sample the MPC law, train the policy, write policy.mlp and training.csv.
    Train,
    /// Time MAMPC and implicit MPC and write the timing tables.
    Time,
    /// Summarize the trajectory.csv found in --out-dir.
    Report,
}

fn load(c: &Common) -> Result<(ScenarioConfig, Option<PathBuf>)> {
    let path = c.config.as_ref().ok_or_else(|| BenchError::config("--config", "a scenario file is required"))?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.repeats {
        cfg.timing.repeats = r;
    }
    cfg.validate()?;
    Ok((cfg, path.parent().map(Path::to_path_buf)))
}

fn print_stats(title: &str, s: &TimingStats) {
    println!("{title}");
    println!("  {:<7} {:>7} {:>14} {:>14} {:>9} {:>9}", "mode", "steps", "mean_ns", "median_ns", "time%", "step%");
    for m in &s.modes {
        println!(
            "  {:<7} {:>7} {:>14.1} {:>14.1} {:>9.2} {:>9.2}",
            m.tag.name(),
            m.steps,
            m.mean_ns,
            m.median_ns,
            m.time_div_pct,
            m.step_div_pct
        );
    }
    if s.clock_warning {
        println!("  warning: some median step times are below the clock-resolution threshold");
    }
}

fn print_summary(s: &RunSummary) {
    println!("{} / {} (seed {})", s.plant, s.variant, s.seed);
    let mut rows = vec![&s.mampc, &s.implicit_mpc];
    rows.extend(s.lookup.as_ref());
    for c in rows {
        println!("  {:<13} {:<10} steps {:>5}  total {:>12} ns", c.label, c.terminated.name(), c.steps, c.total_ns);
    }
    if let Some(r) = s.loss_ratio {
        println!("  training loss ratio {r:.3e}");
    }
}

fn run(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let opts = RunOptions {
        out_dir: Some(c.out_dir.clone()),
        policy_dir: dir,
        gate: false,
    };
    let out = report::run_scenario(&cfg, &opts)?;
    print_summary(&out.summary);
    print_stats("MAMPC timing (step 0 dropped)", &out.mampc.stats);
    println!("artifacts in {}", c.out_dir.display());
    if c.gate {
        report::check_gates(&cfg, &out.summary)?;
    }
    Ok(())
}

fn sweep_threads() -> Result<usize> {
    match std::env::var("MAMPC_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| BenchError::config("MAMPC_THREADS", format!("expected a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn sweep(c: &Common, param: &str) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let (key, values) = param
        .split_once('=')
        .ok_or_else(|| BenchError::config("--param", "expected key=v1,v2,..."))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(BenchError::config("--param", "no values given"));
    }
    let cfgs: Vec<ScenarioConfig> = values.iter().map(|v| cfg.with_override(key, v)).collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads()?)
        .build()
        .map_err(|e| BenchError::config("MAMPC_THREADS", e.to_string()))?;
    let results: Vec<Result<RunOutput>> = pool.install(|| {
        cfgs.par_iter()
            .zip(&values)
            .map(|(cfg, v)| {
                let opts = RunOptions {
                    out_dir: Some(c.out_dir.join(format!("{key}={v}"))),
                    policy_dir: dir.clone(),
                    gate: false,
                };
                report::run_scenario(cfg, &opts)
            })
            .collect()
    });
    std::fs::create_dir_all(&c.out_dir).map_err(|e| BenchError::io(&c.out_dir, e))?;
    let path = c.out_dir.join("sweep.csv");
    let f = std::fs::File::create(&path).map_err(|e| BenchError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["param".to_string(), "value".to_string()];
    for p in ["mampc", "mpc"] {
        header.extend(SUMMARY_HEADER[1..].iter().map(|h| format!("{p}_{h}")));
    }
    w.write_record(&header)?;
    let mut gate_failures = Vec::new();
    for ((res, v), cfg) in results.into_iter().zip(&values).zip(&cfgs) {
        let out = res?;
        let s = &out.summary;
        let mut row = vec![key.to_string(), v.to_string()];
        row.extend(report::summary_record(&s.mampc).into_iter().skip(1));
        row.extend(report::summary_record(&s.implicit_mpc).into_iter().skip(1));
        w.write_record(&row)?;
        println!("{key}={v}: mampc {} in {} steps, implicit MPC {} in {} steps", s.mampc.terminated.name(), s.mampc.steps, s.implicit_mpc.terminated.name(), s.implicit_mpc.steps);
        if c.gate {
            if let Err(e) = report::check_gates(cfg, s) {
                gate_failures.push(format!("{key}={v}: {e}"));
            }
        }
    }
    w.flush().map_err(|e| BenchError::io(&path, e))?;
    println!("wrote {}", path.display());
    if gate_failures.is_empty() {
        Ok(())
    } else {
        Err(BenchError::Gate(gate_failures.join("; ")))
    }
}

fn validate_roa(c: &Common, bisections: usize) -> Result<()> {
    let (cfg, _) = load(c)?;
    let (plant, _, _, lqr) = build_models(&cfg)?;
    let rep = mampc_bench::scenario::validate_roa(&cfg, &plant, &lqr)?;
    let largest = largest_validated_radius(&plant, &lqr.k, cfg.lqr.roa_radius, cfg.lqr.validate_samples, cfg.lqr.validate_horizon, roa_seed(&cfg), bisections)?;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| BenchError::io(&c.out_dir, e))?;
    report::write_roa_csv(&c.out_dir.join(report::ROA_CSV), &rep, Some(largest))?;
    println!(
        "radius {} over {} interior + {} boundary samples: {} (worst excursion {:.4}, worst terminal norm {:.3e})",
        rep.radius,
        rep.n_samples,
        rep.n_boundary,
        if rep.passed { "passed" } else { "FAILED" },
        rep.worst_excursion,
        rep.worst_terminal_norm
    );
    match largest {
        Some(r) => println!("largest passing radius {r:.6}"),
        None => println!("no passing radius found"),
    }
    if c.gate && !rep.passed {
        return Err(BenchError::Gate(format!("RoA radius {} did not validate", rep.radius)));
    }
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let (cfg, _) = load(c)?;
    let (plant, _, spec, _) = build_models(&cfg)?;
    let (policy, curve, len) = train_policy(&cfg, &plant, &spec)?;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| BenchError::io(&c.out_dir, e))?;
    policy.save(&c.out_dir.join(report::POLICY))?;
    report::write_training_csv(&c.out_dir.join(report::TRAINING_CSV), &curve)?;
    let ratio = curve.last() / curve.initial();
    println!("{len} samples, {} epochs, mse {:.3e} -> {:.3e} (ratio {ratio:.3e})", curve.train.len() - 1, curve.initial(), curve.last());
    println!("wrote {}", c.out_dir.join(report::POLICY).display());
    if c.gate && !(ratio <= cfg.gate.max_loss_ratio) {
        return Err(BenchError::Gate(format!("training loss ratio {ratio:.3e} above {}", cfg.gate.max_loss_ratio)));
    }
    Ok(())
}

fn time(c: &Common) -> Result<()> {
    let (cfg, dir) = load(c)?;
    let opts = RunOptions {
        out_dir: None,
        policy_dir: dir,
        gate: false,
    };
    let out = report::run_scenario(&cfg, &opts)?;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| BenchError::io(&c.out_dir, e))?;
    report::write_timing_csv(&c.out_dir.join(report::TIMING_CSV), &out.mampc.stats)?;
    report::write_timing_csv(&c.out_dir.join(report::MPC_TIMING_CSV), &out.implicit_mpc.stats)?;
    print_summary(&out.summary);
    print_stats("MAMPC (step 0 dropped)", &out.mampc.stats);
    print_stats("implicit MPC (step 0 dropped)", &out.implicit_mpc.stats);
    if c.gate {
        report::check_gates(&cfg, &out.summary)?;
    }
    Ok(())
}

fn show_report(c: &Common) -> Result<()> {
    for (name, title) in [(report::TRAJECTORY_CSV, "MAMPC"), (report::MPC_TRAJECTORY_CSV, "implicit MPC"), (report::LOOKUP_TRAJECTORY_CSV, "lookup")] {
        let path = c.out_dir.join(name);
        if !path.exists() {
            if name == report::TRAJECTORY_CSV {
                return Err(BenchError::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            continue;
        }
        let t = report::read_trajectory_csv(&path)?;
        let last = t.trajectory.last().expect("final row");
        println!("{title}: {} steps, final ‖x‖ = {:.3e}", t.steps(), last.norm());
        print_stats("  up-time division", &t.uptime());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let c = &cli.common;
    let res = match &cli.cmd {
        Cmd::Run => run(c),
        Cmd::Sweep { param } => sweep(c, param),
        Cmd::ValidateRoa { bisections } => validate_roa(c, *bisections),
        Cmd::Train => train(c),
        Cmd::Time => time(c),
        Cmd::Report => show_report(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
