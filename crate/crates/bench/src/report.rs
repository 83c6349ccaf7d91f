//! CSV artifacts, the run manifest, and the `run` pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use mampc_core::lqr::RoaReport;
use mampc_core::policy_nn::LossCurve;
use nalgebra::DVector;

use crate::config::ScenarioConfig;
use crate::error::{BenchError, Result};
use crate::scenario::{build, Built};
use crate::sim::{SimReport, Tag, Termination};
use crate::timing::{time_controller, timing_stats, TimedRun, TimingStats};

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const MPC_TRAJECTORY_CSV: &str = "trajectory_implicit_mpc.csv";
pub const LOOKUP_TRAJECTORY_CSV: &str = "trajectory_lookup.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const MPC_TIMING_CSV: &str = "timing_implicit_mpc.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const ROA_CSV: &str = "roa.csv";
pub const TRAINING_CSV: &str = "training.csv";
pub const MANIFEST: &str = "manifest.toml";
pub const POLICY: &str = "policy.mlp";

/// Label of the state row written after the last step.
const FINAL_ROW: &str = "FINAL";

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| BenchError::io(path, e))
}

/// `step, mode, x0.., u0.., step_ns`; one row per step plus a final state
/// row with empty input and timing fields.
pub fn write_trajectory_csv(path: &Path, rep: &SimReport) -> Result<()> {
    let n = rep.trajectory[0].len();
    let m = rep.inputs.first().map_or(0, |u| u.len());
    let mut w = writer(path)?;
    let mut header = vec!["step".to_string(), "mode".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|j| format!("u{j}")));
    header.push("step_ns".into());
    w.write_record(&header)?;
    for k in 0..rep.steps {
        let mut row = vec![k.to_string(), rep.modes[k].name().to_string()];
        row.extend(rep.trajectory[k].iter().map(|v| v.to_string()));
        row.extend(rep.inputs[k].iter().map(|v| v.to_string()));
        row.push(rep.per_step_ns[k].to_string());
        w.write_record(&row)?;
    }
    let mut row = vec![rep.steps.to_string(), FINAL_ROW.to_string()];
    row.extend(rep.final_state().iter().map(|v| v.to_string()));
    row.extend((0..m + 1).map(|_| String::new()));
    w.write_record(&row)?;
    flush(w, path)
}

/// Contents of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub trajectory: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub modes: Vec<Tag>,
    pub per_step_ns: Vec<u64>,
}

impl TrajectoryTable {
    pub fn steps(&self) -> usize {
        self.modes.len()
    }

    pub fn uptime(&self) -> TimingStats {
        timing_stats(&self.modes, &self.per_step_ns, 0)
    }
}

fn bad_csv(path: &Path, reason: impl Into<String>) -> BenchError {
    BenchError::config(path.display().to_string(), reason)
}

pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryTable> {
    let f = fs::File::open(path).map_err(|e| BenchError::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let header = r.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with('x')).count();
    let m = header.iter().filter(|h| h.starts_with('u')).count();
    if header.len() != n + m + 3 || n == 0 {
        return Err(bad_csv(path, "unexpected trajectory header"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad_csv(path, format!("bad number `{s}`: {e}")));
    let mut t = TrajectoryTable {
        trajectory: Vec::new(),
        inputs: Vec::new(),
        modes: Vec::new(),
        per_step_ns: Vec::new(),
    };
    let mut finished = false;
    for rec in r.records() {
        let rec = rec?;
        if finished {
            return Err(bad_csv(path, "rows after the final state"));
        }
        let x: Vec<f64> = (0..n).map(|i| num(&rec[2 + i])).collect::<Result<_>>()?;
        t.trajectory.push(DVector::from_vec(x));
        if &rec[1] == FINAL_ROW {
            finished = true;
            continue;
        }
        t.modes.push(rec[1].parse().map_err(|e: String| bad_csv(path, e))?);
        let u: Vec<f64> = (0..m).map(|j| num(&rec[2 + n + j])).collect::<Result<_>>()?;
        t.inputs.push(DVector::from_vec(u));
        let ns = &rec[2 + n + m];
        t.per_step_ns.push(ns.parse().map_err(|_| bad_csv(path, format!("bad step_ns `{ns}`")))?);
    }
    if !finished {
        return Err(bad_csv(path, "missing final state row"));
    }
    Ok(t)
}

pub fn write_timing_csv(path: &Path, stats: &TimingStats) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["mode", "mean_ns", "std_ns", "time_div_pct", "step_div_pct"])?;
    for s in &stats.modes {
        w.write_record([
            s.tag.name().to_string(),
            s.mean_ns.to_string(),
            s.std_ns.to_string(),
            s.time_div_pct.to_string(),
            s.step_div_pct.to_string(),
        ])?;
    }
    flush(w, path)
}

pub fn write_roa_csv(path: &Path, rep: &RoaReport<f64>, largest_passing: Option<Option<f64>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "radius",
        "n_samples",
        "n_boundary",
        "horizon",
        "seed",
        "passed",
        "worst_excursion",
        "worst_terminal_norm",
        "escape_witnesses",
        "largest_passing_radius",
    ])?;
    let largest = match largest_passing {
        Some(Some(r)) => r.to_string(),
        Some(None) => "none".into(),
        None => String::new(),
    };
    w.write_record([
        rep.radius.to_string(),
        rep.n_samples.to_string(),
        rep.n_boundary.to_string(),
        rep.horizon.to_string(),
        rep.seed.to_string(),
        rep.passed.to_string(),
        rep.worst_excursion.to_string(),
        rep.worst_terminal_norm.to_string(),
        rep.escape_witnesses.len().to_string(),
        largest,
    ])?;
    flush(w, path)
}

pub fn write_training_csv(path: &Path, curve: &LossCurve<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for (e, (t, v)) in curve.train.iter().zip(&curve.validation).enumerate() {
        w.write_record([e.to_string(), t.to_string(), v.to_string()])?;
    }
    flush(w, path)
}

/// The resolved config; `mampc run --config manifest.toml` repeats the run.
pub fn write_manifest(path: &Path, cfg: &ScenarioConfig) -> Result<()> {
    let text = format!("# Resolved scenario; rerun with `mampc run --config {MANIFEST}`.\n{}", cfg.to_toml());
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

/// One controller's closed-loop outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSummary {
    pub label: String,
    pub terminated: Termination,
    pub steps: usize,
    /// Sum of per-step medians, step 0 included.
    pub total_ns: u64,
    pub counts: Vec<(Tag, usize)>,
}

impl ControllerSummary {
    fn new(label: &str, run: &TimedRun) -> Self {
        let r = &run.report;
        Self {
            label: label.into(),
            terminated: r.terminated.clone(),
            steps: r.steps,
            total_ns: r.total_ns(),
            counts: Tag::ALL.iter().map(|&t| (t, r.count(t))).filter(|c| c.1 > 0).collect(),
        }
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.counts.iter().find(|c| c.0 == tag).map_or(0, |c| c.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub plant: String,
    pub variant: String,
    pub seed: u64,
    pub mampc: ControllerSummary,
    pub implicit_mpc: ControllerSummary,
    pub lookup: Option<ControllerSummary>,
    pub mampc_stats: TimingStats,
    pub loss_ratio: Option<f64>,
    pub roa_passed: Option<bool>,
}

/// Everything a finished run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub built: Built,
    pub mampc: TimedRun,
    pub implicit_mpc: TimedRun,
    pub lookup: Option<TimedRun>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Artifacts are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Resolves a relative `nn.policy_path`.
    pub policy_dir: Option<PathBuf>,
    pub gate: bool,
}

/// Build, simulate and time every controller of a scenario.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutput> {
    let built = build(cfg, opts.policy_dir.as_deref())?;
    let (max, tol, reps) = (cfg.sim.max_steps, cfg.sim.tol, cfg.timing.repeats);
    let mut hybrid = built.hybrid()?;
    let mampc = time_controller(&mut hybrid, &built.plant, built.x0(), max, tol, reps)?;
    let mut mpc = built.implicit_mpc()?;
    let implicit_mpc = time_controller(&mut mpc, &built.plant, built.x0(), max, tol, reps)?;
    let lookup = match built.lookup()? {
        Some(mut lk) => Some(time_controller(&mut lk, &built.plant, built.x0(), max, tol, reps)?),
        None => None,
    };
    let summary = RunSummary {
        plant: cfg.plant.name.clone(),
        variant: cfg.mampc.variant.clone(),
        seed: cfg.seed,
        mampc: ControllerSummary::new("mampc", &mampc),
        implicit_mpc: ControllerSummary::new("implicit_mpc", &implicit_mpc),
        lookup: lookup.as_ref().map(|r| ControllerSummary::new("lookup", r)),
        mampc_stats: mampc.stats.clone(),
        loss_ratio: built.curve.as_ref().map(|c| c.last() / c.initial()),
        roa_passed: built.roa.as_ref().map(|r| r.passed),
    };
    let out = RunOutput {
        built,
        mampc,
        implicit_mpc,
        lookup,
        summary,
    };
    if let Some(dir) = &opts.out_dir {
        write_run_artifacts(dir, &out)?;
    }
    if opts.gate {
        check_gates(cfg, &out.summary)?;
    }
    Ok(out)
}

pub fn write_run_artifacts(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    write_trajectory_csv(&dir.join(TRAJECTORY_CSV), &out.mampc.report)?;
    write_trajectory_csv(&dir.join(MPC_TRAJECTORY_CSV), &out.implicit_mpc.report)?;
    write_timing_csv(&dir.join(TIMING_CSV), &out.mampc.stats)?;
    write_timing_csv(&dir.join(MPC_TIMING_CSV), &out.implicit_mpc.stats)?;
    if let Some(lk) = &out.lookup {
        write_trajectory_csv(&dir.join(LOOKUP_TRAJECTORY_CSV), &lk.report)?;
    }
    if let Some(c) = &out.built.curve {
        write_training_csv(&dir.join(TRAINING_CSV), c)?;
    }
    if let Some(r) = &out.built.roa {
        write_roa_csv(&dir.join(ROA_CSV), r, None)?;
    }
    write_summary_csv(&dir.join(SUMMARY_CSV), &out.summary)?;
    write_manifest(&dir.join(MANIFEST), &out.built.cfg)
}

fn summary_rows(s: &RunSummary) -> Vec<&ControllerSummary> {
    let mut v = vec![&s.mampc, &s.implicit_mpc];
    v.extend(s.lookup.as_ref());
    v
}

pub const SUMMARY_HEADER: [&str; 8] = ["controller", "terminated", "steps", "total_ns", "lqr_steps", "nn_steps", "mpc_steps", "lookup_steps"];

pub fn summary_record(c: &ControllerSummary) -> [String; 8] {
    [
        c.label.clone(),
        c.terminated.name().to_string(),
        c.steps.to_string(),
        c.total_ns.to_string(),
        c.count(Tag::Lqr).to_string(),
        c.count(Tag::Nn).to_string(),
        c.count(Tag::Mpc).to_string(),
        c.count(Tag::Lookup).to_string(),
    ]
}

pub fn write_summary_csv(path: &Path, s: &RunSummary) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for c in summary_rows(s) {
        w.write_record(summary_record(c))?;
    }
    flush(w, path)
}

/// Acceptance gates for `--gate`; all failures are reported together.
pub fn check_gates(cfg: &ScenarioConfig, s: &RunSummary) -> Result<()> {
    let mut failed = Vec::new();
    if s.mampc.terminated != Termination::Converged {
        failed.push(format!("MAMPC ended with {}", s.mampc.terminated.name()));
    }
    if s.implicit_mpc.terminated != Termination::Converged {
        failed.push(format!("implicit MPC ended with {}", s.implicit_mpc.terminated.name()));
    }
    let limit = cfg.gate.max_step_ratio * s.implicit_mpc.steps as f64;
    if s.mampc.steps as f64 > limit {
        failed.push(format!("MAMPC took {} steps, limit {limit}", s.mampc.steps));
    }
    if let Some(r) = s.loss_ratio {
        if !(r <= cfg.gate.max_loss_ratio) {
            failed.push(format!("training loss ratio {r:.3e} above {}", cfg.gate.max_loss_ratio));
        }
    }
    if cfg.gate.require_roa {
        match s.roa_passed {
            Some(true) => {}
            Some(false) => failed.push("RoA validation failed".into()),
            None => failed.push("RoA validation required but lqr.validate is off".into()),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(BenchError::Gate(failed.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, FixedInput};
    use mampc_core::plants::{Plant, PlantKind};

    #[test]
    fn trajectory_csv_round_trips_bit_exactly() {
        let plant = Plant::builtin(PlantKind::Pendulum);
        let mut c = FixedInput { u: vec![0.01] };
        let rep = simulate(&mut c, &plant, &[0.3, -0.1], 20, 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(TRAJECTORY_CSV);
        write_trajectory_csv(&p, &rep).unwrap();
        let t = read_trajectory_csv(&p).unwrap();
        assert_eq!(t.trajectory, rep.trajectory);
        assert_eq!(t.inputs, rep.inputs);
        assert_eq!(t.modes, rep.modes);
        assert_eq!(t.per_step_ns, rep.per_step_ns);
    }

    #[test]
    fn truncated_trajectory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "step,mode,x0,u0,step_ns\n0,LQR,1.0,0.0,5\n").unwrap();
        assert!(read_trajectory_csv(&p).is_err());
    }

    #[test]
    fn training_csv_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(TRAINING_CSV);
        let curve = LossCurve {
            train: vec![1.0, 0.5, 0.25],
            validation: vec![1.1, 0.6, 0.3],
        };
        write_training_csv(&p, &curve).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "epoch,train_mse,val_mse");
    }
}
