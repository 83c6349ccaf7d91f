//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mampc_bench::config::ScenarioConfig;
use mampc_bench::report::{read_trajectory_csv, run_scenario, RunOptions, RunOutput, MANIFEST, MPC_TRAJECTORY_CSV, TRAJECTORY_CSV};
use mampc_bench::scenario::{build_models, sampling_box, train_policy};
use mampc_bench::{Tag, Termination};
use mampc_core::hybrid::{erode_ball, erode_box, half_stage_cost, HybridContext, MampcConfig, Mode, Region, StageSet, StateRegion, Variant, VerifyOutcome};
use mampc_core::lqr::{dare_residual, design_lqr, lqr_gain, solve_dare, spectral_radius, DareOptions};
use mampc_core::mpc::{MpcController, MpcSpec};
use mampc_core::plants::Plant;
use mampc_core::policy_nn::{MlpPolicy, TrainConfig};
use mampc_core::qp::{solve_qp, QProblem, QpStatus};
use mampc_core::{BoxSet, NormBall};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

trait OrMsg<T> {
    fn msg(self) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> OrMsg<T> for Result<T, E> {
    fn msg(self) -> Result<T, String> {
        self.map_err(|e| e.to_string())
    }
}

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

const PLANTS: [&str; 4] = ["pendulum", "triple_pendulum", "bicopter", "quadcopter"];

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Result<ScenarioConfig, String> {
    ScenarioConfig::load(&config_dir().join(format!("{name}.toml"))).msg()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn deviation(plant: &Plant<f64>, x: &[f64]) -> Vec<f64> {
    x.iter().zip(plant.x_eq.iter()).map(|(a, b)| a - b).collect()
}

// 1

fn oracle_qp(p: &QProblem<f64>) -> (DVector<f64>, f64) {
    let d = p.g.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for pattern in 0..3usize.pow(d as u32) {
        let mut z = DVector::zeros(d);
        let mut free = Vec::new();
        let mut code = pattern;
        for i in 0..d {
            match code % 3 {
                0 => free.push(i),
                1 => z[i] = p.lb[i],
                _ => z[i] = p.ub[i],
            }
            code /= 3;
        }
        if !free.is_empty() {
            let k = free.len();
            let hff = DMatrix::from_fn(k, k, |a, b| p.h[(free[a], free[b])]);
            let rhs = DVector::from_fn(k, |a, _| {
                let i = free[a];
                -(p.g[i] + (0..d).filter(|j| !free.contains(j)).map(|j| p.h[(i, j)] * z[j]).sum::<f64>())
            });
            let Some(chol) = hff.cholesky() else { continue };
            let zf = chol.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                z[i] = zf[a];
            }
            if free.iter().any(|&i| z[i] < p.lb[i] - 1e-12 || z[i] > p.ub[i] + 1e-12) {
                continue;
            }
        }
        let f = p.objective(&z);
        if best.as_ref().map_or(true, |b| f < b.1) {
            best = Some((z, f));
        }
    }
    best.expect("the all-bound pattern is always feasible")
}

fn qp_oracle_equivalence() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_f, mut worst_z) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(5, 5) * 0.1;
        let g = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
        let lo = DVector::from_fn(5, |_, _| rng.random_range(-1.5..0.0));
        let hi = DVector::from_fn(5, |i, _| lo[i] + rng.random_range(0.1..2.0));
        let p = QProblem::boxed(h, g, lo, hi);
        let sol = solve_qp(&p, None).msg()?;
        ensure(sol.status == QpStatus::Optimal, || format!("case {case}: status {:?}", sol.status))?;
        let (z, f) = oracle_qp(&p);
        worst_f = worst_f.max((p.objective(&sol.z) - f).abs());
        worst_z = worst_z.max((&sol.z - &z).amax());
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = format!("max |Δf| {worst_f:.2e}, max |Δz| {worst_z:.2e}, {secs:.3} s");
    ensure(worst_f <= 1e-6 && worst_z <= 1e-4 && secs < 5.0, || detail.clone())?;
    Ok(detail)
}

// 2

fn dare_correctness() -> Check {
    let mut lines = Vec::new();
    let check = |name: &str, a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>| -> Result<(DMatrix<f64>, String), String> {
        let p = solve_dare(a, b, q, r, &DareOptions::default()).msg()?;
        let res = dare_residual(a, b, q, r, &p);
        let k = lqr_gain(a, b, r, &p).msg()?;
        let rho = spectral_radius(&(a - b * k));
        let line = format!("{name}: residual {res:.1e}, ρ {rho:.4}");
        ensure(res <= 1e-8 && rho < 1.0, || line.clone())?;
        Ok((p, line))
    };
    for name in PLANTS {
        let cfg = load(name)?;
        let (_, lin, spec, _) = build_models(&cfg).msg()?;
        lines.push(check(name, &lin.a_d, &lin.b_d, &spec.q, &spec.r)?.1);
    }
    let one = DMatrix::from_element(1, 1, 1.0);
    let (p0, _) = check("A=0", &DMatrix::zeros(1, 1), &one, &one, &one)?;
    ensure((p0[(0, 0)] - 1.0).abs() <= 1e-9, || format!("A=0: P = {}", p0[(0, 0)]))?;
    let (p1, _) = check("A=1", &one, &one, &one, &one)?;
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    ensure((p1[(0, 0)] - golden).abs() <= 1e-9, || format!("A=1: P = {}", p1[(0, 0)]))?;
    lines.push("scalar cases exact".into());
    Ok(lines.join("; "))
}

// 3

fn gradient_check() -> Check {
    let mut worst = 0.0f64;
    for name in PLANTS {
        let cfg = load(name)?;
        let (plant, ..) = build_models(&cfg).msg()?;
        let sizes = cfg.layer_sizes(plant.n, plant.m);
        let in_box = sampling_box(&cfg).msg()?;
        let out_box = BoxSet::symmetric(&vec![1.0; plant.m]).msg()?;
        let net = MlpPolicy::new(&sizes, &in_box, &out_box, 3).msg()?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<DVector<f64>> = (0..16)
            .map(|_| DVector::from_fn(plant.n, |i, _| rng.random_range(in_box.lower()[i]..in_box.upper()[i])))
            .collect();
        let ys: Vec<DVector<f64>> = (0..16).map(|_| DVector::from_fn(plant.m, |_, _| rng.random_range(-1.0..1.0))).collect();
        let xr: Vec<&DVector<f64>> = xs.iter().collect();
        let yr: Vec<&DVector<f64>> = ys.iter().collect();
        let (_, grad) = net.loss_gradient(&xr, &yr);
        for _ in 0..20 {
            let idx = rng.random_range(0..net.param_count());
            let h = 1e-5;
            let mut a = net.clone();
            a.set_param(idx, net.param(idx) + h);
            let mut b = net.clone();
            b.set_param(idx, net.param(idx) - h);
            let fd = (a.loss(&xr, &yr) - b.loss(&xr, &yr)) / (2.0 * h);
            let g = grad.flat(idx);
            let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
    }
    let detail = format!("worst relative error {worst:.2e} over 4 × 20 coordinates");
    ensure(worst <= 1e-5, || detail.clone())?;
    Ok(detail)
}

// 4

fn imitation_quality() -> Check {
    let mut cfg = load("pendulum")?;
    let t = Instant::now();
    let (plant, _, spec, _) = build_models(&cfg).msg()?;
    let def = TrainConfig::<f64>::default();
    cfg.nn.dataset_size = 10_000;
    cfg.nn.epochs = def.epochs;
    cfg.nn.batch_size = def.batch_size;
    cfg.nn.learning_rate = def.learning_rate;
    cfg.nn.validation_fraction = def.validation_fraction;
    let (_, curve, len) = train_policy(&cfg, &plant, &spec).msg()?;
    let secs = t.elapsed().as_secs_f64();
    let ratio = curve.last() / curve.initial();
    let detail = format!("M = {len}, final/initial MSE {ratio:.4}, {secs:.1} s");
    ensure(len == 10_000 && ratio <= 0.1 && secs < 300.0, || detail.clone())?;
    Ok(detail)
}

// 5–8 and 13 share these runs.

struct Runs {
    outs: Vec<(&'static str, Result<RunOutput, String>)>,
    dirs: tempfile::TempDir,
}

impl Runs {
    fn get(&self, name: &str) -> Result<&RunOutput, String> {
        let (_, r) = self.outs.iter().find(|(n, _)| *n == name).ok_or_else(|| format!("no run for {name}"))?;
        r.as_ref().map_err(|e| format!("{name}: {e}"))
    }
}

fn run_all() -> Runs {
    let dirs = tempfile::tempdir().expect("temp dir");
    let outs = PLANTS
        .iter()
        .map(|&name| {
            let r = load(name).and_then(|cfg| {
                let opts = RunOptions {
                    out_dir: Some(dirs.path().join(name)),
                    ..RunOptions::default()
                };
                run_scenario(&cfg, &opts).msg()
            });
            (name, r)
        })
        .collect();
    Runs { outs, dirs }
}

fn convergence(runs: &Runs) -> Check {
    let benchmark_x0: [(&str, Vec<f64>); 4] = [
        ("pendulum", vec![std::f64::consts::FRAC_PI_2, 0.5]),
        ("triple_pendulum", [std::f64::consts::FRAC_PI_6, 1.0].repeat(3)),
        ("bicopter", [std::f64::consts::FRAC_PI_2, 1.0].repeat(3)),
        (
            "quadcopter",
            vec![0.5, 0.1, 0.5, 0.1, 0.5, 0.1, std::f64::consts::FRAC_PI_6, 0.1, std::f64::consts::FRAC_PI_6, 0.1, std::f64::consts::FRAC_PI_4, 0.1],
        ),
    ];
    let mut parts = Vec::new();
    let mut failed = false;
    for (name, x0) in benchmark_x0 {
        let out = runs.get(name)?;
        ensure(out.built.cfg.sim.x0.len() == x0.len() && out.built.cfg.sim.x0.iter().zip(&x0).all(|(a, b)| (a - b).abs() <= 1e-12), || format!("{name}: x0 {:?}", out.built.cfg.sim.x0))?;
        ensure(out.built.cfg.sim.tol <= 0.01, || format!("{name}: tol {}", out.built.cfg.sim.tol))?;
        let (a, b) = (&out.mampc.report, &out.implicit_mpc.report);
        let ok = a.terminated == Termination::Converged
            && b.terminated == Termination::Converged
            && norm(a.final_state().as_slice()) <= 0.01
            && norm(b.final_state().as_slice()) <= 0.01
            && a.steps <= 10 * b.steps;
        failed |= !ok;
        parts.push(format!(
            "{name} [{}]: mampc {} in {} steps, mpc {} in {}",
            out.built.cfg.mampc.variant,
            a.terminated.name(),
            a.steps,
            b.terminated.name(),
            b.steps
        ));
    }
    let detail = parts.join("; ");
    ensure(!failed, || detail.clone())?;
    Ok(detail)
}

fn mode_timing(runs: &Runs) -> Check {
    let stats = &runs.get("pendulum")?.mampc.stats;
    let med = |t: Tag| stats.mode(t).map(|m| m.median_ns).ok_or_else(|| format!("no {t} steps after step 0"));
    let (l, n, m) = (med(Tag::Lqr)?, med(Tag::Nn)?, med(Tag::Mpc)?);
    let detail = format!("medians LQR {l:.0} ns, NN {n:.0} ns, MPC {m:.0} ns; NN/LQR {:.1}×, MPC/NN {:.1}×", n / l, m / n);
    ensure(l < n && n < m && n >= 5.0 * l && m >= 2.0 * n, || detail.clone())?;
    Ok(detail)
}

fn amortized_advantage(runs: &Runs) -> Check {
    let mut parts = Vec::new();
    let mut failed = false;
    for name in ["pendulum", "bicopter"] {
        let out = runs.get(name)?;
        let (a, b) = (out.mampc.stats.total_ns, out.implicit_mpc.stats.total_ns);
        failed |= a >= b;
        parts.push(format!("{name}: mampc {:.1} µs vs mpc {:.1} µs", a as f64 / 1e3, b as f64 / 1e3));
    }
    let detail = parts.join("; ");
    ensure(!failed, || detail.clone())?;
    Ok(detail)
}

fn uptime_structure(runs: &Runs) -> Check {
    let stats = &runs.get("pendulum")?.mampc.stats;
    let get = |t: Tag| stats.mode(t).map_or((0.0, 0.0), |m| (m.time_div_pct, m.step_div_pct));
    let (l, n, m) = (get(Tag::Lqr), get(Tag::Nn), get(Tag::Mpc));
    let detail = format!(
        "time LQR {:.1}% NN {:.1}% MPC {:.1}%; steps LQR {:.1}% NN {:.1}% MPC {:.1}%",
        l.0, n.0, m.0, l.1, n.1, m.1
    );
    ensure(m.0 > l.0 && m.0 > n.0 && l.1 > n.1 && l.1 > m.1, || detail.clone())?;
    Ok(detail)
}

// 9

fn stage_ok(plant: &Plant<f64>, stage: &StageSet<f64>, y: &[f64], u: &[f64]) -> bool {
    let s = match &stage.state {
        StateRegion::Box(b) => b.contains(y),
        StateRegion::Ball(ball) => ball.contains(&deviation(plant, y)),
    };
    s && stage.input.contains(u)
}

/// Independent forward verification; returns the Euler trace on success.
fn oracle_verify(ctx: &mut HybridContext<f64>, x: &[f64], target: &NormBall<f64>, horizon: usize, stage: &StageSet<f64>) -> Option<Vec<Vec<f64>>> {
    let plant = ctx.plant().clone();
    let mut y = x.to_vec();
    let mut trace = vec![y.clone()];
    let (mut dx, mut next) = (vec![0.0; plant.n], vec![0.0; plant.n]);
    for _ in 0..horizon {
        let u = ctx.nn_input(&y, true).ok()?;
        if !stage_ok(&plant, stage, &y, u.as_slice()) {
            return None;
        }
        plant.euler_step_into(&y, u.as_slice(), &mut dx, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        y.copy_from_slice(&next);
        trace.push(y.clone());
        if target.contains(&deviation(&plant, &y)) {
            let u = ctx.nn_input(&y, true).ok()?;
            return stage_ok(&plant, stage, &y, u.as_slice()).then_some(trace);
        }
    }
    None
}

#[derive(Default)]
struct FuzzTally {
    lqr: usize,
    nn: usize,
    mpc: usize,
    defaulted: usize,
    waypoint: usize,
    violations: Vec<String>,
}

fn fuzz_states(plant: &Plant<f64>, sb: &BoxSet<f64>, radius: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            if k % 2 == 0 {
                DVector::from_fn(plant.n, |i, _| rng.random_range(sb.lower()[i]..sb.upper()[i]))
            } else {
                let d = DVector::from_fn(plant.n, |_, _| rng.random_range(-1.0..1.0));
                let r = rng.random_range(0.0..radius);
                &plant.x_eq + d.normalize() * r
            }
        })
        .collect()
}

fn fuzz_variant(out: &RunOutput, seed: u64) -> Result<FuzzTally, String> {
    let mut ctx = out.built.hybrid().msg()?;
    let plant = ctx.plant().clone();
    let cfg = ctx.cfg().clone();
    let roa = ctx.lqr().roa;
    let reach = cfg.wp_ball.map_or(roa.radius(), |b| b.radius()).max(roa.radius());
    let sb = sampling_box(&out.built.cfg).msg()?;
    let states = fuzz_states(&plant, &sb, 2.5 * reach, 10_000, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut t = FuzzTally::default();
    for x in states {
        let i = rng.random_range(0..1000usize);
        let d = ctx.dispatch(&x, i).msg()?;
        let xs = x.as_slice();
        let dev = deviation(&plant, xs);
        let mut bad = |why: String| t.violations.push(format!("x = {:?}, i = {i}: {why}", xs));
        let in_roa = roa.contains(&dev);
        let (nn_fires, region) = if in_roa {
            (false, Region::Roa)
        } else {
            match cfg.variant {
                Variant::Standard => {
                    let (tg, st) = (ctx.verification_target().unwrap(), ctx.stage_set().unwrap().clone());
                    (oracle_verify(&mut ctx, xs, &tg, cfg.n_lqr, &st).is_some(), Region::Outside)
                }
                Variant::AlternatingAuthority => {
                    if i % cfg.i_d == 0 {
                        if d.verify_outcome != VerifyOutcome::Defaulted {
                            bad(format!("modulus rule not applied, outcome {:?}", d.verify_outcome));
                        }
                        (false, Region::Outside)
                    } else {
                        let raw = ctx.nn_input(xs, false).msg()?;
                        let StateRegion::Box(xb) = &ctx.stage_set().unwrap().state else {
                            return Err("state stage set is not a box".into());
                        };
                        let mut next = vec![0.0; plant.n];
                        plant.euler_step_into(xs, raw.as_slice(), &mut vec![0.0; plant.n], &mut next);
                        let guard = plant.input_box.contains(raw.as_slice()) && next.iter().all(|v| v.is_finite()) && xb.contains(&next);
                        (guard, Region::Outside)
                    }
                }
                Variant::WayPoint => {
                    let wp = cfg.wp_ball.unwrap();
                    if wp.contains(&dev) {
                        let (tg, st) = (ctx.verification_target().unwrap(), ctx.waypoint_stage_set().unwrap().clone());
                        let tr = oracle_verify(&mut ctx, xs, &tg, cfg.n_lqr, &st);
                        if let Some(tr) = &tr {
                            if tr.iter().any(|y| !wp.contains(&deviation(&plant, y))) {
                                bad("verified way-point trace leaves the way-point ball".into());
                            }
                        }
                        (tr.is_some(), Region::WayPoint)
                    } else {
                        let (tg, st) = (ctx.waypoint_target().unwrap(), ctx.stage_set().unwrap().clone());
                        let tr = oracle_verify(&mut ctx, xs, &tg, cfg.n_wp, &st);
                        if let Some(tr) = &tr {
                            if !wp.contains(&deviation(&plant, tr.last().unwrap())) {
                                bad("outer trace does not end in the way-point ball".into());
                            }
                        }
                        (tr.is_some(), Region::Outside)
                    }
                }
            }
        };
        let branches = [in_roa, !in_roa && nn_fires, !in_roa && !nn_fires];
        if branches.iter().filter(|b| **b).count() != 1 {
            bad(format!("branch conditions {branches:?}"));
        }
        let expected = if in_roa {
            Mode::Lqr
        } else if nn_fires {
            Mode::Nn
        } else {
            Mode::Mpc
        };
        if d.mode != expected {
            bad(format!("mode {:?}, expected {expected:?}", d.mode));
        }
        if d.region != region {
            bad(format!("region {:?}, expected {region:?}", d.region));
        }
        if !plant.input_box.contains(d.u.as_slice()) {
            bad("input outside the input box".into());
        }
        match d.mode {
            Mode::Lqr => {
                let u = ctx.lqr().control(&plant, &DVector::from_vec(dev.clone()));
                if u != d.u {
                    bad("LQR input differs from the gain law".into());
                }
                t.lqr += 1;
            }
            Mode::Nn => {
                if ctx.nn_input(xs, true).msg()? != d.u {
                    bad("NN input differs from the clamped network output".into());
                }
                t.nn += 1;
            }
            Mode::Mpc => t.mpc += 1,
        }
        t.defaulted += usize::from(d.verify_outcome == VerifyOutcome::Defaulted);
        t.waypoint += usize::from(d.region == Region::WayPoint);
    }
    Ok(t)
}

fn dispatch_fuzz(runs: &Runs) -> Check {
    let mut parts = Vec::new();
    let mut violations = Vec::new();
    for (k, (name, want)) in [("pendulum", Variant::Standard), ("triple_pendulum", Variant::AlternatingAuthority), ("quadcopter", Variant::WayPoint)]
        .into_iter()
        .enumerate()
    {
        let out = runs.get(name)?;
        let got: Variant = out.built.cfg.mampc.variant.parse().msg()?;
        ensure(got == want, || format!("{name} is configured as {got}"))?;
        let t = fuzz_variant(out, 900 + k as u64)?;
        let mut extra = String::new();
        if want == Variant::AlternatingAuthority {
            extra = format!(", {} defaulted", t.defaulted);
        }
        if want == Variant::WayPoint {
            extra = format!(", {} in way-point ball", t.waypoint);
        }
        if t.lqr == 0 || t.nn == 0 || t.mpc == 0 {
            violations.push(format!("{name}: a branch never fired"));
        }
        parts.push(format!("{want}: LQR {} NN {} MPC {}{extra}, {} violations", t.lqr, t.nn, t.mpc, t.violations.len()));
        violations.extend(t.violations.into_iter().take(3).map(|v| format!("{name}: {v}")));
    }
    let detail = parts.join("; ");
    ensure(violations.is_empty(), || format!("{detail}; {}", violations.join("; ")))?;
    Ok(detail)
}

// 10

/// Replays the true trajectory behind an NN decision. `Tube` keeps every true
/// state within `alpha` of the verified model state, pushed outward;
/// `PerStep` adds an outward push of `alpha` to every model step, so the
/// offsets accumulate.
#[derive(Clone, Copy, PartialEq)]
enum Disturbance {
    Tube,
    PerStep,
}

fn replay_disturbed(ctx: &mut HybridContext<f64>, trace: &[DVector<f64>], alpha: f64, kind: Disturbance) -> Result<Option<String>, String> {
    let plant = ctx.plant().clone();
    let roa = ctx.lqr().roa;
    let k = trace.len() - 1;
    let (mut dx, mut next) = (vec![0.0; plant.n], vec![0.0; plant.n]);
    let mut y = trace[0].as_slice().to_vec();
    let push = |base: &[f64], y: &mut Vec<f64>| {
        let dev = deviation(&plant, base);
        let nd = norm(&dev).max(f64::MIN_POSITIVE);
        for i in 0..plant.n {
            y[i] = base[i] + alpha * dev[i] / nd;
        }
        plant.wrap_angles(y);
    };
    for step in 0..=k {
        let u = ctx.nn_input(&y, true).msg()?;
        if !(plant.state_box.contains(&y) && plant.input_box.contains(u.as_slice())) {
            return Ok(Some(format!("stage set left at step {step}")));
        }
        if step == k {
            let e = norm(&deviation(&plant, &y));
            return Ok((e > roa.radius()).then(|| format!("‖y[{k}]‖ = {e:.4} outside the LQR region")));
        }
        match kind {
            Disturbance::Tube => push(trace[step + 1].as_slice(), &mut y),
            Disturbance::PerStep => {
                plant.euler_step_into(&y, u.as_slice(), &mut dx, &mut next);
                push(&next, &mut y);
            }
        }
    }
    unreachable!()
}

fn robustification(runs: &Runs) -> Check {
    const ALPHA: f64 = 0.05;
    let out = runs.get("pendulum")?;
    let mut ctx = out.built.hybrid().msg()?;
    ensure(ctx.cfg().variant == Variant::Standard, || "pendulum is not the standard variant".into())?;
    ctx.robustify(ALPHA).msg()?;
    let plant = ctx.plant().clone();
    let roa = ctx.lqr().roa;
    let (target, stage) = (ctx.verification_target().unwrap(), ctx.stage_set().unwrap().clone());
    let n_lqr = ctx.cfg().n_lqr;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut nn_decisions, mut violations, mut accumulated) = (0usize, Vec::new(), 0usize);
    for trial in 0..500 {
        let dir = DVector::from_fn(plant.n, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let x = &plant.x_eq + dir * rng.random_range(roa.radius()..3.0 * roa.radius());
        let d = ctx.dispatch(&x, trial).msg()?;
        if d.mode != Mode::Nn {
            continue;
        }
        nn_decisions += 1;
        let (outcome, trace) = ctx.verify_trace(x.as_slice(), &target, n_lqr, &stage).msg()?;
        if !matches!(outcome, VerifyOutcome::Reached(k) if k + 1 == trace.len()) {
            violations.push(format!("trial {trial}: NN decision without a reached verification ({outcome:?})"));
            continue;
        }
        if let Some(why) = replay_disturbed(&mut ctx, &trace, ALPHA, Disturbance::Tube)? {
            violations.push(format!("trial {trial}: {why}"));
        }
        accumulated += usize::from(replay_disturbed(&mut ctx, &trace, ALPHA, Disturbance::PerStep)?.is_some());
    }
    let detail = format!(
        "{nn_decisions} NN decisions out of 500 trials, {} violations with the true state within α of the verified trace \
         ({accumulated} if α is instead added on every step and left to accumulate)",
        violations.len()
    );
    ensure(nn_decisions > 0 && violations.is_empty(), || format!("{detail}; {}", violations.iter().take(3).cloned().collect::<Vec<_>>().join("; ")))?;
    Ok(detail)
}

// 11

fn erosion_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = Vec::new();
    let (mut emptied, mut identity) = (0, 0);
    for case in 0..1000 {
        let r: f64 = rng.random_range(0.01..5.0);
        let delta = if case % 10 == 0 { 0.0 } else { rng.random_range(0.0..2.0 * r) };
        let ball = NormBall::new(r).msg()?;
        let got = erode_ball(&ball, delta).msg()?;
        let want = if delta >= r { None } else { Some(r - delta) };
        if got.map(|b| b.radius()) != want {
            bad.push(format!("ball r={r} δ={delta}: {got:?}"));
        }
        if delta == 0.0 && got != Some(ball) {
            bad.push(format!("ball r={r}: δ=0 not identity"));
        }

        let n = rng.random_range(1..7);
        let lo: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.1) { f64::NEG_INFINITY } else { rng.random_range(-5.0..0.0) }).collect();
        let hi: Vec<f64> = lo
            .iter()
            .map(|l| if rng.random_bool(0.1) { f64::INFINITY } else { l.max(-5.0) + rng.random_range(0.01..5.0) })
            .collect();
        let b = BoxSet::from_slices(&lo, &hi).msg()?;
        let got = erode_box(&b, delta).msg()?;
        let (wl, wu): (Vec<f64>, Vec<f64>) = lo.iter().zip(&hi).map(|(l, u)| (l + delta, u - delta)).unzip();
        let want = if delta > 0.0 && wl.iter().zip(&wu).any(|(l, u)| l >= u) {
            None
        } else {
            Some((wl, wu))
        };
        let got_v = got.as_ref().map(|g| (g.lower().as_slice().to_vec(), g.upper().as_slice().to_vec()));
        if got_v != want {
            bad.push(format!("box {lo:?}..{hi:?} δ={delta}: {got_v:?}"));
        }
        if delta == 0.0 {
            identity += 1;
            if got.as_ref() != Some(&b) {
                bad.push(format!("box {lo:?}..{hi:?}: δ=0 not identity"));
            }
        }
        emptied += usize::from(got.is_none());
    }
    let detail = format!("1000 cases, {identity} with δ=0, {emptied} boxes emptied, {} mismatches", bad.len());
    ensure(bad.is_empty(), || format!("{detail}; {}", bad.into_iter().take(3).collect::<Vec<_>>().join("; ")))?;
    Ok(detail)
}

// 12

fn failfree_sanity() -> Check {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let plant = Plant::linear("double_integrator", a, b, BoxSet::unbounded(1), 0.1).msg()?;
    let lin = plant.linearize_discrete().msg()?;
    let q = DMatrix::identity(2, 2);
    let spec = MpcSpec::for_plant(&plant, &lin, 5, q.clone(), DMatrix::identity(1, 1)).msg()?;
    let lqr = design_lqr(&lin.a_d, &lin.b_d, &spec.q, &spec.r, 0.1).msg()?;
    let one_layer = |w: DMatrix<f64>| MlpPolicy::from_parts(vec![w], vec![DVector::zeros(1)], DVector::zeros(2), DVector::from_element(2, 1.0), DVector::zeros(1), DVector::from_element(1, 1.0));
    let mirror = one_layer(-&lqr.k).msg()?;
    let zero = one_layer(DMatrix::zeros(1, 2)).msg()?;

    let mut mpc = MpcController::new(spec.clone()).msg()?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut gap = 0.0f64;
    for _ in 0..50 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        mpc.reset();
        let u = mpc.control(&x, None).msg()?.u0;
        gap = gap.max((mirror.forward(&x).msg()? - u).amax());
    }
    ensure(gap <= 1e-6, || format!("network and MPC differ by {gap:.2e}"))?;

    let sample = BoxSet::symmetric(&[2.0, 2.0]).msg()?;
    let mut ctx = HybridContext::assemble(plant.clone(), spec.clone(), lqr.clone(), mirror, MampcConfig::standard(5)).msg()?;
    let good = ctx.failfree_check(&sample, 200, 7, half_stage_cost(&q)).msg()?;
    let mut ctx0 = HybridContext::assemble(plant, spec, lqr, zero, MampcConfig::standard(5)).msg()?;
    let poor = ctx0.failfree_check(&sample, 200, 7, half_stage_cost(&q)).msg()?;
    let detail = format!(
        "NN ≡ MPC to {gap:.1e}: {} violations (worst cost margin {:.2e}); zero network: {} violations",
        good.violations(),
        good.worst_cost_margin,
        poor.violations()
    );
    ensure(good.violations() == 0 && good.passed() && poor.violations() >= 1, || detail.clone())?;
    Ok(detail)
}

// 13

fn reproducibility(runs: &Runs) -> Check {
    let mut parts = Vec::new();
    for name in ["pendulum", "triple_pendulum"] {
        let first = runs.get(name)?;
        let dir_a = runs.dirs.path().join(name);
        let manifest = ScenarioConfig::load(&dir_a.join(MANIFEST)).msg()?;
        ensure(manifest == first.built.cfg, || format!("{name}: manifest does not round-trip the config"))?;
        let mut cfg = manifest;
        cfg.timing.repeats = 3;
        let dir_b = runs.dirs.path().join(format!("{name}-rerun"));
        let again = run_scenario(
            &cfg,
            &RunOptions {
                out_dir: Some(dir_b.clone()),
                ..RunOptions::default()
            },
        )
        .msg()?;
        for (label, a, b) in [
            ("mampc", &first.mampc.report, &again.mampc.report),
            ("implicit_mpc", &first.implicit_mpc.report, &again.implicit_mpc.report),
        ] {
            ensure(a.trajectory == b.trajectory && a.inputs == b.inputs, || format!("{name}/{label}: trajectories differ"))?;
            ensure(a.modes == b.modes, || format!("{name}/{label}: mode sequences differ"))?;
        }
        for file in [TRAJECTORY_CSV, MPC_TRAJECTORY_CSV] {
            let (ta, tb) = (read_trajectory_csv(&dir_a.join(file)).msg()?, read_trajectory_csv(&dir_b.join(file)).msg()?);
            ensure(ta.trajectory == tb.trajectory && ta.inputs == tb.inputs && ta.modes == tb.modes, || format!("{name}: {file} differs"))?;
        }
        parts.push(format!("{name}: {} + {} steps identical", first.mampc.report.steps, first.implicit_mpc.report.steps));
    }
    Ok(parts.join("; "))
}

fn run(results: &mut Vec<(String, bool)>, id: usize, name: &str, f: impl FnOnce() -> Check) {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    let (ok, detail) = match r {
        Ok(d) => (true, d),
        Err(e) => (false, e),
    };
    println!("{} {id:>2} {name} ({secs:.1} s): {detail}", if ok { "PASS" } else { "FAIL" });
    results.push((format!("{id} {name}"), ok));
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "qp oracle equivalence", qp_oracle_equivalence);
    run(&mut results, 2, "dare correctness", dare_correctness);
    run(&mut results, 3, "gradient check", gradient_check);
    run(&mut results, 4, "imitation quality", imitation_quality);
    let t = Instant::now();
    let runs = run_all();
    println!("     scenario runs ({:.1} s)", t.elapsed().as_secs_f64());
    run(&mut results, 5, "closed-loop convergence", || convergence(&runs));
    run(&mut results, 6, "mode timing ordering", || mode_timing(&runs));
    run(&mut results, 7, "amortized advantage", || amortized_advantage(&runs));
    run(&mut results, 8, "up-time structure", || uptime_structure(&runs));
    run(&mut results, 9, "dispatch fuzz", || dispatch_fuzz(&runs));
    run(&mut results, 10, "robustification soundness", || robustification(&runs));
    run(&mut results, 11, "erosion algebra", erosion_algebra);
    run(&mut results, 12, "fail-free checker sanity", failfree_sanity);
    run(&mut results, 13, "reproducibility", || reproducibility(&runs));
    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
