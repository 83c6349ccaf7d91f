//! Repeated timed runs, per-step medians and per-mode up-time division.

use std::sync::Mutex;
use std::time::Instant;

use mampc_core::plants::Plant;

use crate::error::{BenchError, Result};
use crate::sim::{simulate, Controller, SimReport, Tag};

/// Timed runs never overlap, even inside a parallel sweep.
static TIMING_LOCK: Mutex<()> = Mutex::new(());

pub const CLOCK_WARNING_NS: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ModeStats {
    pub tag: Tag,
    pub steps: usize,
    pub total_ns: u64,
    pub mean_ns: f64,
    pub std_ns: f64,
    pub median_ns: f64,
    pub time_div_pct: f64,
    pub step_div_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingStats {
    /// Only modes that occurred, in [`Tag::ALL`] order.
    pub modes: Vec<ModeStats>,
    pub total_ns: u64,
    pub steps: usize,
    /// Some median step time fell under the clock-resolution threshold.
    pub clock_warning: bool,
}

impl TimingStats {
    pub fn mode(&self, tag: Tag) -> Option<&ModeStats> {
        self.modes.iter().find(|m| m.tag == tag)
    }
}

fn median(v: &mut [u64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k] as f64
    } else {
        (v[k - 1] as f64 + v[k] as f64) / 2.0
    }
}

/// Per-mode statistics over steps `skip..`.
pub fn timing_stats(modes: &[Tag], per_step_ns: &[u64], skip: usize) -> TimingStats {
    let skip = skip.min(modes.len());
    let (modes, ns) = (&modes[skip..], &per_step_ns[skip..]);
    let total_ns: u64 = ns.iter().sum();
    let steps = modes.len();
    let mut out = Vec::new();
    let mut warn = false;
    for tag in Tag::ALL {
        let mut v: Vec<u64> = modes.iter().zip(ns).filter(|(t, _)| **t == tag).map(|(_, &n)| n).collect();
        if v.is_empty() {
            continue;
        }
        let k = v.len() as f64;
        let sum: u64 = v.iter().sum();
        let mean = sum as f64 / k;
        let var = v.iter().map(|&n| (n as f64 - mean).powi(2)).sum::<f64>() / k;
        let med = median(&mut v);
        warn |= med < CLOCK_WARNING_NS as f64;
        out.push(ModeStats {
            tag,
            steps: v.len(),
            total_ns: sum,
            mean_ns: mean,
            std_ns: var.sqrt(),
            median_ns: med,
            time_div_pct: if total_ns > 0 { 100.0 * sum as f64 / total_ns as f64 } else { 100.0 * k / steps as f64 },
            step_div_pct: 100.0 * k / steps as f64,
        });
    }
    TimingStats {
        modes: out,
        total_ns,
        steps,
        clock_warning: warn,
    }
}

/// Share of wall time and of steps each mode took in one run.
pub fn uptime_division(report: &SimReport) -> TimingStats {
    timing_stats(&report.modes, &report.per_step_ns, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedRun {
    /// First repeat, with `per_step_ns` replaced by the per-step medians.
    pub report: SimReport,
    /// Statistics with step 0 dropped.
    pub stats: TimingStats,
    pub repeats: usize,
}

/// Repeats the closed loop `repeats` times from a reset controller and takes
/// the median of each step across repeats. Runs whose decisions differ are
/// an error.
pub fn time_controller(ctl: &mut dyn Controller, plant: &Plant<f64>, x0: &[f64], max_steps: usize, tol: f64, repeats: usize) -> Result<TimedRun> {
    let repeats = repeats.max(1);
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let mut first: Option<SimReport> = None;
    let mut samples: Vec<Vec<u64>> = Vec::new();
    for r in 0..repeats {
        ctl.reset();
        let rep = simulate(ctl, plant, x0, max_steps, tol);
        match &first {
            None => {
                samples = rep.per_step_ns.iter().map(|&n| vec![n]).collect();
                first = Some(rep);
            }
            Some(f) => {
                if f.modes != rep.modes || f.trajectory != rep.trajectory {
                    return Err(BenchError::Nondeterministic(format!(
                        "repeat {r} of `{}` diverged from repeat 0",
                        ctl.label()
                    )));
                }
                for (s, &n) in samples.iter_mut().zip(&rep.per_step_ns) {
                    s.push(n);
                }
            }
        }
    }
    ctl.reset();
    let mut report = first.expect("at least one repeat");
    report.per_step_ns = samples.iter_mut().map(|s| median(s).round() as u64).collect();
    let stats = timing_stats(&report.modes, &report.per_step_ns, 1);
    Ok(TimedRun {
        report,
        stats,
        repeats,
    })
}

/// Median cost of timing an empty call on this host.
pub fn empty_loop_floor(samples: usize) -> u64 {
    let mut v: Vec<u64> = (0..samples.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(());
            t.elapsed().as_nanos() as u64
        })
        .collect();
    median(&mut v) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FixedInput, Termination};
    use mampc_core::plants::PlantKind;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn synthetic(modes: Vec<Tag>, ns: Vec<u64>) -> SimReport {
        let k = modes.len();
        SimReport {
            trajectory: vec![DVector::zeros(1); k + 1],
            inputs: vec![DVector::zeros(1); k],
            modes,
            per_step_ns: ns,
            terminated: Termination::Converged,
            steps: k,
        }
    }

    #[test]
    fn all_lqr_run() {
        let s = uptime_division(&synthetic(vec![Tag::Lqr; 7], vec![10; 7]));
        assert_eq!(s.modes.len(), 1);
        assert_eq!(s.mode(Tag::Lqr).unwrap().step_div_pct, 100.0);
    }

    #[test]
    fn mpc_dominates_time_lqr_half_steps() {
        let mut modes = vec![Tag::Mpc; 10];
        modes.extend(vec![Tag::Lqr; 10]);
        let mut ns = vec![1_000_000; 10];
        ns.extend(vec![1_000; 10]);
        let s = uptime_division(&synthetic(modes, ns));
        let mpc = s.mode(Tag::Mpc).unwrap();
        assert!((mpc.time_div_pct - 99.9).abs() < 0.01);
        assert_eq!(mpc.step_div_pct, 50.0);
        assert_eq!(s.mode(Tag::Lqr).unwrap().step_div_pct, 50.0);
    }

    proptest! {
        #[test]
        fn percentages_sum_to_100(raw in proptest::collection::vec((0usize..3, 0u64..1_000_000), 1..200)) {
            let modes: Vec<Tag> = raw.iter().map(|(t, _)| [Tag::Lqr, Tag::Nn, Tag::Mpc][*t]).collect();
            let ns: Vec<u64> = raw.iter().map(|(_, n)| *n).collect();
            let s = uptime_division(&synthetic(modes, ns));
            let t: f64 = s.modes.iter().map(|m| m.time_div_pct).sum();
            let k: f64 = s.modes.iter().map(|m| m.step_div_pct).sum();
            prop_assert!((t - 100.0).abs() <= 0.1);
            prop_assert!((k - 100.0).abs() <= 0.1);
        }
    }

    #[test]
    fn constant_controller_is_near_the_floor() {
        let plant = Plant::builtin(PlantKind::Pendulum);
        let mut c = FixedInput { u: vec![0.0] };
        let run = time_controller(&mut c, &plant, &[0.3, 0.0], 50, 1e-9, 20).unwrap();
        let floor = empty_loop_floor(1000).max(1);
        let med = run.stats.mode(Tag::Fixed).unwrap().median_ns;
        assert!(med <= 10.0 * floor as f64, "median {med} floor {floor}");
        assert_eq!(run.stats.steps, 49);
    }
}
