//! Triple-mode dispatch among LQR, a verified neural policy and the MPC.
//!
//! Controllers work on deviations `x − x_eq`, `u − u_eq`; decisions are
//! returned as absolute inputs clamped to the plant input box.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, MampcError, Result};
use crate::lqr::LqrSolution;
use crate::mpc::{MpcController, MpcSpec, MpcStatus};
use crate::plants::{Plant, Rk4Scratch};
use crate::policy_nn::{MlpPolicy, MlpScratch};
use crate::sets::{norm, BoxSet, NormBall};
use crate::{InputVec, Real, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Standard,
    AlternatingAuthority,
    WayPoint,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::AlternatingAuthority => "alternating_authority",
            Variant::WayPoint => "way_point",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MampcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "alternating_authority" | "aa" => Ok(Variant::AlternatingAuthority),
            "way_point" | "wp" => Ok(Variant::WayPoint),
            _ => Err(MampcError::InvalidParameter {
                name: "variant".into(),
                reason: format!("unknown variant `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MampcConfig<T: Real> {
    pub variant: Variant,
    pub n_lqr: usize,
    /// MPC-defaulting period of the alternating-authority variant.
    pub i_d: usize,
    pub wp_ball: Option<NormBall<T>>,
    pub n_wp: usize,
    pub erosion_delta: T,
}

impl<T: Real> MampcConfig<T> {
    pub fn standard(n_lqr: usize) -> Self {
        Self {
            variant: Variant::Standard,
            n_lqr,
            i_d: 1,
            wp_ball: None,
            n_wp: 1,
            erosion_delta: T::zero(),
        }
    }

    pub fn alternating_authority(n_lqr: usize, i_d: usize) -> Self {
        Self {
            variant: Variant::AlternatingAuthority,
            i_d,
            ..Self::standard(n_lqr)
        }
    }

    pub fn way_point(n_lqr: usize, wp_radius: T, n_wp: usize) -> Result<Self> {
        Ok(Self {
            variant: Variant::WayPoint,
            wp_ball: Some(NormBall::new(wp_radius)?),
            n_wp,
            ..Self::standard(n_lqr)
        })
    }

    pub fn validate(&self, roa: &NormBall<T>) -> Result<()> {
        let bad = |name: &str, reason: String| {
            Err(MampcError::InvalidParameter {
                name: name.into(),
                reason,
            })
        };
        if self.n_lqr == 0 {
            return bad("n_lqr", "must be at least 1".into());
        }
        if self.i_d == 0 {
            return bad("i_d", "must be at least 1".into());
        }
        if !(self.erosion_delta >= T::zero()) || !self.erosion_delta.is_finite() {
            return bad("erosion_delta", format!("must be finite and nonnegative, got {}", self.erosion_delta));
        }
        if self.variant == Variant::WayPoint {
            let Some(wp) = self.wp_ball else {
                return bad("wp_ball", "way-point variant needs a way-point ball".into());
            };
            if !(wp.radius() > roa.radius()) {
                return bad(
                    "wp_ball",
                    format!("radius {} must exceed the LQR region radius {}", wp.radius(), roa.radius()),
                );
            }
            if self.n_wp == 0 {
                return bad("n_wp", "must be at least 1".into());
            }
        }
        Ok(())
    }
}

pub fn erode_ball<T: Real>(ball: &NormBall<T>, delta: T) -> Result<Option<NormBall<T>>> {
    ball.erode(delta)
}

pub fn erode_box<T: Real>(b: &BoxSet<T>, delta: T) -> Result<Option<BoxSet<T>>> {
    b.erode(delta)
}

/// Sets the erosion margin used inside verification.
pub fn robustify<T: Real>(cfg: &MampcConfig<T>, alpha: T) -> Result<MampcConfig<T>> {
    if !(alpha >= T::zero()) || !alpha.is_finite() {
        return Err(MampcError::InvalidParameter {
            name: "alpha".into(),
            reason: format!("must be finite and nonnegative, got {alpha}"),
        });
    }
    Ok(MampcConfig {
        erosion_delta: alpha,
        ..cfg.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Lqr,
    Nn,
    Mpc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Lqr, Mode::Nn, Mode::Mpc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Lqr => "LQR",
            Mode::Nn => "NN",
            Mode::Mpc => "MPC",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = MampcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LQR" => Ok(Mode::Lqr),
            "NN" => Ok(Mode::Nn),
            "MPC" => Ok(Mode::Mpc),
            _ => Err(MampcError::InvalidParameter {
                name: "mode".into(),
                reason: format!("unknown mode `{s}`"),
            }),
        }
    }
}

/// Where the state sat when the decision was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Roa,
    /// Inside the way-point ball but outside the LQR region.
    WayPoint,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifyOutcome {
    NotRun,
    /// Target hit at this step index (≥ 1).
    Reached(usize),
    /// Stage constraint broken at this step index.
    StageViolation(usize),
    HorizonExhausted,
    BlowUp(usize),
    /// One-step guard of the alternating-authority rule failed.
    GuardRejected,
    /// `i mod i_d = 0` forced the MPC.
    Defaulted,
    /// Erosion emptied the target; NN branch unavailable.
    Disabled,
}

impl VerifyOutcome {
    pub fn succeeded(self) -> bool {
        matches!(self, VerifyOutcome::Reached(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionInfo {
    pub mode: Mode,
    pub region: Region,
    pub verify_steps_used: usize,
    pub verify_outcome: VerifyOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeDecision<T: Real> {
    pub mode: Mode,
    pub region: Region,
    /// Absolute input, inside the plant input box.
    pub u: InputVec<T>,
    pub verify_steps_used: usize,
    pub verify_outcome: VerifyOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateRegion<T: Real> {
    /// Absolute-coordinate box.
    Box(BoxSet<T>),
    /// Ball around the equilibrium.
    Ball(NormBall<T>),
}

/// Admissible (state, input) pairs for forward verification.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSet<T: Real> {
    pub state: StateRegion<T>,
    pub input: BoxSet<T>,
}

#[derive(Debug, Clone)]
struct VerifyScratch<T: Real> {
    y: Vec<T>,
    next: Vec<T>,
    dev: Vec<T>,
    dx: Vec<T>,
    du: Vec<T>,
    u: Vec<T>,
    /// Clamped network input at the verified state.
    u0: Vec<T>,
    nn: MlpScratch<T>,
}

impl<T: Real> VerifyScratch<T> {
    fn new(plant: &Plant<T>, nn: &MlpPolicy<T>) -> Self {
        Self {
            y: vec![T::zero(); plant.n],
            next: vec![T::zero(); plant.n],
            dev: vec![T::zero(); plant.n],
            dx: vec![T::zero(); plant.n],
            du: vec![T::zero(); plant.m],
            u: vec![T::zero(); plant.m],
            u0: vec![T::zero(); plant.m],
            nn: nn.scratch(),
        }
    }
}

/// Immutable part of the context: everything except the MPC's warm start.
#[derive(Debug, Clone)]
struct Verifier<T: Real> {
    plant: Plant<T>,
    lqr: LqrSolution<T>,
    nn: MlpPolicy<T>,
    cfg: MampcConfig<T>,
    target: Option<NormBall<T>>,
    stage_x: Option<StageSet<T>>,
    stage_wp: Option<StageSet<T>>,
    wp_target: Option<NormBall<T>>,
}

impl<T: Real> Verifier<T> {
    fn new(plant: Plant<T>, lqr: LqrSolution<T>, nn: MlpPolicy<T>, cfg: MampcConfig<T>) -> Result<Self> {
        let mut v = Self {
            plant,
            lqr,
            nn,
            cfg,
            target: None,
            stage_x: None,
            stage_wp: None,
            wp_target: None,
        };
        v.rebuild()?;
        Ok(v)
    }

    fn rebuild(&mut self) -> Result<()> {
        let d = self.cfg.erosion_delta;
        let input = self.plant.input_box.clone();
        self.target = self.lqr.roa.erode(d)?;
        self.stage_x = self.plant.state_box.erode(d)?.map(|b| StageSet {
            state: StateRegion::Box(b),
            input: input.clone(),
        });
        self.wp_target = match self.cfg.wp_ball {
            Some(wp) => wp.erode(d)?,
            None => None,
        };
        self.stage_wp = self.wp_target.map(|b| StageSet {
            state: StateRegion::Ball(b),
            input: input.clone(),
        });
        Ok(())
    }

    fn nn_enabled(&self) -> bool {
        self.target.is_some() && self.stage_x.is_some()
    }

    fn deviation(&self, x: &[T], dev: &mut [T]) {
        for i in 0..dev.len() {
            dev[i] = x[i] - self.plant.x_eq[i];
        }
    }

    /// Absolute NN input before clamping, written into `u`.
    fn nn_eval(&self, x: &[T], dev: &mut [T], nn: &mut MlpScratch<T>, du: &mut [T], u: &mut [T]) {
        self.deviation(x, dev);
        self.nn.forward_into(dev, nn, du);
        for j in 0..self.plant.m {
            u[j] = self.plant.u_eq[j] + du[j];
        }
    }

    fn stage_ok(&self, x: &[T], u: &[T], stage: &StageSet<T>, dev: &mut [T]) -> bool {
        let state_ok = match &stage.state {
            StateRegion::Box(b) => b.contains(x),
            StateRegion::Ball(ball) => {
                self.deviation(x, dev);
                ball.contains(dev)
            }
        };
        state_ok && stage.input.contains(u)
    }

    fn verify(&self, x: &[T], target: &NormBall<T>, horizon: usize, stage: &StageSet<T>, s: &mut VerifyScratch<T>, trace: Option<&mut Vec<StateVec<T>>>) -> VerifyOutcome {
        let n = self.plant.n;
        s.y[..n].copy_from_slice(x);
        let mut trace = trace;
        if let Some(t) = trace.as_deref_mut() {
            t.push(DVector::from_column_slice(x));
        }
        for i in 1..=horizon {
            let VerifyScratch { y, next, dev, dx, du, u, u0, nn } = s;
            self.nn_eval(y, dev, nn, du, u);
            self.plant.input_box.clamp_in_place(u);
            if i == 1 {
                u0.copy_from_slice(u);
            }
            if !self.stage_ok(y, u, stage, dev) {
                return VerifyOutcome::StageViolation(i - 1);
            }
            self.plant.euler_step_into(y, u, dx, next);
            std::mem::swap(y, next);
            if y.iter().any(|v| !v.is_finite()) {
                return VerifyOutcome::BlowUp(i);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(DVector::from_column_slice(y));
            }
            self.deviation(y, dev);
            if target.contains(dev) {
                self.nn_eval(y, dev, nn, du, u);
                self.plant.input_box.clamp_in_place(u);
                if !self.stage_ok(y, u, stage, dev) {
                    return VerifyOutcome::StageViolation(i);
                }
                return VerifyOutcome::Reached(i);
            }
        }
        VerifyOutcome::HorizonExhausted
    }

    /// Region and NN-branch outcome at `x`, without touching the MPC.
    fn nn_branch(&self, x: &[T], i: usize, s: &mut VerifyScratch<T>) -> (Region, VerifyOutcome) {
        let disabled = !self.nn_enabled();
        match self.cfg.variant {
            Variant::Standard => {
                if disabled {
                    return (Region::Outside, VerifyOutcome::Disabled);
                }
                let (target, stage) = (self.target.as_ref().unwrap(), self.stage_x.as_ref().unwrap());
                (Region::Outside, self.verify(x, target, self.cfg.n_lqr, stage, s, None))
            }
            Variant::AlternatingAuthority => {
                if disabled {
                    return (Region::Outside, VerifyOutcome::Disabled);
                }
                if i % self.cfg.i_d == 0 {
                    return (Region::Outside, VerifyOutcome::Defaulted);
                }
                self.nn_eval(x, &mut s.dev, &mut s.nn, &mut s.du, &mut s.u);
                if !self.plant.input_box.contains(&s.u) {
                    return (Region::Outside, VerifyOutcome::GuardRejected);
                }
                s.u0.copy_from_slice(&s.u);
                self.plant.euler_step_into(x, &s.u, &mut s.dx, &mut s.next);
                let StateRegion::Box(xb) = &self.stage_x.as_ref().unwrap().state else {
                    unreachable!("state stage set is a box")
                };
                if s.next.iter().all(|v| v.is_finite()) && xb.contains(&s.next) {
                    (Region::Outside, VerifyOutcome::Reached(1))
                } else {
                    (Region::Outside, VerifyOutcome::GuardRejected)
                }
            }
            Variant::WayPoint => {
                let wp = self.cfg.wp_ball.expect("validated way-point config");
                self.deviation(x, &mut s.dev);
                if wp.contains(&s.dev) {
                    if disabled || self.stage_wp.is_none() {
                        return (Region::WayPoint, VerifyOutcome::Disabled);
                    }
                    let (target, stage) = (self.target.as_ref().unwrap(), self.stage_wp.as_ref().unwrap());
                    (Region::WayPoint, self.verify(x, target, self.cfg.n_lqr, stage, s, None))
                } else {
                    match (&self.wp_target, disabled) {
                        (Some(t), false) => {
                            let stage = self.stage_x.as_ref().unwrap();
                            (Region::Outside, self.verify(x, t, self.cfg.n_wp, stage, s, None))
                        }
                        _ => (Region::Outside, VerifyOutcome::Disabled),
                    }
                }
            }
        }
    }
}

/// Assembled controller: plant, LQR, NN, MPC and the dispatch rule.
#[derive(Debug, Clone)]
pub struct HybridContext<T: Real> {
    ver: Verifier<T>,
    mpc: MpcController<T>,
    scratch: VerifyScratch<T>,
    du: Vec<T>,
    mpc_dev: Vec<T>,
    warm_backup: Vec<T>,
    step_index: usize,
    parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailFreeReport<T: Real> {
    pub n_samples: usize,
    /// Samples where the MPC was infeasible.
    pub excluded: usize,
    pub admissibility_violations: usize,
    pub cost_violations: usize,
    pub gamma_violations: usize,
    /// Largest `L − J* − γ` seen.
    pub worst_cost_margin: T,
    /// Largest `γ − c(x, 0)` seen away from the origin.
    pub worst_gamma_margin: T,
}

impl<T: Real> FailFreeReport<T> {
    pub fn violations(&self) -> usize {
        self.admissibility_violations + self.cost_violations + self.gamma_violations
    }

    /// Zero violations on the drawn sample; not a certificate.
    pub fn passed(&self) -> bool {
        self.violations() == 0 && self.excluded < self.n_samples
    }
}

/// `xᵀ M x`.
pub fn quad_form<T: Real>(m: &DMatrix<T>, x: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..x.len() {
        let mut row = T::zero();
        for j in 0..x.len() {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// `γ(x) = ½ xᵀQx`.
pub fn half_stage_cost<T: Real>(q: &DMatrix<T>) -> impl Fn(&[T]) -> T + '_ {
    move |x| T::lit(0.5) * quad_form(q, x)
}

fn sample_box_point<T: Real>(b: &BoxSet<T>, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..b.dim())
        .map(|i| {
            let (lo, hi) = (b.lower()[i], b.upper()[i]);
            lo + (hi - lo) * T::lit(rng.random::<f64>())
        })
        .collect()
}

fn check_bounded<T: Real>(b: &BoxSet<T>) -> Result<()> {
    if (0..b.dim()).all(|i| b.lower()[i].is_finite() && b.upper()[i].is_finite()) {
        Ok(())
    } else {
        Err(MampcError::InvalidParameter {
            name: "sample_box".into(),
            reason: "must be bounded".into(),
        })
    }
}

const ROA_PROBES: usize = 32;

impl<T: Real> HybridContext<T> {
    /// Builds the controller; rejects inconsistent dimensions, invalid
    /// configs and LQR regions that leave the MPC feasible set.
    pub fn assemble(plant: Plant<T>, spec: MpcSpec<T>, lqr: LqrSolution<T>, nn: MlpPolicy<T>, cfg: MampcConfig<T>) -> Result<Self> {
        cfg.validate(&lqr.roa)?;
        let (n, m) = (plant.n, plant.m);
        check_dim("MPC state", n, spec.n())?;
        check_dim("MPC input", m, spec.m())?;
        check_dim("LQR gain rows", m, lqr.k.nrows())?;
        check_dim("LQR gain columns", n, lqr.k.ncols())?;
        check_dim("policy input", n, nn.input_dim())?;
        check_dim("policy output", m, nn.output_dim())?;
        let mut mpc = MpcController::new(spec)?;
        let r = lqr.roa.radius();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut probe = vec![T::zero(); n];
        for k in 0..(2 * n + ROA_PROBES) {
            if k < 2 * n {
                probe.iter_mut().for_each(|v| *v = T::zero());
                probe[k / 2] = if k % 2 == 0 { r } else { -r };
            } else {
                let dir: Vec<T> = (0..n).map(|_| T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal))).collect();
                let len = norm(&dir);
                for i in 0..n {
                    probe[i] = dir[i] * r / len;
                }
            }
            if !mpc.is_feasible(&probe)? {
                return Err(MampcError::Precondition(format!("LQR region of radius {r} leaves the MPC feasible set")));
            }
        }
        let ver = Verifier::new(plant, lqr, nn, cfg)?;
        let scratch = VerifyScratch::new(&ver.plant, &ver.nn);
        Ok(Self {
            ver,
            mpc,
            scratch,
            du: vec![T::zero(); m],
            mpc_dev: vec![T::zero(); n],
            warm_backup: Vec::new(),
            step_index: 0,
            parallel: false,
        })
    }

    pub fn plant(&self) -> &Plant<T> {
        &self.ver.plant
    }

    pub fn mpc_spec(&self) -> &MpcSpec<T> {
        self.mpc.spec()
    }

    pub fn lqr(&self) -> &LqrSolution<T> {
        &self.ver.lqr
    }

    pub fn nn(&self) -> &MlpPolicy<T> {
        &self.ver.nn
    }

    pub fn cfg(&self) -> &MampcConfig<T> {
        &self.ver.cfg
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn set_step_index(&mut self, i: usize) {
        self.step_index = i;
    }

    /// Clears the step counter and the MPC warm start.
    pub fn reset(&mut self) {
        self.step_index = 0;
        self.mpc.reset();
    }

    /// Runs the NN and MPC branches concurrently outside the LQR region.
    pub fn set_parallel(&mut self, on: bool) {
        self.parallel = on;
    }

    pub fn nn_enabled(&self) -> bool {
        self.ver.nn_enabled()
    }

    /// Eroded LQR region used as the verification target.
    pub fn verification_target(&self) -> Option<NormBall<T>> {
        self.ver.target
    }

    /// Eroded `X × U`.
    pub fn stage_set(&self) -> Option<&StageSet<T>> {
        self.ver.stage_x.as_ref()
    }

    /// Eroded `D_WP × U`.
    pub fn waypoint_stage_set(&self) -> Option<&StageSet<T>> {
        self.ver.stage_wp.as_ref()
    }

    pub fn waypoint_target(&self) -> Option<NormBall<T>> {
        self.ver.wp_target
    }

    pub fn robustify(&mut self, alpha: T) -> Result<()> {
        self.ver.cfg = robustify(&self.ver.cfg, alpha)?;
        self.ver.cfg.validate(&self.ver.lqr.roa)?;
        self.ver.rebuild()
    }

    fn check_state(&self, x: &[T]) -> Result<()> {
        check_dim("state", self.ver.plant.n, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("state"));
        }
        Ok(())
    }

    /// Absolute NN input at `x`, optionally clamped to the input box.
    pub fn nn_input(&mut self, x: &[T], clamp: bool) -> Result<InputVec<T>> {
        self.check_state(x)?;
        let s = &mut self.scratch;
        self.ver.nn_eval(x, &mut s.dev, &mut s.nn, &mut s.du, &mut s.u);
        if clamp {
            self.ver.plant.input_box.clamp_in_place(&mut s.u);
        }
        Ok(DVector::from_column_slice(&s.u))
    }

    pub fn verify_forward(&mut self, x: &[T], target: &NormBall<T>, horizon: usize, stage: &StageSet<T>) -> Result<VerifyOutcome> {
        self.verify_trace_inner(x, target, horizon, stage, None)
    }

    /// Like [`Self::verify_forward`] but also returns the simulated states.
    pub fn verify_trace(&mut self, x: &[T], target: &NormBall<T>, horizon: usize, stage: &StageSet<T>) -> Result<(VerifyOutcome, Vec<StateVec<T>>)> {
        let mut trace = Vec::with_capacity(horizon + 1);
        let out = self.verify_trace_inner(x, target, horizon, stage, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn verify_trace_inner(&mut self, x: &[T], target: &NormBall<T>, horizon: usize, stage: &StageSet<T>, trace: Option<&mut Vec<StateVec<T>>>) -> Result<VerifyOutcome> {
        self.check_state(x)?;
        if horizon == 0 {
            return Err(MampcError::InvalidParameter {
                name: "horizon".into(),
                reason: "must be at least 1".into(),
            });
        }
        check_dim("stage input box", self.ver.plant.m, stage.input.dim())?;
        if let StateRegion::Box(b) = &stage.state {
            check_dim("stage state box", self.ver.plant.n, b.dim())?;
        }
        Ok(self.ver.verify(x, target, horizon, stage, &mut self.scratch, trace))
    }

    fn steps_used(&self, outcome: VerifyOutcome, region: Region) -> usize {
        match outcome {
            VerifyOutcome::Reached(k) | VerifyOutcome::StageViolation(k) | VerifyOutcome::BlowUp(k) => k,
            VerifyOutcome::HorizonExhausted => match (self.ver.cfg.variant, region) {
                (Variant::WayPoint, Region::Outside) => self.ver.cfg.n_wp,
                _ => self.ver.cfg.n_lqr,
            },
            VerifyOutcome::GuardRejected => 1,
            _ => 0,
        }
    }

    /// Input found by the successful NN branch.
    fn apply_nn(&mut self, u: &mut [T]) {
        u.copy_from_slice(&self.scratch.u0);
    }

    fn finish_mpc(&self, status: MpcStatus, u: &mut [T]) -> Result<()> {
        if status != MpcStatus::Optimal {
            return Err(MampcError::Infeasible);
        }
        for j in 0..u.len() {
            u[j] = self.ver.plant.u_eq[j] + self.du[j];
        }
        self.ver.plant.input_box.clamp_in_place(u);
        Ok(())
    }

    /// Decision at `(x, i)` with the absolute input written into `u`.
    /// Allocation-free in sequential mode.
    pub fn decide_into(&mut self, x: &[T], i: usize, u: &mut [T]) -> Result<DecisionInfo> {
        self.check_state(x)?;
        check_dim("input buffer", self.ver.plant.m, u.len())?;
        self.ver.deviation(x, &mut self.mpc_dev);
        if self.ver.lqr.roa.contains(&self.mpc_dev) {
            let p = &self.ver.plant;
            self.ver.lqr.control_into(&self.mpc_dev, p.u_eq.as_slice(), &p.input_box, u);
            return Ok(DecisionInfo {
                mode: Mode::Lqr,
                region: Region::Roa,
                verify_steps_used: 0,
                verify_outcome: VerifyOutcome::NotRun,
            });
        }
        if self.parallel {
            return self.decide_parallel(x, i, u);
        }
        let (region, outcome) = self.ver.nn_branch(x, i, &mut self.scratch);
        let verify_steps_used = self.steps_used(outcome, region);
        if outcome.succeeded() {
            self.apply_nn(u);
            return Ok(DecisionInfo {
                mode: Mode::Nn,
                region,
                verify_steps_used,
                verify_outcome: outcome,
            });
        }
        let (status, _) = self.mpc.control_into(&self.mpc_dev, &mut self.du)?;
        self.finish_mpc(status, u)?;
        Ok(DecisionInfo {
            mode: Mode::Mpc,
            region,
            verify_steps_used,
            verify_outcome: outcome,
        })
    }

    fn decide_parallel(&mut self, x: &[T], i: usize, u: &mut [T]) -> Result<DecisionInfo> {
        let had_warm = self.mpc.save_warm(&mut self.warm_backup);
        let (ver, scratch, mpc, dev, du) = (&self.ver, &mut self.scratch, &mut self.mpc, &self.mpc_dev, &mut self.du);
        let ((region, outcome), mpc_res) = std::thread::scope(|sc| {
            let worker = sc.spawn(move || mpc.control_into(dev, du));
            let nn = ver.nn_branch(x, i, scratch);
            (nn, worker.join().expect("MPC worker panicked"))
        });
        let verify_steps_used = self.steps_used(outcome, region);
        if outcome.succeeded() {
            self.mpc.restore_warm(&self.warm_backup, had_warm);
            self.apply_nn(u);
            return Ok(DecisionInfo {
                mode: Mode::Nn,
                region,
                verify_steps_used,
                verify_outcome: outcome,
            });
        }
        let (status, _) = mpc_res?;
        self.finish_mpc(status, u)?;
        Ok(DecisionInfo {
            mode: Mode::Mpc,
            region,
            verify_steps_used,
            verify_outcome: outcome,
        })
    }

    pub fn dispatch(&mut self, x: &StateVec<T>, i: usize) -> Result<ModeDecision<T>> {
        let mut u = DVector::zeros(self.ver.plant.m);
        let info = self.decide_into(x.as_slice(), i, u.as_mut_slice())?;
        Ok(ModeDecision {
            mode: info.mode,
            region: info.region,
            u,
            verify_steps_used: info.verify_steps_used,
            verify_outcome: info.verify_outcome,
        })
    }

    fn expect_variant(&self, v: Variant) -> Result<()> {
        if self.ver.cfg.variant == v {
            Ok(())
        } else {
            Err(MampcError::Precondition(format!("context is configured for the {} variant, not {v}", self.ver.cfg.variant)))
        }
    }

    pub fn dispatch_standard(&mut self, x: &StateVec<T>) -> Result<ModeDecision<T>> {
        self.expect_variant(Variant::Standard)?;
        self.dispatch(x, self.step_index)
    }

    pub fn dispatch_aa(&mut self, x: &StateVec<T>, i: usize) -> Result<ModeDecision<T>> {
        self.expect_variant(Variant::AlternatingAuthority)?;
        self.dispatch(x, i)
    }

    pub fn dispatch_wp(&mut self, x: &StateVec<T>) -> Result<ModeDecision<T>> {
        self.expect_variant(Variant::WayPoint)?;
        self.dispatch(x, self.step_index)
    }

    /// Decision at the internal step counter, which is then advanced.
    pub fn control_into(&mut self, x: &[T], u: &mut [T]) -> Result<DecisionInfo> {
        let info = self.decide_into(x, self.step_index, u)?;
        self.step_index += 1;
        Ok(info)
    }

    /// Sampled test of the conditions under which the MPC could be dropped.
    pub fn failfree_check<G: Fn(&[T]) -> T>(&mut self, sample_box: &BoxSet<T>, n_samples: usize, seed: u64, gamma: G) -> Result<FailFreeReport<T>> {
        let (n, m) = (self.ver.plant.n, self.ver.plant.m);
        check_dim("sample box", n, sample_box.dim())?;
        check_bounded(sample_box)?;
        if n_samples == 0 {
            return Err(MampcError::InvalidParameter {
                name: "n_samples".into(),
                reason: "must be at least 1".into(),
            });
        }
        let spec = self.mpc.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rep = FailFreeReport {
            n_samples,
            excluded: 0,
            admissibility_violations: 0,
            cost_violations: 0,
            gamma_violations: 0,
            worst_cost_margin: -T::infinity(),
            worst_gamma_margin: -T::infinity(),
        };
        let mut rk4 = Rk4Scratch::new(n);
        let mut y = vec![T::zero(); n];
        let mut dev = vec![T::zero(); n];
        let mut du = vec![T::zero(); m];
        let mut ua = vec![T::zero(); m];
        for _ in 0..n_samples {
            let x = sample_box_point(sample_box, &mut rng);
            self.ver.deviation(&x, &mut dev);
            let g = gamma(&dev);
            if !(g >= T::zero()) || !g.is_finite() {
                return Err(MampcError::Precondition(format!("margin function must be nonnegative, got {g}")));
            }
            self.mpc.reset();
            let (status, j_star) = self.mpc.control_into(&dev, &mut du)?;
            if status != MpcStatus::Optimal {
                rep.excluded += 1;
                continue;
            }
            {
                let s = &mut self.scratch;
                self.ver.nn_eval(&x, &mut s.dev, &mut s.nn, &mut s.du, &mut s.u);
                let p = &self.ver.plant;
                if !(p.state_box.contains(&x) && p.input_box.contains(&s.u)) {
                    rep.admissibility_violations += 1;
                }
            }
            y.copy_from_slice(&x);
            let mut cost = T::zero();
            for _ in 0..spec.horizon {
                self.ver.deviation(&y, &mut dev);
                let s = &mut self.scratch;
                self.ver.nn_eval(&y, &mut s.dev, &mut s.nn, &mut s.du, &mut ua);
                self.ver.plant.input_box.clamp_in_place(&mut ua);
                for j in 0..m {
                    du[j] = ua[j] - self.ver.plant.u_eq[j];
                }
                cost += quad_form(&spec.q, &dev) + quad_form(&spec.r, &du);
                self.ver.plant.step_in_place(&mut y, &ua, &mut rk4);
            }
            self.ver.deviation(&y, &mut dev);
            cost += quad_form(&spec.qf, &dev);
            let margin = if cost.is_finite() { cost - j_star - g } else { T::infinity() };
            rep.worst_cost_margin = rep.worst_cost_margin.max(margin);
            if margin > T::zero() {
                rep.cost_violations += 1;
            }
            self.ver.deviation(&x, &mut dev);
            if dev.iter().any(|v| *v != T::zero()) {
                let gm = g - quad_form(&spec.q, &dev);
                rep.worst_gamma_margin = rep.worst_gamma_margin.max(gm);
                if gm >= T::zero() {
                    rep.gamma_violations += 1;
                }
            }
        }
        self.mpc.reset();
        Ok(rep)
    }

    /// Largest one-step gap between the Euler model used in verification
    /// and the RK4 plant, under the clamped NN input.
    pub fn integration_gap(&mut self, sample_box: &BoxSet<T>, n_samples: usize, seed: u64) -> Result<T> {
        let n = self.ver.plant.n;
        check_dim("sample box", n, sample_box.dim())?;
        check_bounded(sample_box)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rk4 = Rk4Scratch::new(n);
        let mut euler = vec![T::zero(); n];
        let mut dx = vec![T::zero(); n];
        let mut u = vec![T::zero(); self.ver.plant.m];
        let mut worst = T::zero();
        for _ in 0..n_samples {
            let x = sample_box_point(sample_box, &mut rng);
            let s = &mut self.scratch;
            self.ver.nn_eval(&x, &mut s.dev, &mut s.nn, &mut s.du, &mut u);
            let p = &self.ver.plant;
            p.input_box.clamp_in_place(&mut u);
            p.euler_step_into(&x, &u, &mut dx, &mut euler);
            let mut truth = x.clone();
            p.step_in_place(&mut truth, &u, &mut rk4);
            for i in 0..n {
                dx[i] = truth[i] - euler[i];
            }
            p.wrap_angles(&mut dx);
            worst = worst.max(norm(&dx));
        }
        Ok(worst)
    }
}
