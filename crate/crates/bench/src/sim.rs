//! Closed-loop simulation on the RK4 plant with per-step controller timing.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use mampc_core::hybrid::{HybridContext, Mode};
use mampc_core::mpc::{MpcController, MpcStatus};
use mampc_core::plants::{Plant, Rk4Scratch};
use mampc_core::{BoxSet, MampcError};
use nalgebra::DVector;

/// Which law produced a step's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Lqr,
    Nn,
    Mpc,
    Lookup,
    Fixed,
}

impl Tag {
    pub const ALL: [Tag; 5] = [Tag::Lqr, Tag::Nn, Tag::Mpc, Tag::Lookup, Tag::Fixed];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Lqr => "LQR",
            Tag::Nn => "NN",
            Tag::Mpc => "MPC",
            Tag::Lookup => "LOOKUP",
            Tag::Fixed => "FIXED",
        }
    }
}

impl From<Mode> for Tag {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Lqr => Tag::Lqr,
            Mode::Nn => Tag::Nn,
            Mode::Mpc => Tag::Mpc,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Tag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown mode tag `{s}`"))
    }
}

/// A feedback law producing absolute plant inputs.
pub trait Controller {
    fn label(&self) -> &str;
    fn control_into(&mut self, x: &[f64], u: &mut [f64]) -> Result<Tag, MampcError>;
    /// Back to the state of a fresh controller.
    fn reset(&mut self);
}

impl Controller for HybridContext<f64> {
    fn label(&self) -> &str {
        "mampc"
    }

    fn control_into(&mut self, x: &[f64], u: &mut [f64]) -> Result<Tag, MampcError> {
        HybridContext::control_into(self, x, u).map(|d| d.mode.into())
    }

    fn reset(&mut self) {
        HybridContext::reset(self)
    }
}

/// Implicit MPC alone, in absolute coordinates.
#[derive(Debug, Clone)]
pub struct ImplicitMpc {
    mpc: MpcController<f64>,
    x_eq: DVector<f64>,
    u_eq: DVector<f64>,
    input_box: BoxSet<f64>,
    dev: Vec<f64>,
    du: Vec<f64>,
}

impl ImplicitMpc {
    pub fn new(mpc: MpcController<f64>, plant: &Plant<f64>) -> Self {
        Self {
            mpc,
            x_eq: plant.x_eq.clone(),
            u_eq: plant.u_eq.clone(),
            input_box: plant.input_box.clone(),
            dev: vec![0.0; plant.n],
            du: vec![0.0; plant.m],
        }
    }
}

impl Controller for ImplicitMpc {
    fn label(&self) -> &str {
        "implicit_mpc"
    }

    fn control_into(&mut self, x: &[f64], u: &mut [f64]) -> Result<Tag, MampcError> {
        for i in 0..x.len() {
            self.dev[i] = x[i] - self.x_eq[i];
        }
        let (status, _) = self.mpc.control_into(&self.dev, &mut self.du)?;
        if status != MpcStatus::Optimal {
            return Err(MampcError::Infeasible);
        }
        for j in 0..u.len() {
            u[j] = self.u_eq[j] + self.du[j];
        }
        self.input_box.clamp_in_place(u);
        Ok(Tag::Mpc)
    }

    fn reset(&mut self) {
        self.mpc.reset();
    }
}

/// Constant input; used to measure the harness floor.
#[derive(Debug, Clone)]
pub struct FixedInput {
    pub u: Vec<f64>,
}

impl Controller for FixedInput {
    fn label(&self) -> &str {
        "fixed"
    }

    fn control_into(&mut self, _x: &[f64], u: &mut [f64]) -> Result<Tag, MampcError> {
        u.copy_from_slice(&self.u);
        Ok(Tag::Fixed)
    }

    fn reset(&mut self) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxSteps,
    Infeasible,
    BlowUp,
    /// Any other controller error.
    Failed(String),
}

impl Termination {
    pub fn name(&self) -> &str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxSteps => "max_steps",
            Termination::Infeasible => "infeasible",
            Termination::BlowUp => "blow_up",
            Termination::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    /// `steps + 1` states, starting at x0.
    pub trajectory: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub modes: Vec<Tag>,
    pub per_step_ns: Vec<u64>,
    pub terminated: Termination,
    pub steps: usize,
}

impl SimReport {
    pub fn final_state(&self) -> &DVector<f64> {
        &self.trajectory[self.trajectory.len() - 1]
    }

    pub fn total_ns(&self) -> u64 {
        self.per_step_ns.iter().sum()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.modes.iter().filter(|&&t| t == tag).count()
    }
}

const BLOW_UP_NORM: f64 = 1e6;

fn deviation_norm(plant: &Plant<f64>, x: &[f64]) -> f64 {
    x.iter()
        .zip(plant.x_eq.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Runs the loop until `‖x − x_eq‖ ≤ tol`, `max_steps`, or a failure. Only
/// the controller call is timed.
pub fn simulate(ctl: &mut dyn Controller, plant: &Plant<f64>, x0: &[f64], max_steps: usize, tol: f64) -> SimReport {
    let (n, m) = (plant.n, plant.m);
    assert_eq!(x0.len(), n, "initial state has wrong dimension");
    let mut x = x0.to_vec();
    let mut u = vec![0.0; m];
    let mut scratch = Rk4Scratch::new(n);
    let mut rep = SimReport {
        trajectory: vec![DVector::from_column_slice(x0)],
        inputs: Vec::new(),
        modes: Vec::new(),
        per_step_ns: Vec::new(),
        terminated: Termination::MaxSteps,
        steps: 0,
    };
    if x0.iter().any(|v| !v.is_finite()) {
        rep.terminated = Termination::BlowUp;
        return rep;
    }
    loop {
        if deviation_norm(plant, &x) <= tol {
            rep.terminated = Termination::Converged;
            break;
        }
        if rep.steps >= max_steps {
            break;
        }
        let t0 = Instant::now();
        let res = ctl.control_into(&x, &mut u);
        let ns = t0.elapsed().as_nanos() as u64;
        let tag = match res {
            Ok(t) => t,
            Err(MampcError::Infeasible) => {
                rep.terminated = Termination::Infeasible;
                break;
            }
            Err(e) => {
                rep.terminated = Termination::Failed(e.to_string());
                break;
            }
        };
        plant.step_in_place(&mut x, &u, &mut scratch);
        rep.inputs.push(DVector::from_column_slice(&u));
        rep.modes.push(tag);
        rep.per_step_ns.push(ns);
        rep.trajectory.push(DVector::from_column_slice(&x));
        rep.steps += 1;
        if x.iter().any(|v| !v.is_finite()) || deviation_norm(plant, &x) > BLOW_UP_NORM {
            rep.terminated = Termination::BlowUp;
            break;
        }
    }
    rep
}

/// Open-loop replay of recorded inputs.
pub fn replay(plant: &Plant<f64>, x0: &[f64], inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut x = x0.to_vec();
    let mut s = Rk4Scratch::new(plant.n);
    let mut out = vec![DVector::from_column_slice(x0)];
    for u in inputs {
        plant.step_in_place(&mut x, u.as_slice(), &mut s);
        out.push(DVector::from_column_slice(&x));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mampc_core::plants::PlantKind;

    #[test]
    fn origin_converges_at_step_zero() {
        let plant = Plant::builtin(PlantKind::Pendulum);
        let mut c = FixedInput { u: vec![0.0] };
        let r = simulate(&mut c, &plant, &[0.0, 0.0], 10, 0.01);
        assert_eq!((r.terminated.clone(), r.steps), (Termination::Converged, 0));
        assert_eq!(r.trajectory.len(), 1);
    }

    #[test]
    fn uncontrolled_pendulum_runs_out_of_steps() {
        let plant = Plant::builtin(PlantKind::Pendulum);
        let mut c = FixedInput { u: vec![0.0] };
        let r = simulate(&mut c, &plant, &[0.3, 0.0], 25, 0.01);
        assert_eq!(r.terminated, Termination::MaxSteps);
        assert_eq!(r.steps, 25);
        assert_eq!((r.inputs.len(), r.modes.len(), r.per_step_ns.len(), r.trajectory.len()), (25, 25, 25, 26));
        assert_eq!(replay(&plant, &[0.3, 0.0], &r.inputs), r.trajectory);
    }

    #[test]
    fn tags_parse() {
        for t in Tag::ALL {
            assert_eq!(t.name().parse::<Tag>().unwrap(), t);
        }
        assert!("X".parse::<Tag>().is_err());
    }
}
