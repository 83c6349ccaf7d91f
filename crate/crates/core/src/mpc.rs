//! Linear MPC on the discretized model, condensed to a dense QP over the
//! input sequence.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, MampcError, Result};
use crate::lqr::{lqr_gain, solve_dare, DareOptions};
use crate::plants::{Linearization, Plant};
use crate::qp::{QProblem, QpSolver, QpStatus};
use crate::sets::{BoxSet, NormBall};
use crate::{InputVec, Real, StateVec};

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSpec<T: Real> {
    pub horizon: usize,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub qf: DMatrix<T>,
    pub a_d: DMatrix<T>,
    pub b_d: DMatrix<T>,
    /// Applies to the current state and every predicted state.
    pub state_box: BoxSet<T>,
    /// Input deviations from the equilibrium input.
    pub input_box: BoxSet<T>,
    pub terminal_ball: Option<NormBall<T>>,
}

impl<T: Real> MpcSpec<T> {
    /// Spec for a plant with the DARE solution as terminal weight. Wrapped
    /// angle coordinates are left unconstrained in the predictions.
    pub fn for_plant(plant: &Plant<T>, lin: &Linearization<T>, horizon: usize, q: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        let qf = solve_dare(&lin.a_d, &lin.b_d, &q, &r, &DareOptions::default())?;
        let mut lo = plant.state_box.lower().clone();
        let mut hi = plant.state_box.upper().clone();
        for &i in &plant.angle_indices {
            lo[i] = -T::infinity();
            hi[i] = T::infinity();
        }
        let spec = Self {
            horizon,
            q,
            r,
            qf,
            a_d: lin.a_d.clone(),
            b_d: lin.b_d.clone(),
            state_box: BoxSet::new(lo, hi)?,
            input_box: plant.deviation_input_box(),
            terminal_ball: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n(&self) -> usize {
        self.a_d.nrows()
    }

    pub fn m(&self) -> usize {
        self.b_d.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.horizon == 0 {
            return Err(MampcError::InvalidParameter {
                name: "horizon".into(),
                reason: "must be at least 1".into(),
            });
        }
        check_dim("A columns", n, self.a_d.ncols())?;
        check_dim("B rows", n, self.b_d.nrows())?;
        check_dim("Q size", n, self.q.nrows())?;
        check_dim("Q size", n, self.q.ncols())?;
        check_dim("Qf size", n, self.qf.nrows())?;
        check_dim("Qf size", n, self.qf.ncols())?;
        check_dim("R size", m, self.r.nrows())?;
        check_dim("R size", m, self.r.ncols())?;
        check_dim("state box", n, self.state_box.dim())?;
        check_dim("input box", m, self.input_box.dim())?;
        for (name, w) in [("Q", &self.q), ("Qf", &self.qf)] {
            let sym = (w + w.transpose()) * T::lit(0.5);
            let min = sym.symmetric_eigenvalues().iter().fold(T::infinity(), |a, &v| a.min(v));
            if min < -T::tol(1e-12) * T::one().max(w.amax()) {
                return Err(MampcError::InvalidParameter {
                    name: name.into(),
                    reason: "must be positive semidefinite".into(),
                });
            }
        }
        if self.r.clone().cholesky().is_none() {
            return Err(MampcError::InvalidParameter {
                name: "R".into(),
                reason: "must be positive definite".into(),
            });
        }
        Ok(())
    }
}

/// Unit normals of an outer polytope of the Euclidean ball: coordinate axes,
/// neighbouring pair diagonals and neighbouring triple diagonals (cyclic),
/// one representative per ± pair.
pub fn ball_facet_normals<T: Real>(n: usize) -> Vec<DVector<T>> {
    let mut raw: Vec<DVector<T>> = Vec::new();
    for j in 0..n {
        let e = |i: usize| i % n;
        let mut v = DVector::zeros(n);
        v[j] = T::one();
        raw.push(v);
        let mut v = DVector::zeros(n);
        v[e(j)] += T::one();
        v[e(j + 1)] += T::one();
        raw.push(v);
        let mut v = DVector::zeros(n);
        v[e(j)] += T::one();
        v[e(j + 1)] -= T::one();
        raw.push(v);
        let mut v = DVector::zeros(n);
        v[e(j)] += T::one();
        v[e(j + 1)] += T::one();
        v[e(j + 2)] += T::one();
        raw.push(v);
    }
    let mut out: Vec<DVector<T>> = Vec::new();
    for v in raw {
        let nv = v.norm();
        if nv <= T::tol(1e-12) {
            continue;
        }
        let u = v / nv;
        let dup = out
            .iter()
            .any(|w| (w - &u).amax() <= T::tol(1e-12) || (w + &u).amax() <= T::tol(1e-12));
        if !dup {
            out.push(u);
        }
    }
    out
}

/// Dense condensed form in equilibrated variables `z̃` with `u = D z̃`.
/// For a state x0 the QP is `H̃`, `g̃ = F x0`, rows `C` with bounds
/// `lb0 − S x0 ≤ C z̃ ≤ ub0 − S x0`; the MPC cost is
/// `cost_scale·(½z̃ᵀH̃z̃ + g̃ᵀz̃) + x0ᵀ W x0`.
#[derive(Debug, Clone)]
pub struct Condensed<T: Real> {
    pub phi: DMatrix<T>,
    pub gamma: DMatrix<T>,
    pub col_scale: DVector<T>,
    pub cost_scale: T,
    pub h: DMatrix<T>,
    pub f: DMatrix<T>,
    pub w: DMatrix<T>,
    pub c: DMatrix<T>,
    pub lb0: DVector<T>,
    pub ub0: DVector<T>,
    pub s: DMatrix<T>,
}

pub fn condense<T: Real>(spec: &MpcSpec<T>) -> Result<Condensed<T>> {
    spec.validate()?;
    let (n, m, horizon) = (spec.n(), spec.m(), spec.horizon);
    let (nx, nu) = (n * horizon, m * horizon);
    let mut phi = DMatrix::zeros(nx, n);
    let mut gamma = DMatrix::zeros(nx, nu);
    let mut ak = DMatrix::<T>::identity(n, n);
    // powers A^0..A^{N-1} B
    let mut apow_b = Vec::with_capacity(horizon);
    let mut ab = spec.b_d.clone();
    for _ in 0..horizon {
        apow_b.push(ab.clone());
        ab = &spec.a_d * ab;
    }
    for k in 0..horizon {
        ak = &spec.a_d * ak;
        phi.view_mut((k * n, 0), (n, n)).copy_from(&ak);
        for j in 0..=k {
            gamma.view_mut((k * n, j * m), (n, m)).copy_from(&apow_b[k - j]);
        }
    }
    let mut qbar = DMatrix::zeros(nx, nx);
    for k in 0..horizon {
        let blk = if k + 1 == horizon { &spec.qf } else { &spec.q };
        qbar.view_mut((k * n, k * n), (n, n)).copy_from(blk);
    }
    let mut rbar = DMatrix::zeros(nu, nu);
    for k in 0..horizon {
        rbar.view_mut((k * m, k * m), (m, m)).copy_from(&spec.r);
    }
    let gt_q = gamma.transpose() * &qbar;
    let mut h = (&gt_q * &gamma + &rbar) * T::lit(2.0);
    h = (&h + h.transpose()) * T::lit(0.5);
    let f = &gt_q * &phi * T::lit(2.0);
    let w = &spec.q + phi.transpose() * &qbar * &phi;

    let mut rows_c: Vec<DVector<T>> = Vec::new();
    let mut rows_s: Vec<DVector<T>> = Vec::new();
    let mut lb = Vec::new();
    let mut ub = Vec::new();
    for k in 0..horizon {
        for j in 0..m {
            let (lo, hi) = (spec.input_box.lower()[j], spec.input_box.upper()[j]);
            if lo.is_finite() || hi.is_finite() {
                let mut row = DVector::zeros(nu);
                row[k * m + j] = T::one();
                rows_c.push(row);
                rows_s.push(DVector::zeros(n));
                lb.push(lo);
                ub.push(hi);
            }
        }
    }
    for k in 0..horizon {
        for i in 0..n {
            let (lo, hi) = (spec.state_box.lower()[i], spec.state_box.upper()[i]);
            if lo.is_finite() || hi.is_finite() {
                rows_c.push(gamma.row(k * n + i).transpose());
                rows_s.push(phi.row(k * n + i).transpose());
                lb.push(lo);
                ub.push(hi);
            }
        }
    }
    if let Some(ball) = spec.terminal_ball {
        let last = (horizon - 1) * n;
        let gam_n = gamma.view((last, 0), (n, nu));
        let phi_n = phi.view((last, 0), (n, n));
        for a in ball_facet_normals::<T>(n) {
            rows_c.push(gam_n.transpose() * &a);
            rows_s.push(phi_n.transpose() * &a);
            lb.push(-ball.radius());
            ub.push(ball.radius());
        }
    }
    let k = rows_c.len();
    let mut c = DMatrix::from_fn(k, nu, |i, j| rows_c[i][j]);
    let mut s = DMatrix::from_fn(k, n, |i, j| rows_s[i][j]);

    // equilibrate: inputs to unit boxes, Hessian to unit size, rows to unit size
    let col_scale = DVector::from_fn(nu, |i, _| {
        let j = i % m;
        let half = spec.input_box.upper()[j] - spec.input_box.lower()[j];
        if half.is_finite() && half > T::zero() {
            half * T::lit(0.5)
        } else {
            T::one()
        }
    });
    for i in 0..nu {
        for j in 0..nu {
            h[(i, j)] *= col_scale[i] * col_scale[j];
        }
    }
    let cost_scale = if h.amax() > T::zero() { h.amax() } else { T::one() };
    h /= cost_scale;
    let mut f = f;
    for i in 0..nu {
        for j in 0..n {
            f[(i, j)] *= col_scale[i] / cost_scale;
        }
    }
    for j in 0..nu {
        for i in 0..k {
            c[(i, j)] *= col_scale[j];
        }
    }
    for i in 0..k {
        let rn = c.row(i).amax();
        if rn > T::zero() {
            for j in 0..nu {
                c[(i, j)] /= rn;
            }
            for j in 0..n {
                s[(i, j)] /= rn;
            }
            lb[i] /= rn;
            ub[i] /= rn;
        }
    }
    Ok(Condensed {
        phi,
        gamma,
        col_scale,
        cost_scale,
        h,
        f,
        w,
        c,
        lb0: DVector::from_vec(lb),
        ub0: DVector::from_vec(ub),
        s,
    })
}

impl<T: Real> Condensed<T> {
    pub fn problem(&self, x0: &[T]) -> QProblem<T> {
        let k = self.c.nrows();
        let mut p = QProblem {
            h: self.h.clone(),
            g: DVector::zeros(self.h.nrows()),
            c: self.c.clone(),
            lb: DVector::zeros(k),
            ub: DVector::zeros(k),
        };
        self.fill(x0, &mut p);
        p
    }

    /// Updates the state-dependent parts of `p` in place.
    pub fn fill(&self, x0: &[T], p: &mut QProblem<T>) {
        for i in 0..self.f.nrows() {
            let mut v = T::zero();
            for j in 0..x0.len() {
                v += self.f[(i, j)] * x0[j];
            }
            p.g[i] = v;
        }
        for i in 0..self.s.nrows() {
            let mut v = T::zero();
            for j in 0..x0.len() {
                v += self.s[(i, j)] * x0[j];
            }
            p.lb[i] = self.lb0[i] - v;
            p.ub[i] = self.ub0[i] - v;
        }
    }

    /// MPC cost of the equilibrated sequence `zs` from `x0`.
    pub fn cost(&self, x0: &[T], p: &QProblem<T>, zs: &[T]) -> T {
        let mut quad = T::zero();
        for i in 0..zs.len() {
            let mut hz = T::zero();
            for j in 0..zs.len() {
                hz += p.h[(i, j)] * zs[j];
            }
            quad += zs[i] * (T::lit(0.5) * hz + p.g[i]);
        }
        self.cost_scale * quad + self.constant(x0)
    }

    pub fn unscale(&self, zs: &[T]) -> DVector<T> {
        DVector::from_fn(zs.len(), |i, _| zs[i] * self.col_scale[i])
    }

    pub fn constant(&self, x0: &[T]) -> T {
        let mut acc = T::zero();
        for i in 0..x0.len() {
            for j in 0..x0.len() {
                acc += x0[i] * self.w[(i, j)] * x0[j];
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    Optimal,
    /// The QP is infeasible or the current state violates the state box.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcResult<T: Real> {
    /// First input as a deviation from the equilibrium input.
    pub u0: InputVec<T>,
    pub sequence: DVector<T>,
    pub cost: T,
    pub feasible: bool,
    pub status: MpcStatus,
    pub qp_iterations: usize,
}

/// MPC with a cached condensed problem and solver workspace. Each solve is
/// warm-started from the shifted previous solution.
#[derive(Debug, Clone)]
pub struct MpcController<T: Real> {
    spec: MpcSpec<T>,
    cond: Condensed<T>,
    solver: QpSolver<T>,
    problem: QProblem<T>,
    probe_solver: QpSolver<T>,
    probe: QProblem<T>,
    fallback_gain: DMatrix<T>,
    warm: Vec<T>,
    has_warm: bool,
}

impl<T: Real> MpcController<T> {
    pub fn new(spec: MpcSpec<T>) -> Result<Self> {
        let cond = condense(&spec)?;
        let problem = cond.problem(&vec![T::zero(); spec.n()]);
        let nu = cond.h.nrows();
        let probe = QProblem {
            h: DMatrix::identity(nu, nu),
            g: DVector::zeros(nu),
            c: cond.c.clone(),
            lb: problem.lb.clone(),
            ub: problem.ub.clone(),
        };
        let fallback_gain = solve_dare(&spec.a_d, &spec.b_d, &spec.q, &spec.r, &DareOptions::default())
            .and_then(|p| lqr_gain(&spec.a_d, &spec.b_d, &spec.r, &p))
            .unwrap_or_else(|_| DMatrix::zeros(spec.m(), spec.n()));
        Ok(Self {
            spec,
            cond,
            solver: QpSolver::default(),
            problem,
            probe_solver: QpSolver::default(),
            probe,
            fallback_gain,
            warm: vec![T::zero(); nu],
            has_warm: false,
        })
    }

    pub fn spec(&self) -> &MpcSpec<T> {
        &self.spec
    }

    pub fn condensed(&self) -> &Condensed<T> {
        &self.cond
    }

    pub fn reset(&mut self) {
        self.has_warm = false;
        self.warm.iter_mut().for_each(|v| *v = T::zero());
    }

    fn check_state(&self, x: &[T]) -> Result<()> {
        check_dim("MPC state", self.spec.n(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("MPC state"));
        }
        Ok(())
    }

    /// Solves for the first input deviation, written into `u0`. On
    /// infeasibility `u0` holds the clamped LQR fallback.
    pub fn control_into(&mut self, x: &[T], u0: &mut [T]) -> Result<(MpcStatus, T)> {
        self.check_state(x)?;
        let m = self.spec.m();
        if !self.spec.state_box.contains(x) {
            self.fallback(x, u0);
            return Ok((MpcStatus::Infeasible, T::infinity()));
        }
        self.cond.fill(x, &mut self.problem);
        let warm = if self.has_warm { Some(&self.warm[..]) } else { None };
        let info = self.solver.solve_in_place(&self.problem, warm)?;
        match info.status {
            QpStatus::Optimal => {
                let z = self.solver.solution();
                for j in 0..m {
                    u0[j] = z[j] * self.cond.col_scale[j];
                }
                // ZOH clamp guards against last-bit bound overshoot
                self.spec.input_box.clamp_in_place(u0);
                let nu = z.len();
                self.warm[..nu - m].copy_from_slice(&z[m..]);
                for j in 0..m {
                    self.warm[nu - m + j] = z[nu - m + j];
                }
                self.has_warm = true;
                let cost = self.objective_value(x);
                Ok((MpcStatus::Optimal, cost))
            }
            QpStatus::PrimalInfeasible => {
                self.fallback(x, u0);
                self.has_warm = false;
                Ok((MpcStatus::Infeasible, T::infinity()))
            }
            QpStatus::MaxIters => Err(MampcError::QpMaxIters(info.iterations)),
        }
    }

    fn objective_value(&self, x: &[T]) -> T {
        self.cond
            .cost(x, &self.problem, self.solver.solution())
            .max(T::zero())
    }

    fn fallback(&self, x: &[T], u0: &mut [T]) {
        for (i, u) in u0.iter_mut().enumerate() {
            let mut v = T::zero();
            for (j, xj) in x.iter().enumerate() {
                v -= self.fallback_gain[(i, j)] * *xj;
            }
            *u = v;
        }
        self.spec.input_box.clamp_in_place(u0);
    }

    pub fn control(&mut self, x: &StateVec<T>, warm_start: Option<&DVector<T>>) -> Result<MpcResult<T>> {
        if let Some(w) = warm_start {
            check_dim("MPC warm start", self.warm.len(), w.len())?;
            for i in 0..w.len() {
                self.warm[i] = w[i] / self.cond.col_scale[i];
            }
            self.has_warm = true;
        }
        let mut u0 = DVector::zeros(self.spec.m());
        let (status, cost) = self.control_into(x.as_slice(), u0.as_mut_slice())?;
        let feasible = status == MpcStatus::Optimal;
        let sequence = if feasible {
            self.cond.unscale(self.solver.solution())
        } else {
            DVector::zeros(self.warm.len())
        };
        Ok(MpcResult {
            u0,
            sequence,
            cost,
            feasible,
            status,
            qp_iterations: 0,
        })
    }

    /// Optimal cost, or `None` outside the feasible set.
    pub fn optimal_cost(&mut self, x: &StateVec<T>) -> Result<Option<T>> {
        let r = self.control(x, None)?;
        Ok(r.feasible.then_some(r.cost))
    }

    /// Whether the constraint set admits any input sequence from `x`.
    pub fn is_feasible(&mut self, x: &[T]) -> Result<bool> {
        self.check_state(x)?;
        if !self.spec.state_box.contains(x) {
            return Ok(false);
        }
        self.cond.fill(x, &mut self.problem);
        self.probe.lb.copy_from(&self.problem.lb);
        self.probe.ub.copy_from(&self.problem.ub);
        let info = self.probe_solver.solve_in_place(&self.probe, None)?;
        match info.status {
            QpStatus::Optimal => Ok(true),
            QpStatus::PrimalInfeasible => Ok(false),
            QpStatus::MaxIters => Err(MampcError::QpMaxIters(info.iterations)),
        }
    }

    pub(crate) fn save_warm(&self, buf: &mut Vec<T>) -> bool {
        buf.clear();
        buf.extend_from_slice(&self.warm);
        self.has_warm
    }

    pub(crate) fn restore_warm(&mut self, buf: &[T], has_warm: bool) {
        self.warm.copy_from_slice(buf);
        self.has_warm = has_warm;
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }
}

pub fn mpc_control<T: Real>(spec: &MpcSpec<T>, x: &StateVec<T>, warm_start: Option<&DVector<T>>) -> Result<MpcResult<T>> {
    MpcController::new(spec.clone())?.control(x, warm_start)
}

pub fn feasible_set_member<T: Real>(spec: &MpcSpec<T>, x: &StateVec<T>) -> Result<bool> {
    MpcController::new(spec.clone())?.is_feasible(x.as_slice())
}
