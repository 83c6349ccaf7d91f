//! Convex QP `min ½zᵀHz + gᵀz  s.t. lb ≤ Cz ≤ ub` by operator splitting
//! (ADMM with over-relaxation, adaptive penalty and Ruiz equilibration),
//! finished by an active-set polish on the reduced KKT system.
//!
//! Dual sign convention: `Hz + g + Cᵀy = 0`, `y_i > 0` at an active upper
//! bound and `y_i < 0` at an active lower bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, MampcError, Result};
use crate::linalg::Ldl;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct QProblem<T: Real> {
    pub h: DMatrix<T>,
    pub g: DVector<T>,
    pub c: DMatrix<T>,
    pub lb: DVector<T>,
    pub ub: DVector<T>,
}

impl<T: Real> QProblem<T> {
    /// Box-constrained problem `lo ≤ z ≤ hi`.
    pub fn boxed(h: DMatrix<T>, g: DVector<T>, lo: DVector<T>, hi: DVector<T>) -> Self {
        let d = g.len();
        Self {
            h,
            g,
            c: DMatrix::identity(d, d),
            lb: lo,
            ub: hi,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.g.len(), self.c.nrows())
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        (z.transpose() * &self.h * z)[(0, 0)] * T::lit(0.5) + self.g.dot(z)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = self.dims();
        check_dim("QP Hessian rows", d, self.h.nrows())?;
        check_dim("QP Hessian columns", d, self.h.ncols())?;
        check_dim("QP constraint columns", d, self.c.ncols())?;
        check_dim("QP lower bounds", k, self.lb.len())?;
        check_dim("QP upper bounds", k, self.ub.len())?;
        if self.h.iter().chain(self.g.iter()).chain(self.c.iter()).any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("QP data"));
        }
        for i in 0..k {
            if self.lb[i].is_nan() || self.ub[i].is_nan() {
                return Err(MampcError::NonFinite("QP bounds"));
            }
            if self.lb[i] > self.ub[i] {
                return Err(MampcError::InvalidBox(i));
            }
        }
        let scale = self.h.amax();
        if scale == T::zero() {
            return Err(MampcError::ZeroHessian);
        }
        for i in 0..d {
            for j in 0..i {
                if (self.h[(i, j)] - self.h[(j, i)]).abs() > T::tol(1e-9) * scale {
                    return Err(MampcError::InvalidParameter {
                        name: "H".into(),
                        reason: "Hessian is not symmetric".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub z: DVector<T>,
    pub status: QpStatus,
    pub kkt_residual: T,
    pub iterations: usize,
    pub duals: DVector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpInfo<T: Real> {
    pub status: QpStatus,
    pub kkt_residual: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings<T: Real> {
    pub rho: T,
    pub sigma: T,
    pub alpha: T,
    pub eps_abs: T,
    pub eps_rel: T,
    pub eps_infeasible: T,
    /// Consecutive iterations the infeasibility certificate must hold.
    pub infeasible_window: usize,
    pub max_iters: usize,
    pub kkt_tol: T,
    pub feas_tol: T,
    pub hessian_reg: T,
    pub scaling_iters: usize,
    pub adapt_interval: usize,
    pub polish: bool,
    pub polish_iters: usize,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            rho: T::lit(0.1),
            sigma: T::tol(1e-6),
            alpha: T::lit(1.6),
            eps_abs: T::tol(1e-7),
            eps_rel: T::tol(1e-7),
            eps_infeasible: T::tol(1e-5),
            infeasible_window: 100,
            max_iters: 4000,
            kkt_tol: T::tol(1e-6),
            feas_tol: T::tol(1e-8),
            hessian_reg: T::tol(1e-9),
            scaling_iters: 10,
            adapt_interval: 25,
            polish: true,
            polish_iters: 30,
        }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const EQ_RHO_FACTOR: f64 = 1e3;
const BOUND_INF: f64 = 1e20;

/// Reusable solver. Buffers are sized on the first solve of a given shape and
/// the factorizations are cached while `H` and `C` stay unchanged, so repeated
/// solves of same-shaped problems do not allocate.
#[derive(Debug, Clone)]
pub struct QpSolver<T: Real> {
    pub settings: QpSettings<T>,
    d: usize,
    k: usize,
    h_cache: DMatrix<T>,
    c_cache: DMatrix<T>,
    cached: bool,
    // scaling
    dsc: Vec<T>,
    esc: Vec<T>,
    csc: T,
    ph: DMatrix<T>,
    ac: DMatrix<T>,
    q: Vec<T>,
    l: Vec<T>,
    u: Vec<T>,
    rho: T,
    rho_vec: Vec<T>,
    kkt_mat: DMatrix<T>,
    kkt: Ldl<T>,
    factored_rho: T,
    // iterates (scaled)
    x: Vec<T>,
    z: Vec<T>,
    y: Vec<T>,
    xt: Vec<T>,
    zt: Vec<T>,
    dy: Vec<T>,
    wd: Vec<T>,
    wd2: Vec<T>,
    wk: Vec<T>,
    // polish
    pol: Ldl<T>,
    active: Vec<usize>,
    side: Vec<i8>,
    psol: Vec<T>,
    prhs: Vec<T>,
    pres: Vec<T>,
    // output (unscaled)
    sol_z: Vec<T>,
    sol_y: Vec<T>,
    cz: Vec<T>,
}

impl<T: Real> Default for QpSolver<T> {
    fn default() -> Self {
        Self::new(QpSettings::default())
    }
}

impl<T: Real> QpSolver<T> {
    pub fn new(settings: QpSettings<T>) -> Self {
        let mut s = Self {
            settings,
            d: usize::MAX,
            k: usize::MAX,
            h_cache: DMatrix::zeros(0, 0),
            c_cache: DMatrix::zeros(0, 0),
            cached: false,
            dsc: Vec::new(),
            esc: Vec::new(),
            csc: T::one(),
            ph: DMatrix::zeros(0, 0),
            ac: DMatrix::zeros(0, 0),
            q: Vec::new(),
            l: Vec::new(),
            u: Vec::new(),
            rho: settings.rho,
            rho_vec: Vec::new(),
            kkt_mat: DMatrix::zeros(0, 0),
            kkt: Ldl::with_capacity(0),
            factored_rho: T::zero(),
            x: Vec::new(),
            z: Vec::new(),
            y: Vec::new(),
            xt: Vec::new(),
            zt: Vec::new(),
            dy: Vec::new(),
            wd: Vec::new(),
            wd2: Vec::new(),
            wk: Vec::new(),
            pol: Ldl::with_capacity(0),
            active: Vec::new(),
            side: Vec::new(),
            psol: Vec::new(),
            prhs: Vec::new(),
            pres: Vec::new(),
            sol_z: Vec::new(),
            sol_y: Vec::new(),
            cz: Vec::new(),
        };
        s.resize(0, 0);
        s
    }

    fn resize(&mut self, d: usize, k: usize) {
        if self.d == d && self.k == k {
            return;
        }
        let z = T::zero();
        self.d = d;
        self.k = k;
        self.cached = false;
        self.h_cache = DMatrix::zeros(d, d);
        self.c_cache = DMatrix::zeros(k, d);
        self.dsc = vec![T::one(); d];
        self.esc = vec![T::one(); k];
        self.ph = DMatrix::zeros(d, d);
        self.ac = DMatrix::zeros(k, d);
        self.q = vec![z; d];
        self.l = vec![z; k];
        self.u = vec![z; k];
        self.rho_vec = vec![z; k];
        self.kkt_mat = DMatrix::zeros(d, d);
        self.kkt = Ldl::with_capacity(d);
        self.x = vec![z; d];
        self.z = vec![z; k];
        self.y = vec![z; k];
        self.xt = vec![z; d];
        self.zt = vec![z; k];
        self.dy = vec![z; k];
        self.wd = vec![z; d];
        self.wd2 = vec![z; d];
        self.wk = vec![z; k];
        self.pol = Ldl::with_capacity(d + k);
        self.active = Vec::with_capacity(k);
        self.side = vec![0; k];
        self.psol = vec![z; d + k];
        self.prhs = vec![z; d + k];
        self.pres = vec![z; d + k];
        self.sol_z = vec![z; d];
        self.sol_y = vec![z; k];
        self.cz = vec![z; k];
    }

    /// Primal solution of the last solve.
    pub fn solution(&self) -> &[T] {
        &self.sol_z
    }

    /// Dual solution of the last solve.
    pub fn duals(&self) -> &[T] {
        &self.sol_y
    }

    pub fn solve(&mut self, p: &QProblem<T>, warm_start: Option<&[T]>) -> Result<QpSolution<T>> {
        let info = self.solve_in_place(p, warm_start)?;
        Ok(QpSolution {
            z: DVector::from_column_slice(&self.sol_z),
            status: info.status,
            kkt_residual: info.kkt_residual,
            iterations: info.iterations,
            duals: DVector::from_column_slice(&self.sol_y),
        })
    }

    pub fn solve_in_place(&mut self, p: &QProblem<T>, warm_start: Option<&[T]>) -> Result<QpInfo<T>> {
        let (d, k) = p.dims();
        self.resize(d, k);
        if !(self.cached && p.h == self.h_cache && p.c == self.c_cache) {
            p.validate()?;
            self.prepare_matrices(p)?;
        } else {
            // cheap checks on the parts that change between solves
            check_dim("QP linear term", d, p.g.len())?;
            check_dim("QP lower bounds", k, p.lb.len())?;
            check_dim("QP upper bounds", k, p.ub.len())?;
            for i in 0..k {
                if p.lb[i].is_nan() || p.ub[i].is_nan() {
                    return Err(MampcError::NonFinite("QP bounds"));
                }
                if p.lb[i] > p.ub[i] {
                    return Err(MampcError::InvalidBox(i));
                }
            }
            if p.g.iter().any(|v| !v.is_finite()) {
                return Err(MampcError::NonFinite("QP linear term"));
            }
        }
        if let Some(w) = warm_start {
            check_dim("QP warm start", d, w.len())?;
        }

        // Active-set guess from the warm start (or the unconstrained optimum).
        if self.settings.polish {
            self.side.iter_mut().for_each(|s| *s = 0);
            if let Some(w) = warm_start {
                self.sol_z.copy_from_slice(w);
                self.guess_active_from_primal(p);
            }
            if let Some(res) = self.polish(p) {
                return Ok(QpInfo {
                    status: QpStatus::Optimal,
                    kkt_residual: res,
                    iterations: 0,
                });
            }
        }
        self.admm(p, warm_start)
    }

    fn prepare_matrices(&mut self, p: &QProblem<T>) -> Result<()> {
        let (d, k) = (self.d, self.k);
        // positive semidefiniteness: H + reg·I must admit a Cholesky factor
        let reg = self.settings.hessian_reg * T::one().max(p.h.amax());
        let h = &p.h;
        if !self.kkt.factor_with(d, |i, j| h[(i, j)] + if i == j { reg } else { T::zero() })
            || self.kkt.pivots().iter().any(|&v| v <= T::zero())
        {
            return Err(MampcError::IndefiniteHessian);
        }
        self.h_cache.copy_from(&p.h);
        self.c_cache.copy_from(&p.c);

        // Ruiz equilibration of [[H, Cᵀ], [C, 0]]
        self.ph.copy_from(&p.h);
        self.ac.copy_from(&p.c);
        self.dsc.iter_mut().for_each(|v| *v = T::one());
        self.esc.iter_mut().for_each(|v| *v = T::one());
        self.csc = T::one();
        let clampf = |v: T| v.max(T::lit(1e-4)).min(T::lit(1e4));
        for _ in 0..self.settings.scaling_iters {
            for j in 0..d {
                let mut nrm = T::zero();
                for i in 0..d {
                    nrm = nrm.max(self.ph[(i, j)].abs());
                }
                for i in 0..k {
                    nrm = nrm.max(self.ac[(i, j)].abs());
                }
                self.wd[j] = if nrm > T::zero() { clampf(T::one() / nrm.sqrt()) } else { T::one() };
            }
            for i in 0..k {
                let mut nrm = T::zero();
                for j in 0..d {
                    nrm = nrm.max(self.ac[(i, j)].abs());
                }
                self.wk[i] = if nrm > T::zero() { clampf(T::one() / nrm.sqrt()) } else { T::one() };
            }
            for j in 0..d {
                for i in 0..d {
                    self.ph[(i, j)] *= self.wd[i] * self.wd[j];
                }
                for i in 0..k {
                    self.ac[(i, j)] *= self.wk[i] * self.wd[j];
                }
                self.dsc[j] *= self.wd[j];
            }
            for i in 0..k {
                self.esc[i] *= self.wk[i];
            }
            // cost scaling from the Hessian alone, so it survives changes in g
            let mut mean = T::zero();
            for j in 0..d {
                let mut nrm = T::zero();
                for i in 0..d {
                    nrm = nrm.max(self.ph[(i, j)].abs());
                }
                mean += nrm;
            }
            mean /= T::lit(d.max(1) as f64);
            if mean > T::zero() {
                let gamma = clampf(T::one() / mean);
                self.ph *= gamma;
                self.csc *= gamma;
            }
        }
        self.cached = true;
        self.factored_rho = T::zero();
        Ok(())
    }

    fn set_rho_vec(&mut self) {
        for i in 0..self.k {
            let (lo, hi) = (self.l[i], self.u[i]);
            self.rho_vec[i] = if lo <= -T::lit(BOUND_INF) && hi >= T::lit(BOUND_INF) {
                T::lit(RHO_MIN)
            } else if hi - lo <= T::tol(1e-12) * T::one().max(hi.abs()) {
                self.rho * T::lit(EQ_RHO_FACTOR)
            } else {
                self.rho
            };
        }
    }

    fn factor_kkt(&mut self) {
        let (d, k) = (self.d, self.k);
        let sigma = self.settings.sigma;
        for j in 0..d {
            for i in j..d {
                let mut v = self.ph[(i, j)];
                for r in 0..k {
                    v += self.rho_vec[r] * self.ac[(r, i)] * self.ac[(r, j)];
                }
                if i == j {
                    v += sigma;
                }
                self.kkt_mat[(i, j)] = v;
            }
        }
        let m = &self.kkt_mat;
        let ok = self.kkt.factor_with(d, |i, j| m[(i, j)]);
        debug_assert!(ok, "ADMM system is positive definite by construction");
        self.factored_rho = self.rho;
    }

    fn admm(&mut self, p: &QProblem<T>, warm_start: Option<&[T]>) -> Result<QpInfo<T>> {
        let (d, k) = (self.d, self.k);
        let s = self.settings;
        let inf = T::lit(BOUND_INF);
        for j in 0..d {
            self.q[j] = self.csc * self.dsc[j] * p.g[j];
        }
        for i in 0..k {
            self.l[i] = (self.esc[i] * p.lb[i]).max(-inf);
            self.u[i] = (self.esc[i] * p.ub[i]).min(inf);
        }
        self.rho = s.rho;
        self.wk.copy_from_slice(&self.rho_vec);
        self.set_rho_vec();
        if self.factored_rho != self.rho || self.wk != self.rho_vec {
            self.factor_kkt();
        }
        match warm_start {
            Some(w) => {
                for j in 0..d {
                    self.x[j] = w[j] / self.dsc[j];
                }
            }
            None => self.x.iter_mut().for_each(|v| *v = T::zero()),
        }
        for i in 0..k {
            let mut v = T::zero();
            for j in 0..d {
                v += self.ac[(i, j)] * self.x[j];
            }
            self.z[i] = v.max(self.l[i]).min(self.u[i]);
            self.y[i] = T::zero();
        }

        let mut eps_abs = s.eps_abs;
        let mut eps_rel = s.eps_rel;
        let mut infeasible_count = 0usize;
        for iter in 1..=s.max_iters {
            // x-update
            for j in 0..d {
                self.wd[j] = s.sigma * self.x[j] - self.q[j];
            }
            for i in 0..k {
                self.wk[i] = self.rho_vec[i] * self.z[i] - self.y[i];
            }
            for j in 0..d {
                let mut v = T::zero();
                for i in 0..k {
                    v += self.ac[(i, j)] * self.wk[i];
                }
                self.wd[j] += v;
            }
            self.xt.copy_from_slice(&self.wd);
            self.kkt.solve_in_place(&mut self.xt);
            for i in 0..k {
                let mut v = T::zero();
                for j in 0..d {
                    v += self.ac[(i, j)] * self.xt[j];
                }
                self.zt[i] = v;
            }
            let a = s.alpha;
            let one_a = T::one() - a;
            for j in 0..d {
                self.x[j] = a * self.xt[j] + one_a * self.x[j];
            }
            for i in 0..k {
                let zr = a * self.zt[i] + one_a * self.z[i];
                let znew = (zr + self.y[i] / self.rho_vec[i]).max(self.l[i]).min(self.u[i]);
                let ynew = self.y[i] + self.rho_vec[i] * (zr - znew);
                self.dy[i] = ynew - self.y[i];
                self.y[i] = ynew;
                self.z[i] = znew;
            }

            // residuals in the original scaling
            let (prim, dual, prim_scale, dual_scale) = self.residuals();
            let eps_prim = eps_abs + eps_rel * prim_scale;
            let eps_dual = eps_abs + eps_rel * dual_scale;

            let converged = prim <= eps_prim && dual <= eps_dual;
            let periodic = s.polish && iter % 100 == 0;
            if converged || periodic {
                self.unscale_iterate();
                if s.polish {
                    self.guess_active_from_pair(p);
                    if let Some(res) = self.polish(p) {
                        return Ok(QpInfo {
                            status: QpStatus::Optimal,
                            kkt_residual: res,
                            iterations: iter,
                        });
                    }
                    self.unscale_iterate();
                }
                if converged {
                    let res = kkt_residual_slices(p, &self.sol_z, &self.sol_y, &mut self.cz, &mut self.wd2);
                    let viol = primal_violation(p, &self.cz);
                    if res <= s.kkt_tol && viol <= s.feas_tol {
                        return Ok(QpInfo {
                            status: QpStatus::Optimal,
                            kkt_residual: res,
                            iterations: iter,
                        });
                    }
                    eps_abs = (eps_abs * T::lit(0.1)).max(T::tol(1e-14));
                    eps_rel = (eps_rel * T::lit(0.1)).max(T::tol(1e-14));
                }
            }

            // infeasibility certificate from the dual increment
            if k > 0 && self.certificate_holds(p) {
                infeasible_count += 1;
                if infeasible_count >= s.infeasible_window {
                    self.unscale_iterate();
                    let res = kkt_residual_slices(p, &self.sol_z, &self.sol_y, &mut self.cz, &mut self.wd2);
                    return Ok(QpInfo {
                        status: QpStatus::PrimalInfeasible,
                        kkt_residual: res,
                        iterations: iter,
                    });
                }
            } else {
                infeasible_count = 0;
            }

            if iter % s.adapt_interval == 0 {
                let ratio = (prim / prim_scale.max(T::tol(1e-30))) / (dual / dual_scale.max(T::tol(1e-30)));
                if ratio.is_finite() && ratio > T::zero() {
                    let new_rho = (self.rho * ratio.sqrt()).max(T::lit(RHO_MIN)).min(T::lit(RHO_MAX));
                    if new_rho > self.rho * T::lit(5.0) || new_rho < self.rho / T::lit(5.0) {
                        self.rho = new_rho;
                        self.set_rho_vec();
                        self.factor_kkt();
                    }
                }
            }
        }
        self.unscale_iterate();
        let res = kkt_residual_slices(p, &self.sol_z, &self.sol_y, &mut self.cz, &mut self.wd2);
        Ok(QpInfo {
            status: QpStatus::MaxIters,
            kkt_residual: res,
            iterations: s.max_iters,
        })
    }

    /// (primal residual, dual residual, primal scale, dual scale), unscaled.
    fn residuals(&mut self) -> (T, T, T, T) {
        let (d, k) = (self.d, self.k);
        let mut prim = T::zero();
        let mut ax_n = T::zero();
        let mut z_n = T::zero();
        for i in 0..k {
            let mut v = T::zero();
            for j in 0..d {
                v += self.ac[(i, j)] * self.x[j];
            }
            let e = self.esc[i];
            prim = prim.max(((v - self.z[i]) / e).abs());
            ax_n = ax_n.max((v / e).abs());
            z_n = z_n.max((self.z[i] / e).abs());
        }
        let mut dual = T::zero();
        let mut px_n = T::zero();
        let mut aty_n = T::zero();
        let mut q_n = T::zero();
        for j in 0..d {
            let mut px = T::zero();
            for i in 0..d {
                px += self.ph[(j, i)] * self.x[i];
            }
            let mut aty = T::zero();
            for i in 0..k {
                aty += self.ac[(i, j)] * self.y[i];
            }
            let s = T::one() / (self.csc * self.dsc[j]);
            dual = dual.max(((px + self.q[j] + aty) * s).abs());
            px_n = px_n.max((px * s).abs());
            aty_n = aty_n.max((aty * s).abs());
            q_n = q_n.max((self.q[j] * s).abs());
        }
        (prim, dual, ax_n.max(z_n), px_n.max(aty_n).max(q_n))
    }

    fn certificate_holds(&mut self, p: &QProblem<T>) -> bool {
        let (d, k) = (self.d, self.k);
        let inf = T::lit(BOUND_INF);
        // project the increment onto the polar of the bounds' recession cone
        let mut norm = T::zero();
        for i in 0..k {
            let mut v = self.dy[i];
            if p.ub[i] >= inf {
                v = v.min(T::zero());
            }
            if p.lb[i] <= -inf {
                v = v.max(T::zero());
            }
            self.wk[i] = v * self.esc[i];
            norm = norm.max(self.wk[i].abs());
        }
        if !(norm > T::tol(1e-30)) {
            return false;
        }
        let eps = self.settings.eps_infeasible;
        let mut lhs = T::zero();
        for i in 0..k {
            let v = self.wk[i] / norm;
            if v > T::zero() {
                lhs += p.ub[i] * v;
            } else if v < T::zero() {
                lhs += p.lb[i] * v;
            }
        }
        if !(lhs < -eps) {
            return false;
        }
        for j in 0..d {
            let mut v = T::zero();
            for i in 0..k {
                v += p.c[(i, j)] * self.wk[i];
            }
            if (v / norm).abs() > eps {
                return false;
            }
        }
        true
    }

    fn unscale_iterate(&mut self) {
        for j in 0..self.d {
            self.sol_z[j] = self.dsc[j] * self.x[j];
        }
        for i in 0..self.k {
            self.sol_y[i] = self.esc[i] * self.y[i] / self.csc;
        }
    }

    fn guess_active_from_primal(&mut self, p: &QProblem<T>) {
        for i in 0..self.k {
            let mut v = T::zero();
            for j in 0..self.d {
                v += p.c[(i, j)] * self.sol_z[j];
            }
            let tol = T::tol(1e-9) * (T::one() + v.abs());
            self.side[i] = if v <= p.lb[i] + tol {
                -1
            } else if v >= p.ub[i] - tol {
                1
            } else {
                0
            };
        }
    }

    fn guess_active_from_pair(&mut self, p: &QProblem<T>) {
        for i in 0..self.k {
            let mut v = T::zero();
            for j in 0..self.d {
                v += p.c[(i, j)] * self.sol_z[j];
            }
            let y = self.sol_y[i];
            self.side[i] = if v - p.lb[i] < -y {
                -1
            } else if p.ub[i] - v < y {
                1
            } else {
                0
            };
        }
    }

    /// Solves the equality-constrained KKT system for the current active-set
    /// guess and repairs the guess until primal and dual signs agree. Leaves
    /// the result in `sol_z`/`sol_y` on success.
    fn polish(&mut self, p: &QProblem<T>) -> Option<T> {
        let (d, k) = (self.d, self.k);
        let delta = self.settings.hessian_reg;
        let feas = self.settings.feas_tol;
        for _ in 0..self.settings.polish_iters {
            self.active.clear();
            for i in 0..k {
                if p.lb[i] == p.ub[i] && self.side[i] == 0 {
                    self.side[i] = 1;
                }
                if self.side[i] != 0 {
                    self.active.push(i);
                }
            }
            let na = self.active.len();
            let (h, c, act) = (&p.h, &p.c, &self.active);
            let ok = self.pol.factor_with(d + na, |i, j| {
                if i < d {
                    h[(i, j)] + if i == j { delta } else { T::zero() }
                } else if j < d {
                    c[(act[i - d], j)]
                } else if i == j {
                    -delta
                } else {
                    T::zero()
                }
            });
            if !ok {
                return None;
            }
            for j in 0..d {
                self.prhs[j] = -p.g[j];
            }
            for (a, &i) in self.active.iter().enumerate() {
                self.prhs[d + a] = if self.side[i] > 0 { p.ub[i] } else { p.lb[i] };
            }
            let n = d + na;
            self.psol[..n].copy_from_slice(&self.prhs[..n]);
            self.pol.solve_in_place(&mut self.psol[..n]);
            // iterative refinement against the unregularized system
            for _ in 0..3 {
                for j in 0..d {
                    let mut v = self.prhs[j];
                    for i in 0..d {
                        v -= p.h[(j, i)] * self.psol[i];
                    }
                    for (a, &r) in self.active.iter().enumerate() {
                        v -= p.c[(r, j)] * self.psol[d + a];
                    }
                    self.pres[j] = v;
                }
                for (a, &r) in self.active.iter().enumerate() {
                    let mut v = self.prhs[d + a];
                    for j in 0..d {
                        v -= p.c[(r, j)] * self.psol[j];
                    }
                    self.pres[d + a] = v;
                }
                self.pol.solve_in_place(&mut self.pres[..n]);
                for i in 0..n {
                    self.psol[i] += self.pres[i];
                }
            }
            if self.psol[..n].iter().any(|v| !v.is_finite()) {
                return None;
            }
            self.sol_z.copy_from_slice(&self.psol[..d]);
            self.sol_y.iter_mut().for_each(|v| *v = T::zero());
            for (a, &i) in self.active.iter().enumerate() {
                self.sol_y[i] = self.psol[d + a];
            }

            // repair: add violated rows, release rows with wrong-sign duals
            let mut changed = false;
            for i in 0..k {
                let mut v = T::zero();
                for j in 0..d {
                    v += p.c[(i, j)] * self.sol_z[j];
                }
                self.cz[i] = v;
                let tol = feas * (T::one() + v.abs());
                let y = self.sol_y[i];
                match self.side[i] {
                    0 if v > p.ub[i] + tol => {
                        self.side[i] = 1;
                        changed = true;
                    }
                    0 if v < p.lb[i] - tol => {
                        self.side[i] = -1;
                        changed = true;
                    }
                    1 if p.lb[i] != p.ub[i] && y < T::zero() => {
                        self.side[i] = 0;
                        changed = true;
                    }
                    -1 if p.lb[i] != p.ub[i] && y > T::zero() => {
                        self.side[i] = 0;
                        changed = true;
                    }
                    _ => {}
                }
            }
            if !changed {
                let res = kkt_residual_slices(p, &self.sol_z, &self.sol_y, &mut self.cz, &mut self.wd2);
                let viol = primal_violation(p, &self.cz);
                return (res <= self.settings.kkt_tol && viol <= feas).then_some(res);
            }
        }
        None
    }
}

fn primal_violation<T: Real>(p: &QProblem<T>, cz: &[T]) -> T {
    let mut v = T::zero();
    for i in 0..cz.len() {
        v = v.max(p.lb[i] - cz[i]).max(cz[i] - p.ub[i]);
    }
    v
}

fn kkt_residual_slices<T: Real>(p: &QProblem<T>, z: &[T], y: &[T], cz: &mut [T], grad: &mut [T]) -> T {
    let (d, k) = p.dims();
    for j in 0..d {
        let mut v = p.g[j];
        for i in 0..d {
            v += p.h[(j, i)] * z[i];
        }
        grad[j] = v;
    }
    for i in 0..k {
        let mut v = T::zero();
        for j in 0..d {
            v += p.c[(i, j)] * z[j];
            grad[j] += p.c[(i, j)] * y[i];
        }
        cz[i] = v;
    }
    let mut res = T::zero();
    for g in grad.iter().take(d) {
        res = res.max(g.abs());
    }
    res = res.max(primal_violation(p, cz));
    for i in 0..k {
        let comp = if y[i] > T::zero() {
            y[i].min((p.ub[i] - cz[i]).abs())
        } else if y[i] < T::zero() {
            (-y[i]).min((cz[i] - p.lb[i]).abs())
        } else {
            T::zero()
        };
        res = res.max(comp);
    }
    res
}

/// max(stationarity, primal violation, complementarity), all in ∞-norm.
pub fn kkt_residual<T: Real>(p: &QProblem<T>, z: &DVector<T>, y: &DVector<T>) -> T {
    let (d, k) = p.dims();
    let mut cz = vec![T::zero(); k];
    let mut grad = vec![T::zero(); d];
    kkt_residual_slices(p, z.as_slice(), y.as_slice(), &mut cz, &mut grad)
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve_qp<T: Real>(p: &QProblem<T>, warm_start: Option<&DVector<T>>) -> Result<QpSolution<T>> {
    QpSolver::default().solve(p, warm_start.map(|w| w.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    /// Enumerates all free/lower/upper patterns of a box QP.
    pub(crate) fn box_oracle(h: &DMatrix<f64>, g: &DVector<f64>, lo: &[f64], hi: &[f64]) -> (DVector<f64>, f64) {
        let d = g.len();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for code in 0..3usize.pow(d as u32) {
            let mut pat = vec![0u8; d];
            let mut c = code;
            for p in pat.iter_mut() {
                *p = (c % 3) as u8;
                c /= 3;
            }
            let mut z = DVector::zeros(d);
            let free: Vec<usize> = (0..d).filter(|&i| pat[i] == 0).collect();
            for i in 0..d {
                match pat[i] {
                    1 => z[i] = lo[i],
                    2 => z[i] = hi[i],
                    _ => {}
                }
            }
            if !free.is_empty() {
                let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
                let rhs = DVector::from_fn(free.len(), |a, _| {
                    let i = free[a];
                    -g[i] - (0..d).filter(|j| pat[*j] != 0).map(|j| h[(i, j)] * z[j]).sum::<f64>()
                });
                let Some(sol) = hf.lu().solve(&rhs) else { continue };
                for (a, &i) in free.iter().enumerate() {
                    z[i] = sol[a];
                }
            }
            if (0..d).any(|i| z[i] < lo[i] - 1e-12 || z[i] > hi[i] + 1e-12) {
                continue;
            }
            let obj = 0.5 * (z.transpose() * h * &z)[(0, 0)] + g.dot(&z);
            if best.as_ref().map_or(true, |b| obj < b.1) {
                best = Some((z, obj));
            }
        }
        best.expect("box QP always has a feasible pattern")
    }

    fn random_box_qp(rng: &mut ChaCha8Rng, d: usize) -> (QProblem<f64>, Vec<f64>, Vec<f64>) {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(d, d) * 0.1;
        let g = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..1.5)).collect();
        (QProblem::boxed(h, g, v(&lo), v(&hi)), lo, hi)
    }

    #[test]
    fn unconstrained_diagonal() {
        let h = DMatrix::from_diagonal(&v(&[2.0, 2.0]));
        let p = QProblem {
            h,
            g: v(&[-2.0, -4.0]),
            c: DMatrix::zeros(0, 2),
            lb: v(&[]),
            ub: v(&[]),
        };
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.z[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn scalar_box_clamps_and_signs_dual() {
        let p = QProblem::boxed(DMatrix::from_element(1, 1, 2.0), v(&[-4.0]), v(&[-1.0]), v(&[1.0]));
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.duals[0], 2.0, epsilon = 1e-7);
        assert!(s.kkt_residual <= 1e-6);
        // lower bound active gives a negative multiplier
        let p = QProblem::boxed(DMatrix::from_element(1, 1, 2.0), v(&[4.0]), v(&[-1.0]), v(&[1.0]));
        let s = solve_qp(&p, None).unwrap();
        assert_relative_eq!(s.z[0], -1.0, epsilon = 1e-9);
        assert!(s.duals[0] < 0.0);
    }

    #[test]
    fn detects_infeasibility() {
        let p = QProblem {
            h: DMatrix::identity(1, 1),
            g: v(&[0.0]),
            c: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            lb: v(&[1.0, -f64::INFINITY]),
            ub: v(&[f64::INFINITY, 0.0]),
        };
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn rejects_bad_hessians() {
        let p = QProblem::boxed(DMatrix::from_diagonal(&v(&[1.0, -1.0])), v(&[0.0, 0.0]), v(&[-1.0, -1.0]), v(&[1.0, 1.0]));
        assert!(matches!(solve_qp(&p, None), Err(MampcError::IndefiniteHessian)));
        let p = QProblem::boxed(DMatrix::zeros(2, 2), v(&[0.0, 0.0]), v(&[-1.0, -1.0]), v(&[1.0, 1.0]));
        assert!(matches!(solve_qp(&p, None), Err(MampcError::ZeroHessian)));
        let mut p = QProblem::boxed(DMatrix::identity(2, 2), v(&[0.0, 0.0]), v(&[-1.0, -1.0]), v(&[1.0, 1.0]));
        p.lb[1] = 2.0;
        assert!(matches!(solve_qp(&p, None), Err(MampcError::InvalidBox(1))));
    }

    #[test]
    fn semidefinite_hessian_accepted() {
        // flat direction pinned by the box
        let h = DMatrix::from_diagonal(&v(&[1.0, 0.0]));
        let p = QProblem::boxed(h, v(&[-1.0, -1.0]), v(&[-2.0, -2.0]), v(&[2.0, 2.0]));
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(s.z[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn equality_and_general_rows() {
        // min ½‖z‖² s.t. z0 + z1 = 1, z0 - z1 <= 0.2
        let p = QProblem {
            h: DMatrix::identity(2, 2),
            g: v(&[0.0, 0.0]),
            c: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]),
            lb: v(&[1.0, -f64::INFINITY]),
            ub: v(&[1.0, -0.2]),
        };
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 0.4, epsilon = 1e-8);
        assert_relative_eq!(s.z[1], 0.6, epsilon = 1e-8);
    }

    #[test]
    fn admm_without_polish_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut solver = QpSolver::new(QpSettings { polish: false, ..QpSettings::default() });
        for _ in 0..10 {
            let (p, lo, hi) = random_box_qp(&mut rng, 4);
            let (zo, _) = box_oracle(&p.h, &p.g, &lo, &hi);
            let s = solver.solve(&p, None).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            assert!((s.z - zo).amax() < 1e-4);
        }
    }

    #[test]
    fn matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut solver = QpSolver::default();
        for _ in 0..100 {
            let (p, lo, hi) = random_box_qp(&mut rng, 5);
            let (zo, fo) = box_oracle(&p.h, &p.g, &lo, &hi);
            let s = solver.solve(&p, None).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            assert!((p.objective(&s.z) - fo).abs() <= 1e-6);
            assert!((s.z - zo).amax() <= 1e-4);
        }
    }

    #[test]
    fn warm_start_does_not_change_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, _, _) = random_box_qp(&mut rng, 6);
        let cold = solve_qp(&p, None).unwrap();
        let warm = solve_qp(&p, Some(&cold.z)).unwrap();
        let junk = solve_qp(&p, Some(&DVector::from_element(6, 7.0))).unwrap();
        assert!((&cold.z - &warm.z).amax() < 1e-8);
        assert!((&cold.z - &junk.z).amax() < 1e-8);
    }

    #[test]
    fn single_precision_box() {
        let p = QProblem::<f32>::boxed(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        );
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn optimal_solutions_satisfy_kkt(seed in 0u64..10_000, d in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, _, _) = random_box_qp(&mut rng, d);
            let s = solve_qp(&p, None).unwrap();
            prop_assert_eq!(s.status, QpStatus::Optimal);
            prop_assert!(s.kkt_residual <= 1e-6);
            prop_assert!(kkt_residual(&p, &s.z, &s.duals) <= 1e-6);
            for i in 0..d {
                prop_assert!(s.z[i] >= p.lb[i] - 1e-8 && s.z[i] <= p.ub[i] + 1e-8);
            }
        }

        #[test]
        fn solve_is_deterministic(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, _, _) = random_box_qp(&mut rng, 4);
            let a = solve_qp(&p, None).unwrap();
            let b = solve_qp(&p, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
