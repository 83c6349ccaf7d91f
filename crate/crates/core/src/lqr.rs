//! Discrete algebraic Riccati equation, LQR gain and sampled validation of
//! a ball-shaped region of attraction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, MampcError, Result};
use crate::plants::{Plant, Rk4Scratch};
use crate::sets::{norm, BoxSet, NormBall};
use crate::{InputVec, Real, StateVec};

#[derive(Debug, Clone, Copy)]
pub struct DareOptions<T: Real> {
    /// Stop once successive iterates differ by at most `tol`, or once the
    /// difference has stagnated at the roundoff floor.
    pub tol: T,
    pub max_iters: usize,
    pub residual_tol: T,
}

impl<T: Real> Default for DareOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::tol(1e-12),
            max_iters: 100_000,
            residual_tol: T::eps().sqrt().max(T::lit(1e-8)).min(T::tol(1e-3)),
        }
    }
}

fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |a, v| a.max(v.abs()))
}

fn check_shapes<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, q: &DMatrix<T>, r: &DMatrix<T>) -> Result<()> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("Q rows", n, q.nrows())?;
    check_dim("Q columns", n, q.ncols())?;
    check_dim("R rows", b.ncols(), r.nrows())?;
    check_dim("R columns", b.ncols(), r.ncols())?;
    if a.iter().chain(b.iter()).chain(q.iter()).chain(r.iter()).any(|v| !v.is_finite()) {
        return Err(MampcError::NonFinite("Riccati data"));
    }
    Ok(())
}

fn min_sym_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    let sym = (m + m.transpose()) * T::lit(0.5);
    sym.symmetric_eigenvalues().iter().fold(T::infinity(), |a, &v| a.min(v))
}

/// ‖AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q‖ (largest entry).
pub fn dare_residual<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, q: &DMatrix<T>, r: &DMatrix<T>, p: &DMatrix<T>) -> T {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let Some(chol) = s.cholesky() else {
        return T::infinity();
    };
    let at_p = a.transpose() * p;
    let res = &at_p * a - p - &at_p * b * chol.solve(&(&bt_p * a)) + q;
    max_abs(&res)
}

/// Solves the DARE by Riccati fixed-point iteration from `P = Q`.
pub fn solve_dare<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    opts: &DareOptions<T>,
) -> Result<DMatrix<T>> {
    check_shapes(a, b, q, r)?;
    let scale = T::one().max(max_abs(q));
    if min_sym_eigenvalue(q) < -T::tol(1e-12) * scale {
        return Err(MampcError::Dare("state weight is not positive semidefinite".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(MampcError::Dare("input weight is not positive definite".into()));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut best = T::infinity();
    let mut stalled = 0usize;
    for _ in 0..opts.max_iters {
        let bt_p = &bt * &p;
        let s = r + &bt_p * b;
        let gain = s
            .cholesky()
            .ok_or_else(|| MampcError::Dare("R + BᵀPB lost definiteness".into()))?
            .solve(&(&bt_p * a));
        let at_p = &at * &p;
        let mut next = &at_p * a - &at_p * b * gain + q;
        next = (&next + next.transpose()) * T::lit(0.5);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(MampcError::Dare("iteration diverged; (A, B) is likely not stabilizable".into()));
        }
        let delta = max_abs(&(&next - &p));
        p = next;
        // below the roundoff floor the increments stop shrinking
        if delta < best * T::lit(0.999) {
            best = delta;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if delta <= opts.tol || stalled >= 100 {
            let res = dare_residual(a, b, q, r, &p);
            if res > opts.residual_tol {
                return Err(MampcError::Dare(format!("converged with residual {res}")));
            }
            return Ok(p);
        }
    }
    Err(MampcError::Dare(format!("no convergence in {} iterations", opts.max_iters)))
}

/// K = (R + BᵀPB)⁻¹BᵀPA.
pub fn lqr_gain<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, r: &DMatrix<T>, p: &DMatrix<T>) -> Result<DMatrix<T>> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    s.cholesky()
        .map(|c| c.solve(&(&bt_p * a)))
        .ok_or_else(|| MampcError::Dare("R + BᵀPB is not positive definite".into()))
}

/// Largest eigenvalue modulus.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    crate::linalg::spectral_radius(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution<T: Real> {
    pub p: DMatrix<T>,
    pub k: DMatrix<T>,
    pub roa: NormBall<T>,
    pub spectral_radius_est: T,
}

impl<T: Real> LqrSolution<T> {
    /// `u_eq − Kx` clamped to `input_box`, written into `u`.
    pub fn control_into(&self, x: &[T], u_eq: &[T], input_box: &BoxSet<T>, u: &mut [T]) {
        let k = &self.k;
        for (i, ui) in u.iter_mut().enumerate() {
            let mut v = u_eq[i];
            for (j, xj) in x.iter().enumerate() {
                v -= k[(i, j)] * *xj;
            }
            *ui = v;
        }
        input_box.clamp_in_place(u);
    }

    pub fn control(&self, plant: &Plant<T>, x: &StateVec<T>) -> InputVec<T> {
        let mut u = DVector::zeros(plant.m);
        self.control_into(x.as_slice(), plant.u_eq.as_slice(), &plant.input_box, u.as_mut_slice());
        u
    }
}

pub fn design_lqr<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    roa_radius: T,
) -> Result<LqrSolution<T>> {
    let roa = NormBall::new(roa_radius)?;
    let p = solve_dare(a, b, q, r, &DareOptions::default())?;
    let k = lqr_gain(a, b, r, &p)?;
    let rho = spectral_radius(&(a - b * &k));
    if !(rho < T::one()) {
        return Err(MampcError::Unstable(rho.as_f64()));
    }
    Ok(LqrSolution {
        p,
        k,
        roa,
        spectral_radius_est: rho,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoaReport<T: Real> {
    pub radius: T,
    pub n_samples: usize,
    pub n_boundary: usize,
    pub horizon: usize,
    pub seed: u64,
    pub passed: bool,
    /// Largest trajectory norm over all samples and steps.
    pub worst_excursion: T,
    /// Largest norm at the end of the horizon.
    pub worst_terminal_norm: T,
    pub escape_witnesses: Vec<StateVec<T>>,
}

/// Terminal norm must fall below this fraction of the radius.
pub const DECAY_FRACTION: f64 = 0.1;
const MAX_WITNESSES: usize = 10;

/// Simulates the true plant under the clamped LQR law from interior samples
/// and an equally large set of boundary points. Passes when no trajectory
/// leaves the ball and every one ends within `DECAY_FRACTION · radius`.
pub fn validate_roa_ball<T: Real>(
    plant: &Plant<T>,
    k: &DMatrix<T>,
    radius: T,
    n_samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<RoaReport<T>> {
    if !(radius > T::zero()) || !radius.is_finite() {
        return Err(MampcError::Precondition(format!("RoA radius must be positive, got {radius}")));
    }
    if n_samples == 0 || horizon == 0 {
        return Err(MampcError::Precondition("need at least one sample and one step".into()));
    }
    check_dim("LQR gain rows", plant.m, k.nrows())?;
    check_dim("LQR gain columns", plant.n, k.ncols())?;
    let n = plant.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<Vec<T>> = Vec::with_capacity(2 * n_samples);
    for _ in 0..n_samples {
        let dir: Vec<T> = random_direction(&mut rng, n);
        let rad = radius * T::lit(rng.random::<f64>().powf(1.0 / n as f64));
        starts.push(dir.into_iter().map(|d| d * rad).collect());
    }
    for i in 0..n_samples {
        let dir = if n == 2 {
            let a = T::two_pi() * T::lit(i as f64 / n_samples as f64);
            vec![a.cos(), a.sin()]
        } else {
            random_direction(&mut rng, n)
        };
        starts.push(dir.into_iter().map(|d| d * radius).collect());
    }
    let sol = LqrSolution {
        p: DMatrix::zeros(0, 0),
        k: k.clone(),
        roa: NormBall::new(radius)?,
        spectral_radius_est: T::zero(),
    };
    let outcomes: Vec<(T, T, bool)> = starts
        .par_iter()
        .map(|x0| {
            let mut x = x0.clone();
            let mut u = vec![T::zero(); plant.m];
            let mut scratch = Rk4Scratch::new(n);
            let n0 = norm(x0);
            let mut worst = n0;
            for _ in 0..horizon {
                sol.control_into(&x, plant.u_eq.as_slice(), &plant.input_box, &mut u);
                plant.step_in_place(&mut x, &u, &mut scratch);
                let nx = norm(&x);
                if !nx.is_finite() {
                    return (T::infinity(), T::infinity(), false);
                }
                worst = worst.max(nx);
            }
            let end = norm(&x);
            let ok = worst <= radius * (T::one() + T::tol(1e-12)) && end <= radius * T::lit(DECAY_FRACTION);
            (worst, end, ok)
        })
        .collect();
    let mut worst_excursion = T::zero();
    let mut worst_terminal_norm = T::zero();
    let mut witnesses = Vec::new();
    for (x0, (w, r, ok)) in starts.iter().zip(&outcomes) {
        worst_excursion = worst_excursion.max(*w);
        worst_terminal_norm = worst_terminal_norm.max(*r);
        if !ok && witnesses.len() < MAX_WITNESSES {
            witnesses.push(DVector::from_column_slice(x0));
        }
    }
    Ok(RoaReport {
        radius,
        n_samples,
        n_boundary: n_samples,
        horizon,
        seed,
        passed: outcomes.iter().all(|o| o.2),
        worst_excursion,
        worst_terminal_norm,
        escape_witnesses: witnesses,
    })
}

/// Bisects for the largest radius in `(0, r_max]` that passes validation.
/// `None` if even the smallest probed radius fails.
pub fn largest_validated_radius<T: Real>(
    plant: &Plant<T>,
    k: &DMatrix<T>,
    r_max: T,
    n_samples: usize,
    horizon: usize,
    seed: u64,
    bisections: usize,
) -> Result<Option<T>> {
    if validate_roa_ball(plant, k, r_max, n_samples, horizon, seed)?.passed {
        return Ok(Some(r_max));
    }
    let mut lo = T::zero();
    let mut hi = r_max;
    for _ in 0..bisections {
        let mid = (lo + hi) * T::lit(0.5);
        if validate_roa_ball(plant, k, mid, n_samples, horizon, seed)?.passed {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo > T::zero()).then_some(lo))
}

fn random_direction<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv > 1e-12 {
            return v.into_iter().map(|a| T::lit(a / nv)).collect();
        }
    }
}
