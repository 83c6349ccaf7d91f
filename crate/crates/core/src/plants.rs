//! Continuous-time plant models, a fixed-step RK4 integrator and
//! linearization to a zero-order-hold discrete model.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{check_dim, MampcError, Result};
use crate::linalg::expm;
use crate::sets::BoxSet;
use crate::{InputVec, Real, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlantKind {
    Pendulum,
    TriplePendulum,
    Bicopter,
    Quadcopter,
}

impl PlantKind {
    pub const ALL: [PlantKind; 4] = [
        PlantKind::Pendulum,
        PlantKind::TriplePendulum,
        PlantKind::Bicopter,
        PlantKind::Quadcopter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlantKind::Pendulum => "pendulum",
            PlantKind::TriplePendulum => "triple_pendulum",
            PlantKind::Bicopter => "bicopter",
            PlantKind::Quadcopter => "quadcopter",
        }
    }
}

impl fmt::Display for PlantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlantKind {
    type Err = MampcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pendulum" => Ok(PlantKind::Pendulum),
            "triple_pendulum" => Ok(PlantKind::TriplePendulum),
            "bicopter" => Ok(PlantKind::Bicopter),
            "quadcopter" => Ok(PlantKind::Quadcopter),
            _ => Err(MampcError::UnknownPlant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics<T: Real> {
    /// Inverted rod pivoting at one end; θ = 0 is upright.
    Pendulum { mass: T, length: T, gravity: T },
    /// Point masses at the ends of three links, relative joint angles.
    TriplePendulum {
        masses: [T; 3],
        lengths: [T; 3],
        gravity: T,
    },
    /// Planar two-rotor vehicle, state [x, ẋ, y, ẏ, θ, θ̇].
    Bicopter {
        mass: T,
        arm: T,
        inertia: T,
        gravity: T,
    },
    /// Four rotors, state [x, ẋ, y, ẏ, z, ż, φ, φ̇, θ, θ̇, ψ, ψ̇], inputs are
    /// rotor speeds.
    Quadcopter {
        mass: T,
        arm: T,
        ixx: T,
        iyy: T,
        izz: T,
        rotor_inertia: T,
        thrust_coef: T,
        drag_coef: T,
        gravity: T,
    },
    /// ẋ = A x + B u.
    Linear { a: DMatrix<T>, b: DMatrix<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plant<T: Real> {
    pub name: String,
    pub dynamics: Dynamics<T>,
    pub n: usize,
    pub m: usize,
    pub x_eq: StateVec<T>,
    pub u_eq: InputVec<T>,
    pub state_box: BoxSet<T>,
    pub input_box: BoxSet<T>,
    pub dt: T,
    pub angle_indices: Vec<usize>,
    /// RK4 substeps per sampling interval.
    pub substeps: usize,
}

#[derive(Debug, Clone)]
pub struct Linearization<T: Real> {
    pub a_c: DMatrix<T>,
    pub b_c: DMatrix<T>,
    pub a_d: DMatrix<T>,
    pub b_d: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport<T: Real> {
    pub state_ok: bool,
    pub input_ok: bool,
    pub state_violation: T,
    pub input_violation: T,
}

impl<T: Real> ConstraintReport<T> {
    pub fn ok(&self) -> bool {
        self.state_ok && self.input_ok
    }
}

pub const DEFAULT_SUBSTEPS: usize = 50;

fn angle_box<T: Real>(n: usize, angles: &[usize]) -> BoxSet<T> {
    let mut lo = DVector::from_element(n, -T::infinity());
    let mut hi = DVector::from_element(n, T::infinity());
    for &i in angles {
        lo[i] = -T::pi();
        hi[i] = T::pi();
    }
    BoxSet::new(lo, hi).expect("angle box is well formed")
}

fn uniform_box<T: Real>(m: usize, lo: f64, hi: f64) -> BoxSet<T> {
    BoxSet::new(
        DVector::from_element(m, T::lit(lo)),
        DVector::from_element(m, T::lit(hi)),
    )
    .expect("input box is well formed")
}

impl<T: Real> Plant<T> {
    pub fn builtin(kind: PlantKind) -> Self {
        let l = T::lit;
        let dt = l(0.1);
        match kind {
            PlantKind::Pendulum => Self {
                name: kind.name().into(),
                dynamics: Dynamics::Pendulum {
                    mass: l(0.1),
                    length: l(0.1),
                    gravity: l(9.8),
                },
                n: 2,
                m: 1,
                x_eq: DVector::zeros(2),
                u_eq: DVector::zeros(1),
                state_box: angle_box(2, &[0]),
                input_box: uniform_box(1, -0.05, 0.05),
                dt,
                angle_indices: vec![0],
                substeps: DEFAULT_SUBSTEPS,
            },
            PlantKind::TriplePendulum => Self {
                name: kind.name().into(),
                dynamics: Dynamics::TriplePendulum {
                    masses: [l(0.1); 3],
                    lengths: [l(0.1); 3],
                    gravity: l(9.8),
                },
                n: 6,
                m: 3,
                x_eq: DVector::zeros(6),
                u_eq: DVector::zeros(3),
                state_box: angle_box(6, &[0, 2, 4]),
                input_box: uniform_box(3, -1.0, 1.0),
                dt,
                angle_indices: vec![0, 2, 4],
                substeps: DEFAULT_SUBSTEPS,
            },
            PlantKind::Bicopter => {
                let mut p = Self {
                    name: kind.name().into(),
                    dynamics: Dynamics::Bicopter {
                        mass: l(1.1),
                        arm: l(0.21),
                        inertia: l(0.0196),
                        gravity: l(9.8),
                    },
                    n: 6,
                    m: 2,
                    x_eq: DVector::zeros(6),
                    u_eq: DVector::zeros(2),
                    state_box: angle_box(6, &[4]),
                    input_box: uniform_box(2, 0.1, 9.1572),
                    dt,
                    angle_indices: vec![4],
                    substeps: DEFAULT_SUBSTEPS,
                };
                p.refresh_equilibrium();
                p
            }
            PlantKind::Quadcopter => {
                let mut p = Self {
                    name: kind.name().into(),
                    dynamics: Dynamics::Quadcopter {
                        mass: l(1.1),
                        arm: l(0.21),
                        ixx: l(0.0196),
                        iyy: l(0.0196),
                        izz: l(0.0264),
                        rotor_inertia: l(8.5e-4),
                        thrust_coef: l(9.29e-5),
                        drag_coef: l(1.1e-6),
                        gravity: l(9.8),
                    },
                    n: 12,
                    m: 4,
                    x_eq: DVector::zeros(12),
                    u_eq: DVector::zeros(4),
                    state_box: angle_box(12, &[6, 8, 10]),
                    input_box: uniform_box(4, 0.0, 313.96),
                    dt,
                    angle_indices: vec![6, 8, 10],
                    substeps: DEFAULT_SUBSTEPS,
                };
                p.refresh_equilibrium();
                p
            }
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::builtin(name.parse()?))
    }

    /// Linear time-invariant plant `ẋ = A x + B u` with equilibrium at the
    /// origin and no state constraints.
    pub fn linear(name: &str, a: DMatrix<T>, b: DMatrix<T>, input_box: BoxSet<T>, dt: T) -> Result<Self> {
        let n = a.nrows();
        check_dim("linear plant A columns", n, a.ncols())?;
        check_dim("linear plant B rows", n, b.nrows())?;
        let m = b.ncols();
        check_dim("linear plant input box", m, input_box.dim())?;
        Ok(Self {
            name: name.into(),
            dynamics: Dynamics::Linear { a, b },
            n,
            m,
            x_eq: DVector::zeros(n),
            u_eq: DVector::zeros(m),
            state_box: BoxSet::unbounded(n),
            input_box,
            dt,
            angle_indices: Vec::new(),
            substeps: DEFAULT_SUBSTEPS,
        })
    }

    /// Overrides a named physical parameter. Hover inputs are recomputed.
    pub fn set_param(&mut self, key: &str, value: T) -> Result<()> {
        if !value.is_finite() || value <= T::zero() {
            return Err(MampcError::InvalidParameter {
                name: key.into(),
                reason: format!("must be positive and finite, got {value}"),
            });
        }
        let unknown = || MampcError::InvalidParameter {
            name: key.into(),
            reason: "not a parameter of this plant".into(),
        };
        match (&mut self.dynamics, key) {
            (_, "dt") => self.dt = value,
            (Dynamics::Pendulum { mass, .. }, "mass") => *mass = value,
            (Dynamics::Pendulum { length, .. }, "length") => *length = value,
            (Dynamics::Pendulum { gravity, .. }, "gravity") => *gravity = value,
            (Dynamics::TriplePendulum { masses, .. }, "mass") => *masses = [value; 3],
            (Dynamics::TriplePendulum { lengths, .. }, "length") => *lengths = [value; 3],
            (Dynamics::TriplePendulum { gravity, .. }, "gravity") => *gravity = value,
            (Dynamics::Bicopter { mass, .. }, "mass") => *mass = value,
            (Dynamics::Bicopter { arm, .. }, "arm") => *arm = value,
            (Dynamics::Bicopter { inertia, .. }, "inertia") => *inertia = value,
            (Dynamics::Bicopter { gravity, .. }, "gravity") => *gravity = value,
            (Dynamics::Quadcopter { mass, .. }, "mass") => *mass = value,
            (Dynamics::Quadcopter { arm, .. }, "arm") => *arm = value,
            (Dynamics::Quadcopter { ixx, .. }, "ixx") => *ixx = value,
            (Dynamics::Quadcopter { iyy, .. }, "iyy") => *iyy = value,
            (Dynamics::Quadcopter { izz, .. }, "izz") => *izz = value,
            (Dynamics::Quadcopter { rotor_inertia, .. }, "rotor_inertia") => *rotor_inertia = value,
            (Dynamics::Quadcopter { thrust_coef, .. }, "thrust_coef") => *thrust_coef = value,
            (Dynamics::Quadcopter { drag_coef, .. }, "drag_coef") => *drag_coef = value,
            (Dynamics::Quadcopter { gravity, .. }, "gravity") => *gravity = value,
            _ => return Err(unknown()),
        }
        self.refresh_equilibrium();
        Ok(())
    }

    fn refresh_equilibrium(&mut self) {
        match &self.dynamics {
            Dynamics::Bicopter { mass, gravity, .. } => {
                self.u_eq = DVector::from_element(2, *mass * *gravity * T::lit(0.5));
            }
            Dynamics::Quadcopter {
                mass,
                gravity,
                thrust_coef,
                ..
            } => {
                let w = (*mass * *gravity / (T::lit(4.0) * *thrust_coef)).sqrt();
                self.u_eq = DVector::from_element(4, w);
            }
            _ => {}
        }
    }

    /// Input box expressed relative to the equilibrium input.
    pub fn deviation_input_box(&self) -> BoxSet<T> {
        self.input_box.shifted(&(-&self.u_eq))
    }

    /// Writes ẋ = f(x, u) into `dx`. No validation; the hot path.
    pub fn eval_into(&self, x: &[T], u: &[T], dx: &mut [T]) {
        match &self.dynamics {
            Dynamics::Pendulum {
                mass,
                length,
                gravity,
            } => {
                let (m, l, g) = (*mass, *length, *gravity);
                dx[0] = x[1];
                dx[1] = T::lit(1.5) * g / l * x[0].sin() + T::lit(3.0) / (m * l * l) * u[0];
            }
            Dynamics::TriplePendulum {
                masses,
                lengths,
                gravity,
            } => triple_pendulum_rhs(masses, lengths, *gravity, x, u, dx),
            Dynamics::Bicopter {
                mass,
                inertia,
                gravity,
                ..
            } => {
                let thrust = u[0] + u[1];
                let th = x[4];
                dx[0] = x[1];
                dx[1] = -thrust * th.sin() / *mass;
                dx[2] = x[3];
                dx[3] = thrust * th.cos() / *mass - *gravity;
                dx[4] = x[5];
                dx[5] = (u[0] - u[1]) / *inertia;
            }
            Dynamics::Quadcopter {
                mass,
                arm,
                ixx,
                iyy,
                izz,
                rotor_inertia,
                thrust_coef,
                drag_coef,
                gravity,
            } => {
                let (b, d) = (*thrust_coef, *drag_coef);
                let sq = [u[0] * u[0], u[1] * u[1], u[2] * u[2], u[3] * u[3]];
                let u1 = b * (sq[0] + sq[1] + sq[2] + sq[3]);
                let u2 = b * (sq[1] - sq[3]);
                let u3 = b * (sq[2] - sq[0]);
                let u4 = d * (sq[1] + sq[3] - sq[0] - sq[2]);
                let omega = u[1] + u[3] - u[0] - u[2];
                let (sph, cph) = x[6].sin_cos();
                let (sth, cth) = x[8].sin_cos();
                let (sps, cps) = x[10].sin_cos();
                let (php, thp, psp) = (x[7], x[9], x[11]);
                dx[0] = x[1];
                dx[1] = (cph * sth * cps + sph * sps) * u1 / *mass;
                dx[2] = x[3];
                dx[3] = (cph * sth * sps - sph * cps) * u1 / *mass;
                dx[4] = x[5];
                dx[5] = -*gravity + cph * cth * u1 / *mass;
                dx[6] = php;
                dx[7] = thp * psp * (*iyy - *izz) / *ixx + thp * *rotor_inertia / *ixx * omega
                    + *arm / *ixx * u2;
                dx[8] = thp;
                dx[9] = php * psp * (*izz - *ixx) / *iyy - php * *rotor_inertia / *iyy * omega
                    + *arm / *iyy * u3;
                dx[10] = psp;
                dx[11] = php * thp * (*ixx - *iyy) / *izz + u4 / *izz;
            }
            Dynamics::Linear { a, b } => {
                for (i, d) in dx.iter_mut().enumerate().take(self.n) {
                    let mut v = T::zero();
                    for j in 0..self.n {
                        v += a[(i, j)] * x[j];
                    }
                    for j in 0..self.m {
                        v += b[(i, j)] * u[j];
                    }
                    *d = v;
                }
            }
        }
    }

    fn check_inputs(&self, x: &StateVec<T>, u: &InputVec<T>) -> Result<()> {
        check_dim("state", self.n, x.len())?;
        check_dim("input", self.m, u.len())?;
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("plant state or input"));
        }
        Ok(())
    }

    pub fn eval_dynamics(&self, x: &StateVec<T>, u: &InputVec<T>) -> Result<StateVec<T>> {
        self.check_inputs(x, u)?;
        let mut dx = DVector::zeros(self.n);
        self.eval_into(x.as_slice(), u.as_slice(), dx.as_mut_slice());
        Ok(dx)
    }

    pub fn wrap_angles(&self, x: &mut [T]) {
        for &i in &self.angle_indices {
            x[i] = wrap_angle(x[i]);
        }
    }

    /// Advances one sampling interval with zero-order-hold input.
    pub fn step(&self, x: &StateVec<T>, u: &InputVec<T>) -> Result<StateVec<T>> {
        self.check_inputs(x, u)?;
        let mut out = x.clone();
        let mut scratch = Rk4Scratch::new(self.n);
        self.step_in_place(out.as_mut_slice(), u.as_slice(), &mut scratch);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("integrated state"));
        }
        Ok(out)
    }

    pub fn step_in_place(&self, x: &mut [T], u: &[T], s: &mut Rk4Scratch<T>) {
        let substeps = self.substeps.max(1);
        let h = self.dt / T::lit(substeps as f64);
        let half = h * T::lit(0.5);
        let sixth = h / T::lit(6.0);
        let n = self.n;
        for _ in 0..substeps {
            self.eval_into(x, u, &mut s.k1);
            for i in 0..n {
                s.tmp[i] = x[i] + half * s.k1[i];
            }
            self.eval_into(&s.tmp, u, &mut s.k2);
            for i in 0..n {
                s.tmp[i] = x[i] + half * s.k2[i];
            }
            self.eval_into(&s.tmp, u, &mut s.k3);
            for i in 0..n {
                s.tmp[i] = x[i] + h * s.k3[i];
            }
            self.eval_into(&s.tmp, u, &mut s.k4);
            for i in 0..n {
                x[i] += sixth * (s.k1[i] + T::lit(2.0) * (s.k2[i] + s.k3[i]) + s.k4[i]);
            }
        }
        self.wrap_angles(x);
    }

    /// One forward-Euler step of length `dt`, angles wrapped.
    pub fn euler_step_into(&self, x: &[T], u: &[T], dx: &mut [T], out: &mut [T]) {
        self.eval_into(x, u, dx);
        for i in 0..self.n {
            out[i] = x[i] + self.dt * dx[i];
        }
        self.wrap_angles(out);
    }

    /// Central differences about (x_eq, u_eq), then exact zero-order hold.
    pub fn linearize_discrete(&self) -> Result<Linearization<T>> {
        let (n, m) = (self.n, self.m);
        let base_h = T::tol(1e-6);
        let mut a_c = DMatrix::zeros(n, n);
        let mut b_c = DMatrix::zeros(n, m);
        let mut fp = vec![T::zero(); n];
        let mut fm = vec![T::zero(); n];
        let mut xp = self.x_eq.as_slice().to_vec();
        let mut up = self.u_eq.as_slice().to_vec();
        for j in 0..n {
            let h = base_h * T::one().max(self.x_eq[j].abs());
            xp[j] = self.x_eq[j] + h;
            self.eval_into(&xp, &up, &mut fp);
            xp[j] = self.x_eq[j] - h;
            self.eval_into(&xp, &up, &mut fm);
            xp[j] = self.x_eq[j];
            for i in 0..n {
                a_c[(i, j)] = (fp[i] - fm[i]) / (h + h);
            }
        }
        for j in 0..m {
            let h = base_h * T::one().max(self.u_eq[j].abs());
            up[j] = self.u_eq[j] + h;
            self.eval_into(&xp, &up, &mut fp);
            up[j] = self.u_eq[j] - h;
            self.eval_into(&xp, &up, &mut fm);
            up[j] = self.u_eq[j];
            for i in 0..n {
                b_c[(i, j)] = (fp[i] - fm[i]) / (h + h);
            }
        }
        if a_c.iter().chain(b_c.iter()).any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("linearization"));
        }
        let mut aug = DMatrix::zeros(n + m, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&a_c * self.dt));
        aug.view_mut((0, n), (n, m)).copy_from(&(&b_c * self.dt));
        let e = expm(&aug, T::tol(1e-12));
        Ok(Linearization {
            a_d: e.view((0, 0), (n, n)).into_owned(),
            b_d: e.view((0, n), (n, m)).into_owned(),
            a_c,
            b_c,
        })
    }

    pub fn check_constraints(&self, x: &StateVec<T>, u: &InputVec<T>) -> ConstraintReport<T> {
        let sv = self.state_box.violation(x.as_slice());
        let iv = self.input_box.violation(u.as_slice());
        ConstraintReport {
            state_ok: self.state_box.contains(x.as_slice()),
            input_ok: self.input_box.contains(u.as_slice()),
            state_violation: sv,
            input_violation: iv,
        }
    }

    /// Total mechanical energy for the unforced pendulum models.
    pub fn mechanical_energy(&self, x: &[T]) -> Option<T> {
        match &self.dynamics {
            Dynamics::Pendulum {
                mass,
                length,
                gravity,
            } => {
                let inertia = *mass * *length * *length / T::lit(3.0);
                Some(
                    T::lit(0.5) * inertia * x[1] * x[1]
                        + *mass * *gravity * *length * T::lit(0.5) * x[0].cos(),
                )
            }
            Dynamics::TriplePendulum {
                masses,
                lengths,
                gravity,
            } => {
                let (kin, pot) = triple_pendulum_energy(masses, lengths, *gravity, x);
                Some(kin + pot)
            }
            _ => None,
        }
    }
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4Scratch<T: Real> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Real> Rk4Scratch<T> {
    pub fn new(n: usize) -> Self {
        let z = vec![T::zero(); n];
        Self {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
        }
    }
}

/// Maps an angle to [-π, π).
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::two_pi();
    let mut w = a - two_pi * ((a + T::pi()) / two_pi).floor();
    if w >= T::pi() {
        w -= two_pi;
    }
    if w < -T::pi() {
        w = -T::pi();
    }
    w
}

const JOINT_TO_ABS: [[f64; 3]; 3] = [[-1.0, 0.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, 1.0, 1.0]];

fn tail_mass<T: Real>(masses: &[T; 3], j: usize, k: usize) -> T {
    masses[j.max(k)..].iter().fold(T::zero(), |a, &m| a + m)
}

fn absolute_angles<T: Real>(x: &[T]) -> ([T; 3], [T; 3]) {
    let th = [x[0], x[2], x[4]];
    let thd = [x[1], x[3], x[5]];
    let mut phi = [T::frac_pi_2(); 3];
    let mut phid = [T::zero(); 3];
    for r in 0..3 {
        for c in 0..3 {
            let j = T::lit(JOINT_TO_ABS[r][c]);
            phi[r] += j * th[c];
            phid[r] += j * thd[c];
        }
    }
    (phi, phid)
}

fn triple_pendulum_rhs<T: Real>(masses: &[T; 3], lengths: &[T; 3], g: T, x: &[T], u: &[T], dx: &mut [T]) {
    let (phi, phid) = absolute_angles(x);
    let mass_abs = Matrix3::from_fn(|j, k| {
        tail_mass(masses, j, k) * lengths[j] * lengths[k] * (phi[j] - phi[k]).cos()
    });
    let mut bias = Vector3::zeros();
    for j in 0..3 {
        let mut c = T::zero();
        for k in 0..3 {
            c += tail_mass(masses, j, k) * lengths[j] * lengths[k] * (phi[j] - phi[k]).sin() * phid[k] * phid[k];
        }
        bias[j] = c + tail_mass(masses, j, j) * g * lengths[j] * phi[j].cos();
    }
    let jac = Matrix3::from_fn(|r, c| T::lit(JOINT_TO_ABS[r][c]));
    let mass_joint = jac.transpose() * mass_abs * jac;
    let rhs = Vector3::new(u[0], u[1], u[2]) - jac.transpose() * bias;
    let acc = mass_joint
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| Vector3::from_element(T::lit(f64::NAN)));
    dx[0] = x[1];
    dx[1] = acc[0];
    dx[2] = x[3];
    dx[3] = acc[1];
    dx[4] = x[5];
    dx[5] = acc[2];
}

fn triple_pendulum_energy<T: Real>(masses: &[T; 3], lengths: &[T; 3], g: T, x: &[T]) -> (T, T) {
    let (phi, phid) = absolute_angles(x);
    let mut kin = T::zero();
    for j in 0..3 {
        for k in 0..3 {
            kin += tail_mass(masses, j, k) * lengths[j] * lengths[k] * (phi[j] - phi[k]).cos() * phid[j] * phid[k];
        }
    }
    let mut pot = T::zero();
    for j in 0..3 {
        pot += tail_mass(masses, j, j) * g * lengths[j] * phi[j].sin();
    }
    (kin * T::lit(0.5), pot)
}
