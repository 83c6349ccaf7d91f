//! Grid-interpolated MPC law: precomputed inputs on a regular lattice,
//! multilinear interpolation between nodes.

use mampc_core::mpc::{MpcController, MpcSpec, MpcStatus};
use mampc_core::plants::Plant;
use mampc_core::{BoxSet, MampcError};

use crate::sim::{Controller, Tag};

pub const MAX_LATTICE_POINTS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LookupPolicy {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: usize,
    /// Node-major deviation inputs, `m` per node.
    values: Vec<f64>,
    m: usize,
    x_eq: Vec<f64>,
    u_eq: Vec<f64>,
    input_box: BoxSet<f64>,
    frac: Vec<f64>,
    base: Vec<usize>,
}

impl LookupPolicy {
    pub fn points_per_dim(&self) -> usize {
        self.points
    }

    pub fn node_count(&self) -> usize {
        self.values.len() / self.m
    }

    fn n(&self) -> usize {
        self.lower.len()
    }

    fn node_state(&self, mut idx: usize, x: &mut [f64]) {
        for d in 0..self.n() {
            let k = idx % self.points;
            idx /= self.points;
            let t = k as f64 / (self.points - 1) as f64;
            x[d] = if self.upper[d] == self.lower[d] {
                self.lower[d]
            } else {
                self.lower[d] + t * (self.upper[d] - self.lower[d])
            };
        }
    }

    /// Interpolated deviation input at absolute state `x`, before clamping.
    fn interpolate(&mut self, x: &[f64], du: &mut [f64]) {
        let n = self.n();
        let p = self.points;
        for d in 0..n {
            let span = self.upper[d] - self.lower[d];
            let s = if span > 0.0 {
                (((x[d] - self.x_eq[d]) - self.lower[d]) / span * (p - 1) as f64).clamp(0.0, (p - 1) as f64)
            } else {
                0.0
            };
            let b = (s.floor() as usize).min(p - 2);
            self.base[d] = b;
            self.frac[d] = s - b as f64;
        }
        du.iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            for d in 0..n {
                let bit = (corner >> d) & 1;
                w *= if bit == 1 { self.frac[d] } else { 1.0 - self.frac[d] };
                idx += (self.base[d] + bit) * stride;
                stride *= p;
            }
            if w == 0.0 {
                continue;
            }
            for j in 0..self.m {
                du[j] += w * self.values[idx * self.m + j];
            }
        }
    }

    /// Absolute input at `x`, clamped to the plant input box.
    pub fn query_into(&mut self, x: &[f64], u: &mut [f64]) {
        self.interpolate(x, u);
        for j in 0..self.m {
            u[j] += self.u_eq[j];
        }
        self.input_box.clamp_in_place(u);
    }
}

/// Solves the MPC at every node of a `points_per_dim`-per-axis lattice over
/// `region` (deviation coordinates).
pub fn build_lookup_baseline(spec: &MpcSpec<f64>, plant: &Plant<f64>, region: &BoxSet<f64>, points_per_dim: usize) -> Result<LookupPolicy, MampcError> {
    let n = spec.n();
    if region.dim() != n {
        return Err(MampcError::DimensionMismatch {
            what: "lookup region",
            expected: n,
            got: region.dim(),
        });
    }
    if points_per_dim < 2 {
        return Err(MampcError::InvalidParameter {
            name: "points_per_dim".into(),
            reason: "must be at least 2".into(),
        });
    }
    if (0..n).any(|i| !region.lower()[i].is_finite() || !region.upper()[i].is_finite()) {
        return Err(MampcError::InvalidParameter {
            name: "region".into(),
            reason: "must be bounded".into(),
        });
    }
    let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(points_per_dim).filter(|&t| t <= MAX_LATTICE_POINTS));
    let Some(total) = total else {
        return Err(MampcError::InvalidParameter {
            name: "points_per_dim".into(),
            reason: format!("lattice exceeds {MAX_LATTICE_POINTS} points"),
        });
    };
    let m = spec.m();
    let mut policy = LookupPolicy {
        lower: region.lower().iter().copied().collect(),
        upper: region.upper().iter().copied().collect(),
        points: points_per_dim,
        values: vec![0.0; total * m],
        m,
        x_eq: plant.x_eq.iter().copied().collect(),
        u_eq: plant.u_eq.iter().copied().collect(),
        input_box: plant.input_box.clone(),
        frac: vec![0.0; n],
        base: vec![0; n],
    };
    let mut mpc = MpcController::new(spec.clone())?;
    let mut x = vec![0.0; n];
    let mut du = vec![0.0; m];
    for idx in 0..total {
        policy.node_state(idx, &mut x);
        mpc.reset();
        let (status, _) = mpc.control_into(&x, &mut du)?;
        if status != MpcStatus::Optimal {
            return Err(MampcError::Precondition(format!("MPC infeasible at lattice node {x:?}")));
        }
        policy.values[idx * m..(idx + 1) * m].copy_from_slice(&du);
    }
    Ok(policy)
}

impl Controller for LookupPolicy {
    fn label(&self) -> &str {
        "lookup"
    }

    fn control_into(&mut self, x: &[f64], u: &mut [f64]) -> Result<Tag, MampcError> {
        self.query_into(x, u);
        Ok(Tag::Lookup)
    }

    fn reset(&mut self) {}
}
