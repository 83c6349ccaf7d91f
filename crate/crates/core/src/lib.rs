//! Hybrid control of nonlinear plants: an LQR terminal law, a learned
//! explicit policy and an implicit MPC, switched by a verified dispatcher.
//!
//! All numerics are generic over [`Real`]; the `f64` aliases below are what
//! the benchmark harness uses.

pub mod error;
pub mod hybrid;
mod linalg;
pub mod lqr;
pub mod mpc;
pub mod plants;
pub mod policy_nn;
pub mod qp;
pub mod scalar;
pub mod sets;

pub use error::{MampcError, Result};
pub use scalar::Real;
pub use sets::{BoxSet, NormBall};

pub type StateVec<T> = nalgebra::DVector<T>;
pub type InputVec<T> = nalgebra::DVector<T>;

pub type Plant = plants::Plant<f64>;
pub type QProblem = qp::QProblem<f64>;
pub type QpSolver = qp::QpSolver<f64>;
pub type MpcSpec = mpc::MpcSpec<f64>;
pub type MpcController = mpc::MpcController<f64>;
pub type LqrSolution = lqr::LqrSolution<f64>;
pub type MlpPolicy = policy_nn::MlpPolicy<f64>;
pub type HybridContext = hybrid::HybridContext<f64>;
pub type MampcConfig = hybrid::MampcConfig<f64>;
