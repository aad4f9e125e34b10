//! Solver library for the Dirichlet problem of Monge-Ampere type equations
//! `M^n_p(u) = f(x, u, grad u)` for p-plurisubharmonic functions on
//! chart-discretized Riemannian domains.
//!
//! The operator is the product of all p-tuple sums of the eigenvalues of the
//! augmented Hessian `U = hess(u) + A(x, u, grad u)` with respect to the
//! metric. Its normalized root `F = (M^n_p)^(1/C(n,p))` is positive, concave
//! and degree-one homogeneous on the admissibility cone, which makes the
//! equation elliptic for admissible functions and amenable to a damped-Newton
//! continuity method anchored at a subsolution.

// tensor-index loops read better with explicit indices
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod expr;
pub mod geometry;
pub mod linsolve;
pub mod monitors;
pub mod oracles;
pub mod problem;
pub mod solver;
pub mod spectral;

pub use spectral::{ConeParams, OperatorEval, Spectrum};
