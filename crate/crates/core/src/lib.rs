//! Minimum-energy steering of linear stochastic systems with multiplicative noise.
//!
//! The toolkit solves the following control problem: steer the Ito system
//!
//! ```text
//! dx(t) = [A(t) x(t) + B(t) u(t)] dt + [C(t) x(t) + D(t) u(t)] dW(t),   x(0) = x0,
//! ```
//!
//! with scalar Brownian motion `W`, to a prescribed terminal random variable
//! `x(T) = xi` almost surely, while minimising the expected control energy
//! `E \int_0^T u(t)' R(t) u(t) dt`. Targets are affine in the driving noise,
//! `xi = a + b W(T)`.
//!
//! The solver pipeline:
//!
//! 1. [`decomp`] factors the control through an invertible `M` with
//!    `D M = [I 0]`, splitting `u = M [z; v]` into a diffusion-matching part
//!    `z` and a free drift part `v`, and forms the reduced coefficient
//!    matrices and cost blocks.
//! 2. [`riccati`] integrates the backward matrix Riccati equation whose
//!    initial value decides exact controllability, plus the classical
//!    state-feedback Riccati equation used by the linear-quadratic variant.
//! 3. [`bsde`] solves the associated backward equation for affine targets in
//!    closed ansatz form and fixes the initial costate `K`.
//! 4. [`hamiltonian`] assembles the closed-loop forward system and produces
//!    the optimal control processes on simulated paths.
//! 5. [`simulate`] provides the Brownian path batches, Euler state
//!    integration, energy quadrature, and the Monte-Carlo Gramian rank test.
//! 6. [`oracle`] independently solves a binary-tree discretisation of the
//!    same problem as an equality-constrained QP and cross-checks values,
//!    controls, and the optimality identities.
//! 7. [`lqfixed`] layers a state-weighted quadratic cost on top by reducing
//!    it to a pure minimum-energy problem in transformed coordinates.
//!
//! All numerical code is generic over the scalar type through [`Real`];
//! concrete `f64` aliases for the main types live at the crate root.

#![allow(clippy::too_many_arguments)]
// `!(x > 0)` in validation guards rejects NaN along with the sign; the
// suggested `x <= 0` would silently accept NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Time-stepping loops index several parallel per-step arrays by the step
// counter; iterator chains obscure the node/step alignment.
#![allow(clippy::needless_range_loop)]
// One-off coefficient-snapshot tuples and integrator callbacks; naming
// them would add indirection without reuse.
#![allow(clippy::type_complexity)]

pub mod bsde;
pub mod decomp;
pub mod error;
pub mod hamiltonian;
pub mod instances;
mod linalg;
pub mod lqfixed;
pub mod oracle;
pub mod pipeline;
pub mod problem;
pub mod riccati;
pub mod scalar;
pub mod simulate;
pub mod tol;

pub use error::Error;
pub use scalar::Real;

/// Convenience result alias used across the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

pub use linalg::pairwise_sum;

/// `f64` aliases for the main pipeline types.
pub type ProblemSpec64 = problem::ProblemSpec<f64>;
pub type Decomposition64 = decomp::Decomposition<f64>;
pub type RiccatiSolution64 = riccati::RiccatiSolution<f64>;
pub type BsdeSolution64 = bsde::BsdeSolution<f64>;
pub type BrownianBatch64 = simulate::BrownianBatch<f64>;
pub type Solution64 = pipeline::Solution<f64>;
pub type HamiltonianRun64 = hamiltonian::HamiltonianRun<f64>;
pub type TreeProblem64 = oracle::TreeProblem<f64>;
pub type TreeSolution64 = oracle::TreeSolution<f64>;
pub type LqFixedProblem64 = lqfixed::LqFixedProblem<f64>;
pub type LqFixedSolution64 = lqfixed::LqFixedSolution<f64>;
