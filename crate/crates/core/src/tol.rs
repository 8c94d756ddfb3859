//! Central numerical tolerances.
//!
//! Every threshold the pipeline applies lives here with its rationale, so
//! tests and solvers agree on one set of constants. Values are `f64` and are
//! converted into the working scalar type at the point of use.

/// Relative positivity threshold for cost-weight eigenvalues.
///
/// `R` (and derived blocks) count as positive definite when every eigenvalue
/// exceeds `EPS_POS` times the largest one. f64 carries ~1e-16 relative
/// error; 1e-10 leaves headroom for the eigenvalue solve itself.
pub const EPS_POS: f64 = 1e-10;

/// Relative rank threshold for singular values of `D`.
///
/// `D` has full row rank when `sigma_min > EPS_RANK * sigma_max`.
pub const EPS_RANK: f64 = 1e-10;

/// Relative controllability threshold on the Riccati initial value.
///
/// The system counts as exactly controllable when
/// `lambda_min(Pbar(0)) > EPS_CONTROLLABLE * trace(Pbar(0)) / n`. The scale
/// `trace/n` is the mean eigenvalue, so the test is invariant under uniform
/// rescaling of the problem.
pub const EPS_CONTROLLABLE: f64 = 1e-8;

/// Relative rank threshold for the Monte-Carlo Gramian.
///
/// Sampled Gramians carry statistical noise, so the cut is looser than the
/// deterministic rank tolerance: an eigenvalue counts toward the rank when
/// it exceeds `EPS_GRAMIAN * lambda_max`.
pub const EPS_GRAMIAN: f64 = 1e-6;

/// Absolute residual allowed in the factorisation identity `D M = [I 0]`.
pub const TOL_FACTOR_RESIDUAL: f64 = 1e-12;

/// Absolute residual allowed in `M Minv = I` for the stored inverse.
pub const TOL_M_INVERSE: f64 = 1e-10;

/// Per-path agreement between the control energy evaluated through
/// `u' R u` and through the reduced blocks `z' H1 z + 2 v' H2' z + v' H3 v`.
/// The two are algebraically identical; 1e-10 absorbs rounding on desk-scale
/// magnitudes.
pub const TOL_COST_IDENTITY: f64 = 1e-10;

/// Relative residual allowed for the tree QP's KKT system.
pub const TOL_KKT: f64 = 1e-8;

/// Symmetry residual kept by the Riccati integrators via per-step
/// symmetrisation.
pub const TOL_RICCATI_SYMMETRY: f64 = 1e-9;

/// Symmetry residual at which the Riccati sweep aborts with an error
/// instead of silently symmetrising.
pub const TOL_RICCATI_SYMMETRY_FATAL: f64 = 1e-6;

/// Overflow guard for Riccati entries; beyond this the sweep reports blowup.
pub const RICCATI_OVERFLOW_GUARD: f64 = 1e12;

/// Admissibility gate for Monte-Carlo identity checks: a control pair
/// counts as steering to the target when the mean squared terminal error
/// stays below `ADMISSIBLE_MSE_DT_FACTOR * dt * (1 + mean |xi|^2)`.
/// Euler endpoints miss by O(dt) in mean square; the factor gives headroom
/// over the instance-dependent constant while still rejecting controls that
/// steer to the wrong variable (those miss by O(1)).
pub const ADMISSIBLE_MSE_DT_FACTOR: f64 = 10.0;

/// Per-node residual allowed in `Phi Phi^-1 = I` for the propagator used by
/// the identity checks.
pub const TOL_PROPAGATOR_INVERSE: f64 = 1e-8;

/// Euler weak-error allowance in statistical pass criteria, scaled by
/// `dt * (1 + reference scale)`. Three standard errors absorb sampling
/// noise but not discretisation bias, which is all that remains when a
/// statistic is deterministic.
pub const MARTINGALE_BIAS_FACTOR: f64 = 1.0;

/// Exact identities evaluated on the tree (discrete lemma statistics,
/// orthogonality of the optimum) must vanish to this absolute size.
pub const TOL_TREE_IDENTITY: f64 = 1e-10;

/// Feasibility slack for tree constraints, relative to the target scale.
pub const TOL_TREE_FEASIBLE: f64 = 1e-8;

/// Hard cap on tree depth; the work and memory of the tree solver grow like
/// `2^depth`, and beyond 14 levels double precision leaves too little
/// headroom between step noise `sqrt(dt)` and the rank tolerances.
pub const MAX_TREE_DEPTH: u32 = 14;
