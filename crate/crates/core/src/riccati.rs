//! Backward matrix Riccati equations on the half grid.
//!
//! Two terminal-value problems share the integrator:
//!
//! * the controllability equation of the reduced problem,
//!
//!   ```text
//!   Pdot = A P + P A' - F H3^-1 F' - Bbar Hbar^-1 Bbar'
//!          + S (Hbar^-1 + P)^-1 S',     S = P C' - Bbar Hbar^-1,
//!   P(T) = 0,
//!   ```
//!
//!   whose initial value `Pbar(0)` is positive definite exactly when the
//!   system can be steered to an arbitrary terminal variable; and
//!
//! * the state-feedback equation for the fixed-state-cost problem,
//!
//!   ```text
//!   Pdot = -[P A + A' P + C' P C + Q]
//!          + [P B + C' P D] [D' P D + R]^-1 [B' P + D' P C],
//!   P(T) = 0.
//!   ```
//!
//! Both are integrated backward with classical RK4 at step `dt / 2`, so the
//! stored path covers the half grid: grid nodes and step midpoints are all
//! fourth-order accurate, and later RK4 passes over node-sized steps can
//! read their midpoint stages directly instead of interpolating.
//!
//! The quadratic term is assembled as `X' X` with `X = L^-1 S'` from the
//! Cholesky factor `L` of the bracket, which keeps it symmetric positive
//! semidefinite by construction. Each step symmetrises the state and guards
//! against blow-up.

use nalgebra::DMatrix;

use crate::decomp::Decomposition;
use crate::error::Error;
use crate::linalg::{cholesky, max_abs, sym_eigenvalues, symmetrized, symmetry_residual};
use crate::problem::{ProblemSpec, TimeGrid};
use crate::scalar::{real, real_usize, Real};
use crate::{tol, Result};

/// Symmetric matrix path on the half grid `t_j = T j / (2N)`, `j = 0..=2N`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution<T: Real> {
    grid: TimeGrid<T>,
    half_values: Vec<DMatrix<T>>,
    max_symmetry_residual: T,
}

impl<T: Real> RiccatiSolution<T> {
    /// Grid the half indices refer to.
    pub fn grid(&self) -> TimeGrid<T> {
        self.grid
    }

    /// Value at half index `j` (time `T j / (2N)`).
    pub fn at_half(&self, j: usize) -> &DMatrix<T> {
        &self.half_values[j]
    }

    /// Value at grid node `k` (time `T k / N`).
    pub fn at_node(&self, k: usize) -> &DMatrix<T> {
        &self.half_values[2 * k]
    }

    /// Initial value, the solvability certificate of the steering problem.
    pub fn p0(&self) -> &DMatrix<T> {
        &self.half_values[0]
    }

    /// Largest relative asymmetry `|P - P'| / (1 + |P|)` observed before
    /// per-step symmetrisation.
    pub fn max_symmetry_residual(&self) -> T {
        self.max_symmetry_residual
    }
}

/// Integrates `Pdot = rhs(P)` backward from `P(T) = 0` over `2N` half steps.
///
/// `rhs(left, P)` must evaluate the right-hand side using the coefficients
/// of the half interval whose left endpoint has half index `left`; stages
/// stay inside one interval, so piecewise-constant coefficients with
/// breakpoints on grid nodes never split a step.
fn integrate_backward<T: Real>(
    grid: TimeGrid<T>,
    dim: usize,
    rhs: &mut dyn FnMut(usize, &DMatrix<T>) -> Result<DMatrix<T>>,
) -> Result<RiccatiSolution<T>> {
    let half_steps = 2 * grid.steps();
    let h = -(grid.dt() / real::<T>(2.0));
    let h_half = h / real::<T>(2.0);
    let h_sixth = h / real::<T>(6.0);
    let two = real::<T>(2.0);

    let mut half_values = vec![DMatrix::<T>::zeros(dim, dim); half_steps + 1];
    let mut p = DMatrix::<T>::zeros(dim, dim);
    let mut max_asym = T::zero();

    for j in (1..=half_steps).rev() {
        let left = j - 1;
        let k1 = rhs(left, &p)?;
        let k2 = rhs(left, &(&p + &k1 * h_half))?;
        let k3 = rhs(left, &(&p + &k2 * h_half))?;
        let k4 = rhs(left, &(&p + &k3 * h))?;
        p += (k1 + &k2 * two + &k3 * two + k4) * h_sixth;

        let scale = T::one() + max_abs(&p);
        let asym = symmetry_residual(&p) / scale;
        max_asym = max_asym.max(asym);
        if asym > real::<T>(tol::TOL_RICCATI_SYMMETRY_FATAL) {
            return Err(Error::NonSymmetric {
                t: grid.half_time(left).to_f64().unwrap_or(f64::NAN),
                residual: asym.to_f64().unwrap_or(f64::NAN),
                tolerance: tol::TOL_RICCATI_SYMMETRY_FATAL,
            });
        }
        p = symmetrized(&p);
        if max_abs(&p) > real::<T>(tol::RICCATI_OVERFLOW_GUARD) {
            return Err(Error::RiccatiBlowup {
                t: grid.half_time(left).to_f64().unwrap_or(f64::NAN),
                max_entry: max_abs(&p).to_f64().unwrap_or(f64::NAN),
            });
        }
        half_values[left] = p.clone();
    }

    Ok(RiccatiSolution {
        grid,
        half_values,
        max_symmetry_residual: max_asym,
    })
}

/// Solves the controllability equation for the reduced problem.
///
/// Requires a positive-definite Schur complement `Hbar` on every segment.
pub fn solve_pbar<T: Real>(dec: &Decomposition<T>) -> Result<RiccatiSolution<T>> {
    // Hbar^-1 must exist on every segment; cache Bbar Hbar^-1 Bbar' too.
    let mut bhb = Vec::with_capacity(dec.segments().len());
    for seg in dec.segments() {
        let hbar_inv = seg.hbar_inv()?;
        bhb.push(&seg.bbar * hbar_inv * seg.bbar.transpose());
    }

    let mut rhs = |left: usize, p: &DMatrix<T>| -> Result<DMatrix<T>> {
        let seg_idx = dec.node_segments()[left / 2];
        let seg = &dec.segments()[seg_idx];
        let hbar_inv = seg.hbar_inv().expect("checked for every segment above");

        let ap = &seg.a * p;
        let s = p * seg.c.transpose() - &seg.bbar * hbar_inv;
        let w = hbar_inv + p;
        let chol = cholesky(&w, "controllability equation: Hbar^-1 + P")?;
        let x = chol
            .l()
            .solve_lower_triangular(&s.transpose())
            .ok_or_else(|| Error::SingularSystem {
                context: "controllability equation: triangular solve".into(),
            })?;
        let quad = x.transpose() * &x;

        Ok(symmetrized(
            &(&ap + ap.transpose() - &seg.f_h3inv_ft - &bhb[seg_idx] + quad),
        ))
    };

    integrate_backward(dec.grid, dec.n, &mut rhs)
}

/// Solves the state-feedback equation on the original coefficients, with
/// state cost `Q` (zero when the problem declares none).
pub fn solve_lq<T: Real>(spec: &ProblemSpec<T>) -> Result<RiccatiSolution<T>> {
    let n = spec.n;
    let q_zero = DMatrix::<T>::zeros(n, n);

    let mut rhs = |left: usize, p: &DMatrix<T>| -> Result<DMatrix<T>> {
        let t = spec.grid.half_time(left);
        let a = spec.a.at_time(t);
        let b = spec.b.at_time(t);
        let c = spec.c.at_time(t);
        let d = spec.d.at_time(t);
        let r = spec.r.at_time(t);
        let q = spec.q.as_ref().map_or(&q_zero, |path| path.at_time(t));

        let s = p * b + c.transpose() * p * d;
        let denom = symmetrized(&(d.transpose() * p * d + r));
        let chol = cholesky(&denom, "state-feedback equation: D'PD + R")?;
        let x = chol
            .l()
            .solve_lower_triangular(&s.transpose())
            .ok_or_else(|| Error::SingularSystem {
                context: "state-feedback equation: triangular solve".into(),
            })?;
        let quad = x.transpose() * &x;
        let lin = p * a + a.transpose() * p + c.transpose() * p * c + q;

        Ok(symmetrized(&(quad - lin)))
    };

    integrate_backward(spec.grid, n, &mut rhs)
}

/// Feedback gain `(D' P D + R)^-1 (B' P + D' P C)` at grid node `k`.
///
/// Node `N` carries the final step's coefficients, matching the convention
/// everywhere else on the grid.
pub fn lq_gain_at_node<T: Real>(
    spec: &ProblemSpec<T>,
    ric: &RiccatiSolution<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    let t = spec.grid.node_time(k.min(spec.grid.steps() - 1));
    let b = spec.b.at_time(t);
    let c = spec.c.at_time(t);
    let d = spec.d.at_time(t);
    let r = spec.r.at_time(t);
    let p = ric.at_node(k);

    let denom = symmetrized(&(d.transpose() * p * d + r));
    let s_t = b.transpose() * p + d.transpose() * p * c;
    let chol = cholesky(&denom, "state feedback gain").map_err(|_| Error::GainSingular {
        t: t.to_f64().unwrap_or(f64::NAN),
    })?;
    Ok(chol.solve(&s_t))
}

/// Exact-controllability verdict from `Pbar(0)`.
#[derive(Debug, Clone)]
pub struct ControllabilityReport<T: Real> {
    /// True iff `Pbar(0)` is positive definite with margin.
    pub controllable: bool,
    /// Smallest eigenvalue of `Pbar(0)`.
    pub min_eigenvalue: T,
    /// Comparison scale `trace(Pbar(0)) / n`.
    pub scale: T,
    /// Threshold the smallest eigenvalue must exceed.
    pub threshold: T,
}

impl<T: Real> ControllabilityReport<T> {
    /// Signed distance of the smallest eigenvalue from the threshold.
    pub fn margin(&self) -> T {
        self.min_eigenvalue - self.threshold
    }
}

/// Tests `Pbar(0) > 0` with the relative threshold
/// [`tol::EPS_CONTROLLABLE`]; the scale is `trace / n` so the verdict does
/// not depend on the overall size of the system.
pub fn controllability_test<T: Real>(ric: &RiccatiSolution<T>) -> ControllabilityReport<T> {
    let p0 = ric.p0();
    let n = p0.nrows();
    let ev = sym_eigenvalues(p0);
    let min_eigenvalue = ev[0];
    let scale = p0.trace() / real_usize::<T>(n);
    let threshold = real::<T>(tol::EPS_CONTROLLABLE) * scale;
    ControllabilityReport {
        controllable: min_eigenvalue > threshold && min_eigenvalue > T::zero(),
        min_eigenvalue,
        scale,
        threshold,
    }
}

/// [`controllability_test`] as a gate: `Err(NotControllable)` when it fails.
pub fn ensure_controllable<T: Real>(ric: &RiccatiSolution<T>) -> Result<ControllabilityReport<T>> {
    let report = controllability_test(ric);
    if report.controllable {
        Ok(report)
    } else {
        Err(Error::NotControllable {
            margin: report.margin().to_f64().unwrap_or(f64::NAN),
        })
    }
}
