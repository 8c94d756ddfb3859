//! Fixed terminal state with a running state cost, reduced to pure
//! minimum energy by completion of squares.
//!
//! With `P` solving the state-feedback Riccati equation (the second
//! equation in [`crate::riccati`]) and the gain
//! `L(t) = [D'PD + R]^-1 [B'P + D'PC]`, the shifted control
//! `uhat = u + L x` rewrites
//!
//! ```text
//! E int_0^T [x' Q x + u' R u] dt
//!   = x0' P(0) x0 + E int_0^T uhat' Rhat uhat dt,
//!   Rhat = D' P D + R,
//! ```
//!
//! where the state now follows `dx = [Ahat x + B uhat] dt +
//! [Chat x + D uhat] dW` with `Ahat = A - B L`, `Chat = C - D L`, and the
//! terminal target unchanged. The quadratic-cost problem is therefore a
//! plain steering problem in hatted coordinates: the whole pipeline
//! applies with `Rhat` as the control weight, and the original control is
//! recovered afterwards as `u = uhat - L x` along simulated paths.
//!
//! Exact controllability of the transformed system is certified from
//! scratch by the inner pipeline rather than assumed to be inherited.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::linalg::{cholesky, max_abs, sym_eigenvalues, symmetrized, symmetry_residual};
use crate::linalg::mean_and_se;
use crate::pipeline::{solve, Solution};
use crate::problem::{MatrixPath, ProblemSpec};
use crate::riccati::{lq_gain_at_node, solve_lq, RiccatiSolution};
use crate::scalar::{real, Real};
use crate::simulate::{
    estimate_energy, euler_state, euler_state_original, mean_squared_terminal_error, quad_form,
    BrownianBatch, EnergyEstimate, PathGrid,
};
use crate::tol;
use crate::Result;

/// A steering problem plus a running state weight `Q(t)`.
#[derive(Debug, Clone)]
pub struct LqFixedProblem<T: Real> {
    pub base: ProblemSpec<T>,
    /// Symmetric positive semidefinite `n x n` path.
    pub q: MatrixPath<T>,
}

impl<T: Real> LqFixedProblem<T> {
    /// Validates the base problem and the shape, symmetry, and approximate
    /// positive semidefiniteness of every `Q` segment.
    pub fn ensure_valid(&self) -> Result<()> {
        self.base.ensure_valid()?;
        let n = self.base.n;
        for (i, q) in self.q.values().iter().enumerate() {
            if q.shape() != (n, n) {
                return Err(Error::DimensionMismatch {
                    field: format!("Q segment {i}"),
                    expected: format!("{n} x {n}"),
                    got: format!("{} x {}", q.nrows(), q.ncols()),
                });
            }
            let scale = T::one() + max_abs(q);
            let residual = symmetry_residual(q);
            let tolerance = real::<T>(tol::TOL_RICCATI_SYMMETRY) * scale;
            if residual > tolerance {
                return Err(Error::NonSymmetric {
                    t: self.q.breaks()[i].to_f64().unwrap_or(f64::NAN),
                    residual: residual.to_f64().unwrap_or(f64::NAN),
                    tolerance: tolerance.to_f64().unwrap_or(f64::NAN),
                });
            }
            let ev = sym_eigenvalues(&symmetrized(q));
            if ev[0] < -real::<T>(tol::EPS_POS) * scale {
                return Err(Error::Invalid(format!(
                    "Q segment {i} has negative eigenvalue {:?}",
                    ev[0].to_f64()
                )));
            }
        }
        Ok(())
    }

    /// Base spec with `Q` installed, as consumed by the Riccati solver and
    /// by the tree oracle when cross-checking state-penalised costs.
    pub fn spec_with_q(&self) -> ProblemSpec<T> {
        let mut spec = self.base.clone();
        spec.q = Some(self.q.clone());
        spec
    }
}

/// Outcome of the completion-of-squares rewrite.
#[derive(Debug, Clone)]
pub struct LqTransform<T: Real> {
    /// `P(t)` on the half grid.
    pub riccati: RiccatiSolution<T>,
    /// Feedback gain per grid node (node `N` carries the final step's).
    pub gain: Vec<DMatrix<T>>,
    /// The hatted steering problem; `B` and `D` are untouched.
    pub transformed: ProblemSpec<T>,
}

/// Builds the hatted problem `Ahat = A - B L`, `Chat = C - D L`,
/// `Rhat = D'PD + R` on per-node segments; the target is unchanged.
pub fn lq_transform<T: Real>(prob: &LqFixedProblem<T>) -> Result<LqTransform<T>> {
    prob.ensure_valid()?;
    let spec_q = prob.spec_with_q();
    let riccati = solve_lq(&spec_q)?;

    let steps = spec_q.grid.steps();
    let mut gain = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        gain.push(lq_gain_at_node(&spec_q, &riccati, k)?);
    }

    let mut breaks = Vec::with_capacity(steps);
    let mut a_hat = Vec::with_capacity(steps);
    let mut c_hat = Vec::with_capacity(steps);
    let mut r_hat = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = spec_q.grid.node_time(k);
        let b = spec_q.b.at_time(t);
        let d = spec_q.d.at_time(t);
        let p = riccati.at_node(k);
        breaks.push(t);
        a_hat.push(spec_q.a.at_time(t) - b * &gain[k]);
        c_hat.push(spec_q.c.at_time(t) - d * &gain[k]);
        let rh = symmetrized(&(d.transpose() * p * d + spec_q.r.at_time(t)));
        // PSD Q keeps P PSD, so Rhat inherits R's positivity; certify it.
        cholesky(&rh, "transformed control weight")?;
        r_hat.push(rh);
    }

    let mut transformed = prob.base.clone();
    transformed.a = MatrixPath::from_segments(breaks.clone(), a_hat)?;
    transformed.c = MatrixPath::from_segments(breaks.clone(), c_hat)?;
    transformed.r = MatrixPath::from_segments(breaks, r_hat)?;
    transformed.q = None;

    Ok(LqTransform {
        riccati,
        gain,
        transformed,
    })
}

/// Transformed problem solved through the full steering pipeline.
#[derive(Debug)]
pub struct LqFixedSolution<T: Real> {
    pub riccati: RiccatiSolution<T>,
    pub gain: Vec<DMatrix<T>>,
    pub transformed: ProblemSpec<T>,
    /// Minimum-energy solution of the hatted problem.
    pub inner: Solution<T>,
    /// Deterministic part `x0' P(0) x0` of the total cost.
    pub p0_cost: T,
}

/// Runs the rewrite end to end; controllability of the hatted system is
/// re-certified inside the inner solve.
pub fn solve_lq_fixed<T: Real>(prob: &LqFixedProblem<T>) -> Result<LqFixedSolution<T>> {
    let tr = lq_transform(prob)?;
    let inner = solve(&tr.transformed)?;
    let p0_cost = (tr.riccati.p0() * &prob.base.x0).dot(&prob.base.x0);
    Ok(LqFixedSolution {
        riccati: tr.riccati,
        gain: tr.gain,
        transformed: tr.transformed,
        inner,
        p0_cost,
    })
}

/// Monte-Carlo diagnostics for one batch: the two cost routes, their
/// per-path identity, and the control-recovery trajectory check.
#[derive(Debug, Clone)]
pub struct LqFixedRun<T: Real> {
    /// Inner energy `E int uhat' Rhat uhat dt`.
    pub inner_energy: EnergyEstimate<T>,
    /// `x0' P(0) x0` plus the inner energy mean.
    pub total_mean: T,
    pub total_se: T,
    /// `E int (x' Q x + u' R u) dt` accumulated directly along original
    /// paths under the recovered control.
    pub direct_mean: T,
    pub direct_se: T,
    /// `|direct - total|` and the acceptance threshold
    /// `3 SE(diff) + O(dt)` for the Euler discretisation bias.
    pub identity_gap: T,
    pub identity_threshold: T,
    pub identity_pass: bool,
    /// Worst node-wise gap between the hatted-path state and the original
    /// dynamics re-integrated under the recovered `u` on the same noise.
    pub trajectory_gap: T,
    /// Terminal miss of the original-path states against the target.
    pub terminal_mse: T,
}

impl<T: Real> LqFixedSolution<T> {
    /// Simulates the inner closed loop, recovers `u = uhat - L x`, and
    /// cross-checks both the trajectory and the cost identity.
    pub fn run(&self, prob: &LqFixedProblem<T>, batch: &BrownianBatch<T>) -> Result<LqFixedRun<T>> {
        let hrun = self.inner.run(batch, 0)?;
        let inner_energy = estimate_energy(&self.inner.dec, &hrun.controls)?;
        let states = euler_state(&self.inner.dec, &self.transformed.x0, &hrun.controls, batch)?;

        let paths = batch.paths();
        let steps = batch.steps();
        let m = prob.base.m;

        // Recovered original control on every node of every path.
        let mut u_grid = PathGrid::zeros(paths, steps + 1, m);
        for p in 0..paths {
            for k in 0..=steps {
                let seg = self.inner.dec.at_node(k);
                let uhat = seg.control(&hrun.controls.z.vec_at(p, k), &hrun.controls.v.vec_at(p, k));
                let u = uhat - &self.gain[k] * states.vec_at(p, k);
                u_grid.at_mut(p, k).copy_from_slice(u.as_slice());
            }
        }

        // Route two: original coefficients driven by the recovered control
        // on the same noise must reproduce the hatted trajectory.
        let original = euler_state_original(&prob.base, &u_grid, batch)?;
        let mut trajectory_gap = T::zero();
        for p in 0..paths {
            for k in 0..=steps {
                let a = states.at(p, k);
                let b = original.at(p, k);
                for (ai, bi) in a.iter().zip(b.iter()) {
                    trajectory_gap = trajectory_gap.max((*ai - *bi).abs());
                }
            }
        }

        // Direct quadrature of x'Qx + u'Ru along the original paths,
        // trapezoid in time to match the inner energy estimate.
        let dt = batch.dt();
        let half = real::<T>(0.5);
        let q_nodes: Vec<&DMatrix<T>> = (0..=steps)
            .map(|k| {
                let t = prob.base.grid.node_time(k.min(steps - 1));
                prob.q.at_time(t)
            })
            .collect();
        let r_nodes: Vec<&DMatrix<T>> = (0..=steps)
            .map(|k| {
                let t = prob.base.grid.node_time(k.min(steps - 1));
                prob.base.r.at_time(t)
            })
            .collect();
        let mut direct = Vec::with_capacity(paths);
        for p in 0..paths {
            let mut acc = T::zero();
            for k in 0..=steps {
                let w = if k == 0 || k == steps { half } else { T::one() };
                let x = original.at(p, k);
                let u = u_grid.at(p, k);
                acc += (quad_form(q_nodes[k], x, x) + quad_form(r_nodes[k], u, u)) * w;
            }
            direct.push(acc * dt);
        }
        let (direct_mean, direct_se) = mean_and_se(&direct);

        let diffs: Vec<T> = direct
            .iter()
            .zip(inner_energy.per_path.iter())
            .map(|(d, e)| *d - *e - self.p0_cost)
            .collect();
        let (gap_mean, gap_se) = mean_and_se(&diffs);
        let identity_gap = gap_mean.abs();
        let bias = real::<T>(tol::MARTINGALE_BIAS_FACTOR) * dt * (T::one() + direct_mean.abs());
        let identity_threshold = real::<T>(3.0) * gap_se + bias;

        let (terminal_mse, _) = mean_squared_terminal_error(&original, &prob.base.target, batch);

        Ok(LqFixedRun {
            total_mean: self.p0_cost + inner_energy.mean,
            total_se: inner_energy.standard_error,
            inner_energy,
            direct_mean,
            direct_se,
            identity_gap,
            identity_threshold,
            identity_pass: identity_gap <= identity_threshold,
            trajectory_gap,
            terminal_mse,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::oracle::{solve_tree_qp, TreeProblem};
    use crate::simulate::generate_paths;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn identity_q(n: usize) -> MatrixPath<f64> {
        MatrixPath::constant(DMatrix::identity(n, n))
    }

    #[test]
    fn zero_state_cost_reduces_to_the_base_problem() {
        let base = instances::brownian_target::<f64>();
        let prob = LqFixedProblem {
            base: base.clone(),
            q: MatrixPath::constant(DMatrix::zeros(1, 1)),
        };
        let tr = lq_transform(&prob).unwrap();
        for g in &tr.gain {
            assert_eq!(max_abs(g), 0.0);
        }
        for k in 0..=base.grid.steps() {
            let t = base.grid.node_time(k.min(base.grid.steps() - 1));
            assert_eq!(tr.transformed.a.at_time(t), base.a.at_time(t));
            assert_eq!(tr.transformed.c.at_time(t), base.c.at_time(t));
            assert_eq!(tr.transformed.r.at_time(t), base.r.at_time(t));
        }

        let sol = solve_lq_fixed(&prob).unwrap();
        assert_eq!(sol.p0_cost, 0.0);
        let batch = generate_paths::<f64>(base.grid, 400, 9, true).unwrap();
        let run = sol.run(&prob, &batch).unwrap();
        let base_sol = crate::pipeline::solve(&base).unwrap();
        let base_run = base_sol.run(&batch, 0).unwrap();
        let base_energy = estimate_energy(&base_sol.dec, &base_run.controls).unwrap();
        assert_relative_eq!(run.total_mean, base_energy.mean, epsilon = 1e-12);
        assert!(run.identity_pass);
        assert!(run.trajectory_gap <= 1e-10, "gap {}", run.trajectory_gap);
    }

    #[test]
    fn flagship_state_cost_riccati_matches_tanh() {
        let base = instances::brownian_target::<f64>();
        let prob = LqFixedProblem {
            base,
            q: identity_q(1),
        };
        let tr = lq_transform(&prob).unwrap();
        let grid = prob.base.grid;
        for k in 0..=grid.steps() {
            let t = grid.node_time(k);
            let reference = (1.0 - t).tanh();
            assert_relative_eq!(tr.riccati.at_node(k)[(0, 0)], reference, epsilon = 1e-8);
        }
        for k in 0..grid.steps() {
            let t = grid.node_time(k);
            let p = (1.0 - t).tanh();
            let r_hat = tr.transformed.r.at_time(t);
            assert_relative_eq!(r_hat[(0, 0)], 1.0 + p, epsilon = 1e-8);
            assert_relative_eq!(r_hat[(1, 1)], 1.0, epsilon = 1e-12);
            assert_relative_eq!(r_hat[(0, 1)], 0.0, epsilon = 1e-12);
            // Gain rows follow B'P = [0, P]': Ahat = -P, Chat stays zero.
            assert_relative_eq!(tr.gain[k][(0, 0)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(tr.gain[k][(1, 0)], p, epsilon = 1e-8);
            assert_relative_eq!(tr.transformed.a.at_time(t)[(0, 0)], -p, epsilon = 1e-8);
            assert_relative_eq!(tr.transformed.c.at_time(t)[(0, 0)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn recovered_control_reproduces_the_trajectory() {
        let base = instances::random_controllable::<f64>(5, 2, 3, 2);
        let prob = LqFixedProblem {
            base,
            q: identity_q(2),
        };
        let sol = solve_lq_fixed(&prob).unwrap();
        assert!(sol.inner.controllability.controllable);
        let batch = generate_paths::<f64>(prob.base.grid, 200, 3, true).unwrap();
        let run = sol.run(&prob, &batch).unwrap();
        assert!(run.trajectory_gap <= 1e-10, "gap {}", run.trajectory_gap);
        assert!(
            run.identity_pass,
            "identity gap {} over threshold {}",
            run.identity_gap, run.identity_threshold
        );
        assert!(run.total_mean > 0.0);
    }

    #[test]
    fn zero_target_and_zero_start_cost_nothing() {
        let mut base = instances::brownian_target::<f64>();
        base.target.b = DVector::from_element(1, 0.0);
        let prob = LqFixedProblem {
            base,
            q: identity_q(1),
        };
        let sol = solve_lq_fixed(&prob).unwrap();
        assert_eq!(sol.p0_cost, 0.0);
        let batch = generate_paths::<f64>(prob.base.grid, 200, 11, true).unwrap();
        let run = sol.run(&prob, &batch).unwrap();
        assert!(run.total_mean.abs() <= 1e-12, "total {}", run.total_mean);
        assert!(run.direct_mean.abs() <= 1e-12, "direct {}", run.direct_mean);
        assert!(run.terminal_mse <= 1e-20);
    }

    #[test]
    fn deterministic_target_with_state_cost_matches_the_tree() {
        let base = instances::deterministic_target::<f64>(1.0, 0.0);
        let prob = LqFixedProblem {
            base,
            q: identity_q(1),
        };
        let sol = solve_lq_fixed(&prob).unwrap();
        let batch = generate_paths::<f64>(prob.base.grid, 500, 7, true).unwrap();
        let run = sol.run(&prob, &batch).unwrap();
        assert!(run.identity_pass);

        let tree = TreeProblem::from_spec(&prob.spec_with_q(), 10).unwrap();
        let tree_sol = solve_tree_qp(&tree).unwrap();
        let rel = (run.total_mean - tree_sol.j_tree).abs() / tree_sol.j_tree;
        assert!(
            rel <= 0.06,
            "lq total {} vs tree {} (rel {rel})",
            run.total_mean,
            tree_sol.j_tree
        );
    }
}
