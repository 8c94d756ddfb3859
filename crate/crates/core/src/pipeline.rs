//! End-to-end orchestration: factor the input, certify controllability,
//! run the backward solves, and expose one bundle the front end and the
//! verification suites can drive.

use nalgebra::DVector;

use crate::bsde::{solve_bsde, steering_initial_condition, BsdeSolution};
use crate::decomp::{build_m_path, decompose, schur_check, Decomposition};
use crate::hamiltonian::{assemble_closed_loop, run_hamiltonian, ClosedLoopCoefficients, HamiltonianRun};
use crate::problem::ProblemSpec;
use crate::riccati::{ensure_controllable, solve_pbar, ControllabilityReport, RiccatiSolution};
use crate::scalar::Real;
use crate::simulate::BrownianBatch;
use crate::Result;

/// Everything the backward sweep produces for one problem.
#[derive(Debug, Clone)]
pub struct Solution<T: Real> {
    /// Factorised coefficients.
    pub dec: Decomposition<T>,
    /// Controllability Riccati solution.
    pub pbar: RiccatiSolution<T>,
    /// Controllability verdict (guaranteed positive margin here).
    pub controllability: ControllabilityReport<T>,
    /// Backward pair `(alpha, beta)` and node coefficients.
    pub bsde: BsdeSolution<T>,
    /// Steering initial condition `K`.
    pub k_vec: DVector<T>,
    /// Node-wise closed-loop coefficients for the adjoint state.
    pub coeffs: ClosedLoopCoefficients<T>,
}

/// Runs the full backward pipeline on a validated problem.
///
/// Order: factor `D`, certify the Schur blocks, solve the controllability
/// Riccati equation, gate on `Pbar(0) > 0`, solve the backward pair, fix
/// `K`, and assemble the closed-loop coefficients.
pub fn solve<T: Real>(spec: &ProblemSpec<T>) -> Result<Solution<T>> {
    spec.ensure_valid()?;
    let m_path = build_m_path(spec)?;
    let dec = decompose(spec, &m_path)?;
    let schur = schur_check(&dec);
    if !schur.pass {
        return Err(crate::error::Error::Invalid(format!(
            "cost blocks lost positivity on segment {} (min Hbar eigenvalue {:.3e})",
            schur.worst_segment,
            schur
                .min_hbar_eigenvalue
                .to_f64()
                .unwrap_or(f64::NAN)
        )));
    }
    let pbar = solve_pbar(&dec)?;
    let controllability = ensure_controllable(&pbar)?;
    let bsde = solve_bsde(&dec, &pbar, &spec.target)?;
    let k_vec = steering_initial_condition(&pbar, &bsde, &spec.x0)?;
    let coeffs = assemble_closed_loop(&dec, &pbar, &bsde)?;
    Ok(Solution {
        dec,
        pbar,
        controllability,
        bsde,
        k_vec,
        coeffs,
    })
}

impl<T: Real> Solution<T> {
    /// Simulates the optimal closed loop on `batch`; see
    /// [`run_hamiltonian`] for the `detail_paths` convention.
    pub fn run(&self, batch: &BrownianBatch<T>, detail_paths: usize) -> Result<HamiltonianRun<T>> {
        run_hamiltonian(&self.dec, &self.coeffs, &self.k_vec, batch, detail_paths)
    }

    /// Deterministic node-0 controls `(v*(0), z*(0))`: at `t = 0` the
    /// closed loop has `Y = K`, `W = 0`, so no sampling is involved.
    pub fn root_controls(&self) -> (DVector<T>, DVector<T>) {
        let seg = self.dec.at_node(0);
        let pbar0 = self.pbar.at_node(0);
        let alpha0 = self.bsde.alpha_at(0);
        let beta0 = self.bsde.beta_at(0);
        let (s_y, z_p, z_q) = self.coeffs.zbar_blocks(0);
        let xbar = pbar0 * &self.k_vec + alpha0;
        let zbar = s_y * &self.k_vec + z_p * alpha0 + z_q * beta0;
        let z = &seg.c * &xbar - zbar;
        let v = &seg.h3_inv * (seg.f.transpose() * &self.k_vec) - &seg.h3_inv_h2t * &z;
        (v, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::instances;
    use crate::simulate::{estimate_energy, generate_paths};
    use approx::assert_relative_eq;

    #[test]
    fn pipeline_solves_the_reference_instance() {
        let spec = instances::brownian_target::<f64>();
        let sol = solve(&spec).unwrap();
        assert!(sol.controllability.controllable);
        assert_relative_eq!(sol.controllability.min_eigenvalue, 1.0, epsilon = 1e-9);
        assert_eq!(sol.k_vec[0], 0.0);
        let (v0, z0) = sol.root_controls();
        assert_eq!(v0[0], 0.0);
        assert_relative_eq!(z0[0], 0.5, epsilon = 1e-10);

        let batch = generate_paths::<f64>(spec.grid, 500, 2, true).unwrap();
        let run = sol.run(&batch, 1).unwrap();
        let energy = estimate_energy(&sol.dec, &run.controls).unwrap();
        assert!(
            (energy.mean - std::f64::consts::LN_2).abs()
                <= 3.0 * energy.standard_error + 5e-3
        );
    }

    #[test]
    fn pipeline_rejects_uncontrollable_instances() {
        let spec = instances::square_input::<f64>();
        match solve(&spec) {
            Err(Error::NotControllable { .. }) => {}
            other => panic!("expected NotControllable, got {other:?}"),
        }
        let spec = instances::partial_actuation::<f64>();
        assert!(matches!(
            solve(&spec),
            Err(Error::NotControllable { .. })
        ));
    }

    #[test]
    fn pipeline_accepts_random_controllable_instances() {
        for seed in 0..4u64 {
            let spec = instances::random_controllable::<f64>(seed, 2, 3, 2);
            let sol = solve(&spec).expect("random instance should be controllable");
            assert!(sol.controllability.margin() > 0.0);
        }
    }
}
