//! Acceptance gate: one test per shipped guarantee, each ending in a
//! single verdict line with the measured numbers.
//!
//! Closed forms anchor the reference instance and the deterministic
//! limit, the non-recombining tree QP is the independent oracle wherever
//! no closed form exists, and the statistical identities run on seeded
//! common random numbers. A failure prints FAIL with the numbers that
//! broke it before panicking.

use std::time::Instant;

use minenergy::bsde::solve_bsde;
use minenergy::decomp::{build_m_path, decompose};
use minenergy::instances;
use minenergy::lqfixed::{lq_transform, solve_lq_fixed, LqFixedProblem};
use minenergy::oracle::{
    compare_with_solver, excess_cost_check, feasible_competitor, solve_tree_qp, tree_lemma1,
    tree_lemma2, TreeProblem,
};
use minenergy::pipeline::solve;
use minenergy::problem::{MatrixPath, TimeGrid};
use minenergy::riccati::{controllability_test, solve_pbar};
use minenergy::simulate::{
    adjoint_martingale_check, estimate_energy, euler_state, generate_paths, gramian_rank_mc,
    lemma_identity_checks, mean_squared_terminal_error, GammaChoice,
};
use minenergy::tol;
use nalgebra::{DMatrix, DVector};

fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {name}: {tag} ({detail})");
    assert!(pass, "{name}: {detail}");
}

/// Optimal energy on the reference instance within 1.5% of ln 2 at
/// 10^4 paths and 10^3 steps, terminal MSE halving under step doubling
/// on common noise, all inside the 30 s budget.
#[test]
fn flagship_energy_hits_the_closed_form() {
    let start = Instant::now();
    let spec = instances::brownian_target::<f64>();
    let sol = solve(&spec).unwrap();
    let batch = generate_paths(spec.grid, 10_000, 42, true).unwrap();
    let run = sol.run(&batch, 0).unwrap();
    let energy = estimate_energy(&sol.dec, &run.controls).unwrap();
    let target = std::f64::consts::LN_2;
    let rel = (energy.mean - target).abs() / target;

    // Same noise at half the resolution: terminal MSE should double.
    let coarse = batch.coarsen().unwrap();
    let mut spec_c = spec.clone();
    spec_c.grid = TimeGrid::new(1.0, coarse.steps()).unwrap();
    let sol_c = solve(&spec_c).unwrap();
    let run_c = sol_c.run(&coarse, 0).unwrap();
    let x_fine = euler_state(&sol.dec, &spec.x0, &run.controls, &batch).unwrap();
    let x_coarse = euler_state(&sol_c.dec, &spec_c.x0, &run_c.controls, &coarse).unwrap();
    let (mse_fine, _) = mean_squared_terminal_error(&x_fine, &spec.target, &batch);
    let (mse_coarse, _) = mean_squared_terminal_error(&x_coarse, &spec_c.target, &coarse);
    let ratio = mse_coarse / mse_fine;
    let secs = start.elapsed().as_secs_f64();

    // The terminal gap must shrink at least linearly in the step (ratio
    // >= 1.4). On this instance it actually shrinks quadratically: with
    // no state-multiplicative noise and a smooth deterministic diffusion
    // control, the Euler terminal error is first strong order, so the
    // measured ratio sits at 4. Cap at 4.8 to still catch a broken
    // estimator that reports spuriously fast decay.
    let pass = rel <= 0.015 && (1.4..=4.8).contains(&ratio) && secs < 30.0;
    verdict(
        "flagship-closed-form",
        pass,
        &format!(
            "energy {:.6} vs {:.6}, rel {:.4}; mse ratio {:.2}; {:.1}s",
            energy.mean, target, rel, ratio, secs
        ),
    );
}

/// Deterministic target: constant feedforward `(a - x0)/T`, vanishing
/// diffusion control, exact quadrature cost, and the sign of the
/// steering vector.
#[test]
fn deterministic_target_recovers_the_constant_control() {
    let a = 1.3;
    let x0 = 0.4;
    let mut spec = instances::deterministic_target::<f64>(a, x0);
    spec.grid = TimeGrid::new(1.0, 400).unwrap();
    let sol = solve(&spec).unwrap();
    let expected_v = a - x0;
    let k_gap = (sol.k_vec[0] - expected_v).abs();

    let batch = generate_paths(spec.grid, 512, 7, true).unwrap();
    let run = sol.run(&batch, 0).unwrap();
    let mut dev_v: f64 = 0.0;
    let mut dev_z: f64 = 0.0;
    for p in 0..batch.paths() {
        for k in 0..=batch.steps() {
            dev_v = dev_v.max((run.controls.v.at(p, k)[0] - expected_v).abs());
            dev_z = dev_z.max(run.controls.z.at(p, k)[0].abs());
        }
    }
    let energy = estimate_energy(&sol.dec, &run.controls).unwrap();
    let exact = (a - x0) * (a - x0);
    let worst_path = energy
        .per_path
        .iter()
        .map(|c| (c - exact).abs())
        .fold(0.0f64, f64::max);

    let pass =
        k_gap <= 1e-8 && sol.k_vec[0] > 0.0 && dev_v <= 1e-8 && dev_z <= 1e-8 && worst_path <= 1e-10;
    verdict(
        "deterministic-target",
        pass,
        &format!(
            "max|v - {expected_v}| {dev_v:.2e}, max|z| {dev_z:.2e}, worst path cost gap {worst_path:.2e}, K gap {k_gap:.2e}"
        ),
    );
}

/// Twenty seeded random instances (n <= 2, m <= 3, piecewise-constant
/// coefficients, affine targets): the simulated optimal energy matches
/// the depth-12 tree value within 5%, root controls agree at the
/// sqrt(step) scale, and every tree certificate is tight.
///
/// The oracle judges an instance only after certifying its own
/// resolution: when the tree value still moves by more than 2.5%
/// between depths 6 and 12 (both aligned with every coefficient break
/// in play), the depth cap - not the solver - dominates the comparison,
/// and the instance is recused and replaced by the next seed. The
/// filter never looks at solver output, so it cannot mask a solver bug.
#[test]
fn random_instances_agree_with_the_tree_oracle() {
    let depth = 12;
    let shapes = [(1usize, 2usize), (1, 3), (2, 3)];
    let mut worst_rel: f64 = 0.0;
    let mut worst_root: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut accepted = 0usize;
    let mut recused = 0usize;
    for (idx, seed) in (101u64..149).enumerate() {
        if accepted >= 20 {
            break;
        }
        let (n, m) = shapes[idx % shapes.len()];
        let segments = 1 + idx % 3;
        let mut spec = instances::random_controllable::<f64>(seed, n, m, segments);
        // 480 is divisible by every segment count in play, so both grids
        // sample exactly the same piecewise coefficients.
        spec.grid = TimeGrid::new(1.0, 480).unwrap();

        let tree = TreeProblem::from_spec(&spec, depth).unwrap();
        let tsol = solve_tree_qp(&tree).unwrap();
        let half = TreeProblem::from_spec(&spec, depth / 2).unwrap();
        let j_half = solve_tree_qp(&half).unwrap().j_tree;
        if (j_half - tsol.j_tree).abs() > 0.025 * tsol.j_tree.abs() {
            recused += 1;
            continue;
        }
        worst_kkt = worst_kkt.max(tsol.kkt_residual);

        let sol = solve(&spec).unwrap();
        let batch = generate_paths(spec.grid, 16_384, seed, true).unwrap();
        let run = sol.run(&batch, 0).unwrap();
        let energy = estimate_energy(&sol.dec, &run.controls).unwrap();
        let (v0, z0) = sol.root_controls();
        let report = compare_with_solver(&tsol, energy.mean, &v0, &z0);
        worst_rel = worst_rel.max(report.rel_gap);

        let root_scale = 1.0 + v0.norm() + z0.norm();
        worst_root = worst_root.max(report.root_gap / (tree.delta().sqrt() * root_scale));
        accepted += 1;
    }
    let pass =
        accepted >= 20 && worst_rel <= 0.05 && worst_root <= 2.0 && worst_kkt <= tol::TOL_KKT;
    verdict(
        "tree-oracle-equivalence",
        pass,
        &format!(
            "{accepted} instances ({recused} recused as unresolved at depth {depth}); worst rel gap {worst_rel:.4}, worst root gap {worst_root:.2} in sqrt(dt) units, worst KKT {worst_kkt:.2e}"
        ),
    );
}

/// The Riccati positivity verdict and the sampled Gramian rank agree on
/// the three-instance battery, and the Gramian spectra land on their
/// derived values.
#[test]
fn controllability_verdicts_agree_with_the_gramian() {
    let fixtures: Vec<(&str, minenergy::ProblemSpec64, bool, Vec<f64>)> = vec![
        ("full", instances::brownian_target::<f64>(), true, vec![1.0]),
        ("square-input", instances::square_input::<f64>(), false, vec![0.0]),
        (
            "partial-actuation",
            instances::partial_actuation::<f64>(),
            false,
            vec![1.0, 0.0],
        ),
    ];
    let mut all = true;
    let mut lines = Vec::new();
    for (name, mut spec, expect, eigs) in fixtures {
        spec.grid = TimeGrid::new(spec.grid.t_final(), 400).unwrap();
        let m_path = build_m_path(&spec).unwrap();
        let dec = decompose(&spec, &m_path).unwrap();
        let ric = solve_pbar(&dec).unwrap();
        let report = controllability_test(&ric);
        let batch = generate_paths(spec.grid, 4096, 17, true).unwrap();
        let gram = gramian_rank_mc(&dec, &batch, None).unwrap();
        let verdicts_agree = report.controllable == expect && (gram.rank == spec.n) == expect;
        let mut spectrum_ok = true;
        for (i, want) in eigs.iter().enumerate() {
            let gap = (gram.eigenvalues[i] - want).abs();
            if gap > 3.0 * gram.eigen_standard_errors[i] + 1e-9 {
                spectrum_ok = false;
            }
        }
        all = all && verdicts_agree && spectrum_ok;
        lines.push(format!(
            "{name}: riccati {}, gramian rank {}, eigs {:?}",
            report.controllable,
            gram.rank,
            gram.eigenvalues.as_slice()
        ));
    }
    verdict("controllability-equivalence", all, &lines.join("; "));
}

/// Exchange identities: within three standard errors on Monte-Carlo
/// paths with common random numbers, exact (1e-10) on the tree, and the
/// excess-cost decomposition with its vanishing cross term for ten
/// certified-feasible competitors.
#[test]
fn exchange_identities_hold_on_paths_and_tree() {
    let mut spec = instances::brownian_target::<f64>();
    spec.grid = TimeGrid::new(1.0, 500).unwrap();
    let sol = solve(&spec).unwrap();
    // A second admissible control: optimal for a reweighted cost, so it
    // still steers to the same target on the same noise.
    let mut spec2 = spec.clone();
    spec2.r = MatrixPath::constant(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])));
    let sol2 = solve(&spec2).unwrap();
    let batch = generate_paths(spec.grid, 8192, 23, true).unwrap();
    let run = sol.run(&batch, 0).unwrap();
    let run2 = sol2.run(&batch, 0).unwrap();
    let mc = lemma_identity_checks(
        &sol.dec,
        &spec.x0,
        &spec.target,
        &run.controls,
        &run2.controls,
        &batch,
        &GammaChoice::Canonical,
    )
    .unwrap();

    let tree = TreeProblem::from_spec(&spec, 8).unwrap();
    let tsol = solve_tree_qp(&tree).unwrap();
    let scale = 1.0 + tsol.j_tree.abs();
    let mut exact_max: f64 = 0.0;
    let mut cross_max: f64 = 0.0;
    let mut excess_max: f64 = 0.0;
    let mut ordered = true;
    for seed in 0..10 {
        let comp = feasible_competitor(&tree, seed).unwrap();
        let l1 = tree_lemma1(&tree, tsol.controls(), &comp).unwrap();
        let l2 = tree_lemma2(&tree, tsol.controls(), &comp, &GammaChoice::Canonical).unwrap();
        exact_max = exact_max.max(l1.amax()).max(l2.gap.abs());
        let ex = excess_cost_check(&tree, &tsol, &comp).unwrap();
        cross_max = cross_max.max(ex.cross_term.abs() / (1.0 + ex.j_other.abs()));
        excess_max = excess_max.max(ex.identity_residual / (1.0 + ex.j_other.abs()));
        ordered = ordered && ex.j_other >= ex.j_opt;
    }
    let pass = mc.lemma1_pass
        && mc.lemma2_pass
        && exact_max <= tol::TOL_TREE_IDENTITY * scale
        && cross_max <= 1e-8
        && excess_max <= 1e-8
        && ordered;
    verdict(
        "exchange-identities",
        pass,
        &format!(
            "mc lemma1 {} lemma2 {}; tree identity max {exact_max:.2e}, cross max {cross_max:.2e}, excess residual max {excess_max:.2e}",
            mc.lemma1_pass, mc.lemma2_pass
        ),
    );
}

/// Backward integrators show fourth-order self-convergence, the adjoint
/// propagator reproduces the steering offset as a martingale average,
/// and the controllability solution stays symmetric PSD on every node.
#[test]
fn backward_integrators_hold_their_orders() {
    let mut spec = instances::brownian_target::<f64>();
    spec.a = MatrixPath::constant(DMatrix::from_element(1, 1, 0.4));
    spec.c = MatrixPath::constant(DMatrix::from_element(1, 1, 0.7));
    spec.target.a = DVector::from_element(1, 0.6);

    let solve_at = |steps: usize| {
        let mut s = spec.clone();
        s.grid = TimeGrid::new(1.0, steps).unwrap();
        let m_path = build_m_path(&s).unwrap();
        let dec = decompose(&s, &m_path).unwrap();
        let ric = solve_pbar(&dec).unwrap();
        let bsde = solve_bsde(&dec, &ric, &s.target).unwrap();
        [ric.p0()[(0, 0)], bsde.alpha_at(0)[0], bsde.beta_at(0)[0]]
    };
    let reference = solve_at(800);
    let coarse = solve_at(25);
    let fine = solve_at(50);
    let mut ratios = [0.0f64; 3];
    let mut order_ok = true;
    for i in 0..3 {
        ratios[i] = (coarse[i] - reference[i]).abs() / (fine[i] - reference[i]).abs();
        order_ok = order_ok && (12.0..=20.0).contains(&ratios[i]);
    }

    let mut s = spec.clone();
    s.grid = TimeGrid::new(1.0, 400).unwrap();
    let sol = solve(&s).unwrap();
    let batch = generate_paths(s.grid, 8192, 31, true).unwrap();
    let mart = adjoint_martingale_check(&sol.bsde, &s.target, &batch).unwrap();

    let mut shape_ok = true;
    for k in 0..=s.grid.steps() {
        let p = sol.pbar.at_node(k);
        let scale = 1.0 + p.amax();
        let sym_gap = (p - p.transpose()).amax();
        let min_eig = p.clone().symmetric_eigen().eigenvalues.min();
        shape_ok = shape_ok && sym_gap <= 1e-9 * scale && min_eig >= -1e-10 * scale;
    }

    let pass = order_ok && mart.pass && shape_ok;
    verdict(
        "backward-integration",
        pass,
        &format!(
            "step-halving ratios {ratios:.2?} (want 12..20); martingale pass {}; PSD+symmetry {}",
            mart.pass, shape_ok
        ),
    );
}

/// Running state cost: zero weight regresses to the plain steering
/// solution to 1e-10, the unit-weight Riccati lands on its tanh closed
/// form, and the rewritten total cost matches the state-penalised tree.
#[test]
fn state_cost_rewrite_matches_its_oracles() {
    let mut spec = instances::brownian_target::<f64>();
    spec.grid = TimeGrid::new(1.0, 500).unwrap();
    let prob0 = LqFixedProblem {
        base: spec.clone(),
        q: MatrixPath::constant(DMatrix::zeros(1, 1)),
    };
    let lq0 = solve_lq_fixed(&prob0).unwrap();
    let batch = generate_paths(spec.grid, 4096, 42, true).unwrap();
    let run0 = lq0.run(&prob0, &batch).unwrap();
    let plain = solve(&spec).unwrap();
    let plain_run = plain.run(&batch, 0).unwrap();
    let plain_energy = estimate_energy(&plain.dec, &plain_run.controls).unwrap();
    let regress = (run0.total_mean - plain_energy.mean).abs();

    let prob1 = LqFixedProblem {
        base: spec.clone(),
        q: MatrixPath::constant(DMatrix::identity(1, 1)),
    };
    let tr = lq_transform(&prob1).unwrap();
    let mut tanh_gap: f64 = 0.0;
    for k in 0..=spec.grid.steps() {
        let t = spec.grid.node_time(k);
        tanh_gap = tanh_gap.max((tr.riccati.at_node(k)[(0, 0)] - (1.0 - t).tanh()).abs());
    }

    let mut det = instances::deterministic_target::<f64>(1.0, 0.4);
    det.grid = TimeGrid::new(1.0, 480).unwrap();
    let prob_det = LqFixedProblem {
        base: det,
        q: MatrixPath::constant(DMatrix::identity(1, 1)),
    };
    let lq_det = solve_lq_fixed(&prob_det).unwrap();
    let det_batch = generate_paths(prob_det.base.grid, 4096, 7, true).unwrap();
    let det_run = lq_det.run(&prob_det, &det_batch).unwrap();
    let tree = TreeProblem::from_spec(&prob_det.spec_with_q(), 12).unwrap();
    let tsol = solve_tree_qp(&tree).unwrap();
    let rel = (det_run.total_mean - tsol.j_tree).abs() / tsol.j_tree;

    let pass = regress <= 1e-10 && tanh_gap <= 1e-8 && rel <= 0.05 && det_run.identity_pass;
    verdict(
        "state-cost-rewrite",
        pass,
        &format!(
            "zero-weight regression {regress:.2e}; |P - tanh| {tanh_gap:.2e}; tree rel gap {rel:.4}; cost identity pass {}",
            det_run.identity_pass
        ),
    );
}
