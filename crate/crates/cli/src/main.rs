//! Command-line front end for the minimum-energy steering toolkit.
//!
//! Loads a problem document (JSON), runs the requested stage, prints a
//! short summary, and writes `report.json` plus CSV exports into
//! `--out-dir`. Identical `(config, flags, seed)` produce byte-identical
//! report bodies except for the `timing_ms` field.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 not
//! controllable / infeasible, 4 numerical failure.
//!
//! Parallelism: Monte-Carlo sweeps use all cores by default; set
//! `RAYON_NUM_THREADS` to pin the worker count (results do not depend on
//! it).

mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use minenergy::decomp::{build_m_path, decompose, schur_check};
use minenergy::error::ErrorCategory;
use minenergy::lqfixed::{solve_lq_fixed, LqFixedProblem};
use minenergy::oracle::{compare_with_solver, dump_qp, solve_tree_qp, TreeProblem};
use minenergy::pipeline::{solve, Solution};
use minenergy::problem::{ProblemDocument, TimeGrid};
use minenergy::riccati::{controllability_test, ensure_controllable, solve_pbar};
use minenergy::simulate::{
    adjoint_martingale_check, estimate_energy, euler_state, generate_paths, gramian_rank_mc,
    mean_squared_terminal_error, terminal_errors, BrownianBatch,
};
use minenergy::{Error, ProblemSpec64, Result};

use report::{
    oracle_section, write_bsde_csv, write_energy_csv, write_riccati_csv, write_summary_csv,
    write_trajectories_csv, RunReport, StateCostSection, SteeringSection, TerminalSection,
};

#[derive(Parser)]
#[command(
    name = "minenergy",
    version,
    about = "Steer a linear SDE to a prescribed terminal state at minimum expected control energy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify exact controllability twice: Riccati positivity and
    /// sampled Gramian rank.
    Check(CheckArgs),
    /// Run the backward pipeline and export its coefficients.
    Solve(SolveArgs),
    /// Simulate the optimal closed loop and estimate the energy.
    Simulate(SimulateArgs),
    /// Solve the tree QP oracle and score the solver against it.
    Oracle(OracleArgs),
    /// Rewrite a running state cost into pure control energy, then solve
    /// and simulate the rewritten problem.
    Lq(LqArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Problem document (JSON).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Monte-Carlo paths (antithetic pairs).
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Override the document's grid step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for the Brownian batch.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory receiving report.json and the CSV exports.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Paths exported in full to trajectories.csv.
    #[arg(long, default_value_t = 8)]
    detail_paths: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Levels of the non-recombining binary tree.
    #[arg(long, default_value_t = 12)]
    tree_depth: usize,
    /// Also write the assembled QP blocks to tree_qp.txt.
    #[arg(long)]
    dump_qp: bool,
}

#[derive(Args)]
struct LqArgs {
    #[command(flatten)]
    common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.category() {
                ErrorCategory::InvalidInput => 2,
                ErrorCategory::NotControllable => 3,
                ErrorCategory::Numerical => 4,
            })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Check(args) => cmd_check(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Lq(args) => cmd_lq(args),
    }
}

/// Loads, optionally re-grids, and validates the problem document;
/// returns the spec and the document's SHA-256 digest.
fn load(common: &CommonArgs) -> Result<(ProblemSpec64, String)> {
    let text = std::fs::read_to_string(&common.config)?;
    let digest = format!("{:x}", Sha256::digest(text.as_bytes()));
    let mut spec: ProblemSpec64 = ProblemDocument::from_json(&text)?.to_spec()?;
    if let Some(steps) = common.steps {
        spec.grid = TimeGrid::new(spec.grid.t_final(), steps)?;
    }
    spec.ensure_valid()?;
    std::fs::create_dir_all(&common.out_dir)?;
    Ok((spec, digest))
}

fn base_report(command: &str, common: &CommonArgs, spec: &ProblemSpec64, digest: String) -> RunReport {
    let mut report = RunReport::new(command, &common.config, digest, common.seed, common.paths);
    report.steps = spec.grid.steps();
    report.state_dim = spec.n;
    report.control_dim = spec.m;
    report
}

fn batch_for(spec: &ProblemSpec64, common: &CommonArgs) -> Result<BrownianBatch<f64>> {
    generate_paths(spec.grid, common.paths, common.seed, true)
}

fn steering_section(sol: &Solution<f64>) -> SteeringSection {
    SteeringSection {
        k: sol.k_vec.iter().copied().collect(),
        alpha0: sol.bsde.alpha_at(0).iter().copied().collect(),
        beta0: sol.bsde.beta_at(0).iter().copied().collect(),
    }
}

fn finish(mut report: RunReport, out_dir: &std::path::Path, started: Instant) -> Result<()> {
    report.timing_ms = started.elapsed().as_millis();
    let path = report.write(out_dir)?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<()> {
    let started = Instant::now();
    let (spec, digest) = load(&args.common)?;
    let mut report = base_report("check", &args.common, &spec, digest);

    let m_path = build_m_path(&spec)?;
    let dec = decompose(&spec, &m_path)?;
    let schur = schur_check(&dec);
    let ric = solve_pbar(&dec)?;
    let verdict = controllability_test(&ric);
    let batch = batch_for(&spec, &args.common)?;
    let gramian = gramian_rank_mc(&dec, &batch, None)?;

    let agree = verdict.controllable == gramian.full_rank();
    println!(
        "riccati: {} (min eigenvalue {:.6e}, margin {:.6e})",
        if verdict.controllable {
            "CONTROLLABLE"
        } else {
            "NOT CONTROLLABLE"
        },
        verdict.min_eigenvalue,
        verdict.margin(),
    );
    println!(
        "gramian: rank {} of {} (eigenvalues {:?})",
        gramian.rank,
        spec.n,
        gramian.eigenvalues.as_slice()
    );
    println!("verdicts agree: {agree}");

    report.schur = Some((&schur).into());
    report.controllability = Some((&verdict).into());
    report.gramian = Some((&gramian).into());
    finish(report, &args.common.out_dir, started)?;
    // The report is written either way; the exit code carries the verdict.
    ensure_controllable(&ric)?;
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    let started = Instant::now();
    let (spec, digest) = load(&args.common)?;
    let mut report = base_report("solve", &args.common, &spec, digest);

    let sol = solve(&spec)?;
    let out = &args.common.out_dir;
    write_riccati_csv(out, "riccati.csv", &sol.pbar, spec.grid.steps(), spec.grid.t_final())?;
    write_bsde_csv(out, &sol.bsde, spec.grid.steps(), spec.grid.t_final())?;
    report.files.push("riccati.csv".into());
    report.files.push("bsde.csv".into());

    println!(
        "controllable, margin {:.6e}; K = {:?}",
        sol.controllability.margin(),
        sol.k_vec.as_slice()
    );
    report.schur = Some((&schur_check(&sol.dec)).into());
    report.controllability = Some((&sol.controllability).into());
    report.steering = Some(steering_section(&sol));
    finish(report, out, started)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let (spec, digest) = load(&args.common)?;
    let mut report = base_report("simulate", &args.common, &spec, digest);

    let sol = solve(&spec)?;
    let batch = batch_for(&spec, &args.common)?;
    let run = sol.run(&batch, args.detail_paths)?;
    let energy = estimate_energy(&sol.dec, &run.controls)?;
    let states = euler_state(&sol.dec, &spec.x0, &run.controls, &batch)?;
    let (mse, mse_se) = mean_squared_terminal_error(&states, &spec.target, &batch);
    let martingale = adjoint_martingale_check(&sol.bsde, &spec.target, &batch)?;
    let terminal = terminal_errors(&states, &spec.target, &batch);

    let out = &args.common.out_dir;
    write_riccati_csv(out, "riccati.csv", &sol.pbar, spec.grid.steps(), spec.grid.t_final())?;
    write_bsde_csv(out, &sol.bsde, spec.grid.steps(), spec.grid.t_final())?;
    write_trajectories_csv(out, &run, &states, &batch)?;
    write_energy_csv(out, &energy, &terminal)?;
    write_summary_csv(
        out,
        &[
            ("energy_mean", energy.mean.to_string()),
            ("energy_standard_error", energy.standard_error.to_string()),
            ("terminal_mse", mse.to_string()),
            ("terminal_mse_standard_error", mse_se.to_string()),
            ("cost_identity_gap", energy.max_cost_identity_gap.to_string()),
            ("martingale_pass", martingale.pass.to_string()),
        ],
    )?;
    for name in ["riccati.csv", "bsde.csv", "trajectories.csv", "energy.csv", "summary.csv"] {
        report.files.push(name.into());
    }

    println!(
        "energy {:.6} +- {:.6} ({} paths); terminal mse {:.3e}; martingale pass {}",
        energy.mean,
        energy.standard_error,
        batch.paths(),
        mse,
        martingale.pass
    );
    report.controllability = Some((&sol.controllability).into());
    report.steering = Some(steering_section(&sol));
    report.energy = Some((&energy).into());
    report.terminal = Some(TerminalSection {
        mean_squared_error: mse,
        standard_error: mse_se,
    });
    report.martingale = Some((&martingale).into());
    finish(report, out, started)
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let started = Instant::now();
    let (mut spec, digest) = load(&args.common)?;
    let mut report = base_report("oracle", &args.common, &spec, digest);

    // The tree oracle honours a state weight, the steering solver does
    // not; drop it so both sides price the same problem.
    spec.q = None;
    let tree = TreeProblem::from_spec(&spec, args.tree_depth)?;
    let tree_sol = solve_tree_qp(&tree)?;
    let out = &args.common.out_dir;
    if args.dump_qp {
        std::fs::write(out.join("tree_qp.txt"), dump_qp(&tree))?;
        report.files.push("tree_qp.txt".into());
    }

    let sol = solve(&spec)?;
    let batch = batch_for(&spec, &args.common)?;
    let run = sol.run(&batch, 0)?;
    let energy = estimate_energy(&sol.dec, &run.controls)?;
    let (v0, z0) = sol.root_controls();
    let cmp = compare_with_solver(&tree_sol, energy.mean, &v0, &z0);

    println!(
        "tree value {:.6} (depth {}, kkt {:.2e}); solver {:.6} +- {:.6}; relative gap {:.4}",
        cmp.j_tree,
        args.tree_depth,
        tree_sol.kkt_residual,
        cmp.j_solver,
        energy.standard_error,
        cmp.rel_gap
    );
    report.controllability = Some((&sol.controllability).into());
    report.energy = Some((&energy).into());
    report.oracle = Some(oracle_section(args.tree_depth, tree_sol.kkt_residual, &cmp));
    finish(report, out, started)
}

fn cmd_lq(args: LqArgs) -> Result<()> {
    let started = Instant::now();
    let (mut spec, digest) = load(&args.common)?;
    let mut report = base_report("lq", &args.common, &spec, digest);
    let q = spec.q.take().ok_or_else(|| {
        Error::Invalid("the lq command needs a Q block in the problem document".into())
    })?;

    let prob = LqFixedProblem { base: spec, q };
    let lq = solve_lq_fixed(&prob)?;
    let batch = generate_paths(prob.base.grid, args.common.paths, args.common.seed, true)?;
    let run = lq.run(&prob, &batch)?;

    let out = &args.common.out_dir;
    let grid = prob.base.grid;
    write_riccati_csv(out, "lq_riccati.csv", &lq.riccati, grid.steps(), grid.t_final())?;
    write_riccati_csv(out, "riccati.csv", &lq.inner.pbar, grid.steps(), grid.t_final())?;
    write_bsde_csv(out, &lq.inner.bsde, grid.steps(), grid.t_final())?;
    write_summary_csv(
        out,
        &[
            ("initial_quadratic_cost", lq.p0_cost.to_string()),
            ("total_mean", run.total_mean.to_string()),
            ("total_standard_error", run.total_se.to_string()),
            ("direct_mean", run.direct_mean.to_string()),
            ("cost_identity_gap", run.identity_gap.to_string()),
            ("cost_identity_pass", run.identity_pass.to_string()),
            ("trajectory_gap", run.trajectory_gap.to_string()),
            ("terminal_mse", run.terminal_mse.to_string()),
        ],
    )?;
    for name in ["lq_riccati.csv", "riccati.csv", "bsde.csv", "summary.csv"] {
        report.files.push(name.into());
    }

    println!(
        "total cost {:.6} +- {:.6} (quadratic part {:.6}); identity pass {}; trajectory gap {:.2e}",
        run.total_mean, run.total_se, lq.p0_cost, run.identity_pass, run.trajectory_gap
    );
    report.controllability = Some((&lq.inner.controllability).into());
    report.steering = Some(steering_section(&lq.inner));
    report.energy = Some((&run.inner_energy).into());
    report.state_cost = Some(StateCostSection {
        initial_quadratic_cost: lq.p0_cost,
        total_mean: run.total_mean,
        total_standard_error: run.total_se,
        direct_mean: run.direct_mean,
        direct_standard_error: run.direct_se,
        cost_identity_gap: run.identity_gap,
        cost_identity_threshold: run.identity_threshold,
        cost_identity_pass: run.identity_pass,
        trajectory_gap: run.trajectory_gap,
        terminal_mean_squared_error: run.terminal_mse,
    });
    finish(report, out, started)
}
