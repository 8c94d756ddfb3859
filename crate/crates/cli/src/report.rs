//! Machine-readable run report and CSV exports.
//!
//! Every number in the report is copied from a library output, and the
//! whole body is reproducible from `(config, flags, seed)`; `timing_ms`
//! is the only field that varies between identical runs.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use minenergy::decomp::SchurReport;
use minenergy::oracle::ComparisonReport;
use minenergy::riccati::{ControllabilityReport, RiccatiSolution};
use minenergy::simulate::{
    BrownianBatch, EnergyEstimate, GramianReport, MartingaleReport, PathGrid,
};
use minenergy::{BsdeSolution64, Error, HamiltonianRun64, Result};
use serde::Serialize;

#[derive(Serialize)]
pub struct SchurSection {
    pub pass: bool,
    pub min_h3_eigenvalue: Option<f64>,
    pub min_schur_eigenvalue: f64,
}

#[derive(Serialize)]
pub struct ControllabilitySection {
    pub controllable: bool,
    pub min_eigenvalue: f64,
    pub scale: f64,
    pub threshold: f64,
    pub margin: f64,
}

#[derive(Serialize)]
pub struct GramianSection {
    pub rank: usize,
    pub full_rank: bool,
    pub eigenvalues: Vec<f64>,
    pub eigenvalue_standard_errors: Vec<f64>,
}

#[derive(Serialize)]
pub struct SteeringSection {
    pub k: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub beta0: Vec<f64>,
}

#[derive(Serialize)]
pub struct EnergySection {
    pub mean: f64,
    pub standard_error: f64,
    pub max_cost_identity_gap: f64,
}

#[derive(Serialize)]
pub struct TerminalSection {
    pub mean_squared_error: f64,
    pub standard_error: f64,
}

#[derive(Serialize)]
pub struct MartingaleSection {
    pub pass: bool,
    pub estimate: Vec<f64>,
    pub reference: Vec<f64>,
    pub standard_error: Vec<f64>,
}

#[derive(Serialize)]
pub struct OracleSection {
    pub depth: usize,
    pub tree_value: f64,
    pub kkt_residual: f64,
    pub solver_value: f64,
    pub relative_gap: f64,
    pub root_control_gap: f64,
}

#[derive(Serialize)]
pub struct StateCostSection {
    pub initial_quadratic_cost: f64,
    pub total_mean: f64,
    pub total_standard_error: f64,
    pub direct_mean: f64,
    pub direct_standard_error: f64,
    pub cost_identity_gap: f64,
    pub cost_identity_threshold: f64,
    pub cost_identity_pass: bool,
    pub trajectory_gap: f64,
    pub terminal_mean_squared_error: f64,
}

/// Everything one subcommand run produces, serialised to `report.json`.
#[derive(Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schur: Option<SchurSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controllability: Option<ControllabilitySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gramian: Option<GramianSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steering: Option<SteeringSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub martingale: Option<MartingaleSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_cost: Option<StateCostSection>,
    pub files: Vec<String>,
    pub timing_ms: u128,
}

impl RunReport {
    pub fn new(command: &str, config: &Path, digest: String, seed: u64, paths: usize) -> Self {
        RunReport {
            command: command.to_string(),
            config: config.display().to_string(),
            config_sha256: digest,
            seed,
            paths,
            steps: 0,
            state_dim: 0,
            control_dim: 0,
            schur: None,
            controllability: None,
            gramian: None,
            steering: None,
            energy: None,
            terminal: None,
            martingale: None,
            oracle: None,
            state_cost: None,
            files: Vec::new(),
            timing_ms: 0,
        }
    }

    /// Writes `report.json` into `out_dir` and returns its path.
    pub fn write(&mut self, out_dir: &Path) -> Result<PathBuf> {
        self.files.push("report.json".to_string());
        self.files.sort();
        let path = out_dir.join("report.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Numeric(format!("report serialisation: {e}")))?;
        let mut file = File::create(&path)?;
        file.write_all(body.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(path)
    }
}

impl From<&SchurReport<f64>> for SchurSection {
    fn from(r: &SchurReport<f64>) -> Self {
        SchurSection {
            pass: r.pass,
            min_h3_eigenvalue: r.min_h3_eigenvalue,
            min_schur_eigenvalue: r.min_hbar_eigenvalue,
        }
    }
}

impl From<&ControllabilityReport<f64>> for ControllabilitySection {
    fn from(r: &ControllabilityReport<f64>) -> Self {
        ControllabilitySection {
            controllable: r.controllable,
            min_eigenvalue: r.min_eigenvalue,
            scale: r.scale,
            threshold: r.threshold,
            margin: r.margin(),
        }
    }
}

impl From<&GramianReport<f64>> for GramianSection {
    fn from(r: &GramianReport<f64>) -> Self {
        GramianSection {
            rank: r.rank,
            full_rank: r.full_rank(),
            eigenvalues: r.eigenvalues.iter().copied().collect(),
            eigenvalue_standard_errors: r.eigen_standard_errors.iter().copied().collect(),
        }
    }
}

impl From<&EnergyEstimate<f64>> for EnergySection {
    fn from(e: &EnergyEstimate<f64>) -> Self {
        EnergySection {
            mean: e.mean,
            standard_error: e.standard_error,
            max_cost_identity_gap: e.max_cost_identity_gap,
        }
    }
}

impl From<&MartingaleReport<f64>> for MartingaleSection {
    fn from(r: &MartingaleReport<f64>) -> Self {
        MartingaleSection {
            pass: r.pass,
            estimate: r.estimate.iter().copied().collect(),
            reference: r.reference.iter().copied().collect(),
            standard_error: r.standard_error.iter().copied().collect(),
        }
    }
}

pub fn oracle_section(depth: usize, kkt: f64, cmp: &ComparisonReport<f64>) -> OracleSection {
    OracleSection {
        depth,
        tree_value: cmp.j_tree,
        kkt_residual: kkt,
        solver_value: cmp.j_solver,
        relative_gap: cmp.rel_gap,
        root_control_gap: cmp.root_gap,
    }
}

fn open_csv(out_dir: &Path, name: &str) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(File::create(out_dir.join(name))?))
}

fn records(
    header: &mut Vec<String>,
    label: &str,
    rows: usize,
    cols: usize,
) -> impl Iterator<Item = (usize, usize)> {
    for i in 0..rows {
        for j in 0..cols {
            header.push(format!("{label}_{i}_{j}"));
        }
    }
    (0..rows).flat_map(move |i| (0..cols).map(move |j| (i, j)))
}

/// Node-indexed controllability (or state-feedback) Riccati path,
/// row-major matrix entries per node.
pub fn write_riccati_csv(
    out_dir: &Path,
    name: &str,
    ric: &RiccatiSolution<f64>,
    grid_steps: usize,
    t_final: f64,
) -> Result<()> {
    let mut w = open_csv(out_dir, name)?;
    let n = ric.p0().nrows();
    let mut header = vec!["node".to_string(), "t".to_string()];
    let index: Vec<(usize, usize)> = records(&mut header, "p", n, n).collect();
    w.write_record(&header).map_err(csv_err)?;
    let dt = t_final / grid_steps as f64;
    for k in 0..=grid_steps {
        let p = ric.at_node(k);
        let mut row = vec![k.to_string(), (k as f64 * dt).to_string()];
        row.extend(index.iter().map(|&(i, j)| p[(i, j)].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Backward pair `(alpha, beta)` per node.
pub fn write_bsde_csv(
    out_dir: &Path,
    bsde: &BsdeSolution64,
    grid_steps: usize,
    t_final: f64,
) -> Result<()> {
    let mut w = open_csv(out_dir, "bsde.csv")?;
    let n = bsde.alpha_at(0).len();
    let mut header = vec!["node".to_string(), "t".to_string()];
    for i in 0..n {
        header.push(format!("alpha_{i}"));
    }
    for i in 0..n {
        header.push(format!("beta_{i}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    let dt = t_final / grid_steps as f64;
    for k in 0..=grid_steps {
        let mut row = vec![k.to_string(), (k as f64 * dt).to_string()];
        row.extend(bsde.alpha_at(k).iter().map(|v| v.to_string()));
        row.extend(bsde.beta_at(k).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// First `detail` closed-loop paths: state, original control, and the
/// reduced pair per node.
pub fn write_trajectories_csv(
    out_dir: &Path,
    run: &HamiltonianRun64,
    states: &PathGrid<f64>,
    batch: &BrownianBatch<f64>,
) -> Result<()> {
    let mut w = open_csv(out_dir, "trajectories.csv")?;
    let detail = run.detail_paths;
    let n = states.dim();
    let m = run.u_star.dim();
    let v_dim = run.controls.v.dim();
    let mut header = vec!["path".to_string(), "node".to_string(), "t".to_string()];
    for i in 0..n {
        header.push(format!("x_{i}"));
    }
    for i in 0..m {
        header.push(format!("u_{i}"));
    }
    for i in 0..n {
        header.push(format!("z_{i}"));
    }
    for i in 0..v_dim {
        header.push(format!("v_{i}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    let dt = batch.dt();
    for p in 0..detail {
        for k in 0..states.nodes() {
            let mut row = vec![p.to_string(), k.to_string(), (k as f64 * dt).to_string()];
            row.extend(states.at(p, k).iter().map(|v| v.to_string()));
            row.extend(run.u_star.at(p, k).iter().map(|v| v.to_string()));
            row.extend(run.controls.z.at(p, k).iter().map(|v| v.to_string()));
            row.extend(run.controls.v.at(p, k).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-path energy and terminal miss, one row per simulated path.
pub fn write_energy_csv(
    out_dir: &Path,
    energy: &EnergyEstimate<f64>,
    terminal_errors: &[f64],
) -> Result<()> {
    let mut w = open_csv(out_dir, "energy.csv")?;
    w.write_record(["path", "cost", "terminal_sq_error"])
        .map_err(csv_err)?;
    for (p, cost) in energy.per_path.iter().enumerate() {
        let term = terminal_errors.get(p).copied().unwrap_or(f64::NAN);
        w.write_record([p.to_string(), cost.to_string(), term.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Flat `metric,value` table for spreadsheet-free plotting.
pub fn write_summary_csv(out_dir: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut w = open_csv(out_dir, "summary.csv")?;
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    for (metric, value) in rows {
        w.write_record([*metric, value.as_str()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
