//! Closing the loop: once `Pbar` and `(p, q)` are known, the adjoint state
//! `Y` satisfies a plain forward linear SDE. This module assembles its
//! node-wise affine coefficients, simulates `Y` from `Y(0) = K`, and
//! reconstructs the optimal controls along every path.
//!
//! The reconstruction chain, per node:
//!
//! ```text
//! Xbar = Pbar Y + p
//! Zbar = W (T1 Pbar - Pbar Bbar') Y + W T1 p + W q,   W = [I + Pbar Hbar]^-1,
//!                                                     T1 = Pbar Hbar C
//! X  = -Xbar          Z  = C Xbar - Zbar
//! v* = H3^-1 (F' Y - H2' Z)          z* = Z           u* = M [z*; v*]
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bsde::{BsdeSolution, Coupling};
use crate::decomp::Decomposition;
use crate::error::Error;
use crate::problem::TimeGrid;
use crate::riccati::RiccatiSolution;
use crate::scalar::Real;
use crate::simulate::{acc_mat_t_vec, acc_mat_vec, BrownianBatch, PathGrid, ReducedControls};
use crate::Result;

/// Node-wise affine coefficients of the closed-loop `Y` dynamics,
/// `dY = [M_Y Y + M_p p + M_q q] dt + [N_Y Y + N_p p + N_q q] dW`,
/// together with everything needed to reconstruct the controls: the
/// `Zbar` blocks, `Pbar`, and the affine representation `p = alpha +
/// beta W` of the backward pair.
#[derive(Debug, Clone)]
pub struct ClosedLoopCoefficients<T: Real> {
    grid: TimeGrid<T>,
    n: usize,
    m_y: Vec<DMatrix<T>>,
    m_p: Vec<DMatrix<T>>,
    m_q: Vec<DMatrix<T>>,
    n_y: Vec<DMatrix<T>>,
    n_p: Vec<DMatrix<T>>,
    n_q: Vec<DMatrix<T>>,
    s_y: Vec<DMatrix<T>>,
    z_p: Vec<DMatrix<T>>,
    z_q: Vec<DMatrix<T>>,
    pbar: Vec<DMatrix<T>>,
    alpha: Vec<DVector<T>>,
    beta: Vec<DVector<T>>,
}

impl<T: Real> ClosedLoopCoefficients<T> {
    /// Time grid the coefficients live on.
    pub fn grid(&self) -> TimeGrid<T> {
        self.grid
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Drift blocks `(M_Y, M_p, M_q)` at node `k`.
    pub fn drift_blocks(&self, k: usize) -> (&DMatrix<T>, &DMatrix<T>, &DMatrix<T>) {
        (&self.m_y[k], &self.m_p[k], &self.m_q[k])
    }

    /// Diffusion blocks `(N_Y, N_p, N_q)` at node `k`.
    pub fn diffusion_blocks(&self, k: usize) -> (&DMatrix<T>, &DMatrix<T>, &DMatrix<T>) {
        (&self.n_y[k], &self.n_p[k], &self.n_q[k])
    }

    /// `Zbar` blocks `(S_Y, W T1, W)` at node `k`.
    pub fn zbar_blocks(&self, k: usize) -> (&DMatrix<T>, &DMatrix<T>, &DMatrix<T>) {
        (&self.s_y[k], &self.z_p[k], &self.z_q[k])
    }
}

/// Builds the node-wise closed-loop coefficients from the backward solves.
///
/// Callers are expected to have certified controllability already; this
/// routine only checks that all inputs share one grid.
pub fn assemble_closed_loop<T: Real>(
    dec: &Decomposition<T>,
    ric: &RiccatiSolution<T>,
    bsde: &BsdeSolution<T>,
) -> Result<ClosedLoopCoefficients<T>> {
    let steps = dec.grid.steps();
    if ric.grid().steps() != steps || bsde.grid().steps() != steps {
        return Err(Error::DimensionMismatch {
            field: "closed-loop grids".into(),
            expected: steps.to_string(),
            got: format!("{} / {}", ric.grid().steps(), bsde.grid().steps()),
        });
    }
    let n = dec.n;
    let nodes = steps + 1;
    let mut out = ClosedLoopCoefficients {
        grid: dec.grid,
        n,
        m_y: Vec::with_capacity(nodes),
        m_p: Vec::with_capacity(nodes),
        m_q: Vec::with_capacity(nodes),
        n_y: Vec::with_capacity(nodes),
        n_p: Vec::with_capacity(nodes),
        n_q: Vec::with_capacity(nodes),
        s_y: Vec::with_capacity(nodes),
        z_p: Vec::with_capacity(nodes),
        z_q: Vec::with_capacity(nodes),
        pbar: Vec::with_capacity(nodes),
        alpha: Vec::with_capacity(nodes),
        beta: Vec::with_capacity(nodes),
    };
    for k in 0..nodes {
        let seg = dec.at_node(k);
        let pbar = ric.at_node(k);
        let cpl = Coupling::new(seg, pbar)?;
        let ct = seg.c.transpose();
        let hbar = &seg.hbar;

        // Zbar blocks: Zbar = s_y Y + z_p p + z_q q.
        let s_y = &cpl.w * (&cpl.t1 * pbar - pbar * seg.bbar.transpose());
        let z_p = &cpl.w * &cpl.t1;
        let z_q = cpl.w.clone();

        // C' Hbar C and friends; cpl.hc = Hbar C.
        let ct_hc = &ct * &cpl.hc;
        let m_y = -seg.abar.transpose() - &ct_hc * pbar + &ct * hbar * &s_y;
        let m_p = -&ct_hc + &ct * hbar * &z_p;
        let m_q = &ct * hbar * &z_q;

        let n_y = -seg.bbar.transpose() + &cpl.hc * pbar - hbar * &s_y;
        let n_p = &cpl.hc - hbar * &z_p;
        let n_q = -(hbar * &z_q);

        out.m_y.push(m_y);
        out.m_p.push(m_p);
        out.m_q.push(m_q);
        out.n_y.push(n_y);
        out.n_p.push(n_p);
        out.n_q.push(n_q);
        out.s_y.push(s_y);
        out.z_p.push(z_p);
        out.z_q.push(z_q);
        out.pbar.push(pbar.clone());
        out.alpha.push(bsde.alpha_at(k).clone());
        out.beta.push(bsde.beta_at(k).clone());
    }
    Ok(out)
}

/// One simulated closed loop: optimal controls for every path, plus full
/// diagnostic trajectories (`Y`, `Xbar`, `Zbar`, `X`, `Z`, `u*`) for the
/// first `detail_paths` paths.
#[derive(Debug, Clone)]
pub struct HamiltonianRun<T: Real> {
    /// Seed of the batch the run was driven by.
    pub seed: u64,
    /// Steering initial condition used for `Y(0)`.
    pub k_vec: DVector<T>,
    /// Optimal reduced controls `(v*, z*)`, all paths.
    pub controls: ReducedControls<T>,
    /// Paths with full diagnostics below.
    pub detail_paths: usize,
    /// Adjoint state `Y`.
    pub y: PathGrid<T>,
    /// `Xbar = Pbar Y + p`.
    pub xbar: PathGrid<T>,
    /// `Zbar` from its affine blocks.
    pub zbar: PathGrid<T>,
    /// State reconstruction `X = -Xbar`.
    pub x: PathGrid<T>,
    /// Diffusion argument `Z = C Xbar - Zbar` (equals `z*`).
    pub z: PathGrid<T>,
    /// Original-coordinates control `u* = M [z*; v*]`.
    pub u_star: PathGrid<T>,
}

/// Everything reconstructed at one node of one path.
struct NodeState<T> {
    y: Vec<T>,
    p_vec: Vec<T>,
    xbar: Vec<T>,
    zbar: Vec<T>,
    z: Vec<T>,
    v: Vec<T>,
    u: Vec<T>,
}

/// Walks one path of the closed loop, invoking `sink` at every node with
/// the fully reconstructed quantities, then advancing `Y` by Euler.
fn walk_path<T: Real, F: FnMut(usize, &NodeState<T>)>(
    dec: &Decomposition<T>,
    coeffs: &ClosedLoopCoefficients<T>,
    k_vec: &DVector<T>,
    batch: &BrownianBatch<T>,
    p: usize,
    mut sink: F,
) {
    let n = dec.n;
    let v_dim = dec.v_dim();
    let steps = batch.steps();
    let dt = batch.dt();
    let mut st = NodeState {
        y: k_vec.as_slice().to_vec(),
        p_vec: vec![T::zero(); n],
        xbar: vec![T::zero(); n],
        zbar: vec![T::zero(); n],
        z: vec![T::zero(); n],
        v: vec![T::zero(); v_dim],
        u: vec![T::zero(); dec.m],
    };
    let mut zv = vec![T::zero(); dec.m];
    let mut fty = vec![T::zero(); v_dim];
    let mut drift = vec![T::zero(); n];
    let mut diff = vec![T::zero(); n];
    let mut w_run = T::zero();
    let dws = batch.increments(p);

    for k in 0..=steps {
        let seg = dec.at_node(k);
        let alpha = &coeffs.alpha[k];
        let beta = &coeffs.beta[k];
        // p = alpha + beta W, q = beta.
        for i in 0..n {
            st.p_vec[i] = alpha[i] + beta[i] * w_run;
        }
        st.xbar.fill(T::zero());
        acc_mat_vec(&mut st.xbar, &coeffs.pbar[k], &st.y, T::one());
        for i in 0..n {
            st.xbar[i] += st.p_vec[i];
        }
        st.zbar.fill(T::zero());
        acc_mat_vec(&mut st.zbar, &coeffs.s_y[k], &st.y, T::one());
        acc_mat_vec(&mut st.zbar, &coeffs.z_p[k], &st.p_vec, T::one());
        acc_mat_vec(&mut st.zbar, &coeffs.z_q[k], beta.as_slice(), T::one());
        // Z = C Xbar - Zbar.
        st.z.fill(T::zero());
        acc_mat_vec(&mut st.z, &seg.c, &st.xbar, T::one());
        for i in 0..n {
            st.z[i] -= st.zbar[i];
        }
        // v* = H3^-1 F' Y - (H3^-1 H2') Z.
        fty.fill(T::zero());
        acc_mat_t_vec(&mut fty, &seg.f, &st.y, T::one());
        st.v.fill(T::zero());
        acc_mat_vec(&mut st.v, &seg.h3_inv, &fty, T::one());
        acc_mat_vec(&mut st.v, &seg.h3_inv_h2t, &st.z, -T::one());
        // u* = M [z*; v*].
        zv[..n].copy_from_slice(&st.z);
        zv[n..].copy_from_slice(&st.v);
        st.u.fill(T::zero());
        acc_mat_vec(&mut st.u, &seg.m_mat, &zv, T::one());

        sink(k, &st);

        if k < steps {
            drift.fill(T::zero());
            diff.fill(T::zero());
            acc_mat_vec(&mut drift, &coeffs.m_y[k], &st.y, T::one());
            acc_mat_vec(&mut drift, &coeffs.m_p[k], &st.p_vec, T::one());
            acc_mat_vec(&mut drift, &coeffs.m_q[k], beta.as_slice(), T::one());
            acc_mat_vec(&mut diff, &coeffs.n_y[k], &st.y, T::one());
            acc_mat_vec(&mut diff, &coeffs.n_p[k], &st.p_vec, T::one());
            acc_mat_vec(&mut diff, &coeffs.n_q[k], beta.as_slice(), T::one());
            let dw = dws[k];
            for i in 0..n {
                st.y[i] += drift[i] * dt + diff[i] * dw;
            }
            w_run += dw;
        }
    }
}

/// Simulates the closed loop on every path of `batch` from `Y(0) = k_vec`
/// and reconstructs the optimal controls. Full per-node diagnostics are
/// kept for the first `detail_paths` paths only — controls for all paths.
pub fn run_hamiltonian<T: Real>(
    dec: &Decomposition<T>,
    coeffs: &ClosedLoopCoefficients<T>,
    k_vec: &DVector<T>,
    batch: &BrownianBatch<T>,
    detail_paths: usize,
) -> Result<HamiltonianRun<T>> {
    if coeffs.grid.steps() != batch.steps() {
        return Err(Error::DimensionMismatch {
            field: "batch steps".into(),
            expected: coeffs.grid.steps().to_string(),
            got: batch.steps().to_string(),
        });
    }
    if k_vec.len() != dec.n {
        return Err(Error::DimensionMismatch {
            field: "k_vec".into(),
            expected: dec.n.to_string(),
            got: k_vec.len().to_string(),
        });
    }
    let n = dec.n;
    let v_dim = dec.v_dim();
    let steps = batch.steps();
    let paths = batch.paths();
    let detail = detail_paths.min(paths);

    let mut controls = ReducedControls::zeros(paths, steps, v_dim, n);
    // Pass 1: controls for every path, in parallel.
    controls
        .v
        .path_chunks_mut()
        .zip(controls.z.path_chunks_mut())
        .enumerate()
        .for_each(|(p, (vp, zp))| {
            walk_path(dec, coeffs, k_vec, batch, p, |k, st| {
                vp[k * v_dim..(k + 1) * v_dim].copy_from_slice(&st.v);
                zp[k * n..(k + 1) * n].copy_from_slice(&st.z);
            });
        });

    // Pass 2: full diagnostics for the detail subset, sequential (cheap).
    let nodes = steps + 1;
    let mut run = HamiltonianRun {
        seed: batch.seed(),
        k_vec: k_vec.clone(),
        controls,
        detail_paths: detail,
        y: PathGrid::zeros(detail, nodes, n),
        xbar: PathGrid::zeros(detail, nodes, n),
        zbar: PathGrid::zeros(detail, nodes, n),
        x: PathGrid::zeros(detail, nodes, n),
        z: PathGrid::zeros(detail, nodes, n),
        u_star: PathGrid::zeros(detail, nodes, dec.m),
    };
    for p in 0..detail {
        // Split borrows: walk writes into each grid through at_mut.
        let HamiltonianRun {
            y,
            xbar,
            zbar,
            x,
            z,
            u_star,
            ..
        } = &mut run;
        walk_path(dec, coeffs, k_vec, batch, p, |k, st| {
            y.at_mut(p, k).copy_from_slice(&st.y);
            xbar.at_mut(p, k).copy_from_slice(&st.xbar);
            zbar.at_mut(p, k).copy_from_slice(&st.zbar);
            for i in 0..n {
                x.at_mut(p, k)[i] = -st.xbar[i];
            }
            z.at_mut(p, k).copy_from_slice(&st.z);
            u_star.at_mut(p, k).copy_from_slice(&st.u);
        });
    }
    Ok(run)
}
