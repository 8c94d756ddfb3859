//! Binomial-tree ground truth for the steering problem.
//!
//! The continuous problem is restated on a non-recombining binary tree:
//! each step moves with `dW = +sqrt(dt)` or `-sqrt(dt)`, probability `1/2`
//! each, and the almost-sure terminal condition becomes one equality per
//! leaf. The result is a finite equality-constrained convex QP
//!
//! ```text
//! min  sum_k sum_nodes  2^-k dt ([z; v]' H [z; v] + x' Q x)
//! s.t. x_child = A_pm x + B_pm [z; v]   on every edge,
//!      x_leaf  = xi_leaf               on every leaf,
//!      x_root  = x0,
//! ```
//!
//! solved exactly by eliminating controls level by level: each node's
//! cost-to-go is a quadratic form valid on an affine face `T x = d`, the
//! face constraints of the two children are absorbed into the node's
//! control through a rank-revealing SVD, and whatever the control cannot
//! influence is passed up as a face constraint on the node's own state.
//! Inconsistent constraints surface as `Infeasible` (the discrete image of
//! a system that is not exactly controllable).
//!
//! The sweep yields the optimal value, controls, and states; a top-down
//! pass recovers the Lagrange multiplier of every edge so that the
//! first-order conditions of the *original* QP can be re-checked term by
//! term. That residual, reported as `kkt_residual`, certifies the tree
//! optimum independently of the elimination order, and with `H` positive
//! definite it certifies global optimality.
//!
//! The tree also hosts exact (not sampled) versions of the two
//! orthogonality identities used by the Monte-Carlo checks: with the
//! one-step propagator `S = [I + dt (A - G C)]^-1` the weighted control
//! differences of any two feasible control sets cancel to rounding.

use nalgebra::{DMatrix, DVector, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomp::{build_m_path, decompose, orthonormal_complement};
use crate::error::Error;
use crate::linalg::symmetrized;
use crate::problem::{MatrixPath, ProblemSpec, TimeGrid};
use crate::scalar::{real, Real};
use crate::simulate::GammaChoice;
use crate::tol;
use crate::Result;

/// Controls indexed `[level][node]`, each entry the stacked `[z; v]`.
pub type TreeControls<T> = Vec<Vec<DVector<T>>>;

/// Coefficient snapshots shared by every node of one tree level.
#[derive(Debug, Clone)]
struct LevelBlocks<T: Real> {
    /// Reduced cost `[[H1, H2], [H2', H3]]` in the `[z; v]` ordering.
    h: DMatrix<T>,
    /// One-step transitions `I + dt A +- sqrt(dt) C`.
    a_plus: DMatrix<T>,
    a_minus: DMatrix<T>,
    /// Control maps `[dt G +- sqrt(dt) I | dt F]`.
    b_plus: DMatrix<T>,
    b_minus: DMatrix<T>,
    /// Raw blocks kept for the exact identity checks and control mapping.
    a: DMatrix<T>,
    c: DMatrix<T>,
    g: DMatrix<T>,
    f: DMatrix<T>,
    h1: DMatrix<T>,
    h2: DMatrix<T>,
    m_mat: DMatrix<T>,
    /// One-step propagator `[I + dt (A - G C)]^-1`.
    s_prop: DMatrix<T>,
    /// Symmetrised state cost on the step, when present.
    q: Option<DMatrix<T>>,
}

/// The steering problem discretised on a non-recombining binary tree.
#[derive(Debug, Clone)]
pub struct TreeProblem<T: Real> {
    depth: usize,
    delta: T,
    n: usize,
    v_dim: usize,
    levels: Vec<LevelBlocks<T>>,
    x0: DVector<T>,
    leaf_targets: Vec<DVector<T>>,
    /// `1 + |x0| + max |xi|`, the scale for feasibility decisions.
    target_scale: T,
}

impl<T: Real> TreeProblem<T> {
    /// Discretises `spec` at depth `depth` with the canonical factor of `D`.
    pub fn from_spec(spec: &ProblemSpec<T>, depth: usize) -> Result<Self> {
        let m_path = build_m_path(spec)?;
        Self::with_factor(spec, depth, &m_path)
    }

    /// Same, with a caller-supplied factor path (`D M = [I 0]` is
    /// certified by the decomposition). The optimal value must not depend
    /// on this choice; tests rely on that invariance.
    pub fn with_factor(
        spec: &ProblemSpec<T>,
        depth: usize,
        m_path: &MatrixPath<T>,
    ) -> Result<Self> {
        if depth == 0 || depth > tol::MAX_TREE_DEPTH as usize {
            return Err(Error::Invalid(format!(
                "tree depth must be in 1..={}, got {depth}",
                tol::MAX_TREE_DEPTH
            )));
        }
        spec.ensure_valid()?;
        // Re-grid the problem so coefficient lookups land on level times.
        let mut tree_spec = spec.clone();
        tree_spec.grid = TimeGrid::new(spec.grid.t_final(), depth)?;
        let dec = decompose(&tree_spec, m_path)?;
        let delta = tree_spec.grid.dt();
        let sqrt_d = delta.sqrt();
        let n = spec.n;

        let mut levels = Vec::with_capacity(depth);
        for k in 0..depth {
            let seg = dec.at_node(k);
            let t_k = tree_spec.grid.node_time(k);
            let v_dim = seg.f.ncols();
            let m_red = n + v_dim;

            let mut h = DMatrix::zeros(m_red, m_red);
            h.view_mut((0, 0), (n, n)).copy_from(&seg.h1);
            h.view_mut((0, n), (n, v_dim)).copy_from(&seg.h2);
            h.view_mut((n, 0), (v_dim, n))
                .copy_from(&seg.h2.transpose());
            h.view_mut((n, n), (v_dim, v_dim)).copy_from(&seg.h3);

            let eye = DMatrix::identity(n, n);
            let a_plus = &eye + &seg.a * delta + &seg.c * sqrt_d;
            let a_minus = &eye + &seg.a * delta - &seg.c * sqrt_d;
            let mut b_plus = DMatrix::zeros(n, m_red);
            let mut b_minus = DMatrix::zeros(n, m_red);
            b_plus
                .view_mut((0, 0), (n, n))
                .copy_from(&(&seg.g * delta + &eye * sqrt_d));
            b_minus
                .view_mut((0, 0), (n, n))
                .copy_from(&(&seg.g * delta - &eye * sqrt_d));
            b_plus
                .view_mut((0, n), (n, v_dim))
                .copy_from(&(&seg.f * delta));
            b_minus
                .view_mut((0, n), (n, v_dim))
                .copy_from(&(&seg.f * delta));

            let step = &eye + (&seg.a - &seg.g * &seg.c) * delta;
            let s_prop = step.lu().try_inverse().ok_or_else(|| Error::SingularSystem {
                context: format!("tree propagator step at level {k}"),
            })?;

            let q = spec.q.as_ref().map(|qp| symmetrized(qp.at_time(t_k)));

            levels.push(LevelBlocks {
                h,
                a_plus,
                a_minus,
                b_plus,
                b_minus,
                a: seg.a.clone(),
                c: seg.c.clone(),
                g: seg.g.clone(),
                f: seg.f.clone(),
                h1: seg.h1.clone(),
                h2: seg.h2.clone(),
                m_mat: seg.m_mat.clone(),
                s_prop,
                q,
            });
        }

        let leaves = 1usize << depth;
        let mut leaf_targets = Vec::with_capacity(leaves);
        for i in 0..leaves {
            leaf_targets.push(spec.target.realise(leaf_brownian_value(i, depth, sqrt_d)));
        }

        let mut tree = Self {
            depth,
            delta,
            n,
            v_dim: spec.m - n,
            levels,
            x0: spec.x0.clone(),
            leaf_targets,
            target_scale: T::one(),
        };
        tree.rescale();
        Ok(tree)
    }

    /// Replaces the affine leaf targets with arbitrary per-leaf values.
    pub fn with_leaf_targets(mut self, targets: Vec<DVector<T>>) -> Result<Self> {
        if targets.len() != self.leaves() {
            return Err(Error::Invalid(format!(
                "expected {} leaf targets, got {}",
                self.leaves(),
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|t| t.len() != self.n) {
            return Err(Error::DimensionMismatch {
                field: "leaf target".into(),
                expected: self.n.to_string(),
                got: bad.len().to_string(),
            });
        }
        self.leaf_targets = targets;
        self.rescale();
        Ok(self)
    }

    fn rescale(&mut self) {
        let mut s = self.x0.amax();
        for t in &self.leaf_targets {
            if !t.is_empty() {
                s = s.max(t.amax());
            }
        }
        self.target_scale = T::one() + s;
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Dimension of one stacked control `[z; v]`.
    pub fn control_dim(&self) -> usize {
        self.n + self.v_dim
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn leaf_targets(&self) -> &[DVector<T>] {
        &self.leaf_targets
    }

    /// Brownian value accumulated on the way to leaf `i` (bit `j` of `i`,
    /// most significant first, records a down move at step `j`).
    pub fn leaf_brownian(&self, i: usize) -> T {
        leaf_brownian_value(i, self.depth, self.delta.sqrt())
    }

    /// Original-coordinate control `u = M [z; v]` at a node of level `k`.
    pub fn original_control(&self, k: usize, zv: &DVector<T>) -> DVector<T> {
        &self.levels[k].m_mat * zv
    }
}

fn leaf_brownian_value<T: Real>(i: usize, depth: usize, sqrt_d: T) -> T {
    let mut w = T::zero();
    for j in 0..depth {
        if (i >> (depth - 1 - j)) & 1 == 0 {
            w += sqrt_d;
        } else {
            w -= sqrt_d;
        }
    }
    w
}

/// Rank-revealing SVD split `mat = U1 diag(sig1) V1'` with an orthonormal
/// basis `U2` of the left null space.
struct SvdSplit<T: Real> {
    u1: DMatrix<T>,
    sig1: DVector<T>,
    v1: DMatrix<T>,
    u2: DMatrix<T>,
}

fn svd_split<T: Real>(mat: &DMatrix<T>) -> SvdSplit<T> {
    let rows = mat.nrows();
    let cols = mat.ncols();
    if rows == 0 || cols == 0 {
        let u1 = DMatrix::zeros(rows, 0);
        let u2 = orthonormal_complement(&u1);
        return SvdSplit {
            u1,
            sig1: DVector::zeros(0),
            v1: DMatrix::zeros(cols, 0),
            u2,
        };
    }
    let svd = SVD::new(mat.clone(), true, true);
    let sv = &svd.singular_values;
    let smax = sv[0];
    let eps = real::<T>(tol::EPS_RANK);
    let rank = sv.iter().filter(|s| **s > eps * smax).count();
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let u1 = u.columns(0, rank).into_owned();
    let v1 = v_t.rows(0, rank).transpose();
    let sig1 = DVector::from_iterator(rank, sv.iter().take(rank).copied());
    let u2 = orthonormal_complement(&u1);
    SvdSplit { u1, sig1, v1, u2 }
}

/// `diag(sig)^-1 m`, row by row.
fn scale_rows_inv<T: Real>(m: &DMatrix<T>, sig: &DVector<T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (i, s) in sig.iter().enumerate() {
        for j in 0..out.ncols() {
            out[(i, j)] /= *s;
        }
    }
    out
}

/// Per-node data from the upward sweep: the cost-to-go quadratic on the
/// node's face, the affine control law, and the SVD factors needed to
/// reconstruct multipliers on the way back down.
#[derive(Debug, Clone)]
struct NodeDp<T: Real> {
    /// Face `T x = d` with orthonormal rows.
    t_red: DMatrix<T>,
    d_red: DVector<T>,
    /// Cost-to-go `x' S x + 2 c' x + r` on the face.
    s_mat: DMatrix<T>,
    c_vec: DVector<T>,
    r_val: T,
    /// Control law `u(x) = u0 + Ux x` and the matching multiplier law
    /// `m(x) = m0 + Mx x` of the reduced constraint `V1' u = e(x)`.
    u0: DVector<T>,
    ux: DMatrix<T>,
    m0: DVector<T>,
    mx: DMatrix<T>,
    /// SVD factors of the stacked child constraint `[T+ B+; T- B-]`.
    u1: DMatrix<T>,
    sig1: DVector<T>,
    u2: DMatrix<T>,
    /// SVD factors of the passed-up constraint before row reduction.
    ut1: DMatrix<T>,
    st1: DVector<T>,
    /// Rows the `+` child contributes to the stack.
    rows_plus: usize,
}

impl<T: Real> NodeDp<T> {
    fn leaf(target: &DVector<T>) -> Self {
        let n = target.len();
        Self {
            t_red: DMatrix::identity(n, n),
            d_red: target.clone(),
            s_mat: DMatrix::zeros(n, n),
            c_vec: DVector::zeros(n),
            r_val: T::zero(),
            u0: DVector::zeros(0),
            ux: DMatrix::zeros(0, n),
            m0: DVector::zeros(0),
            mx: DMatrix::zeros(0, n),
            u1: DMatrix::zeros(0, 0),
            sig1: DVector::zeros(0),
            u2: DMatrix::zeros(0, 0),
            ut1: DMatrix::zeros(0, 0),
            st1: DVector::zeros(0),
            rows_plus: 0,
        }
    }
}

fn absorb_children<T: Real>(
    lb: &LevelBlocks<T>,
    delta: T,
    child_plus: &NodeDp<T>,
    child_minus: &NodeDp<T>,
    tilt: Option<&DVector<T>>,
    target_scale: T,
    level: usize,
    index: usize,
) -> Result<NodeDp<T>> {
    let n = lb.a_plus.nrows();
    let m = lb.b_plus.ncols();
    let half = real::<T>(0.5);

    // Children enter the conditional Bellman step with weight 1/2 each.
    let sp = &child_plus.s_mat * half;
    let sm = &child_minus.s_mat * half;
    let cp = &child_plus.c_vec * half;
    let cm = &child_minus.c_vec * half;
    let r_tail = (child_plus.r_val + child_minus.r_val) * half;

    let bp_t_sp = lb.b_plus.transpose() * &sp;
    let bm_t_sm = lb.b_minus.transpose() * &sm;
    let p_mat = symmetrized(
        &(&lb.h * delta + &bp_t_sp * &lb.b_plus + &bm_t_sm * &lb.b_minus),
    );
    let l_x = &bp_t_sp * &lb.a_plus + &bm_t_sm * &lb.a_minus;
    let mut l0 = lb.b_plus.transpose() * &cp + lb.b_minus.transpose() * &cm;
    if let Some(g) = tilt {
        l0 += g * (delta * half);
    }

    // Stack both children's faces at the post-step states.
    let rows_plus = child_plus.t_red.nrows();
    let rows_minus = child_minus.t_red.nrows();
    let r_c = rows_plus + rows_minus;
    let mut r_stack = DMatrix::zeros(r_c, m);
    let mut ta_stack = DMatrix::zeros(r_c, n);
    let mut d_stack = DVector::zeros(r_c);
    if rows_plus > 0 {
        r_stack
            .view_mut((0, 0), (rows_plus, m))
            .copy_from(&(&child_plus.t_red * &lb.b_plus));
        ta_stack
            .view_mut((0, 0), (rows_plus, n))
            .copy_from(&(&child_plus.t_red * &lb.a_plus));
        d_stack.rows_mut(0, rows_plus).copy_from(&child_plus.d_red);
    }
    if rows_minus > 0 {
        r_stack
            .view_mut((rows_plus, 0), (rows_minus, m))
            .copy_from(&(&child_minus.t_red * &lb.b_minus));
        ta_stack
            .view_mut((rows_plus, 0), (rows_minus, n))
            .copy_from(&(&child_minus.t_red * &lb.a_minus));
        d_stack
            .rows_mut(rows_plus, rows_minus)
            .copy_from(&child_minus.d_red);
    }

    let split = svd_split(&r_stack);
    let rank = split.sig1.len();

    // Solvable part of the stack becomes V1' u = e(x); the rest cannot be
    // met by this control and is passed up as a face constraint on x.
    let e0 = scale_rows_inv(
        &DMatrix::from_column_slice(rank, 1, (split.u1.transpose() * &d_stack).as_slice()),
        &split.sig1,
    );
    let e_x = -scale_rows_inv(&(split.u1.transpose() * &ta_stack), &split.sig1);

    let dim = m + rank;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (m, m)).copy_from(&p_mat);
    if rank > 0 {
        kkt.view_mut((0, m), (m, rank)).copy_from(&split.v1);
        kkt.view_mut((m, 0), (rank, m))
            .copy_from(&split.v1.transpose());
    }
    let mut rhs = DMatrix::zeros(dim, n + 1);
    for i in 0..m {
        rhs[(i, 0)] = -l0[i];
        for j in 0..n {
            rhs[(i, j + 1)] = -l_x[(i, j)];
        }
    }
    for i in 0..rank {
        rhs[(m + i, 0)] = e0[(i, 0)];
        for j in 0..n {
            rhs[(m + i, j + 1)] = e_x[(i, j)];
        }
    }
    let sol = kkt.lu().solve(&rhs).ok_or_else(|| Error::SingularSystem {
        context: format!("tree KKT solve at level {level}, node {index}"),
    })?;
    let u0 = sol.view((0, 0), (m, 1)).column(0).into_owned();
    let ux = sol.view((0, 1), (m, n)).into_owned();
    let m0 = sol.view((m, 0), (rank, 1)).column(0).into_owned();
    let mx = sol.view((m, 1), (rank, n)).into_owned();

    // Cost-to-go after substituting the control law.
    let a_tp = &lb.a_plus + &lb.b_plus * &ux;
    let a_tm = &lb.a_minus + &lb.b_minus * &ux;
    let b_tp = &lb.b_plus * &u0;
    let b_tm = &lb.b_minus * &u0;
    let hu0 = &lb.h * &u0;
    let sp_btp = &sp * &b_tp;
    let sm_btm = &sm * &b_tm;

    let mut s_new = (ux.transpose() * &lb.h * &ux) * delta
        + a_tp.transpose() * &sp * &a_tp
        + a_tm.transpose() * &sm * &a_tm;
    if let Some(q) = &lb.q {
        s_new += q * delta;
    }
    let s_new = symmetrized(&s_new);

    let mut c_new = (ux.transpose() * &hu0) * delta
        + a_tp.transpose() * (&sp_btp + &cp)
        + a_tm.transpose() * (&sm_btm + &cm);
    if let Some(g) = tilt {
        c_new += ux.transpose() * g * (delta * half);
    }

    let two = real::<T>(2.0);
    let mut r_new = hu0.dot(&u0) * delta
        + sp_btp.dot(&b_tp)
        + sm_btm.dot(&b_tm)
        + (cp.dot(&b_tp) + cm.dot(&b_tm)) * two
        + r_tail;
    if let Some(g) = tilt {
        r_new += g.dot(&u0) * delta;
    }

    // Pass up whatever the control could not absorb, reduced to
    // independent rows; inconsistent rows mean no state anywhere can
    // satisfy both children.
    let t_pre = split.u2.transpose() * &ta_stack;
    let d_pre = split.u2.transpose() * &d_stack;
    let (t_red, d_red, ut1, st1) = if t_pre.nrows() == 0 {
        (
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::zeros(0, 0),
            DVector::zeros(0),
        )
    } else {
        let ts = svd_split(&t_pre);
        if ts.u2.ncols() > 0 {
            let violation = (ts.u2.transpose() * &d_pre).amax();
            if violation > real::<T>(tol::TOL_TREE_FEASIBLE) * target_scale {
                return Err(Error::Infeasible {
                    violation: violation.to_f64().unwrap_or(f64::NAN),
                    location: format!("tree level {level}, node {index}"),
                });
            }
        }
        let rr = ts.sig1.len();
        let d_red = scale_rows_inv(
            &DMatrix::from_column_slice(rr, 1, (ts.u1.transpose() * &d_pre).as_slice()),
            &ts.sig1,
        )
        .column(0)
        .into_owned();
        (ts.v1.transpose(), d_red, ts.u1, ts.sig1)
    };

    Ok(NodeDp {
        t_red,
        d_red,
        s_mat: s_new,
        c_vec: c_new,
        r_val: r_new,
        u0,
        ux,
        m0,
        mx,
        u1: split.u1,
        sig1: split.sig1,
        u2: split.u2,
        ut1,
        st1,
        rows_plus,
    })
}

/// Exact solution of the tree QP.
#[derive(Debug, Clone)]
pub struct TreeSolution<T: Real> {
    /// Optimal value.
    pub j_tree: T,
    /// Relative residual of the original first-order conditions: leaf
    /// feasibility, control stationarity, and costate recursion.
    pub kkt_residual: T,
    controls: TreeControls<T>,
    states: Vec<Vec<DVector<T>>>,
    leaf_multipliers: Vec<DVector<T>>,
}

impl<T: Real> TreeSolution<T> {
    pub fn controls(&self) -> &TreeControls<T> {
        &self.controls
    }

    pub fn into_controls(self) -> TreeControls<T> {
        self.controls
    }

    pub fn state(&self, level: usize, node: usize) -> &DVector<T> {
        &self.states[level][node]
    }

    pub fn leaf_multipliers(&self) -> &[DVector<T>] {
        &self.leaf_multipliers
    }

    /// Martingale part of the root control.
    pub fn root_z(&self) -> DVector<T> {
        let n = self.states[0][0].len();
        self.controls[0][0].rows(0, n).into_owned()
    }

    /// Free part of the root control.
    pub fn root_v(&self) -> DVector<T> {
        let n = self.states[0][0].len();
        let m = self.controls[0][0].len();
        self.controls[0][0].rows(n, m - n).into_owned()
    }
}

/// Solves the tree QP exactly; see the module docs for the method.
pub fn solve_tree_qp<T: Real>(tree: &TreeProblem<T>) -> Result<TreeSolution<T>> {
    solve_with_tilt(tree, None)
}

fn solve_with_tilt<T: Real>(
    tree: &TreeProblem<T>,
    tilts: Option<&TreeControls<T>>,
) -> Result<TreeSolution<T>> {
    let depth = tree.depth;

    // Upward sweep, leaves first.
    let mut dp: Vec<Vec<NodeDp<T>>> = vec![Vec::new(); depth + 1];
    dp[depth] = tree.leaf_targets.iter().map(NodeDp::leaf).collect();
    for k in (0..depth).rev() {
        let mut row = Vec::with_capacity(1 << k);
        for i in 0..(1 << k) {
            row.push(absorb_children(
                &tree.levels[k],
                tree.delta,
                &dp[k + 1][2 * i],
                &dp[k + 1][2 * i + 1],
                tilts.map(|t| &t[k][i]),
                tree.target_scale,
                k,
                i,
            )?);
        }
        dp[k] = row;
    }

    // The residual face at the root must accept the prescribed x0.
    let root = &dp[0][0];
    if root.t_red.nrows() > 0 {
        let violation = (&root.t_red * &tree.x0 - &root.d_red).amax();
        if violation > real::<T>(tol::TOL_TREE_FEASIBLE) * tree.target_scale {
            return Err(Error::Infeasible {
                violation: violation.to_f64().unwrap_or(f64::NAN),
                location: "tree root".into(),
            });
        }
    }
    let two = real::<T>(2.0);
    let j_tree = (&root.s_mat * &tree.x0).dot(&tree.x0)
        + root.c_vec.dot(&tree.x0) * two
        + root.r_val;

    // Forward pass: states and controls.
    let mut states: Vec<Vec<DVector<T>>> = Vec::with_capacity(depth + 1);
    let mut controls: TreeControls<T> = Vec::with_capacity(depth);
    states.push(vec![tree.x0.clone()]);
    for k in 0..depth {
        let lb = &tree.levels[k];
        let mut next = Vec::with_capacity(1 << (k + 1));
        let mut us = Vec::with_capacity(1 << k);
        for i in 0..(1 << k) {
            let x = &states[k][i];
            let u = &dp[k][i].u0 + &dp[k][i].ux * x;
            next.push(&lb.a_plus * x + &lb.b_plus * &u);
            next.push(&lb.a_minus * x + &lb.b_minus * &u);
            us.push(u);
        }
        states.push(next);
        controls.push(us);
    }

    // Top-down multiplier recovery. tau is the face multiplier handed to a
    // node by its parent (zero at the root); on the way down each node
    // turns its conditional constraint multiplier into the global edge
    // multipliers psi of its two children.
    let mut psi: Vec<Vec<DVector<T>>> = vec![Vec::new(); depth + 1];
    let mut tau: Vec<DVector<T>> = vec![DVector::zeros(dp[0][0].t_red.nrows())];
    let mut pi = T::one();
    for k in 0..depth {
        let half_pi = pi * real::<T>(0.5);
        let mut next_tau = Vec::with_capacity(1 << (k + 1));
        let mut next_psi = Vec::with_capacity(1 << (k + 1));
        for i in 0..(1 << k) {
            let node = &dp[k][i];
            let x = &states[k][i];
            let mu_cond = (&node.m0 + &node.mx * x) * two;
            let r_c = node.u1.nrows();
            let mut lam = DVector::zeros(r_c);
            for (j, s) in node.sig1.iter().enumerate() {
                let w = mu_cond[j] / *s;
                lam.axpy(w, &node.u1.column(j).into_owned(), T::one());
            }
            if !node.st1.is_empty() {
                // zeta = -(1/pi) Ut1 diag(st1)^-1 tau.
                let t = &tau[i];
                for (j, s) in node.st1.iter().enumerate() {
                    let w = -t[j] / (*s * pi);
                    let col = node.ut1.column(j).into_owned();
                    for (row, cv) in col.iter().enumerate() {
                        lam += node.u2.column(row).into_owned() * (*cv * w);
                    }
                }
            }
            for (child, range) in [
                (2 * i, 0..node.rows_plus),
                (2 * i + 1, node.rows_plus..r_c),
            ] {
                let t_child = DVector::from_iterator(
                    range.len(),
                    range.clone().map(|r| -pi * lam[r]),
                );
                let cn = &dp[k + 1][child];
                let xc = &states[k + 1][child];
                let p = (&cn.s_mat * xc + &cn.c_vec) * (-two * half_pi)
                    + cn.t_red.transpose() * &t_child;
                next_psi.push(p);
                next_tau.push(t_child);
            }
        }
        psi[k + 1] = next_psi;
        tau = next_tau;
        pi = half_pi;
    }
    let leaf_multipliers: Vec<DVector<T>> = psi[depth].iter().map(|p| -p).collect();

    // Independent re-check of the original first-order conditions.
    let mut max_res = T::zero();
    let mut max_term = T::one();
    let mut track = |res: T, term: T| {
        max_res = max_res.max(res);
        max_term = max_term.max(term);
    };
    // Leaf feasibility.
    for (i, x) in states[depth].iter().enumerate() {
        track(
            (x - &tree.leaf_targets[i]).amax(),
            tree.target_scale,
        );
    }
    // Control stationarity and costate recursion.
    let mut pi = T::one();
    for k in 0..depth {
        let lb = &tree.levels[k];
        for i in 0..(1 << k) {
            let u = &controls[k][i];
            let x = &states[k][i];
            let pp = &psi[k + 1][2 * i];
            let pm = &psi[k + 1][2 * i + 1];
            let mut grad_u = (&lb.h * u) * (two * pi * tree.delta);
            if let Some(t) = tilts.map(|t| &t[k][i]) {
                grad_u += t * (pi * tree.delta);
            }
            let res_u = &grad_u - lb.b_plus.transpose() * pp - lb.b_minus.transpose() * pm;
            track(res_u.amax(), grad_u.amax());
            let psi_own = if k == 0 {
                // The root multiplier is free; the costate identity
                // defines it, so recompute it the same way the recursion
                // would and check consistency of the two expressions.
                (&dp[0][0].s_mat * x + &dp[0][0].c_vec) * (-two)
                    + dp[0][0].t_red.transpose() * &DVector::zeros(dp[0][0].t_red.nrows())
            } else {
                psi[k][i].clone()
            };
            let mut res_x = &psi_own - lb.a_plus.transpose() * pp - lb.a_minus.transpose() * pm;
            if let Some(q) = &lb.q {
                res_x += (q * x) * (two * pi * tree.delta);
            }
            track(res_x.amax(), psi_own.amax());
        }
        pi *= real::<T>(0.5);
    }
    let kkt_residual = max_res / max_term;

    Ok(TreeSolution {
        j_tree,
        kkt_residual,
        controls,
        states,
        leaf_multipliers,
    })
}

/// Optimal controls of a randomly tilted copy of the tree QP: same
/// constraint set, different objective, hence a feasible point that is
/// almost surely not optimal for the original cost.
pub fn feasible_competitor<T: Real>(tree: &TreeProblem<T>, seed: u64) -> Result<TreeControls<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = tree.control_dim();
    let scale = tree.target_scale.to_f64().unwrap_or(1.0);
    let mut tilts: TreeControls<T> = Vec::with_capacity(tree.depth);
    for k in 0..tree.depth {
        let mut row = Vec::with_capacity(1 << k);
        for _ in 0..(1 << k) {
            row.push(DVector::from_iterator(
                m,
                (0..m).map(|_| real::<T>(rng.gen_range(-1.0..1.0) * scale)),
            ));
        }
        tilts.push(row);
    }
    Ok(solve_with_tilt(tree, Some(&tilts))?.into_controls())
}

fn check_controls_shape<T: Real>(tree: &TreeProblem<T>, controls: &TreeControls<T>) -> Result<()> {
    if controls.len() != tree.depth {
        return Err(Error::Invalid(format!(
            "expected {} control levels, got {}",
            tree.depth,
            controls.len()
        )));
    }
    for (k, row) in controls.iter().enumerate() {
        if row.len() != (1 << k) {
            return Err(Error::Invalid(format!(
                "level {k} must hold {} controls, got {}",
                1 << k,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|u| u.len() != tree.control_dim()) {
            return Err(Error::DimensionMismatch {
                field: "tree control".into(),
                expected: tree.control_dim().to_string(),
                got: bad.len().to_string(),
            });
        }
    }
    Ok(())
}

fn forward_states<T: Real>(
    tree: &TreeProblem<T>,
    controls: &TreeControls<T>,
) -> Vec<Vec<DVector<T>>> {
    let mut states = Vec::with_capacity(tree.depth + 1);
    states.push(vec![tree.x0.clone()]);
    for k in 0..tree.depth {
        let lb = &tree.levels[k];
        let mut next = Vec::with_capacity(1 << (k + 1));
        for i in 0..(1 << k) {
            let x = &states[k][i];
            let u = &controls[k][i];
            next.push(&lb.a_plus * x + &lb.b_plus * u);
            next.push(&lb.a_minus * x + &lb.b_minus * u);
        }
        states.push(next);
    }
    states
}

fn ensure_leaves_hit<T: Real>(tree: &TreeProblem<T>, states: &[Vec<DVector<T>>]) -> Result<T> {
    let mut worst = T::zero();
    for (i, x) in states[tree.depth].iter().enumerate() {
        worst = worst.max((x - &tree.leaf_targets[i]).amax());
    }
    if worst > real::<T>(tol::TOL_TREE_FEASIBLE) * tree.target_scale {
        return Err(Error::Infeasible {
            violation: worst.to_f64().unwrap_or(f64::NAN),
            location: "tree leaves under supplied controls".into(),
        });
    }
    Ok(worst)
}

/// Cost of an arbitrary control set under the original objective, after
/// verifying that it steers every leaf to its target.
pub fn evaluate_cost<T: Real>(tree: &TreeProblem<T>, controls: &TreeControls<T>) -> Result<T> {
    check_controls_shape(tree, controls)?;
    let states = forward_states(tree, controls);
    ensure_leaves_hit(tree, &states)?;
    Ok(cost_of(tree, controls, &states))
}

fn cost_of<T: Real>(
    tree: &TreeProblem<T>,
    controls: &TreeControls<T>,
    states: &[Vec<DVector<T>>],
) -> T {
    let mut total = T::zero();
    let mut pi = T::one();
    for k in 0..tree.depth {
        let lb = &tree.levels[k];
        let mut level_sum = T::zero();
        for i in 0..(1 << k) {
            let u = &controls[k][i];
            level_sum += (&lb.h * u).dot(u);
            if let Some(q) = &lb.q {
                let x = &states[k][i];
                level_sum += (q * x).dot(x);
            }
        }
        total += level_sum * pi * tree.delta;
        pi *= real::<T>(0.5);
    }
    total
}

/// Excess-cost decomposition of a feasible competitor against the optimum.
#[derive(Debug, Clone)]
pub struct ExcessReport<T: Real> {
    pub j_other: T,
    pub j_opt: T,
    /// Quadratic form of the control (and state, when `Q` is present)
    /// differences; equals `j_other - j_opt` for an exact optimum.
    pub quadratic_gap: T,
    /// First-order cross term; zero at the optimum.
    pub cross_term: T,
    /// `|j_other - j_opt - quadratic_gap|`.
    pub identity_residual: T,
}

/// Verifies the excess-cost identity
/// `J(u) - J(u*) = sum pi dt (du' H du + dx' Q dx)` and the vanishing of
/// the first-order cross term for a feasible `controls`.
pub fn excess_cost_check<T: Real>(
    tree: &TreeProblem<T>,
    optimal: &TreeSolution<T>,
    controls: &TreeControls<T>,
) -> Result<ExcessReport<T>> {
    check_controls_shape(tree, controls)?;
    let states = forward_states(tree, controls);
    ensure_leaves_hit(tree, &states)?;
    let j_other = cost_of(tree, controls, &states);
    let j_opt = optimal.j_tree;

    let two = real::<T>(2.0);
    let mut quad = T::zero();
    let mut cross = T::zero();
    let mut pi = T::one();
    for k in 0..tree.depth {
        let lb = &tree.levels[k];
        let mut q_sum = T::zero();
        let mut c_sum = T::zero();
        for i in 0..(1 << k) {
            let du = &controls[k][i] - &optimal.controls[k][i];
            let u_star = &optimal.controls[k][i];
            q_sum += (&lb.h * &du).dot(&du);
            c_sum += (&lb.h * u_star).dot(&du) * two;
            if let Some(q) = &lb.q {
                let dx = &states[k][i] - &optimal.states[k][i];
                let x_star = &optimal.states[k][i];
                q_sum += (q * &dx).dot(&dx);
                c_sum += (q * x_star).dot(&dx) * two;
            }
        }
        quad += q_sum * pi * tree.delta;
        cross += c_sum * pi * tree.delta;
        pi *= real::<T>(0.5);
    }

    Ok(ExcessReport {
        j_other,
        j_opt,
        quadratic_gap: quad,
        cross_term: cross,
        identity_residual: (j_other - j_opt - quad).abs(),
    })
}

/// Side-by-side report of the tree optimum against the continuous solver.
#[derive(Debug, Clone)]
pub struct ComparisonReport<T: Real> {
    pub j_tree: T,
    pub j_solver: T,
    pub abs_gap: T,
    pub rel_gap: T,
    /// `|v0_solver - v0_tree| + |z0_solver - z0_tree|`.
    pub root_gap: T,
}

/// Compares value and deterministic root controls; the solver side comes
/// from the continuous pipeline on matched coefficients.
pub fn compare_with_solver<T: Real>(
    sol: &TreeSolution<T>,
    j_solver: T,
    v0_solver: &DVector<T>,
    z0_solver: &DVector<T>,
) -> ComparisonReport<T> {
    let abs_gap = (sol.j_tree - j_solver).abs();
    let denom = sol.j_tree.abs().max(real::<T>(1e-12));
    let root_gap = (v0_solver - sol.root_v()).norm() + (z0_solver - sol.root_z()).norm();
    ComparisonReport {
        j_tree: sol.j_tree,
        j_solver,
        abs_gap,
        rel_gap: abs_gap / denom,
        root_gap,
    }
}

/// Exact tree version of the first orthogonality identity: for any two
/// feasible control sets, `E sum_k dt Phi_k S_k F (v1 - v2) = 0` with the
/// adapted propagator `Phi_{k+1} = Phi_k S_k (I -+ sqrt(dt) G)`.
pub fn tree_lemma1<T: Real>(
    tree: &TreeProblem<T>,
    first: &TreeControls<T>,
    second: &TreeControls<T>,
) -> Result<DVector<T>> {
    check_controls_shape(tree, first)?;
    check_controls_shape(tree, second)?;
    ensure_leaves_hit(tree, &forward_states(tree, first))?;
    ensure_leaves_hit(tree, &forward_states(tree, second))?;

    let n = tree.n;
    let sqrt_d = tree.delta.sqrt();
    let mut acc = DVector::zeros(n);
    if tree.v_dim == 0 {
        return Ok(acc);
    }
    let mut phi: Vec<DMatrix<T>> = vec![DMatrix::identity(n, n)];
    let mut pi = T::one();
    for k in 0..tree.depth {
        let lb = &tree.levels[k];
        let sf = &lb.s_prop * &lb.f;
        let sg = &lb.s_prop * &lb.g;
        let mut next = Vec::with_capacity(1 << (k + 1));
        for (i, p) in phi.iter().enumerate() {
            let dv = first[k][i].rows(n, tree.v_dim) - second[k][i].rows(n, tree.v_dim);
            acc += (p * &sf * dv) * (pi * tree.delta);
            let psg = p * &sg * sqrt_d;
            let ps = p * &lb.s_prop;
            next.push(&ps - &psg);
            next.push(&ps + &psg);
        }
        phi = next;
        pi *= real::<T>(0.5);
    }
    Ok(acc)
}

/// Both sides of the exact tree version of the second identity.
#[derive(Debug, Clone)]
pub struct TreeLemmaTwoReport<T: Real> {
    pub lhs: T,
    pub rhs: T,
    pub gap: T,
}

/// Exact tree version of the second orthogonality identity: with
/// `Gamma_{k+1} = Gamma_k + dt Gamma1 + sqrt(dt) w_k Gamma2` and the drift
/// `Gamma1 = -Phi^-T [(C - G) - dt G A]' S' Phi' Gamma2`,
///
/// ```text
/// E sum dt Gamma2' Phi S (I - dt G G) (z2 - z1)
///   = -E sum dt [(Gamma + dt Gamma1)' Phi S F - dt Gamma2' Phi S G F] (v2 - v1)
/// ```
///
/// holds exactly for any adapted weight `Gamma2` whenever both control
/// sets are feasible.
pub fn tree_lemma2<T: Real>(
    tree: &TreeProblem<T>,
    first: &TreeControls<T>,
    second: &TreeControls<T>,
    gamma: &GammaChoice<T>,
) -> Result<TreeLemmaTwoReport<T>> {
    check_controls_shape(tree, first)?;
    check_controls_shape(tree, second)?;
    ensure_leaves_hit(tree, &forward_states(tree, first))?;
    ensure_leaves_hit(tree, &forward_states(tree, second))?;

    let n = tree.n;
    let sqrt_d = tree.delta.sqrt();
    let mut lhs = T::zero();
    let mut rhs = T::zero();
    let mut phi: Vec<DMatrix<T>> = vec![DMatrix::identity(n, n)];
    let mut gam: Vec<DVector<T>> = vec![DVector::zeros(n)];
    let mut pi = T::one();
    for k in 0..tree.depth {
        let lb = &tree.levels[k];
        let drift = &lb.s_prop * (&(&lb.c - &lb.g) - &lb.g * &lb.a * tree.delta);
        let z_coef = &lb.s_prop * (DMatrix::identity(n, n) - &lb.g * &lb.g * tree.delta);
        let sf = &lb.s_prop * &lb.f;
        let sgf = &lb.s_prop * &lb.g * &lb.f;
        let mut next_phi = Vec::with_capacity(1 << (k + 1));
        let mut next_gam = Vec::with_capacity(1 << (k + 1));
        for i in 0..(1 << k) {
            let p = &phi[i];
            let pt = p.transpose();
            let p_lu = pt.clone().lu();
            let g2 = match gamma {
                GammaChoice::Canonical => {
                    let z1 = first[k][i].rows(0, n).into_owned();
                    let v1 = first[k][i].rows(n, tree.v_dim).into_owned();
                    let mut w = &lb.h1 * z1;
                    if tree.v_dim > 0 {
                        w += &lb.h2 * v1;
                    }
                    p_lu.solve(&w).ok_or_else(|| Error::SingularSystem {
                        context: format!("tree propagator inverse at level {k}"),
                    })?
                }
                GammaChoice::Constant(w) => w.clone(),
            };
            let g1 = -p_lu
                .solve(&(drift.transpose() * (&pt * &g2)))
                .ok_or_else(|| Error::SingularSystem {
                    context: format!("tree propagator inverse at level {k}"),
                })?;

            let dz = second[k][i].rows(0, n) - first[k][i].rows(0, n);
            lhs += (p * &z_coef * dz).dot(&g2) * (pi * tree.delta);
            if tree.v_dim > 0 {
                let dv = second[k][i].rows(n, tree.v_dim) - first[k][i].rows(n, tree.v_dim);
                let gd = &gam[i] + &g1 * tree.delta;
                let lead = (p * &sf * &dv).dot(&gd);
                let corr = (p * &sgf * &dv).dot(&g2) * tree.delta;
                rhs -= (lead - corr) * (pi * tree.delta);
            }

            let psg = p * (&lb.s_prop * &lb.g) * sqrt_d;
            let ps = p * &lb.s_prop;
            next_phi.push(&ps - &psg);
            next_phi.push(&ps + &psg);
            let base = &gam[i] + &g1 * tree.delta;
            next_gam.push(&base + &g2 * sqrt_d);
            next_gam.push(&base - &g2 * sqrt_d);
        }
        phi = next_phi;
        gam = next_gam;
        pi *= real::<T>(0.5);
    }
    Ok(TreeLemmaTwoReport {
        lhs,
        rhs,
        gap: lhs - rhs,
    })
}

/// Serialises the full QP in a line-oriented sparse text format for
/// external verification:
///
/// ```text
/// tree-qp 1
/// dims n=<n> v=<v> depth=<N> delta=<dt>
/// x0 <row> <value>
/// H <level> <row> <col> <value>      cost sum_k 2^-k dt (u'Hu + x'Qx)
/// Q <level> <row> <col> <value>
/// AP|AM <level> <row> <col> <value>  x_child = A x + B u per edge
/// BP|BM <level> <row> <col> <value>
/// leaf <index> <row> <value>         terminal equality per leaf
/// ```
///
/// Zero entries are omitted; probabilities are implied by the level.
pub fn dump_qp<T: Real>(tree: &TreeProblem<T>) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "tree-qp 1");
    let _ = writeln!(
        out,
        "dims n={} v={} depth={} delta={:.17e}",
        tree.n,
        tree.v_dim,
        tree.depth,
        tree.delta.to_f64().unwrap_or(f64::NAN)
    );
    let fval = |v: T| v.to_f64().unwrap_or(f64::NAN);
    for (i, v) in tree.x0.iter().enumerate() {
        let _ = writeln!(out, "x0 {i} {:.17e}", fval(*v));
    }
    let mat = |tag: &str, k: usize, m: &DMatrix<T>, out: &mut String| {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != T::zero() {
                    let _ = writeln!(out, "{tag} {k} {r} {c} {:.17e}", fval(m[(r, c)]));
                }
            }
        }
    };
    for (k, lb) in tree.levels.iter().enumerate() {
        mat("H", k, &lb.h, &mut out);
        if let Some(q) = &lb.q {
            mat("Q", k, q, &mut out);
        }
        mat("AP", k, &lb.a_plus, &mut out);
        mat("AM", k, &lb.a_minus, &mut out);
        mat("BP", k, &lb.b_plus, &mut out);
        mat("BM", k, &lb.b_minus, &mut out);
    }
    for (i, t) in tree.leaf_targets.iter().enumerate() {
        for (r, v) in t.iter().enumerate() {
            let _ = writeln!(out, "leaf {i} {r} {:.17e}", fval(*v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::problem::{TerminalTarget, TimeGrid};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn flagship_tree(depth: usize) -> TreeProblem<f64> {
        TreeProblem::from_spec(&instances::brownian_target::<f64>(), depth).unwrap()
    }

    #[test]
    fn flagship_tree_value_converges_to_the_closed_form() {
        let reference = std::f64::consts::LN_2;
        let mut gaps = Vec::new();
        for depth in [4, 6, 8, 10, 12] {
            let sol = solve_tree_qp(&flagship_tree(depth)).unwrap();
            assert!(sol.kkt_residual <= tol::TOL_KKT, "kkt {}", sol.kkt_residual);
            assert!(sol.j_tree >= 0.0);
            gaps.push((sol.j_tree - reference).abs());
        }
        assert!(
            gaps[gaps.len() - 1] <= 0.03,
            "depth-12 gap {}",
            gaps[gaps.len() - 1]
        );
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "gap trend broken: {gaps:?}");
        }
    }

    #[test]
    fn flagship_root_controls_match_the_closed_loop() {
        // z*(0) = 1/(2 - 0) = 1/2 and v*(0) = K = 0 in the closed form;
        // the tree agrees up to the one-step discretisation error.
        let sol = solve_tree_qp(&flagship_tree(12)).unwrap();
        assert!(sol.root_v()[0].abs() <= 1e-9);
        assert!((sol.root_z()[0] - 0.5).abs() <= 0.05);
    }

    #[test]
    fn deterministic_target_tree_value_is_exact_at_any_depth() {
        let spec = instances::deterministic_target::<f64>(1.1, 0.0);
        for depth in [3, 5, 8] {
            let tree = TreeProblem::from_spec(&spec, depth).unwrap();
            let sol = solve_tree_qp(&tree).unwrap();
            assert_relative_eq!(sol.j_tree, 1.21, epsilon = 1e-10);
            assert!(sol.kkt_residual <= tol::TOL_KKT);
            for (k, row) in sol.controls().iter().enumerate() {
                for u in row {
                    assert!(u[0].abs() <= 1e-9, "z not zero at level {k}");
                    assert!((u[1] - 1.1).abs() <= 1e-9, "v not constant at level {k}");
                }
            }
        }
    }

    #[test]
    fn generic_leaf_targets_without_free_controls_are_infeasible() {
        // One state, one control, B = 0: siblings always straddle their
        // parent symmetrically, so generic leaf values cannot be reached.
        let n = 1;
        let spec = ProblemSpec::<f64> {
            n,
            m: 1,
            grid: TimeGrid::new(1.0, 8).unwrap(),
            x0: DVector::from_element(n, 0.0),
            a: MatrixPath::constant(DMatrix::zeros(n, n)),
            b: MatrixPath::constant(DMatrix::zeros(n, 1)),
            c: MatrixPath::constant(DMatrix::zeros(n, n)),
            d: MatrixPath::constant(DMatrix::identity(1, 1)),
            r: MatrixPath::constant(DMatrix::identity(1, 1)),
            q: None,
            target: TerminalTarget {
                a: DVector::from_element(n, 0.0),
                b: DVector::from_element(n, 0.0),
            },
        };
        let depth = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let targets: Vec<DVector<f64>> = (0..(1 << depth))
            .map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let tree = TreeProblem::from_spec(&spec, depth)
            .unwrap()
            .with_leaf_targets(targets)
            .unwrap();
        match solve_tree_qp(&tree) {
            Err(Error::Infeasible { .. }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn tree_kkt_certificate_holds_on_random_instances() {
        for seed in [1u64, 5, 11, 23] {
            let spec = instances::random_controllable::<f64>(seed, 2, 3, 2);
            let tree = TreeProblem::from_spec(&spec, 6).unwrap();
            let sol = solve_tree_qp(&tree).unwrap();
            assert!(
                sol.kkt_residual <= tol::TOL_KKT,
                "seed {seed}: kkt {}",
                sol.kkt_residual
            );
            assert!(sol.j_tree >= -1e-12, "seed {seed}: j {}", sol.j_tree);
            let replay = evaluate_cost(&tree, sol.controls()).unwrap();
            assert_relative_eq!(replay, sol.j_tree, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn feasible_competitors_satisfy_the_excess_cost_identity() {
        let tree = flagship_tree(8);
        let opt = solve_tree_qp(&tree).unwrap();
        for seed in 0..10u64 {
            let comp = feasible_competitor(&tree, seed).unwrap();
            let report = excess_cost_check(&tree, &opt, &comp).unwrap();
            let scale = 1.0 + report.j_other.abs() + report.j_opt.abs();
            assert!(
                report.identity_residual <= tol::TOL_TREE_FEASIBLE * scale,
                "seed {seed}: identity residual {}",
                report.identity_residual
            );
            assert!(
                report.cross_term.abs() <= tol::TOL_TREE_FEASIBLE * scale,
                "seed {seed}: cross term {}",
                report.cross_term
            );
            assert!(
                report.j_other > report.j_opt,
                "seed {seed}: competitor did not cost more"
            );
        }
    }

    #[test]
    fn excess_cost_identity_holds_with_state_penalty() {
        let mut spec = instances::random_controllable::<f64>(3, 2, 3, 1);
        spec.q = Some(MatrixPath::constant(DMatrix::identity(2, 2)));
        let tree = TreeProblem::from_spec(&spec, 5).unwrap();
        let opt = solve_tree_qp(&tree).unwrap();
        assert!(opt.kkt_residual <= tol::TOL_KKT, "kkt {}", opt.kkt_residual);
        let comp = feasible_competitor(&tree, 4).unwrap();
        let report = excess_cost_check(&tree, &opt, &comp).unwrap();
        let scale = 1.0 + report.j_other.abs() + report.j_opt.abs();
        assert!(report.identity_residual <= tol::TOL_TREE_FEASIBLE * scale);
        assert!(report.cross_term.abs() <= tol::TOL_TREE_FEASIBLE * scale);
    }

    #[test]
    fn tree_lemma_identities_vanish_exactly() {
        for (tree, label) in [
            (flagship_tree(8), "flagship"),
            (
                TreeProblem::from_spec(&instances::random_controllable::<f64>(9, 2, 3, 2), 7)
                    .unwrap(),
                "random",
            ),
        ] {
            let opt = solve_tree_qp(&tree).unwrap().into_controls();
            let comp = feasible_competitor(&tree, 3).unwrap();
            let l1 = tree_lemma1(&tree, &opt, &comp).unwrap();
            assert!(
                l1.amax() <= tol::TOL_TREE_IDENTITY,
                "{label}: lemma1 {}",
                l1.amax()
            );
            let l2 = tree_lemma2(&tree, &opt, &comp, &GammaChoice::Canonical).unwrap();
            let scale = 1.0 + l2.lhs.abs() + l2.rhs.abs();
            assert!(
                l2.gap.abs() <= tol::TOL_TREE_IDENTITY * scale,
                "{label}: lemma2 gap {} (lhs {}, rhs {})",
                l2.gap,
                l2.lhs,
                l2.rhs
            );
            let w = DVector::from_fn(tree.state_dim(), |i, _| 0.8 - 0.3 * i as f64);
            let l2c = tree_lemma2(&tree, &opt, &comp, &GammaChoice::Constant(w)).unwrap();
            let scale = 1.0 + l2c.lhs.abs() + l2c.rhs.abs();
            assert!(
                l2c.gap.abs() <= tol::TOL_TREE_IDENTITY * scale,
                "{label}: constant-weight lemma2 gap {}",
                l2c.gap
            );
        }
    }

    #[test]
    fn tree_value_is_invariant_under_factor_choice() {
        let spec = instances::brownian_target::<f64>();
        let tree = TreeProblem::from_spec(&spec, 8).unwrap();
        let base = solve_tree_qp(&tree).unwrap();

        // Another factor of the same D: mix the kernel column into the
        // pseudoinverse part and rescale the kernel part.
        let alt = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.7, -2.0]);
        let d = spec.d.at_time(0.0).clone();
        let dm = &d * &alt;
        assert_relative_eq!(dm[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(dm[(0, 1)], 0.0, epsilon = 1e-15);
        let alt_tree =
            TreeProblem::with_factor(&spec, 8, &MatrixPath::constant(alt)).unwrap();
        let alt_sol = solve_tree_qp(&alt_tree).unwrap();

        let scale = 1.0 + base.j_tree.abs();
        assert!(
            (base.j_tree - alt_sol.j_tree).abs() <= 1e-10 * scale,
            "value moved under factor change: {} vs {}",
            base.j_tree,
            alt_sol.j_tree
        );
        // The original-coordinate control is the unique QP optimiser, so
        // it must agree node by node even though (z, v) coordinates move.
        for (k, i) in [(0usize, 0usize), (3, 5)] {
            let u_base = tree.original_control(k, &base.controls()[k][i]);
            let u_alt = alt_tree.original_control(k, &alt_sol.controls()[k][i]);
            assert!(
                (u_base - u_alt).amax() <= 1e-8,
                "control moved at level {k}, node {i}"
            );
        }
    }

    #[test]
    fn dump_format_lists_every_block_once() {
        let tree = flagship_tree(3);
        let text = dump_qp(&tree);
        assert!(text.starts_with("tree-qp 1\ndims n=1 v=1 depth=3"));
        let leaf_lines = text.lines().filter(|l| l.starts_with("leaf ")).count();
        assert_eq!(leaf_lines, 8);
        // Constant coefficients: one H block per level, three nonzeros.
        let h_lines = text.lines().filter(|l| l.starts_with("H ")).count();
        assert_eq!(h_lines, 6);
    }

    #[test]
    fn comparison_report_scores_the_flagship() {
        let sol = solve_tree_qp(&flagship_tree(12)).unwrap();
        let v0 = DVector::from_element(1, 0.0);
        let z0 = DVector::from_element(1, 0.5);
        let report = compare_with_solver(&sol, std::f64::consts::LN_2, &v0, &z0);
        assert!(report.rel_gap <= 0.05, "rel gap {}", report.rel_gap);
        assert!(report.root_gap <= 0.06, "root gap {}", report.root_gap);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn random_leaf_targets_stay_feasible_and_certified(
            a in -1.0f64..1.0,
            c in -1.0f64..1.0,
            raw in proptest::collection::vec(-2.0f64..2.0, 16),
        ) {
            let depth = 4;
            let spec = ProblemSpec::<f64> {
                n: 1,
                m: 2,
                grid: TimeGrid::new(1.0, 16).unwrap(),
                x0: DVector::from_element(1, 0.3),
                a: MatrixPath::constant(DMatrix::from_element(1, 1, a)),
                b: MatrixPath::constant(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])),
                c: MatrixPath::constant(DMatrix::from_element(1, 1, c)),
                d: MatrixPath::constant(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
                r: MatrixPath::constant(DMatrix::identity(2, 2)),
                q: None,
                target: TerminalTarget {
                    a: DVector::from_element(1, 0.0),
                    b: DVector::from_element(1, 1.0),
                },
            };
            let targets: Vec<DVector<f64>> =
                raw.iter().map(|v| DVector::from_element(1, *v)).collect();
            let tree = TreeProblem::from_spec(&spec, depth)
                .unwrap()
                .with_leaf_targets(targets)
                .unwrap();
            let sol = solve_tree_qp(&tree).unwrap();
            prop_assert!(sol.kkt_residual <= tol::TOL_KKT);
            prop_assert!(sol.j_tree >= -1e-12);
            let replay = evaluate_cost(&tree, sol.controls()).unwrap();
            prop_assert!((replay - sol.j_tree).abs() <= 1e-10 * (1.0 + sol.j_tree.abs()));
        }
    }
}
