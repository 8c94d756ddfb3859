//! Backward equation for the adjoint pair `(p, q)` of the reduced problem.
//!
//! After the factorisation and the controllability solve, the adjoint pair
//! follows the linear backward equation
//!
//! ```text
//! dp = [B1 p + B2 q] dt + q dW,      p(T) = -xi,
//! B1 = Abar + Pbar C' Hbar C + [Bbar - Pbar C' Hbar] W Pbar Hbar C,
//! B2 = [Bbar - Pbar C' Hbar] W,
//! W  = [I + Pbar Hbar]^-1 = Hbar^-1 [Hbar^-1 + Pbar]^-1.
//! ```
//!
//! With an affine terminal variable `xi = a + b W(T)` the solution is the
//! affine field `p(t) = alpha(t) + beta(t) W(t)`, `q(t) = beta(t)`:
//!
//! ```text
//! beta'  = B1 beta,             beta(T)  = -b,
//! alpha' = B1 alpha + B2 beta,  alpha(T) = -a.
//! ```
//!
//! Both ODEs integrate backward with RK4 over full grid steps; the stage
//! values of `Pbar` at step midpoints come from the half-grid Riccati
//! storage, so no interpolation enters and fourth order is preserved.
//! Stages use the coefficients of the step being crossed (the left-closed
//! segment), which keeps the order at breakpoints of piecewise-constant
//! coefficients.
//!
//! The steering initial condition of the forward adjoint state is
//! `K = Pbar(0)^-1 (-x0 - alpha(0))`.

use nalgebra::{DMatrix, DVector};

use crate::decomp::{DecompSegment, Decomposition};
use crate::linalg::{inv_spd, solve_spd};
use crate::problem::{TerminalTarget, TimeGrid};
use crate::riccati::RiccatiSolution;
use crate::scalar::{real, Real};
use crate::Result;

/// Blocks coupling the adjoint pair to the closed loop at one time point.
///
/// Everything downstream of the Riccati solve (the backward pair here, the
/// closed-loop assembly later) is built from these.
pub(crate) struct Coupling<T: Real> {
    /// `W = [I + Pbar Hbar]^-1`.
    pub w: DMatrix<T>,
    /// `T1 = Pbar Hbar C`.
    pub t1: DMatrix<T>,
    /// `E = Bbar - Pbar C' Hbar`.
    pub e: DMatrix<T>,
    /// `Hbar C`.
    pub hc: DMatrix<T>,
}

impl<T: Real> Coupling<T> {
    pub fn new(seg: &DecompSegment<T>, pbar: &DMatrix<T>) -> Result<Self> {
        let hbar_inv = seg.hbar_inv()?;
        let w = hbar_inv
            * inv_spd(
                &(hbar_inv + pbar),
                "adjoint coefficients: Hbar^-1 + Pbar",
            )?;
        let hc = &seg.hbar * &seg.c;
        let t1 = pbar * &hc;
        let e = &seg.bbar - pbar * hc.transpose();
        Ok(Self { w, t1, e, hc })
    }

    /// Drift coefficient `B1` of the backward pair.
    pub fn b1(&self, seg: &DecompSegment<T>, pbar: &DMatrix<T>) -> DMatrix<T> {
        &seg.abar + pbar * self.hc.transpose() * &seg.c + &self.e * &self.w * &self.t1
    }

    /// Diffusion-coupling coefficient `B2` of the backward pair.
    pub fn b2(&self) -> DMatrix<T> {
        &self.e * &self.w
    }
}

/// Backward pair `(p, q)` in affine form, plus its coefficients on grid
/// nodes for the forward passes.
#[derive(Debug, Clone)]
pub struct BsdeSolution<T: Real> {
    grid: TimeGrid<T>,
    alpha: Vec<DVector<T>>,
    beta: Vec<DVector<T>>,
    b1_nodes: Vec<DMatrix<T>>,
    b2_nodes: Vec<DMatrix<T>>,
}

impl<T: Real> BsdeSolution<T> {
    /// Grid the node indices refer to.
    pub fn grid(&self) -> TimeGrid<T> {
        self.grid
    }

    /// Deterministic part of `p` at node `k`.
    pub fn alpha_at(&self, k: usize) -> &DVector<T> {
        &self.alpha[k]
    }

    /// Loading of `p` on `W(t)` at node `k`; also the integrand `q`.
    pub fn beta_at(&self, k: usize) -> &DVector<T> {
        &self.beta[k]
    }

    /// `B1` at node `k` (built with the coefficients of the step starting
    /// there; node `N` carries the final step's).
    pub fn b1_at(&self, k: usize) -> &DMatrix<T> {
        &self.b1_nodes[k]
    }

    /// `B2` at node `k`, same convention as [`Self::b1_at`].
    pub fn b2_at(&self, k: usize) -> &DMatrix<T> {
        &self.b2_nodes[k]
    }

    /// Realised `p(t_k)` on a path with Brownian value `w` at `t_k`.
    pub fn p_value(&self, k: usize, w: T) -> DVector<T> {
        &self.alpha[k] + &self.beta[k] * w
    }
}

/// Solves the backward pair for an affine terminal target.
pub fn solve_bsde<T: Real>(
    dec: &Decomposition<T>,
    ric: &RiccatiSolution<T>,
    target: &TerminalTarget<T>,
) -> Result<BsdeSolution<T>> {
    let grid = dec.grid;
    let steps = grid.steps();
    let h = -grid.dt();
    let h_half = h / real::<T>(2.0);
    let h_sixth = h / real::<T>(6.0);
    let two = real::<T>(2.0);

    // Node coefficients, left-step convention: node k pairs Pbar(t_k) with
    // the coefficients of step k (step N-1 for the terminal node).
    let mut b1_nodes = Vec::with_capacity(steps + 1);
    let mut b2_nodes = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let seg = dec.at_node(k);
        let pbar = ric.at_node(k);
        let cpl = Coupling::new(seg, pbar)?;
        b1_nodes.push(cpl.b1(seg, pbar));
        b2_nodes.push(cpl.b2());
    }

    let mut alpha = vec![DVector::<T>::zeros(dec.n); steps + 1];
    let mut beta = vec![DVector::<T>::zeros(dec.n); steps + 1];
    alpha[steps] = -&target.a;
    beta[steps] = -&target.b;

    let mut a_cur = alpha[steps].clone();
    let mut b_cur = beta[steps].clone();
    for k in (0..steps).rev() {
        let seg = dec.at_node(k);
        // Stage coefficients share step k's segment; only Pbar varies.
        // The right-endpoint pair rebuilds B1 with this segment, which at a
        // breakpoint differs from b1_nodes[k + 1] (left limit vs new value).
        let stage = |j: usize| -> Result<(DMatrix<T>, DMatrix<T>)> {
            let pbar = ric.at_half(j);
            let cpl = Coupling::new(seg, pbar)?;
            Ok((cpl.b1(seg, pbar), cpl.b2()))
        };
        let (b1_r, b2_r) = stage(2 * k + 2)?;
        let (b1_m, b2_m) = stage(2 * k + 1)?;
        let (b1_l, b2_l) = (&b1_nodes[k], &b2_nodes[k]);

        let f = |b1: &DMatrix<T>, b2: &DMatrix<T>, a: &DVector<T>, b: &DVector<T>| {
            (b1 * a + b2 * b, b1 * b)
        };
        let (ka1, kb1) = f(&b1_r, &b2_r, &a_cur, &b_cur);
        let (ka2, kb2) = f(
            &b1_m,
            &b2_m,
            &(&a_cur + &ka1 * h_half),
            &(&b_cur + &kb1 * h_half),
        );
        let (ka3, kb3) = f(
            &b1_m,
            &b2_m,
            &(&a_cur + &ka2 * h_half),
            &(&b_cur + &kb2 * h_half),
        );
        let (ka4, kb4) = f(b1_l, b2_l, &(&a_cur + &ka3 * h), &(&b_cur + &kb3 * h));

        a_cur += (ka1 + &ka2 * two + &ka3 * two + ka4) * h_sixth;
        b_cur += (kb1 + &kb2 * two + &kb3 * two + kb4) * h_sixth;
        alpha[k] = a_cur.clone();
        beta[k] = b_cur.clone();
    }

    Ok(BsdeSolution {
        grid,
        alpha,
        beta,
        b1_nodes,
        b2_nodes,
    })
}

/// Initial value `K = Pbar(0)^-1 (-x0 - alpha(0))` of the forward adjoint
/// state; requires the controllability certificate to be invertible.
pub fn steering_initial_condition<T: Real>(
    ric: &RiccatiSolution<T>,
    bsde: &BsdeSolution<T>,
    x0: &DVector<T>,
) -> Result<DVector<T>> {
    let rhs_vec = -(x0 + bsde.alpha_at(0));
    let rhs = DMatrix::from_column_slice(rhs_vec.len(), 1, rhs_vec.as_slice());
    let sol = solve_spd(ric.p0(), &rhs, "steering initial condition: Pbar(0)")?;
    Ok(DVector::from_column_slice(sol.as_slice()))
}
