//! Control factorisation through an invertible `M` with `D M = [I 0]`.
//!
//! With `u = M [z; v]` the diffusion becomes `C x + z` (the first block `z`
//! of the reparameterised control is exactly the control's diffusion
//! contribution `D u`), and the drift becomes `A x + G z + F v` where
//! `[G F] = B M`. The energy density transforms as
//!
//! ```text
//! u' R u = z' H1 z + 2 v' H2' z + v' H3 v,
//! [[H1, H2], [H2', H3]] = M' R M.
//! ```
//!
//! Derived blocks used downstream:
//!
//! ```text
//! Abar = A - G C + F H3^-1 H2' C
//! Bbar = G - F H3^-1 H2'
//! Hbar = H1 - H2 H3^-1 H2'      (Schur complement, > 0 when R > 0)
//! ```
//!
//! The canonical factor is `M = [D' (D D')^-1 | N]` with `N` an orthonormal
//! basis of `ker D`; any other valid factor changes only the internal
//! splitting, not the original control or its cost.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::linalg::{inv_spd, max_abs, solve_spd, sym_eigenvalues, symmetrized};
use crate::problem::{MatrixPath, ProblemSpec, TimeGrid};
use crate::scalar::{real, Real};
use crate::{tol, Result};

/// Builds the canonical factor `M = [D'(DD')^-1 | N]` for one segment value
/// of `D`.
///
/// `segment` only labels error messages. Fails with
/// [`Error::RankDeficientD`] when `sigma_min <= EPS_RANK * sigma_max`.
/// The result satisfies `D M = [I 0]` to [`tol::TOL_FACTOR_RESIDUAL`] and the
/// kernel block has orthonormal columns.
pub fn build_m<T: Real>(d: &DMatrix<T>, segment: usize) -> Result<DMatrix<T>> {
    let (n, m) = d.shape();
    if m < n || n == 0 {
        return Err(Error::Invalid(format!(
            "`D` must be n x m with 1 <= n <= m, got {n}x{m}"
        )));
    }
    let sv = d.clone().svd(false, false).singular_values;
    let s_max = sv.iter().fold(T::zero(), |acc, &s| acc.max(s));
    let s_min = sv.iter().fold(s_max, |acc, &s| acc.min(s));
    if !s_max.is_finite() || !(s_min > real::<T>(tol::EPS_RANK) * s_max) {
        return Err(Error::RankDeficientD {
            segment,
            ratio: (s_min / s_max).to_f64().unwrap_or(0.0),
        });
    }

    // Pseudo-inverse block D'(DD')^-1, the minimum-norm right inverse.
    let ddt = d * d.transpose();
    let d_plus = solve_spd(&ddt, d, "build_m: D D'")?.transpose();

    // Orthonormal range basis of D' (equivalently of the row space of D),
    // completed to an orthonormal kernel basis.
    let q = d.transpose().qr().q();
    let kernel = orthonormal_complement(&q);

    let mut m_mat = DMatrix::zeros(m, m);
    m_mat.view_mut((0, 0), (m, n)).copy_from(&d_plus);
    m_mat.view_mut((0, n), (m, m - n)).copy_from(&kernel);

    // Certify D M = [I 0].
    let mut residual = d * &m_mat;
    for i in 0..n {
        residual[(i, i)] -= T::one();
    }
    let defect = max_abs(&residual);
    if defect > real::<T>(tol::TOL_FACTOR_RESIDUAL) {
        return Err(Error::Numeric(format!(
            "factorisation residual |D M - [I 0]| = {:.3e} on segment {segment}",
            defect.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(m_mat)
}

/// Canonical factor path: one `M` per segment of `D`.
pub fn build_m_path<T: Real>(spec: &ProblemSpec<T>) -> Result<MatrixPath<T>> {
    let breaks = spec.d.breaks().to_vec();
    let values = spec
        .d
        .values()
        .iter()
        .enumerate()
        .map(|(seg, d)| build_m(d, seg))
        .collect::<Result<Vec<_>>>()?;
    MatrixPath::from_segments(breaks, values)
}

/// Completes the orthonormal columns of `q` to a full orthonormal basis of
/// `R^m`, returning the added columns.
///
/// Candidates are the standard basis vectors; each round picks the one with
/// the largest residual after projection (ties resolved to the lowest
/// index), so the completion is deterministic.
pub(crate) fn orthonormal_complement<T: Real>(q: &DMatrix<T>) -> DMatrix<T> {
    let m = q.nrows();
    let k = m - q.ncols();
    let mut basis: Vec<DVector<T>> = q.column_iter().map(|c| c.into_owned()).collect();
    let mut out = DMatrix::zeros(m, k);
    for j in 0..k {
        let mut best: Option<(T, DVector<T>)> = None;
        for i in 0..m {
            let mut r = DVector::zeros(m);
            r[i] = T::one();
            // Two projection rounds: classical Gram-Schmidt with
            // reorthogonalisation keeps the basis orthonormal to rounding.
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&r);
                    r.axpy(-c, b, T::one());
                }
            }
            let norm = r.norm();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, r));
            }
        }
        let (norm, v) = best.expect("m > 0");
        debug_assert!(norm > T::zero(), "basis cannot already span R^m");
        let v = v / norm;
        out.set_column(j, &v);
        basis.push(v);
    }
    out
}

/// Coefficient and cost blocks on one maximal interval where every input
/// path is constant.
#[derive(Debug, Clone)]
pub struct DecompSegment<T: Real> {
    /// Factor `M` and its inverse.
    pub m_mat: DMatrix<T>,
    pub m_inv: DMatrix<T>,
    /// Original coefficients on the segment.
    pub a: DMatrix<T>,
    pub c: DMatrix<T>,
    pub r: DMatrix<T>,
    /// Drift blocks `[G F] = B M`.
    pub g: DMatrix<T>,
    pub f: DMatrix<T>,
    /// Cost blocks of `M' R M`.
    pub h1: DMatrix<T>,
    pub h2: DMatrix<T>,
    pub h3: DMatrix<T>,
    /// `H3^-1` and the cached product `H3^-1 H2'`.
    pub h3_inv: DMatrix<T>,
    pub h3_inv_h2t: DMatrix<T>,
    /// Schur complement `Hbar = H1 - H2 H3^-1 H2'` and, when it is positive
    /// definite, its inverse.
    pub hbar: DMatrix<T>,
    hbar_inv: Option<DMatrix<T>>,
    /// Reduced drift blocks.
    pub abar: DMatrix<T>,
    pub bbar: DMatrix<T>,
    /// Cached `F H3^-1 F'`.
    pub f_h3inv_ft: DMatrix<T>,
}

impl<T: Real> DecompSegment<T> {
    fn build(
        a: &DMatrix<T>,
        b: &DMatrix<T>,
        c: &DMatrix<T>,
        d: &DMatrix<T>,
        r: &DMatrix<T>,
        m_mat: &DMatrix<T>,
        n: usize,
        m: usize,
    ) -> Result<Self> {
        // The factor may come from build_m or from the caller; certify it
        // against this segment's D either way.
        let mut dm = d * m_mat;
        for i in 0..n {
            dm[(i, i)] -= T::one();
        }
        if max_abs(&dm) > real::<T>(tol::TOL_M_INVERSE) {
            return Err(Error::Numeric(format!(
                "M is not a factor of D on this segment: |D M - [I 0]| = {:.3e}",
                max_abs(&dm).to_f64().unwrap_or(f64::NAN)
            )));
        }
        let m_inv = m_mat
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::SingularSystem {
                context: "decompose: M is singular".into(),
            })?;
        let mut mm = m_mat * &m_inv;
        for i in 0..m {
            mm[(i, i)] -= T::one();
        }
        if max_abs(&mm) > real::<T>(tol::TOL_M_INVERSE) {
            return Err(Error::Numeric(format!(
                "M inverse residual |M Minv - I| = {:.3e}",
                max_abs(&mm).to_f64().unwrap_or(f64::NAN)
            )));
        }

        let bm = b * m_mat;
        let g = bm.columns(0, n).into_owned();
        let f = bm.columns(n, m - n).into_owned();

        let h_full = symmetrized(&(m_mat.transpose() * r * m_mat));
        let h1 = h_full.view((0, 0), (n, n)).into_owned();
        let h2 = h_full.view((0, n), (n, m - n)).into_owned();
        let h3 = h_full.view((n, n), (m - n, m - n)).into_owned();

        let h3_inv = inv_spd(&h3, "decompose: H3 block")?;
        let h3_inv_h2t = &h3_inv * h2.transpose();
        let hbar = symmetrized(&(&h1 - &h2 * &h3_inv_h2t));

        // Invert the Schur complement only when it is safely positive
        // definite; schur_check reports the margin either way.
        let ev = sym_eigenvalues(&hbar);
        let hbar_inv = if ev[0] > real::<T>(tol::EPS_POS) * ev[ev.len() - 1] {
            Some(inv_spd(&hbar, "decompose: Hbar")?)
        } else {
            None
        };

        let abar = a - &g * c + &f * &h3_inv_h2t * c;
        let bbar = &g - &f * &h3_inv_h2t;
        let f_h3inv_ft = &f * &h3_inv * f.transpose();

        Ok(Self {
            m_mat: m_mat.clone(),
            m_inv,
            a: a.clone(),
            c: c.clone(),
            r: r.clone(),
            g,
            f,
            h1,
            h2,
            h3,
            h3_inv,
            h3_inv_h2t,
            hbar,
            hbar_inv,
            abar,
            bbar,
            f_h3inv_ft,
        })
    }

    /// Inverse Schur complement, available when `Hbar` is positive definite.
    pub fn hbar_inv(&self) -> Result<&DMatrix<T>> {
        self.hbar_inv.as_ref().ok_or_else(|| Error::SingularSystem {
            context: "Hbar is not positive definite".into(),
        })
    }

    /// Original control `u = M [z; v]`.
    pub fn control(&self, z: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        let mut zv = DVector::zeros(z.len() + v.len());
        zv.rows_mut(0, z.len()).copy_from(z);
        zv.rows_mut(z.len(), v.len()).copy_from(v);
        &self.m_mat * zv
    }

    /// Energy density in reduced coordinates,
    /// `z' H1 z + 2 v' H2' z + v' H3 v`.
    pub fn reduced_cost(&self, z: &DVector<T>, v: &DVector<T>) -> T {
        let mut acc = (&self.h1 * z).dot(z);
        if !v.is_empty() {
            let two = real::<T>(2.0);
            acc += (&self.h2 * v).dot(z) * two + (&self.h3 * v).dot(v);
        }
        acc
    }

    /// Energy density in original coordinates, `u' R u`.
    pub fn full_cost(&self, u: &DVector<T>) -> T {
        (&self.r * u).dot(u)
    }
}

/// Reduced problem data on the whole grid.
///
/// Values are stored once per maximal constant interval and shared by the
/// grid nodes that fall inside it.
#[derive(Debug, Clone)]
pub struct Decomposition<T: Real> {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Grid the node lookup refers to.
    pub grid: TimeGrid<T>,
    segments: Vec<DecompSegment<T>>,
    node_segment: Vec<usize>,
}

impl<T: Real> Decomposition<T> {
    /// Blocks active on the step starting at node `k` (for `k = N`, the
    /// final step's blocks; coefficient paths are right-extended at `T`).
    pub fn at_node(&self, k: usize) -> &DecompSegment<T> {
        &self.segments[self.node_segment[k]]
    }

    /// Blocks at half-grid index `j` (`j = 2k` are nodes, `j = 2k + 1` step
    /// midpoints, which share the left node's segment).
    pub fn at_half(&self, j: usize) -> &DecompSegment<T> {
        self.at_node(j / 2)
    }

    /// Unique segments in time order.
    pub fn segments(&self) -> &[DecompSegment<T>] {
        &self.segments
    }

    /// Segment index per grid node.
    pub fn node_segments(&self) -> &[usize] {
        &self.node_segment
    }

    /// Dimension of the free control block `v`.
    pub fn v_dim(&self) -> usize {
        self.m - self.n
    }
}

/// Forms the reduced problem from a problem and a factor path.
///
/// The factor path normally comes from [`build_m_path`]; any path with
/// `D(t) M(t) = [I 0]` is accepted and certified segment by segment.
pub fn decompose<T: Real>(
    spec: &ProblemSpec<T>,
    m_path: &MatrixPath<T>,
) -> Result<Decomposition<T>> {
    let n_steps = spec.grid.steps();
    let mut segments: Vec<DecompSegment<T>> = Vec::new();
    let mut node_segment = Vec::with_capacity(n_steps + 1);
    let mut prev_key: Option<[usize; 6]> = None;
    for k in 0..=n_steps {
        // Node N evaluates on the final step, so it shares node N-1's
        // segments; for k < N the step [t_k, t_{k+1}) starts at t_k.
        let t = spec.grid.node_time(k.min(n_steps - 1));
        let key = [
            spec.a.segment_at(t),
            spec.b.segment_at(t),
            spec.c.segment_at(t),
            spec.d.segment_at(t),
            spec.r.segment_at(t),
            m_path.segment_at(t),
        ];
        if prev_key != Some(key) {
            segments.push(DecompSegment::build(
                &spec.a.values()[key[0]],
                &spec.b.values()[key[1]],
                &spec.c.values()[key[2]],
                &spec.d.values()[key[3]],
                &spec.r.values()[key[4]],
                &m_path.values()[key[5]],
                spec.n,
                spec.m,
            )?);
            prev_key = Some(key);
        }
        node_segment.push(segments.len() - 1);
    }
    Ok(Decomposition {
        n: spec.n,
        m: spec.m,
        grid: spec.grid,
        segments,
        node_segment,
    })
}

/// Positivity report for the cost blocks.
#[derive(Debug, Clone)]
pub struct SchurReport<T: Real> {
    /// True iff `H3` and `Hbar` are positive definite on every segment.
    pub pass: bool,
    /// Smallest `H3` eigenvalue across segments (`None` when `m = n` and
    /// the block is empty).
    pub min_h3_eigenvalue: Option<T>,
    /// Smallest Schur-complement eigenvalue across segments.
    pub min_hbar_eigenvalue: T,
    /// Segment attaining the worst relative margin.
    pub worst_segment: usize,
}

/// Checks positive definiteness of `H3` and `Hbar` on every segment with
/// the relative threshold [`tol::EPS_POS`].
pub fn schur_check<T: Real>(dec: &Decomposition<T>) -> SchurReport<T> {
    let eps = real::<T>(tol::EPS_POS);
    let mut pass = true;
    let mut min_h3: Option<T> = None;
    let mut min_hbar: Option<T> = None;
    let mut worst = 0usize;
    let mut worst_margin: Option<T> = None;
    for (i, seg) in dec.segments().iter().enumerate() {
        let mut margin: Option<T> = None;
        if seg.h3.nrows() > 0 {
            let ev = sym_eigenvalues(&seg.h3);
            let (lo, hi) = (ev[0], ev[ev.len() - 1]);
            min_h3 = Some(min_h3.map_or(lo, |m: T| m.min(lo)));
            if !(hi > T::zero()) || lo <= eps * hi {
                pass = false;
            }
            let rel = if hi > T::zero() { lo / hi } else { lo };
            margin = Some(rel);
        }
        let ev = sym_eigenvalues(&seg.hbar);
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        min_hbar = Some(min_hbar.map_or(lo, |m: T| m.min(lo)));
        if !(hi > T::zero()) || lo <= eps * hi {
            pass = false;
        }
        let rel = if hi > T::zero() { lo / hi } else { lo };
        let seg_margin = margin.map_or(rel, |m: T| m.min(rel));
        if worst_margin.is_none_or(|w| seg_margin < w) {
            worst_margin = Some(seg_margin);
            worst = i;
        }
    }
    SchurReport {
        pass,
        min_h3_eigenvalue: min_h3,
        min_hbar_eigenvalue: min_hbar.expect("decomposition has at least one segment"),
        worst_segment: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn reference_instance_blocks() {
        let spec = instances::brownian_target::<f64>();
        let m_path = build_m_path(&spec).unwrap();
        let dec = decompose(&spec, &m_path).unwrap();
        assert_eq!(dec.segments().len(), 1);
        let seg = dec.at_node(0);

        // D = [1 0] factors through the identity: z is the first control
        // unit, v the second.
        assert_relative_eq!(seg.m_mat, DMatrix::identity(2, 2), epsilon = 1e-14);
        assert_relative_eq!(seg.g, mat(1, 1, &[0.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.f, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.h1, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.h2, mat(1, 1, &[0.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.h3, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.hbar, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.abar, mat(1, 1, &[0.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.bbar, mat(1, 1, &[0.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.f_h3inv_ft, mat(1, 1, &[1.0]), epsilon = 1e-14);

        let report = schur_check(&dec);
        assert!(report.pass);
        assert_relative_eq!(report.min_hbar_eigenvalue, 1.0, epsilon = 1e-14);
        assert_relative_eq!(report.min_h3_eigenvalue.unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn square_input_has_empty_free_block() {
        let mut spec = instances::square_input::<f64>();
        spec.a = MatrixPath::constant(mat(1, 1, &[0.3]));
        spec.c = MatrixPath::constant(mat(1, 1, &[0.2]));
        let m_path = build_m_path(&spec).unwrap();
        let dec = decompose(&spec, &m_path).unwrap();
        let seg = dec.at_node(0);

        assert_eq!(seg.f.shape(), (1, 0));
        assert_eq!(seg.h3.shape(), (0, 0));
        assert_eq!(dec.v_dim(), 0);
        assert_relative_eq!(seg.g, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.hbar, mat(1, 1, &[1.0]), epsilon = 1e-14);
        // Abar = A - G C with the F-correction vanishing.
        assert_relative_eq!(seg.abar, mat(1, 1, &[0.1]), epsilon = 1e-14);
        assert_relative_eq!(seg.bbar, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.f_h3inv_ft, mat(1, 1, &[0.0]), epsilon = 1e-14);

        let report = schur_check(&dec);
        assert!(report.pass);
        assert!(report.min_h3_eigenvalue.is_none());
    }

    #[test]
    fn rank_deficient_d_is_rejected() {
        let d = mat(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let err = build_m(&d, 0).unwrap_err();
        assert!(matches!(err, Error::RankDeficientD { segment: 0, .. }));
    }

    #[test]
    fn degenerate_cost_fails_schur_check() {
        // R is only positive semidefinite; with D = [1 0] the Schur
        // complement Hbar = 1 - 1 = 0 and the reduced cost degenerates.
        let mut spec = instances::brownian_target::<f64>();
        spec.r = MatrixPath::constant(mat(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        let m_path = build_m_path(&spec).unwrap();
        let dec = decompose(&spec, &m_path).unwrap();
        let report = schur_check(&dec);
        assert!(!report.pass);
        assert!(report.min_hbar_eigenvalue.abs() < 1e-12);
        assert!(dec.at_node(0).hbar_inv().is_err());
    }

    #[test]
    fn piecewise_coefficients_share_segments_per_node() {
        let mut spec = instances::brownian_target::<f64>();
        spec.grid = TimeGrid::new(1.0, 4).unwrap();
        spec.d = MatrixPath::from_segments(
            vec![0.0, 0.5],
            vec![mat(1, 2, &[1.0, 0.0]), mat(1, 2, &[0.0, 1.0])],
        )
        .unwrap();
        let m_path = build_m_path(&spec).unwrap();
        assert_eq!(m_path.segment_count(), 2);
        let dec = decompose(&spec, &m_path).unwrap();

        assert_eq!(dec.segments().len(), 2);
        // Node N evaluates on the last step, so it shares its segment.
        assert_eq!(dec.node_segments(), &[0, 0, 1, 1, 1]);
        // Second half: D = [0 1] swaps the roles of the two control units.
        let seg = dec.at_node(3);
        assert_relative_eq!(seg.g, mat(1, 1, &[1.0]), epsilon = 1e-14);
        assert_relative_eq!(seg.f, mat(1, 1, &[0.0]), epsilon = 1e-14);
        assert_relative_eq!(
            seg.m_mat,
            mat(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn half_grid_lookup_matches_left_node() {
        let mut spec = instances::brownian_target::<f64>();
        spec.grid = TimeGrid::new(1.0, 4).unwrap();
        spec.r = MatrixPath::from_segments(
            vec![0.0, 0.5],
            vec![
                mat(2, 2, &[1.0, 0.0, 0.0, 1.0]),
                mat(2, 2, &[2.0, 0.0, 0.0, 2.0]),
            ],
        )
        .unwrap();
        let m_path = build_m_path(&spec).unwrap();
        let dec = decompose(&spec, &m_path).unwrap();
        for k in 0..=4 {
            assert_eq!(dec.at_half(2 * k).h1, dec.at_node(k).h1);
        }
        // Midpoint of step k lies in step k's segment.
        assert_eq!(dec.at_half(3).h1, dec.at_node(1).h1);
        assert_eq!(dec.at_half(5).h1, dec.at_node(2).h1);
    }

    fn factor_case() -> impl Strategy<
        Value = (
            usize,
            usize,
            Vec<f64>,
            Vec<f64>,
            Vec<f64>,
            Vec<f64>,
        ),
    > {
        (1usize..=2, 1usize..=2).prop_flat_map(|(n, extra)| {
            let m = n + extra;
            (
                Just(n),
                Just(m),
                proptest::collection::vec(-1.0f64..1.0, n * m),
                proptest::collection::vec(-0.5f64..0.5, m * m),
                proptest::collection::vec(-1.0f64..1.0, n),
                proptest::collection::vec(-1.0f64..1.0, m - n),
            )
        })
    }

    proptest! {
        #[test]
        fn factor_invariants((n, m, d_data, l_data, z_data, v_data) in factor_case()) {
            let d = DMatrix::from_row_slice(n, m, &d_data);
            let sv = d.clone().svd(false, false).singular_values;
            prop_assume!(sv.min() > 0.05 * sv.max());

            let m_mat = build_m(&d, 0).unwrap();

            // Factor property.
            let mut dm = &d * &m_mat;
            for i in 0..n {
                dm[(i, i)] -= 1.0;
            }
            prop_assert!(max_abs(&dm) <= tol::TOL_FACTOR_RESIDUAL);

            // Kernel block has orthonormal columns.
            let kernel = m_mat.columns(n, m - n).into_owned();
            let mut gram = kernel.transpose() * &kernel;
            for i in 0..m - n {
                gram[(i, i)] -= 1.0;
            }
            prop_assert!(max_abs(&gram) <= 1e-10);

            // Cost equivalence u' R u = reduced cost, with a random
            // positive-definite R.
            let l = DMatrix::from_row_slice(m, m, &l_data);
            let r = &l * l.transpose() + DMatrix::identity(m, m) * 0.5;
            let seg = DecompSegment::build(
                &DMatrix::zeros(n, n),
                &DMatrix::zeros(n, m),
                &DMatrix::zeros(n, n),
                &d,
                &r,
                &m_mat,
                n,
                m,
            )
            .unwrap();
            let z = DVector::from_row_slice(&z_data);
            let v = DVector::from_row_slice(&v_data);
            let u = seg.control(&z, &v);
            prop_assert!((seg.full_cost(&u) - seg.reduced_cost(&z, &v)).abs() <= 1e-9);

            // Minimising the reduced cost over v at fixed z gives the
            // Schur complement quadratic form.
            let v_star = -(&seg.h3_inv_h2t * &z);
            let direct = (&seg.hbar * &z).dot(&z);
            prop_assert!((seg.reduced_cost(&z, &v_star) - direct).abs() <= 1e-9);
        }
    }
}
