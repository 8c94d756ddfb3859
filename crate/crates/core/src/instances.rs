//! Canonical problem instances used by tests, the acceptance suite, and the
//! CLI examples.
//!
//! The constructors cover the qualitatively different regimes:
//!
//! * [`brownian_target`]: the scalar reference instance with closed-form
//!   solution; steers `dx = v dt + z dW` from `0` to `W(T)`.
//! * [`deterministic_target`]: same coefficients, target `a` with no noise
//!   loading; the optimal control is the constant drift `(a - x0) / T`.
//! * [`square_input`]: `m = n`, so the free drift block is empty and exact
//!   controllability fails structurally.
//! * [`partial_actuation`]: `n = 2` with a single free drift channel that
//!   never rotates, so the reachable directions stay rank one.
//! * [`random_controllable`]: seeded random instances with piecewise
//!   constant coefficients for batteries and cross-checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problem::{MatrixPath, ProblemSpec, TerminalTarget, TimeGrid};
use crate::scalar::{real, Real};

fn constant<T: Real>(rows: usize, cols: usize, data: &[f64]) -> MatrixPath<T> {
    MatrixPath::constant(DMatrix::from_row_slice(
        rows,
        cols,
        &data.iter().map(|&x| real::<T>(x)).collect::<Vec<_>>(),
    ))
}

fn vector<T: Real>(data: &[f64]) -> DVector<T> {
    DVector::from_iterator(data.len(), data.iter().map(|&x| real::<T>(x)))
}

/// Scalar reference instance: `n = 1`, `m = 2`,
/// `dx = v dt + z dW`, `R = I`, `x0 = 0`, target `W(T)`, `T = 1`.
///
/// Closed forms: `Pbar(t) = 1 - t`, `p(t) = -W(t)`, `q = -1`, `K = 0`,
/// `z*(t) = 1/(2 - t)`, `v*(t) = Y(t)`, optimal energy `ln 2`.
pub fn brownian_target<T: Real>() -> ProblemSpec<T> {
    ProblemSpec {
        n: 1,
        m: 2,
        grid: TimeGrid::new(T::one(), 1000).unwrap(),
        x0: vector(&[0.0]),
        a: constant(1, 1, &[0.0]),
        b: constant(1, 2, &[0.0, 1.0]),
        c: constant(1, 1, &[0.0]),
        d: constant(1, 2, &[1.0, 0.0]),
        r: constant(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        q: None,
        target: TerminalTarget {
            a: vector(&[0.0]),
            b: vector(&[1.0]),
        },
    }
}

/// [`brownian_target`] coefficients with a deterministic target `a` and
/// initial state `x0`.
///
/// Closed forms: `v* = (a - x0) / T` constant, `z* = 0`, energy
/// `(a - x0)^2 / T`, `K = (a - x0) / T`, `Pbar(0) = T`.
pub fn deterministic_target<T: Real>(a: f64, x0: f64) -> ProblemSpec<T> {
    let mut spec = brownian_target::<T>();
    spec.x0 = vector(&[x0]);
    spec.target = TerminalTarget {
        a: vector(&[a]),
        b: vector(&[0.0]),
    };
    spec
}

/// Square-input instance: `n = m = 1`, `B = D = R = [1]`, `A = C = 0`.
///
/// The kernel of `D` is trivial, every control unit moves the diffusion,
/// and the system is not exactly controllable: `Pbar` vanishes identically
/// and the controllability Gramian is zero.
pub fn square_input<T: Real>() -> ProblemSpec<T> {
    ProblemSpec {
        n: 1,
        m: 1,
        grid: TimeGrid::new(T::one(), 1000).unwrap(),
        x0: vector(&[0.1]),
        a: constant(1, 1, &[0.0]),
        b: constant(1, 1, &[1.0]),
        c: constant(1, 1, &[0.0]),
        d: constant(1, 1, &[1.0]),
        r: constant(1, 1, &[1.0]),
        q: None,
        target: TerminalTarget {
            a: vector(&[0.7]),
            b: vector(&[0.3]),
        },
    }
}

/// Two-state instance with one free drift channel that only reaches the
/// first coordinate: `F = e1`, `A = C = 0`.
///
/// `Pbar(0) = diag(T, 0)` and the Gramian is `diag(T, 0)`: rank one, not
/// exactly controllable.
pub fn partial_actuation<T: Real>() -> ProblemSpec<T> {
    ProblemSpec {
        n: 2,
        m: 3,
        grid: TimeGrid::new(T::one(), 1000).unwrap(),
        x0: vector(&[0.0, 0.0]),
        a: constant(2, 2, &[0.0, 0.0, 0.0, 0.0]),
        b: constant(2, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        c: constant(2, 2, &[0.0, 0.0, 0.0, 0.0]),
        d: constant(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        r: constant(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        q: None,
        target: TerminalTarget {
            a: vector(&[0.4, -0.2]),
            b: vector(&[0.1, 0.3]),
        },
    }
}

/// Seeded random instance with `segments` piecewise-constant pieces.
///
/// Requires `1 <= n <= m`. Drift and diffusion entries are uniform on
/// `[-0.5, 0.5]`; `D` is redrawn until well conditioned; `R` is a random
/// symmetric positive-definite matrix with eigenvalues bounded away from
/// zero. The same seed always produces the same instance.
pub fn random_controllable<T: Real>(
    seed: u64,
    n: usize,
    m: usize,
    segments: usize,
) -> ProblemSpec<T> {
    assert!(n >= 1 && m >= n && segments >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);

    let draw_matrix = |rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64| {
        DMatrix::from_fn(r, c, |_, _| real::<T>(uniform(rng, -scale, scale)))
    };
    let draw_d = |rng: &mut ChaCha8Rng| loop {
        let d = DMatrix::<f64>::from_fn(n, m, |_, _| uniform(rng, -1.0, 1.0));
        let sv = d.clone().svd(false, false).singular_values;
        let s_max = sv.max();
        let s_min = sv.min();
        if s_min > 0.3 * s_max {
            return d.map(|x| real::<T>(x));
        }
    };
    let draw_r = |rng: &mut ChaCha8Rng| {
        let l = DMatrix::<f64>::from_fn(m, m, |_, _| uniform(rng, -0.5, 0.5));
        let r = &l * l.transpose() + DMatrix::<f64>::identity(m, m) * 0.5;
        r.map(|x| real::<T>(x))
    };

    let breaks: Vec<T> = (0..segments)
        .map(|i| T::one() * real::<T>(i as f64) / real::<T>(segments as f64))
        .collect();
    let path = |values: Vec<DMatrix<T>>, breaks: &[T]| {
        MatrixPath::from_segments(breaks.to_vec(), values).expect("breaks are increasing")
    };

    let a = path(
        (0..segments).map(|_| draw_matrix(&mut rng, n, n, 0.5)).collect(),
        &breaks,
    );
    let b = path(
        (0..segments).map(|_| draw_matrix(&mut rng, n, m, 0.5)).collect(),
        &breaks,
    );
    let c = path(
        (0..segments).map(|_| draw_matrix(&mut rng, n, n, 0.3)).collect(),
        &breaks,
    );
    let d = path((0..segments).map(|_| draw_d(&mut rng)).collect(), &breaks);
    let r = path((0..segments).map(|_| draw_r(&mut rng)).collect(), &breaks);

    let x0 = DVector::from_fn(n, |_, _| real::<T>(uniform(&mut rng, -0.5, 0.5)));
    let target = TerminalTarget {
        a: DVector::from_fn(n, |_, _| real::<T>(uniform(&mut rng, -0.5, 0.5))),
        b: DVector::from_fn(n, |_, _| real::<T>(uniform(&mut rng, -0.5, 0.5))),
    };

    ProblemSpec {
        n,
        m,
        grid: TimeGrid::new(T::one(), 1000).unwrap(),
        x0,
        a,
        b,
        c,
        d,
        r,
        q: None,
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixed_instances_validate() {
        assert!(brownian_target::<f64>().validate().pass());
        assert!(deterministic_target::<f64>(1.0, 0.0).validate().pass());
        assert!(square_input::<f64>().validate().pass());
        assert!(partial_actuation::<f64>().validate().pass());
    }

    #[test]
    fn random_instances_are_deterministic_and_valid() {
        for seed in 0..5 {
            let s1 = random_controllable::<f64>(seed, 2, 3, 2);
            let s2 = random_controllable::<f64>(seed, 2, 3, 2);
            assert_eq!(s1, s2);
            assert!(s1.validate().pass(), "seed {seed} should validate");
        }
        let s1 = random_controllable::<f64>(1, 1, 2, 1);
        let s2 = random_controllable::<f64>(2, 1, 2, 1);
        assert_ne!(s1, s2);
    }
}
