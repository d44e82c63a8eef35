//! Process model, steady-state Kalman filter and the AoI-indexed MSE ladder.

use crate::numerics::{spectral_radius, Matrix};
use crate::{Error, Result};

const STEADY_TOL: f64 = 1e-10;
const STEADY_MAX_ITERS: usize = 100_000;

/// Discrete LTI process `x' = A x + w`, sensor `y = C x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: Matrix,
    pub c: Matrix,
    pub q_w: Matrix,
    pub q_v: Matrix,
    /// Initial-state covariance; defaults to `q_w`.
    pub sigma0: Matrix,
}

impl LtiSystem {
    pub fn new(a: Matrix, c: Matrix, q_w: Matrix, q_v: Matrix, sigma0: Option<Matrix>) -> Result<Self> {
        let n = a.nrows();
        let m = c.nrows();
        let dims_ok = n >= 1
            && a.ncols() == n
            && c.ncols() == n
            && m >= 1
            && q_w.shape() == (n, n)
            && q_v.shape() == (m, m);
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "inconsistent system dimensions: A {:?}, C {:?}, Q_w {:?}, Q_v {:?}",
                a.shape(),
                c.shape(),
                q_w.shape(),
                q_v.shape()
            )));
        }
        let sigma0 = sigma0.unwrap_or_else(|| q_w.clone());
        if sigma0.shape() != (n, n) {
            return Err(Error::Dimension(format!("Sigma0 must be {n}x{n}")));
        }
        for (name, mat) in [("A", &a), ("C", &c), ("Q_w", &q_w), ("Q_v", &q_v), ("Sigma0", &sigma0)] {
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("{name} has non-finite entries")));
            }
        }
        for (name, mat) in [("Q_w", &q_w), ("Q_v", &q_v), ("Sigma0", &sigma0)] {
            if (mat - mat.transpose()).amax() > 1e-12 * (1.0 + mat.amax()) {
                return Err(Error::Model(format!("{name} must be symmetric")));
            }
        }
        let sys = Self { a, c, q_w, q_v, sigma0 };
        if sys.rho_sq()? <= 1.0 {
            log::warn!("rho^2(A) <= 1: the process is stable and retransmission control is trivial");
        }
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Squared spectral radius of `A`.
    pub fn rho_sq(&self) -> Result<f64> {
        let r = spectral_radius(&self.a)?;
        Ok(r * r)
    }
}

/// Converged filter quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateKalman {
    pub p_bar0: Matrix,
    pub k_bar: Matrix,
    pub iterations: usize,
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// One filter step: returns the posterior covariance and gain.
fn kalman_step(sys: &LtiSystem, p: &Matrix) -> Result<(Matrix, Matrix)> {
    let prior = symmetrize(&(&sys.a * p * sys.a.transpose() + &sys.q_w));
    let innov = &sys.c * &prior * sys.c.transpose() + &sys.q_v;
    let innov_inv = innov
        .try_inverse()
        .ok_or_else(|| Error::Model("innovation covariance is singular".into()))?;
    let gain = &prior * sys.c.transpose() * innov_inv;
    let n = sys.dim();
    let post = symmetrize(&((Matrix::identity(n, n) - &gain * &sys.c) * prior));
    Ok((post, gain))
}

/// Iterates the filter covariance recursion from `Sigma0` to its fixed point.
pub fn solve_steady_state(sys: &LtiSystem) -> Result<SteadyStateKalman> {
    let mut p = sys.sigma0.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=STEADY_MAX_ITERS {
        let (next, gain) = kalman_step(sys, &p)?;
        residual = (&next - &p).amax();
        if !residual.is_finite() {
            break;
        }
        p = next;
        if residual < STEADY_TOL {
            return Ok(SteadyStateKalman { p_bar0: p, k_bar: gain, iterations: it });
        }
    }
    Err(Error::Instability { iterations: STEADY_MAX_ITERS, residual })
}

/// `f(X) = A X A^T + Q_w`, symmetrized.
pub fn f_apply(sys: &LtiSystem, x: &Matrix) -> Result<Matrix> {
    let n = sys.dim();
    if x.shape() != (n, n) {
        return Err(Error::Dimension(format!("f expects a {n}x{n} matrix, got {:?}", x.shape())));
    }
    Ok(symmetrize(&(&sys.a * x * sys.a.transpose() + &sys.q_w)))
}

/// `traces[n-1] = Tr f^n(P̄₀)`: the receiver's MSE when the AoI is `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLadder {
    traces: Vec<f64>,
}

impl CostLadder {
    /// Builds exactly `max_depth` rungs or fails with the largest finite depth.
    pub fn build(sys: &LtiSystem, kal: &SteadyStateKalman, max_depth: usize) -> Result<Self> {
        if max_depth == 0 {
            return Err(Error::Usage("ladder depth must be at least 1".into()));
        }
        let ladder = Self::build_saturating(sys, kal, max_depth)?;
        if ladder.depth() < max_depth {
            return Err(Error::Depth { safe_depth: ladder.depth() });
        }
        Ok(ladder)
    }

    /// Builds up to `cap` rungs, stopping early before the trace overflows.
    pub fn build_saturating(sys: &LtiSystem, kal: &SteadyStateKalman, cap: usize) -> Result<Self> {
        let mut x = kal.p_bar0.clone();
        let mut traces = Vec::with_capacity(cap);
        while traces.len() < cap {
            x = f_apply(sys, &x)?;
            let t = x.trace();
            if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
                break;
            }
            traces.push(t);
        }
        if traces.is_empty() {
            return Err(Error::Depth { safe_depth: 0 });
        }
        Ok(Self { traces })
    }

    /// A ladder from explicit values (mainly for tests and synthetic problems).
    pub fn from_traces(traces: Vec<f64>) -> Result<Self> {
        if traces.is_empty() || traces.iter().any(|t| !t.is_finite()) {
            return Err(Error::Usage("ladder needs at least one finite entry".into()));
        }
        Ok(Self { traces })
    }

    pub fn depth(&self) -> usize {
        self.traces.len()
    }

    /// `Tr f^n(P̄₀)` for `1 <= n <= depth`.
    pub fn cost(&self, n: usize) -> f64 {
        assert!(n >= 1 && n <= self.traces.len(), "ladder index {n} outside 1..={}", self.traces.len());
        self.traces[n - 1]
    }

    pub fn get(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.traces.get(i).copied())
    }

    pub fn traces(&self) -> &[f64] {
        &self.traces
    }
}
