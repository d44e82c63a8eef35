//! Small dense-matrix helpers shared by the rest of the crate.
//!
//! Every matrix in this problem is tiny (the largest is the high-SNR chain
//! matrix, a few dozen rows), so everything here favours robustness over
//! speed. Stochastic matrices follow the column convention throughout: entry
//! `(j, i)` is the probability of moving from state `i` to state `j`, so each
//! column sums to one.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance on column sums accepted as "stochastic".
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vector);

impl ProbabilityVector {
    /// Normalizes `v` onto the simplex. Tiny negative round-off is clamped.
    pub fn from_weights(v: Vector) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite() || *x < -1e-9) {
            return Err(Error::Model("probability weights must be finite and nonnegative".into()));
        }
        let clamped = v.map(|x| x.max(0.0));
        let total: f64 = clamped.iter().sum();
        if total <= 0.0 {
            return Err(Error::Model("probability weights sum to zero".into()));
        }
        Ok(Self(clamped / total))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn into_inner(self) -> Vector {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn ensure_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Largest eigenvalue magnitude.
///
/// Uses the Francis double-shift QR (real Schur form) on a copy of `m`.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    ensure_square(m, "spectral radius input")?;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Model("spectral radius of a non-finite matrix".into()));
    }
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let eig = m.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Upper tail of the standard normal, `Q(x) = P[N(0,1) > x]`.
pub fn gaussian_q(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Checks that `p` is square, nonnegative and column-stochastic.
pub fn check_column_stochastic(p: &Matrix, tol: f64) -> Result<()> {
    let n = ensure_square(p, "transition matrix")?;
    for i in 0..n {
        let col = p.column(i);
        if col.iter().any(|x| !x.is_finite() || *x < -tol || *x > 1.0 + tol) {
            return Err(Error::Model(format!("column {} has entries outside [0,1]", i + 1)));
        }
        let sum: f64 = col.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Model(format!("column {} sums to {sum}, expected 1", i + 1)));
        }
    }
    Ok(())
}

/// Stationary distribution of a column-stochastic matrix.
///
/// Solves `(P - I) e = 0` with one balance row swapped for the normalization
/// row. Chains with transient states are fine as long as there is exactly one
/// closed class; anything else makes the augmented system singular and is
/// reported as a model error.
pub fn stationary_distribution(p: &Matrix) -> Result<ProbabilityVector> {
    check_column_stochastic(p, STOCHASTIC_TOL)?;
    let n = p.nrows();
    let mut sys = p - Matrix::identity(n, n);
    sys.row_mut(n - 1).fill(1.0);
    let mut rhs = Vector::zeros(n);
    rhs[n - 1] = 1.0;

    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Model("chain is reducible: stationary distribution not unique".into()))?;
    if sol.iter().any(|x| !x.is_finite() || *x < -1e-9) {
        return Err(Error::Model("chain is reducible: stationary distribution not unique".into()));
    }
    let e = ProbabilityVector::from_weights(sol)?;
    let residual = (p * e.as_vector() - e.as_vector()).amax();
    if residual > 1e-8 {
        return Err(Error::Model(format!(
            "stationary solve is ill-conditioned (residual {residual:e})"
        )));
    }
    Ok(e)
}

/// A nonzero vector spanning the one-dimensional null space of `m`.
///
/// The result is scaled to unit max-norm and its sign chosen so the entries
/// are nonnegative whenever the null space admits that (stationary vectors
/// always do); round-off negatives are clamped to zero.
pub fn null_space_vector(m: &Matrix) -> Result<Vector> {
    let n = ensure_square(m, "null-space input")?;
    let svd = m.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateModel("SVD did not produce right singular vectors".into()))?;
    let sigma = &svd.singular_values;
    let sigma_max = sigma.max();
    let threshold = 1e-10 * (n as f64) * sigma_max.max(1.0);
    let deficient: Vec<usize> = (0..n).filter(|&i| sigma[i] <= threshold).collect();
    if deficient.len() != 1 {
        return Err(Error::DegenerateModel(format!(
            "expected rank deficiency 1, found {}",
            deficient.len()
        )));
    }
    let mut v: Vector = v_t.row(deficient[0]).transpose();
    if v.sum() < 0.0 {
        v.neg_mut();
    }
    let scale = v.amax();
    v /= scale;
    if v.iter().all(|x| *x >= -1e-9) {
        v.apply(|x| *x = x.max(0.0));
    }
    Ok(v)
}
