//! Entropic optimal transport by Sinkhorn-Knopp scaling.
//!
//! Given a similarity matrix `S`, the plan maximizing `<M, S> + λ H(M)` over
//! couplings with uniform `1/N` marginals has the form
//! `Diag(r) · exp(S / λ) · Diag(c)`. We reach it by alternately rescaling rows
//! and columns of `exp(S / λ)`; the returned plan is row-stochastic so each row
//! can be used directly as a target distribution.
//!
//! All row, column and total sums go through [`fsum`], which is correctly
//! rounded. Permuting rows or columns of `S` therefore permutes the plan
//! bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};
use crate::numerics::{fsum, Matrix};

pub const DEFAULT_LAMBDA: f64 = 0.15;
pub const DEFAULT_ITERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub lambda: f64,
    /// Number of (row, column) normalization sweeps.
    pub n_iter: usize,
    /// Used only to flag the reported marginal errors.
    pub marginal_tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            n_iter: DEFAULT_ITERS,
            marginal_tolerance: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn new(lambda: f64, n_iter: usize) -> Self {
        Self {
            lambda,
            n_iter,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(OtterError::ConfigInvalid(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Row-stochastic plan.
    pub matrix: Matrix,
    /// max |row sum - 1/N| just before the final row normalization.
    pub row_marginal_error: f64,
    /// max |column sum - 1/N| just before the final row normalization.
    pub col_marginal_error: f64,
    /// Sweeps actually performed.
    pub iterations: usize,
    /// Whether both marginal errors ended below the requested tolerance.
    pub converged: bool,
}

impl TransportPlan {
    /// Shannon entropy of the plan viewed as a joint distribution (entries / N).
    pub fn entropy(&self) -> f64 {
        let n = self.matrix.rows() as f64;
        -fsum(
            self.matrix
                .as_slice()
                .iter()
                .filter(|&&m| m > 0.0)
                .map(|&m| {
                    let p = m / n;
                    p * p.ln()
                }),
        )
    }
}

/// Working state for the scaling iterations: a positive matrix whose total
/// mass starts at 1.
struct Scaling {
    t: Matrix,
    n: usize,
}

impl Scaling {
    fn new(s: &Matrix, lambda: f64) -> Result<Self> {
        if !s.is_square() {
            return Err(OtterError::NotSquare {
                rows: s.rows(),
                cols: s.cols(),
            });
        }
        if s.rows() == 0 {
            return Err(OtterError::ShapeMismatch("empty similarity matrix".into()));
        }
        if !s.is_finite() {
            return Err(OtterError::NonFinite("similarity matrix".into()));
        }
        if !(lambda > 0.0) {
            return Err(OtterError::ConfigInvalid(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        // exp(S/λ - max(S/λ)); the constant factor cancels in the mass normalization.
        let max = s.max();
        let mut t = s.map(|v| ((v - max) / lambda).exp());
        let total = fsum(t.as_slice().iter().copied());
        if !(total > 0.0) || !total.is_finite() {
            return Err(OtterError::NonFinite("total transport mass".into()));
        }
        t.as_mut_slice().iter_mut().for_each(|v| *v /= total);
        Ok(Self { t, n: s.rows() })
    }

    fn row_sums(&self) -> Vec<f64> {
        self.t.row_iter().map(|r| fsum(r.iter().copied())).collect()
    }

    fn col_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| fsum((0..self.n).map(|i| self.t[(i, j)])))
            .collect()
    }

    /// Rescales rows to sum to `target`.
    fn normalize_rows(&mut self, target_scale: f64) -> Result<()> {
        let sums = self.row_sums();
        for (i, s) in sums.into_iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(OtterError::NonFinite(format!("row {i} lost all mass")));
            }
            let denom = s * target_scale;
            self.t.row_mut(i).iter_mut().for_each(|v| *v /= denom);
        }
        Ok(())
    }

    fn normalize_cols(&mut self) -> Result<()> {
        let sums = self.col_sums();
        let n = self.n as f64;
        for (j, s) in sums.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(OtterError::NonFinite(format!("column {j} lost all mass")));
            }
        }
        for i in 0..self.n {
            for (v, s) in self.t.row_mut(i).iter_mut().zip(&sums) {
                *v /= s * n;
            }
        }
        Ok(())
    }

    /// One row-then-column sweep towards uniform 1/N marginals.
    fn sweep(&mut self) -> Result<()> {
        self.normalize_rows(self.n as f64)?;
        self.normalize_cols()
    }

    fn marginal_errors(&self) -> (f64, f64) {
        let target = 1.0 / self.n as f64;
        let err = |v: Vec<f64>| {
            v.into_iter()
                .map(|s| (s - target).abs())
                .fold(0.0, f64::max)
        };
        (err(self.row_sums()), err(self.col_sums()))
    }

    fn finish(mut self, iterations: usize, tol: f64) -> Result<TransportPlan> {
        let (row_err, col_err) = self.marginal_errors();
        self.normalize_rows(1.0)?;
        Ok(TransportPlan {
            matrix: self.t,
            row_marginal_error: row_err,
            col_marginal_error: col_err,
            iterations,
            converged: row_err < tol && col_err < tol,
        })
    }
}

/// Fixed-iteration Sinkhorn-Knopp: `cfg.n_iter` sweeps of row then column
/// normalization to `1/N`, followed by a final row normalization to 1.
///
/// With `n_iter == 0` this is the row softmax of `S / λ`.
pub fn sinkhorn(s: &Matrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let mut state = Scaling::new(s, cfg.lambda)?;
    for _ in 0..cfg.n_iter {
        state.sweep()?;
    }
    state.finish(cfg.n_iter, cfg.marginal_tolerance)
}

/// Runs sweeps until both marginal errors drop below `tol` or `max_iter`
/// sweeps have been made. Failing to converge is reported through
/// [`TransportPlan::converged`], not as an error.
pub fn sinkhorn_converged(
    s: &Matrix,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TransportPlan> {
    let mut state = Scaling::new(s, lambda)?;
    let mut iterations = 0;
    while iterations < max_iter {
        state.sweep()?;
        iterations += 1;
        let (r, c) = state.marginal_errors();
        if r < tol && c < tol {
            break;
        }
    }
    let plan = state.finish(iterations, tol)?;
    if !plan.converged {
        log::warn!(
            "sinkhorn did not reach tolerance {tol:e} in {max_iter} sweeps (row {:e}, col {:e})",
            plan.row_marginal_error,
            plan.col_marginal_error
        );
    }
    Ok(plan)
}
