//! Transform bases for the subspace relaxation.
//!
//! A basis is an `N x K` weight matrix `w_n(k)` used to compress the
//! reference signal and the output penalties: the relaxed program carries
//! `N` tracking multipliers instead of `K`. Weights are evaluated at
//! `k = 1..=K`; time 0 carries no tracking weight.
//!
//! Rows are kept raw (not orthonormalized). Ill-conditioned bases slow the
//! dual ascent; keep `N` well below `K` for long horizons.

use ndarray::{Array1, Array2};

use crate::{Error, Result};

/// Weight family `{w_n : 1 <= n <= N}` on the time grid `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    weights: Array2<f64>,
}

impl Basis {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() == 0 {
            return Err(Error::InvalidArgument("basis needs at least one row".into()));
        }
        if weights.nrows() > weights.ncols() {
            return Err(Error::InvalidArgument(format!(
                "basis has more rows ({}) than time steps ({})",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if weights
            .rows()
            .into_iter()
            .any(|r| r.iter().all(|&w| w == 0.0))
        {
            return Err(Error::InvalidArgument(
                "basis row identically zero".into(),
            ));
        }
        Ok(Self { weights })
    }

    /// Number of basis functions `N`.
    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    /// Horizon `K` the basis is defined over.
    pub fn horizon(&self) -> usize {
        self.weights.ncols()
    }

    /// `w_n(k)` with `0 <= n < N` and `1 <= k <= K`.
    pub fn weight(&self, n: usize, k: usize) -> f64 {
        self.weights[[n, k - 1]]
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Expand multipliers along time: `lambda_check_k = sum_n lambda_n w_n(k)`,
    /// returned as a length-`K` vector indexed by `k-1`.
    pub fn expand(&self, lambda: &Array1<f64>) -> Result<Array1<f64>> {
        if lambda.len() != self.len() {
            return Err(Error::Dimension(format!(
                "lambda has {} entries, basis has {} rows",
                lambda.len(),
                self.len()
            )));
        }
        Ok(lambda.dot(&self.weights))
    }

    /// Euclidean norm of the time-`k` weight column `(w_1(k), ..., w_N(k))`.
    pub fn column_norm(&self, k: usize) -> f64 {
        self.weights
            .column(k - 1)
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }
}

/// Identity family `w_n(k) = I{n = k}`; the relaxed program with this basis
/// is the full unrelaxed program.
pub fn degenerate_basis(horizon: usize) -> Result<Basis> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    Basis::new(Array2::eye(horizon))
}

/// Fourier family `{1, sin(omega m k), cos(omega m k) : 1 <= m <= (N-1)/2}`
/// evaluated at `k = 1..=K`. `N` is necessarily odd.
pub fn fourier_basis(horizon: usize, n: usize, omega: f64) -> Result<Basis> {
    if n % 2 == 0 {
        return Err(Error::InvalidArgument("N must be odd".into()));
    }
    if n < 1 || n > horizon {
        return Err(Error::InvalidArgument(format!(
            "N must satisfy 1 <= N <= K (N={n}, K={horizon})"
        )));
    }
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument("omega must be positive".into()));
    }
    let mut w = Array2::zeros((n, horizon));
    for k in 1..=horizon {
        w[[0, k - 1]] = 1.0;
    }
    for m in 1..=(n - 1) / 2 {
        for k in 1..=horizon {
            let arg = omega * m as f64 * k as f64;
            w[[2 * m - 1, k - 1]] = arg.sin();
            w[[2 * m, k - 1]] = arg.cos();
        }
    }
    Basis::new(w)
}

/// Default angular frequency: one fundamental period per horizon.
pub fn default_omega(horizon: usize) -> f64 {
    2.0 * std::f64::consts::PI / horizon as f64
}

/// Lossy compression of the reference: `r_hat_n = sum_k w_n(k) r_k`.
pub fn transform_reference(basis: &Basis, r: &[f64]) -> Result<Array1<f64>> {
    if r.len() != basis.horizon() {
        return Err(Error::Dimension(format!(
            "reference has {} entries, basis horizon is {}",
            r.len(),
            basis.horizon()
        )));
    }
    let rv = Array1::from_iter(r.iter().copied());
    Ok(basis.weights.dot(&rv))
}

/// Parse a CLI basis selector: `degenerate` or `fourier:N[:omega]`
/// (omega defaults to `2*pi/K`).
pub fn parse_basis_selector(selector: &str, horizon: usize) -> Result<Basis> {
    if selector == "degenerate" {
        return degenerate_basis(horizon);
    }
    if let Some(rest) = selector.strip_prefix("fourier:") {
        let mut parts = rest.split(':');
        let n: usize = parts
            .next()
            .ok_or_else(|| Error::Parse("fourier selector needs N".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad N in basis selector: {e}")))?;
        let omega = match parts.next() {
            Some(s) => s
                .parse()
                .map_err(|e| Error::Parse(format!("bad omega in basis selector: {e}")))?,
            None => default_omega(horizon),
        };
        if parts.next().is_some() {
            return Err(Error::Parse(format!("unexpected trailing part in '{selector}'")));
        }
        return fourier_basis(horizon, n, omega);
    }
    Err(Error::Parse(format!(
        "unknown basis selector '{selector}' (expected 'degenerate' or 'fourier:N[:omega]')"
    )))
}
