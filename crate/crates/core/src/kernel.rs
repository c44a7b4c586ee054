//! First-order stable spline (TC) kernel.
//!
//! `K[a][b] = alpha^(max(a, b) + 1)` in 0-based storage. The kernel is the
//! covariance of a reversed random walk: `theta[p-1] = z[p-1]` and
//! `theta[a] = theta[a+1] + z[a]` with independent increments of variance
//! `d[a] = alpha^(a+1) (1 - alpha)` for `a < p - 1` and `d[p-1] = alpha^p`.
//! Its precision is therefore tridiagonal and known in closed form.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct StableSplineKernel {
    alpha: f64,
    p: usize,
    k: DMatrix<f64>,
    k_inv: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// Random-walk increment variances, length p.
    increments: Vec<f64>,
}

impl StableSplineKernel {
    pub fn new(alpha: f64, p: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("kernel decay must lie in (0,1), got {alpha}")));
        }
        if p == 0 {
            return Err(Error::Domain("FIR order must be at least 1".into()));
        }

        let k = DMatrix::from_fn(p, p, |a, b| alpha.powi((a.max(b) + 1) as i32));

        let increments: Vec<f64> = (0..p)
            .map(|a| {
                let level = alpha.powi((a + 1) as i32);
                if a + 1 < p {
                    level * (1.0 - alpha)
                } else {
                    level
                }
            })
            .collect();

        let mut k_inv = DMatrix::zeros(p, p);
        for a in 0..p {
            let mut diag = 1.0 / increments[a];
            if a > 0 {
                diag += 1.0 / increments[a - 1];
            }
            k_inv[(a, a)] = diag;
            if a + 1 < p {
                let off = -1.0 / increments[a];
                k_inv[(a, a + 1)] = off;
                k_inv[(a + 1, a)] = off;
            }
        }

        let chol = Cholesky::new(k.clone())
            .ok_or_else(|| Error::Factorization(format!("stable spline kernel alpha={alpha} p={p}")))?
            .unpack();

        Ok(Self { alpha, p, k, k_inv, chol, increments })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Closed-form tridiagonal inverse.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.k_inv
    }

    /// Lower Cholesky factor `L` with `L L' = K`.
    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `v' K^-1 v`, evaluated as a sum of squared random-walk increments so
    /// the result is nonnegative and vanishes only at `v = 0`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.p {
            return Err(Error::Dimension { expected: self.p, got: v.len() });
        }
        Ok(self.quad_form_unchecked(v))
    }

    pub(crate) fn quad_form_unchecked(&self, v: &[f64]) -> f64 {
        let last = self.p - 1;
        let mut q = v[last] * v[last] / self.increments[last];
        for a in 0..last {
            let step = v[a] - v[a + 1];
            q += step * step / self.increments[a];
        }
        q
    }
}
