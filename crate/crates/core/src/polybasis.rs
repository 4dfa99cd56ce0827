//! Orthogonal polynomial time basis for the autoregressive coefficient.
//!
//! Columns are built by Gram-Schmidt on the Vandermonde matrix of the
//! standardized time grid `x = (t - c) / s`, with `c = (T + 1) / 2` and
//! `s = max(1, (T - 1) / 2)`, so `x` lies in `[-1, 1]` on the grid. Column 0 is
//! the raw constant 1; columns `q >= 1` are unit-norm and orthogonal to every
//! other column (hence zero-sum). Each column's polynomial coefficients in `x`
//! are carried through every Gram-Schmidt operation, which makes evaluation
//! beyond the grid an exact polynomial continuation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoBasis {
    t_count: usize,
    degree: usize,
    center: f64,
    scale: f64,
    /// Row-major T x (Q+1).
    columns: Vec<Vec<f64>>,
    /// `monomial_coeffs[q][k]` multiplies `x^k` in column `q`.
    monomial_coeffs: Vec<Vec<f64>>,
}

pub fn build_orthogonal_basis(t_count: usize, degree: usize) -> Result<OrthoBasis> {
    if degree + 1 > t_count {
        return Err(Error::Rank { degree, t_count });
    }
    let center = (t_count as f64 + 1.0) / 2.0;
    let scale = ((t_count as f64 - 1.0) / 2.0).max(1.0);
    let grid: Vec<f64> = (1..=t_count).map(|t| (t as f64 - center) / scale).collect();
    let n_cols = degree + 1;

    // Unit-norm copies of the accepted columns, used only as projection directions.
    let mut units: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_cols);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(n_cols);
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(n_cols);

    let const_norm = (t_count as f64).sqrt();
    let mut c0 = vec![0.0; n_cols];
    c0[0] = 1.0;
    units.push((
        vec![1.0 / const_norm; t_count],
        c0.iter().map(|c| c / const_norm).collect(),
    ));
    values.push(vec![1.0; t_count]);
    coeffs.push(c0);

    for q in 1..n_cols {
        let mut v: Vec<f64> = grid.iter().map(|x| x.powi(q as i32)).collect();
        let mut c = vec![0.0; n_cols];
        c[q] = 1.0;
        // Two passes of modified Gram-Schmidt restore orthogonality lost to cancellation.
        for _ in 0..2 {
            for (u, uc) in &units {
                let proj = dot(&v, u);
                axpy(-proj, u, &mut v);
                axpy(-proj, uc, &mut c);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if !(norm > 1e-12 * const_norm) {
            return Err(Error::Rank { degree, t_count });
        }
        v.iter_mut().for_each(|x| *x /= norm);
        c.iter_mut().for_each(|x| *x /= norm);
        units.push((v.clone(), c.clone()));
        values.push(v);
        coeffs.push(c);
    }

    let columns = (0..t_count)
        .map(|t| values.iter().map(|col| col[t]).collect())
        .collect();
    Ok(OrthoBasis {
        t_count,
        degree,
        center,
        scale,
        columns,
        monomial_coeffs: coeffs,
    })
}

impl OrthoBasis {
    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_terms(&self) -> usize {
        self.degree + 1
    }

    /// Basis values at one-based time `t` on the fitted grid.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.columns[t - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, q: usize) -> Vec<f64> {
        self.columns.iter().map(|r| r[q]).collect()
    }

    pub fn monomial_coeffs(&self) -> &[Vec<f64>] {
        &self.monomial_coeffs
    }

    /// Standardization `(center, scale)` mapping raw time to the polynomial variable.
    pub fn standardization(&self) -> (f64, f64) {
        (self.center, self.scale)
    }

    /// Evaluate every column's polynomial at one-based raw time `t`, which may lie past `T`.
    pub fn evaluate_beyond(&self, t: usize) -> Result<Vec<f64>> {
        if t < 1 {
            return Err(Error::Domain("basis time index starts at 1".into()));
        }
        let x = (t as f64 - self.center) / self.scale;
        Ok(self
            .monomial_coeffs
            .iter()
            .map(|c| c.iter().rev().fold(0.0, |acc, &a| acc * x + a))
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}
