//! Riemannian metric field on a grid: `g`, its inverse and the Christoffel
//! symbols of the Levi-Civita connection.

use nalgebra::{Cholesky, DMatrix};

use crate::expr::{self, Env, ExprAst};

use super::grid::{Grid, ScalarField};
use super::GeometryError;

/// Per-point symmetric positive-definite metric with inverse and Christoffel
/// symbols. Gamma is indexed `[point][k][i][j]` and symmetric in `(i, j)`.
#[derive(Debug, Clone)]
pub struct MetricField {
    grid: Grid,
    g: Vec<f64>,
    g_inv: Vec<f64>,
    gamma: Vec<f64>,
    constant: bool,
}

impl MetricField {
    /// Flat chart: `g = I`, `Gamma = 0` exactly.
    pub fn identity(grid: &Grid) -> MetricField {
        let n = grid.dim();
        let len = grid.len();
        let mut g = vec![0.0; len * n * n];
        for lin in 0..len {
            for i in 0..n {
                g[(lin * n + i) * n + i] = 1.0;
            }
        }
        MetricField {
            grid: grid.clone(),
            g_inv: g.clone(),
            g,
            gamma: vec![0.0; len * n * n * n],
            constant: true,
        }
    }

    /// Metric from a pointwise matrix function; checks SPD everywhere and
    /// fills Christoffel symbols by grid differentiation.
    pub fn from_fn(
        grid: &Grid,
        mut f: impl FnMut(&[f64]) -> DMatrix<f64>,
    ) -> Result<MetricField, GeometryError> {
        let n = grid.dim();
        let len = grid.len();
        let mut g = vec![0.0; len * n * n];
        let mut g_inv = vec![0.0; len * n * n];
        let mut x = vec![0.0; n];
        let mut constant = true;
        let mut first: Option<DMatrix<f64>> = None;
        for lin in 0..len {
            grid.coords_into(lin, &mut x);
            let m = f(&x);
            assert_eq!(m.nrows(), n, "metric matrix must be n x n");
            let sym = 0.5 * (&m + m.transpose());
            let chol = Cholesky::new(sym.clone()).ok_or_else(|| GeometryError::MetricNotSpd {
                point: grid.multi(lin),
            })?;
            let inv = chol.inverse();
            for i in 0..n {
                for j in 0..n {
                    g[(lin * n + i) * n + j] = sym[(i, j)];
                    g_inv[(lin * n + i) * n + j] = inv[(i, j)];
                }
            }
            match &first {
                None => first = Some(sym),
                Some(f0) => {
                    if constant && (&sym - f0).amax() != 0.0 {
                        constant = false;
                    }
                }
            }
        }
        let mut metric = MetricField {
            grid: grid.clone(),
            g,
            g_inv,
            gamma: vec![0.0; len * n * n * n],
            constant,
        };
        christoffel(&mut metric);
        Ok(metric)
    }

    /// Metric entries given as x-only expressions, row-major `n*n`; the
    /// matrix is symmetrized before the SPD check.
    pub fn from_expressions(
        grid: &Grid,
        entries: &[ExprAst],
    ) -> Result<MetricField, GeometryError> {
        let n = grid.dim();
        assert_eq!(entries.len(), n * n, "need n*n metric entries");
        let mut err: Option<GeometryError> = None;
        let metric = MetricField::from_fn(grid, |x| {
            let env = Env::x_only(x);
            DMatrix::from_fn(n, n, |i, j| {
                match expr::eval(&entries[i * n + j], &env) {
                    Ok(v) => v,
                    Err(e) => {
                        if err.is_none() {
                            err = Some(e.into());
                        }
                        f64::NAN
                    }
                }
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
        metric
    }

    /// Conformal metric `g = exp(2 q(x)) I`.
    pub fn conformal(grid: &Grid, q: &ExprAst) -> Result<MetricField, GeometryError> {
        let factor = ScalarField::from_expr(grid, q)?;
        let n = grid.dim();
        let mut lin = 0usize;
        MetricField::from_fn(grid, |_x| {
            let s = (2.0 * factor.get(lin)).exp();
            lin += 1;
            DMatrix::from_diagonal_element(n, n, s)
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// True when the metric does not vary across the grid.
    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn g_entry(&self, lin: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        self.g[(lin * n + i) * n + j]
    }

    pub fn g_at(&self, lin: usize) -> DMatrix<f64> {
        let n = self.grid.dim();
        DMatrix::from_fn(n, n, |i, j| self.g[(lin * n + i) * n + j])
    }

    pub fn g_inv_at(&self, lin: usize) -> DMatrix<f64> {
        let n = self.grid.dim();
        DMatrix::from_fn(n, n, |i, j| self.g_inv[(lin * n + i) * n + j])
    }

    pub fn gamma_at(&self, lin: usize, k: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        self.gamma[((lin * n + k) * n + i) * n + j]
    }

    /// Smallest metric eigenvalue over the grid (SPD sanity measure).
    pub fn min_eigenvalue(&self) -> f64 {
        let mut min = f64::INFINITY;
        for lin in 0..self.grid.len() {
            let g = self.g_at(lin);
            if let Ok((vals, _)) = crate::spectral::symmetric_eigen_sorted(&g) {
                min = min.min(vals[0]);
            }
        }
        min
    }
}

/// Fill the Christoffel symbols from the stored metric:
/// `Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)`,
/// with central differences in the interior and one-sided second-order
/// stencils on the boundary layer. Constant metrics produce exact zeros.
pub fn christoffel(metric: &mut MetricField) {
    let grid = metric.grid.clone();
    let n = grid.dim();
    if metric.constant {
        metric.gamma.iter_mut().for_each(|v| *v = 0.0);
        return;
    }

    // derivative of one metric entry along an axis, matching the grid stencils
    let dg = |metric: &MetricField, lin: usize, axis: usize, i: usize, j: usize| -> f64 {
        let s = grid.stride(axis);
        let h = grid.spacing()[axis];
        let idx = (lin / s) % grid.shape()[axis];
        let last = grid.shape()[axis] - 1;
        if idx == 0 {
            (-3.0 * metric.g_entry(lin, i, j) + 4.0 * metric.g_entry(lin + s, i, j)
                - metric.g_entry(lin + 2 * s, i, j))
                / (2.0 * h)
        } else if idx == last {
            (3.0 * metric.g_entry(lin, i, j) - 4.0 * metric.g_entry(lin - s, i, j)
                + metric.g_entry(lin - 2 * s, i, j))
                / (2.0 * h)
        } else {
            (metric.g_entry(lin + s, i, j) - metric.g_entry(lin - s, i, j)) / (2.0 * h)
        }
    };

    let mut gamma = vec![0.0; metric.gamma.len()];
    for lin in 0..grid.len() {
        // d[l][i][j] = d_l g_ij at this point
        let mut d = vec![0.0; n * n * n];
        for l in 0..n {
            for i in 0..n {
                for j in i..n {
                    let v = dg(metric, lin, l, i, j);
                    d[(l * n + i) * n + j] = v;
                    d[(l * n + j) * n + i] = v;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += metric.g_inv[(lin * n + k) * n + l]
                            * (d[(i * n + j) * n + l] + d[(j * n + i) * n + l]
                                - d[(l * n + i) * n + j]);
                    }
                    let v = 0.5 * acc;
                    gamma[((lin * n + k) * n + i) * n + j] = v;
                    gamma[((lin * n + k) * n + j) * n + i] = v;
                }
            }
        }
    }
    metric.gamma = gamma;
}
