//! Covariant Hessian of grid functions and the augmented Hessian field.

use nalgebra::DMatrix;

use crate::spectral::ConeParams;

use super::grid::{Grid, ScalarField, TensorField};
use super::metric::MetricField;
use super::{eigen_wrt_metric, GeometryError};

/// Per-interior-point augmented Hessian `U = hess(u) + A`, its spectrum with
/// respect to the metric (ascending) and the cone margin (sum of the p
/// smallest eigenvalues).
#[derive(Debug, Clone)]
pub struct AugmentedHessianField {
    grid: Grid,
    n: usize,
    p: usize,
    interior: Vec<usize>,
    u_mats: Vec<f64>,
    spectra: Vec<f64>,
    margins: Vec<f64>,
}

impl AugmentedHessianField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Linear grid indices of the interior points, in row order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn u_at(&self, row: usize) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| self.u_mats[(row * n + i) * n + j])
    }

    /// Ascending eigenvalues w.r.t. the metric at interior row `row`.
    pub fn spectrum_at(&self, row: usize) -> &[f64] {
        &self.spectra[row * self.n..(row + 1) * self.n]
    }

    /// Sum of the p smallest eigenvalues at `row`.
    pub fn margin_at(&self, row: usize) -> f64 {
        self.margins[row]
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Rows with non-positive margin (admissibility violations).
    pub fn violations(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.margins[r] <= 0.0).collect()
    }

    pub fn p(&self) -> usize {
        self.p
    }
}

/// Covariant augmented Hessian of `u` at all interior points:
/// `U_ij = d_ij u - Gamma^k_ij d_k u + A_ij`, second-order central stencils,
/// spectrum taken with respect to the metric.
pub fn covariant_hessian(
    u: &ScalarField,
    metric: &MetricField,
    a: Option<&TensorField>,
    cp: &ConeParams,
) -> Result<AugmentedHessianField, GeometryError> {
    let grid = u.grid().clone();
    let n = grid.dim();
    debug_assert_eq!(cp.n(), n);
    let interior = grid.interior_indices();
    let rows = interior.len();
    let mut u_mats = vec![0.0; rows * n * n];
    let mut spectra = vec![0.0; rows * n];
    let mut margins = vec![0.0; rows];

    let v = u.values();
    let h = grid.spacing().to_vec();
    let mut grad = vec![0.0; n];
    for (row, &lin) in interior.iter().enumerate() {
        for d in 0..n {
            let s = grid.stride(d);
            grad[d] = (v[lin + s] - v[lin - s]) / (2.0 * h[d]);
        }
        let mut umat = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let si = grid.stride(i);
            let dii = (v[lin + si] - 2.0 * v[lin] + v[lin - si]) / (h[i] * h[i]);
            umat[(i, i)] = dii;
            for j in i + 1..n {
                let sj = grid.stride(j);
                let dij = (v[lin + si + sj] - v[lin + si - sj] - v[lin - si + sj]
                    + v[lin - si - sj])
                    / (4.0 * h[i] * h[j]);
                umat[(i, j)] = dij;
                umat[(j, i)] = dij;
            }
        }
        // Levi-Civita correction and augmentation
        for i in 0..n {
            for j in i..n {
                let mut corr = 0.0;
                for k in 0..n {
                    corr += metric.gamma_at(lin, k, i, j) * grad[k];
                }
                let mut val = umat[(i, j)] - corr;
                if let Some(af) = a {
                    val += 0.5 * (af.comp(lin, i, j) + af.comp(lin, j, i));
                }
                umat[(i, j)] = val;
                umat[(j, i)] = val;
            }
        }

        let g = metric.g_at(lin);
        let spectrum = eigen_wrt_metric(&umat, &g).map_err(|e| match e {
            GeometryError::MetricNotSpd { .. } => GeometryError::MetricNotSpd {
                point: grid.multi(lin),
            },
            other => other,
        })?;
        let vals = spectrum.values();
        for i in 0..n {
            for j in 0..n {
                u_mats[(row * n + i) * n + j] = umat[(i, j)];
            }
            spectra[row * n + i] = vals[i];
        }
        margins[row] = vals.iter().take(cp.p()).sum();
    }

    Ok(AugmentedHessianField {
        grid,
        n,
        p: cp.p(),
        interior,
        u_mats,
        spectra,
        margins,
    })
}
