//! Uniform tensor-product grid on the unit box and grid-function storage.

use crate::expr::{self, Env, ExprAst};

use super::GeometryError;

/// Axis-aligned uniform grid on `[0,1]^n`, row-major linearization, with the
/// boundary being exactly the outermost layer of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n: usize,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl Grid {
    /// Grid with the same number of points along every axis.
    pub fn uniform(n: usize, points_per_axis: usize) -> Result<Grid, GeometryError> {
        Grid::with_shape(vec![points_per_axis; n])
    }

    pub fn with_shape(shape: Vec<usize>) -> Result<Grid, GeometryError> {
        let n = shape.len();
        if n < 2 {
            return Err(GeometryError::BadGrid(format!(
                "dimension must be >= 2, got {n}"
            )));
        }
        if let Some(&bad) = shape.iter().find(|&&s| s < 9) {
            return Err(GeometryError::BadGrid(format!(
                "need at least 9 points per axis, got {bad}"
            )));
        }
        let spacing = shape.iter().map(|&s| 1.0 / (s as f64 - 1.0)).collect();
        let mut strides = vec![1usize; n];
        for d in (0..n - 1).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        Ok(Grid {
            n,
            shape,
            spacing,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn lin(&self, midx: &[usize]) -> usize {
        midx.iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn multi_into(&self, lin: usize, out: &mut [usize]) {
        let mut rest = lin;
        for d in 0..self.n {
            out[d] = rest / self.strides[d];
            rest %= self.strides[d];
        }
    }

    pub fn multi(&self, lin: usize) -> Vec<usize> {
        let mut out = vec![0; self.n];
        self.multi_into(lin, &mut out);
        out
    }

    pub fn coords_into(&self, lin: usize, out: &mut [f64]) {
        let mut rest = lin;
        for d in 0..self.n {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            out[d] = i as f64 * self.spacing[d];
        }
    }

    pub fn coords(&self, lin: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.coords_into(lin, &mut out);
        out
    }

    pub fn is_boundary(&self, lin: usize) -> bool {
        let mut rest = lin;
        for d in 0..self.n {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            if i == 0 || i == self.shape[d] - 1 {
                return true;
            }
        }
        false
    }

    pub fn is_interior(&self, lin: usize) -> bool {
        !self.is_boundary(lin)
    }

    pub fn interior_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_interior(i)).collect()
    }

    pub fn boundary_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_boundary(i)).collect()
    }

    pub fn interior_count(&self) -> usize {
        self.shape.iter().map(|&s| s - 2).product()
    }

    /// Chart distance to the boundary of the unit box.
    pub fn boundary_distance(&self, lin: usize) -> f64 {
        let mut rest = lin;
        let mut d_min = f64::INFINITY;
        for d in 0..self.n {
            let i = rest / self.strides[d];
            rest %= self.strides[d];
            let x = i as f64 * self.spacing[d];
            d_min = d_min.min(x).min(1.0 - x);
        }
        d_min
    }
}

/// Scalar grid function, one value per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> ScalarField {
        ScalarField {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> ScalarField {
        assert_eq!(values.len(), grid.len());
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> f64) -> ScalarField {
        let mut values = vec![0.0; grid.len()];
        let mut x = vec![0.0; grid.dim()];
        for (lin, slot) in values.iter_mut().enumerate() {
            grid.coords_into(lin, &mut x);
            *slot = f(&x);
        }
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    /// Evaluate an x-only expression at every grid point.
    pub fn from_expr(grid: &Grid, ast: &ExprAst) -> Result<ScalarField, GeometryError> {
        let mut values = vec![0.0; grid.len()];
        let mut x = vec![0.0; grid.dim()];
        for (lin, slot) in values.iter_mut().enumerate() {
            grid.coords_into(lin, &mut x);
            *slot = expr::eval(ast, &Env::x_only(&x))?;
        }
        Ok(ScalarField {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, lin: usize) -> f64 {
        self.values[lin]
    }

    pub fn set(&mut self, lin: usize, v: f64) {
        self.values[lin] = v;
    }
}

/// Symmetric (0,2)-tensor grid function, `n*n` components per point.
#[derive(Debug, Clone)]
pub struct TensorField {
    grid: Grid,
    comps: Vec<f64>,
}

impl TensorField {
    pub fn zeros(grid: &Grid) -> TensorField {
        let n = grid.dim();
        TensorField {
            grid: grid.clone(),
            comps: vec![0.0; grid.len() * n * n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn comp(&self, lin: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        self.comps[(lin * n + i) * n + j]
    }

    pub fn set_comp(&mut self, lin: usize, i: usize, j: usize, v: f64) {
        let n = self.grid.dim();
        self.comps[(lin * n + i) * n + j] = v;
    }

    pub fn trace_with(&self, lin: usize, inverse_metric: &nalgebra::DMatrix<f64>) -> f64 {
        let n = self.grid.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += inverse_metric[(i, j)] * self.comp(lin, i, j);
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Finite differences on grid functions
// ---------------------------------------------------------------------------

/// First derivative along `axis`; central in the interior, one-sided
/// second-order on the boundary layer.
pub fn deriv1_at(field: &ScalarField, lin: usize, axis: usize) -> f64 {
    let grid = field.grid();
    let s = grid.stride(axis);
    let h = grid.spacing()[axis];
    let i = (lin / s) % grid.shape()[axis];
    let last = grid.shape()[axis] - 1;
    let v = field.values();
    if i == 0 {
        (-3.0 * v[lin] + 4.0 * v[lin + s] - v[lin + 2 * s]) / (2.0 * h)
    } else if i == last {
        (3.0 * v[lin] - 4.0 * v[lin - s] + v[lin - 2 * s]) / (2.0 * h)
    } else {
        (v[lin + s] - v[lin - s]) / (2.0 * h)
    }
}

/// Pure second derivative along `axis`; central in the interior, four-point
/// one-sided second-order on the boundary layer.
pub fn deriv2_at(field: &ScalarField, lin: usize, axis: usize) -> f64 {
    let grid = field.grid();
    let s = grid.stride(axis);
    let h = grid.spacing()[axis];
    let i = (lin / s) % grid.shape()[axis];
    let last = grid.shape()[axis] - 1;
    let v = field.values();
    if i == 0 {
        (2.0 * v[lin] - 5.0 * v[lin + s] + 4.0 * v[lin + 2 * s] - v[lin + 3 * s]) / (h * h)
    } else if i == last {
        (2.0 * v[lin] - 5.0 * v[lin - s] + 4.0 * v[lin - 2 * s] - v[lin - 3 * s]) / (h * h)
    } else {
        (v[lin + s] - 2.0 * v[lin] + v[lin - s]) / (h * h)
    }
}

/// Mixed second derivative `d^2/dxa dxb`, nesting `deriv1_at` so that each
/// direction independently falls back to one-sided stencils at the boundary.
pub fn deriv2_mixed_at(field: &ScalarField, lin: usize, a: usize, b: usize) -> f64 {
    debug_assert_ne!(a, b);
    let grid = field.grid();
    let s = grid.stride(a);
    let h = grid.spacing()[a];
    let i = (lin / s) % grid.shape()[a];
    let last = grid.shape()[a] - 1;
    let d1 = |l: usize| deriv1_at(field, l, b);
    if i == 0 {
        (-3.0 * d1(lin) + 4.0 * d1(lin + s) - d1(lin + 2 * s)) / (2.0 * h)
    } else if i == last {
        (3.0 * d1(lin) - 4.0 * d1(lin - s) + d1(lin - 2 * s)) / (2.0 * h)
    } else {
        (d1(lin + s) - d1(lin - s)) / (2.0 * h)
    }
}

/// Interior-only central gradient (no bounds fallbacks; caller guarantees
/// `lin` is an interior point).
pub fn interior_gradient_into(field: &ScalarField, lin: usize, out: &mut [f64]) {
    let grid = field.grid();
    let v = field.values();
    for (axis, slot) in out.iter_mut().enumerate() {
        let s = grid.stride(axis);
        *slot = (v[lin + s] - v[lin - s]) / (2.0 * grid.spacing()[axis]);
    }
}
