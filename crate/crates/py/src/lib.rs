//! Python bindings exposing the operator calculus, cone predicates, the
//! expression evaluator and the preset solve pipeline.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nalgebra::DMatrix;
use pluris::cli::{build_spec, preset_config};
use pluris::expr::{self, Env};
use pluris::monitors::run_monitors;
use pluris::solver::continuity_solve;
use pluris::spectral::{self, ConeParams, Spectrum};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(format!("{e}"))
}

fn cone(values: &[f64], p: usize) -> PyResult<(Spectrum, ConeParams)> {
    let cp = ConeParams::new(values.len(), p).map_err(value_err)?;
    let lambda = Spectrum::new(values.to_vec()).map_err(value_err)?;
    Ok((lambda, cp))
}

/// Sum of the p smallest entries (the minimum p-tuple sum).
#[pyfunction]
fn min_p_sum(values: Vec<f64>, p: usize) -> PyResult<f64> {
    let (lambda, cp) = cone(&values, p)?;
    spectral::min_p_sum(&lambda, &cp).map_err(value_err)
}

/// Strict cone membership: every p-tuple sum positive.
#[pyfunction]
fn in_cone(values: Vec<f64>, p: usize) -> PyResult<bool> {
    let (lambda, cp) = cone(&values, p)?;
    spectral::in_cone(&lambda, &cp).map_err(value_err)
}

/// Normalized operator value and gradient: `(F, [F_1, ..., F_n])`.
#[pyfunction]
fn eval_f(values: Vec<f64>, p: usize) -> PyResult<(f64, Vec<f64>)> {
    let (lambda, cp) = cone(&values, p)?;
    let eval = spectral::eval_f(&lambda, &cp).map_err(value_err)?;
    Ok((eval.value, eval.grad))
}

/// Direct-product reference value of the un-normalized operator.
#[pyfunction]
fn brute_force_m(values: Vec<f64>, p: usize) -> PyResult<f64> {
    let (lambda, cp) = cone(&values, p)?;
    pluris::oracles::brute_force_m(&lambda, &cp).map_err(value_err)
}

/// `F` and its matrix derivative `dF/dU` for a symmetric matrix in the cone.
#[pyfunction]
fn matrix_derivative(matrix: Vec<Vec<f64>>, p: usize) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let n = matrix.len();
    if matrix.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let cp = ConeParams::new(n, p).map_err(value_err)?;
    let u = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
    let (f, df) = spectral::matrix_derivative(&u, &cp).map_err(value_err)?;
    let rows = (0..n)
        .map(|i| (0..n).map(|j| df[(i, j)]).collect())
        .collect();
    Ok((f, rows))
}

/// Evaluate an expression in the config language at `(x, z, p)`.
#[pyfunction]
#[pyo3(signature = (text, x, z = 0.0, p = None))]
fn eval_expr(text: &str, x: Vec<f64>, z: f64, p: Option<Vec<f64>>) -> PyResult<f64> {
    let ast = expr::parse(text, x.len()).map_err(value_err)?;
    let p = p.unwrap_or_else(|| vec![0.0; x.len()]);
    expr::eval(&ast, &Env::new(&x, z, &p)).map_err(value_err)
}

/// Solve a shipped preset end to end; returns a summary dict with the final
/// residual, cone margin, homotopy step count and sandwich margins.
#[pyfunction]
#[pyo3(signature = (name, grid = None))]
fn solve_preset(py: Python<'_>, name: &str, grid: Option<usize>) -> PyResult<Py<PyDict>> {
    let mut cfg = preset_config(name).map_err(value_err)?;
    if let Some(g) = grid {
        cfg.problem.as_mut().expect("preset has problem").grid = Some(g);
    }
    let spec = build_spec(&cfg).map_err(value_err)?;
    let report = spec.validate_subsolution().map_err(value_err)?;
    if !report.pass {
        return Err(PyValueError::new_err("subsolution validation failed"));
    }
    let result = continuity_solve(&spec).map_err(value_err)?;
    let monitors = run_monitors(&spec, &result.u).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("preset", name)?;
    out.set_item("grid", spec.grid().shape()[0])?;
    out.set_item("residual_sup", result.final_residual_sup)?;
    out.set_item("cone_margin", result.final_cone_margin)?;
    out.set_item("continuity_steps", result.log.len())?;
    out.set_item("c0_lower_margin", monitors.c0.lower_margin)?;
    out.set_item("c0_upper_margin", monitors.c0.upper_margin)?;
    out.set_item("monitors_pass", monitors.pass)?;
    Ok(out.into())
}

#[pymodule]
fn pluris_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(min_p_sum, m)?)?;
    m.add_function(wrap_pyfunction!(in_cone, m)?)?;
    m.add_function(wrap_pyfunction!(eval_f, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_m, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(eval_expr, m)?)?;
    m.add_function(wrap_pyfunction!(solve_preset, m)?)?;
    Ok(())
}
