//! Post-solve monitors realizing the a priori estimate quantities as
//! numerical diagnostics: the supersolution sandwich, empirical gradient and
//! Hessian bound ratios, and the boundary-collar barrier certificate.
//!
//! The constants appearing in the estimates are proof artifacts without
//! computable values, so apart from the C0 sandwich these monitors report
//! and never hard-fail.

use serde::Serialize;
use thiserror::Error;

use crate::expr::ExprError;
use crate::geometry::{
    deriv1_at, deriv2_at, deriv2_mixed_at, metric_matrix_derivative, GeometryError, ScalarField,
};
use crate::problem::{FzReport, ProblemError, ProblemSpec};
use crate::solver::{assemble_operator, residual, HomotopyContext, OperatorCoeffs, SolverError};
use crate::spectral::{self, ConeParams, Spectrum, SpectralError, StructureReport};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Supersolution of the linear comparison problem together with its
/// discrete residual.
#[derive(Debug, Clone)]
pub struct Supersolution {
    pub h: ScalarField,
    pub residual_sup: f64,
}

/// Solve `g^{ij} (d_ij h - Gamma^k_ij d_k h) + tr_g A = 0` with `h = phi` on
/// the boundary; for `(z,p)`-dependent tensors `A` is frozen at the
/// subsolution data.
pub fn supersolution_h(spec: &ProblemSpec) -> Result<Supersolution, MonitorError> {
    let grid = spec.grid();
    let n = grid.dim();
    let metric = spec.metric();
    let interior = grid.interior_indices();
    let mut row_of_lin = vec![-1_i64; grid.len()];
    for (row, &lin) in interior.iter().enumerate() {
        row_of_lin[lin] = row as i64;
    }

    // boundary data and the frozen tensor trace
    let mut phi_field = ScalarField::zeros(grid);
    for lin in 0..grid.len() {
        if grid.is_boundary(lin) {
            phi_field.set(lin, spec.phi_at(lin)?);
        }
    }
    let mut trace_a = vec![0.0; interior.len()];
    if spec.has_augmentation() {
        let mut x = vec![0.0; n];
        for (row, &lin) in interior.iter().enumerate() {
            let eh = spec.expr_augmented_hessian(spec.subsolution_expr(), lin)?;
            grid.coords_into(lin, &mut x);
            let a = spec.a_matrix(&x, eh.value, &eh.grad)?;
            trace_a[row] = (spec.metric().g_inv_at(lin) * a).trace();
        }
    }

    let (matrix, bc) = assemble_operator(
        grid,
        &interior,
        &row_of_lin,
        |_row, lin| {
            let g_inv = metric.g_inv_at(lin);
            let mut b = vec![0.0; n];
            for (k, slot) in b.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += g_inv[(i, j)] * metric.gamma_at(lin, k, i, j);
                    }
                }
                *slot = -acc;
            }
            Ok(OperatorCoeffs {
                w: g_inv,
                b,
                c: 0.0,
            })
        },
        Some(&phi_field),
    )?;

    let rhs: Vec<f64> = trace_a
        .iter()
        .zip(&bc)
        .map(|(ta, b)| -ta - b)
        .collect();

    let settings = spec.settings();
    let solution = if n == 2 && grid.shape().iter().all(|&s| s <= 129) {
        crate::linsolve::solve_banded(&matrix, &rhs).map_err(SolverError::from)?
    } else {
        crate::linsolve::solve_bicgstab(&matrix, &rhs, settings.krylov_tol, settings.krylov_max_iter)
            .map_err(SolverError::from)?
            .0
    };

    let mut h = phi_field;
    for (row, &lin) in interior.iter().enumerate() {
        h.set(lin, solution[row]);
    }

    // discrete residual of the full operator on the solved field
    let mut residual_sup = 0.0_f64;
    for (row, &lin) in interior.iter().enumerate() {
        let g_inv = metric.g_inv_at(lin);
        let mut lap = 0.0;
        for i in 0..n {
            for j in 0..n {
                let hij = if i == j {
                    deriv2_at(&h, lin, i)
                } else {
                    deriv2_mixed_at(&h, lin, i, j)
                };
                let mut cov = hij;
                for k in 0..n {
                    cov -= metric.gamma_at(lin, k, i, j) * deriv1_at(&h, lin, k);
                }
                lap += g_inv[(i, j)] * cov;
            }
        }
        residual_sup = residual_sup.max((lap + trace_a[row]).abs());
    }

    Ok(Supersolution { h, residual_sup })
}

/// Signed sandwich margins: `lower = min(u - usub)`, `upper = min(h - u)`.
#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub tol: f64,
    pub pass: bool,
    /// Grid indices of the worst violation per side, when failing.
    pub worst_lower_point: Option<Vec<usize>>,
    pub worst_upper_point: Option<Vec<usize>>,
}

/// Discrete comparison sandwich `usub <= u <= h` over the whole grid.
pub fn c0_sandwich(
    u: &ScalarField,
    usub: &ScalarField,
    h: &ScalarField,
    tol: f64,
) -> SandwichReport {
    let grid = u.grid();
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    let mut lower_at = 0usize;
    let mut upper_at = 0usize;
    for lin in 0..grid.len() {
        let lo = u.get(lin) - usub.get(lin);
        if lo < lower {
            lower = lo;
            lower_at = lin;
        }
        let up = h.get(lin) - u.get(lin);
        if up < upper {
            upper = up;
            upper_at = lin;
        }
    }
    let pass = lower >= -tol && upper >= -tol;
    SandwichReport {
        lower_margin: lower,
        upper_margin: upper,
        tol,
        pass,
        worst_lower_point: (lower < -tol).then(|| grid.multi(lower_at)),
        worst_upper_point: (upper < -tol).then(|| grid.multi(upper_at)),
    }
}

/// Empirical gradient and Hessian bound data in metric norms. The ratios
/// mirror the interior-to-boundary estimates; no computable constant exists
/// to compare them against, so they are informational.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeBounds {
    pub grad_sup_interior: f64,
    pub grad_sup_boundary: f64,
    pub hess_sup_interior: f64,
    pub hess_sup_boundary: f64,
    /// `sup_M |grad u| / (1 + sup_boundary |grad u|)`
    pub grad_ratio: f64,
    /// `sup_M |hess u| / (1 + sup_boundary |hess u|)`
    pub hess_ratio: f64,
}

/// Metric sup-norms of the gradient and covariant Hessian over interior and
/// boundary points (one-sided stencils on the boundary).
pub fn derivative_bounds(spec: &ProblemSpec, u: &ScalarField) -> DerivativeBounds {
    let grid = u.grid();
    let n = grid.dim();
    let metric = spec.metric();
    let mut grad_int = 0.0_f64;
    let mut grad_bdy = 0.0_f64;
    let mut hess_int = 0.0_f64;
    let mut hess_bdy = 0.0_f64;
    let mut grad = vec![0.0; n];
    for lin in 0..grid.len() {
        for (d, slot) in grad.iter_mut().enumerate() {
            *slot = deriv1_at(u, lin, d);
        }
        let g_inv = metric.g_inv_at(lin);
        let mut gnorm2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                gnorm2 += g_inv[(i, j)] * grad[i] * grad[j];
            }
        }
        let mut hess = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let hij = if i == j {
                    deriv2_at(u, lin, i)
                } else {
                    deriv2_mixed_at(u, lin, i, j)
                };
                let mut cov = hij;
                for k in 0..n {
                    cov -= metric.gamma_at(lin, k, i, j) * grad[k];
                }
                hess[(i, j)] = cov;
                hess[(j, i)] = cov;
            }
        }
        // |H|^2 = g^{ik} g^{jl} H_ij H_kl
        let m = &g_inv * &hess;
        let hnorm2 = (&m * &m).trace().max(0.0);
        if grid.is_boundary(lin) {
            grad_bdy = grad_bdy.max(gnorm2.sqrt());
            hess_bdy = hess_bdy.max(hnorm2.sqrt());
        } else {
            grad_int = grad_int.max(gnorm2.sqrt());
            hess_int = hess_int.max(hnorm2.sqrt());
        }
    }
    DerivativeBounds {
        grad_sup_interior: grad_int,
        grad_sup_boundary: grad_bdy,
        hess_sup_interior: hess_int,
        hess_sup_boundary: hess_bdy,
        grad_ratio: grad_int.max(grad_bdy) / (1.0 + grad_bdy),
        hess_ratio: hess_int.max(hess_bdy) / (1.0 + hess_bdy),
    }
}

/// One barrier parameter combination and its certificate quantities.
#[derive(Debug, Clone, Serialize)]
pub struct BarrierCandidate {
    pub t_bar: f64,
    pub n_bar: f64,
    pub delta: f64,
    /// `min v` over the collar; the barrier wants `>= 0`.
    pub min_v: f64,
    /// `max Lv / (1 + sum F_i)` over collar interior; a certificate wants `< 0`.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BarrierReport {
    pub candidates: Vec<BarrierCandidate>,
    pub best: Option<BarrierCandidate>,
    pub collar_points: usize,
}

/// Check the boundary-collar barrier `v = u - usub + t d - N d^2` for each
/// parameter combination, reporting `min v` and the worst normalized value
/// of `L v = F^{ij} grad_ij v - ftilde_pl grad_l v` on the collar, and the
/// best certificate found (most negative `max_ratio` among admissible
/// candidates).
pub fn barrier_check(
    spec: &ProblemSpec,
    u: &ScalarField,
    t_candidates: &[f64],
    n_candidates: &[f64],
    delta: Option<f64>,
) -> Result<BarrierReport, MonitorError> {
    let grid = spec.grid();
    let n = grid.dim();
    let metric = spec.metric();
    let cp = spec.cp();
    let h_max = grid.spacing().iter().cloned().fold(0.0_f64, f64::max);
    let delta = delta.unwrap_or(4.0 * h_max);

    let usub = spec.subsolution_field()?;
    let dist = ScalarField::from_values(
        grid,
        (0..grid.len()).map(|lin| grid.boundary_distance(lin)).collect(),
    );

    // collar membership: all points with d <= delta, interior subset for Lv
    let collar: Vec<usize> = (0..grid.len())
        .filter(|&lin| dist.get(lin) <= delta)
        .collect();
    let collar_interior: Vec<usize> = collar
        .iter()
        .cloned()
        .filter(|&lin| grid.is_interior(lin))
        .collect();

    // derivative data of u on the collar interior
    let mut x = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut candidates = Vec::new();
    for &t_bar in t_candidates {
        for &n_bar in n_candidates {
            let v = ScalarField::from_values(
                grid,
                (0..grid.len())
                    .map(|lin| {
                        let d = dist.get(lin);
                        u.get(lin) - usub.get(lin) + t_bar * d - n_bar * d * d
                    })
                    .collect(),
            );
            let mut min_v = f64::INFINITY;
            for &lin in &collar {
                min_v = min_v.min(v.get(lin));
            }
            let mut max_ratio = f64::NEG_INFINITY;
            for &lin in &collar_interior {
                // operator coefficients at the converged iterate
                for (d, slot) in grad.iter_mut().enumerate() {
                    *slot = deriv1_at(u, lin, d);
                }
                let mut umat = nalgebra::DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let hij = if i == j {
                            deriv2_at(u, lin, i)
                        } else {
                            deriv2_mixed_at(u, lin, i, j)
                        };
                        let mut cov = hij;
                        for k in 0..n {
                            cov -= metric.gamma_at(lin, k, i, j) * deriv1_at(u, lin, k);
                        }
                        umat[(i, j)] = cov;
                        umat[(j, i)] = cov;
                    }
                }
                grid.coords_into(lin, &mut x);
                if spec.has_augmentation() {
                    let a = spec.a_matrix(&x, u.get(lin), &grad)?;
                    umat += a;
                }
                let g = metric.g_at(lin);
                let (_f, fij) = metric_matrix_derivative(&umat, &g, cp)?;
                let spectrum = crate::geometry::eigen_wrt_metric(&umat, &g)?;
                let sum_fi: f64 = spectral::eval_f(&spectrum, cp)?.grad.iter().sum();

                let ft = spec.ftilde(&x, u.get(lin), &grad)?;
                let mut lv = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let vij = if i == j {
                            deriv2_at(&v, lin, i)
                        } else {
                            deriv2_mixed_at(&v, lin, i, j)
                        };
                        let mut cov = vij;
                        for k in 0..n {
                            cov -= metric.gamma_at(lin, k, i, j) * deriv1_at(&v, lin, k);
                        }
                        lv += fij[(i, j)] * cov;
                    }
                }
                for l in 0..n {
                    lv -= ft.dp[l] * deriv1_at(&v, lin, l);
                }
                max_ratio = max_ratio.max(lv / (1.0 + sum_fi));
            }
            candidates.push(BarrierCandidate {
                t_bar,
                n_bar,
                delta,
                min_v,
                max_ratio,
            });
        }
    }

    let best = candidates
        .iter()
        .filter(|c| c.min_v >= -1e-9 && c.max_ratio < 0.0)
        .min_by(|a, b| a.max_ratio.partial_cmp(&b.max_ratio).unwrap())
        .cloned();

    Ok(BarrierReport {
        candidates,
        best,
        collar_points: collar.len(),
    })
}

/// Combined post-solve diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub c0: SandwichReport,
    pub supersolution_residual: f64,
    pub derivative_bounds: DerivativeBounds,
    pub barrier: BarrierReport,
    pub structure: StructureReport,
    pub fz: FzReport,
    pub pass: bool,
}

/// Run every monitor on a converged solution. Only the sandwich gates
/// `pass`; everything else is informational.
pub fn run_monitors(
    spec: &ProblemSpec,
    u: &ScalarField,
) -> Result<DiagnosticsReport, MonitorError> {
    let usub = {
        let ctx = HomotopyContext::new(spec)?;
        ctx.initial_state().u
    };
    let sup = supersolution_h(spec)?;
    let c0 = c0_sandwich(u, &usub, &sup.h, spec.settings().tol_validate);
    let bounds = derivative_bounds(spec, u);
    let barrier = barrier_check(
        spec,
        u,
        &[0.05, 0.1, 0.2, 0.4],
        &[1.0, 2.0, 4.0, 8.0, 16.0],
        None,
    )?;
    let structure = structure_from_solution(spec, u)?;
    let fz_samples = spec.default_fz_samples()?;
    let fz = spec.fz_positivity_diagnostic(&fz_samples)?;
    let pass = c0.pass;
    Ok(DiagnosticsReport {
        c0,
        supersolution_residual: sup.residual_sup,
        derivative_bounds: bounds,
        barrier,
        structure,
        fz,
        pass,
    })
}

/// Structure-condition suite evaluated on spectra taken from the solution
/// field (an evenly strided interior subset).
pub fn structure_from_solution(
    spec: &ProblemSpec,
    u: &ScalarField,
) -> Result<StructureReport, MonitorError> {
    let ctx = HomotopyContext::new(spec)?;
    let res = residual(&ctx, u, 1.0)?;
    let rows = res.hessian.len();
    let stride = (rows / 64).max(1);
    let mut samples = Vec::new();
    for row in (0..rows).step_by(stride) {
        samples.push(Spectrum::new(res.hessian.spectrum_at(row).to_vec())?);
    }
    Ok(spectral::check_structure(&samples, spec.cp(), 1e-9)?)
}

/// Structure suite on externally supplied spectra (used by the CLI's seeded
/// random battery).
pub fn structure_from_samples(
    samples: &[Spectrum],
    cp: &ConeParams,
    tol: f64,
) -> Result<StructureReport, MonitorError> {
    Ok(spectral::check_structure(samples, cp, tol)?)
}
