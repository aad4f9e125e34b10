//! Damped-Newton solver for `F(lambda(hess u + A[u])) = ftilde_t` along a
//! continuity path from the subsolution.
//!
//! The homotopy target is the convex interpolation
//! `ftilde_t = (1-t) F(U(usub)) + t ftilde(x, u, grad u)`, which is anchored
//! exactly at the subsolution for `t = 0` and is the original equation at
//! `t = 1`. Every accepted iterate keeps the spectrum inside the cone at all
//! interior points; the line search rejects any step that leaves it.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{
    covariant_hessian, interior_gradient_into, metric_matrix_derivative, AugmentedHessianField,
    GeometryError, Grid, ScalarField, TensorField,
};
use crate::linsolve::{self, CsrMatrix, LinSolveError};
use crate::problem::{LinearSolverChoice, ProblemError, ProblemSpec};
use crate::spectral::{self, SpectralError, Spectrum};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("iterate leaves the admissibility cone at {count} interior point(s), worst margin {worst_margin} (first: {first:?})")]
    ConeViolation {
        count: usize,
        worst_margin: f64,
        first: Vec<Vec<usize>>,
    },
    #[error("line search stalled at t = {t} (residual {residual:e}): no damping factor is admissible and decreasing")]
    LineSearchStall { t: f64, residual: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolveFailure(#[from] LinSolveError),
    #[error("Newton iteration cap reached at t = {t} (residual {residual:e})")]
    MaxIter { t: f64, residual: f64 },
    #[error("homotopy stalled at t = {last_good_t}: {message}")]
    HomotopyStall { last_good_t: f64, message: String },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Solver iterate: grid function with boundary pinned to the Dirichlet data,
/// homotopy parameter and convergence measures.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub u: ScalarField,
    pub t: f64,
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub cone_margin: f64,
    pub newton_iter: usize,
    pub damping_history: Vec<f64>,
}

/// Linearized Newton system over the interior unknowns.
pub struct LinearizedSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Linear grid index backing each row.
    pub rows_lin: Vec<usize>,
}

/// Per-t-step log record of the continuity method.
#[derive(Debug, Clone, Serialize)]
pub struct TStepRecord {
    pub t: f64,
    pub newton_iterations: usize,
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub cone_margin: f64,
    pub damping: Vec<f64>,
    pub residual_history: Vec<f64>,
    pub linear_iterations: Vec<usize>,
    pub bisections_before: usize,
}

/// Final solution with the full homotopy log.
pub struct ContinuityResult {
    pub u: ScalarField,
    pub log: Vec<TStepRecord>,
    pub final_residual_sup: f64,
    pub final_residual_l2: f64,
    pub final_cone_margin: f64,
}

/// Residual field and the admissibility data it was computed from.
#[derive(Debug)]
pub struct ResidualEval {
    /// `F(lambda(U(u))) - ftilde_t` per interior row.
    pub values: Vec<f64>,
    pub sup: f64,
    pub l2: f64,
    pub min_cone_margin: f64,
    pub hessian: AugmentedHessianField,
    /// Central-difference gradient per interior row, row-major `n` entries.
    pub gradients: Vec<f64>,
}

/// Precomputed homotopy data: interior indexing, subsolution grid function
/// and the anchor values `F(U(usub))`.
pub struct HomotopyContext<'a> {
    spec: &'a ProblemSpec,
    interior: Vec<usize>,
    row_of_lin: Vec<i64>,
    initial: ScalarField,
    anchor: Vec<f64>,
    cell_volume: f64,
}

impl<'a> HomotopyContext<'a> {
    /// Build the context; fails with a cone violation when the subsolution
    /// restricted to the grid is not discretely admissible.
    pub fn new(spec: &'a ProblemSpec) -> Result<HomotopyContext<'a>, SolverError> {
        let grid = spec.grid();
        let interior = grid.interior_indices();
        let mut row_of_lin = vec![-1_i64; grid.len()];
        for (row, &lin) in interior.iter().enumerate() {
            row_of_lin[lin] = row as i64;
        }
        let mut initial = spec.subsolution_field()?;
        for lin in 0..grid.len() {
            if grid.is_boundary(lin) {
                let phi = spec.phi_at(lin)?;
                initial.set(lin, phi);
            }
        }
        let cell_volume = grid.spacing().iter().product();
        let mut ctx = HomotopyContext {
            spec,
            interior,
            row_of_lin,
            initial,
            anchor: Vec::new(),
            cell_volume,
        };
        // anchor = F at the subsolution, via the same code path as residuals
        let probe = ctx.residual_inner(&ctx.initial, 0.0, &[])?;
        ctx.anchor = probe.0;
        Ok(ctx)
    }

    pub fn spec(&self) -> &ProblemSpec {
        self.spec
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Initial iterate: subsolution values with the boundary pinned to phi.
    pub fn initial_state(&self) -> SolverState {
        SolverState {
            u: self.initial.clone(),
            t: 0.0,
            residual_sup: f64::NAN,
            residual_l2: f64::NAN,
            cone_margin: f64::NAN,
            newton_iter: 0,
            damping_history: Vec::new(),
        }
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    fn a_field_for(&self, u: &ScalarField, gradients: &[f64]) -> Result<Option<TensorField>, SolverError> {
        if !self.spec.has_augmentation() {
            return Ok(None);
        }
        let grid = self.spec.grid();
        let n = grid.dim();
        let mut field = TensorField::zeros(grid);
        let mut x = vec![0.0; n];
        for (row, &lin) in self.interior.iter().enumerate() {
            grid.coords_into(lin, &mut x);
            let p = &gradients[row * n..(row + 1) * n];
            let a = self.spec.a_matrix(&x, u.get(lin), p)?;
            for i in 0..n {
                for j in 0..n {
                    field.set_comp(lin, i, j, a[(i, j)]);
                }
            }
        }
        Ok(Some(field))
    }

    /// `F(lambda(U(u)))` per interior row plus the Hessian field/gradients;
    /// `anchor` is empty during context construction (pure operator values)
    /// and the stored anchor afterwards.
    fn residual_inner(
        &self,
        u: &ScalarField,
        t: f64,
        anchor: &[f64],
    ) -> Result<(Vec<f64>, AugmentedHessianField, Vec<f64>), SolverError> {
        let grid = self.spec.grid();
        let n = grid.dim();
        let rows = self.interior.len();
        let mut gradients = vec![0.0; rows * n];
        for (row, &lin) in self.interior.iter().enumerate() {
            interior_gradient_into(u, lin, &mut gradients[row * n..(row + 1) * n]);
        }
        let a_field = self.a_field_for(u, &gradients)?;
        let hessian = covariant_hessian(u, self.spec.metric(), a_field.as_ref(), self.spec.cp())?;

        // admissibility gate before any operator evaluation
        let violations = hessian.violations();
        if !violations.is_empty() {
            let worst = hessian.min_margin();
            let first: Vec<Vec<usize>> = violations
                .iter()
                .take(8)
                .map(|&row| grid.multi(self.interior[row]))
                .collect();
            return Err(SolverError::ConeViolation {
                count: violations.len(),
                worst_margin: worst,
                first,
            });
        }

        let mut values = vec![0.0; rows];
        let mut x = vec![0.0; n];
        for (row, &lin) in self.interior.iter().enumerate() {
            let spectrum = Spectrum::new(hessian.spectrum_at(row).to_vec())?;
            let f_op = spectral::eval_f(&spectrum, self.spec.cp())?.value;
            if anchor.is_empty() {
                values[row] = f_op;
            } else {
                grid.coords_into(lin, &mut x);
                let p = &gradients[row * n..(row + 1) * n];
                let ft = self.spec.ftilde(&x, u.get(lin), p)?.value;
                let target = (1.0 - t) * anchor[row] + t * ft;
                values[row] = f_op - target;
            }
        }
        Ok((values, hessian, gradients))
    }

    fn norms(&self, values: &[f64]) -> (f64, f64) {
        let sup = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let l2 = (values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume).sqrt();
        (sup, l2)
    }
}

/// Residual `r = F(lambda(U(u))) - ftilde_t` at the interior points.
pub fn residual(ctx: &HomotopyContext, u: &ScalarField, t: f64) -> Result<ResidualEval, SolverError> {
    let (values, hessian, gradients) = ctx.residual_inner(u, t, ctx.anchor())?;
    let (sup, l2) = ctx.norms(&values);
    Ok(ResidualEval {
        sup,
        l2,
        min_cone_margin: hessian.min_margin(),
        values,
        hessian,
        gradients,
    })
}

/// Coefficients of a linear second-order operator at one interior point:
/// `L v = sum_ij w_ij d_ij v + sum_k b_k d_k v + c v`.
pub struct OperatorCoeffs {
    pub w: DMatrix<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

/// Assemble the stencil rows of a second-order operator over the interior
/// points with Dirichlet elimination. Returns the CSR matrix and the
/// boundary contribution `bc` (terms hitting boundary nodes multiplied by
/// their prescribed values), so the discrete system reads
/// `A v_int = rhs - bc`.
pub fn assemble_operator(
    grid: &Grid,
    interior: &[usize],
    row_of_lin: &[i64],
    mut coeffs: impl FnMut(usize, usize) -> Result<OperatorCoeffs, SolverError>,
    boundary_values: Option<&ScalarField>,
) -> Result<(CsrMatrix, Vec<f64>), SolverError> {
    let n = grid.dim();
    let rows_count = interior.len();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(rows_count);
    let mut bc = vec![0.0; rows_count];

    for (row, &lin) in interior.iter().enumerate() {
        let oc = coeffs(row, lin)?;
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * n * n + 1);
        let mut push = |target_lin: usize, coeff: f64, bc_slot: &mut f64| {
            if coeff == 0.0 {
                return;
            }
            let target_row = row_of_lin[target_lin];
            if target_row >= 0 {
                entries.push((target_row as usize, coeff));
            } else if let Some(bv) = boundary_values {
                *bc_slot += coeff * bv.get(target_lin);
            }
        };

        let h = grid.spacing();
        let mut diag = oc.c;
        for i in 0..n {
            let si = grid.stride(i);
            let wii = oc.w[(i, i)];
            let inv_h2 = 1.0 / (h[i] * h[i]);
            diag += -2.0 * wii * inv_h2;
            let first = oc.b[i] / (2.0 * h[i]);
            push(lin + si, wii * inv_h2 + first, &mut bc[row]);
            push(lin - si, wii * inv_h2 - first, &mut bc[row]);
            for j in i + 1..n {
                let sj = grid.stride(j);
                let wij = oc.w[(i, j)];
                if wij != 0.0 {
                    let cmix = wij / (2.0 * h[i] * h[j]);
                    push(lin + si + sj, cmix, &mut bc[row]);
                    push(lin - si - sj, cmix, &mut bc[row]);
                    push(lin + si - sj, -cmix, &mut bc[row]);
                    push(lin - si + sj, -cmix, &mut bc[row]);
                }
            }
        }
        entries.push((row, diag));
        rows.push(entries);
    }

    Ok((CsrMatrix::from_rows(rows_count, rows_count, rows), bc))
}

/// Newton system at the current iterate: rows discretize
/// `dv -> F^{ij} (d_ij v - Gamma^k_ij d_k v) + F^{ij}(A^ij_z v + A^ij_pl d_l v)
///  - t ftilde_z v - t ftilde_pl d_l v` with Dirichlet elimination.
pub fn jacobian(
    ctx: &HomotopyContext,
    u: &ScalarField,
    t: f64,
    res: &ResidualEval,
) -> Result<LinearizedSystem, SolverError> {
    let spec = ctx.spec();
    let grid = spec.grid();
    let n = grid.dim();
    let metric = spec.metric();
    let cp = spec.cp();
    let a_zp = spec.a_depends_on_zp();
    let rhs_zp = spec.rhs().depends_on_zp();
    let mut x = vec![0.0; n];

    let (matrix, _) = assemble_operator(
        grid,
        ctx.interior(),
        &ctx.row_of_lin,
        |row, lin| {
            let umat = res.hessian.u_at(row);
            let g = metric.g_at(lin);
            let (_f, fij) = metric_matrix_derivative(&umat, &g, cp)?;
            // positive definiteness of F^{ij} is what ellipticity rests on;
            // a non-positive diagonal entry means the iterate escaped the cone
            if (0..n).any(|i| fij[(i, i)] <= 0.0) {
                return Err(SolverError::ConeViolation {
                    count: 1,
                    worst_margin: (0..n).map(|i| fij[(i, i)]).fold(f64::INFINITY, f64::min),
                    first: vec![grid.multi(lin)],
                });
            }

            let mut b = vec![0.0; n];
            for k in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += fij[(i, j)] * metric.gamma_at(lin, k, i, j);
                    }
                }
                b[k] = -acc;
            }
            let mut c = 0.0;

            if a_zp || rhs_zp {
                grid.coords_into(lin, &mut x);
                let z = u.get(lin);
                let p = &res.gradients[row * n..(row + 1) * n];
                if a_zp {
                    let az = spec.a_partial_z(&x, z, p)?;
                    c += (&fij * &az).trace();
                    for (l, slot) in b.iter_mut().enumerate() {
                        let apl = spec.a_partial_p(&x, z, p, l)?;
                        *slot += (&fij * &apl).trace();
                    }
                }
                if rhs_zp {
                    let ft = spec.ftilde(&x, z, p)?;
                    c -= t * ft.dz;
                    for (l, slot) in b.iter_mut().enumerate() {
                        *slot -= t * ft.dp[l];
                    }
                }
            }

            Ok(OperatorCoeffs { w: fij, b, c })
        },
        None,
    )?;

    let rhs = res.values.iter().map(|v| -v).collect();
    Ok(LinearizedSystem {
        matrix,
        rhs,
        rows_lin: ctx.interior().to_vec(),
    })
}

fn solve_linear(
    spec: &ProblemSpec,
    system: &LinearizedSystem,
) -> Result<(Vec<f64>, usize), SolverError> {
    let choice = spec.settings().linear_solver;
    let n_dim = spec.grid().dim();
    let max_axis = spec.grid().shape().iter().cloned().max().unwrap_or(0);
    let direct = match choice {
        LinearSolverChoice::Direct => true,
        LinearSolverChoice::Iterative => false,
        LinearSolverChoice::Auto => n_dim == 2 && max_axis <= 129,
    };
    if direct {
        let x = linsolve::solve_banded(&system.matrix, &system.rhs)?;
        Ok((x, 0))
    } else {
        let settings = spec.settings();
        let (x, iters) = linsolve::solve_bicgstab(
            &system.matrix,
            &system.rhs,
            settings.krylov_tol,
            settings.krylov_max_iter,
        )?;
        Ok((x, iters))
    }
}

/// Outcome of the Newton iteration at one homotopy parameter.
pub struct NewtonOutcome {
    pub state: SolverState,
    pub residual_history: Vec<f64>,
    pub linear_iterations: Vec<usize>,
}

/// Damped Newton iteration at fixed `t`: full steps with backtracking
/// `s in {1, 1/2, ..., 2^-20}`, accepting the first damping that keeps the
/// iterate admissible at every interior point and satisfies the Armijo
/// decrease `sup|r_trial| <= (1 - 1e-4 s) sup|r|`.
pub fn newton_solve_at_t(
    ctx: &HomotopyContext,
    state: &SolverState,
    t: f64,
) -> Result<NewtonOutcome, SolverError> {
    let spec = ctx.spec();
    let tol = spec.settings().tol_newton;
    let max_iter = spec.settings().max_newton;
    let mut u = state.u.clone();
    let mut res = residual(ctx, &u, t)?;
    let mut history = vec![res.sup];
    let mut damping = Vec::new();
    let mut linear_iterations = Vec::new();

    let mut iter = 0usize;
    while res.sup > tol {
        if iter >= max_iter {
            return Err(SolverError::MaxIter {
                t,
                residual: res.sup,
            });
        }
        let system = jacobian(ctx, &u, t, &res)?;
        let (delta, lin_iters) = solve_linear(spec, &system)?;
        linear_iterations.push(lin_iters);

        let mut accepted = false;
        let mut s = 1.0_f64;
        for _k in 0..=20 {
            let mut trial = u.clone();
            for (row, &lin) in ctx.interior().iter().enumerate() {
                trial.set(lin, u.get(lin) + s * delta[row]);
            }
            match residual(ctx, &trial, t) {
                Ok(trial_res) => {
                    if trial_res.sup <= (1.0 - 1e-4 * s) * res.sup {
                        u = trial;
                        res = trial_res;
                        damping.push(s);
                        history.push(res.sup);
                        accepted = true;
                        break;
                    }
                }
                // leaving the cone or the domain of f rejects the step
                Err(SolverError::ConeViolation { .. }) => {}
                Err(SolverError::Problem(ProblemError::NonpositiveF { .. })) => {}
                Err(other) => return Err(other),
            }
            s *= 0.5;
        }
        if !accepted {
            return Err(SolverError::LineSearchStall {
                t,
                residual: res.sup,
            });
        }
        iter += 1;
    }

    Ok(NewtonOutcome {
        state: SolverState {
            u,
            t,
            residual_sup: res.sup,
            residual_l2: res.l2,
            cone_margin: res.min_cone_margin,
            newton_iter: iter,
            damping_history: damping,
        },
        residual_history: history,
        linear_iterations,
    })
}

/// March `t` from 0 to 1 over uniform steps, warm-starting each Newton solve
/// from the previous solution; failing steps are bisected toward the last
/// good parameter up to the configured cap.
pub fn continuity_solve(spec: &ProblemSpec) -> Result<ContinuityResult, SolverError> {
    let ctx = HomotopyContext::new(spec)?;
    continuity_solve_with(&ctx)
}

/// As `continuity_solve` but reusing a prepared context.
pub fn continuity_solve_with(ctx: &HomotopyContext) -> Result<ContinuityResult, SolverError> {
    let spec = ctx.spec();
    let steps = spec.settings().continuity_steps.max(1);
    let max_bisections = spec.settings().max_bisections;

    let mut state = ctx.initial_state();
    let mut log: Vec<TStepRecord> = Vec::new();
    let mut t_good = 0.0_f64;
    let mut schedule_idx = 1usize;
    let mut bisections = 0usize;

    while t_good < 1.0 {
        let scheduled = schedule_idx as f64 / steps as f64;
        let t_try = if bisections == 0 {
            scheduled
        } else {
            // retry toward the last good parameter
            t_good + (scheduled - t_good) / (1 << bisections) as f64
        };
        match newton_solve_at_t(ctx, &state, t_try) {
            Ok(outcome) => {
                log.push(TStepRecord {
                    t: t_try,
                    newton_iterations: outcome.state.newton_iter,
                    residual_sup: outcome.state.residual_sup,
                    residual_l2: outcome.state.residual_l2,
                    cone_margin: outcome.state.cone_margin,
                    damping: outcome.state.damping_history.clone(),
                    residual_history: outcome.residual_history,
                    linear_iterations: outcome.linear_iterations,
                    bisections_before: bisections,
                });
                state = outcome.state;
                t_good = t_try;
                if (t_try - scheduled).abs() < 1e-15 {
                    schedule_idx += 1;
                    bisections = 0;
                }
            }
            Err(err) => {
                bisections += 1;
                if bisections > max_bisections {
                    return Err(SolverError::HomotopyStall {
                        last_good_t: t_good,
                        message: err.to_string(),
                    });
                }
            }
        }
    }

    Ok(ContinuityResult {
        final_residual_sup: state.residual_sup,
        final_residual_l2: state.residual_l2,
        final_cone_margin: state.cone_margin,
        u: state.u,
        log,
    })
}

/// Finite-difference consistency probe of the Jacobian: compares `J v`
/// against the central difference of the residual in direction `v` and
/// returns the sup deviation scaled by `sup|v|`.
pub fn jacobian_fd_check(
    ctx: &HomotopyContext,
    u: &ScalarField,
    t: f64,
    v: &[f64],
    eps: f64,
) -> Result<f64, SolverError> {
    let res = residual(ctx, u, t)?;
    let system = jacobian(ctx, u, t, &res)?;
    let jv = system.matrix.matvec(v);

    let mut up = u.clone();
    let mut um = u.clone();
    for (row, &lin) in ctx.interior().iter().enumerate() {
        up.set(lin, u.get(lin) + eps * v[row]);
        um.set(lin, u.get(lin) - eps * v[row]);
    }
    let rp = residual(ctx, &up, t)?;
    let rm = residual(ctx, &um, t)?;
    let v_sup = v.iter().fold(0.0_f64, |a, b| a.max(b.abs())).max(1e-300);
    let mut worst = 0.0_f64;
    for row in 0..v.len() {
        let fd = (rp.values[row] - rm.values[row]) / (2.0 * eps);
        worst = worst.max((jv[row] - fd).abs());
    }
    Ok(worst / v_sup)
}
