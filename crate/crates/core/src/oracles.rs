//! Independent oracles used by tests and examples: the direct-product
//! operator evaluation, finite-difference gradients with cone-aware probe
//! shrinking, random cone sampling, and manufactured problems built from a
//! prescribed exact solution.

use rand::Rng;
use thiserror::Error;

use crate::expr::{ExprAst, Var};
use crate::geometry::{eigen_wrt_metric, Grid, MetricField, ScalarField};
use crate::problem::{GriddedFn, ProblemError, ProblemSpec, Rhs, SolverSettings};
use crate::spectral::{self, ConeParams, Spectrum, SpectralError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("product overflowed the representable range")]
    Overflow,
    #[error("dimension {0} too large for brute-force enumeration (max 12)")]
    DimensionTooLarge(usize),
    #[error("probe left the cone even after shrinking the step 3 times")]
    ProbeOutsideCone,
    #[error("exact solution is not admissible at grid points {points:?} (worst margin {worst_margin})")]
    InadmissibleExactSolution {
        points: Vec<Vec<usize>>,
        worst_margin: f64,
    },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Direct product over explicitly enumerated tuples, no log-domain tricks;
/// reference for `eval_f` through `M = F^(C(n,p))`.
pub fn brute_force_m(lambda: &Spectrum, cp: &ConeParams) -> Result<f64, OracleError> {
    if cp.n() > 12 {
        return Err(OracleError::DimensionTooLarge(cp.n()));
    }
    if lambda.len() != cp.n() {
        return Err(SpectralError::DimensionMismatch {
            expected: cp.n(),
            got: lambda.len(),
        }
        .into());
    }
    let vals = lambda.values();
    let mut product = 1.0_f64;
    spectral::for_each_combination(cp.n(), cp.p(), |tuple| {
        let s: f64 = tuple.iter().map(|&i| vals[i]).sum();
        product *= s;
    });
    if !product.is_finite() {
        return Err(OracleError::Overflow);
    }
    Ok(product)
}

/// Central finite-difference gradient of `f`; when a probe point makes `f`
/// fail with a cone violation the step is shrunk by 10, at most 3 times.
pub fn fd_gradient(
    f: &dyn Fn(&[f64]) -> Result<f64, SpectralError>,
    lambda: &[f64],
    h: f64,
) -> Result<Vec<f64>, OracleError> {
    let n = lambda.len();
    let mut grad = vec![0.0; n];
    let mut probe = lambda.to_vec();
    for i in 0..n {
        let mut step = h;
        let mut done = false;
        for _attempt in 0..=3 {
            probe[i] = lambda[i] + step;
            let fwd = f(&probe);
            probe[i] = lambda[i] - step;
            let bwd = f(&probe);
            probe[i] = lambda[i];
            match (fwd, bwd) {
                (Ok(a), Ok(b)) => {
                    grad[i] = (a - b) / (2.0 * step);
                    done = true;
                    break;
                }
                (Err(SpectralError::ConeViolation { .. }), _)
                | (_, Err(SpectralError::ConeViolation { .. })) => {
                    step /= 10.0;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e.into()),
            }
        }
        if !done {
            return Err(OracleError::ProbeOutsideCone);
        }
    }
    Ok(grad)
}

/// Draw a point of the open cone: a standard normal vector repaired by a
/// uniform shift of all entries, which raises every p-tuple sum by `p`
/// times the shift. Produces points at varying distances from the boundary.
pub fn random_cone_spectrum(rng: &mut impl Rng, cp: &ConeParams) -> Spectrum {
    let n = cp.n();
    let mut vals: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller from two uniforms keeps the rand dependency minimal
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let spectrum = Spectrum::new(vals.clone()).expect("finite normals");
    let m = spectral::min_p_sum(&spectrum, cp).expect("dims match");
    let slack = rng.gen_range(0.02..1.0);
    if m <= 0.0 {
        let shift = -m / cp.p() as f64 + slack;
        for v in &mut vals {
            *v += shift;
        }
    } else {
        // occasionally push strictly inside as well
        for v in &mut vals {
            *v += slack * 0.1;
        }
    }
    Spectrum::new(vals).expect("finite shifted values")
}

/// Skeleton of problem data shared by manufactured instances.
pub struct ManufacturedParts {
    pub cp: ConeParams,
    pub grid: Grid,
    pub metric: MetricField,
    pub a_entries: Option<Vec<ExprAst>>,
    pub settings: SolverSettings,
    /// Requested depth of the subsolution bump `beta * prod x_i (1 - x_i)`;
    /// halved until the subsolution validates, down to zero.
    pub beta: f64,
}

/// Manufactured problem: given an exact solution expression `u*`, define the
/// right-hand side as the gridded function `f := F(lambda(hess u* + A[u*]))^C`
/// (expression-level derivatives), Dirichlet data `phi = u*` and subsolution
/// `u* - beta * prod x_i (1 - x_i)`.
///
/// Fails with the offending points when `u*` is not admissible on the grid.
pub fn manufactured_problem(
    u_star: &ExprAst,
    parts: ManufacturedParts,
) -> Result<ProblemSpec, OracleError> {
    let ManufacturedParts {
        cp,
        grid,
        metric,
        a_entries,
        settings,
        beta,
    } = parts;
    let n = grid.dim();

    // probe spec used for expression-level Hessians of u*
    let probe = ProblemSpec::new(
        cp,
        grid.clone(),
        metric.clone(),
        a_entries.clone(),
        Rhs::Expr(ExprAst::constant(1.0, n)),
        u_star.clone(),
        u_star.clone(),
        settings.clone(),
    )?;

    let mut f_values = vec![0.0; grid.len()];
    let mut bad_points = Vec::new();
    let mut worst_margin = f64::INFINITY;
    let c = cp.tuple_count() as f64;
    for lin in 0..grid.len() {
        let eh = probe.expr_augmented_hessian(u_star, lin)?;
        let spectrum = eigen_wrt_metric(&eh.u, &metric.g_at(lin))
            .map_err(|e| OracleError::Problem(e.into()))?;
        let margin: f64 = spectrum.values().iter().take(cp.p()).sum();
        worst_margin = worst_margin.min(margin);
        if margin <= 0.0 {
            if bad_points.len() < 20 {
                bad_points.push(grid.multi(lin));
            }
            continue;
        }
        let eval = spectral::eval_f(&spectrum, &cp)?;
        f_values[lin] = if c == 1.0 {
            eval.value
        } else {
            eval.log_m.exp()
        };
    }
    if !bad_points.is_empty() {
        return Err(OracleError::InadmissibleExactSolution {
            points: bad_points,
            worst_margin,
        });
    }

    let rhs = Rhs::Gridded(GriddedFn::new(ScalarField::from_values(&grid, f_values)));

    // bump vanishing on the boundary of the unit box
    let mut bump = ExprAst::constant(1.0, n);
    for d in 0..n {
        let x = ExprAst::variable(Var::X(d), n);
        let one_minus = ExprAst::sub(ExprAst::constant(1.0, n), x.clone());
        bump = ExprAst::mul(bump, ExprAst::mul(x, one_minus));
    }

    let mut beta_try = beta.max(0.0);
    loop {
        let subsolution = if beta_try > 0.0 {
            ExprAst::sub(
                u_star.clone(),
                ExprAst::mul(ExprAst::constant(beta_try, n), bump.clone()),
            )
        } else {
            u_star.clone()
        };
        let spec = ProblemSpec::new(
            cp,
            grid.clone(),
            metric.clone(),
            a_entries.clone(),
            rhs.clone(),
            u_star.clone(),
            subsolution,
            settings.clone(),
        )?;
        if beta_try == 0.0 {
            return Ok(spec);
        }
        let report = spec.validate_subsolution()?;
        if report.pass {
            return Ok(spec);
        }
        beta_try = if beta_try > beta / 64.0 {
            beta_try / 2.0
        } else {
            0.0
        };
    }
}
