//! Problem specification: cone parameters, grid, metric, augmented tensor,
//! right-hand side with its normalization `ftilde = f^(1/C(n,p))`, boundary
//! data and subsolution, plus the subsolution validator.
//!
//! Smooth data given as expressions (the subsolution, a manufactured exact
//! solution) is differentiated by tiny-step finite differences on the
//! expression itself, not on the grid, so validation margins reflect the
//! smooth objects rather than grid truncation error.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, Env, ExprAst, ExprError, Var};
use crate::geometry::{
    eigen_wrt_metric, GeometryError, Grid, MetricField, ScalarField,
};
use crate::spectral::{self, ConeParams, SpectralError};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("right-hand side f is not positive at x = {x:?}, z = {z}: f = {value}")]
    NonpositiveF { x: Vec<f64>, z: f64, value: f64 },
    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// One `(x, z, p)` sample point for the `f_z` diagnostic.
pub type FzSample = (Vec<f64>, f64, Vec<f64>);

/// Grid-sampled scalar function with multilinear interpolation off the nodes.
/// Exact node lookups reproduce the stored values bit-for-bit.
#[derive(Debug, Clone)]
pub struct GriddedFn {
    field: ScalarField,
}

impl GriddedFn {
    pub fn new(field: ScalarField) -> GriddedFn {
        GriddedFn { field }
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn sample(&self, x: &[f64]) -> f64 {
        let grid = self.field.grid();
        let n = grid.dim();
        debug_assert_eq!(x.len(), n);
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0_f64; n];
        for d in 0..n {
            let last = grid.shape()[d] - 1;
            let t = (x[d] / grid.spacing()[d]).clamp(0.0, last as f64);
            let mut i = t.floor() as usize;
            let mut f = t - i as f64;
            if f < 1e-12 {
                f = 0.0;
            } else if f > 1.0 - 1e-12 {
                i += 1;
                f = 0.0;
            }
            if i >= last {
                i = last;
                f = 0.0;
            }
            base[d] = i;
            frac[d] = f;
        }
        let mut acc = 0.0;
        'corner: for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut lin = 0usize;
            for d in 0..n {
                let bit = (corner >> d) & 1;
                let wd = if bit == 1 { frac[d] } else { 1.0 - frac[d] };
                if wd == 0.0 {
                    continue 'corner;
                }
                w *= wd;
                lin += (base[d] + bit) * grid.stride(d);
            }
            acc += w * self.field.get(lin);
        }
        acc
    }
}

/// Right-hand side `f(x, z, p)`: an expression, or a gridded x-only function
/// produced by the manufactured-solution oracle.
#[derive(Debug, Clone)]
pub enum Rhs {
    Expr(ExprAst),
    Gridded(GriddedFn),
}

impl Rhs {
    pub fn depends_on_zp(&self) -> bool {
        match self {
            Rhs::Expr(ast) => ast.references_zp(),
            Rhs::Gridded(_) => false,
        }
    }

    fn eval(&self, x: &[f64], z: f64, p: &[f64]) -> Result<f64, ProblemError> {
        match self {
            Rhs::Expr(ast) => Ok(expr::eval(ast, &Env::new(x, z, p))?),
            Rhs::Gridded(g) => Ok(g.sample(x)),
        }
    }
}

/// Linear solver selection for the Newton step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearSolverChoice {
    /// Banded direct factorization for 2-d grids up to 129 points per axis,
    /// BiCGSTAB otherwise.
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverSettings {
    pub continuity_steps: usize,
    pub tol_newton: f64,
    pub max_newton: usize,
    pub max_bisections: usize,
    pub linear_solver: LinearSolverChoice,
    pub krylov_tol: f64,
    pub krylov_max_iter: usize,
    /// Tolerance for validation margins and the C0 sandwich.
    pub tol_validate: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            continuity_steps: 10,
            tol_newton: 1e-10,
            max_newton: 50,
            max_bisections: 12,
            linear_solver: LinearSolverChoice::Auto,
            krylov_tol: 1e-12,
            krylov_max_iter: 10_000,
            tol_validate: 1e-8,
        }
    }
}

/// Full Dirichlet problem instance on a grid.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    cp: ConeParams,
    grid: Grid,
    metric: MetricField,
    a_entries: Option<Vec<ExprAst>>,
    a_depends_zp: bool,
    rhs: Rhs,
    phi: ExprAst,
    subsolution: ExprAst,
    settings: SolverSettings,
}

/// `ftilde = f^(1/C(n,p))` and its z- and p-partials by the chain rule.
#[derive(Debug, Clone)]
pub struct FtildeEval {
    pub value: f64,
    pub dz: f64,
    pub dp: Vec<f64>,
}

/// Value, gradient and covariant augmented Hessian of a smooth expression at
/// a grid point, differentiated on the expression.
#[derive(Debug, Clone)]
pub struct ExprHessian {
    pub value: f64,
    pub grad: Vec<f64>,
    pub u: DMatrix<f64>,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cp: ConeParams,
        grid: Grid,
        metric: MetricField,
        a_entries: Option<Vec<ExprAst>>,
        rhs: Rhs,
        phi: ExprAst,
        subsolution: ExprAst,
        settings: SolverSettings,
    ) -> Result<ProblemSpec, ProblemError> {
        if cp.n() != grid.dim() {
            return Err(ProblemError::InvalidSpec(format!(
                "cone dimension {} does not match grid dimension {}",
                cp.n(),
                grid.dim()
            )));
        }
        if metric.grid() != &grid {
            return Err(ProblemError::InvalidSpec(
                "metric was built on a different grid".into(),
            ));
        }
        if phi.references_zp() {
            return Err(ProblemError::InvalidSpec(
                "boundary data must depend on x only".into(),
            ));
        }
        if subsolution.references_zp() {
            return Err(ProblemError::InvalidSpec(
                "subsolution must depend on x only".into(),
            ));
        }
        if let Some(entries) = &a_entries {
            if entries.len() != cp.n() * cp.n() {
                return Err(ProblemError::InvalidSpec(format!(
                    "expected {} tensor entries, got {}",
                    cp.n() * cp.n(),
                    entries.len()
                )));
            }
        }
        let a_depends_zp = a_entries
            .as_ref()
            .map(|es| es.iter().any(|e| e.references_zp()))
            .unwrap_or(false);
        let spec = ProblemSpec {
            cp,
            grid,
            metric,
            a_entries,
            a_depends_zp,
            rhs,
            phi,
            subsolution,
            settings,
        };
        spec.check_rhs_positive_on_samples()?;
        Ok(spec)
    }

    /// Positivity of `f` sampled along the subsolution data.
    fn check_rhs_positive_on_samples(&self) -> Result<(), ProblemError> {
        let n = self.grid.dim();
        let mut x = vec![0.0; n];
        let stride = (self.grid.len() / 512).max(1);
        for lin in (0..self.grid.len()).step_by(stride) {
            self.grid.coords_into(lin, &mut x);
            let z = expr::eval(&self.subsolution, &Env::x_only(&x))?;
            let mut p = vec![0.0; n];
            for (d, slot) in p.iter_mut().enumerate() {
                *slot = expr::partial(&self.subsolution, Var::X(d), &Env::x_only(&x), None)?;
            }
            let f = self.rhs.eval(&x, z, &p)?;
            if f <= 0.0 {
                return Err(ProblemError::NonpositiveF {
                    x: x.clone(),
                    z,
                    value: f,
                });
            }
        }
        Ok(())
    }

    pub fn cp(&self) -> &ConeParams {
        &self.cp
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn rhs(&self) -> &Rhs {
        &self.rhs
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut SolverSettings {
        &mut self.settings
    }

    pub fn phi_expr(&self) -> &ExprAst {
        &self.phi
    }

    pub fn subsolution_expr(&self) -> &ExprAst {
        &self.subsolution
    }

    /// True when the augmented tensor depends on `(z, p)`; the linearization
    /// drops the corresponding terms otherwise.
    pub fn a_depends_on_zp(&self) -> bool {
        self.a_depends_zp
    }

    pub fn has_augmentation(&self) -> bool {
        self.a_entries.is_some()
    }

    /// Augmented tensor `A(x, z, p)`, symmetrized; zero when absent.
    pub fn a_matrix(&self, x: &[f64], z: f64, p: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        let n = self.cp.n();
        let Some(entries) = &self.a_entries else {
            return Ok(DMatrix::zeros(n, n));
        };
        let env = Env::new(x, z, p);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = expr::eval(&entries[i * n + j], &env)?;
            }
        }
        Ok(spectral::symmetrize(&m))
    }

    /// Partial of the symmetrized tensor w.r.t. `z` (finite differences on
    /// the entry expressions).
    pub fn a_partial_z(&self, x: &[f64], z: f64, p: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        let n = self.cp.n();
        let Some(entries) = &self.a_entries else {
            return Ok(DMatrix::zeros(n, n));
        };
        let env = Env::new(x, z, p);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = expr::partial(&entries[i * n + j], Var::Z, &env, None)?;
            }
        }
        Ok(spectral::symmetrize(&m))
    }

    /// Partial of the symmetrized tensor w.r.t. `p_l`.
    pub fn a_partial_p(
        &self,
        x: &[f64],
        z: f64,
        p: &[f64],
        l: usize,
    ) -> Result<DMatrix<f64>, ProblemError> {
        let n = self.cp.n();
        let Some(entries) = &self.a_entries else {
            return Ok(DMatrix::zeros(n, n));
        };
        let env = Env::new(x, z, p);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = expr::partial(&entries[i * n + j], Var::P(l), &env, None)?;
            }
        }
        Ok(spectral::symmetrize(&m))
    }

    /// `ftilde = f^(1/C(n,p))` with chain-rule partials
    /// `ftilde_z = ftilde * f_z / (C * f)` and likewise per `p_l`.
    pub fn ftilde(&self, x: &[f64], z: f64, p: &[f64]) -> Result<FtildeEval, ProblemError> {
        let f = self.rhs.eval(x, z, p)?;
        if f <= 0.0 {
            return Err(ProblemError::NonpositiveF {
                x: x.to_vec(),
                z,
                value: f,
            });
        }
        let c = self.cp.tuple_count() as f64;
        let value = if c == 1.0 { f } else { f.powf(1.0 / c) };
        let n = self.cp.n();
        match &self.rhs {
            Rhs::Gridded(_) => Ok(FtildeEval {
                value,
                dz: 0.0,
                dp: vec![0.0; n],
            }),
            Rhs::Expr(ast) => {
                if !ast.references_zp() {
                    return Ok(FtildeEval {
                        value,
                        dz: 0.0,
                        dp: vec![0.0; n],
                    });
                }
                let env = Env::new(x, z, p);
                let fz = expr::partial(ast, Var::Z, &env, None)?;
                let mut dp = vec![0.0; n];
                for (l, slot) in dp.iter_mut().enumerate() {
                    let fpl = expr::partial(ast, Var::P(l), &env, None)?;
                    *slot = value * fpl / (c * f);
                }
                Ok(FtildeEval {
                    value,
                    dz: value * fz / (c * f),
                    dp,
                })
            }
        }
    }

    /// Value, gradient and covariant augmented Hessian of a smooth x-only
    /// expression at grid point `lin`, using tiny-step differences on the
    /// expression and the grid's Christoffel symbols.
    pub fn expr_augmented_hessian(
        &self,
        field: &ExprAst,
        lin: usize,
    ) -> Result<ExprHessian, ProblemError> {
        let n = self.grid.dim();
        let mut x = vec![0.0; n];
        self.grid.coords_into(lin, &mut x);
        let env = Env::x_only(&x);
        let value = expr::eval(field, &env)?;
        let mut grad = vec![0.0; n];
        for (d, slot) in grad.iter_mut().enumerate() {
            *slot = expr::partial(field, Var::X(d), &env, None)?;
        }
        let mut u = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut v = expr::second_partial(field, Var::X(i), Var::X(j), &env, None)?;
                for k in 0..n {
                    v -= self.metric.gamma_at(lin, k, i, j) * grad[k];
                }
                u[(i, j)] = v;
                u[(j, i)] = v;
            }
        }
        let a = self.a_matrix(&x, value, &grad)?;
        Ok(ExprHessian {
            value,
            grad,
            u: u + a,
        })
    }

    /// Subsolution restricted to the grid.
    pub fn subsolution_field(&self) -> Result<ScalarField, ProblemError> {
        Ok(ScalarField::from_expr(&self.grid, &self.subsolution)?)
    }

    /// Boundary data at a grid point.
    pub fn phi_at(&self, lin: usize) -> Result<f64, ProblemError> {
        let mut x = vec![0.0; self.grid.dim()];
        self.grid.coords_into(lin, &mut x);
        Ok(expr::eval(&self.phi, &Env::x_only(&x))?)
    }

    /// Check admissibility and the subsolution inequality at every interior
    /// point and boundary agreement with the Dirichlet data.
    pub fn validate_subsolution(&self) -> Result<SubsolutionReport, ProblemError> {
        let tol = self.settings.tol_validate;
        let mut report = SubsolutionReport::new(tol);
        let g_of = |lin: usize| self.metric.g_at(lin);
        let mut x = vec![0.0; self.grid.dim()];
        for lin in 0..self.grid.len() {
            if self.grid.is_boundary(lin) {
                self.grid.coords_into(lin, &mut x);
                let ub = expr::eval(&self.subsolution, &Env::x_only(&x))?;
                let phi = expr::eval(&self.phi, &Env::x_only(&x))?;
                report.record_boundary(self.grid.multi(lin), (ub - phi).abs());
                continue;
            }
            let eh = self.expr_augmented_hessian(&self.subsolution, lin)?;
            let spectrum = eigen_wrt_metric(&eh.u, &g_of(lin))?;
            let margin: f64 = spectrum.values().iter().take(self.cp.p()).sum();
            if margin <= 0.0 {
                report.record_cone(self.grid.multi(lin), margin);
                continue;
            }
            report.record_cone_ok(margin);
            let f_op = spectral::eval_f(&spectrum, &self.cp)?.value;
            self.grid.coords_into(lin, &mut x);
            let ft = self.ftilde(&x, eh.value, &eh.grad)?.value;
            report.record_inequality(self.grid.multi(lin), f_op - ft);
        }
        report.finish();
        Ok(report)
    }

    /// Sampled sign information for `f_z`: minimum of `f_z` and maximum of
    /// `-f_z/f`, with the uniqueness flag set when no negative `f_z` was
    /// seen. Purely informational.
    pub fn fz_positivity_diagnostic(&self, samples: &[FzSample]) -> Result<FzReport, ProblemError> {
        let mut min_fz = f64::INFINITY;
        let mut max_ratio = f64::NEG_INFINITY;
        for (x, z, p) in samples {
            let (fz, f) = match &self.rhs {
                Rhs::Gridded(g) => (0.0, g.sample(x)),
                Rhs::Expr(ast) => {
                    let env = Env::new(x, *z, p);
                    (expr::partial(ast, Var::Z, &env, None)?, expr::eval(ast, &env)?)
                }
            };
            min_fz = min_fz.min(fz);
            if f > 0.0 {
                max_ratio = max_ratio.max(-fz / f);
            }
        }
        Ok(FzReport {
            samples: samples.len(),
            min_fz,
            max_neg_fz_over_f: max_ratio,
            uniqueness_guaranteed: min_fz >= -1e-12,
        })
    }

    /// Deterministic sample battery for the `f_z` diagnostic: grid points
    /// with `z` around the subsolution value and `p` at its gradient.
    pub fn default_fz_samples(&self) -> Result<Vec<FzSample>, ProblemError> {
        let n = self.grid.dim();
        let mut samples = Vec::new();
        let stride = (self.grid.len() / 64).max(1);
        let mut x = vec![0.0; n];
        for lin in (0..self.grid.len()).step_by(stride) {
            self.grid.coords_into(lin, &mut x);
            let env = Env::x_only(&x);
            let z0 = expr::eval(&self.subsolution, &env)?;
            let mut p = vec![0.0; n];
            for (d, slot) in p.iter_mut().enumerate() {
                *slot = expr::partial(&self.subsolution, Var::X(d), &env, None)?;
            }
            for dz in [-0.5, 0.0, 0.5] {
                samples.push((x.clone(), z0 + dz, p.clone()));
            }
        }
        Ok(samples)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FailingPoint {
    pub index: Vec<usize>,
    pub kind: String,
    pub margin: f64,
}

/// Result of `validate_subsolution`. Margins are signed; the validation
/// passes when every margin is `>= -tol`.
#[derive(Debug, Clone, Serialize)]
pub struct SubsolutionReport {
    pub tol: f64,
    pub worst_cone_margin: f64,
    pub worst_inequality_margin: f64,
    pub worst_boundary_deviation: f64,
    pub admissible: bool,
    pub inequality_ok: bool,
    pub boundary_ok: bool,
    pub pass: bool,
    pub failing_points: Vec<FailingPoint>,
}

const MAX_REPORTED_FAILURES: usize = 20;

impl SubsolutionReport {
    fn new(tol: f64) -> Self {
        SubsolutionReport {
            tol,
            worst_cone_margin: f64::INFINITY,
            worst_inequality_margin: f64::INFINITY,
            worst_boundary_deviation: 0.0,
            admissible: true,
            inequality_ok: true,
            boundary_ok: true,
            pass: true,
            failing_points: Vec::new(),
        }
    }

    fn push_failure(&mut self, index: Vec<usize>, kind: &str, margin: f64) {
        if self.failing_points.len() < MAX_REPORTED_FAILURES {
            self.failing_points.push(FailingPoint {
                index,
                kind: kind.to_string(),
                margin,
            });
        }
    }

    fn record_cone(&mut self, index: Vec<usize>, margin: f64) {
        self.worst_cone_margin = self.worst_cone_margin.min(margin);
        self.admissible = false;
        self.push_failure(index, "cone", margin);
    }

    fn record_cone_ok(&mut self, margin: f64) {
        self.worst_cone_margin = self.worst_cone_margin.min(margin);
    }

    fn record_inequality(&mut self, index: Vec<usize>, margin: f64) {
        self.worst_inequality_margin = self.worst_inequality_margin.min(margin);
        if margin < -self.tol {
            self.inequality_ok = false;
            self.push_failure(index, "subsolution-inequality", margin);
        }
    }

    fn record_boundary(&mut self, index: Vec<usize>, deviation: f64) {
        self.worst_boundary_deviation = self.worst_boundary_deviation.max(deviation);
        if deviation > self.tol {
            self.boundary_ok = false;
            self.push_failure(index, "boundary", deviation);
        }
    }

    fn finish(&mut self) {
        self.pass = self.admissible && self.inequality_ok && self.boundary_ok;
    }
}

/// Sampled `f_z` sign diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct FzReport {
    pub samples: usize,
    pub min_fz: f64,
    pub max_neg_fz_over_f: f64,
    pub uniqueness_guaranteed: bool,
}
