//! Single-chart Riemannian discretization: grids, metric fields, covariant
//! Hessians and generalized eigenvalues with respect to the metric.

mod grid;
mod hessian;
mod metric;

pub use grid::{
    deriv1_at, deriv2_at, deriv2_mixed_at, interior_gradient_into, Grid, ScalarField, TensorField,
};
pub use hessian::{covariant_hessian, AugmentedHessianField};
pub use metric::{christoffel, MetricField};

use nalgebra::{Cholesky, DMatrix};
use thiserror::Error;

use crate::expr::ExprError;
use crate::spectral::{self, ConeParams, Spectrum, SpectralError};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("metric is not positive definite at grid point {point:?}")]
    MetricNotSpd { point: Vec<usize> },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Eigenvalues of `U` with respect to the SPD metric `g`, sorted ascending.
///
/// Reduces via the Cholesky factor `g = L L^T` to the ordinary symmetric
/// problem for `L^-1 U L^-T`, whose spectrum equals that of `g^-1 U`.
pub fn eigen_wrt_metric(u: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Spectrum, GeometryError> {
    let n = u.nrows();
    let chol = Cholesky::new(g.clone()).ok_or(GeometryError::MetricNotSpd { point: vec![] })?;
    let l = chol.l();
    let x = l
        .solve_lower_triangular(u)
        .expect("Cholesky factor is invertible");
    // W = (L^-1 (L^-1 U)^T)^T, symmetrized against rounding
    let y = l
        .solve_lower_triangular(&x.transpose())
        .expect("Cholesky factor is invertible");
    let w = spectral::symmetrize(&y);
    debug_assert_eq!(w.nrows(), n);
    let (values, _) = spectral::symmetric_eigen_sorted(&w)?;
    Ok(Spectrum::new(values)?)
}

/// `F` and its derivative `F^{ij} = dF/dU_ij` for the metric spectrum,
/// pulled back through the Cholesky reduction: with `g = L L^T`,
/// `W = L^-1 U L^-T = Q diag(lambda) Q^T` and `P = L^-T Q`, the derivative is
/// `P diag(F_i) P^T`, which is positive definite whenever all `F_i > 0`.
///
/// The single-tuple case `p = n` reduces to `F = trace(g^-1 U)` with the
/// exact constant derivative `g^-1`.
pub fn metric_matrix_derivative(
    u: &DMatrix<f64>,
    g: &DMatrix<f64>,
    cp: &ConeParams,
) -> Result<(f64, DMatrix<f64>), GeometryError> {
    let chol = Cholesky::new(g.clone()).ok_or(GeometryError::MetricNotSpd { point: vec![] })?;
    if cp.tuple_count() == 1 {
        let g_inv = chol.inverse();
        let f = (&g_inv * u).trace();
        if f <= 0.0 {
            return Err(SpectralError::ConeViolation {
                tuple: (0..cp.n()).collect(),
                sum: f,
            }
            .into());
        }
        return Ok((f, g_inv));
    }
    let l = chol.l();
    let x = l
        .solve_lower_triangular(u)
        .expect("Cholesky factor is invertible");
    let y = l
        .solve_lower_triangular(&x.transpose())
        .expect("Cholesky factor is invertible");
    let w = spectral::symmetrize(&y);
    let (values, q) = spectral::symmetric_eigen_sorted(&w)?;
    let spectrum = Spectrum::new(values)?;
    let eval = spectral::eval_f(&spectrum, cp)?;
    // P = L^-T Q by an upper-triangular solve
    let p = l
        .transpose()
        .solve_upper_triangular(&q)
        .expect("Cholesky factor is invertible");
    let df = &p * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eval.grad)) * p.transpose();
    Ok((eval.value, spectral::symmetrize(&df)))
}

/// Worst Cauchy interlacing margin for a symmetric matrix: with ascending
/// eigenvalues `lambda` of `U` and `mu` of its leading principal
/// `(n-1) x (n-1)` block, returns `min_k min(mu_k - lambda_k,
/// lambda_{k+1} - mu_k)`; interlacing holds when this is `>= 0` up to
/// rounding.
pub fn cauchy_interlace_margin(u: &DMatrix<f64>) -> Result<f64, GeometryError> {
    let n = u.nrows();
    assert!(n >= 2, "interlacing needs n >= 2");
    let sym = spectral::symmetrize(u);
    let (lambda, _) = spectral::symmetric_eigen_sorted(&sym)?;
    let sub = sym.view((0, 0), (n - 1, n - 1)).into_owned();
    let (mu, _) = spectral::symmetric_eigen_sorted(&sub)?;
    let mut margin = f64::INFINITY;
    for k in 0..n - 1 {
        margin = margin.min(mu[k] - lambda[k]).min(lambda[k + 1] - mu[k]);
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_symmetric(rng: &mut StdRng, n: usize, scale: f64) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-scale..scale));
        0.5 * (&m + m.transpose())
    }

    fn random_spd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::<f64>::identity(n, n) * (n as f64)
    }

    #[test]
    fn flat_metric_diagonal_eigenvalues() {
        let g = DMatrix::<f64>::identity(3, 3);
        let u = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let s = eigen_wrt_metric(&u, &g).unwrap();
        assert_eq!(s.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scaled_metric_divides_eigenvalues() {
        let g = DMatrix::<f64>::identity(2, 2) * 4.0;
        let u = DMatrix::<f64>::identity(2, 2);
        let s = eigen_wrt_metric(&u, &g).unwrap();
        for v in s.values() {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    // determinant-root oracle: eigenvalues w.r.t. g are the roots of
    // det(U - t g) = 0, found by sign-change bisection.
    fn det_roots(u: &DMatrix<f64>, g: &DMatrix<f64>) -> Vec<f64> {
        let det = |t: f64| (u - g * t).determinant();
        let mut roots = Vec::new();
        let (lo, hi, steps) = (-100.0, 100.0, 400_000);
        let dt = (hi - lo) / steps as f64;
        let mut prev_t = lo;
        let mut prev_v = det(lo);
        for k in 1..=steps {
            let t = lo + k as f64 * dt;
            let v = det(t);
            if prev_v == 0.0 {
                roots.push(prev_t);
            } else if prev_v.signum() != v.signum() {
                let (mut a, mut b) = (prev_t, t);
                let mut fa = det(a);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    let fm = det(m);
                    if fa.signum() == fm.signum() {
                        a = m;
                        fa = fm;
                    } else {
                        b = m;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            prev_t = t;
            prev_v = v;
        }
        roots
    }

    #[test]
    fn generalized_eigenvalues_match_determinant_roots() {
        let mut rng = StdRng::seed_from_u64(7);
        for n in 2..=4 {
            for _ in 0..5 {
                let u = random_symmetric(&mut rng, n, 2.0);
                let g = random_spd(&mut rng, n);
                let s = eigen_wrt_metric(&u, &g).unwrap();
                let roots = det_roots(&u, &g);
                assert_eq!(roots.len(), n, "expected {n} roots");
                for (a, b) in s.values().iter().zip(&roots) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn congruence_consistency() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 3;
            let u = random_symmetric(&mut rng, n, 1.5);
            let g = random_spd(&mut rng, n);
            let s = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
                + DMatrix::<f64>::identity(n, n) * 2.0;
            let u2 = s.transpose() * &u * &s;
            let g2 = s.transpose() * &g * &s;
            let s1 = eigen_wrt_metric(&u, &g).unwrap();
            let s2 = eigen_wrt_metric(&u2, &g2).unwrap();
            for (a, b) in s1.values().iter().zip(s2.values()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn metric_derivative_euler_identity() {
        let mut rng = StdRng::seed_from_u64(3);
        let cp = ConeParams::new(3, 2).unwrap();
        for _ in 0..20 {
            let g = random_spd(&mut rng, 3);
            // build U = L W L^T from a cone-interior W so the spectrum is admissible
            let w = random_symmetric(&mut rng, 3, 0.5) + DMatrix::<f64>::identity(3, 3) * 2.0;
            let l = Cholesky::new(g.clone()).unwrap().l();
            let u = &l * &w * l.transpose();
            let (f, df) = metric_matrix_derivative(&u, &g, &cp).unwrap();
            // Euler identity under the pairing trace(dF * U) = sum F_i lambda_i = F
            let trace = (&df * &u).trace();
            assert!((trace - f).abs() < 1e-9 * f.max(1.0), "{trace} vs {f}");
            // positive definiteness of the derivative
            let (dvals, _) = spectral::symmetric_eigen_sorted(&df).unwrap();
            assert!(dvals[0] > 0.0);
        }
    }

    #[test]
    fn metric_derivative_trace_case_is_inverse_metric() {
        let cp = ConeParams::new(2, 2).unwrap();
        let g = DMatrix::<f64>::identity(2, 2);
        let u = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (f, df) = metric_matrix_derivative(&u, &g, &cp).unwrap();
        assert_eq!(f, 3.0);
        assert_eq!(df, DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn interlacing_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(2..=8);
            let u = random_symmetric(&mut rng, n, 3.0);
            let margin = cauchy_interlace_margin(&u).unwrap();
            assert!(margin >= -1e-10, "interlacing violated: {margin}");
        }
    }
}
