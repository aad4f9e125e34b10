//! The spectral operator `M^n_p`, its normalized concave root `F`, their
//! derivatives and the admissibility cone predicates.
//!
//! For an eigenvalue vector `lambda` the operator is the product of the sums
//! `lambda_{i1} + ... + lambda_{ip}` over all C(n,p) increasing index tuples,
//! and `F = (M^n_p)^(1/C(n,p))`. `F` is positive, strictly monotone, concave
//! and degree-one homogeneous on the cone of vectors whose every p-tuple sum
//! is positive; those facts are what `check_structure` verifies numerically.
//!
//! Products are accumulated in the log domain so that dimensions up to
//! `n = 12` stay in range; the direct product lives in the oracles module as
//! a cross-check.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("dimension mismatch: spectrum has length {got}, cone expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid cone parameters: n = {n}, p = {p}")]
    InvalidConeParams { n: usize, p: usize },
    #[error("spectrum entries must be finite (entry {index} is {value})")]
    NotFinite { index: usize, value: f64 },
    #[error("spectrum must have length >= 2, got {0}")]
    TooShort(usize),
    #[error("cone violation: tuple {tuple:?} has sum {sum} <= 0")]
    ConeViolation { tuple: Vec<usize>, sum: f64 },
    #[error("eigenvalue decomposition failed to converge")]
    EigenFailure,
}

/// Dimension and tuple size of the cone `P_p` in `R^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConeParams {
    n: usize,
    p: usize,
}

impl ConeParams {
    pub fn new(n: usize, p: usize) -> Result<Self, SpectralError> {
        if n < 2 || p < 1 || p > n {
            return Err(SpectralError::InvalidConeParams { n, p });
        }
        Ok(ConeParams { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of increasing p-tuples, `C(n,p) = n! / (p!(n-p)!)`.
    pub fn tuple_count(&self) -> u64 {
        binomial(self.n as u64, self.p as u64)
    }

    /// True when `p >= n/2`, the range covered by the existence theory.
    pub fn in_existence_range(&self) -> bool {
        2 * self.p >= self.n
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Visit all increasing p-tuples of `0..n` in lexicographic order.
pub(crate) fn for_each_combination(n: usize, p: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        visit(&idx);
        // advance to the next lexicographic combination
        let mut i = p;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - p {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..p {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Eigenvalue vector of an augmented Hessian with respect to the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
    sorted_ascending: bool,
}

impl Spectrum {
    /// Wrap raw eigenvalues; detects whether they happen to be sorted.
    pub fn new(values: Vec<f64>) -> Result<Self, SpectralError> {
        if values.len() < 2 {
            return Err(SpectralError::TooShort(values.len()));
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(SpectralError::NotFinite { index, value });
            }
        }
        let sorted_ascending = values.windows(2).all(|w| w[0] <= w[1]);
        Ok(Spectrum {
            values,
            sorted_ascending,
        })
    }

    /// Wrap and sort ascending.
    pub fn sorted(mut values: Vec<f64>) -> Result<Self, SpectralError> {
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_sorted_ascending(&self) -> bool {
        self.sorted_ascending
    }
}

fn check_dims(lambda: &Spectrum, cp: &ConeParams) -> Result<(), SpectralError> {
    if lambda.len() != cp.n() {
        return Err(SpectralError::DimensionMismatch {
            expected: cp.n(),
            got: lambda.len(),
        });
    }
    Ok(())
}

/// Minimum over all p-tuples of the tuple sum; equals the sum of the p
/// smallest entries.
pub fn min_p_sum(lambda: &Spectrum, cp: &ConeParams) -> Result<f64, SpectralError> {
    check_dims(lambda, cp)?;
    let sum_smallest = |vals: &[f64]| vals.iter().take(cp.p()).sum();
    if lambda.sorted_ascending {
        Ok(sum_smallest(lambda.values()))
    } else {
        let mut vals = lambda.values().to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        Ok(sum_smallest(&vals))
    }
}

/// Strict cone membership: every p-tuple sum positive.
pub fn in_cone(lambda: &Spectrum, cp: &ConeParams) -> Result<bool, SpectralError> {
    Ok(min_p_sum(lambda, cp)? > 0.0)
}

/// Value, gradient and log of `M^n_p` at a spectrum inside the cone.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorEval {
    /// `F(lambda) = exp(log_m / C(n,p))`.
    pub value: f64,
    /// Partial derivatives `F_i = dF/dlambda_i`, all positive in the cone.
    pub grad: Vec<f64>,
    /// `log M^n_p = sum of log tuple sums`.
    pub log_m: f64,
}

/// Evaluate `F` and its gradient in the log domain.
///
/// `F_i = (F / C(n,p)) * sum over tuples containing i of 1/(tuple sum)`,
/// the analytic partial of the log-product. The single-tuple case `p = n`
/// is short-circuited to the exact linear form `F = sum(lambda)`, `F_i = 1`.
pub fn eval_f(lambda: &Spectrum, cp: &ConeParams) -> Result<OperatorEval, SpectralError> {
    check_dims(lambda, cp)?;
    let n = cp.n();
    let vals = lambda.values();

    if cp.tuple_count() == 1 {
        let total: f64 = vals.iter().sum();
        if total <= 0.0 {
            return Err(SpectralError::ConeViolation {
                tuple: (0..n).collect(),
                sum: total,
            });
        }
        return Ok(OperatorEval {
            value: total,
            grad: vec![1.0; n],
            log_m: total.ln(),
        });
    }

    let mut log_m = 0.0;
    let mut recip = vec![0.0_f64; n];
    let mut violation: Option<(Vec<usize>, f64)> = None;
    for_each_combination(n, cp.p(), |tuple| {
        if violation.is_some() {
            return;
        }
        let s: f64 = tuple.iter().map(|&i| vals[i]).sum();
        if s <= 0.0 {
            violation = Some((tuple.to_vec(), s));
            return;
        }
        log_m += s.ln();
        let inv = 1.0 / s;
        for &i in tuple {
            recip[i] += inv;
        }
    });
    if let Some((tuple, sum)) = violation {
        return Err(SpectralError::ConeViolation { tuple, sum });
    }
    let c = cp.tuple_count() as f64;
    let value = (log_m / c).exp();
    let grad = recip.iter().map(|r| value / c * r).collect();
    Ok(OperatorEval {
        value,
        grad,
        log_m,
    })
}

/// Ascending eigen decomposition of a symmetric matrix.
pub(crate) fn symmetric_eigen_sorted(
    mat: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>), SpectralError> {
    let eig = mat
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or(SpectralError::EigenFailure)?;
    let n = mat.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut q = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        q.set_column(col, &eig.eigenvectors.column(i));
    }
    Ok((values, q))
}

/// `F` and its matrix derivative `dF/dU` for a symmetric `U` in the cone.
///
/// With `U = Q diag(lambda) Q^T`, the derivative is `Q diag(F_i) Q^T`; it is
/// positive definite and diagonal whenever `U` is diagonal. Repeated
/// eigenvalues need no special treatment because `F_i = F_j` on ties.
pub fn matrix_derivative(
    u: &DMatrix<f64>,
    cp: &ConeParams,
) -> Result<(f64, DMatrix<f64>), SpectralError> {
    let sym = symmetrize(u);
    if cp.tuple_count() == 1 {
        let trace = sym.trace();
        if trace <= 0.0 {
            return Err(SpectralError::ConeViolation {
                tuple: (0..cp.n()).collect(),
                sum: trace,
            });
        }
        return Ok((trace, DMatrix::identity(cp.n(), cp.n())));
    }
    let (values, q) = symmetric_eigen_sorted(&sym)?;
    let spectrum = Spectrum::new(values)?;
    let eval = eval_f(&spectrum, cp)?;
    let df = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eval.grad.clone())) * q.transpose();
    Ok((eval.value, symmetrize(&df)))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Outcome of one structure condition over a sample set.
///
/// Identity conditions record the worst relative deviation (pass means
/// `worst_margin <= tol`, stored negated so that larger is always better);
/// inequality conditions record the worst signed margin directly (pass means
/// `worst_margin >= -tol`).
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub worst_margin: f64,
    pub failures: usize,
    pub pass: bool,
}

impl ConditionCheck {
    fn new() -> Self {
        ConditionCheck {
            worst_margin: f64::INFINITY,
            failures: 0,
            pass: true,
        }
    }

    /// Identity check: `deviation <= tol` required; margin is `-deviation`.
    fn record_deviation(&mut self, deviation: f64, tol: f64) {
        self.record_margin(-deviation, tol);
    }

    /// Inequality check: `margin >= -tol` required.
    fn record_margin(&mut self, margin: f64, tol: f64) {
        if margin < self.worst_margin {
            self.worst_margin = margin;
        }
        if margin < -tol {
            self.failures += 1;
            self.pass = false;
        }
    }
}

/// Report of the structure-condition suite for `F` on a sample set.
#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub samples: usize,
    pub tol: f64,
    /// `|F(t*lambda) - t*F(lambda)|` for t in {1/2, 2}, relative.
    pub homogeneity: ConditionCheck,
    /// `|sum F_i lambda_i - F|`, relative.
    pub euler_identity: ConditionCheck,
    /// `sum F_i - F(1,...,1)` where `F(1,...,1) = p`.
    pub gradient_sum_lower_bound: ConditionCheck,
    /// `F((lambda+mu)/2) - (F(lambda)+F(mu))/2` over sample pairs.
    pub midpoint_concavity: ConditionCheck,
    pub concavity_pairs: usize,
    /// `min_i F_i` over all samples; positivity is strict.
    pub gradient_positivity: ConditionCheck,
    /// Observed `min F_j / (1 + sum F_i)` over samples with some negative
    /// eigenvalue, taking j among the negative slots. Diagnostic only; the
    /// theory asserts a positive lower bound exists but does not quantify it.
    pub nu0_observed: Option<f64>,
    pub pass: bool,
}

/// Verify homogeneity, the Euler identity, the gradient-sum lower bound,
/// midpoint concavity and gradient positivity on `samples`, all of which
/// must lie inside the cone.
pub fn check_structure(
    samples: &[Spectrum],
    cp: &ConeParams,
    tol: f64,
) -> Result<StructureReport, SpectralError> {
    let mut homogeneity = ConditionCheck::new();
    let mut euler = ConditionCheck::new();
    let mut grad_sum = ConditionCheck::new();
    let mut concavity = ConditionCheck::new();
    let mut positivity = ConditionCheck::new();
    let mut nu0: Option<f64> = None;

    let p = cp.p() as f64;
    let mut evals: Vec<OperatorEval> = Vec::with_capacity(samples.len());
    for lambda in samples {
        let eval = eval_f(lambda, cp)?;

        for t in [0.5, 2.0] {
            let scaled = Spectrum::new(lambda.values().iter().map(|v| t * v).collect())?;
            let f_scaled = eval_f(&scaled, cp)?.value;
            let rel = (f_scaled - t * eval.value).abs() / (t * eval.value).abs().max(1.0);
            homogeneity.record_deviation(rel, tol);
        }

        let euler_sum: f64 = eval
            .grad
            .iter()
            .zip(lambda.values())
            .map(|(fi, li)| fi * li)
            .sum();
        let rel = (euler_sum - eval.value).abs() / eval.value.abs().max(1.0);
        euler.record_deviation(rel, tol);

        grad_sum.record_margin(eval.grad.iter().sum::<f64>() - p, tol);

        let min_grad = eval.grad.iter().cloned().fold(f64::INFINITY, f64::min);
        positivity.record_margin(min_grad, 0.0);

        let has_negative = lambda.values().iter().any(|&v| v < 0.0);
        if has_negative {
            let sum_grad: f64 = eval.grad.iter().sum();
            let min_neg_slot = lambda
                .values()
                .iter()
                .zip(&eval.grad)
                .filter(|(&v, _)| v < 0.0)
                .map(|(_, &fi)| fi)
                .fold(f64::INFINITY, f64::min);
            let ratio = min_neg_slot / (1.0 + sum_grad);
            nu0 = Some(match nu0 {
                Some(prev) => prev.min(ratio),
                None => ratio,
            });
        }

        evals.push(eval);
    }

    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let mid = Spectrum::new(
                samples[i]
                    .values()
                    .iter()
                    .zip(samples[j].values())
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect(),
            )?;
            let f_mid = eval_f(&mid, cp)?.value;
            concavity.record_margin(f_mid - 0.5 * (evals[i].value + evals[j].value), tol);
            pairs += 1;
        }
    }

    let pass = homogeneity.pass
        && euler.pass
        && grad_sum.pass
        && concavity.pass
        && positivity.pass;
    Ok(StructureReport {
        samples: samples.len(),
        tol,
        homogeneity,
        euler_identity: euler,
        gradient_sum_lower_bound: grad_sum,
        midpoint_concavity: concavity,
        concavity_pairs: pairs,
        gradient_positivity: positivity,
        nu0_observed: nu0,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(n: usize, p: usize) -> ConeParams {
        ConeParams::new(n, p).unwrap()
    }

    fn spec(vals: &[f64]) -> Spectrum {
        Spectrum::new(vals.to_vec()).unwrap()
    }

    #[test]
    fn tuple_counts() {
        assert_eq!(cp(3, 2).tuple_count(), 3);
        assert_eq!(cp(4, 2).tuple_count(), 6);
        assert_eq!(cp(6, 3).tuple_count(), 20);
        assert_eq!(cp(12, 6).tuple_count(), 924);
        assert_eq!(cp(5, 5).tuple_count(), 1);
    }

    #[test]
    fn existence_range_flag() {
        assert!(cp(4, 2).in_existence_range());
        assert!(cp(3, 2).in_existence_range());
        assert!(!cp(3, 1).in_existence_range());
    }

    #[test]
    fn min_p_sum_examples() {
        assert_eq!(min_p_sum(&spec(&[1.0, 2.0, 3.0]), &cp(3, 2)).unwrap(), 3.0);
        assert_eq!(min_p_sum(&spec(&[1.0, 1.0, 1.0]), &cp(3, 3)).unwrap(), 3.0);
        assert_eq!(
            min_p_sum(&spec(&[-0.5, 1.0, 1.0]), &cp(3, 2)).unwrap(),
            0.5
        );
        // unsorted input takes the same value
        assert_eq!(
            min_p_sum(&spec(&[1.0, -0.5, 1.0]), &cp(3, 2)).unwrap(),
            0.5
        );
    }

    #[test]
    fn cone_membership_is_strict() {
        assert!(in_cone(&spec(&[-0.5, 1.0, 1.0]), &cp(3, 2)).unwrap());
        assert!(!in_cone(&spec(&[-1.0, 1.0, 1.0]), &cp(3, 2)).unwrap());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = min_p_sum(&spec(&[1.0, 2.0]), &cp(3, 2)).unwrap_err();
        assert!(matches!(err, SpectralError::DimensionMismatch { .. }));
    }

    #[test]
    fn eval_f_at_ones_equals_p() {
        for (n, p) in [(3, 2), (4, 2), (5, 3), (6, 3), (4, 1)] {
            let lambda = spec(&vec![1.0; n]);
            let eval = eval_f(&lambda, &cp(n, p)).unwrap();
            assert!((eval.value - p as f64).abs() < 1e-12, "F(1..1) != p");
            for g in &eval.grad {
                assert!((g - p as f64 / n as f64).abs() < 1e-12, "grad != p/n");
            }
        }
    }

    #[test]
    fn eval_f_123_p2() {
        let eval = eval_f(&spec(&[1.0, 2.0, 3.0]), &cp(3, 2)).unwrap();
        let expected = 60.0_f64.powf(1.0 / 3.0);
        assert!((eval.value - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn eval_f_single_tuple_is_exact_sum() {
        let eval = eval_f(&spec(&[0.25, -0.5, 1.0]), &cp(3, 3)).unwrap();
        assert_eq!(eval.value, 0.75);
        assert_eq!(eval.grad, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eval_f_cone_violation() {
        let err = eval_f(&spec(&[-1.0, 1.0, 1.0]), &cp(3, 2)).unwrap_err();
        match err {
            SpectralError::ConeViolation { tuple, sum } => {
                assert_eq!(tuple, vec![0, 1]);
                assert_eq!(sum, 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matrix_derivative_identity() {
        let u = DMatrix::<f64>::identity(3, 3);
        let (f, df) = matrix_derivative(&u, &cp(3, 2)).unwrap();
        assert!((f - 2.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 2.0 / 3.0 } else { 0.0 };
                assert!((df[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_derivative_diagonal_matches_eval_f() {
        let u = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let (_, df) = matrix_derivative(&u, &cp(3, 2)).unwrap();
        let eval = eval_f(&spec(&[1.0, 2.0, 3.0]), &cp(3, 2)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { eval.grad[i] } else { 0.0 };
                assert!((df[(i, j)] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn euler_identity_for_matrix_derivative() {
        // trace(dF * U) = F for degree-one homogeneity
        let u = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 1.0]);
        let (f, df) = matrix_derivative(&u, &cp(3, 2)).unwrap();
        let trace = (&df * &u).trace();
        assert!((trace - f).abs() < 1e-10, "trace {trace} vs F {f}");
    }

    #[test]
    fn structure_report_at_ones() {
        let samples = vec![spec(&[1.0, 1.0, 1.0, 1.0])];
        let report = check_structure(&samples, &cp(4, 2), 1e-9).unwrap();
        assert!(report.pass);
        assert!((report.gradient_sum_lower_bound.worst_margin - 0.0).abs() < 1e-12);
        assert!(report.nu0_observed.is_none());
    }

    #[test]
    fn concavity_equality_on_identical_pair() {
        let samples = vec![spec(&[1.0, 2.0, 3.0]), spec(&[1.0, 2.0, 3.0])];
        let report = check_structure(&samples, &cp(3, 2), 1e-9).unwrap();
        assert!(report.pass);
        assert!(report.midpoint_concavity.worst_margin.abs() < 1e-12);
        assert_eq!(report.concavity_pairs, 1);
    }

    #[test]
    fn combination_iteration_is_lexicographic() {
        let mut seen = Vec::new();
        for_each_combination(4, 2, |t| seen.push(t.to_vec()));
        assert_eq!(
            seen,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
    }
}
