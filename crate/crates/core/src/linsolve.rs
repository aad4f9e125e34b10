//! Sparse matrix storage and the two linear solvers used by the Newton
//! iteration: a banded direct factorization for 2-d grids and an
//! unpreconditioned BiCGSTAB iteration for everything else. Both are
//! deterministic: fixed ordering, no randomized pivoting.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinSolveError {
    #[error("singular pivot at column {0} in banded factorization")]
    SingularPivot(usize),
    #[error("iterative solver stalled after {iterations} iterations (residual {residual:e})")]
    IterationStall { iterations: usize, residual: f64 },
    #[error("iterative solver broke down (rho ~ 0) at iteration {0}")]
    Breakdown(usize),
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row `(column, value)` lists; duplicate columns are
    /// summed, entries within a row are sorted by column.
    pub fn from_rows(nrows: usize, ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> CsrMatrix {
        assert_eq!(rows.len(), nrows);
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                debug_assert!(c < ncols);
                if last == Some(c) {
                    *data.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    data.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.data[span])
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    /// Lower and upper bandwidths `(kl, ku)`.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0usize;
        let mut ku = 0usize;
        for r in 0..self.nrows {
            let (cols, _) = self.row(r);
            for &c in cols {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

/// Direct solve by banded LU with partial pivoting (LAPACK-style band
/// storage with `kl` extra fill rows).
pub fn solve_banded(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, LinSolveError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "banded solve needs a square matrix");
    assert_eq!(b.len(), n);
    let (kl, ku_orig) = a.bandwidths();
    let ku = ku_orig + kl; // room for pivoting fill
    let ldab = kl + ku + 1;
    // ab[band_row * n + j] with band_row = ku + i - j for entry (i, j)
    let mut ab = vec![0.0_f64; ldab * n];
    for r in 0..n {
        let (cols, vals) = a.row(r);
        for (c, v) in cols.iter().zip(vals) {
            ab[(ku + r - c) * n + c] = *v;
        }
    }

    let mut pivots = vec![0usize; n];
    for j in 0..n {
        // pivot search within the band column
        let reach = kl.min(n - 1 - j);
        let mut piv = j;
        let mut piv_val = ab[ku * n + j].abs();
        for i in 1..=reach {
            let v = ab[(ku + i) * n + j].abs();
            if v > piv_val {
                piv_val = v;
                piv = j + i;
            }
        }
        if piv_val == 0.0 {
            return Err(LinSolveError::SingularPivot(j));
        }
        pivots[j] = piv;
        if piv != j {
            // swap rows j and piv across the affected columns
            let hi = (j + ku).min(n - 1);
            for c in j..=hi {
                let r1 = ku + j - c;
                let r2 = ku + piv - c;
                // entries may lie outside original band but inside fill region
                if r2 < ldab {
                    ab.swap(r1 * n + c, r2 * n + c);
                }
            }
        }
        let diag = ab[ku * n + j];
        for i in 1..=reach {
            let idx = (ku + i) * n + j;
            let m = ab[idx] / diag;
            ab[idx] = m;
            if m != 0.0 {
                let hi = (j + ku).min(n - 1);
                // row j entry at column c sits in band row ku + j - c
                for c in j + 1..=hi {
                    let aj = ab[(ku + j - c) * n + c];
                    if aj != 0.0 {
                        ab[(ku + j + i - c) * n + c] -= m * aj;
                    }
                }
            }
        }
    }

    // forward substitution with pivoting
    let mut x = b.to_vec();
    for j in 0..n {
        let piv = pivots[j];
        if piv != j {
            x.swap(j, piv);
        }
        let reach = kl.min(n - 1 - j);
        let xj = x[j];
        if xj != 0.0 {
            for i in 1..=reach {
                x[j + i] -= ab[(ku + i) * n + j] * xj;
            }
        }
    }
    // back substitution
    for j in (0..n).rev() {
        let lo = j.saturating_sub(ku);
        x[j] /= ab[ku * n + j];
        let xj = x[j];
        if xj != 0.0 {
            for i in lo..j {
                x[i] -= ab[(ku + i - j) * n + j] * xj;
            }
        }
    }
    Ok(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unpreconditioned BiCGSTAB to relative residual `tol`, capped at
/// `max_iter` iterations; restarts the shadow residual on breakdown.
pub fn solve_bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize), LinSolveError> {
    let n = a.nrows();
    let norm_b = norm2(b);
    if norm_b == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let target = tol * norm_b;

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut rho = 1.0_f64;
    let mut alpha = 1.0_f64;
    let mut omega = 1.0_f64;
    let mut fresh = true;

    for iter in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            // restart from the current residual
            r_hat.copy_from_slice(&r);
            rho = dot(&r_hat, &r);
            if rho.abs() < 1e-300 {
                return Err(LinSolveError::Breakdown(iter));
            }
            p.copy_from_slice(&r);
            fresh = false;
        } else {
            if fresh && iter == 0 {
                p.copy_from_slice(&r);
            } else {
                let beta = (rho_new / rho) * (alpha / omega);
                for i in 0..n {
                    p[i] = r[i] + beta * (p[i] - omega * v[i]);
                }
            }
            rho = rho_new;
        }
        a.matvec_into(&p, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            return Err(LinSolveError::Breakdown(iter));
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= target {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            return Ok((x, iter + 1));
        }
        a.matvec_into(&s, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(LinSolveError::Breakdown(iter));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm2(&r) <= target {
            return Ok((x, iter + 1));
        }
        if omega == 0.0 {
            return Err(LinSolveError::Breakdown(iter));
        }
    }
    Err(LinSolveError::IterationStall {
        iterations: max_iter,
        residual: norm2(&r) / norm_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_banded(rng: &mut StdRng, n: usize, kl: usize, ku: usize) -> CsrMatrix {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::new();
            let lo = i.saturating_sub(kl);
            let hi = (i + ku).min(n - 1);
            for j in lo..=hi {
                let v = if i == j {
                    4.0 + rng.gen_range(0.0..1.0)
                } else {
                    rng.gen_range(-1.0..1.0)
                };
                row.push((j, v));
            }
            rows.push(row);
        }
        CsrMatrix::from_rows(n, n, rows)
    }

    fn to_dense(a: &CsrMatrix) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(a.nrows(), a.ncols());
        for r in 0..a.nrows() {
            let (cols, vals) = a.row(r);
            for (c, v) in cols.iter().zip(vals) {
                m[(r, *c)] = *v;
            }
        }
        m
    }

    #[test]
    fn csr_merges_duplicates_and_sorts() {
        let a = CsrMatrix::from_rows(2, 2, vec![vec![(1, 2.0), (0, 1.0), (1, 3.0)], vec![(1, 4.0)]]);
        assert_eq!(a.nnz(), 3);
        let (cols, vals) = a.row(0);
        assert_eq!(cols, &[0, 1]);
        assert_eq!(vals, &[1.0, 5.0]);
    }

    #[test]
    fn banded_lu_matches_dense_lu() {
        let mut rng = StdRng::seed_from_u64(42);
        for &(n, kl, ku) in &[(10usize, 2usize, 3usize), (40, 5, 5), (25, 1, 4)] {
            let a = random_banded(&mut rng, n, kl, ku);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = solve_banded(&a, &b).unwrap();
            let dense = to_dense(&a);
            let x_ref = dense
                .lu()
                .solve(&DVector::from_vec(b.clone()))
                .expect("dense solve");
            for i in 0..n {
                assert!(
                    (x[i] - x_ref[i]).abs() < 1e-10,
                    "n={n} i={i}: {} vs {}",
                    x[i],
                    x_ref[i]
                );
            }
        }
    }

    #[test]
    fn banded_lu_needs_pivoting_case() {
        // zero leading diagonal forces a pivot swap
        let a = CsrMatrix::from_rows(
            3,
            3,
            vec![
                vec![(0, 0.0), (1, 2.0)],
                vec![(0, 1.0), (1, 1.0), (2, 1.0)],
                vec![(1, 1.0), (2, 3.0)],
            ],
        );
        let b = vec![2.0, 3.0, 4.0];
        let x = solve_banded(&a, &b).unwrap();
        let r = a.matvec(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = CsrMatrix::from_rows(2, 2, vec![vec![(0, 1.0), (1, 1.0)], vec![(0, 1.0), (1, 1.0)]]);
        let err = solve_banded(&a, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, LinSolveError::SingularPivot(_)));
    }

    #[test]
    fn bicgstab_solves_laplacian() {
        // 1-d Dirichlet Laplacian, well conditioned at this size
        let n = 200;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = vec![(i, 2.0)];
            if i > 0 {
                row.push((i - 1, -1.0));
            }
            if i + 1 < n {
                row.push((i + 1, -1.0));
            }
            rows.push(row);
        }
        let a = CsrMatrix::from_rows(n, n, rows);
        let b = vec![1.0; n];
        let (x, iters) = solve_bicgstab(&a, &b, 1e-12, 10_000).unwrap();
        let r = a.matvec(&x);
        let res: f64 = r
            .iter()
            .zip(&b)
            .map(|(ri, bi)| (ri - bi) * (ri - bi))
            .sum::<f64>()
            .sqrt();
        assert!(res <= 1e-12 * (n as f64).sqrt() * 10.0, "residual {res}");
        assert!(iters < 10_000);
    }

    #[test]
    fn bicgstab_matches_banded_on_nonsymmetric_system() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = random_banded(&mut rng, 60, 3, 3);
        let b: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_direct = solve_banded(&a, &b).unwrap();
        let (x_iter, _) = solve_bicgstab(&a, &b, 1e-13, 10_000).unwrap();
        for i in 0..60 {
            assert!((x_direct[i] - x_iter[i]).abs() < 1e-9);
        }
    }
}
