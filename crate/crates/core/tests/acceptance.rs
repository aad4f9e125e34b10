//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured margins. Run with `cargo test --test acceptance` (add
//! `-- --nocapture` to see the margins).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pluris::cli::{build_spec, preset_config};
use pluris::geometry::{cauchy_interlace_margin, ScalarField};
use pluris::monitors::{c0_sandwich, run_monitors, supersolution_h};
use pluris::oracles::{brute_force_m, fd_gradient, random_cone_spectrum};
use pluris::problem::ProblemSpec;
use pluris::solver::{continuity_solve, residual, HomotopyContext};
use pluris::spectral::{check_structure, eval_f, in_cone, matrix_derivative, ConeParams, Spectrum};

fn preset_spec(name: &str, grid_override: Option<usize>) -> ProblemSpec {
    let mut cfg = preset_config(name).expect("preset exists");
    if let Some(g) = grid_override {
        cfg.problem.as_mut().unwrap().grid = Some(g);
    }
    build_spec(&cfg).expect("preset builds")
}

#[test]
fn operator_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for (n, p) in [(3, 2), (4, 2), (5, 3), (6, 3)] {
        let cp = ConeParams::new(n, p).unwrap();
        let c = cp.tuple_count() as f64;
        for _ in 0..10_000 {
            let lambda = random_cone_spectrum(&mut rng, &cp);
            let f = eval_f(&lambda, &cp).unwrap().value;
            let m = brute_force_m(&lambda, &cp).unwrap();
            let rel = (f.powf(c) - m).abs() / m.abs();
            worst = worst.max(rel);
        }
    }
    let elapsed = started.elapsed();
    assert!(worst <= 1e-12, "worst relative error {worst:e}");
    assert!(elapsed.as_secs_f64() <= 30.0, "took {elapsed:.2?}");
    println!("PASS operator oracle equivalence: worst rel err {worst:.3e} in {elapsed:.2?}");
}

#[test]
fn structure_condition_suite() {
    // 10^4 cone samples spread over every (n, p) with n <= 6, checked in
    // chunks so midpoint concavity sees sample pairs
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<(usize, usize)> = (2..=6_usize)
        .flat_map(|n| (1..=n).map(move |p| (n, p)))
        .collect();
    let per_pair = 10_000usize.div_ceil(pairs.len());
    let mut total = 0usize;
    let mut worst_failures = 0usize;
    let mut worst_euler = 0.0_f64;
    let mut worst_concavity = f64::INFINITY;
    for &(n, p) in &pairs {
        let cp = ConeParams::new(n, p).unwrap();
        let samples: Vec<Spectrum> = (0..per_pair)
            .map(|_| random_cone_spectrum(&mut rng, &cp))
            .collect();
        total += samples.len();
        for chunk in samples.chunks(50) {
            let report = check_structure(chunk, &cp, 1e-9).unwrap();
            worst_failures += report.homogeneity.failures
                + report.euler_identity.failures
                + report.gradient_sum_lower_bound.failures
                + report.midpoint_concavity.failures
                + report.gradient_positivity.failures;
            worst_euler = worst_euler.max(-report.euler_identity.worst_margin);
            worst_concavity = worst_concavity.min(report.midpoint_concavity.worst_margin);
            assert!(report.pass, "structure failure at n={n}, p={p}");
        }
    }
    assert!(total >= 10_000);
    assert_eq!(worst_failures, 0);
    println!(
        "PASS structure conditions: {total} samples, zero failures, worst Euler dev {worst_euler:.3e}, worst concavity margin {worst_concavity:.3e}"
    );
}

#[test]
fn gradient_correctness() {
    // analytic gradient vs central differences on 10^3 samples
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pairs = [(3, 2), (4, 2), (5, 3), (6, 3), (2, 1)];
    let per_pair = 200;
    let mut worst_rel = 0.0_f64;
    for &(n, p) in &pairs {
        let cp = ConeParams::new(n, p).unwrap();
        for _ in 0..per_pair {
            let lambda = random_cone_spectrum(&mut rng, &cp);
            let analytic = eval_f(&lambda, &cp).unwrap().grad;
            let f = move |v: &[f64]| -> Result<f64, pluris::spectral::SpectralError> {
                Ok(eval_f(&Spectrum::new(v.to_vec())?, &cp)?.value)
            };
            let scale: f64 =
                1e-6 * (1.0 + lambda.values().iter().fold(0.0_f64, |a, v| a.max(v.abs())));
            let fd = fd_gradient(&f, lambda.values(), scale).unwrap();
            for (a, d) in analytic.iter().zip(&fd) {
                let rel = (a - d).abs() / a.abs().max(1e-12);
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    assert!(worst_rel <= 1e-6, "worst gradient deviation {worst_rel:e}");

    // rotation equivariance of the matrix derivative on 100 random rotations
    let mut rng = StdRng::seed_from_u64(5);
    let mut worst_equiv = 0.0_f64;
    for k in 0..100 {
        let n = 3 + k % 3;
        let p = 2.min(n - 1).max(1);
        let cp = ConeParams::new(n, p).unwrap();
        // cone-interior U: symmetric with a positive shift
        let sym = {
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.5..0.5));
            0.5 * (&m + m.transpose()) + DMatrix::<f64>::identity(n, n) * 2.0
        };
        let q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
            .qr()
            .q();
        let (_, df) = matrix_derivative(&sym, &cp).unwrap();
        let (_, df_rot) = matrix_derivative(&(q.transpose() * &sym * &q), &cp).unwrap();
        let dev = (&df_rot - q.transpose() * &df * &q).amax();
        worst_equiv = worst_equiv.max(dev);
    }
    assert!(worst_equiv <= 1e-9, "worst equivariance deviation {worst_equiv:e}");
    println!(
        "PASS gradient correctness: FD dev {worst_rel:.3e}, rotation equivariance {worst_equiv:.3e}"
    );
}

#[test]
fn cone_predicate_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut disagreements = 0usize;
    let mut checked = 0usize;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=6_usize);
        let p = rng.gen_range(1..=n);
        let cp = ConeParams::new(n, p).unwrap();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let lambda = Spectrum::new(vals.clone()).unwrap();
        let fast = in_cone(&lambda, &cp).unwrap();
        // independent full enumeration over index subsets via bitmasks
        let mut slow = true;
        for mask in 0usize..(1 << n) {
            if (mask.count_ones() as usize) == p {
                let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| vals[i]).sum();
                if s <= 0.0 {
                    slow = false;
                    break;
                }
            }
        }
        if fast != slow {
            disagreements += 1;
        }
        checked += 1;
    }
    assert_eq!(disagreements, 0, "out of {checked}");
    println!("PASS cone predicate: {checked} random vectors, zero disagreements");
}

/// Independent 5-point Laplacian assembly and dense LU solve for the p = n
/// degeneration of the poisson2d preset.
fn poisson_direct_oracle(spec: &ProblemSpec) -> ScalarField {
    let grid = spec.grid();
    assert_eq!(grid.dim(), 2);
    let shape = grid.shape()[0];
    let h = grid.spacing()[0];
    let interior = grid.interior_indices();
    let mut row_of_lin = vec![usize::MAX; grid.len()];
    for (row, &lin) in interior.iter().enumerate() {
        row_of_lin[lin] = row;
    }
    let m = interior.len();
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    let pi = std::f64::consts::PI;
    for (row, &lin) in interior.iter().enumerate() {
        let idx = grid.multi(lin);
        let x = grid.coords(lin);
        // ftilde = f for C(n,n) = 1
        b[row] = 1.0 + 0.5 * (pi * x[0]).sin() * (pi * x[1]).sin();
        a[(row, row)] = -4.0 / (h * h);
        for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let ni = (idx[0] as i64 + di) as usize;
            let nj = (idx[1] as i64 + dj) as usize;
            let nlin = ni * shape + nj;
            if grid.is_boundary(nlin) {
                let xb = grid.coords(nlin);
                let phi = 0.5 * (xb[0] * xb[0] + xb[1] * xb[1]);
                b[row] -= phi / (h * h);
            } else {
                a[(row, row_of_lin[nlin])] = 1.0 / (h * h);
            }
        }
    }
    let sol = a.lu().solve(&b).expect("oracle system solvable");
    let mut field = ScalarField::zeros(grid);
    for lin in 0..grid.len() {
        if grid.is_boundary(lin) {
            let x = grid.coords(lin);
            field.set(lin, 0.5 * (x[0] * x[0] + x[1] * x[1]));
        } else {
            field.set(lin, sol[row_of_lin[lin]]);
        }
    }
    field
}

#[test]
fn poisson_degeneration_matches_direct_solve() {
    let started = Instant::now();
    let spec = preset_spec("poisson2d", Some(33));
    let result = continuity_solve(&spec).unwrap();
    let oracle = poisson_direct_oracle(&spec);
    let mut sup = 0.0_f64;
    for lin in 0..spec.grid().len() {
        sup = sup.max((result.u.get(lin) - oracle.get(lin)).abs());
    }
    let elapsed = started.elapsed();
    assert!(sup <= 1e-8, "sup deviation from direct solve {sup:e}");
    assert!(elapsed.as_secs_f64() <= 5.0, "took {elapsed:.2?}");

    let report = run_monitors(&spec, &result.u).unwrap();
    assert!(report.c0.pass, "sandwich failed: {:?}", report.c0);
    println!(
        "PASS poisson degeneration: direct-solve deviation {sup:.3e}, sandwich margins ({:.1e}, {:.1e}), {elapsed:.2?}",
        report.c0.lower_margin, report.c0.upper_margin
    );
}

fn manufactured_ma_error(points: usize) -> (f64, ProblemSpec, ScalarField) {
    let spec = preset_spec("ma2d_mms", Some(points));
    let result = continuity_solve(&spec).unwrap();
    let u_star = pluris::expr::parse("(x1^2 + x2^2)/2 + 0.05*sin(pi*x1)*sin(pi*x2)", 2).unwrap();
    let exact = ScalarField::from_expr(spec.grid(), &u_star).unwrap();
    let mut sup = 0.0_f64;
    for lin in 0..spec.grid().len() {
        sup = sup.max((result.u.get(lin) - exact.get(lin)).abs());
    }
    (sup, spec, result.u)
}

#[test]
fn monge_ampere_manufactured_second_order() {
    let t33 = Instant::now();
    let (e33, spec33, u33) = manufactured_ma_error(33);
    let t33 = t33.elapsed();
    let t65 = Instant::now();
    let (e65, _, _) = manufactured_ma_error(65);
    let t65 = t65.elapsed();
    let ratio = e33 / e65;
    assert!(
        (3.4..=4.6).contains(&ratio),
        "error ratio {ratio} (errors {e33:e}, {e65:e})"
    );
    assert!(t33.as_secs_f64() <= 60.0, "33-grid took {t33:.2?}");
    assert!(t65.as_secs_f64() <= 60.0, "65-grid took {t65:.2?}");

    let report = run_monitors(&spec33, &u33).unwrap();
    assert!(report.c0.pass, "sandwich failed: {:?}", report.c0);
    println!(
        "PASS manufactured Monge-Ampere: errors {e33:.3e} -> {e65:.3e}, ratio {ratio:.3}, times {t33:.2?}/{t65:.2?}"
    );
}

#[test]
fn general_case_n4_conformal() {
    let started = Instant::now();
    let spec = preset_spec("pma_half", Some(17));
    assert!(spec.cp().in_existence_range());
    let result = continuity_solve(&spec).unwrap();
    assert_eq!(result.log.len(), 10, "path must complete in 10 steps");
    for rec in &result.log {
        assert_eq!(rec.bisections_before, 0, "no bisection allowed at t = {}", rec.t);
    }
    assert!(
        result.final_residual_sup <= 1e-9,
        "final residual {:e}",
        result.final_residual_sup
    );

    // sandwich on the converged solve
    let sup = supersolution_h(&spec).unwrap();
    let usub = HomotopyContext::new(&spec).unwrap().initial_state().u;
    let report = c0_sandwich(&result.u, &usub, &sup.h, 1e-8);
    assert!(
        report.lower_margin >= -1e-8 && report.upper_margin >= -1e-8,
        "sandwich margins ({:e}, {:e})",
        report.lower_margin,
        report.upper_margin
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 600.0, "took {elapsed:.2?}");
    println!(
        "PASS n=4 conformal case: 10 steps, residual {:.3e}, margins ({:.1e}, {:.1e}), {elapsed:.2?}",
        result.final_residual_sup, report.lower_margin, report.upper_margin
    );
}

#[test]
fn homotopy_anchoring_on_all_presets() {
    let mut worst = 0.0_f64;
    for name in [
        "poisson2d",
        "poisson2d_mms",
        "ma2d",
        "ma2d_mms",
        "pma_half",
        "pma_half_mms",
    ] {
        let spec = preset_spec(name, None);
        let ctx = HomotopyContext::new(&spec).unwrap();
        let state = ctx.initial_state();
        let res = residual(&ctx, &state.u, 0.0).unwrap();
        assert!(res.sup <= 1e-14, "{name}: anchoring residual {:e}", res.sup);
        worst = worst.max(res.sup);
    }
    println!("PASS homotopy anchoring: worst t=0 residual {worst:.3e} over 6 presets");
}

#[test]
fn newton_one_step_on_linear_degeneration() {
    // p = n with f independent of (z, p): the equation is linear, so every
    // homotopy step converges in exactly one full Newton step
    let spec = preset_spec("poisson2d", Some(33));
    let result = continuity_solve(&spec).unwrap();
    for rec in &result.log {
        assert_eq!(
            rec.newton_iterations, 1,
            "t = {} took {} iterations",
            rec.t, rec.newton_iterations
        );
        assert_eq!(rec.damping, vec![1.0], "t = {} damped", rec.t);
        assert!(rec.residual_sup <= 1e-10);
    }
    println!(
        "PASS newton one-step: 10 steps, each 1 full-step iteration to {:.1e}",
        result.final_residual_sup
    );
}

#[test]
fn cauchy_interlacing_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=8_usize);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-3.0..3.0));
        let sym = 0.5 * (&m + m.transpose());
        let margin = cauchy_interlace_margin(&sym).unwrap();
        worst = worst.min(margin);
        assert!(margin >= -1e-10, "interlacing violated by {margin:e}");
    }
    println!("PASS Cauchy interlacing: 1000 matrices, worst margin {worst:.3e}");
}

#[test]
fn c0_sandwich_on_converged_solves() {
    // every converged solve in this suite must satisfy the sandwich; this
    // re-checks the two fast presets end to end through the monitors
    for (name, grid) in [("poisson2d", Some(17)), ("ma2d", Some(17)), ("ma2d_mms", Some(33))] {
        let spec = preset_spec(name, grid);
        let result = continuity_solve(&spec).unwrap();
        let report = run_monitors(&spec, &result.u).unwrap();
        assert!(
            report.c0.pass && report.c0.lower_margin >= -1e-8 && report.c0.upper_margin >= -1e-8,
            "{name}: {:?}",
            report.c0
        );
        println!(
            "PASS C0 sandwich [{name}]: margins ({:.3e}, {:.3e})",
            report.c0.lower_margin, report.c0.upper_margin
        );
    }
}
