use diracbc::clifford::{build_rep, chiral_projectors, GammaRep};
use diracbc::cylinder_solver::*;
use diracbc::geometry::{frame_jets, levi_civita, scalar_curvature_jet, weitzenbock};
use diracbc::linalg::{c, eye, kron, max_abs, max_abs_diff, random_anti_hermitian, random_unitary, I};
use diracbc::recovery::{recover_n2, NormalData, SeriesSource, ThetaSource};
use diracbc::{CMat, Error, RMat, C64};
use nalgebra::DVector;
use rand::SeedableRng;

fn sym(d: usize, v: &[f64]) -> RMat {
    RMat::from_row_slice(d, d, v)
}

fn warped_n2(m: f64, length: f64) -> CylinderConfig {
    let mut cfg = CylinderConfig::flat(2, 1, m, length);
    cfg.metric = vec![sym(1, &[1.0]), sym(1, &[0.4]), sym(1, &[0.2])];
    cfg
}

fn warped_n3(m: f64, e_rank: usize, length: f64, seed: u64) -> CylinderConfig {
    let mut cfg = CylinderConfig::flat(3, e_rank, m, length);
    cfg.metric = vec![sym(2, &[1.0, 0.1, 0.1, 0.9]), sym(2, &[0.3, 0.05, 0.05, -0.2]), sym(2, &[0.1, 0.0, 0.0, 0.15])];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    cfg.connection = (0..2).map(|_| (0..3).map(|k| random_anti_hermitian(e_rank, &mut rng) * c(0.2 / (k + 1) as f64)).collect()).collect();
    cfg
}

fn theta0(cfg: &CylinderConfig, rep: &GammaRep, order: usize) -> SeriesSource {
    SeriesSource::forward(&cfg.to_boundary_jet(order.max(2)).unwrap(), rep, order, false).unwrap()
}

/// Closed-form Θ̂ for the flat n=2 cylinder: M² = (ξ² − m²)I, so e^{ML}/cosh(λL) = I + tanh(λL)/λ·M.
fn flat_oracle(rep: &GammaRep, xi: f64, m: f64, length: f64) -> CMat {
    let pr = chiral_projectors(rep).unwrap();
    let g1 = rep.tgamma(1);
    let g2 = rep.tgamma(2);
    let mm = &g2 * (&g1 * (I * xi) - eye(2) * c(m));
    let lam = C64::new(xi * xi - m * m, 0.0).sqrt();
    let ratio = if lam.norm() < 1e-14 { c(length) } else { (lam * length).tanh() / lam };
    let e = eye(2) + &mm * ratio;
    let (vp, vm) = (&pr.v_plus_basis, &pr.v_minus_basis);
    let w = -(vm.adjoint() * &e * vm).try_inverse().unwrap() * (vm.adjoint() * &e * vp);
    vm * w * vp.adjoint()
}

#[test]
fn flat_n2_matches_closed_form() {
    let rep = build_rep(2, 1).unwrap();
    for m in [0.0, 1.0, 0.5] {
        let cfg = CylinderConfig::flat(2, 1, m, 4.0);
        let mut worst: f64 = 0.0;
        for k in [-64i64, -33, -8, 8, 9, 17, 31, 64] {
            let xi = cfg.covector(&[k]);
            let num = theta_multiplier(&cfg, &rep, &xi).unwrap();
            worst = worst.max(max_abs_diff(&num.matrix, &flat_oracle(&rep, xi[0], m, 4.0)));
            assert!(num.residual <= cfg.solver.tol);
        }
        assert!(worst < 1e-8, "m={m}: {worst:.3e}");
    }
}

#[test]
fn flat_massless_equals_principal_symbol() {
    let rep = build_rep(2, 1).unwrap();
    let cfg = CylinderConfig::flat(2, 1, 0.0, 4.0);
    let src = theta0(&cfg, &rep, 0);
    for k in [8i64, -8, 20] {
        let xi = cfg.covector(&[k]);
        let num = theta_multiplier(&cfg, &rep, &xi).unwrap().matrix;
        let sym = src.eval_x0(0, &xi).unwrap();
        assert!(max_abs_diff(&num, &sym) < 1e-10);
        // −iγ²γ¹ sign(ξ) on 𝕍⁺
        let pr = chiral_projectors(&rep).unwrap();
        let closed = &rep.tgamma(2) * &rep.tgamma(1) * (-I * (k as f64).signum()) * &pr.b_plus;
        assert!(max_abs_diff(&num, &closed) < 1e-10);
    }
}

#[test]
fn mode_operator_flat_n2() {
    let rep = build_rep(2, 1).unwrap();
    let cfg = CylinderConfig::flat(2, 1, 0.7, 1.0);
    let m = mode_operator(&cfg, &rep, &[3.0], 0.4).unwrap();
    let expect = -(&rep.tgamma(2) * (eye(2) * c(0.7) - &rep.tgamma(1) * (I * 3.0)));
    assert!(max_abs_diff(&m, &expect) < 1e-14);
    let sq = &m * &m;
    assert!(max_abs_diff(&sq, &(eye(2) * c(9.0 - 0.49))) < 1e-13);
    let m0 = mode_operator(&cfg, &rep, &[0.0], 0.0).unwrap();
    assert!(max_abs_diff(&m0, &(&rep.tgamma(2) * c(-0.7))) < 1e-14);
}

#[test]
fn collar_matches_boundary_geometry() {
    for ne in [1, 2] {
        let cfg = warped_n3(1.0, ne, 3.0, 4);
        let rep = build_rep(3, ne).unwrap();
        let jet = cfg.to_boundary_jet(3).unwrap();
        let pt = CollarPoint::new(&cfg, &rep, 0.0).unwrap();
        let frame = frame_jets(&jet, &rep, false).unwrap();
        for al in 0..2 {
            assert!(max_abs_diff(&pt.kappa[al], frame.kappa[al].value().unwrap()) < 1e-12);
        }
        let conn = levi_civita(&jet).unwrap();
        let r = scalar_curvature_jet(&conn).value().unwrap().re;
        assert!((pt.scalar_curvature(&cfg) - r).abs() < 1e-12);
        assert!(max_abs_diff(&pt.weitzenbock(&rep), &weitzenbock(&jet, &rep).unwrap()) < 1e-12);
        // the mode matrix at x₀ agrees with the symbol of γⁿ(γᵃ∇_a − m) minus κₙ
        let xi = [1.3, -0.4];
        let mm = pt.mode_matrix(&rep, &xi, cfg.m);
        assert!(max_abs_diff(&(mm + &pt.kappa[2]), &pt.tangential_symbol(&rep, &xi, cfg.m)) < 1e-14);
    }
}

fn slope(cfg: &CylinderConfig, ray: &[i64]) -> f64 {
    let rep = build_rep(cfg.n, cfg.e_rank).unwrap();
    let src = theta0(cfg, &rep, 0);
    let ts = [8i64, 16, 32, 64, 128];
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let k: Vec<i64> = ray.iter().map(|r| r * t).collect();
            let xi = cfg.covector(&k);
            let num = theta_multiplier(cfg, &rep, &xi).unwrap().matrix;
            let p = src.eval_x0(0, &xi).unwrap();
            (xi.iter().map(|x| x * x).sum::<f64>().sqrt().ln(), max_abs(&(num - p)).ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
}

#[test]
fn principal_symbol_slope() {
    let s2 = slope(&warped_n2(1.0, 4.0), &[1]);
    assert!((s2 + 1.0).abs() < 0.1, "n=2 slope {s2}");
    let s3 = slope(&warped_n3(1.0, 1, 4.0, 2), &[1, 0]);
    assert!((s3 + 1.0).abs() < 0.1, "n=3 slope {s3}");
}

#[test]
fn lambda_theta_relation_per_mode() {
    for cfg in [warped_n3(1.0, 1, 4.0, 3), warped_n3(0.6, 2, 4.0, 5), warped_n2(1.0, 4.0)] {
        let rep = build_rep(cfg.n, cfg.e_rank).unwrap();
        let modes: Vec<Vec<i64>> = if cfg.n == 2 { vec![vec![8], vec![-11], vec![20]] } else { vec![vec![8, 0], vec![-6, 7], vec![3, -12]] };
        let table = compute_table(&cfg, &rep, &modes, true).unwrap();
        for e in table.entries.values() {
            let r = lambda_theta_mode_residual(&cfg, &rep, &e.xi, &e.theta, e.lambda.as_ref().unwrap()).unwrap();
            assert!(r < 1e-8, "n={} ξ={:?}: {r:.3e}", cfg.n, e.xi);
        }
        assert!(table.max_residual() <= cfg.solver.tol, "residual {:.3e}", table.max_residual());
    }
}

#[test]
fn flat_massless_lambda_is_minus_norm() {
    let rep = build_rep(3, 1).unwrap();
    let cfg = CylinderConfig::flat(3, 1, 0.0, 4.0);
    let xi = cfg.covector(&[6, -8]);
    let l = lambda_multiplier(&cfg, &rep, &xi).unwrap();
    assert!(max_abs_diff(&l.matrix, &(eye(rep.size()) * c(-10.0))) < 1e-10);
}

#[test]
fn massless_conformal_pair_has_equal_theta() {
    let cfg = warped_n3(0.0, 1, 2.0, 9);
    let scaled = cfg.scaled(1.7);
    let rep = build_rep(3, 1).unwrap();
    for k in [[1i64, 0], [2, -1], [0, 3], [5, 4]] {
        let xi = cfg.covector(&k);
        let a = theta_multiplier(&cfg, &rep, &xi).unwrap().matrix;
        let b = theta_multiplier(&scaled, &rep, &xi).unwrap().matrix;
        assert!(max_abs_diff(&a, &b) < 1e-8, "ξ={xi:?}: {:.3e}", max_abs_diff(&a, &b));
    }
}

#[test]
fn gauge_conjugation_of_multipliers() {
    let cfg = warped_n3(1.0, 2, 3.0, 21);
    let rep = build_rep(3, 2).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let u = random_unitary(2, &mut rng);
    let big = kron(&eye(rep.rank), &u);
    let other = cfg.gauge_conjugate(&u);
    for k in [[1i64, 2], [-3, 0], [7, 7]] {
        let xi = cfg.covector(&k);
        let a = theta_multiplier(&cfg, &rep, &xi).unwrap().matrix;
        let b = theta_multiplier(&other, &rep, &xi).unwrap().matrix;
        assert!(max_abs_diff(&(&big * a * big.adjoint()), &b) < 1e-8);
        let la = lambda_multiplier(&cfg, &rep, &xi).unwrap().matrix;
        let lb = lambda_multiplier(&other, &rep, &xi).unwrap().matrix;
        assert!(max_abs_diff(&(&big * la * big.adjoint()), &lb) < 1e-8);
    }
}

#[test]
fn resolution_and_collar_doubling() {
    let rep = build_rep(3, 1).unwrap();
    let cfg = warped_n3(1.0, 1, 4.0, 6);
    let mut fine = cfg.clone();
    fine.solver.max_step /= 2.0;
    let mut long = warped_n3(1.0, 1, 8.0, 6);
    long.solver = cfg.solver.clone();
    for k in [[8i64, 0], [5, 9], [0, 20]] {
        let xi = cfg.covector(&k);
        let a = theta_multiplier(&cfg, &rep, &xi).unwrap();
        assert!(a.residual <= cfg.solver.tol);
        let b = theta_multiplier(&fine, &rep, &xi).unwrap().matrix;
        assert!(max_abs_diff(&a.matrix, &b) <= cfg.solver.tol);
        // |ξ|L ≥ 30: the far end is invisible
        let c2 = theta_multiplier(&long, &rep, &xi).unwrap().matrix;
        assert!(max_abs_diff(&a.matrix, &c2) <= 1e-10);
    }
}

#[test]
fn near_spectrum_is_detected() {
    let rep = build_rep(2, 1).unwrap();
    // ξ = 0, flat: Θ̂ is singular when cos(mL) = 0
    let cfg = CylinderConfig::flat(2, 1, std::f64::consts::FRAC_PI_2, 1.0);
    match theta_multiplier(&cfg, &rep, &[0.0]) {
        Err(e @ Error::NearSpectrum(_)) => assert_eq!(e.code(), "E_NEAR_SPECTRUM"),
        other => panic!("expected NearSpectrum, got {other:?}"),
    }
    // Dirichlet problem −ψ″ = m²ψ is singular when sin(mL) = 0; conditioning grows on approach
    let mut conds = vec![];
    for eps in [1e-1, 1e-3, 1e-5] {
        let cfg = CylinderConfig::flat(2, 1, std::f64::consts::PI * (1.0 - eps), 1.0);
        conds.push(lambda_multiplier(&cfg, &rep, &[0.0]).unwrap().conditioning);
    }
    assert!(conds[0] < conds[1] && conds[1] < conds[2]);
    let cfg = CylinderConfig::flat(2, 1, std::f64::consts::PI, 1.0);
    assert!(matches!(lambda_multiplier(&cfg, &rep, &[0.0]), Err(Error::NearDirichletSpectrum(_))));
}

#[test]
fn fit_flat_expansions() {
    let rep = build_rep(2, 1).unwrap();
    let modes = ray_modes(&[1], 8..=128);
    let cfg0 = CylinderConfig::flat(2, 1, 0.0, 4.0);
    let fit0 = fit_expansion(&compute_table(&cfg0, &rep, &modes, false).unwrap(), &[1.0], 4).unwrap();
    let src0 = theta0(&cfg0, &rep, 1);
    assert!(max_abs_diff(&fit0.coefs[0], &src0.eval_x0(0, &[1.0]).unwrap()) < 1e-10);
    assert!(max_abs(&fit0.coefs[1]) < 1e-8);
    let cfg1 = CylinderConfig::flat(2, 1, 1.0, 4.0);
    let fit1 = fit_expansion(&compute_table(&cfg1, &rep, &modes, false).unwrap(), &[1.0], 6).unwrap();
    let src1 = theta0(&cfg1, &rep, 1);
    assert!(max_abs_diff(&fit1.coefs[1], &src1.eval_x0(-1, &[1.0]).unwrap()) < 1e-6);
    // too few modes, or less than a decade
    let short = compute_table(&cfg1, &rep, &ray_modes(&[1], 8..=12), false).unwrap();
    assert!(matches!(fit_expansion(&short, &[1.0], 3), Err(Error::IllConditionedFit(_))));
}

#[test]
fn fit_warped_n3_matches_symbol_engine() {
    let cfg = warped_n3(1.0, 1, 4.0, 8);
    let rep = build_rep(3, 1).unwrap();
    let ray = [1i64, 1];
    let modes: Vec<Vec<i64>> = (6..=90).step_by(3).map(|t| vec![t, t]).collect();
    let table = compute_table(&cfg, &rep, &modes, false).unwrap();
    let fit = fit_expansion(&table, &[1.0, 1.0], 6).unwrap();
    let src = theta0(&cfg, &rep, 1);
    let dir = [ray[0] as f64 / 2f64.sqrt(), ray[1] as f64 / 2f64.sqrt()];
    let t1 = src.eval_x0(-1, &dir).unwrap();
    let rel = max_abs_diff(&fit.coefs[1], &t1) / max_abs(&t1);
    assert!(rel < 1e-5, "θ₋₁ relative error {rel:.3e}");
}

#[test]
fn n2_numeric_recovery_pipeline() {
    let cfg = warped_n2(1.0, 4.0);
    let rep = build_rep(2, 1).unwrap();
    let mut modes = ray_modes(&[1], 8..=128);
    modes.extend(ray_modes(&[-1], 8..=128));
    let table = compute_table(&cfg, &rep, &modes, false).unwrap();
    let fits = vec![fit_expansion(&table, &[1.0], 8).unwrap(), fit_expansion(&table, &[-1.0], 8).unwrap()];
    let src = FittedSource { n: 2, size: 2, fits };
    let prior = diracbc::geometry::BoundaryJet::flat(2, 1, 3, 1.0);
    let rec = recover_n2(&src, &prior, &rep, 1.0, 3).unwrap();
    let truth = NormalData::from_jet(&cfg.to_boundary_jet(3).unwrap()).unwrap();
    assert!((rec.g[0][(0, 0)] - 1.0).abs() < 1e-3);
    assert!((rec.h[0] - truth.h[0]).abs() < 1e-3, "H {} vs {}", rec.h[0], truth.h[0]);
    assert!((rec.h[1] - truth.h[1]).abs() < 1e-3, "∂H {} vs {}", rec.h[1], truth.h[1]);
}

#[test]
fn shifted_fit_reexpands_exactly() {
    // 1/(t + s₀) = Σ_k (−s₀)^{k−1} t^{−k}; shifting by −s₀ leaves 1/t.
    let s0: f64 = 0.7;
    let coefs = (0..9).map(|k| CMat::from_element(1, 1, c(if k == 0 { 0.0 } else { (-s0).powi(k - 1) }))).collect();
    let fit = ExpansionFit { direction: vec![1.0], coefs, residual: 0.0, conditioning: 1.0 };
    let back = fit.shifted(-s0);
    for (k, ck) in back.coefs.iter().enumerate() {
        let want = if k == 1 { 1.0 } else { 0.0 };
        assert!((ck[(0, 0)] - c(want)).norm() < 1e-14, "coefficient {k}: {}", ck[(0, 0)]);
    }
}

#[test]
fn n2_numeric_recovery_with_constant_connection() {
    let mut cfg = warped_n2(1.0, 4.0);
    cfg.connection = vec![vec![CMat::from_element(1, 1, I * 0.3)]];
    let rep = build_rep(2, 1).unwrap();
    let mut modes = ray_modes(&[1], 8..=128);
    modes.extend(ray_modes(&[-1], 8..=128));
    let table = compute_table(&cfg, &rep, &modes, false).unwrap();
    let fits = vec![fit_expansion(&table, &[1.0], 8).unwrap(), fit_expansion(&table, &[-1.0], 8).unwrap()];
    let raw = FittedSource { n: 2, size: 2, fits };
    let src = raw.to_parallel_frame(&cfg).unwrap();
    let jet = cfg.to_boundary_jet(3).unwrap();
    let parallel = SeriesSource::forward(&jet, &rep, 3, true).unwrap();
    for dir in [[1.0], [-1.0]] {
        for degree in [-1, -2] {
            let want = parallel.eval_x0(degree, &dir).unwrap();
            let err = max_abs_diff(&src.eval_x0(degree, &dir).unwrap(), &want);
            assert!(err < 1e-5, "θ_{degree} at {dir:?}: {err:.3e}");
        }
    }
    let truth = NormalData::from_jet(&jet).unwrap();
    let prior = diracbc::recovery::scrub_normal_line(&jet);
    let rec = recover_n2(&src, &prior, &rep, 1.0, 3).unwrap();
    assert!((rec.h[0] - truth.h[0]).abs() < 1e-3, "H {} vs {}", rec.h[0], truth.h[0]);
    assert!((rec.h[1] - truth.h[1]).abs() < 1e-3, "∂H {} vs {}", rec.h[1], truth.h[1]);
    // the default-frame fits mix A(x₀) into θ₋₂ and spoil ∂H
    let wrong = recover_n2(&raw, &prior, &rep, 1.0, 3).unwrap();
    assert!((wrong.h[1] - truth.h[1]).abs() > 0.1);
}

#[test]
fn parallel_frame_needs_connection_along_rays() {
    let mut cfg = CylinderConfig::flat(3, 1, 1.0, 4.0);
    cfg.connection = vec![vec![CMat::from_element(1, 1, I * 0.3)], vec![CMat::from_element(1, 1, I * 0.1)]];
    let fit = ExpansionFit { direction: vec![1.0, 0.0], coefs: vec![CMat::zeros(2, 2); 3], residual: 0.0, conditioning: 1.0 };
    let src = FittedSource { n: 3, size: 2, fits: vec![fit] };
    assert!(matches!(src.to_parallel_frame(&cfg), Err(Error::Unsupported(_))));
}

fn poly_section(size: usize, seed: u64) -> impl Fn(f64) -> DVector<C64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let coefs: Vec<DVector<C64>> = (0..4).map(|_| random_anti_hermitian(size, &mut rng).column(0).into_owned()).collect();
    move |x: f64| coefs.iter().enumerate().fold(DVector::zeros(size), |acc, (k, ck)| acc + ck * c(x.powi(k as i32)))
}

#[test]
fn lichnerowicz_weitzenbock_residual() {
    let rep = build_rep(3, 2).unwrap();
    let flat = CylinderConfig::flat(3, 2, 1.0, 2.0);
    let psi = poly_section(rep.size(), 1);
    assert!(lw_residual(&flat, &rep, &[1.0, 2.0], &psi, 1e-3).unwrap() < 1e-10);
    let mut const_a = flat.clone();
    const_a.connection = vec![vec![CMat::identity(2, 2) * (I * 0.3)], vec![CMat::identity(2, 2) * (I * -0.2)]];
    assert!(lw_residual(&const_a, &rep, &[1.0, -1.0], &psi, 1e-3).unwrap() < 1e-10);
    for seed in [1, 2] {
        let cfg = warped_n3(1.0, 2, 2.0, seed);
        let r = lw_residual(&cfg, &rep, &[2.0, -1.0], &poly_section(rep.size(), seed + 10), 1e-3).unwrap();
        assert!(r < 1e-6, "warped residual {r:.3e}");
    }
}

#[test]
fn table_csv_round_trip() {
    let cfg = warped_n2(1.0, 4.0);
    let rep = build_rep(2, 1).unwrap();
    let table = compute_table(&cfg, &rep, &[vec![3], vec![-5]], true).unwrap();
    let text = table.to_csv();
    assert!(text.starts_with("xi_1,theta_0_0_re,theta_0_0_im"));
    let back = MultiplierTable::from_csv(&text, 2, 2, &cfg.periods).unwrap();
    for (k, e) in &table.entries {
        let b = &back.entries[k];
        assert_eq!(max_abs_diff(&e.theta, &b.theta), 0.0);
        assert_eq!(max_abs_diff(e.lambda.as_ref().unwrap(), b.lambda.as_ref().unwrap()), 0.0);
    }
    assert_eq!(back.to_csv(), text);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = CylinderConfig::flat(2, 1, 1.0, 4.0);
    cfg.metric = vec![sym(1, &[1.0]), sym(1, &[-0.5])];
    assert_eq!(cfg.validate(), Err(Error::NotPositiveDefinite));
    let mut cfg = CylinderConfig::flat(3, 1, 1.0, 4.0);
    cfg.connection[0] = vec![CMat::from_element(1, 1, c(1.0))];
    assert!(matches!(cfg.validate(), Err(Error::InvalidInput(_))));
    let mut cfg = CylinderConfig::flat(2, 1, 1.0, 4.0);
    cfg.metric = vec![sym(1, &[1.0]); 10];
    assert!(matches!(cfg.validate(), Err(Error::InvalidInput(_))));
}
