use diracbc::clifford::build_rep;
use diracbc::cylinder_solver::CylinderConfig;
use diracbc::greens::*;
use diracbc::linalg::{c, max_abs, max_abs_diff, random_anti_hermitian, random_unitary};
use diracbc::{CMat, Error, RMat, C64};
use rand::SeedableRng;

fn warped_n2(m: f64, e_rank: usize, length: f64, seed: u64) -> CylinderConfig {
    let mut cfg = CylinderConfig::flat(2, e_rank, m, length);
    cfg.metric = vec![RMat::from_element(1, 1, 1.0), RMat::from_element(1, 1, 0.4), RMat::from_element(1, 1, 0.2)];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    cfg.connection = vec![(0..2).map(|k| random_anti_hermitian(e_rank, &mut rng) * c(0.3 / (k + 1) as f64)).collect()];
    cfg
}

fn su2(seed: u64) -> CMat {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let u = random_unitary(2, &mut rng);
    let det = u.determinant();
    u * det.sqrt().inv()
}

#[test]
fn defining_property_holds() {
    for (m, e_rank, mode) in [(0.5, 1, 3i64), (0.0, 2, -2), (1.3, 1, 0)] {
        let mut cfg = warped_n2(m, e_rank, 1.5, 7);
        cfg.solver.cutoff = 12.0;
        let rep = build_rep(2, e_rank).unwrap();
        let res = defining_property_residual(&cfg, &rep, &[0.7, 0.6], &[mode], 40).unwrap();
        assert!(res <= 1e-4, "m={m} mode={mode}: {res:.3e}");
    }
}

#[test]
fn kernel_is_symmetric() {
    let mut cfg = warped_n2(0.7, 2, 1.5, 3);
    cfg.solver.cutoff = 48.0;
    let rep = build_rep(2, 2).unwrap();
    let pairs = vec![
        (vec![0.3, 0.2], vec![1.1, 0.9]),
        (vec![5.0, 1.4], vec![0.4, 0.5]),
        (vec![2.0, 0.05], vec![2.5, 1.2]),
    ];
    let defect = symmetry_defect(&cfg, &rep, &pairs).unwrap();
    assert!(defect <= 1e-6, "{defect:.3e}");
}

#[test]
fn flat_radial_exponent() {
    let mut cfg = CylinderConfig::flat(2, 1, 0.0, 2.0);
    cfg.solver.cutoff = 700.0;
    let rep = build_rep(2, 1).unwrap();
    let radii: Vec<f64> = (0..7).map(|i| 0.02 * 2f64.powf(i as f64 / 2.0)).collect();
    let p = radial_exponent(&cfg, &rep, &[1.0, 1.0], &radii).unwrap();
    assert!((p + 1.0).abs() <= 0.05, "exponent {p}");
}

#[test]
fn chiral_condition_at_both_ends() {
    let mut cfg = warped_n2(0.4, 2, 1.2, 11);
    cfg.solver.cutoff = 24.0;
    let rep = build_rep(2, 2).unwrap();
    let defect = boundary_defect(&cfg, &rep, &[0.5, 0.6], &[vec![0.0], vec![1.3], vec![4.0]]).unwrap();
    assert!(defect <= 1e-10, "{defect:.3e}");
}

#[test]
fn gauge_conjugate_kernels_agree() {
    let targets = vec![vec![0.2, 0.1], vec![1.5, 0.9], vec![4.0, 1.4]];
    let y = [0.8, 0.6];
    // U = I
    let mut cfg = warped_n2(0.3, 2, 1.5, 5);
    cfg.solver.cutoff = 24.0;
    let rep2 = build_rep(2, 2).unwrap();
    let id = CMat::identity(2, 2);
    assert_eq!(kernel_gauge_check(&cfg, &cfg.gauge_conjugate(&id), &id, &rep2, &y, &targets).unwrap(), 0.0);
    // U(1) phase
    let mut cfg1 = warped_n2(0.3, 1, 1.5, 6);
    cfg1.solver.cutoff = 24.0;
    let rep1 = build_rep(2, 1).unwrap();
    let phase = CMat::from_element(1, 1, C64::from_polar(1.0, 0.83));
    let d1 = kernel_gauge_check(&cfg1, &cfg1.gauge_conjugate(&phase), &phase, &rep1, &y, &targets).unwrap();
    assert!(d1 <= 1e-12, "{d1:.3e}");
    // SU(2)
    for seed in [1, 2, 3] {
        let u = su2(seed);
        let d = kernel_gauge_check(&cfg, &cfg.gauge_conjugate(&u), &u, &rep2, &y, &targets).unwrap();
        assert!(d <= 1e-6, "seed {seed}: {d:.3e}");
    }
}

#[test]
fn cutoff_doubling_converges() {
    let rep = build_rep(2, 2).unwrap();
    let mut cfg = warped_n2(0.5, 2, 1.5, 9);
    let y = [1.0, 0.7];
    let targets = vec![vec![1.0, 0.55], vec![2.0, 0.9], vec![0.3, 0.2], vec![1.05, 1.4], vec![1.3, 0.6]];
    cfg.solver.cutoff = 200.0;
    let coarse = chiral_kernel(&cfg, &rep, &y, &targets).unwrap();
    cfg.solver.cutoff = 400.0;
    let fine = chiral_kernel(&cfg, &rep, &y, &targets).unwrap();
    let worst = coarse.values.iter().zip(&fine.values).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst:.3e}");
    assert!(coarse.tail_bound.is_finite() && coarse.tail_bound <= 1e-6, "{:.3e}", coarse.tail_bound);
    assert!(fine.values.iter().all(|v| v.iter().all(|z| z.re.is_finite() && z.im.is_finite())));
    assert!(fine.values.iter().map(max_abs).fold(0.0, f64::max) > 0.0);
}

#[test]
fn invalid_sources_are_rejected() {
    let cfg = CylinderConfig::flat(2, 1, 0.0, 1.0);
    let rep = build_rep(2, 1).unwrap();
    for y in [[0.0, 0.0], [1.0, 1.0]] {
        assert!(matches!(chiral_kernel(&cfg, &rep, &y, &[vec![0.1, 0.5]]), Err(Error::InvalidInput(_))));
    }
    assert!(matches!(chiral_kernel(&cfg, &rep, &[0.1, 0.5], &[vec![0.1, 0.5]]), Err(Error::InvalidInput(_))));
    assert!(matches!(chiral_kernel(&cfg, &rep, &[0.1, 0.5], &[vec![0.1, 1.5]]), Err(Error::InvalidInput(_))));
}

#[test]
fn near_spectrum_is_reported() {
    // ξ = 0 mode of the flat cylinder with m = π/(2L) has a solution in 𝕍⁻ at 0 and 𝕍⁺ at L
    let mut cfg = CylinderConfig::flat(2, 1, std::f64::consts::FRAC_PI_2, 1.0);
    cfg.solver.cutoff = 4.0;
    let rep = build_rep(2, 1).unwrap();
    assert!(matches!(chiral_kernel(&cfg, &rep, &[0.0, 0.5], &[vec![0.0, 0.2]]), Err(Error::NearSpectrum(_))));
}
