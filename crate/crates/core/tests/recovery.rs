use diracbc::clifford::{build_rep, chiral_projectors, chiral_trace};
use diracbc::geometry::BoundaryJet;
use diracbc::jet::MJet;
use diracbc::linalg::{c, eye, kron, max_abs_diff, random_unitary};
use diracbc::recovery::*;
use diracbc::{CMat, Error, RMat};
use proptest::prelude::*;
use rand::SeedableRng;

fn rmax(m: &RMat) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

fn rep_for(jet: &BoundaryJet) -> diracbc::clifford::GammaRep {
    build_rep(jet.n, jet.e_rank).unwrap()
}

/// Jet with the normal line set by hand: g = I + x_n·dg1, everything else flat.
fn normal_line_jet(n: usize, order: usize, m: f64, dg1: RMat) -> BoundaryJet {
    let mut g = MJet::constant(n, order as i32, eye(n - 1));
    let mut e = vec![0u8; n];
    e[n - 1] = 1;
    *g.coef_mut(&e).unwrap() = dg1.map(c);
    let a = vec![MJet::zero(n, order as i32, &CMat::zeros(1, 1)); n - 1];
    BoundaryJet::new(n, 1, m, g, a).unwrap()
}

#[test]
fn round_trip_random_jets() {
    for (n, ne, seed) in [(3, 1, 11u64), (3, 2, 12), (4, 1, 13), (4, 2, 14)] {
        let jet = BoundaryJet::random(n, ne, 3, 1.0, seed, 0.2);
        let rep = rep_for(&jet);
        let rec = recover_from_jet(&jet, &rep, 3, &RecoveryOptions::default()).unwrap();
        let err = rec.max_relative_error(&NormalData::from_jet(&jet).unwrap());
        assert!(err < 1e-8, "n={n} ne={ne}: relative error {err:.3e}");
        assert_eq!(rec.g.len(), 3);
        assert_eq!(rec.h.len(), 2);
        assert_eq!(rec.sigma.len(), 3);
        assert_eq!(rec.a.len(), 3);
        assert!(rec.g_flags.iter().chain(&rec.h_flags).all(|f| *f == Determination::Determined));
    }
}

#[test]
fn order0_round_trip_n3() {
    let jet = BoundaryJet::random(3, 1, 2, 1.0, 5, 0.3);
    let rep = rep_for(&jet);
    let truth = NormalData::from_jet(&jet).unwrap();
    let src = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
    let o0 = recover_order0(&src, None, &rep, 1.0, 16).unwrap();
    assert!(!o0.ambiguous);
    assert!(rmax(&(&o0.g0 - &truth.g[0])) < 1e-9 * rmax(&truth.g[0]));
    for al in 0..2 {
        assert!(max_abs_diff(&o0.a0[al], &truth.a[0][al]) < 1e-9);
        assert!(rmax(&(&o0.dg_tangential[al] - &truth.dg_tangential[al])) < 1e-9);
    }
    assert!(o0.hermitian_defect < 1e-10);
}

#[test]
fn flat_recovers_zero() {
    for n in [3, 4] {
        let jet = BoundaryJet::flat(n, 2, 3, 1.0);
        let rep = rep_for(&jet);
        let src = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
        let o0 = recover_order0(&src, None, &rep, 1.0, 16).unwrap();
        assert!((o0.e_u.unwrap() - 1.0).abs() < 1e-12);
        assert!(o0.du.iter().all(|x| x.abs() < 1e-12));
        assert!(o0.a0.iter().all(|a| a.norm() < 1e-12));
        let rec = recover_from_jet(&jet, &rep, 3, &RecoveryOptions::default()).unwrap();
        assert!(rmax(&(&rec.g[0] - &RMat::identity(n - 1, n - 1))) < 1e-12);
        for j in 1..rec.g.len() {
            assert!(rmax(&rec.g[j]) < 1e-12);
        }
        assert!(rec.h.iter().all(|h| h.abs() < 1e-12));
        assert!(rec.sigma.iter().all(|s| rmax(s) < 1e-12));
        assert!(rec.a.iter().flatten().all(|a| a.norm() < 1e-12));
    }
}

#[test]
fn conformal_factor_scales_linearly() {
    let jet = BoundaryJet::random(3, 1, 2, 1.0, 21, 0.2);
    let rep = rep_for(&jet);
    let scale = 1.7_f64;
    let mut scaled = jet.clone();
    scaled.g = jet.g.scale(c(scale * scale));
    let u1 = recover_order0(&SeriesSource::forward(&jet, &rep, 1, false).unwrap(), None, &rep, 1.0, 16).unwrap();
    let u2 = recover_order0(&SeriesSource::forward(&scaled, &rep, 1, false).unwrap(), None, &rep, 1.0, 16).unwrap();
    let ratio = u2.e_u.unwrap() / u1.e_u.unwrap();
    assert!((ratio - scale).abs() < 1e-10, "ratio {ratio}");
    assert!(u1.class.distance(&u2.class) < 1e-10);
}

#[test]
fn frame_vectors_are_unit_and_angles_match() {
    let jet = BoundaryJet::random(4, 1, 2, 1.0, 8, 0.2);
    let rep = rep_for(&jet);
    let src = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
    let ginv = jet.g.value().unwrap().map(|z| z.re).try_inverse().unwrap();
    for xi in unit_covectors(&ginv, 6) {
        let v = frame_vector(&src, &rep, &xi).unwrap();
        let norm: f64 = v.iter().map(|s| s.c[0].re.powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");
    }
    let cls = conformal_class(&src, &rep).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            let want = ginv[(a, b)] / (ginv[(a, a)] * ginv[(b, b)]).sqrt();
            assert!((cls.cosines[(a, b)] - want).abs() < 1e-12);
        }
    }
    let gbar_inv = cls.gbar_x0().try_inverse().unwrap();
    assert!((gbar_inv[(0, 0)] - 1.0).abs() < 1e-12);
    assert!(rmax(&(&gbar_inv - &ginv * (1.0 / ginv[(0, 0)]))) < 1e-12);
}

#[test]
fn gauge_naturality() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for n in [3, 4] {
        let jet = BoundaryJet::random(n, 2, 3, 1.0, 31 + n as u64, 0.2);
        let rep = rep_for(&jet);
        let u = random_unitary(2, &mut rng);
        let big = kron(&eye(rep.rank), &u);
        let default = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
        let parallel = SeriesSource::forward(&jet, &rep, 3, true).unwrap();
        let opts = RecoveryOptions::default();
        let base = recover(&default, &parallel, &scrub_normal_line(&jet), &rep, 1.0, 3, &opts).unwrap();
        let conj = recover(
            &default.conjugated(&big, &big.adjoint()),
            &parallel.conjugated(&big, &big.adjoint()),
            &scrub_normal_line(&jet.gauge_conjugate(&u)),
            &rep,
            1.0,
            3,
            &opts,
        )
        .unwrap();
        let expect = base.gauge_conjugate(&u);
        for (x, y) in conj.a.iter().flatten().zip(expect.a.iter().flatten()) {
            assert!(max_abs_diff(x, y) < 1e-10);
        }
        for (x, y) in conj.g.iter().zip(&base.g) {
            assert!(rmax(&(x - y)) < 1e-10);
        }
    }
}

#[test]
fn massless_conformal_pairs_share_class_and_flag_ambiguity() {
    for n in [3, 4] {
        let jet = BoundaryJet::random(n, 1, 2, 0.0, 41 + n as u64, 0.2);
        let mut scaled = jet.clone();
        scaled.g = jet.g.scale(c(2.25));
        let rep = rep_for(&jet);
        let s1 = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
        let s2 = SeriesSource::forward(&scaled, &rep, 1, false).unwrap();
        let o1 = recover_order0(&s1, None, &rep, 0.0, 16).unwrap();
        let o2 = recover_order0(&s2, None, &rep, 0.0, 16).unwrap();
        assert!(o1.ambiguous && o2.ambiguous);
        assert!(o1.e_u.is_none());
        assert!(o1.class.distance(&o2.class) < 1e-10);
        assert!(rmax(&(&o1.class.cosines - &o2.class.cosines)) < 1e-12);
        // the gradient of u and the connection are still visible
        for al in 0..n - 1 {
            assert!((o1.du[al] - o2.du[al]).abs() < 1e-10);
            assert!(max_abs_diff(&o1.a0[al], &jet.a[al].c[0]) < 1e-10);
        }
        let rec = recover_from_jet(&jet, &rep, 2, &RecoveryOptions::default()).unwrap();
        assert_eq!(rec.g_flags[0], Determination::UpToConformalFactor);
        assert!(rec.conformal_note.is_some());
        assert!(rec.h.is_empty());
    }
}

#[test]
fn massless_with_prescribed_metric_and_mean_curvature() {
    let jet = BoundaryJet::random(3, 2, 3, 0.0, 51, 0.2);
    let rep = rep_for(&jet);
    let truth = NormalData::from_jet(&jet).unwrap();
    let opts = RecoveryOptions { samples: 16, prescribed_metric: Some(jet.g.restrict_zero(2).truncate(1)), prescribed_h: Some(truth.h.clone()) };
    let rec = recover_from_jet(&jet, &rep, 3, &opts).unwrap();
    assert!(rec.max_relative_error(&truth) < 1e-8);
    assert_eq!(rec.h_flags[0], Determination::Prescribed);
}

#[test]
fn massless_step_without_mean_curvature_is_ambiguous() {
    let jet = BoundaryJet::random(3, 1, 2, 0.0, 52, 0.2);
    let rep = rep_for(&jet);
    let truth = NormalData::from_jet(&jet).unwrap();
    let parallel = SeriesSource::forward(&jet, &rep, 2, true).unwrap();
    let mut known = recover_from_jet(&jet, &rep, 1, &RecoveryOptions::default()).unwrap();
    known.g = vec![truth.g[0].clone()];
    let err = recover_next(0, &parallel, &known, &scrub_normal_line(&jet), &rep, None, 16).unwrap_err();
    assert!(matches!(err, Error::ConformalGaugeAmbiguity(_)));
}

#[test]
fn pure_trace_normal_derivative_gives_zero_sigma() {
    for n in [3, 4] {
        let jet = normal_line_jet(n, 2, 1.0, RMat::identity(n - 1, n - 1) * 0.3);
        let rep = rep_for(&jet);
        let rec = recover_from_jet(&jet, &rep, 2, &RecoveryOptions::default()).unwrap();
        assert!(rmax(&rec.sigma[0]) < 1e-12);
        assert!((rec.h[0] + 0.15).abs() < 1e-12, "H = {}", rec.h[0]);
    }
}

#[test]
fn sigma_matches_extrinsic_data() {
    let jet = BoundaryJet::random(3, 1, 2, 1.0, 61, 0.3);
    let rep = rep_for(&jet);
    let truth = NormalData::from_jet(&jet).unwrap();
    let src = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
    let (s, res) = recover_sff(&src, &truth.g[0], &truth.dg_tangential, &truth.a[0], &rep, 1.0, 16).unwrap();
    assert!(rmax(&(&s - &truth.sigma[0])) < 1e-9);
    assert!(res < 1e-10);
}

#[test]
fn invariants_hold_at_every_order() {
    for (n, seed) in [(3, 71u64), (4, 72)] {
        let jet = BoundaryJet::random(n, 1, 3, 1.0, seed, 0.25);
        let rec = recover_from_jet(&jet, &rep_for(&jet), 3, &RecoveryOptions::default()).unwrap();
        assert!(rec.sigma_trace_defect() < 1e-10);
        assert!(rec.consistency_defect() < 1e-10);
        if n == 3 {
            assert!(rec.dg_direct.iter().skip(1).all(|d| d.is_some()));
        }
    }
}

#[test]
fn upsilon_term_in_four_dimensions() {
    let jet = BoundaryJet::random(4, 2, 3, 1.0, 81, 0.3);
    let rep = rep_for(&jet);
    let rec = recover_from_jet(&jet, &rep, 3, &RecoveryOptions::default()).unwrap();
    assert!(rec.max_relative_error(&NormalData::from_jet(&jet).unwrap()) < 1e-8);
    assert_eq!(rec.upsilon.len(), 2);
    let tc = chiral_trace(&rep, &[1, 2, 3]).unwrap() * c(2.0);
    for u in &rec.upsilon {
        assert_eq!(u.trace_constant, [tc.re, tc.im]);
        assert!(u.candidate_shift.abs() < 1e-12);
    }
    assert!(tc.norm() > 0.5);
    // the default frame carries a normal jet of Υ that the parallel frame removes at first order
    assert!(rec.upsilon[0].default_frame.abs() > 1e-4);
    assert!(rec.upsilon[0].parallel_frame.abs() < 1e-12);
    assert!(upsilon_normal_derivative(&jet, &rep, false, 1).unwrap().abs() > 1e-4);
}

#[test]
fn prior_normal_line_is_ignored() {
    let jet = BoundaryJet::random(3, 2, 3, 1.0, 91, 0.2);
    let rep = rep_for(&jet);
    let default = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
    let parallel = SeriesSource::forward(&jet, &rep, 3, true).unwrap();
    let opts = RecoveryOptions::default();
    let a = recover(&default, &parallel, &jet, &rep, 1.0, 3, &opts).unwrap();
    let b = recover(&default, &parallel, &scrub_normal_line(&jet), &rep, 1.0, 3, &opts).unwrap();
    for (x, y) in a.g.iter().zip(&b.g) {
        assert_eq!(rmax(&(x - y)), 0.0);
    }
    for (x, y) in a.a.iter().flatten().zip(b.a.iter().flatten()) {
        assert_eq!(max_abs_diff(x, y), 0.0);
    }
}

#[test]
fn normal_data_reads_jet_coefficients() {
    let jet = normal_line_jet(3, 2, 1.0, RMat::from_row_slice(2, 2, &[0.2, 0.1, 0.1, -0.4]));
    let nd = NormalData::from_jet(&jet).unwrap();
    // II = −½∂ₙg, H = tr II / 2, Σ = II − H g
    assert!((nd.h[0] - 0.05).abs() < 1e-14);
    let want = RMat::from_row_slice(2, 2, &[-0.15, -0.05, -0.05, 0.15]);
    assert!(rmax(&(&nd.sigma[0] - want)) < 1e-14);
    assert_eq!(nd.g.len(), 3);
}

#[test]
fn n2_flat_and_warped() {
    let rep = build_rep(2, 1).unwrap();
    let flat = BoundaryJet::flat(2, 1, 3, 1.0);
    let src = SeriesSource::forward(&flat, &rep, 3, true).unwrap();
    let pr = chiral_projectors(&rep).unwrap();
    let v = pr.v_plus_basis.column(0).into_owned();
    let (e1, _) = parity_parts(&src, -1, &[2.0]).unwrap();
    let val = (v.adjoint() * rep.tgamma(2) * e1 * &v)[(0, 0)].re;
    assert!((val + 0.5).abs() < 1e-12, "Re = {val}");
    let rec = recover_n2(&src, &scrub_normal_line(&flat), &rep, 1.0, 3).unwrap();
    assert!((rec.g[0][(0, 0)] - 1.0).abs() < 1e-12);
    assert!(rec.h.iter().all(|h| h.abs() < 1e-12));

    for seed in [1u64, 2, 3] {
        let jet = BoundaryJet::random(2, 1, 3, 1.0, seed, 0.3);
        let truth = NormalData::from_jet(&jet).unwrap();
        let rec = recover_from_jet(&jet, &rep, 3, &RecoveryOptions::default()).unwrap();
        assert_eq!(rec.h.len(), 2);
        for j in 0..2 {
            assert!((rec.h[j] - truth.h[j]).abs() < 1e-9, "seed {seed} H{j}: {} vs {}", rec.h[j], truth.h[j]);
        }
        for j in 0..3 {
            assert!(rmax(&(&rec.g[j] - &truth.g[j])) < 1e-9);
        }
    }
}

#[test]
fn error_paths() {
    let rep2 = build_rep(2, 1).unwrap();
    let j2 = BoundaryJet::flat(2, 1, 2, 1.0);
    let s2 = SeriesSource::forward(&j2, &rep2, 2, false).unwrap();
    assert!(matches!(recover_order0(&s2, None, &rep2, 1.0, 16), Err(Error::Unsupported(_))));
    assert!(matches!(recover_n2(&s2, &j2, &rep2, 0.0, 2), Err(Error::Unsupported(_))));
    let rep22 = build_rep(2, 2).unwrap();
    let j22 = BoundaryJet::flat(2, 2, 2, 1.0);
    let s22 = SeriesSource::forward(&j22, &rep22, 2, false).unwrap();
    assert!(matches!(recover_n2(&s22, &j22, &rep22, 1.0, 2), Err(Error::Unsupported(_))));
    let rep3 = build_rep(3, 1).unwrap();
    let j3 = BoundaryJet::flat(3, 1, 2, 1.0);
    let s3 = SeriesSource::forward(&j3, &rep3, 0, false).unwrap();
    assert!(matches!(recover_order0(&s3, None, &rep3, 1.0, 16), Err(Error::InsufficientOrder { .. })));
    assert!(matches!(recover_sff(&s3, &RMat::identity(2, 2), &[], &[], &rep3, 1.0, 16), Err(Error::InsufficientOrder { .. })));
}

#[test]
fn recovered_file_round_trips_through_json() {
    let jet = BoundaryJet::random(3, 1, 2, 1.0, 3, 0.2);
    let rec = recover_from_jet(&jet, &rep_for(&jet), 2, &RecoveryOptions::default()).unwrap();
    let text = serde_json::to_string(&rec.to_file()).unwrap();
    let back: RecoveredFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back.g.len(), 2);
    assert_eq!(back.h, rec.h);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn round_trip_identity(seed in 0u64..10_000, scale in 0.05f64..0.3, ne in 1usize..3) {
        let jet = BoundaryJet::random(3, ne, 3, 1.0, seed, scale);
        let rec = recover_from_jet(&jet, &rep_for(&jet), 3, &RecoveryOptions::default()).unwrap();
        let err = rec.max_relative_error(&NormalData::from_jet(&jet).unwrap());
        prop_assert!(err < 1e-8, "relative error {:.3e}", err);
        prop_assert!(rec.sigma_trace_defect() < 1e-10);
        prop_assert!(rec.consistency_defect() < 1e-9);
    }
}

#[test]
fn series_file_round_trip_preserves_recovery() {
    let jet = BoundaryJet::random(3, 2, 3, 1.0, 21, 0.3);
    let rep = build_rep(3, 2).unwrap();
    let default = SeriesSource::forward(&jet, &rep, 1, false).unwrap();
    let parallel = SeriesSource::forward(&jet, &rep, 3, true).unwrap();
    let reload = |s: &SeriesSource| {
        let text = serde_json::to_string(&s.to_file()).unwrap();
        SeriesSource::from_file(&serde_json::from_str(&text).unwrap()).unwrap()
    };
    let (d2, p2) = (reload(&default), reload(&parallel));
    for deg in [0, -1, -2, -3] {
        for xi in [[1.0, 0.3], [-0.4, 2.0]] {
            let a = parallel.eval_jet(deg, &xi).unwrap();
            let b = p2.eval_jet(deg, &xi).unwrap();
            assert_eq!(a.c.len(), b.c.len());
            assert!(a.c.iter().zip(&b.c).all(|(x, y)| max_abs_diff(x, y) == 0.0));
        }
    }
    let prior = scrub_normal_line(&jet);
    let opts = RecoveryOptions::default();
    let rec = recover(&d2, &p2, &prior, &rep, 1.0, 3, &opts).unwrap();
    let truth = NormalData::from_jet(&jet).unwrap();
    assert!(rec.max_relative_error(&truth) < 1e-8);
}
