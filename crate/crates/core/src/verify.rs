//! Self-contained invariant suites, one per module, reporting measured defects against tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clifford::{build_rep, chiral_projectors, chiral_trace, GammaRep};
use crate::cylinder_solver::{lambda_multiplier, lambda_theta_mode_residual, lw_residual, theta_multiplier, CylinderConfig};
use crate::geometry::{extrinsic_data, frame_jets, mean_curvature_gamma_sum, BoundaryJet};
use crate::greens::{boundary_defect, defining_property_residual, kernel_gauge_check, radial_exponent, symmetry_defect};
use crate::linalg::{c, eye, max_abs, max_abs_diff, random_anti_hermitian, random_unitary, I};
use crate::recovery::{recover_from_jet, NormalData, RecoveryOptions};
use crate::symbol_engine::{forward, lambda_theta_residual};
use crate::{CMat, Error, RMat, Result, C64};

pub const SUITES: [&str; 6] = ["clifford", "geometry", "symbols", "solver", "recovery", "greens"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

/// One line of a verification report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub check: String,
    pub status: Status,
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes when `measured` is finite and at most `tolerance`.
    pub fn at_most(check: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        let status = if measured.is_finite() && measured <= tolerance { Status::Pass } else { Status::Fail };
        Check { check: check.into(), status, measured, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Runs one suite by name ("all" runs every suite in order).
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<Check>> {
    match name {
        "clifford" => clifford_suite(seed),
        "geometry" => geometry_suite(seed),
        "symbols" => symbols_suite(seed),
        "solver" => solver_suite(seed),
        "recovery" => recovery_suite(seed),
        "greens" => greens_suite(seed),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        other => Err(Error::InvalidInput(format!("unknown suite '{other}'; expected one of {}, all", SUITES.join(", ")))),
    }
}

fn gamma_of(rep: &GammaRep, xi: &[f64]) -> CMat {
    xi.iter().enumerate().fold(CMat::zeros(rep.rank, rep.rank), |acc, (a, x)| acc + rep.gamma(a + 1) * c(*x))
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 0.1 {
            return v.iter().map(|x| x / nrm).collect();
        }
    }
}

fn subsets(m: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << m)).map(|mask| (0..m).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect()).collect()
}

/// Trace pattern on 𝕍⁺: γ^{a₁}···γ^{a_k} over distinct tangential indices has vanishing
/// trace unless k = n − 1 is odd, in which case |trace| = dim 𝕍⁺.
pub fn trace_pattern_defect(rep: &GammaRep) -> Result<f64> {
    let n = rep.n;
    let mut worst: f64 = 0.0;
    for s in subsets(n - 1) {
        let t = chiral_trace(rep, &s)?;
        let k = s.len();
        let expect = if k % 2 == 1 && k == n - 1 { (rep.rank / 2) as f64 } else { 0.0 };
        worst = worst.max((t.norm() - expect).abs());
    }
    Ok(worst)
}

/// Defects of the projector identities 𝔹±γ(X) = γ(X)𝔹± (tangential X), 𝔹⁺γⁿ = γⁿ𝔹⁻ on random
/// spinors, and of (−iγⁿγ(ξ̂))² = 1.
pub fn projector_identity_defect(rep: &GammaRep, rng: &mut ChaCha8Rng, samples: usize) -> Result<f64> {
    let pr = chiral_projectors(rep)?;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let xi = random_unit(rng, rep.n - 1);
        let gx = rep.lift(&gamma_of(rep, &xi));
        let psi = CMat::from_fn(rep.size(), 1, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        worst = worst.max(max_abs(&(&pr.b_plus * (&gx * &psi) - &gx * (&pr.b_plus * &psi))));
        worst = worst.max(max_abs(&(&pr.b_minus * (&gx * &psi) - &gx * (&pr.b_minus * &psi))));
        let gn = rep.tgamma(rep.n);
        worst = worst.max(max_abs(&(&pr.b_plus * (&gn * &psi) - &gn * (&pr.b_minus * &psi))));
        let th = &gn * &gx * (-I);
        worst = worst.max(max_abs(&(&th * &th - eye(rep.size()))));
    }
    Ok(worst)
}

fn clifford_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for n in 2..=6 {
        for e in [1, 2] {
            let rep = build_rep(n, e)?;
            let pr = chiral_projectors(&rep)?;
            out.push(Check::at_most(format!("clifford/rep_invariants/n{n}_e{e}"), rep.invariant_defect(), 1e-12));
            out.push(Check::at_most(format!("clifford/projector_invariants/n{n}_e{e}"), pr.invariant_defect(&rep), 1e-12));
            out.push(Check::at_most(format!("clifford/projector_identity/n{n}_e{e}"), projector_identity_defect(&rep, &mut rng, 8)?, 1e-12));
        }
        let rep = build_rep(n, 1)?;
        out.push(Check::at_most(format!("clifford/trace_pattern/n{n}"), trace_pattern_defect(&rep)?, 1e-12));
    }
    Ok(out)
}

/// ‖Σ_{a,b} ω^b_n(e_a) γᵃγᵇ − (n−1)H·I‖ at x₀ for the frame of `jet`.
pub fn mean_curvature_defect(jet: &BoundaryJet, rep: &GammaRep) -> Result<f64> {
    let fr = frame_jets(jet, rep, false)?;
    let s = mean_curvature_gamma_sum(&fr, rep)?;
    let h = extrinsic_data(jet)?.h.value()?.re;
    Ok(max_abs(&(s - eye(rep.size()) * c((jet.n - 1) as f64 * h))))
}

fn geometry_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for n in 2..=6 {
        let mut worst_h: f64 = 0.0;
        let mut worst_tr: f64 = 0.0;
        for s in 0..4 {
            let jet = BoundaryJet::random(n, 1, 2, 1.0, seed.wrapping_mul(31).wrapping_add(s + 100 * n as u64), 0.3);
            let rep = build_rep(n, 1)?;
            worst_h = worst_h.max(mean_curvature_defect(&jet, &rep)?);
            let ex = extrinsic_data(&jet)?;
            worst_tr = worst_tr.max(jet.g.inverse()?.mul(&ex.sigma).trace().value()?.norm());
        }
        out.push(Check::at_most(format!("geometry/mean_curvature_identity/n{n}"), worst_h, 1e-12));
        out.push(Check::at_most(format!("geometry/sigma_tracefree/n{n}"), worst_tr, 1e-12));
    }
    let jet = BoundaryJet::random(3, 2, 3, 1.0, seed, 0.3);
    let back = BoundaryJet::from_file(&jet.to_file())?;
    let diff = jet.g.c.iter().zip(&back.g.c).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max);
    out.push(Check::at_most("geometry/jet_file_round_trip", diff, 1e-14));
    Ok(out)
}

fn symbols_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (n, e) in [(2, 1), (3, 1), (3, 2), (4, 1)] {
        let jet = BoundaryJet::random(n, e, 3, 1.0, seed.wrapping_add(n as u64 * 7 + e as u64), 0.3);
        let rep = build_rep(n, e)?;
        let (data, b, th) = forward(&jet, &rep, 3, false)?;
        let worst = lambda_theta_residual(&data, &b, &th, 3)?.into_iter().map(|(_, r)| r).fold(0.0, f64::max);
        out.push(Check::at_most(format!("symbols/lambda_theta/n{n}_e{e}"), worst, 1e-10));
    }
    // flat: θ₀(ξ) = −iγⁿγ(ξ̂)𝔹⁺
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in [2, 3, 4] {
        let jet = BoundaryJet::flat(n, 1, 2, 1.0);
        let rep = build_rep(n, 1)?;
        let pr = chiral_projectors(&rep)?;
        let (data, _, th) = forward(&jet, &rep, 0, false)?;
        let comp = th.get(0).ok_or_else(|| Error::InvalidInput("missing θ₀".into()))?;
        let mut worst: f64 = 0.0;
        for _ in 0..6 {
            let xi = random_unit(&mut rng, n - 1);
            let num = comp.eval_x0(&data.ctx.on_boundary(), &xi)?;
            let closed = rep.tgamma(n) * rep.lift(&gamma_of(&rep, &xi)) * (-I) * &pr.b_plus;
            worst = worst.max(max_abs_diff(&num, &closed));
        }
        out.push(Check::at_most(format!("symbols/flat_principal_symbol/n{n}"), worst, 1e-12));
    }
    Ok(out)
}

/// Closed-form Θ̂ for the flat n = 2 cylinder, where M² = (ξ² − m²)I.
pub fn flat_n2_theta(rep: &GammaRep, xi: f64, m: f64, length: f64) -> Result<CMat> {
    let pr = chiral_projectors(rep)?;
    let mm = rep.tgamma(2) * (rep.tgamma(1) * (I * xi) - eye(rep.size()) * c(m));
    let lam = C64::new(xi * xi - m * m, 0.0).sqrt();
    let ratio = if lam.norm() < 1e-14 { c(length) } else { (lam * length).tanh() / lam };
    let e = eye(rep.size()) + &mm * ratio;
    let (vp, vm) = (&pr.v_plus_basis, &pr.v_minus_basis);
    let inv = (vm.adjoint() * &e * vm).try_inverse().ok_or(Error::NearSpectrum(f64::INFINITY))?;
    Ok(vm * (-inv * (vm.adjoint() * &e * vp)) * vp.adjoint())
}

/// Warped n = 2 collar, g = 1 + 0.4xⁿ + 0.2(xⁿ)².
pub fn warped_n2(m: f64, e_rank: usize, length: f64, seed: u64) -> CylinderConfig {
    let mut cfg = CylinderConfig::flat(2, e_rank, m, length);
    cfg.metric = vec![RMat::from_element(1, 1, 1.0), RMat::from_element(1, 1, 0.4), RMat::from_element(1, 1, 0.2)];
    if e_rank > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.connection = vec![(0..2).map(|k| random_anti_hermitian(e_rank, &mut rng) * c(0.3 / (k + 1) as f64)).collect()];
    }
    cfg
}

/// Warped n = 3 collar with a random polynomial connection.
pub fn warped_n3(m: f64, e_rank: usize, length: f64, seed: u64) -> CylinderConfig {
    let mut cfg = CylinderConfig::flat(3, e_rank, m, length);
    let sym = |v: [f64; 4]| RMat::from_row_slice(2, 2, &v);
    cfg.metric = vec![sym([1.0, 0.1, 0.1, 0.9]), sym([0.3, 0.05, 0.05, -0.2]), sym([0.1, 0.0, 0.0, 0.15])];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.connection = (0..2).map(|_| (0..3).map(|k| random_anti_hermitian(e_rank, &mut rng) * c(0.2 / (k + 1) as f64)).collect()).collect();
    cfg
}

fn solver_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let rep = build_rep(2, 1)?;
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.5, 1.0] {
        let cfg = CylinderConfig::flat(2, 1, m, 4.0);
        for k in [-64i64, -17, 8, 31, 64] {
            let xi = cfg.covector(&[k]);
            worst = worst.max(max_abs_diff(&theta_multiplier(&cfg, &rep, &xi)?.matrix, &flat_n2_theta(&rep, xi[0], m, 4.0)?));
        }
    }
    out.push(Check::at_most("solver/flat_n2_closed_form", worst, 1e-8));
    let rep3 = build_rep(3, 2)?;
    let cfg = warped_n3(1.0, 2, 3.0, seed);
    let mut worst: f64 = 0.0;
    for k in [[10i64, 3], [-7, 9], [12, -11]] {
        let xi = cfg.covector(&k);
        let th = theta_multiplier(&cfg, &rep3, &xi)?;
        let la = lambda_multiplier(&cfg, &rep3, &xi)?;
        worst = worst.max(lambda_theta_mode_residual(&cfg, &rep3, &xi, &th.matrix, &la.matrix)?);
    }
    out.push(Check::at_most("solver/lambda_theta_per_mode", worst, 1e-8));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefs: Vec<CMat> = (0..4).map(|_| random_anti_hermitian(rep3.size(), &mut rng).columns(0, 1).into_owned()).collect();
    let size = rep3.size();
    let trial = move |x: f64| coefs.iter().enumerate().fold(nalgebra::DVector::zeros(size), |acc, (k, ck)| acc + ck.column(0) * c(x.powi(k as i32)));
    let cfg = warped_n3(1.0, 2, 2.0, seed);
    out.push(Check::at_most("solver/lichnerowicz_weitzenbock", lw_residual(&cfg, &rep3, &[2.0, -1.0], &trial, 1e-3)?, 1e-6));
    Ok(out)
}

fn recovery_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (n, e) in [(3, 1), (3, 2), (4, 1), (4, 2)] {
        let jet = BoundaryJet::random(n, e, 3, 1.0, seed.wrapping_add(10 * n as u64 + e as u64), 0.2);
        let rep = build_rep(n, e)?;
        let rec = recover_from_jet(&jet, &rep, 3, &RecoveryOptions::default())?;
        out.push(Check::at_most(format!("recovery/round_trip/n{n}_e{e}"), rec.max_relative_error(&NormalData::from_jet(&jet)?), 1e-8));
    }
    let cfg = warped_n2(1.0, 1, 4.0, seed);
    let jet = cfg.to_boundary_jet(4)?;
    let rep = build_rep(2, 1)?;
    let rec = recover_from_jet(&jet, &rep, 3, &RecoveryOptions::default())?;
    let truth = NormalData::from_jet(&jet)?;
    let err = rec.h.iter().zip(&truth.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(Check::at_most("recovery/n2_mean_curvature", err, 1e-9));
    Ok(out)
}

fn greens_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let rep2 = build_rep(2, 2)?;
    let mut cfg = warped_n2(0.5, 2, 1.5, seed);
    cfg.solver.cutoff = 12.0;
    out.push(Check::at_most("greens/defining_property", defining_property_residual(&cfg, &rep2, &[0.7, 0.6], &[3], 40)?, 1e-4));
    cfg.solver.cutoff = 48.0;
    let pairs = vec![(vec![0.3, 0.2], vec![1.1, 0.9]), (vec![5.0, 1.4], vec![0.4, 0.5])];
    out.push(Check::at_most("greens/symmetry", symmetry_defect(&cfg, &rep2, &pairs)?, 1e-6));
    out.push(Check::at_most("greens/chiral_boundary_condition", boundary_defect(&cfg, &rep2, &[0.5, 0.6], &[vec![0.0], vec![1.3]])?, 1e-10));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_unitary(2, &mut rng);
    let u = &u * u.determinant().sqrt().inv();
    let targets = vec![vec![0.2, 0.1], vec![1.5, 0.9]];
    out.push(Check::at_most("greens/su2_gauge", kernel_gauge_check(&cfg, &cfg.gauge_conjugate(&u), &u, &rep2, &[0.8, 0.6], &targets)?, 1e-6));
    let mut flat = CylinderConfig::flat(2, 1, 0.0, 2.0);
    flat.solver.cutoff = 700.0;
    let radii: Vec<f64> = (0..7).map(|i| 0.02 * 2f64.powf(i as f64 / 2.0)).collect();
    let p = radial_exponent(&flat, &build_rep(2, 1)?, &[1.0, 1.0], &radii)?;
    out.push(Check::at_most("greens/radial_exponent_offset", (p + 1.0).abs(), 0.05));
    Ok(out)
}
