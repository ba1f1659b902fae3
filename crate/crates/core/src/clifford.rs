//! Complex Clifford modules with a chirality operator and the chiral boundary projectors.
//!
//! Index convention: `gammas[i]` is γ^{i+1}; the last one is the inward normal γⁿ.

use crate::linalg::{c, column_basis, eye, kron, max_abs, trace, zeros, I};
use crate::{CMat, Error, Result, C64};

/// A unitary Clifford module for Cl(n) together with a chirality operator.
#[derive(Clone, Debug)]
pub struct GammaRep {
    pub n: usize,
    /// Spinor rank N_S.
    pub rank: usize,
    /// Auxiliary bundle rank N_E.
    pub e_rank: usize,
    /// γ¹..γⁿ on the spinor module (N_S × N_S).
    pub gammas: Vec<CMat>,
    /// Π on the spinor module.
    pub chirality: CMat,
}

fn pauli() -> [CMat; 3] {
    let s1 = CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
    let s2 = CMat::from_row_slice(2, 2, &[c(0.0), -I, I, c(0.0)]);
    let s3 = CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)]);
    [s1, s2, s3]
}

/// 2k anticommuting Hermitian involutions on (ℂ²)^{⊗k}.
fn hermitian_generators(k: usize) -> Vec<CMat> {
    let [s1, s2, s3] = pauli();
    let id2 = eye(2);
    let mut out = Vec::with_capacity(2 * k);
    for j in 0..k {
        for s in [&s1, &s2] {
            let mut m = eye(1);
            for slot in 0..k {
                let f = if slot < j {
                    &s3
                } else if slot == j {
                    s
                } else {
                    &id2
                };
                m = kron(&m, f);
            }
            out.push(m);
        }
    }
    out
}

/// Build a representation in dimension `n` twisted by a bundle of rank `e_rank`.
pub fn build_rep(n: usize, e_rank: usize) -> Result<GammaRep> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("dimension n = {n} must be >= 2")));
    }
    if e_rank < 1 {
        return Err(Error::InvalidInput("e_rank must be >= 1".into()));
    }
    let k = (n + 1) / 2;
    let herm = hermitian_generators(k);
    let gammas: Vec<CMat> = herm.iter().take(n).map(|e| e * I).collect();
    let chirality = if n % 2 == 0 {
        let mut vol = eye(1 << k);
        for g in &gammas {
            vol = &vol * g;
        }
        vol * I.powu((n / 2) as u32)
    } else {
        // i·γ(e_{n+1}) with γ(e_{n+1}) = i·e_{n+1}
        (&herm[n] * I) * I
    };
    Ok(GammaRep { n, rank: 1 << k, e_rank, gammas, chirality })
}

impl GammaRep {
    /// Twisted size N_S·N_E.
    pub fn size(&self) -> usize {
        self.rank * self.e_rank
    }

    /// γ^{i} for 1-based `i`, on the spinor module.
    pub fn gamma(&self, i: usize) -> &CMat {
        &self.gammas[i - 1]
    }

    /// γⁿ on the spinor module.
    pub fn gamma_n(&self) -> &CMat {
        &self.gammas[self.n - 1]
    }

    /// Lift a spinor-module matrix to the twisted module: M ⊗ I_E.
    pub fn lift(&self, m: &CMat) -> CMat {
        kron(m, &eye(self.e_rank))
    }

    /// Embed an auxiliary-bundle matrix: I_S ⊗ A.
    pub fn embed_e(&self, a: &CMat) -> CMat {
        kron(&eye(self.rank), a)
    }

    /// Twisted γ^{i} (1-based).
    pub fn tgamma(&self, i: usize) -> CMat {
        self.lift(self.gamma(i))
    }

    /// Max deviation over all representation invariants.
    pub fn invariant_defect(&self) -> f64 {
        let id = eye(self.rank);
        let mut d: f64 = 0.0;
        for (i, gi) in self.gammas.iter().enumerate() {
            d = d.max(max_abs(&(gi.adjoint() + gi)));
            d = d.max(max_abs(&(gi.adjoint() * gi - &id)));
            d = d.max(max_abs(&(&self.chirality * gi + gi * &self.chirality)));
            for (j, gj) in self.gammas.iter().enumerate() {
                let expect = if i == j { &id * c(-2.0) } else { zeros(self.rank, self.rank) };
                d = d.max(max_abs(&(gi * gj + gj * gi - expect)));
            }
        }
        d = d.max(max_abs(&(&self.chirality * &self.chirality - &id)));
        d = d.max(max_abs(&(self.chirality.adjoint() - &self.chirality)));
        let expected_rank = if self.n % 2 == 0 { 1 << (self.n / 2) } else { 1 << ((self.n + 1) / 2) };
        if self.rank != expected_rank {
            d = f64::INFINITY;
        }
        d
    }
}

/// Projectors onto the ±1 eigenspaces 𝕍± of γⁿΠ, at twisted size.
#[derive(Clone, Debug)]
pub struct ChiralProjectors {
    pub b_plus: CMat,
    pub b_minus: CMat,
    /// Orthonormal columns spanning 𝕍⁺ (twisted).
    pub v_plus_basis: CMat,
    /// Orthonormal columns spanning 𝕍⁻ (twisted).
    pub v_minus_basis: CMat,
}

pub fn chiral_projectors(rep: &GammaRep) -> Result<ChiralProjectors> {
    let gp = rep.gamma_n() * &rep.chirality;
    let id = eye(rep.rank);
    let defect = max_abs(&(gp.adjoint() - &gp)).max(max_abs(&(&gp * &gp - &id)));
    if defect > 1e-10 {
        return Err(Error::CorruptRep(format!("gamma_n * Pi is not a self-adjoint involution (defect {defect:.3e})")));
    }
    let bp = rep.lift(&((&id + &gp) * c(0.5)));
    let bm = rep.lift(&((&id - &gp) * c(0.5)));
    let half = rep.size() / 2;
    let v_plus_basis = column_basis(&bp, half);
    let v_minus_basis = column_basis(&bm, half);
    Ok(ChiralProjectors { b_plus: bp, b_minus: bm, v_plus_basis, v_minus_basis })
}

/// Spinor-level projectors ½(1 ± γⁿΠ) without twisting.
pub fn spinor_projectors(rep: &GammaRep) -> (CMat, CMat) {
    let gp = rep.gamma_n() * &rep.chirality;
    let id = eye(rep.rank);
    ((&id + &gp) * c(0.5), (&id - &gp) * c(0.5))
}

/// Trace over the spinor 𝕍⁺ of γ^{a₁}···γ^{a_k} for distinct tangential indices (1-based).
pub fn chiral_trace(rep: &GammaRep, indices: &[usize]) -> Result<C64> {
    for (p, &a) in indices.iter().enumerate() {
        if a == 0 || a >= rep.n {
            return Err(Error::InvalidInput(format!("index {a} is not tangential")));
        }
        if indices[..p].contains(&a) {
            return Err(Error::RepeatedIndex(a));
        }
    }
    let (bp, _) = spinor_projectors(rep);
    let mut m = bp;
    for &a in indices {
        m = &m * rep.gamma(a);
    }
    Ok(trace(&m))
}

impl ChiralProjectors {
    pub fn invariant_defect(&self, rep: &GammaRep) -> f64 {
        let s = rep.size();
        let id = eye(s);
        let (bp, bm) = (&self.b_plus, &self.b_minus);
        let mut d: f64 = max_abs(&(bp + bm - &id));
        d = d.max(max_abs(&(bp * bp - bp))).max(max_abs(&(bm * bm - bm)));
        d = d.max(max_abs(&(bp.adjoint() - bp))).max(max_abs(&(bm.adjoint() - bm)));
        for a in 1..rep.n {
            let g = rep.tgamma(a);
            d = d.max(max_abs(&(bp * &g - &g * bp)));
            d = d.max(max_abs(&(bm * &g - &g * bm)));
        }
        let gn = rep.tgamma(rep.n);
        d = d.max(max_abs(&(bp * &gn - &gn * bm)));
        d = d.max(max_abs(&(bm * &gn - &gn * bp)));
        let pi = rep.lift(&rep.chirality);
        d = d.max(max_abs(&(bp * &pi - &pi * bm)));
        if self.v_plus_basis.ncols() != s / 2 || self.v_minus_basis.ncols() != s / 2 {
            d = f64::INFINITY;
        }
        d = d.max(max_abs(&(bp * &self.v_plus_basis - &self.v_plus_basis)));
        d = d.max(max_abs(&(bm * &self.v_minus_basis - &self.v_minus_basis)));
        d
    }
}
