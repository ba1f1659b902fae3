//! Polyhomogeneous matrix symbols and the two triangular recursions (the
//! factorization symbol b and the boundary conjugation symbol θ).
//!
//! A homogeneous component of degree d is stored as Σ_e P_e(x, ξ) · |ξ|_g(x)^e,
//! where P_e is a homogeneous polynomial in ξ of degree d − e whose coefficients
//! are matrix jets in x. Derivatives in ξ and x stay inside this class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clifford::{chiral_projectors, GammaRep};
use crate::geometry::{extrinsic_data, levi_civita, scalar_curvature_jet, weitzenbock_jet, BoundaryJet, FrameJet};
use crate::jet::{smul, Coef, Jet, MJet, SJet, MAX_ORDER};
use crate::linalg::{c, I};
use crate::{CMat, Error, Result, C64};

/// Polynomial in ξ ∈ ℝ^{n−1} with jet coefficients.
#[derive(Clone, Debug)]
pub struct Poly<T: Coef> {
    pub m: usize,
    pub terms: BTreeMap<Vec<u8>, Jet<T>>,
}

pub type SPoly = Poly<C64>;
pub type MPoly = Poly<CMat>;

impl<T: Coef> Poly<T> {
    pub fn zero(m: usize) -> Self {
        Poly { m, terms: BTreeMap::new() }
    }

    pub fn monomial(m: usize, e: Vec<u8>, coef: Jet<T>) -> Self {
        let mut p = Self::zero(m);
        p.terms.insert(e, coef);
        p
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Minimum jet order over coefficients.
    pub fn order(&self) -> i32 {
        self.terms.values().map(|j| j.order).min().unwrap_or(MAX_ORDER as i32)
    }

    fn push(&mut self, e: Vec<u8>, v: Jet<T>) {
        match self.terms.get_mut(&e) {
            Some(x) => *x = x.add(&v),
            None => {
                self.terms.insert(e, v);
            }
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (e, v) in &o.terms {
            r.push(e.clone(), v.clone());
        }
        r.harmonize()
    }

    /// Bring all coefficients to the common minimum order.
    fn harmonize(mut self) -> Self {
        let o = self.order();
        for v in self.terms.values_mut() {
            if v.order > o {
                *v = v.truncate(o);
            }
        }
        self
    }

    pub fn scale(&self, s: C64) -> Self {
        Poly { m: self.m, terms: self.terms.iter().map(|(e, v)| (e.clone(), v.scale(s))).collect() }
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = Self::zero(self.m);
        for (e1, v1) in &self.terms {
            for (e2, v2) in &o.terms {
                let e: Vec<u8> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                r.push(e, v1.mul(v2));
            }
        }
        r.harmonize()
    }

    pub fn map_coef<F: Fn(&Jet<T>) -> Jet<T>>(&self, f: F) -> Self {
        Poly { m: self.m, terms: self.terms.iter().map(|(e, v)| (e.clone(), f(v))).collect() }.harmonize()
    }

    pub fn d_xi(&self, k: usize) -> Self {
        let mut r = Self::zero(self.m);
        for (e, v) in &self.terms {
            if e[k] > 0 {
                let mut f = e.clone();
                f[k] -= 1;
                r.push(f, v.scale(c(e[k] as f64)));
            }
        }
        if r.terms.is_empty() {
            // keep order information
            r.m = self.m;
        }
        r.harmonize()
    }

    pub fn d_x(&self, i: usize) -> Self {
        self.map_coef(|v| v.deriv(i))
    }

    pub fn eval_xi(&self, xi: &[f64]) -> Option<Jet<T>> {
        let mut acc: Option<Jet<T>> = None;
        for (e, v) in &self.terms {
            let w: f64 = e.iter().zip(xi).map(|(&p, &x)| x.powi(p as i32)).product();
            let t = v.scale(c(w));
            acc = Some(match acc {
                None => t,
                Some(a) => a.add(&t),
            });
        }
        acc
    }
}

/// Scalar polynomial times matrix polynomial.
pub fn spoly_mul(s: &SPoly, p: &MPoly) -> MPoly {
    let mut r = MPoly::zero(p.m);
    for (e1, v1) in &s.terms {
        for (e2, v2) in &p.terms {
            let e: Vec<u8> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
            r.push(e, smul(v1, v2));
        }
    }
    r.harmonize()
}

/// Shared data for symbol calculus: the quadratic form q(x, ξ) = g^{αβ}(x) ξ_α ξ_β.
#[derive(Clone, Debug)]
pub struct SymbolCtx {
    pub n: usize,
    pub size: usize,
    pub q: SPoly,
    /// q^j for small j, used to merge terms of equal parity.
    qpow: Vec<SPoly>,
}

impl SymbolCtx {
    pub fn new(jet: &BoundaryJet, size: usize) -> Result<Self> {
        let n = jet.n;
        let m = n - 1;
        let ginv = jet.g.inverse()?;
        let mut q = SPoly::zero(m);
        for a in 0..m {
            for b in 0..m {
                let mut e = vec![0u8; m];
                e[a] += 1;
                e[b] += 1;
                q.push(e, ginv.entry(a, b));
            }
        }
        Ok(Self::with_form(n, size, q.harmonize()))
    }

    pub fn m(&self) -> usize {
        self.n - 1
    }

    /// Same form with x-jets restricted to the boundary xⁿ = 0.
    pub fn on_boundary(&self) -> Self {
        Self::with_form(self.n, self.size, self.q.map_coef(|v| v.restrict_zero(self.n - 1)))
    }

    /// Context for the form q(x, ξ) given directly as a polynomial with scalar jet coefficients.
    pub fn with_form(n: usize, size: usize, q: SPoly) -> Self {
        let m = n - 1;
        let mut qpow = vec![SPoly::monomial(m, vec![0; m], crate::jet::sconst(n, 1.0))];
        for j in 1..=QPOW_MAX {
            let next = qpow[j - 1].mul(&q);
            qpow.push(next);
        }
        SymbolCtx { n, size, q, qpow }
    }

    /// |ξ|_g^e as a scalar jet at a fixed covector.
    pub fn norm_pow(&self, xi: &[f64], e: i32) -> Result<SJet> {
        let qv = self.q.eval_xi(xi).ok_or_else(|| Error::InvalidInput("empty metric form".into()))?;
        qv.powf(e as f64 / 2.0)
    }
}

const QPOW_MAX: usize = 16;

/// Homogeneous component of degree `degree`: Σ_e P_e |ξ|^e.
#[derive(Clone, Debug)]
pub struct Component {
    pub degree: i32,
    pub terms: BTreeMap<i32, MPoly>,
}

impl Component {
    pub fn zero(degree: i32) -> Self {
        Component { degree, terms: BTreeMap::new() }
    }

    /// Polynomial P of homogeneous degree `degree − e` times |ξ|^e.
    pub fn from_poly(degree: i32, e: i32, p: MPoly) -> Self {
        let mut t = BTreeMap::new();
        if !p.is_empty() {
            t.insert(e, p);
        }
        Component { degree, terms: t }
    }

    /// Constant matrix jet (degree 0).
    pub fn constant(m: usize, v: MJet) -> Self {
        Self::from_poly(0, 0, MPoly::monomial(m, vec![0; m], v))
    }

    pub fn order(&self) -> i32 {
        self.terms.values().map(|p| p.order()).min().unwrap_or(MAX_ORDER as i32)
    }

    fn push(&mut self, e: i32, p: MPoly) {
        if p.is_empty() {
            return;
        }
        match self.terms.get_mut(&e) {
            Some(x) => *x = x.add(&p),
            None => {
                self.terms.insert(e, p);
            }
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        assert_eq!(self.degree, o.degree, "adding components of different degree");
        let mut r = self.clone();
        for (e, p) in &o.terms {
            r.push(*e, p.clone());
        }
        r.harmonize()
    }

    fn harmonize(mut self) -> Self {
        let o = self.order();
        for p in self.terms.values_mut() {
            if p.order() > o {
                *p = p.map_coef(|v| v.truncate(o));
            }
        }
        self
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(c(-1.0)))
    }

    pub fn scale(&self, s: C64) -> Self {
        Component { degree: self.degree, terms: self.terms.iter().map(|(e, p)| (*e, p.scale(s))).collect() }
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = Component::zero(self.degree + o.degree);
        for (e1, p1) in &self.terms {
            for (e2, p2) in &o.terms {
                r.push(e1 + e2, p1.mul(p2));
            }
        }
        r.harmonize()
    }

    /// Multiply by |ξ|^k.
    pub fn norm_shift(&self, k: i32) -> Self {
        Component { degree: self.degree + k, terms: self.terms.iter().map(|(e, p)| (e + k, p.clone())).collect() }
    }

    pub fn smul(&self, s: &SJet) -> Self {
        Component { degree: self.degree, terms: self.terms.iter().map(|(e, p)| (*e, p.map_coef(|v| smul(s, v)))).collect() }
            .harmonize()
    }

    pub fn lmul_const(&self, a: &CMat) -> Self {
        self.map_coef(|v| v.lmul_const(a))
    }

    pub fn rmul_const(&self, a: &CMat) -> Self {
        self.map_coef(|v| v.rmul_const(a))
    }

    pub fn map_coef<F: Fn(&MJet) -> MJet>(&self, f: F) -> Self {
        Component { degree: self.degree, terms: self.terms.iter().map(|(e, p)| (*e, p.map_coef(&f))).collect() }
    }

    pub fn d_xi(&self, ctx: &SymbolCtx, k: usize) -> Self {
        let dq = ctx.q.d_xi(k);
        let mut r = Component::zero(self.degree - 1);
        for (e, p) in &self.terms {
            r.push(*e, p.d_xi(k));
            if *e != 0 {
                r.push(e - 2, spoly_mul(&dq, p).scale(c(*e as f64 / 2.0)));
            }
        }
        r.canonical(ctx)
    }

    pub fn d_x(&self, ctx: &SymbolCtx, i: usize) -> Self {
        let dq = ctx.q.d_x(i);
        let mut r = Component::zero(self.degree);
        for (e, p) in &self.terms {
            r.push(*e, p.d_x(i));
            if *e != 0 {
                r.push(e - 2, spoly_mul(&dq, p).scale(c(*e as f64 / 2.0)));
            }
        }
        r.canonical(ctx)
    }

    /// Merge all terms of equal polynomial parity onto the lowest power of |ξ|.
    pub fn canonical(&self, ctx: &SymbolCtx) -> Self {
        let mut r = Component::zero(self.degree);
        for par in 0..2 {
            let group: Vec<(&i32, &MPoly)> = self.terms.iter().filter(|(e, _)| (self.degree - **e).rem_euclid(2) == par).collect();
            let Some(emin) = group.iter().map(|(e, _)| **e).min() else { continue };
            let mut acc: Option<MPoly> = None;
            for (e, p) in group {
                let j = ((e - emin) / 2) as usize;
                let t = if j == 0 { p.clone() } else { spoly_mul(&ctx.qpow[j.min(QPOW_MAX)], p) };
                assert!(j <= QPOW_MAX, "|ξ| power spread too large");
                acc = Some(match acc {
                    None => t,
                    Some(a) => a.add(&t),
                });
            }
            r.push(emin, acc.unwrap());
        }
        r.harmonize()
    }

    /// Part even (or odd) under ξ ↦ −ξ.
    pub fn parity(&self, even: bool) -> Self {
        let mut r = Component::zero(self.degree);
        for (e, p) in &self.terms {
            let pd = self.degree - e;
            if (pd.rem_euclid(2) == 0) == even {
                r.push(*e, p.clone());
            }
        }
        r
    }

    /// Value as a matrix jet in x at a fixed covector.
    pub fn eval(&self, ctx: &SymbolCtx, xi: &[f64]) -> Result<MJet> {
        let mut acc = MJet::zero(ctx.n, MAX_ORDER as i32, &CMat::zeros(ctx.size, ctx.size));
        for (e, p) in &self.terms {
            if let Some(v) = p.eval_xi(xi) {
                acc = acc.add(&smul(&ctx.norm_pow(xi, *e)?, &v));
            }
        }
        Ok(acc)
    }

    /// Value at x₀ for a fixed covector.
    pub fn eval_x0(&self, ctx: &SymbolCtx, xi: &[f64]) -> Result<CMat> {
        let j = self.eval(ctx, xi)?;
        if j.order < 0 {
            return Err(Error::InsufficientOrder { what: format!("degree {} component at x0", self.degree), needed: 0, available: 0 });
        }
        Ok(j.c[0].clone())
    }
}

fn multi_indices(m: usize, k: usize) -> Vec<Vec<u8>> {
    if m == 0 {
        return if k == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in (0..=k).rev() {
        for rest in multi_indices(m - 1, k - first) {
            let mut v = vec![first as u8];
            v.extend(rest);
            out.push(v);
        }
    }
    out
}

fn multi_factorial(v: &[u8]) -> f64 {
    v.iter().map(|&k| (1..=k as u32).map(|i| i as f64).product::<f64>()).product()
}

/// Polyhomogeneous series with degrees top, top−1, … .
#[derive(Clone, Debug)]
pub struct SymbolSeries {
    pub top: i32,
    pub comps: Vec<Component>,
}

impl SymbolSeries {
    pub fn new(top: i32) -> Self {
        SymbolSeries { top, comps: Vec::new() }
    }

    pub fn get(&self, degree: i32) -> Option<&Component> {
        let k = self.top - degree;
        if k < 0 {
            return None;
        }
        self.comps.get(k as usize)
    }

    pub fn push(&mut self, c: Component) {
        assert_eq!(c.degree, self.top - self.comps.len() as i32, "degrees must decrease by one");
        self.comps.push(c);
    }

    pub fn lowest(&self) -> i32 {
        self.top - self.comps.len() as i32 + 1
    }

    pub fn parity(&self, even: bool) -> Self {
        SymbolSeries { top: self.top, comps: self.comps.iter().map(|c| c.parity(even)).collect() }
    }

    pub fn block(&self, left: &CMat, right: &CMat) -> Self {
        SymbolSeries { top: self.top, comps: self.comps.iter().map(|c| c.lmul_const(left).rmul_const(right)).collect() }
    }
}

/// Cache of ξ- and x-derivatives of a component.
#[derive(Clone)]
struct Derivs {
    comp: Component,
    xi: BTreeMap<Vec<u8>, Component>,
    x: BTreeMap<Vec<u8>, Component>,
}

impl Derivs {
    fn new(comp: &Component) -> Self {
        Derivs { comp: comp.clone(), xi: BTreeMap::new(), x: BTreeMap::new() }
    }
    fn get(&mut self, ctx: &SymbolCtx, nu: &[u8], in_xi: bool) -> Component {
        let map = if in_xi { &self.xi } else { &self.x };
        if let Some(c) = map.get(nu) {
            return c.clone();
        }
        let res = match nu.iter().position(|&k| k > 0) {
            None => self.comp.clone(),
            Some(k) => {
                let mut prev = nu.to_vec();
                prev[k] -= 1;
                let base = self.get(ctx, &prev, in_xi);
                if in_xi {
                    base.d_xi(ctx, k)
                } else {
                    base.d_x(ctx, k)
                }
            }
        };
        let map = if in_xi { &mut self.xi } else { &mut self.x };
        map.insert(nu.to_vec(), res.clone());
        res
    }
}

/// Degree-`d` part of p # q, restricted to pairs accepted by `keep(deg_p, deg_q, |ν|)`.
fn sharp_degree(
    ctx: &SymbolCtx,
    p: &SymbolSeries,
    q: &SymbolSeries,
    d: i32,
    keep: &dyn Fn(i32, i32, usize) -> bool,
    dp: &mut [Derivs],
    dq: &mut [Derivs],
) -> Component {
    let m = ctx.m();
    let mut acc = Component::zero(d);
    for (ip, cp) in p.comps.iter().enumerate() {
        for (iq, cq) in q.comps.iter().enumerate() {
            let k = cp.degree + cq.degree - d;
            if k < 0 || !keep(cp.degree, cq.degree, k as usize) {
                continue;
            }
            for nu in multi_indices(m, k as usize) {
                let a = dp[ip].get(ctx, &nu, true);
                let b = dq[iq].get(ctx, &nu, false);
                if a.terms.is_empty() || b.terms.is_empty() {
                    continue;
                }
                let coef = (-I).powu(k as u32) / multi_factorial(&nu);
                acc = acc.add(&a.mul(&b).scale(coef));
            }
        }
    }
    acc.canonical(ctx)
}

/// Σ_ν (−i)^{|ν|}/ν! ∂_ξ^ν p · ∂_x^ν q, keeping the top `depth` degrees.
pub fn sharp_compose(ctx: &SymbolCtx, p: &SymbolSeries, q: &SymbolSeries, depth: usize) -> Result<SymbolSeries> {
    let top = p.top + q.top;
    let mut out = SymbolSeries::new(top);
    let mut dp: Vec<Derivs> = p.comps.iter().map(|c| Derivs::new(c)).collect();
    let mut dq: Vec<Derivs> = q.comps.iter().map(|c| Derivs::new(c)).collect();
    for k in 0..depth {
        let d = top - k as i32;
        let comp = sharp_degree(ctx, p, q, d, &|_, _, _| true, &mut dp, &mut dq);
        // completeness: every (p_i, q_j) contributing to degree d must exist
        let needed_p = d - q.top;
        let needed_q = d - p.top;
        if p.lowest() > needed_p || q.lowest() > needed_q {
            return Err(Error::InsufficientOrder { what: format!("composition at degree {d} needs more components"), needed: k, available: 0 });
        }
        if comp.order() < 0 {
            return Err(Error::InsufficientOrder { what: format!("x-jets for composition at degree {d}"), needed: k, available: (comp.order() + k as i32).max(0) as usize });
        }
        out.push(Comp::fix(comp, d));
    }
    Ok(out)
}

struct Comp;
impl Comp {
    fn fix(mut c: Component, d: i32) -> Component {
        c.degree = d;
        c
    }
}

/// Geometric ingredients consumed by the recursions.
#[derive(Clone, Debug)]
pub struct SymbolData {
    pub ctx: SymbolCtx,
    pub n: usize,
    pub size: usize,
    pub m: f64,
    /// (n−1)H as a jet.
    pub trace_ii: SJet,
    /// q₁ and q₀ components of the tangential operator.
    pub q1: Component,
    pub q0: Component,
    /// Symbol of γⁿ(γᵃ∇_a − m): degree 1 and degree 0 parts.
    pub r1: Component,
    pub r0: Component,
    pub b_plus: CMat,
    pub b_minus: CMat,
    /// Orthonormal bases of 𝕍⁺ and 𝕍⁻ (columns).
    pub v_plus: CMat,
    pub v_minus: CMat,
}

pub fn symbol_data(jet: &BoundaryJet, frame: &FrameJet, rep: &GammaRep) -> Result<SymbolData> {
    let n = jet.n;
    let m = n - 1;
    let size = rep.size();
    let ctx = SymbolCtx::new(jet, size)?;
    let conn = levi_civita(jet)?;
    let ginv = jet.g.inverse()?;
    let ext = extrinsic_data(jet)?;
    let trace_ii = ext.h.scale(c(m as f64));
    let zero_m = CMat::zeros(size, size);
    let idm = MJet::identity(n, size);
    let unit = |k: usize| {
        let mut e = vec![0u8; m];
        e[k] = 1;
        e
    };
    // q₁ = −2i g^{αβ} κ_α ξ_β + i g^{αβ} Γ^γ_{αβ} ξ_γ
    let mut q1 = MPoly::zero(m);
    // contracted Christoffel C^γ = g^{αβ} Γ^γ_{αβ}
    let mut cg: Vec<SJet> = Vec::new();
    for gm in 0..m {
        let mut s = crate::jet::sconst(n, 0.0);
        for a in 0..m {
            for b in 0..m {
                s = s.add(&ginv.entry(a, b).mul(&conn.gamma[gm][a][b]));
            }
        }
        cg.push(s);
    }
    for be in 0..m {
        let mut coef = MJet::zero(n, MAX_ORDER as i32, &zero_m);
        for al in 0..m {
            coef = coef.add(&smul(&ginv.entry(al, be), &frame.kappa[al]).scale(c(-2.0) * I));
        }
        coef = coef.add(&smul(&cg[be], &idm).scale(I));
        q1.push(unit(be), coef);
    }
    let q1 = Component::from_poly(1, 0, q1.harmonize());
    // q₀ = −g^{αβ}∂_ακ_β − g^{αβ}κ_ακ_β + g^{αβ}Γ^γ_{αβ}κ_γ + R/4 + 𝔉 − m²
    let mut q0 = MJet::zero(n, MAX_ORDER as i32, &zero_m);
    for a in 0..m {
        for b in 0..m {
            let gab = ginv.entry(a, b);
            q0 = q0.sub(&smul(&gab, &frame.kappa[b].deriv(a)));
            q0 = q0.sub(&smul(&gab, &frame.kappa[a].mul(&frame.kappa[b])));
        }
        q0 = q0.add(&smul(&cg[a], &frame.kappa[a]));
    }
    let r_scal = scalar_curvature_jet(&conn);
    q0 = q0.add(&smul(&r_scal.scale(c(0.25)), &idm));
    q0 = q0.add(&weitzenbock_jet(jet, frame, rep));
    q0 = q0.sub(&idm.scale(c(jet.m * jet.m)));
    let q0 = Component::constant(m, q0);
    // γⁿγᵃ h^α_a (iξ_α + κ_α) − m γⁿ
    let gn = rep.tgamma(n);
    let mut r1 = MPoly::zero(m);
    let mut r0 = MJet::from_const(n, &gn * c(-jet.m));
    for al in 0..m {
        let mut coef = MJet::zero(n, MAX_ORDER as i32, &zero_m);
        for a in 0..m {
            let gg = MJet::from_const(n, &gn * rep.tgamma(a + 1));
            coef = coef.add(&smul(&frame.h.entry(al, a), &gg));
        }
        r1.push(unit(al), coef.scale(I));
        r0 = r0.add(&coef.mul(&frame.kappa[al]));
    }
    let r1 = Component::from_poly(1, 0, r1.harmonize());
    let r0 = Component::constant(m, r0);
    let pr = chiral_projectors(rep)?;
    Ok(SymbolData { ctx, n, size, m: jet.m, trace_ii, q1, q0, r1, r0, b_plus: pr.b_plus, b_minus: pr.b_minus, v_plus: pr.v_plus_basis, v_minus: pr.v_minus_basis })
}

/// Factorization symbol b₁, b₀, …, b_{1−K}.
pub fn b_series(data: &SymbolData, k: usize) -> Result<SymbolSeries> {
    let ctx = &data.ctx;
    let m = ctx.m();
    let n = data.n;
    let mut b = SymbolSeries::new(1);
    let b1 = Component::from_poly(1, 1, MPoly::monomial(m, vec![0; m], MJet::identity(n, data.size).scale(c(-1.0))));
    b.push(b1);
    let mut dp: Vec<Derivs> = vec![Derivs::new(&b.comps[0])];
    let mut dq = dp.clone();
    for step in 0..k {
        let d = 1 - step as i32;
        let mut rhs = match d {
            1 => data.q1.clone(),
            0 => data.q0.clone(),
            _ => Component::zero(d),
        };
        let bd = b.get(d).unwrap().clone();
        rhs = rhs.sub(&bd.d_x(ctx, n - 1));
        rhs = rhs.add(&bd.smul(&data.trace_ii));
        let unknown = d - 1;
        let keep = move |dp: i32, dq: i32, nu: usize| !(nu == 0 && (dp == unknown || dq == unknown));
        let s = sharp_degree(ctx, &b, &b, d, &keep, &mut dp, &mut dq);
        rhs = rhs.sub(&s);
        // b_{d−1} = −rhs / (2|ξ|)
        let next = Comp::fix(rhs.norm_shift(-1).scale(c(-0.5)), d - 1).canonical(ctx);
        if next.order() < 0 {
            return Err(Error::InsufficientOrder { what: format!("b_{} needs jets of higher order", d - 1), needed: step + 1, available: 0 });
        }
        dp.push(Derivs::new(&next));
        dq.push(Derivs::new(&next));
        b.push(next);
    }
    Ok(b)
}

/// θ₀, θ₋₁, …, θ_{−K} from the minus row of the Λ–Θ relation.
///
/// The solve runs in the reduced bases of 𝕍∓ and on xⁿ = 0, so the returned
/// components carry x′-jets only.
pub fn theta_series(data: &SymbolData, b: &SymbolSeries, k: usize) -> Result<SymbolSeries> {
    let ctx = data.ctx.on_boundary();
    let ctx = &ctx;
    let nn = data.n - 1;
    let (vp, vm) = (&data.v_plus, &data.v_minus);
    let (vpa, vma) = (vp.adjoint(), vm.adjoint());
    if b.lowest() > 1 - k as i32 {
        return Err(Error::InsufficientOrder { what: "b-series depth for θ".into(), needed: k, available: (1 - b.lowest()) as usize });
    }
    // L = b^{--} − R^{--},  S = R^{-+} − b^{-+}
    let mut l = SymbolSeries::new(1);
    let mut s = SymbolSeries::new(1);
    for comp in &b.comps {
        let d = comp.degree;
        let r = match d {
            1 => Some(&data.r1),
            0 => Some(&data.r0),
            _ => None,
        };
        let mut lc = comp.clone();
        let mut sc = comp.scale(c(-1.0));
        if let Some(r) = r {
            lc = lc.sub(r);
            sc = sc.add(r);
        }
        let on_bdy = |x: &Component, right: &CMat| x.map_coef(|v| v.restrict_zero(nn)).lmul_const(&vma).rmul_const(right);
        l.push(on_bdy(&lc, vm));
        s.push(on_bdy(&sc, vp));
    }
    let mut theta = SymbolSeries::new(0);
    let mut dl: Vec<Derivs> = l.comps.iter().map(Derivs::new).collect();
    let mut dt: Vec<Derivs> = Vec::new();
    for step in 0..=k {
        let d = 1 - step as i32;
        let unknown = d - 1;
        let keep = move |_dl: i32, dt: i32, nu: usize| !(nu == 0 && dt == unknown);
        let known = if theta.comps.is_empty() {
            Component::zero(d)
        } else {
            sharp_degree(ctx, &l, &theta, d, &keep, &mut dl, &mut dt)
        };
        let rhs = if known.terms.is_empty() { s.get(d).unwrap().scale(c(-1.0)) } else { known.sub(s.get(d).unwrap()) };
        let next = Comp::fix(rhs.norm_shift(-1), unknown).canonical(ctx);
        if next.order() < 0 {
            return Err(Error::InsufficientOrder { what: format!("θ_{unknown} needs jets of higher order"), needed: step, available: 0 });
        }
        dt.push(Derivs::new(&next));
        theta.push(next);
    }
    Ok(SymbolSeries { top: 0, comps: theta.comps.iter().map(|c| c.lmul_const(vm).rmul_const(&vpa)).collect() })
}

/// Convenience: b- and θ-series for a jet.
pub fn forward(jet: &BoundaryJet, rep: &GammaRep, k: usize, parallel_at_x0: bool) -> Result<(SymbolData, SymbolSeries, SymbolSeries)> {
    let frame = crate::geometry::frame_jets(jet, rep, parallel_at_x0)?;
    let data = symbol_data(jet, &frame, rep)?;
    let b = b_series(&data, k)?;
    let th = theta_series(&data, &b, k)?;
    Ok((data, b, th))
}

/// Deterministic sample directions in ℝ^m, not normalized.
pub fn sample_directions(m: usize, count: usize) -> Vec<Vec<f64>> {
    let golden = 0.618_033_988_749_895_f64;
    (0..count)
        .map(|i| {
            let t = (i as f64 + 0.5) / count as f64;
            match m {
                1 => vec![if i % 2 == 0 { 1.0 } else { -1.0 }],
                2 => {
                    let a = 2.0 * std::f64::consts::PI * (t + 0.1234);
                    vec![a.cos(), a.sin()]
                }
                _ => {
                    let z = 1.0 - 2.0 * t;
                    let r = (1.0 - z * z).sqrt();
                    let ph = 2.0 * std::f64::consts::PI * (i as f64 * golden).fract();
                    let mut v = vec![r * ph.cos(), r * ph.sin(), z];
                    for extra in 3..m {
                        v.push(((i * (extra + 1)) as f64 * golden).fract() - 0.5);
                    }
                    v
                }
            }
        })
        .collect()
}

/// Deterministic sample covectors on the g(x₀)-unit sphere.
pub fn sample_covectors(ctx: &SymbolCtx, count: usize) -> Vec<Vec<f64>> {
    sample_directions(ctx.m(), count)
        .into_iter()
        .map(|raw| {
            let qv = ctx.q.eval_xi(&raw).map(|j| j.c[0].re).unwrap_or(1.0);
            raw.iter().map(|x| x / qv.sqrt()).collect()
        })
        .collect()
}

/// Max over sample covectors of the per-degree residual of both rows of the Λ–Θ relation.
pub fn lambda_theta_residual(data: &SymbolData, b: &SymbolSeries, theta: &SymbolSeries, k: usize) -> Result<Vec<(i32, f64)>> {
    let ctx = &data.ctx;
    let (bp, bm) = (&data.b_plus, &data.b_minus);
    let rser = {
        let mut r = SymbolSeries::new(1);
        r.push(data.r1.clone());
        r.push(data.r0.clone());
        for comp in b.comps.iter().skip(2) {
            r.push(Component::zero(comp.degree));
        }
        r
    };
    // minus row: b^{-+} + (b^{--} − R^{--})#θ − R^{-+}; plus row: b^{++} − R^{++} + (b^{+-} − R^{+-})#θ
    let diff = |left: &CMat| -> SymbolSeries {
        let mut s = SymbolSeries::new(1);
        for (cb, cr) in b.comps.iter().zip(&rser.comps) {
            s.push(cb.sub(cr).lmul_const(left));
        }
        s
    };
    let depth = (k + 1).min(b.comps.len());
    let xis = sample_covectors(ctx, 12);
    let mut out = Vec::new();
    for (row, left) in [(0, bm), (1, bp)] {
        let full = diff(left);
        let lhs_theta = sharp_compose(ctx, &full.block(&crate::linalg::eye(data.size), bm), theta, depth)?;
        for step in 0..depth {
            let d = 1 - step as i32;
            let direct = full.get(d).unwrap().rmul_const(bp);
            let total = lhs_theta.get(d).unwrap().add(&direct);
            let mut worst: f64 = 0.0;
            for xi in &xis {
                let v = total.eval_x0(ctx, xi)?;
                worst = worst.max(crate::linalg::max_abs(&v));
            }
            if row == 0 {
                out.push((d, worst));
            } else if let Some(e) = out.iter_mut().find(|(dd, _)| *dd == d) {
                e.1 = e.1.max(worst);
            }
        }
    }
    Ok(out)
}

/// JSON form: per degree, Σ_r C_r ξ̂_r |ξ|^d with the coefficients at x₀.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesFile {
    pub name: String,
    pub n: usize,
    pub size: usize,
    pub components: Vec<ComponentFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentFile {
    pub degree: i32,
    pub terms: Vec<MonomialFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonomialFile {
    /// Sorted tangential indices of the symmetric monomial ξ̂_r (0-based).
    pub multi_index: Vec<usize>,
    /// Row-major [re, im] pairs.
    pub matrix: Vec<[f64; 2]>,
}

impl Component {
    /// Coefficients C_r of Σ_r C_r ξ̂_r |ξ|^d, keyed by exponent vector, as x-jets.
    pub fn hat_coefficients(&self) -> BTreeMap<Vec<u8>, MJet> {
        let mut out: BTreeMap<Vec<u8>, MJet> = BTreeMap::new();
        for p in self.terms.values() {
            for (e, v) in &p.terms {
                match out.get_mut(e) {
                    Some(x) => *x = x.add(v),
                    None => {
                        out.insert(e.clone(), v.clone());
                    }
                }
            }
        }
        out
    }
}

impl ComponentFile {
    pub fn eval(&self, ctx: &SymbolCtx, size: usize, xi: &[f64]) -> CMat {
        let norm = ctx.norm_pow(xi, 1).ok().and_then(|j| j.c.first().map(|z| z.re)).unwrap_or(f64::NAN);
        let mut acc = CMat::zeros(size, size);
        for t in &self.terms {
            let w: f64 = t.multi_index.iter().map(|&a| xi[a] / norm).product();
            let mat = CMat::from_row_iterator(size, size, t.matrix.iter().map(|p| C64::new(p[0], p[1])));
            acc += mat * c(w);
        }
        acc * c(norm.powi(self.degree))
    }
}

pub fn series_to_file(name: &str, data: &SymbolData, s: &SymbolSeries) -> SeriesFile {
    let components = s
        .comps
        .iter()
        .map(|comp| ComponentFile {
            degree: comp.degree,
            terms: comp
                .hat_coefficients()
                .into_iter()
                .filter_map(|(e, j)| j.c.first().cloned().map(|v| (e, v)))
                .filter(|(_, v)| crate::linalg::max_abs(v) > 0.0)
                .map(|(e, v)| MonomialFile {
                    multi_index: e.iter().enumerate().flat_map(|(a, &k)| std::iter::repeat(a).take(k as usize)).collect(),
                    matrix: v.transpose().iter().map(|z| [z.re, z.im]).collect(),
                })
                .collect(),
        })
        .collect();
    SeriesFile { name: name.into(), n: data.n, size: data.size, components }
}
