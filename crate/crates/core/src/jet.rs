//! Truncated multivariate Taylor jets with scalar or matrix coefficients.
//!
//! A jet of order `o` in `nvar` variables stores the Taylor coefficients
//! f_α = ∂^α f(0)/α! for |α| ≤ o, in graded order. Order −1 means "no data";
//! arithmetic propagates the smallest order of its operands.

use std::sync::OnceLock;

use crate::linalg::{c, eye};
use crate::{CMat, Error, Result, C64};

pub const MAX_ORDER: usize = 8;
const MAX_VARS: usize = 8;

/// Monomial bookkeeping for a fixed number of variables up to `MAX_ORDER`.
pub struct Basis {
    pub nvar: usize,
    pub exps: Vec<Vec<u8>>,
    /// count[o] = number of monomials of degree ≤ o.
    pub count: Vec<usize>,
    /// Index pairs (i, j, k) with exps[i] + exps[j] = exps[k], sorted by degree of k.
    pairs: Vec<(u32, u32, u32)>,
    pair_end: Vec<usize>,
    /// up[v][i] = index of exps[i] + e_v, or u32::MAX when beyond MAX_ORDER.
    up: Vec<Vec<u32>>,
    /// down[v][i] = index of exps[i] − e_v, or u32::MAX when exps[i][v] = 0.
    down: Vec<Vec<u32>>,
    index: std::collections::HashMap<Vec<u8>, usize>,
}

fn build_basis(nvar: usize) -> Basis {
    let mut exps: Vec<Vec<u8>> = vec![vec![0; nvar]];
    let mut count = vec![1usize];
    let mut layer: Vec<Vec<u8>> = vec![vec![0; nvar]];
    for _ in 1..=MAX_ORDER {
        let mut next: Vec<Vec<u8>> = Vec::new();
        for e in &layer {
            let last = e.iter().rposition(|&x| x > 0).unwrap_or(0);
            for v in last..nvar {
                let mut f = e.clone();
                f[v] += 1;
                next.push(f);
            }
        }
        if nvar == 0 {
            next.clear();
        }
        exps.extend(next.iter().cloned());
        count.push(exps.len());
        layer = next;
    }
    let index: std::collections::HashMap<Vec<u8>, usize> = exps.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
    let deg = |e: &Vec<u8>| e.iter().map(|&x| x as usize).sum::<usize>();
    let mut pairs = Vec::new();
    for (i, ei) in exps.iter().enumerate() {
        for (j, ej) in exps.iter().enumerate() {
            if deg(ei) + deg(ej) <= MAX_ORDER {
                let s: Vec<u8> = ei.iter().zip(ej).map(|(a, b)| a + b).collect();
                pairs.push((i as u32, j as u32, index[&s] as u32));
            }
        }
    }
    pairs.sort_by_key(|&(_, _, k)| k);
    let mut pair_end = vec![0usize; MAX_ORDER + 1];
    for o in 0..=MAX_ORDER {
        pair_end[o] = pairs.partition_point(|&(_, _, k)| (k as usize) < count[o]);
    }
    let mut up = vec![vec![u32::MAX; exps.len()]; nvar];
    let mut down = vec![vec![u32::MAX; exps.len()]; nvar];
    for (i, e) in exps.iter().enumerate() {
        for v in 0..nvar {
            let mut f = e.clone();
            f[v] += 1;
            if let Some(&k) = index.get(&f) {
                up[v][i] = k as u32;
            }
            if e[v] > 0 {
                let mut f = e.clone();
                f[v] -= 1;
                down[v][i] = index[&f] as u32;
            }
        }
    }
    Basis { nvar, exps, count, pairs, pair_end, up, down, index }
}

pub fn basis(nvar: usize) -> &'static Basis {
    static CACHE: [OnceLock<Basis>; MAX_VARS + 1] = [const { OnceLock::new() }; MAX_VARS + 1];
    assert!(nvar <= MAX_VARS, "too many jet variables");
    CACHE[nvar].get_or_init(|| build_basis(nvar))
}

impl Basis {
    pub fn index_of(&self, e: &[u8]) -> Option<usize> {
        self.index.get(e).copied()
    }
    pub fn len(&self, order: i32) -> usize {
        if order < 0 {
            0
        } else {
            self.count[order as usize]
        }
    }
}

/// Coefficient ring for jets.
pub trait Coef: Clone + Send + Sync + std::fmt::Debug {
    fn zero_like(&self) -> Self;
    fn add_assign_c(&mut self, o: &Self);
    fn sub_assign_c(&mut self, o: &Self);
    fn scale(&self, s: C64) -> Self;
    /// acc += a·b
    fn mul_acc(acc: &mut Self, a: &Self, b: &Self);
    fn norm_max(&self) -> f64;
    /// Zero with the shape of a·b.
    fn mul_shape(a: &Self, b: &Self) -> Self;
    fn is_exact_zero(&self) -> bool;
}

impl Coef for C64 {
    fn zero_like(&self) -> Self {
        C64::new(0.0, 0.0)
    }
    fn add_assign_c(&mut self, o: &Self) {
        *self += o;
    }
    fn sub_assign_c(&mut self, o: &Self) {
        *self -= o;
    }
    fn scale(&self, s: C64) -> Self {
        self * s
    }
    fn mul_acc(acc: &mut Self, a: &Self, b: &Self) {
        *acc += a * b;
    }
    fn norm_max(&self) -> f64 {
        self.norm()
    }
    fn mul_shape(_: &Self, _: &Self) -> Self {
        C64::new(0.0, 0.0)
    }
    fn is_exact_zero(&self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }
}

impl Coef for CMat {
    fn zero_like(&self) -> Self {
        CMat::zeros(self.nrows(), self.ncols())
    }
    fn add_assign_c(&mut self, o: &Self) {
        *self += o;
    }
    fn sub_assign_c(&mut self, o: &Self) {
        *self -= o;
    }
    fn scale(&self, s: C64) -> Self {
        self * s
    }
    fn mul_acc(acc: &mut Self, a: &Self, b: &Self) {
        acc.gemm(c(1.0), a, b, c(1.0));
    }
    fn norm_max(&self) -> f64 {
        self.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
    fn mul_shape(a: &Self, b: &Self) -> Self {
        CMat::zeros(a.nrows(), b.ncols())
    }
    fn is_exact_zero(&self) -> bool {
        self.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }
}

fn is_zero<T: Coef>(t: &T) -> bool {
    t.is_exact_zero()
}

#[derive(Clone, Debug)]
pub struct Jet<T: Coef> {
    pub nvar: usize,
    pub order: i32,
    pub c: Vec<T>,
    /// Prototype zero, so empty jets still know their shape.
    pub proto: T,
}

pub type SJet = Jet<C64>;
pub type MJet = Jet<CMat>;

impl<T: Coef> Jet<T> {
    pub fn zero(nvar: usize, order: i32, proto: &T) -> Self {
        let z = proto.zero_like();
        let len = basis(nvar).len(order);
        Jet { nvar, order, c: vec![z.clone(); len], proto: z }
    }

    pub fn constant(nvar: usize, order: i32, v: T) -> Self {
        let mut j = Self::zero(nvar, order, &v);
        if order >= 0 {
            j.c[0] = v;
        }
        j
    }

    /// Empty jet (no information).
    pub fn none(nvar: usize, proto: &T) -> Self {
        Self::zero(nvar, -1, proto)
    }

    pub fn value(&self) -> Result<&T> {
        self.c.first().ok_or_else(|| Error::InsufficientOrder { what: "jet value".into(), needed: 0, available: 0 })
    }

    pub fn coef(&self, e: &[u8]) -> Option<&T> {
        basis(self.nvar).index_of(e).and_then(|i| self.c.get(i))
    }

    pub fn coef_mut(&mut self, e: &[u8]) -> Option<&mut T> {
        match basis(self.nvar).index_of(e) {
            Some(i) => self.c.get_mut(i),
            None => None,
        }
    }

    pub fn truncate(&self, order: i32) -> Self {
        let o = order.min(self.order);
        let len = basis(self.nvar).len(o);
        Jet { nvar: self.nvar, order: o, c: self.c[..len].to_vec(), proto: self.proto.clone() }
    }

    pub fn add(&self, o: &Self) -> Self {
        let ord = self.order.min(o.order);
        let mut r = self.truncate(ord);
        for (a, b) in r.c.iter_mut().zip(&o.c) {
            a.add_assign_c(b);
        }
        r
    }

    pub fn sub(&self, o: &Self) -> Self {
        let ord = self.order.min(o.order);
        let mut r = self.truncate(ord);
        for (a, b) in r.c.iter_mut().zip(&o.c) {
            a.sub_assign_c(b);
        }
        r
    }

    pub fn add_assign(&mut self, o: &Self) {
        *self = self.add(o);
    }

    pub fn scale(&self, s: C64) -> Self {
        Jet { nvar: self.nvar, order: self.order, c: self.c.iter().map(|x| x.scale(s)).collect(), proto: self.proto.clone() }
    }

    pub fn neg(&self) -> Self {
        self.scale(c(-1.0))
    }

    pub fn mul(&self, o: &Self) -> Self {
        let ord = self.order.min(o.order);
        let mut r = Self::zero(self.nvar, ord, &self.proto_mul(o));
        if ord < 0 {
            return r;
        }
        let b = basis(self.nvar);
        let nz_a: Vec<bool> = self.c.iter().map(|x| !is_zero(x)).collect();
        let nz_b: Vec<bool> = o.c.iter().map(|x| !is_zero(x)).collect();
        for &(i, j, k) in &b.pairs[..b.pair_end[ord as usize]] {
            let (i, j) = (i as usize, j as usize);
            if nz_a[i] && nz_b[j] {
                T::mul_acc(&mut r.c[k as usize], &self.c[i], &o.c[j]);
            }
        }
        r
    }

    fn proto_mul(&self, o: &Self) -> T {
        T::mul_shape(&self.proto, &o.proto)
    }

    /// ∂/∂x_v; lowers the order by one.
    pub fn deriv(&self, v: usize) -> Self {
        let ord = self.order - 1;
        let mut r = Self::zero(self.nvar, ord, &self.proto);
        let b = basis(self.nvar);
        for i in 0..r.c.len() {
            let k = b.up[v][i] as usize;
            let f = (b.exps[i][v] + 1) as f64;
            r.c[i] = self.c[k].scale(c(f));
        }
        r
    }

    /// Antiderivative in x_v vanishing on x_v = 0; raises the order by one.
    pub fn integrate(&self, v: usize) -> Self {
        let ord = (self.order + 1).min(MAX_ORDER as i32);
        let mut r = Self::zero(self.nvar, ord, &self.proto);
        if self.order < 0 {
            return r.truncate(-1);
        }
        let b = basis(self.nvar);
        for i in 0..r.c.len() {
            let k = b.down[v][i];
            if k != u32::MAX && (k as usize) < self.c.len() {
                r.c[i] = self.c[k as usize].scale(c(1.0 / b.exps[i][v] as f64));
            }
        }
        r
    }

    /// Restriction to x_v = 0 (coefficients with a positive power of x_v dropped).
    pub fn restrict_zero(&self, v: usize) -> Self {
        let mut r = self.clone();
        let b = basis(self.nvar);
        for (i, x) in r.c.iter_mut().enumerate() {
            if b.exps[i][v] > 0 {
                *x = x.zero_like();
            }
        }
        r
    }

    /// Evaluate the truncated Taylor polynomial at a displacement.
    pub fn eval_at(&self, x: &[f64]) -> T {
        let b = basis(self.nvar);
        let mut acc = self.proto.zero_like();
        for (i, t) in self.c.iter().enumerate() {
            let mut w = 1.0;
            for (v, &p) in b.exps[i].iter().enumerate() {
                w *= x[v].powi(p as i32);
            }
            acc.add_assign_c(&t.scale(c(w)));
        }
        acc
    }

    pub fn map<U: Coef, F: Fn(&T) -> U>(&self, proto: &U, f: F) -> Jet<U> {
        Jet { nvar: self.nvar, order: self.order, c: self.c.iter().map(f).collect(), proto: proto.zero_like() }
    }

    pub fn norm_max(&self) -> f64 {
        self.c.iter().fold(0.0, |m, x| m.max(x.norm_max()))
    }

    /// Taylor coefficient index → exponent vector.
    pub fn exps(&self) -> &'static [Vec<u8>] {
        &basis(self.nvar).exps[..self.c.len()]
    }
}

pub fn sconst(nvar: usize, v: f64) -> SJet {
    SJet::constant(nvar, MAX_ORDER as i32, c(v))
}

/// The coordinate function x_v.
pub fn svar(nvar: usize, v: usize) -> SJet {
    let mut j = SJet::zero(nvar, MAX_ORDER as i32, &c(0.0));
    let mut e = vec![0u8; nvar];
    e[v] = 1;
    *j.coef_mut(&e).unwrap() = c(1.0);
    j
}

impl SJet {
    /// Power f^p for a jet with nonzero constant term (binomial series).
    pub fn powf(&self, p: f64) -> Result<Self> {
        let c0 = *self.value()?;
        if c0.norm() == 0.0 {
            return Err(Error::InvalidInput("power of a jet with vanishing value".into()));
        }
        let t = self.scale(c0.inv()).sub(&SJet::constant(self.nvar, self.order, c(1.0)));
        let mut sum = SJet::constant(self.nvar, self.order, c(1.0));
        let mut term = sum.clone();
        let mut coef = 1.0;
        for k in 1..=self.order.max(0) {
            coef *= (p - (k - 1) as f64) / k as f64;
            term = term.mul(&t);
            sum = sum.add(&term.scale(c(coef)));
        }
        Ok(sum.scale(c0.powf(p)))
    }

    pub fn inv(&self) -> Result<Self> {
        self.powf(-1.0)
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Self {
        let c0 = self.c.first().copied().unwrap_or(c(0.0));
        let t = self.sub(&SJet::constant(self.nvar, self.order, c0));
        let mut sum = SJet::constant(self.nvar, self.order, c(1.0));
        let mut term = sum.clone();
        for k in 1..=self.order.max(0) {
            term = term.mul(&t).scale(c(1.0 / k as f64));
            sum = sum.add(&term);
        }
        sum.scale(c0.exp())
    }

    pub fn ln(&self) -> Result<Self> {
        let c0 = *self.value()?;
        let t = self.scale(c0.inv()).sub(&SJet::constant(self.nvar, self.order, c(1.0)));
        let mut sum = SJet::constant(self.nvar, self.order, c0.ln());
        let mut term = SJet::constant(self.nvar, self.order, c(1.0));
        for k in 1..=self.order.max(0) {
            term = term.mul(&t);
            let s = if k % 2 == 1 { 1.0 } else { -1.0 };
            sum = sum.add(&term.scale(c(s / k as f64)));
        }
        Ok(sum)
    }

    pub fn re(&self) -> Self {
        self.map(&c(0.0), |z| c(z.re))
    }
}

/// Scalar jet times matrix jet.
pub fn smul(s: &SJet, m: &MJet) -> MJet {
    let ord = s.order.min(m.order);
    let mut r = MJet::zero(m.nvar, ord, &m.proto);
    if ord < 0 {
        return r;
    }
    let b = basis(m.nvar);
    for &(i, j, k) in &b.pairs[..b.pair_end[ord as usize]] {
        let sv = s.c[i as usize];
        if sv.norm() != 0.0 {
            let mj = &m.c[j as usize];
            r.c[k as usize] += mj * sv;
        }
    }
    r
}

impl MJet {
    pub fn dims(&self) -> (usize, usize) {
        (self.proto.nrows(), self.proto.ncols())
    }

    pub fn identity(nvar: usize, n: usize) -> Self {
        MJet::constant(nvar, MAX_ORDER as i32, eye(n))
    }

    pub fn from_const(nvar: usize, m: CMat) -> Self {
        MJet::constant(nvar, MAX_ORDER as i32, m)
    }

    /// Entry (i, j) as a scalar jet.
    pub fn entry(&self, i: usize, j: usize) -> SJet {
        self.map(&c(0.0), |m| m[(i, j)])
    }

    /// Assemble a matrix jet from scalar entry jets.
    pub fn from_entries(rows: usize, cols: usize, f: impl Fn(usize, usize) -> SJet) -> Self {
        let entries: Vec<Vec<SJet>> = (0..rows).map(|i| (0..cols).map(|j| f(i, j)).collect()).collect();
        let nvar = entries[0][0].nvar;
        let ord = entries.iter().flatten().map(|e| e.order).min().unwrap();
        let mut r = MJet::zero(nvar, ord, &CMat::zeros(rows, cols));
        for k in 0..r.c.len() {
            for i in 0..rows {
                for j in 0..cols {
                    r.c[k][(i, j)] = entries[i][j].c[k];
                }
            }
        }
        r
    }

    pub fn adjoint(&self) -> Self {
        let p = self.proto.adjoint();
        self.map(&p, |m| m.adjoint())
    }

    pub fn transpose(&self) -> Self {
        let p = self.proto.transpose();
        self.map(&p, |m| m.transpose())
    }

    pub fn trace(&self) -> SJet {
        self.map(&c(0.0), |m| m.diagonal().iter().sum())
    }

    /// Left/right multiplication by a constant matrix.
    pub fn lmul_const(&self, a: &CMat) -> Self {
        let p = a * &self.proto;
        self.map(&p, |m| a * m)
    }

    pub fn rmul_const(&self, a: &CMat) -> Self {
        let p = &self.proto * a;
        self.map(&p, |m| m * a)
    }

    /// Matrix inverse (requires invertible value).
    pub fn inverse(&self) -> Result<Self> {
        let a0 = self.value()?.clone();
        let inv0 = a0.try_inverse().ok_or_else(|| Error::InvalidInput("singular matrix jet".into()))?;
        // X = A0⁻¹ Σ_k (−N A0⁻¹)^k with N = A − A0 nilpotent
        let n = self.sub(&MJet::constant(self.nvar, self.order, self.c[0].clone()));
        let na = n.rmul_const(&inv0).neg();
        let mut sum = MJet::constant(self.nvar, self.order, eye(self.proto.nrows()));
        let mut term = sum.clone();
        for _ in 0..self.order.max(0) {
            term = term.mul(&na);
            sum = sum.add(&term);
        }
        Ok(sum.lmul_const(&inv0))
    }

    /// Exponential of a matrix jet with vanishing value.
    pub fn exp_nilpotent(&self) -> Self {
        let n = self.proto.nrows();
        let mut sum = MJet::constant(self.nvar, self.order, eye(n));
        let mut term = sum.clone();
        for k in 1..=self.order.max(0) {
            term = term.mul(self).scale(c(1.0 / k as f64));
            sum = sum.add(&term);
        }
        sum
    }

    /// Symmetric positive square root of a Hermitian positive definite matrix jet.
    pub fn spd_sqrt(&self) -> Result<Self> {
        let a0 = self.value()?.clone();
        let eig = a0.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let u = eig.eigenvectors.clone();
        let lam: Vec<f64> = eig.eigenvalues.iter().map(|l| l.sqrt()).collect();
        let s0 = &u * CMat::from_diagonal(&nalgebra::DVector::from_iterator(lam.len(), lam.iter().map(|&l| c(l)))) * u.adjoint();
        let dim = a0.nrows();
        let mut s = MJet::constant(self.nvar, self.order, s0);
        // Newton-free order-by-order: s0·x_α + x_α·s0 = a_α − Σ_{β,γ≠0} s_β s_γ
        let b = basis(self.nvar);
        for k in 1..s.c.len() {
            let mut rhs = self.c[k].clone();
            let deg_k: usize = b.exps[k].iter().map(|&x| x as usize).sum();
            for &(i, j, kk) in &b.pairs[..b.pair_end[deg_k]] {
                if kk as usize == k && i != 0 && j != 0 {
                    rhs -= &s.c[i as usize] * &s.c[j as usize];
                }
            }
            let r = u.adjoint() * rhs * &u;
            let x = CMat::from_fn(dim, dim, |p, q| r[(p, q)] / c(lam[p] + lam[q]));
            s.c[k] = &u * x * u.adjoint();
        }
        Ok(s)
    }
}
