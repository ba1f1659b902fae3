//! Boundary determination: metric, mean curvature, trace-free second
//! fundamental form and connection at x₀ from the θ-symbol.
//!
//! Recovery is pointwise at x₀. Once lower orders are fixed, each new unknown
//! enters one θ component linearly. We evaluate θ at covectors, subtract the θ
//! of a candidate jet assembled from what is already known (the unknown set to
//! zero), and fit the difference against the closed-form response of that
//! unknown. Tangential derivatives of already-determined quantities are taken
//! from a prior jet, mirroring the fact that they are known on a neighbourhood
//! of x₀; the x₀ values along the normal line are never read from the prior.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::clifford::{chiral_projectors, chiral_trace, spinor_projectors, GammaRep};
use crate::geometry::{extrinsic_data, frame_jets, BoundaryJet};
use crate::jet::{MJet, SJet};
use crate::linalg::{c, kron, I};
use crate::symbol_engine::{forward, sample_directions, SymbolCtx, SymbolData, SymbolSeries};
use crate::{CMat, Error, RMat, Result, C64};

/// Relative rank threshold for the extraction systems.
const RANK_TOL: f64 = 1e-10;

/// Anything that evaluates θ-components at x₀ for a given covector.
pub trait ThetaSource {
    fn n(&self) -> usize;
    /// Twisted fibre dimension N_S·N_E.
    fn size(&self) -> usize;
    /// Lowest available degree.
    fn lowest(&self) -> i32;
    /// θ_degree(x₀, ξ).
    fn eval_x0(&self, degree: i32, xi: &[f64]) -> Result<CMat>;
    /// θ_degree(·, ξ) as a jet in the tangential variables.
    fn eval_jet(&self, degree: i32, _xi: &[f64]) -> Result<MJet> {
        Err(Error::Unsupported(format!("tangential jets of θ_{degree} are not available from this source")))
    }
}

/// θ given as a symbolic series.
#[derive(Clone, Debug)]
pub struct SeriesSource {
    pub ctx: SymbolCtx,
    pub series: SymbolSeries,
}

impl SeriesSource {
    pub fn new(data: &SymbolData, series: SymbolSeries) -> Self {
        SeriesSource { ctx: data.ctx.on_boundary(), series }
    }

    /// θ down to degree −k for `jet`, in the default or the parallel-at-x₀ frame.
    pub fn forward(jet: &BoundaryJet, rep: &GammaRep, k: usize, parallel_at_x0: bool) -> Result<Self> {
        let (data, _, theta) = forward(jet, rep, k, parallel_at_x0)?;
        Ok(Self::new(&data, theta))
    }

    /// L θ R, e.g. a constant gauge change (I ⊗ U) θ (I ⊗ U*).
    pub fn conjugated(&self, left: &CMat, right: &CMat) -> Self {
        SeriesSource { ctx: self.ctx.clone(), series: self.series.block(left, right) }
    }
}

impl ThetaSource for SeriesSource {
    fn n(&self) -> usize {
        self.ctx.n
    }
    fn size(&self) -> usize {
        self.ctx.size
    }
    fn lowest(&self) -> i32 {
        self.series.lowest()
    }
    fn eval_x0(&self, degree: i32, xi: &[f64]) -> Result<CMat> {
        self.component(degree)?.eval_x0(&self.ctx, xi)
    }
    fn eval_jet(&self, degree: i32, xi: &[f64]) -> Result<MJet> {
        self.component(degree)?.eval(&self.ctx, xi)
    }
}

impl SeriesSource {
    fn component(&self, degree: i32) -> Result<&crate::symbol_engine::Component> {
        self.series.get(degree).ok_or_else(|| Error::InsufficientOrder {
            what: format!("θ_{degree} is not in the series"),
            needed: (-degree).max(0) as usize,
            available: (-self.series.lowest()).max(0) as usize,
        })
    }
}

/// Lossless JSON form of a [`SeriesSource`]: the symbol series with its tangential jets and
/// the boundary quadratic form. Matrices are row-major [re, im] pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesSourceFile {
    pub n: usize,
    pub size: usize,
    pub top: i32,
    pub form: Vec<JetTermFile>,
    pub components: Vec<JetComponentFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JetComponentFile {
    pub degree: i32,
    pub terms: Vec<JetTermFile>,
}

/// One term ξ^xi |ξ|^norm_power · (jet), the jet stored as Taylor coefficients in graded order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JetTermFile {
    #[serde(default)]
    pub norm_power: i32,
    pub xi: Vec<u8>,
    pub nvar: usize,
    pub order: i32,
    pub coefs: Vec<Vec<[f64; 2]>>,
}

fn pairs(m: &CMat) -> Vec<[f64; 2]> {
    m.transpose().iter().map(|z| [z.re, z.im]).collect()
}

fn jet_from_pairs(t: &JetTermFile, rows: usize) -> Result<MJet> {
    let mut j = MJet::zero(t.nvar, t.order, &CMat::zeros(rows, rows));
    if t.coefs.len() != j.c.len() {
        return Err(Error::Parse(format!("jet of order {} in {} variables needs {} coefficients, got {}", t.order, t.nvar, j.c.len(), t.coefs.len())));
    }
    for (slot, v) in j.c.iter_mut().zip(&t.coefs) {
        if v.len() != rows * rows {
            return Err(Error::Parse(format!("coefficient needs {} entries, got {}", rows * rows, v.len())));
        }
        *slot = CMat::from_row_iterator(rows, rows, v.iter().map(|p| C64::new(p[0], p[1])));
    }
    Ok(j)
}

impl SeriesSource {
    pub fn to_file(&self) -> SeriesSourceFile {
        let form = self
            .ctx
            .q
            .terms
            .iter()
            .map(|(e, j)| JetTermFile { norm_power: 0, xi: e.clone(), nvar: j.nvar, order: j.order, coefs: j.c.iter().map(|z| vec![[z.re, z.im]]).collect() })
            .collect();
        let components = self
            .series
            .comps
            .iter()
            .map(|comp| JetComponentFile {
                degree: comp.degree,
                terms: comp
                    .terms
                    .iter()
                    .flat_map(|(&np, poly)| {
                        poly.terms.iter().map(move |(e, j)| JetTermFile { norm_power: np, xi: e.clone(), nvar: j.nvar, order: j.order, coefs: j.c.iter().map(pairs).collect() })
                    })
                    .collect(),
            })
            .collect();
        SeriesSourceFile { n: self.ctx.n, size: self.ctx.size, top: self.series.top, form, components }
    }

    pub fn from_file(f: &SeriesSourceFile) -> Result<Self> {
        if f.n < 2 || f.size == 0 {
            return Err(Error::Parse("series file needs n >= 2 and a nonzero fibre size".into()));
        }
        let m = f.n - 1;
        let mut q = crate::symbol_engine::SPoly::zero(m);
        for t in &f.form {
            if t.xi.len() != m {
                return Err(Error::Parse(format!("form exponent {:?} needs {m} entries", t.xi)));
            }
            let mj = jet_from_pairs(t, 1)?;
            let mut sj = SJet::zero(t.nvar, t.order, &C64::new(0.0, 0.0));
            for (a, b) in sj.c.iter_mut().zip(&mj.c) {
                *a = b[(0, 0)];
            }
            q.terms.insert(t.xi.clone(), sj);
        }
        let ctx = SymbolCtx::with_form(f.n, f.size, q);
        let mut series = SymbolSeries::new(f.top);
        for (i, cf) in f.components.iter().enumerate() {
            if cf.degree != f.top - i as i32 {
                return Err(Error::Parse(format!("component {i} has degree {}, expected {}", cf.degree, f.top - i as i32)));
            }
            let mut comp = crate::symbol_engine::Component::zero(cf.degree);
            for t in &cf.terms {
                if t.xi.len() != m {
                    return Err(Error::Parse(format!("exponent {:?} needs {m} entries", t.xi)));
                }
                let j = jet_from_pairs(t, f.size)?;
                comp.terms.entry(t.norm_power).or_insert_with(|| crate::symbol_engine::MPoly::zero(m)).terms.insert(t.xi.clone(), j);
            }
            series.push(comp);
        }
        Ok(SeriesSource { ctx, series })
    }
}

/// Even and odd parts under ξ ↦ −ξ at x₀.
pub fn parity_parts(src: &dyn ThetaSource, degree: i32, xi: &[f64]) -> Result<(CMat, CMat)> {
    let p = src.eval_x0(degree, xi)?;
    let neg: Vec<f64> = xi.iter().map(|x| -x).collect();
    let q = src.eval_x0(degree, &neg)?;
    Ok(((&p + &q) * c(0.5), (&p - &q) * c(0.5)))
}

fn need_degree(src: &dyn ThetaSource, degree: i32) -> Result<()> {
    if src.lowest() > degree {
        return Err(Error::InsufficientOrder {
            what: format!("θ_{degree} is required"),
            needed: (-degree) as usize,
            available: (-src.lowest()).max(0) as usize,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// small linear algebra

fn re(m: &CMat) -> RMat {
    m.map(|z| z.re)
}

fn cx(m: &RMat) -> CMat {
    m.map(c)
}

fn rmax(m: &RMat) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

fn cmax(m: &CMat) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.norm()))
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn spd_inv_sqrt(g: &RMat) -> Result<RMat> {
    let s = crate::linalg::spd_sqrt(g).ok_or(Error::NotPositiveDefinite)?;
    s.try_inverse().ok_or(Error::NotPositiveDefinite)
}

fn inverse(g: &RMat) -> Result<RMat> {
    g.clone().try_inverse().ok_or(Error::NotPositiveDefinite)
}

/// Least squares a·x = b (columns of b are right-hand sides) with a rank check.
fn lstsq(a: &RMat, b: &RMat, what: &str) -> Result<RMat> {
    if a.nrows() < a.ncols() {
        return Err(Error::RankDeficient(format!("{what}: {} equations for {} unknowns", a.nrows(), a.ncols())));
    }
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax == 0.0 || smin < RANK_TOL * smax {
        return Err(Error::RankDeficient(format!("{what}: singular value ratio {:.3e}", smin / smax.max(f64::MIN_POSITIVE))));
    }
    svd.solve(b, 0.0).map_err(|e| Error::RankDeficient(format!("{what}: {e}")))
}

/// Real coefficients x_j with Σ_j x_j R_j(s) ≈ T(s) for every sample s.
/// Returns the coefficients and the max entrywise residual.
fn fit_responses(responses: &[Vec<CMat>], targets: &[CMat], what: &str) -> Result<(Vec<f64>, f64)> {
    let np = responses.first().map(|r| r.len()).unwrap_or(0);
    let entries = targets.first().map(|t| t.len()).unwrap_or(0);
    let rows = targets.len() * entries * 2;
    let mut a = RMat::zeros(rows, np);
    let mut b = RMat::zeros(rows, 1);
    for (s, (resp, t)) in responses.iter().zip(targets).enumerate() {
        for e in 0..entries {
            let r0 = (s * entries + e) * 2;
            for (j, rj) in resp.iter().enumerate() {
                a[(r0, j)] = rj[e].re;
                a[(r0 + 1, j)] = rj[e].im;
            }
            b[(r0, 0)] = t[e].re;
            b[(r0 + 1, 0)] = t[e].im;
        }
    }
    let x = lstsq(&a, &b, what)?;
    let res = rmax(&(&a * &x - &b));
    Ok((x.column(0).iter().cloned().collect(), res))
}

/// Index pairs α ≤ β and their weights in T^{αβ}ξ_αξ_β.
fn quad_pairs(d: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for a in 0..d {
        for b in a..d {
            out.push((a, b, if a == b { 1.0 } else { 2.0 }));
        }
    }
    out
}

/// Matrix-valued symmetric quadratic form T with T^{αβ}ξ_αξ_β ≈ value(ξ).
fn fit_quadratic(xis: &[Vec<f64>], values: &[CMat], what: &str) -> Result<(Vec<Vec<CMat>>, f64)> {
    let d = xis[0].len();
    let pairs = quad_pairs(d);
    let (r, cc) = values[0].shape();
    let mut a = RMat::zeros(xis.len(), pairs.len());
    for (s, xi) in xis.iter().enumerate() {
        for (j, &(p, q, w)) in pairs.iter().enumerate() {
            a[(s, j)] = w * xi[p] * xi[q];
        }
    }
    let mut b = RMat::zeros(xis.len(), 2 * r * cc);
    for (s, v) in values.iter().enumerate() {
        for (e, z) in v.iter().enumerate() {
            b[(s, 2 * e)] = z.re;
            b[(s, 2 * e + 1)] = z.im;
        }
    }
    let x = lstsq(&a, &b, what)?;
    let res = rmax(&(&a * &x - &b));
    let mut t = vec![vec![CMat::zeros(r, cc); d]; d];
    for (j, &(p, q, _)) in pairs.iter().enumerate() {
        let mut m = CMat::zeros(r, cc);
        for e in 0..r * cc {
            m[e] = C64::new(x[(j, 2 * e)], x[(j, 2 * e + 1)]);
        }
        t[p][q] = m.clone();
        t[q][p] = m;
    }
    Ok((t, res))
}

fn contract(t: &[Vec<CMat>], g: &RMat) -> CMat {
    let mut acc = CMat::zeros(t[0][0].nrows(), t[0][0].ncols());
    for (a, row) in t.iter().enumerate() {
        for (b, m) in row.iter().enumerate() {
            acc += m * c(g[(a, b)]);
        }
    }
    acc
}

/// Sample covectors on the unit sphere of the inverse metric `ginv`.
pub fn unit_covectors(ginv: &RMat, count: usize) -> Vec<Vec<f64>> {
    sample_directions(ginv.nrows(), count)
        .into_iter()
        .map(|raw| {
            let v = DVector::from_column_slice(&raw);
            let q = (v.transpose() * ginv * &v)[(0, 0)];
            raw.iter().map(|x| x / q.sqrt()).collect()
        })
        .collect()
}

/// Real basis of anti-Hermitian N×N matrices.
fn anti_hermitian_basis(nn: usize) -> Vec<CMat> {
    let mut out = Vec::new();
    for p in 0..nn {
        let mut m = CMat::zeros(nn, nn);
        m[(p, p)] = I;
        out.push(m);
        for q in p + 1..nn {
            let mut m = CMat::zeros(nn, nn);
            m[(p, q)] = c(1.0);
            m[(q, p)] = c(-1.0);
            out.push(m);
            let mut m = CMat::zeros(nn, nn);
            m[(p, q)] = I;
            m[(q, p)] = I;
            out.push(m);
        }
    }
    out
}

/// Basis of symmetric matrices modulo the direction of `g0`.
fn tracefree_basis(g0: &RMat) -> Result<Vec<RMat>> {
    let d = g0.nrows();
    let ginv = inverse(g0)?;
    let mut out = Vec::new();
    for (a, b, _) in quad_pairs(d) {
        if a == d - 1 && b == d - 1 {
            continue;
        }
        let mut e = RMat::zeros(d, d);
        e[(a, b)] = 1.0;
        e[(b, a)] = 1.0;
        let tr = (&ginv * &e).trace();
        out.push(e - g0 * (tr / d as f64));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// normal data at x₀

/// Normal derivatives at x₀ of the metric, mean curvature, trace-free second
/// fundamental form and connection.
#[derive(Clone, Debug)]
pub struct NormalData {
    pub n: usize,
    pub e_rank: usize,
    /// ∂ₙʲ g(x₀).
    pub g: Vec<RMat>,
    /// ∂_α g(x₀).
    pub dg_tangential: Vec<RMat>,
    /// ∂ₙʲ H(x₀).
    pub h: Vec<f64>,
    /// ∂ₙʲ Σ(x₀).
    pub sigma: Vec<RMat>,
    /// a[j][α] = ∂ₙʲ A_α(x₀).
    pub a: Vec<Vec<CMat>>,
}

fn normal_exp(n: usize, j: usize) -> Vec<u8> {
    let mut e = vec![0u8; n];
    e[n - 1] = j as u8;
    e
}

impl NormalData {
    /// Read the normal-line values off a jet of order K: g and A through
    /// order K, H and Σ through order K − 1.
    pub fn from_jet(jet: &BoundaryJet) -> Result<Self> {
        let n = jet.n;
        let d = n - 1;
        let k = jet.order;
        let zero = vec![0u8; d];
        let g = (0..=k).map(|j| re(&jet.g_deriv(&zero, j as u8).expect("order checked"))).collect();
        let a = (0..=k).map(|j| (0..d).map(|al| jet.a_deriv(al, &zero, j as u8).expect("order checked")).collect()).collect();
        let dg_tangential = if k >= 1 {
            (0..d)
                .map(|al| {
                    let mut e = zero.clone();
                    e[al] = 1;
                    re(&jet.g_deriv(&e, 0).expect("order checked"))
                })
                .collect()
        } else {
            Vec::new()
        };
        let (mut h, mut sigma) = (Vec::new(), Vec::new());
        if k >= 1 {
            let ext = extrinsic_data(jet)?;
            for j in 0..k {
                let e = normal_exp(n, j);
                h.push(ext.h.coef(&e).map(|z| z.re).unwrap_or(0.0) * factorial(j));
                sigma.push(re(&ext.sigma.coef(&e).cloned().unwrap_or_else(|| CMat::zeros(d, d))) * factorial(j));
            }
        }
        Ok(NormalData { n, e_rank: jet.e_rank, g, dg_tangential, h, sigma, a })
    }
}

/// ∂ₙʲ(g⁻¹)(x₀) from ∂ₙʲ g(x₀).
fn inverse_normal_derivs(g: &[RMat]) -> Result<Vec<RMat>> {
    let g0inv = inverse(&g[0])?;
    let mut y = vec![g0inv.clone()];
    for j in 1..g.len() {
        let mut s = RMat::zeros(g[0].nrows(), g[0].ncols());
        for i in 1..=j {
            s += &g[i] * &y[j - i] * binom(j, i);
        }
        y.push(-&g0inv * s);
    }
    Ok(y)
}

/// ∂ₙ^{j+1} g(x₀) = −2 ∂ₙʲ(Σ + H g)(x₀); `h` entries beyond its length count as zero.
fn metric_next(g: &[RMat], h: &[f64], sigma_j: &RMat, j: usize) -> RMat {
    let mut s = sigma_j.clone();
    for i in 0..=j {
        let hi = h.get(i).copied().unwrap_or(0.0);
        s += &g[j - i] * (binom(j, i) * hi);
    }
    s * -2.0
}

/// The g(x₀)-trace part of ∂ₙʲΣ(x₀) forced by tr(g⁻¹Σ) ≡ 0, as a multiple of g(x₀).
fn forced_sigma_trace(g: &[RMat], sigma: &[RMat], j: usize) -> Result<RMat> {
    let y = inverse_normal_derivs(&g[..=j])?;
    let d = g[0].nrows();
    let mut tr = 0.0;
    for i in 1..=j {
        tr -= binom(j, i) * (&y[i] * &sigma[j - i]).trace();
    }
    Ok(&g[0] * (tr / d as f64))
}

/// Replace the x₀ normal-line coefficients of `prior` (truncated to `order`)
/// by the given normal derivatives; missing entries become zero.
fn with_normal_line(prior: &BoundaryJet, m: f64, g: &[RMat], a: &[Vec<CMat>], order: usize) -> Result<BoundaryJet> {
    if prior.order < order {
        return Err(Error::InsufficientOrder { what: "prior jet for tangential data".into(), needed: order, available: prior.order });
    }
    let n = prior.n;
    let d = n - 1;
    let ne = prior.e_rank;
    let mut gj = prior.g.truncate(order as i32);
    let mut aj: Vec<MJet> = prior.a.iter().map(|x| x.truncate(order as i32)).collect();
    for j in 0..=order {
        let e = normal_exp(n, j);
        let f = factorial(j);
        *gj.coef_mut(&e).expect("within order") = g.get(j).map(|x| cx(x) * c(1.0 / f)).unwrap_or_else(|| CMat::zeros(d, d));
        for (al, x) in aj.iter_mut().enumerate() {
            *x.coef_mut(&e).expect("within order") = a.get(j).map(|v| &v[al] * c(1.0 / f)).unwrap_or_else(|| CMat::zeros(ne, ne));
        }
    }
    BoundaryJet::new(n, ne, m, gj, aj)
}

/// Copy of `jet` whose x₀ normal-line data is erased (g(x₀) = I, all normal
/// derivatives and A along the normal line zero). Tangential data is kept.
pub fn scrub_normal_line(jet: &BoundaryJet) -> BoundaryJet {
    let mut out = jet.clone();
    let n = jet.n;
    for j in 0..=jet.order {
        let e = normal_exp(n, j);
        if let Some(x) = out.g.coef_mut(&e) {
            *x = if j == 0 { crate::linalg::eye(n - 1) } else { CMat::zeros(n - 1, n - 1) };
        }
        for aj in out.a.iter_mut() {
            if let Some(x) = aj.coef_mut(&e) {
                *x = CMat::zeros(jet.e_rank, jet.e_rank);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// results

/// How a recovered quantity was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Determination {
    Determined,
    Prescribed,
    /// Known only up to a constant conformal factor.
    UpToConformalFactor,
    Undetermined,
}

/// Conformal class of g(x′, 0) near x₀, normalized so that ḡ^{11} = 1.
#[derive(Clone, Debug)]
pub struct ConformalClass {
    /// Representative ḡ_{αβ} as a tangential jet.
    pub gbar: MJet,
    /// Angle cosines g^{αβ}/(|e^α||e^β|) at x₀.
    pub cosines: RMat,
}

impl ConformalClass {
    pub fn gbar_x0(&self) -> RMat {
        re(&self.gbar.c[0])
    }

    /// ∂_α ḡ(x₀).
    pub fn gbar_deriv(&self, alpha: usize) -> RMat {
        let mut e = vec![0u8; self.gbar.nvar];
        e[alpha] = 1;
        self.gbar.coef(&e).map(re).unwrap_or_else(|| RMat::zeros(self.gbar.dims().0, self.gbar.dims().0))
    }

    /// Max difference of the normalized representatives through first order.
    pub fn distance(&self, o: &ConformalClass) -> f64 {
        let d = self.gbar.dims().0;
        let mut m = rmax(&(self.gbar_x0() - o.gbar_x0()));
        for al in 0..d {
            m = m.max(rmax(&(self.gbar_deriv(al) - o.gbar_deriv(al))));
        }
        m
    }
}

/// Output of the order-zero step.
#[derive(Clone, Debug)]
pub struct Order0 {
    pub class: ConformalClass,
    pub g0: RMat,
    pub dg_tangential: Vec<RMat>,
    /// e^u with g = e^{2u} ḡ, when determined.
    pub e_u: Option<f64>,
    /// ∂_α u.
    pub du: Vec<f64>,
    pub a0: Vec<CMat>,
    /// True when m = 0 and no boundary metric was prescribed.
    pub ambiguous: bool,
    pub residual: f64,
    /// Deviation of the Hermitian part of 𝒬_α = ½(n−1)(n−2)∂_αu·I from a multiple of the identity.
    pub hermitian_defect: f64,
}

/// Frame-dependent term of the n = 4 trace identity, recorded per step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpsilonDiagnostic {
    /// Normal order j of ∂ₙʲΥ(x₀).
    pub order: usize,
    /// Tr_{𝕍⁺}(γ¹γ²γ³)·N_E as measured on the representation.
    pub trace_constant: [f64; 2],
    /// ∂ₙʲΥ(x₀) of the candidate in the default frame.
    pub default_frame: f64,
    /// ∂ₙʲΥ(x₀) of the candidate in the parallel-at-x₀ frame.
    pub parallel_frame: f64,
    /// Change of ∂ₙʲΥ(x₀) between the trace-stage candidate and the final one.
    /// The Υ term enters the trace as constant × this shift.
    pub candidate_shift: f64,
}

/// Options for the recovery driver.
#[derive(Clone, Debug)]
pub struct RecoveryOptions {
    /// Covectors per fit.
    pub samples: usize,
    /// Boundary metric jet to use when m = 0.
    pub prescribed_metric: Option<MJet>,
    /// ∂ₙʲH(x₀), j = 0, 1, …, to use when m = 0.
    pub prescribed_h: Option<Vec<f64>>,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions { samples: 16, prescribed_metric: None, prescribed_h: None }
    }
}

/// Recovered normal jets at x₀ with per-order determination flags.
#[derive(Clone, Debug)]
pub struct RecoveredJets {
    pub n: usize,
    pub e_rank: usize,
    pub m: f64,
    /// ∂ₙʲ g(x₀).
    pub g: Vec<RMat>,
    pub g_flags: Vec<Determination>,
    pub dg_tangential: Vec<RMat>,
    /// ∂ₙʲ H(x₀).
    pub h: Vec<f64>,
    pub h_flags: Vec<Determination>,
    /// ∂ₙʲ Σ(x₀).
    pub sigma: Vec<RMat>,
    pub sigma_flags: Vec<Determination>,
    /// a[j][α] = ∂ₙʲ A_α(x₀) in the A_n = 0 gauge.
    pub a: Vec<Vec<CMat>>,
    pub a_flags: Vec<Determination>,
    pub conformal: Option<ConformalClass>,
    pub conformal_note: Option<String>,
    /// ∂ₙʲ g(x₀) read directly from the full trace form, j ≥ 1, where available.
    pub dg_direct: Vec<Option<RMat>>,
    pub upsilon: Vec<UpsilonDiagnostic>,
    /// (step, max residual) of every fit.
    pub residuals: Vec<(String, f64)>,
}

impl RecoveredJets {
    fn empty(n: usize, e_rank: usize, m: f64) -> Self {
        RecoveredJets {
            n,
            e_rank,
            m,
            g: Vec::new(),
            g_flags: Vec::new(),
            dg_tangential: Vec::new(),
            h: Vec::new(),
            h_flags: Vec::new(),
            sigma: Vec::new(),
            sigma_flags: Vec::new(),
            a: Vec::new(),
            a_flags: Vec::new(),
            conformal: None,
            conformal_note: None,
            dg_direct: Vec::new(),
            upsilon: Vec::new(),
            residuals: Vec::new(),
        }
    }

    /// Max over orders of |∂ₙʲ tr(g⁻¹Σ)(x₀)|.
    pub fn sigma_trace_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        let Ok(y) = inverse_normal_derivs(&self.g) else { return f64::INFINITY };
        for j in 0..self.sigma.len().min(self.g.len()) {
            let mut tr = 0.0;
            for i in 0..=j {
                tr += binom(j, i) * (&y[i] * &self.sigma[j - i]).trace();
            }
            worst = worst.max(tr.abs());
        }
        worst
    }

    /// Max difference between ∂ₙg recomputed from H and Σ, and both the stored
    /// and the directly read ∂ₙg.
    pub fn consistency_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..self.h.len() {
            if j + 1 >= self.g.len() || j >= self.sigma.len() {
                break;
            }
            let next = metric_next(&self.g, &self.h, &self.sigma[j], j);
            worst = worst.max(rmax(&(&next - &self.g[j + 1])));
            if let Some(Some(direct)) = self.dg_direct.get(j + 1) {
                worst = worst.max(rmax(&(&next - direct)));
            }
        }
        worst
    }

    /// Max over recovered tensors of |recovered − truth| / max(|truth|, 1).
    pub fn max_relative_error(&self, truth: &NormalData) -> f64 {
        let rel = |x: f64, scale: f64| x / scale.max(1.0);
        let mut worst = 0.0_f64;
        for (j, g) in self.g.iter().enumerate() {
            if let Some(t) = truth.g.get(j) {
                worst = worst.max(rel(rmax(&(g - t)), rmax(t)));
            }
        }
        for (al, g) in self.dg_tangential.iter().enumerate() {
            if let Some(t) = truth.dg_tangential.get(al) {
                worst = worst.max(rel(rmax(&(g - t)), rmax(t)));
            }
        }
        for (j, h) in self.h.iter().enumerate() {
            if let Some(t) = truth.h.get(j) {
                worst = worst.max(rel((h - t).abs(), t.abs()));
            }
        }
        for (j, s) in self.sigma.iter().enumerate() {
            if let Some(t) = truth.sigma.get(j) {
                worst = worst.max(rel(rmax(&(s - t)), rmax(t)));
            }
        }
        for (j, a) in self.a.iter().enumerate() {
            if let Some(t) = truth.a.get(j) {
                for (x, y) in a.iter().zip(t) {
                    worst = worst.max(rel(cmax(&(x - y)), cmax(y)));
                }
            }
        }
        worst
    }

    /// Conjugate every connection jet by a constant unitary.
    pub fn gauge_conjugate(&self, u: &CMat) -> Self {
        let mut out = self.clone();
        for aj in out.a.iter_mut() {
            for x in aj.iter_mut() {
                *x = u * &*x * u.adjoint();
            }
        }
        out
    }

    pub fn to_file(&self) -> RecoveredFile {
        let rm = |m: &RMat| (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect();
        let cm = |m: &CMat| (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect();
        RecoveredFile {
            n: self.n,
            e_rank: self.e_rank,
            m: self.m,
            g: self.g.iter().map(rm).collect(),
            g_flags: self.g_flags.clone(),
            dg_tangential: self.dg_tangential.iter().map(rm).collect(),
            h: self.h.clone(),
            h_flags: self.h_flags.clone(),
            sigma: self.sigma.iter().map(rm).collect(),
            sigma_flags: self.sigma_flags.clone(),
            a: self.a.iter().map(|v| v.iter().map(cm).collect()).collect(),
            a_flags: self.a_flags.clone(),
            conformal_cosines: self.conformal.as_ref().map(|cc| rm(&cc.cosines)),
            conformal_note: self.conformal_note.clone(),
            upsilon: self.upsilon.clone(),
            residuals: self.residuals.clone(),
            sigma_trace_defect: self.sigma_trace_defect(),
            consistency_defect: self.consistency_defect(),
        }
    }
}

/// JSON form of [`RecoveredJets`]. Matrices are row-major; complex entries are [re, im].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveredFile {
    pub n: usize,
    pub e_rank: usize,
    pub m: f64,
    pub g: Vec<Vec<Vec<f64>>>,
    pub g_flags: Vec<Determination>,
    pub dg_tangential: Vec<Vec<Vec<f64>>>,
    pub h: Vec<f64>,
    pub h_flags: Vec<Determination>,
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub sigma_flags: Vec<Determination>,
    pub a: Vec<Vec<Vec<Vec<[f64; 2]>>>>,
    pub a_flags: Vec<Determination>,
    pub conformal_cosines: Option<Vec<Vec<f64>>>,
    pub conformal_note: Option<String>,
    pub upsilon: Vec<UpsilonDiagnostic>,
    pub residuals: Vec<(String, f64)>,
    pub sigma_trace_defect: f64,
    pub consistency_defect: f64,
}

// ---------------------------------------------------------------------------
// order zero

/// Unit vector v_b(ξ) = 2i Tr(γ^b γⁿ θ₀(ξ)) / N, b = 1..n−1, as tangential jets.
pub fn frame_vector(src: &dyn ThetaSource, rep: &GammaRep, xi: &[f64]) -> Result<Vec<SJet>> {
    let n = rep.n;
    let th = src.eval_jet(0, xi)?;
    let gn = rep.tgamma(n);
    let s = c(2.0 / src.size() as f64) * I;
    Ok((1..n).map(|b| th.lmul_const(&(rep.tgamma(b) * &gn)).trace().scale(s).re()).collect())
}

fn dot(u: &[SJet], v: &[SJet]) -> SJet {
    let mut acc = u[0].mul(&v[0]);
    for (a, b) in u.iter().zip(v).skip(1) {
        acc = acc.add(&a.mul(b));
    }
    acc
}

/// Conformal class of the boundary metric from angles between the vectors v(ξ).
pub fn conformal_class(src: &dyn ThetaSource, rep: &GammaRep) -> Result<ConformalClass> {
    let n = rep.n;
    if n < 3 {
        return Err(Error::Unsupported("conformal class needs n >= 3".into()));
    }
    let d = n - 1;
    let e = |a: usize| {
        let mut v = vec![0.0; d];
        v[a] = 1.0;
        v
    };
    let v: Vec<Vec<SJet>> = (0..d).map(|a| frame_vector(src, rep, &e(a))).collect::<Result<_>>()?;
    let gram: Vec<Vec<SJet>> = (0..d).map(|a| (0..d).map(|b| dot(&v[a], &v[b])).collect()).collect();
    let mut t = vec![crate::jet::sconst(n, 1.0)];
    for al in 1..d {
        let mut w = e(0);
        w[al] = 1.0;
        let vw = frame_vector(src, rep, &w)?;
        let rho = dot(&v[al], &vw).mul(&dot(&v[0], &vw).inv()?);
        let g1a = &gram[0][al];
        let one = crate::jet::sconst(n, 1.0);
        let num = rho.sub(g1a);
        let den = one.sub(&rho.mul(g1a));
        t.push(num.mul(&den.inv()?));
    }
    let ginv_bar = MJet::from_entries(d, d, |a, b| gram[a][b].mul(&t[a]).mul(&t[b]));
    let gbar = ginv_bar.inverse()?;
    let cosines = RMat::from_fn(d, d, |a, b| gram[a][b].c[0].re);
    Ok(ConformalClass { gbar, cosines })
}

/// Order-zero recovery from θ₀ and θ₋₁ in the default frame: conformal class,
/// conformal factor (m ≠ 0), its tangential gradient, and A(x₀).
pub fn recover_order0(src: &dyn ThetaSource, reference_metric: Option<&MJet>, rep: &GammaRep, m: f64, samples: usize) -> Result<Order0> {
    let n = rep.n;
    if n < 3 {
        return Err(Error::Unsupported("order-zero recovery for n = 2 is handled by recover_n2".into()));
    }
    need_degree(src, -1)?;
    let d = n - 1;
    let ne = rep.e_rank;
    let size = rep.size();
    let r = size as f64 / 2.0;
    let class = conformal_class(src, rep)?;
    let gbar0 = class.gbar_x0();
    if let Some(pm) = reference_metric {
        let pinv = pm.inverse()?;
        let pn = ConformalClass { gbar: crate::jet::smul(&pinv.entry(0, 0), pm), cosines: RMat::zeros(d, d) };
        let dist = pn.distance(&class);
        if dist > 1e-6 * (1.0 + rmax(&gbar0)) {
            return Err(Error::InvalidInput(format!("prescribed metric is not in the recovered conformal class (defect {dist:.3e})")));
        }
    }

    // reference remainder: ḡ to first order, constant in xⁿ, no connection, no mass
    let gb = class.gbar.truncate(1);
    let zero_a = vec![MJet::zero(n, 1, &CMat::zeros(ne, ne)); d];
    let gb_jet = BoundaryJet::new(n, ne, 0.0, gb, zero_a)?;
    let reference = SeriesSource::forward(&gb_jet, rep, 1, false)?;

    let gbar_inv = inverse(&gbar0)?;
    let xis = unit_covectors(&gbar_inv, samples.max(2 * d * d));
    let gn = rep.tgamma(n);
    let mut diffs = Vec::with_capacity(xis.len());
    for xi in &xis {
        let (e_given, _) = parity_parts(src, -1, xi)?;
        let (e_ref, _) = parity_parts(&reference, -1, xi)?;
        diffs.push(&gn * (e_given - e_ref));
    }
    let (tform, res_t) = fit_quadratic(&xis, &diffs, "order-0 tensor")?;
    let mm = contract(&tform, &gbar0);
    let tr = mm.trace().re;
    let pr = chiral_projectors(rep)?;

    let mut ambiguous = false;
    let e_u = if m != 0.0 {
        let v = -tr / ((n as f64 - 1.0) * m * r);
        if v <= 0.0 {
            return Err(Error::InvalidInput(format!("recovered conformal factor e^u = {v:.3e} is not positive")));
        }
        Some(v)
    } else if let Some(pm) = reference_metric {
        Some((pm.c[0][(0, 0)].re / gbar0[(0, 0)]).sqrt())
    } else {
        ambiguous = true;
        None
    };
    let mg = &mm + &pr.b_plus * c(e_u.unwrap_or(0.0) * (n as f64 - 1.0) * m);

    // M_γ = Σ_a (γᵃ B⁺) ⊗ Y_a
    let (bps, _) = spinor_projectors(rep);
    let mut resp = Vec::new();
    for a in 0..d {
        let ga = rep.gamma(a + 1) * &bps;
        for p in 0..ne {
            for q in 0..ne {
                let mut epq = CMat::zeros(ne, ne);
                epq[(p, q)] = c(1.0);
                let k = kron(&ga, &epq);
                resp.push(k.clone());
                resp.push(k * I);
            }
        }
    }
    let (coef, res_y) = fit_responses(&[resp], std::slice::from_ref(&mg), "order-0 spinor extraction")?;
    let mut y = Vec::new();
    for a in 0..d {
        let mut ya = CMat::zeros(ne, ne);
        for p in 0..ne {
            for q in 0..ne {
                let base = 2 * ((a * ne + p) * ne + q);
                ya[(p, q)] = C64::new(coef[base], coef[base + 1]);
            }
        }
        y.push(ya);
    }
    let hbar_inv = crate::linalg::spd_sqrt(&gbar0).ok_or(Error::NotPositiveDefinite)?;
    let nm2 = n as f64 - 2.0;
    let mut du = Vec::new();
    let mut a0 = Vec::new();
    let mut herm_defect = 0.0_f64;
    for al in 0..d {
        let mut q = CMat::zeros(ne, ne);
        for (a, ya) in y.iter().enumerate() {
            q += ya * c(hbar_inv[(a, al)]);
        }
        let herm = (&q + q.adjoint()) * c(0.5);
        let anti = (&q - q.adjoint()) * c(0.5);
        let s = herm.trace().re / ne as f64;
        herm_defect = herm_defect.max(cmax(&(&herm - crate::linalg::eye(ne) * c(s))));
        du.push(s / (0.5 * nm2 * (n as f64 - 1.0)));
        a0.push(anti * c(1.0 / nm2));
    }

    let (g0, dg) = match (e_u, reference_metric) {
        (_, Some(pm)) if m == 0.0 => {
            let g0 = re(&pm.c[0]);
            let dg = (0..d)
                .map(|al| {
                    let mut e = vec![0u8; n];
                    e[al] = 1;
                    pm.coef(&e).map(re).unwrap_or_else(|| RMat::zeros(d, d))
                })
                .collect();
            (g0, dg)
        }
        _ => {
            let e2u = e_u.map(|v| v * v).unwrap_or(1.0);
            let g0 = &gbar0 * e2u;
            let dg = (0..d).map(|al| (&gbar0 * (2.0 * du[al]) + class.gbar_deriv(al)) * e2u).collect();
            (g0, dg)
        }
    };
    Ok(Order0 { class, g0, dg_tangential: dg, e_u, du, a0, ambiguous, residual: res_t.max(res_y), hermitian_defect: herm_defect })
}

// ---------------------------------------------------------------------------
// response models at a g-unit covector

struct Models {
    d: usize,
    ne: usize,
    /// γⁿγᵃB⁺ on the spinor module, a = 1..n−1.
    gnga_bp: Vec<CMat>,
    /// h[(α, a)] = h^α_a(x₀).
    h: RMat,
    ginv: RMat,
}

impl Models {
    fn new(rep: &GammaRep, g0: &RMat) -> Result<Self> {
        let n = rep.n;
        let (bps, _) = spinor_projectors(rep);
        let gnga_bp = (1..n).map(|a| rep.gamma_n() * rep.gamma(a) * &bps).collect();
        Ok(Models { d: n - 1, ne: rep.e_rank, gnga_bp, h: spd_inv_sqrt(g0)?, ginv: inverse(g0)? })
    }

    fn hx(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.d).map(|a| (0..self.d).map(|al| self.h[(al, a)] * xi[al]).sum()).collect()
    }

    fn gx(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.d).map(|al| (0..self.d).map(|be| self.ginv[(al, be)] * xi[be]).sum()).collect()
    }

    /// Odd part of Δθ_{−(k+2)} caused by a change P of ∂ₙ^{k+2} g(x₀).
    fn sigma_response(&self, p: &RMat, xi: &[f64], k: i32) -> CMat {
        let hx = self.hx(xi);
        let gx = self.gx(xi);
        let pg: Vec<f64> = (0..self.d).map(|al| (0..self.d).map(|be| p[(al, be)] * gx[be]).sum()).collect();
        let s: f64 = (0..self.d).map(|al| gx[al] * pg[al]).sum();
        let scale = I * c(1.0 / 2f64.powi(k + 3));
        let mut acc = CMat::zeros(self.gnga_bp[0].nrows(), self.gnga_bp[0].ncols());
        for a in 0..self.d {
            let w: f64 = (0..self.d).map(|al| self.h[(al, a)] * pg[al]).sum::<f64>() - hx[a] * s;
            acc += &self.gnga_bp[a] * c(w);
        }
        kron(&(acc * scale), &crate::linalg::eye(self.ne))
    }

    /// Even part of Δθ_{−(k+2)} caused by X_α = ∂ₙ^{k+1} A_α(x₀) for one α.
    fn connection_response(&self, alpha: usize, x: &CMat, xi: &[f64], k: i32) -> CMat {
        let hx = self.hx(xi);
        let gx = self.gx(xi);
        let scale = -1.0 / 2f64.powi(k + 1);
        let mut acc = CMat::zeros(self.gnga_bp[0].nrows() * self.ne, self.gnga_bp[0].ncols() * self.ne);
        for a in 0..self.d {
            let coef = self.h[(alpha, a)] - hx[a] * gx[alpha];
            acc += kron(&self.gnga_bp[a], x) * c(scale * coef);
        }
        acc
    }
}

/// Fit the g-trace-free part of a change P of ∂ₙ^{k+2} g(x₀) from odd parts.
fn fit_sigma(models: &Models, g0: &RMat, xis: &[Vec<f64>], odd: &[CMat], k: i32) -> Result<(RMat, f64)> {
    let basis = tracefree_basis(g0)?;
    let resp: Vec<Vec<CMat>> = xis.iter().map(|xi| basis.iter().map(|b| models.sigma_response(b, xi, k)).collect()).collect();
    let (x, res) = fit_responses(&resp, odd, "trace-free second fundamental form")?;
    let mut p = RMat::zeros(models.d, models.d);
    for (b, xj) in basis.iter().zip(&x) {
        p += b * *xj;
    }
    Ok((p, res))
}

/// Fit X_α = ∂ₙ^{k+1} A_α(x₀), anti-Hermitian, from even parts.
fn fit_connection(models: &Models, xis: &[Vec<f64>], even: &[CMat], k: i32) -> Result<(Vec<CMat>, f64)> {
    let ab = anti_hermitian_basis(models.ne);
    let mut resp = Vec::new();
    for xi in xis {
        let mut r = Vec::new();
        for al in 0..models.d {
            for b in &ab {
                r.push(models.connection_response(al, b, xi, k));
            }
        }
        resp.push(r);
    }
    let (x, res) = fit_responses(&resp, even, "normal derivative of the connection")?;
    let nb = ab.len();
    let out = (0..models.d)
        .map(|al| {
            let mut m = CMat::zeros(models.ne, models.ne);
            for (j, b) in ab.iter().enumerate() {
                m += b * c(x[al * nb + j]);
            }
            m
        })
        .collect();
    Ok((out, res))
}

// ---------------------------------------------------------------------------
// second fundamental form

/// Σ(x₀) from the odd part of θ₋₁ in the default frame, given g(x₀), ∂_αg(x₀)
/// and A(x₀). H(x₀) is not visible at this order.
pub fn recover_sff(src: &dyn ThetaSource, g0: &RMat, dg_tangential: &[RMat], a0: &[CMat], rep: &GammaRep, m: f64, samples: usize) -> Result<(RMat, f64)> {
    let n = rep.n;
    if n < 3 {
        return Err(Error::Unsupported("Σ vanishes identically for n = 2".into()));
    }
    need_degree(src, -1)?;
    let d = n - 1;
    let ne = rep.e_rank;
    let mut g = MJet::constant(n, 1, cx(g0));
    for (al, dg) in dg_tangential.iter().enumerate() {
        let mut e = vec![0u8; n];
        e[al] = 1;
        *g.coef_mut(&e).expect("order 1") = cx(dg);
    }
    let a: Vec<MJet> = (0..d).map(|al| MJet::constant(n, 1, a0.get(al).cloned().unwrap_or_else(|| CMat::zeros(ne, ne)))).collect();
    let cand = SeriesSource::forward(&BoundaryJet::new(n, ne, m, g, a)?, rep, 1, false)?;
    let models = Models::new(rep, g0)?;
    let xis = unit_covectors(&models.ginv, samples.max(d * (d + 1)));
    let mut odd = Vec::new();
    for xi in &xis {
        let (_, o1) = parity_parts(src, -1, xi)?;
        let (_, o2) = parity_parts(&cand, -1, xi)?;
        odd.push(o1 - o2);
    }
    let (p, res) = fit_sigma(&models, g0, &xis, &odd, -1)?;
    Ok((p * -0.5, res))
}

// ---------------------------------------------------------------------------
// inductive step

/// Result of one inductive step k: H_k, ∂ₙ^{k+1}g, ∂ₙ^{k+1}A, Σ_{k+1}.
#[derive(Clone, Debug)]
pub struct StepIncrement {
    pub k: usize,
    pub h: f64,
    pub dg: RMat,
    pub dg_direct: Option<RMat>,
    pub a: Vec<CMat>,
    pub sigma: RMat,
    pub upsilon: Option<UpsilonDiagnostic>,
    pub residual: f64,
}

/// ∂ₙʲΥ(x₀) with Υ = ω¹₂₃ + ω²₃₁ + ω³₁₂ for n = 4.
pub fn upsilon_normal_derivative(jet: &BoundaryJet, rep: &GammaRep, parallel_at_x0: bool, j: usize) -> Result<f64> {
    if jet.n != 4 {
        return Err(Error::Unsupported("Υ is defined for n = 4".into()));
    }
    let fr = frame_jets(jet, rep, parallel_at_x0)?;
    let d = 3;
    let w = |a: usize, b: usize, cc: usize| {
        let mut s = crate::jet::sconst(4, 0.0);
        for mu in 0..d {
            s = s.add(&fr.omega[mu].entry(a, b).mul(&fr.h.entry(mu, cc)));
        }
        s
    };
    let ups = w(0, 1, 2).add(&w(1, 2, 0)).add(&w(2, 0, 1));
    Ok(ups.coef(&normal_exp(4, j)).map(|z| z.re).unwrap_or(0.0) * factorial(j))
}

/// One inductive step k ≥ 0 from θ_{−(k+2)} in the parallel-at-x₀ frame.
///
/// `known` must hold g through order k, H through k − 1, Σ through k and A
/// through k. For m = 0, `prescribed_h` supplies H_k.
pub fn recover_next(k: usize, src: &dyn ThetaSource, known: &RecoveredJets, prior: &BoundaryJet, rep: &GammaRep, prescribed_h: Option<f64>, samples: usize) -> Result<StepIncrement> {
    let n = rep.n;
    if n < 3 {
        return Err(Error::Unsupported("use recover_n2 for n = 2".into()));
    }
    let degree = -(k as i32 + 2);
    need_degree(src, degree)?;
    if known.g.len() < k + 1 || known.h.len() < k || known.sigma.len() < k + 1 || known.a.len() < k + 1 {
        return Err(Error::InvalidInput(format!("step {k} needs all data through order {k}")));
    }
    let m = known.m;
    let d = n - 1;
    let ne = rep.e_rank;
    let r = rep.size() as f64 / 2.0;
    let kk = k as i32;
    let order = k + 2;
    let g0 = known.g[0].clone();
    let models = Models::new(rep, &g0)?;
    let xis = unit_covectors(&models.ginv, samples.max(2 * d * d));
    let gn = rep.tgamma(n);

    let build = |h_k: f64| -> Result<BoundaryJet> {
        let mut h: Vec<f64> = known.h[..k].to_vec();
        h.push(h_k);
        let mut g: Vec<RMat> = known.g[..=k].to_vec();
        g.push(metric_next(&g, &h, &known.sigma[k], k));
        let mut sigma: Vec<RMat> = known.sigma[..=k].to_vec();
        sigma.push(RMat::zeros(d, d));
        let forced = forced_sigma_trace(&g, &sigma, k + 1)?;
        g.push(metric_next(&g, &h, &forced, k + 1));
        let a: Vec<Vec<CMat>> = known.a[..=k].to_vec();
        with_normal_line(prior, m, &g, &a, order)
    };

    // stage 1: H_k from the trace of the even part
    let (h_k, dg_direct, res1, ups_stage1) = if m != 0.0 {
        let cand = build(0.0)?;
        let csrc = SeriesSource::forward(&cand, rep, order, true)?;
        let mut t = Vec::new();
        for xi in &xis {
            let (e1, _) = parity_parts(src, degree, xi)?;
            let (e2, _) = parity_parts(&csrc, degree, xi)?;
            let v = (&gn * (e1 - e2)).trace().re * 2f64.powi(kk + 2);
            t.push(CMat::from_element(1, 1, c(v)));
        }
        let (tf, res) = fit_quadratic(&xis, &t, "mean curvature trace form")?;
        let tm = RMat::from_fn(d, d, |a, b| tf[a][b][(0, 0)].re);
        let h_k = (&g0 * &tm).trace() / (2.0 * r * m * d as f64);
        let cand_dg = metric_next(&known.g[..=k], &[known.h[..k].to_vec(), vec![0.0]].concat(), &known.sigma[k], k);
        // the full form is a multiple of g⁻¹ except for the Υ term when n = 4
        let direct = (n != 4).then(|| cand_dg - &g0 * &tm * &g0 * (1.0 / (r * m)));
        let ups0 = if n == 4 { upsilon_normal_derivative(&cand, rep, true, k + 1)? } else { 0.0 };
        (h_k, direct, res, ups0)
    } else {
        match prescribed_h {
            Some(h) => (h, None, 0.0, f64::NAN),
            None => return Err(Error::ConformalGaugeAmbiguity(format!("∂ₙ^{k}H must be prescribed when m = 0"))),
        }
    };

    // stage 2: ∂ₙ^{k+1}A from the even part, Σ_{k+1} from the odd part
    let cand = build(h_k)?;
    let csrc = SeriesSource::forward(&cand, rep, order, true)?;
    let (mut even, mut odd) = (Vec::new(), Vec::new());
    for xi in &xis {
        let (e1, o1) = parity_parts(src, degree, xi)?;
        let (e2, o2) = parity_parts(&csrc, degree, xi)?;
        even.push(e1 - e2);
        odd.push(o1 - o2);
    }
    let (x, res_a) = fit_connection(&models, &xis, &even, kk)?;
    let (p, res_s) = fit_sigma(&models, &g0, &xis, &odd, kk)?;

    let mut h: Vec<f64> = known.h[..k].to_vec();
    h.push(h_k);
    let mut g: Vec<RMat> = known.g[..=k].to_vec();
    g.push(metric_next(&g, &h, &known.sigma[k], k));
    let mut sigma: Vec<RMat> = known.sigma[..=k].to_vec();
    sigma.push(RMat::zeros(d, d));
    let forced = forced_sigma_trace(&g, &sigma, k + 1)?;
    let sigma_next = forced + p * -0.5;

    let upsilon = if n == 4 {
        let tc = chiral_trace(rep, &[1, 2, 3])? * c(ne as f64);
        let par = upsilon_normal_derivative(&cand, rep, true, k + 1)?;
        let def = upsilon_normal_derivative(&cand, rep, false, k + 1)?;
        let shift = if ups_stage1.is_nan() { 0.0 } else { par - ups_stage1 };
        Some(UpsilonDiagnostic { order: k + 1, trace_constant: [tc.re, tc.im], default_frame: def, parallel_frame: par, candidate_shift: shift })
    } else {
        None
    };
    Ok(StepIncrement { k, h: h_k, dg: g[k + 1].clone(), dg_direct, a: x, sigma: sigma_next, upsilon, residual: res1.max(res_a).max(res_s) })
}

// ---------------------------------------------------------------------------
// drivers

/// Full recovery through normal order K − 1 for n ≥ 3.
///
/// `default` carries θ₀, θ₋₁ in the default frame; `parallel` carries θ down
/// to θ_{−K} in the parallel-at-x₀ frame; `prior` supplies tangential
/// derivatives (its normal-line values at x₀ are ignored).
pub fn recover(default: &dyn ThetaSource, parallel: &dyn ThetaSource, prior: &BoundaryJet, rep: &GammaRep, m: f64, order: usize, opts: &RecoveryOptions) -> Result<RecoveredJets> {
    let n = rep.n;
    if n < 3 {
        return Err(Error::Unsupported("use recover_n2 for n = 2".into()));
    }
    if order < 1 {
        return Err(Error::InvalidInput("order must be >= 1".into()));
    }
    let d = n - 1;
    let mut out = RecoveredJets::empty(n, rep.e_rank, m);
    let o0 = recover_order0(default, opts.prescribed_metric.as_ref(), rep, m, opts.samples)?;
    out.residuals.push(("order0".into(), o0.residual));
    let g_flag = if o0.ambiguous {
        Determination::UpToConformalFactor
    } else if m == 0.0 {
        Determination::Prescribed
    } else {
        Determination::Determined
    };
    out.g.push(o0.g0.clone());
    out.g_flags.push(g_flag);
    out.dg_tangential = o0.dg_tangential.clone();
    out.a.push(o0.a0.clone());
    out.a_flags.push(Determination::Determined);
    out.dg_direct.push(None);
    let (s0, res) = recover_sff(default, &o0.g0, &o0.dg_tangential, &o0.a0, rep, m, opts.samples)?;
    out.residuals.push(("sff".into(), res));
    out.sigma.push(s0);
    out.sigma_flags.push(g_flag);
    out.conformal = Some(o0.class.clone());
    if o0.ambiguous {
        out.conformal_note = Some(
            "m = 0: the boundary metric is determined only up to a locally constant conformal factor; the representative has g^{11}(x0) = 1 and the mean curvature must be prescribed"
                .into(),
        );
        return Ok(out);
    }
    if m == 0.0 {
        out.conformal_note = Some("m = 0: boundary metric and mean curvature were prescribed".into());
    }
    for k in 0..order.saturating_sub(1) {
        let ph = opts.prescribed_h.as_ref().and_then(|v| v.get(k).copied());
        let step = match recover_next(k, parallel, &out, prior, rep, ph, opts.samples) {
            Ok(s) => s,
            Err(Error::ConformalGaugeAmbiguity(msg)) => {
                out.conformal_note = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        out.residuals.push((format!("step{k}"), step.residual));
        let flag = if m == 0.0 { Determination::Prescribed } else { Determination::Determined };
        out.h.push(step.h);
        out.h_flags.push(flag);
        out.g.push(step.dg);
        out.g_flags.push(Determination::Determined);
        out.dg_direct.push(step.dg_direct);
        out.a.push(step.a);
        out.a_flags.push(Determination::Determined);
        out.sigma.push(step.sigma);
        out.sigma_flags.push(Determination::Determined);
        if let Some(u) = step.upsilon {
            out.upsilon.push(u);
        }
    }
    debug_assert!(out.g.iter().all(|g| g.nrows() == d));
    Ok(out)
}

/// Forward θ-series for `jet` in both frames, then recover with the jet's own
/// tangential data as prior (its normal line scrubbed first).
pub fn recover_from_jet(jet: &BoundaryJet, rep: &GammaRep, order: usize, opts: &RecoveryOptions) -> Result<RecoveredJets> {
    let default = SeriesSource::forward(jet, rep, 1, false)?;
    let parallel = SeriesSource::forward(jet, rep, order, true)?;
    let prior = scrub_normal_line(jet);
    if jet.n == 2 {
        return recover_n2(&parallel, &prior, rep, jet.m, order);
    }
    recover(&default, &parallel, &prior, rep, jet.m, order, opts)
}

/// n = 2 without bundle: boundary length scale from θ₋₁, then ∂ₙᵏH from θ_{−(k+2)}.
pub fn recover_n2(src: &dyn ThetaSource, prior: &BoundaryJet, rep: &GammaRep, m: f64, order: usize) -> Result<RecoveredJets> {
    if rep.n != 2 {
        return Err(Error::InvalidInput("recover_n2 needs n = 2".into()));
    }
    if rep.e_rank != 1 {
        return Err(Error::Unsupported("for n = 2 the connection cannot be recovered; N_E must be 1".into()));
    }
    if m == 0.0 {
        return Err(Error::Unsupported("n = 2 recovery needs m != 0".into()));
    }
    need_degree(src, -(order.max(1) as i32))?;
    let pr = chiral_projectors(rep)?;
    let v = pr.v_plus_basis.column(0).into_owned();
    let gn = rep.tgamma(2);
    let read = |mat: &CMat| (v.adjoint() * &gn * mat * &v)[(0, 0)].re;
    let (e1, _) = parity_parts(src, -1, &[1.0])?;
    let val = read(&e1);
    let g11 = (val / m).powi(2);
    let mut out = RecoveredJets::empty(2, 1, m);
    out.g.push(RMat::from_element(1, 1, g11));
    out.g_flags.push(Determination::Determined);
    out.sigma.push(RMat::zeros(1, 1));
    out.sigma_flags.push(Determination::Determined);
    let xi = g11.sqrt();
    for k in 0..order.saturating_sub(1) {
        let degree = -(k as i32 + 2);
        let zero = RMat::zeros(1, 1);
        let mut h = out.h.clone();
        h.push(0.0);
        let mut g = out.g.clone();
        g.push(metric_next(&g, &h, &zero, k));
        g.push(metric_next(&g, &h, &zero, k + 1));
        let cand = with_normal_line(prior, m, &g, &[], k + 2)?;
        let csrc = SeriesSource::forward(&cand, rep, k + 2, true)?;
        let (e1, _) = parity_parts(src, degree, &[xi])?;
        let (e2, _) = parity_parts(&csrc, degree, &[xi])?;
        let dh = read(&(e1 - e2)) * 2f64.powi(k as i32 + 1) / m;
        out.h.push(dh);
        out.h_flags.push(Determination::Determined);
        let next = metric_next(&out.g, &out.h, &zero, k);
        out.g.push(next);
        out.g_flags.push(Determination::Determined);
        out.sigma.push(RMat::zeros(1, 1));
        out.sigma_flags.push(Determination::Determined);
    }
    Ok(out)
}
