//! Fourier-mode solver for the chiral and Dirichlet boundary problems on the
//! cylinder T^{n−1} × [0, L] with x′-independent metric and connection.
//!
//! Every lattice covector ξ reduces (D_A − m)ψ = 0 to a linear ODE in xⁿ. The
//! two-point problems are solved by marching the subspace of solutions that
//! satisfy the far boundary condition from xⁿ = L back to 0. Each step applies a
//! fourth-order Magnus propagator and re-orthonormalizes, so the growth rates
//! ±|ξ| never overflow.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clifford::{chiral_projectors, ChiralProjectors, GammaRep};
use crate::geometry::BoundaryJet;
use crate::jet::MJet;
use crate::linalg::{c, expm, eye, max_abs, I};
use crate::recovery::ThetaSource;
use crate::{CMat, Error, RMat, Result, C64};

pub const MAX_PROFILE_DEGREE: usize = 8;
pub const SCHEMA_VERSION: u32 = 1;

/// Numerical settings of the mode solver.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Target relative defect of each multiplier.
    pub tol: f64,
    /// Largest Magnus step in xⁿ.
    pub max_step: f64,
    /// Mode cutoff Ξ (Euclidean norm of the lattice covector).
    pub cutoff: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol: 1e-10, max_step: 0.025, cutoff: 32.0 }
    }
}

/// Cylinder model: g(xⁿ) = Σ_k metric[k]·(xⁿ)^k, A_α(xⁿ) = Σ_k connection[α][k]·(xⁿ)^k.
#[derive(Clone, Debug)]
pub struct CylinderConfig {
    pub n: usize,
    pub e_rank: usize,
    pub m: f64,
    /// Periods ℓ_α of the boundary torus.
    pub periods: Vec<f64>,
    /// Collar length L.
    pub length: f64,
    pub metric: Vec<RMat>,
    pub connection: Vec<Vec<CMat>>,
    pub solver: SolverSettings,
}

fn poly_eval<T>(coefs: &[T], x: f64, deriv: usize, zero: T) -> T
where
    T: Clone + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let mut out = zero;
    for (k, ck) in coefs.iter().enumerate().skip(deriv) {
        let fall: f64 = (k - deriv + 1..=k).map(|i| i as f64).product();
        out = out + ck.clone() * (fall * x.powi((k - deriv) as i32));
    }
    out
}

impl CylinderConfig {
    /// Flat metric and zero connection.
    pub fn flat(n: usize, e_rank: usize, m: f64, length: f64) -> Self {
        CylinderConfig {
            n,
            e_rank,
            m,
            periods: vec![2.0 * std::f64::consts::PI; n - 1],
            length,
            metric: vec![RMat::identity(n - 1, n - 1)],
            connection: vec![vec![CMat::zeros(e_rank, e_rank)]; n - 1],
            solver: SolverSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n.checked_sub(1).filter(|&d| d >= 1).ok_or_else(|| Error::InvalidInput("n must be >= 2".into()))?;
        if self.e_rank < 1 {
            return Err(Error::InvalidInput("e_rank must be >= 1".into()));
        }
        if !self.m.is_finite() {
            return Err(Error::InvalidInput("m must be a finite real number".into()));
        }
        if self.periods.len() != d || self.periods.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput(format!("need {d} positive periods")));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::InvalidInput("collar length must be positive".into()));
        }
        let s = &self.solver;
        if !(s.tol > 0.0 && s.max_step > 0.0 && s.cutoff > 0.0) {
            return Err(Error::InvalidInput("solver tolerance, step and cutoff must be positive".into()));
        }
        if self.metric.is_empty() || self.metric.len() > MAX_PROFILE_DEGREE + 1 {
            return Err(Error::InvalidInput(format!("metric profile needs 1..={} coefficients", MAX_PROFILE_DEGREE + 1)));
        }
        for gk in &self.metric {
            if gk.shape() != (d, d) || (gk - gk.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidInput("metric coefficients must be symmetric (n−1)×(n−1)".into()));
            }
        }
        if self.connection.len() != d {
            return Err(Error::InvalidInput(format!("connection profile needs {d} components")));
        }
        for comp in &self.connection {
            if comp.len() > MAX_PROFILE_DEGREE + 1 {
                return Err(Error::InvalidInput(format!("connection profile degree exceeds {MAX_PROFILE_DEGREE}")));
            }
            for ak in comp {
                if ak.shape() != (self.e_rank, self.e_rank) || max_abs(&(ak + ak.adjoint())) > 1e-12 {
                    return Err(Error::InvalidInput("connection coefficients must be anti-Hermitian N_E×N_E".into()));
                }
            }
        }
        for i in 0..=200 {
            let x = self.length * i as f64 / 200.0;
            if !crate::linalg::is_spd(&self.metric_at(x, 0)) {
                return Err(Error::NotPositiveDefinite);
            }
        }
        Ok(())
    }

    /// ∂ₙ^deriv g at xⁿ = x.
    pub fn metric_at(&self, x: f64, deriv: usize) -> RMat {
        let d = self.n - 1;
        poly_eval(&self.metric, x, deriv, RMat::zeros(d, d))
    }

    /// ∂ₙ^deriv A_α at xⁿ = x.
    pub fn connection_at(&self, alpha: usize, x: f64, deriv: usize) -> CMat {
        let z = CMat::zeros(self.e_rank, self.e_rank);
        let mut out = z.clone();
        for (k, ck) in self.connection[alpha].iter().enumerate().skip(deriv) {
            let fall: f64 = (k - deriv + 1..=k).map(|i| i as f64).product();
            out += ck * c(fall * x.powi((k - deriv) as i32));
        }
        out
    }

    /// Lattice covector for integer indices k: ξ_α = 2π k_α / ℓ_α.
    pub fn covector(&self, k: &[i64]) -> Vec<f64> {
        k.iter().zip(&self.periods).map(|(&ki, &l)| 2.0 * std::f64::consts::PI * ki as f64 / l).collect()
    }

    /// Boundary jet at the point xⁿ = 0 of order K (exact once K ≥ profile degree).
    pub fn to_boundary_jet(&self, order: usize) -> Result<BoundaryJet> {
        let n = self.n;
        let d = n - 1;
        let mut g = MJet::zero(n, order as i32, &CMat::zeros(d, d));
        let mut a = vec![MJet::zero(n, order as i32, &CMat::zeros(self.e_rank, self.e_rank)); d];
        let mut e = vec![0u8; n];
        for j in 0..=order {
            e[n - 1] = j as u8;
            if let Some(gk) = self.metric.get(j) {
                *g.coef_mut(&e).unwrap() = crate::linalg::to_complex(gk);
            }
            for (al, comp) in self.connection.iter().enumerate() {
                if let Some(ak) = comp.get(j) {
                    *a[al].coef_mut(&e).unwrap() = ak.clone();
                }
            }
        }
        BoundaryJet::new(n, self.e_rank, self.m, g, a)
    }

    /// Same geometry for the metric c²·g: xⁿ and L scale by c, the torus keeps its coordinates.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.length *= factor;
        out.metric = self.metric.iter().enumerate().map(|(k, gk)| gk * (factor * factor / factor.powi(k as i32))).collect();
        out.connection = self
            .connection
            .iter()
            .map(|comp| comp.iter().enumerate().map(|(k, ak)| ak * c(factor.powi(-(k as i32)))).collect())
            .collect();
        out.m = self.m / factor;
        out
    }

    /// Connection conjugated by a constant unitary U: A ↦ U A U*.
    pub fn gauge_conjugate(&self, u: &CMat) -> Self {
        let mut out = self.clone();
        out.connection = self.connection.iter().map(|comp| comp.iter().map(|ak| u * ak * u.adjoint()).collect()).collect();
        out
    }
}

/// JSON/TOML form of [`CylinderConfig`]. `metric[k]` is the coefficient of (xⁿ)ᵏ in g(xⁿ)
/// (rows of reals); `connection[α][k]` the coefficient of (xⁿ)ᵏ in A_α, rows of [re, im] pairs.
/// Periods default to 2π.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderFile {
    pub n: usize,
    pub e_rank: usize,
    pub m: f64,
    pub length: f64,
    #[serde(default)]
    pub periods: Option<Vec<f64>>,
    pub metric: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub connection: Option<Vec<Vec<Vec<Vec<[f64; 2]>>>>>,
    #[serde(default)]
    pub solver: Option<SolverSettings>,
}

impl CylinderConfig {
    pub fn to_file(&self) -> CylinderFile {
        let d = self.n - 1;
        let e = self.e_rank;
        CylinderFile {
            n: self.n,
            e_rank: e,
            m: self.m,
            length: self.length,
            periods: Some(self.periods.clone()),
            metric: self.metric.iter().map(|g| (0..d).map(|i| (0..d).map(|j| g[(i, j)]).collect()).collect()).collect(),
            connection: Some(
                self.connection
                    .iter()
                    .map(|comp| comp.iter().map(|a| (0..e).map(|i| (0..e).map(|j| [a[(i, j)].re, a[(i, j)].im]).collect()).collect()).collect())
                    .collect(),
            ),
            solver: Some(self.solver.clone()),
        }
    }

    pub fn from_file(f: &CylinderFile) -> Result<Self> {
        if f.n < 2 || f.e_rank < 1 {
            return Err(Error::InvalidInput("n >= 2 and e_rank >= 1 required".into()));
        }
        let d = f.n - 1;
        let e = f.e_rank;
        let mut cfg = CylinderConfig::flat(f.n, e, f.m, f.length);
        if let Some(p) = &f.periods {
            cfg.periods = p.clone();
        }
        if f.metric.is_empty() {
            return Err(Error::Parse("metric needs at least the constant coefficient".into()));
        }
        cfg.metric = f
            .metric
            .iter()
            .enumerate()
            .map(|(k, rows)| {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Parse(format!("metric[{k}] must be {d}x{d}")));
                }
                Ok(RMat::from_fn(d, d, |i, j| rows[i][j]))
            })
            .collect::<Result<_>>()?;
        if let Some(conn) = &f.connection {
            if conn.len() != d {
                return Err(Error::Parse(format!("connection must list {d} components")));
            }
            cfg.connection = conn
                .iter()
                .enumerate()
                .map(|(al, comp)| {
                    comp.iter()
                        .enumerate()
                        .map(|(k, rows)| {
                            if rows.len() != e || rows.iter().any(|r| r.len() != e) {
                                return Err(Error::Parse(format!("connection[{al}][{k}] must be {e}x{e}")));
                            }
                            Ok(CMat::from_fn(e, e, |i, j| C64::new(rows[i][j][0], rows[i][j][1])))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
        }
        if let Some(s) = &f.solver {
            cfg.solver = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-representation data reused at every collar point: −½·(γⁱγʲ ⊗ I) for i < j and γⁿγᵃ ⊗ I.
#[derive(Clone, Debug)]
pub struct CollarModel<'a> {
    pub cfg: &'a CylinderConfig,
    pub rep: &'a GammaRep,
    pairs: Vec<(usize, usize, CMat)>,
    normal_tangential: Vec<CMat>,
}

impl<'a> CollarModel<'a> {
    pub fn new(cfg: &'a CylinderConfig, rep: &'a GammaRep) -> Result<Self> {
        check_rep(cfg, rep)?;
        let n = cfg.n;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j, rep.lift(&(rep.gamma(i + 1) * rep.gamma(j + 1))) * c(-0.5)));
            }
        }
        let normal_tangential = (0..n - 1).map(|a| rep.tgamma(n) * rep.tgamma(a + 1)).collect();
        Ok(CollarModel { cfg, rep, pairs, normal_tangential })
    }

    /// Frame, Levi-Civita and spin-connection data at xⁿ = x.
    pub fn point(&self, x: f64) -> Result<CollarPoint> {
        let (cfg, rep) = (self.cfg, self.rep);
        let n = cfg.n;
        let d = n - 1;
        let g = cfg.metric_at(x, 0);
        let dg = cfg.metric_at(x, 1);
        let eig = g.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| !(l > 1e-14)) {
            return Err(Error::InvalidInput(format!("frame degenerates at xⁿ = {x}")));
        }
        let q = &eig.eigenvectors;
        let s: Vec<f64> = eig.eigenvalues.iter().map(|l| l.sqrt()).collect();
        let h = q * RMat::from_diagonal(&nalgebra::DVector::from_iterator(d, s.iter().map(|v| 1.0 / v))) * q.transpose();
        // S = g^{1/2}: S S′ + S′ S = g′ is diagonal in the eigenbasis of g
        let dgq = q.transpose() * &dg * q;
        let ds = q * RMat::from_fn(d, d, |i, j| dgq[(i, j)] / (s[i] + s[j])) * q.transpose();
        let dh = -(&h * ds * &h);
        let mut omega = vec![RMat::zeros(n, n); n];
        let hg = h.transpose() * &dg;
        let gh = &dg * &h;
        for al in 0..d {
            for a in 0..d {
                omega[al][(a, n - 1)] = 0.5 * hg[(a, al)];
                omega[al][(n - 1, a)] = -0.5 * gh[(al, a)];
            }
        }
        let rot = h.transpose() * &g * &dh + 0.5 * h.transpose() * &dg * &h;
        omega[n - 1].view_mut((0, 0), (d, d)).copy_from(&rot);
        let a: Vec<CMat> = (0..d).map(|al| cfg.connection_at(al, x, 0)).collect();
        let da: Vec<CMat> = (0..d).map(|al| cfg.connection_at(al, x, 1)).collect();
        let size = rep.size();
        let kappa: Vec<CMat> = (0..n)
            .map(|mu| {
                let mut k = if mu < d { rep.embed_e(&a[mu]) } else { CMat::zeros(size, size) };
                for (i, j, gg) in &self.pairs {
                    let w = omega[mu][(*i, *j)];
                    if w != 0.0 {
                        k += gg * c(w);
                    }
                }
                k
            })
            .collect();
        let frame_gammas = (0..d)
            .map(|al| {
                let mut out = CMat::zeros(size, size);
                for (a, ga) in self.normal_tangential.iter().enumerate() {
                    out += ga * c(h[(al, a)]);
                }
                out
            })
            .collect();
        Ok(CollarPoint { x, g, dg, h, omega, kappa, a, da, frame_gammas })
    }

    /// M(xⁿ; ξ) for the mass `m`: ψ′ = Mψ solves (D_A − m)ψ = 0.
    pub fn mode_matrix(&self, xi: &[f64], m: f64, x: f64) -> Result<CMat> {
        Ok(self.point(x)?.mode_matrix(self.rep, xi, m))
    }
}

/// Frame and connection data of the cylinder at one value of xⁿ.
///
/// The frame is h = g^{−1/2}(xⁿ); since it is not parallel along ∂ₙ, κ(∂ₙ)
/// carries the rotation part hᵀg h′ + ½hᵀg′h.
#[derive(Clone, Debug)]
pub struct CollarPoint {
    pub x: f64,
    pub g: RMat,
    pub dg: RMat,
    /// h[(α, a)] = h^α_a.
    pub h: RMat,
    /// ω[μ][(i, j)] = ω^i_j(∂_μ).
    pub omega: Vec<RMat>,
    /// κ_A(∂_μ) at twisted size.
    pub kappa: Vec<CMat>,
    pub a: Vec<CMat>,
    pub da: Vec<CMat>,
    /// Σ_a h^α_a γⁿγᵃ per α.
    frame_gammas: Vec<CMat>,
}

impl CollarPoint {
    pub fn new(cfg: &CylinderConfig, rep: &GammaRep, x: f64) -> Result<Self> {
        CollarModel::new(cfg, rep)?.point(x)
    }

    /// ∇_{e_a} on a mode e^{iξ·x′}: Σ_α h^α_a(iξ_α + κ_α).
    pub fn tangential_derivative(&self, xi: &[f64], a: usize) -> CMat {
        let size = self.kappa[0].nrows();
        let mut out = CMat::zeros(size, size);
        for (al, &x) in xi.iter().enumerate() {
            out += (eye(size) * (I * x) + &self.kappa[al]) * c(self.h[(al, a)]);
        }
        out
    }

    /// R(ξ) = γⁿ(Σ_a γᵃ∇_{e_a} − m): on solutions of (D_A − m)ψ = 0, ∇ₙψ = Rψ.
    pub fn tangential_symbol(&self, rep: &GammaRep, xi: &[f64], m: f64) -> CMat {
        let size = rep.size();
        let mut p = rep.tgamma(rep.n) * c(-m);
        for (al, fg) in self.frame_gammas.iter().enumerate() {
            let mut k = self.kappa[al].clone();
            for i in 0..size {
                k[(i, i)] += I * xi[al];
            }
            p += fg * k;
        }
        p
    }

    /// M(xⁿ; ξ) with ψ′ = Mψ for (D_A − m)ψ = 0.
    pub fn mode_matrix(&self, rep: &GammaRep, xi: &[f64], m: f64) -> CMat {
        self.tangential_symbol(rep, xi, m) - &self.kappa[rep.n - 1]
    }

    /// Scalar curvature R = −2 tr K′ − tr K² − (tr K)², K = ½g⁻¹g′.
    pub fn scalar_curvature(&self, cfg: &CylinderConfig) -> f64 {
        let ginv = self.g.clone().try_inverse().expect("metric checked positive definite");
        let d2g = cfg.metric_at(self.x, 2);
        let k = 0.5 * &ginv * &self.dg;
        let dk = 0.5 * (&ginv * &d2g - &ginv * &self.dg * &ginv * &self.dg);
        -2.0 * dk.trace() - (&k * &k).trace() - k.trace().powi(2)
    }

    /// 𝔉_A = Σ_{j<k} γʲγᵏ F(e_j, e_k) with F_{αβ} = [A_α, A_β], F_{αn} = −∂ₙA_α.
    pub fn weitzenbock(&self, rep: &GammaRep) -> CMat {
        let n = rep.n;
        let d = n - 1;
        let er = rep.e_rank;
        let size = rep.size();
        let f_coord = |mu: usize, nu: usize| -> CMat {
            match (mu < d, nu < d) {
                (true, true) => &self.a[mu] * &self.a[nu] - &self.a[nu] * &self.a[mu],
                (true, false) => -&self.da[mu],
                (false, true) => self.da[nu].clone(),
                _ => CMat::zeros(er, er),
            }
        };
        let frame = |mu: usize, j: usize| -> f64 {
            match (mu < d, j < d) {
                (true, true) => self.h[(mu, j)],
                (false, false) => 1.0,
                _ => 0.0,
            }
        };
        let mut out = CMat::zeros(size, size);
        for j in 0..n {
            for k in j + 1..n {
                let mut f = CMat::zeros(er, er);
                for mu in 0..n {
                    for nu in 0..n {
                        let w = frame(mu, j) * frame(nu, k);
                        if mu != nu && w != 0.0 {
                            f += f_coord(mu, nu) * c(w);
                        }
                    }
                }
                out += rep.lift(&(rep.gamma(j + 1) * rep.gamma(k + 1))) * rep.embed_e(&f);
            }
        }
        out
    }
}

/// mode_operator: M(xⁿ; ξ) of the first-order system ψ′ = Mψ.
pub fn mode_operator(cfg: &CylinderConfig, rep: &GammaRep, xi: &[f64], x: f64) -> Result<CMat> {
    check_rep(cfg, rep)?;
    Ok(CollarPoint::new(cfg, rep, x)?.mode_matrix(rep, xi, cfg.m))
}

pub(crate) fn check_rep(cfg: &CylinderConfig, rep: &GammaRep) -> Result<()> {
    if rep.n != cfg.n || rep.e_rank != cfg.e_rank {
        return Err(Error::InvalidInput("representation does not match the cylinder".into()));
    }
    Ok(())
}

pub(crate) fn euclid(xi: &[f64]) -> f64 {
    xi.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn orthonormalize(y: &CMat) -> CMat {
    let cols = y.ncols();
    y.clone().qr().q().columns(0, cols).into_owned()
}

/// Distance to singularity of a block of an orthonormal basis: 1/σ_min (σ_max ≤ 1).
pub(crate) fn proximity(a: &CMat) -> f64 {
    let mn = a.clone().singular_values().iter().cloned().fold(f64::INFINITY, f64::min);
    if mn <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / mn
    }
}

/// Gauss–Legendre offsets of the three-point rule on [0, 1]: ½ ∓ √15/10.
const GL3: f64 = 0.387_298_334_620_741_7;

/// Sixth-order Magnus exponent Ω for ψ′ = M(x)ψ over [x0, x0 + h].
pub(crate) fn magnus6(field: &dyn Fn(f64) -> Result<CMat>, x0: f64, h: f64) -> Result<CMat> {
    let a1 = field(x0 + (0.5 - GL3) * h)?;
    let a2 = field(x0 + 0.5 * h)?;
    let a3 = field(x0 + (0.5 + GL3) * h)?;
    let br = |p: &CMat, q: &CMat| p * q - q * p;
    let al1 = &a2 * c(h);
    let al2 = (&a3 - &a1) * c(h * 15f64.sqrt() / 3.0);
    let al3 = (&a3 - &a2 * c(2.0) + &a1) * c(h * 10.0 / 3.0);
    let c1 = br(&al1, &al2);
    let c2 = br(&al1, &(&al3 * c(2.0) + &c1)) * c(-1.0 / 60.0);
    let inner = br(&(&al1 * c(-20.0) - &al3 + &c1), &(&al2 + &c2));
    Ok(&al1 + &al3 * c(1.0 / 12.0) + inner * c(1.0 / 240.0))
}

/// Mesh on [0, L] containing every `forced` node. Steps are h·rate = 0.1 at the
/// `focus` points and grow with the distance to them (errors made far away are
/// damped by the dichotomy) up to h·rate = 1.5 and h = max_step; `refine`
/// divides every step.
pub(crate) fn graded_mesh(length: f64, rate: f64, max_step: f64, focus: &[f64], forced: &[f64], refine: usize) -> Vec<f64> {
    let mut stops: Vec<f64> = forced.iter().chain(focus).cloned().filter(|&x| x > 0.0 && x < length).collect();
    stops.push(length);
    stops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut nodes = vec![0.0];
    let mut x = 0.0;
    for &stop in &stops {
        while x < stop {
            let dist = focus.iter().map(|f| (x - f).abs()).fold(f64::INFINITY, f64::min);
            let local = (0.1 + 0.2 * rate * dist).min(1.5) / rate;
            let h = local.min(max_step) / refine as f64;
            x = if stop - x < 1.25 * h { stop } else { x + h };
            nodes.push(x);
        }
    }
    nodes
}

fn collar_mesh(cfg: &CylinderConfig, xi: &[f64], refine: usize) -> Vec<f64> {
    graded_mesh(cfg.length, mode_rate(cfg, xi), cfg.solver.max_step, &[0.0], &[], refine)
}

pub(crate) fn mode_rate(cfg: &CylinderConfig, xi: &[f64]) -> f64 {
    euclid(xi) + cfg.m.abs() + 1.0
}

/// March span(y) from xⁿ = L back to 0 under ψ′ = M(xⁿ)ψ.
fn march_back(field: &dyn Fn(f64) -> Result<CMat>, mesh: &[f64], y0: CMat) -> Result<CMat> {
    let mut y = y0;
    for w in mesh.windows(2).rev() {
        let omega = magnus6(field, w[0], w[1] - w[0])?;
        y = orthonormalize(&(expm(&(-omega)) * y));
    }
    Ok(y)
}

fn richardson(fine: &CMat, coarse: &CMat) -> f64 {
    max_abs(&(fine - coarse)) / max_abs(fine).max(1.0) / 63.0
}

/// Result of one mode solve.
#[derive(Clone, Debug)]
pub struct ModeSolution {
    /// Full-size matrix V⁻ Θ̂ V⁺* (zero on 𝕍⁻).
    pub matrix: CMat,
    /// Richardson estimate of the relative error: ‖Θ̂_h − Θ̂_{h/2}‖/(2⁶ − 1) for the sixth-order march.
    pub residual: f64,
    pub conditioning: f64,
}

fn theta_once(model: &CollarModel, pr: &ChiralProjectors, xi: &[f64], refine: usize) -> Result<(CMat, f64)> {
    let cfg = model.cfg;
    let field = |x: f64| model.mode_matrix(xi, cfg.m, x);
    // far end: inward normal −∂ₙ, so the chiral condition there is B⁻ψ(L) = 0
    let y = march_back(&field, &collar_mesh(cfg, xi, refine), pr.v_plus_basis.clone())?;
    let top = pr.v_plus_basis.adjoint() * &y;
    let bottom = pr.v_minus_basis.adjoint() * &y;
    let cond = proximity(&top);
    if !(cond <= 1.0 / (100.0 * cfg.solver.tol)) {
        return Err(Error::NearSpectrum(cond));
    }
    let inv = top.try_inverse().ok_or(Error::NearSpectrum(f64::INFINITY))?;
    let red = bottom * inv;
    Ok((&pr.v_minus_basis * red * pr.v_plus_basis.adjoint(), cond))
}

/// Θ̂(ξ): 𝔹⁺ψ(0) ↦ 𝔹⁻ψ(0) for (D_A − m)ψ = 0 with the chiral condition at both ends.
pub fn theta_multiplier(cfg: &CylinderConfig, rep: &GammaRep, xi: &[f64]) -> Result<ModeSolution> {
    check_rep(cfg, rep)?;
    let pr = chiral_projectors(rep)?;
    let model = CollarModel::new(cfg, rep)?;
    let (coarse, _) = theta_once(&model, &pr, xi, 1)?;
    let (fine, cond) = theta_once(&model, &pr, xi, 2)?;
    let residual = richardson(&fine, &coarse);
    Ok(ModeSolution { matrix: fine, residual, conditioning: cond })
}

fn lambda_once(model: &CollarModel, xi: &[f64], refine: usize) -> Result<(CMat, f64)> {
    let (cfg, rep) = (model.cfg, model.rep);
    let s = rep.size();
    let gn = rep.tgamma(rep.n);
    let field = |x: f64| -> Result<CMat> {
        let pt = model.point(x)?;
        let kn = &pt.kappa[rep.n - 1];
        let minus = pt.tangential_symbol(rep, xi, cfg.m) - kn;
        let plus = pt.tangential_symbol(rep, xi, -cfg.m) - kn;
        let mut big = CMat::zeros(2 * s, 2 * s);
        big.view_mut((0, 0), (s, s)).copy_from(&minus);
        big.view_mut((0, s), (s, s)).copy_from(&(-&gn));
        big.view_mut((s, s), (s, s)).copy_from(&plus);
        Ok(big)
    };
    // unknowns (ψ, φ = (D_A − m)ψ), and (D_A + m)φ = 0; Dirichlet ψ(L) = 0
    let mut y0 = CMat::zeros(2 * s, s);
    y0.view_mut((s, 0), (s, s)).copy_from(&eye(s));
    let y = march_back(&field, &collar_mesh(cfg, xi, refine), y0)?;
    let ypsi = y.rows(0, s).into_owned();
    let yphi = y.rows(s, s).into_owned();
    let cond = proximity(&ypsi);
    if !(cond <= 1.0 / (100.0 * cfg.solver.tol)) {
        return Err(Error::NearDirichletSpectrum(cond));
    }
    let inv = ypsi.try_inverse().ok_or(Error::NearDirichletSpectrum(f64::INFINITY))?;
    let r = model.point(0.0)?.tangential_symbol(rep, xi, cfg.m);
    Ok((r - gn * yphi * inv, cond))
}

/// Λ̂(ξ): ψ(0) ↦ ∇ₙψ(0) for (D_A² − m²)ψ = 0 with ψ(L) = 0.
pub fn lambda_multiplier(cfg: &CylinderConfig, rep: &GammaRep, xi: &[f64]) -> Result<ModeSolution> {
    let model = CollarModel::new(cfg, rep)?;
    // ψ and φ grow at equal rates (a Jordan block), so this system runs on a mesh twice as fine
    let (coarse, _) = lambda_once(&model, xi, 2)?;
    let (fine, cond) = lambda_once(&model, xi, 4)?;
    let residual = richardson(&fine, &coarse);
    Ok(ModeSolution { matrix: fine, residual, conditioning: cond })
}

/// Per-mode Λ–Θ relation: (Λ̂ − R̂)(𝔹⁺ + Θ̂) = 0, relative to max(‖Λ̂‖, 1).
pub fn lambda_theta_mode_residual(cfg: &CylinderConfig, rep: &GammaRep, xi: &[f64], theta: &CMat, lambda: &CMat) -> Result<f64> {
    let pr = chiral_projectors(rep)?;
    let r = CollarPoint::new(cfg, rep, 0.0)?.tangential_symbol(rep, xi, cfg.m);
    let res = (lambda - r) * (&pr.b_plus + theta);
    Ok(max_abs(&res) / max_abs(lambda).max(1.0))
}

/// One row of a multiplier table.
#[derive(Clone, Debug)]
pub struct MultiplierEntry {
    pub xi: Vec<f64>,
    pub theta: CMat,
    pub lambda: Option<CMat>,
    pub residual: f64,
    pub conditioning: f64,
}

/// Multipliers keyed by integer lattice indices.
#[derive(Clone, Debug, Default)]
pub struct MultiplierTable {
    pub n: usize,
    pub size: usize,
    pub entries: BTreeMap<Vec<i64>, MultiplierEntry>,
}

impl MultiplierTable {
    /// Merge disjoint tables; a repeated key is an error.
    pub fn merge(&mut self, other: MultiplierTable) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.insert(k.clone(), v).is_some() {
                return Err(Error::InvalidInput(format!("mode {k:?} computed twice")));
            }
        }
        Ok(())
    }

    pub fn max_residual(&self) -> f64 {
        self.entries.values().map(|e| e.residual).fold(0.0, f64::max)
    }

    /// CSV: ξ components, row-major re/im of Θ̂, of Λ̂ (if present), residual.
    pub fn to_csv(&self) -> String {
        let d = self.n - 1;
        let s = self.size;
        let has_lambda = self.entries.values().next().map(|e| e.lambda.is_some()).unwrap_or(false);
        let mut head: Vec<String> = (1..=d).map(|i| format!("xi_{i}")).collect();
        let names = |p: &str, head: &mut Vec<String>| {
            for r in 0..s {
                for q in 0..s {
                    head.push(format!("{p}_{r}_{q}_re"));
                    head.push(format!("{p}_{r}_{q}_im"));
                }
            }
        };
        names("theta", &mut head);
        if has_lambda {
            names("lambda", &mut head);
        }
        head.push("residual".into());
        let mut out = head.join(",");
        out.push('\n');
        for e in self.entries.values() {
            let mut row: Vec<String> = e.xi.iter().map(|v| fmt17(*v)).collect();
            let push = |m: &CMat, row: &mut Vec<String>| {
                for r in 0..s {
                    for q in 0..s {
                        row.push(fmt17(m[(r, q)].re));
                        row.push(fmt17(m[(r, q)].im));
                    }
                }
            };
            push(&e.theta, &mut row);
            if let Some(l) = &e.lambda {
                push(l, &mut row);
            }
            row.push(fmt17(e.residual));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse the CSV written by `to_csv`. Lattice keys are recovered from ξ and the periods.
    pub fn from_csv(text: &str, n: usize, size: usize, periods: &[f64]) -> Result<Self> {
        let d = n - 1;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: Vec<&str> = lines.next().ok_or_else(|| Error::Parse("empty multiplier file".into()))?.split(',').collect();
        let block = 2 * size * size;
        let has_lambda = match head.len() {
            l if l == d + block + 1 => false,
            l if l == d + 2 * block + 1 => true,
            l => return Err(Error::Parse(format!("multiplier header has {l} columns, expected {} or {}", d + block + 1, d + 2 * block + 1))),
        };
        let mut table = MultiplierTable { n, size, entries: BTreeMap::new() };
        for (lineno, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number '{t}'", lineno + 2))))
                .collect::<Result<_>>()?;
            if vals.len() != head.len() {
                return Err(Error::Parse(format!("line {}: {} columns, expected {}", lineno + 2, vals.len(), head.len())));
            }
            let xi = vals[..d].to_vec();
            let mat = |off: usize| CMat::from_fn(size, size, |r, q| C64::new(vals[off + 2 * (r * size + q)], vals[off + 2 * (r * size + q) + 1]));
            let theta = mat(d);
            let lambda = has_lambda.then(|| mat(d + block));
            let key: Vec<i64> = xi.iter().zip(periods).map(|(x, l)| (x * l / (2.0 * std::f64::consts::PI)).round() as i64).collect();
            table.entries.insert(key, MultiplierEntry { xi, theta, lambda, residual: *vals.last().unwrap(), conditioning: f64::NAN });
        }
        Ok(table)
    }
}

/// Shortest round-trip representation, at most 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:?}")
}

/// Solve Θ̂ (and optionally Λ̂) for the given lattice modes, in parallel.
pub fn compute_table(cfg: &CylinderConfig, rep: &GammaRep, modes: &[Vec<i64>], with_lambda: bool) -> Result<MultiplierTable> {
    cfg.validate()?;
    check_rep(cfg, rep)?;
    let rows: Vec<Result<(Vec<i64>, MultiplierEntry)>> = modes
        .par_iter()
        .map(|k| {
            let xi = cfg.covector(k);
            let th = theta_multiplier(cfg, rep, &xi)?;
            let (lambda, lres, lcond) = if with_lambda {
                let l = lambda_multiplier(cfg, rep, &xi)?;
                (Some(l.matrix), l.residual, l.conditioning)
            } else {
                (None, 0.0, 1.0)
            };
            Ok((
                k.clone(),
                MultiplierEntry { xi, theta: th.matrix, lambda, residual: th.residual.max(lres), conditioning: th.conditioning.max(lcond) },
            ))
        })
        .collect();
    let mut table = MultiplierTable { n: cfg.n, size: rep.size(), entries: BTreeMap::new() };
    for r in rows {
        let (k, e) = r?;
        let mut one = MultiplierTable { n: cfg.n, size: rep.size(), entries: BTreeMap::new() };
        one.entries.insert(k, e);
        table.merge(one)?;
    }
    Ok(table)
}

/// Lattice modes t·(ray) for t in `range` (inclusive).
pub fn ray_modes(ray: &[i64], range: std::ops::RangeInclusive<i64>) -> Vec<Vec<i64>> {
    range.map(|t| ray.iter().map(|r| r * t).collect()).collect()
}

/// Fitted θ_{−k}(ξ̂) along one ray, ξ̂ the Euclidean unit covector.
#[derive(Clone, Debug)]
pub struct ExpansionFit {
    pub direction: Vec<f64>,
    /// coefs[k] = θ_{−k}(ξ̂).
    pub coefs: Vec<CMat>,
    /// Max-entry residual of the fit over the modes used.
    pub residual: f64,
    pub conditioning: f64,
}

impl ExpansionFit {
    /// Fit of t ↦ Θ̂((t + s)ξ̂), re-expanded to the same order with
    /// (t + s)^{−k} = Σ_j (−1)^j C(k+j−1, j) s^j t^{−k−j}.
    pub fn shifted(&self, s: f64) -> ExpansionFit {
        let cols = self.coefs.len();
        let mut coefs = vec![self.coefs[0].clone() * c(0.0); cols];
        coefs[0] = self.coefs[0].clone();
        for k in 1..cols {
            let mut w = 1.0;
            for j in 0..cols - k {
                coefs[k + j] += &self.coefs[k] * c(w);
                w *= -s * (k + j) as f64 / (j + 1) as f64;
            }
        }
        ExpansionFit { direction: self.direction.clone(), coefs, residual: self.residual, conditioning: self.conditioning }
    }
}

/// Least-squares fit of Θ̂(tξ̂) ≈ Σ_{k≤K} θ_{−k}(ξ̂) t^{−k} over table entries along `ray`.
pub fn fit_expansion(table: &MultiplierTable, ray: &[f64], order: usize) -> Result<ExpansionFit> {
    let norm = euclid(ray);
    if norm == 0.0 {
        return Err(Error::InvalidInput("ray must be nonzero".into()));
    }
    let dir: Vec<f64> = ray.iter().map(|x| x / norm).collect();
    let pts: Vec<(f64, &CMat)> = table
        .entries
        .values()
        .filter_map(|e| {
            let t = euclid(&e.xi);
            let cos = e.xi.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / t.max(1e-300);
            (t > 0.0 && cos > 1.0 - 1e-12).then_some((t, &e.theta))
        })
        .collect();
    if pts.len() < order + 3 {
        return Err(Error::IllConditionedFit(format!("{} modes on the ray, need at least {}", pts.len(), order + 3)));
    }
    let tmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let tmax = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    if tmax < 10.0 * tmin {
        return Err(Error::IllConditionedFit(format!("modes span |ξ| ∈ [{tmin}, {tmax}], less than a decade")));
    }
    // columns scaled by tmin^k so that the Vandermonde entries lie in (0, 1]
    let rows = pts.len();
    let cols = order + 1;
    let v = RMat::from_fn(rows, cols, |r, k| (tmin / pts[r].0).powi(k as i32));
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = smax / smin;
    if !(cond < 1e12) {
        return Err(Error::IllConditionedFit(format!("Vandermonde condition number {cond:.3e}")));
    }
    let size = pts[0].1.nrows();
    let mut coefs = vec![CMat::zeros(size, size); cols];
    let mut residual: f64 = 0.0;
    for i in 0..size {
        for j in 0..size {
            for part in 0..2 {
                let b = nalgebra::DVector::from_iterator(rows, pts.iter().map(|p| if part == 0 { p.1[(i, j)].re } else { p.1[(i, j)].im }));
                let x = svd.solve(&b, 0.0).map_err(|e| Error::IllConditionedFit(e.to_string()))?;
                residual = residual.max((&v * &x - &b).amax());
                for k in 0..cols {
                    let val = x[k] * tmin.powi(k as i32);
                    if part == 0 {
                        coefs[k][(i, j)].re = val;
                    } else {
                        coefs[k][(i, j)].im = val;
                    }
                }
            }
        }
    }
    Ok(ExpansionFit { direction: dir, coefs, residual, conditioning: cond })
}

/// θ components read from expansion fits; evaluation is allowed along fitted rays only.
#[derive(Clone, Debug)]
pub struct FittedSource {
    pub n: usize,
    pub size: usize,
    pub fits: Vec<ExpansionFit>,
}

impl ThetaSource for FittedSource {
    fn n(&self) -> usize {
        self.n
    }
    fn size(&self) -> usize {
        self.size
    }
    fn lowest(&self) -> i32 {
        -(self.fits.iter().map(|f| f.coefs.len()).min().unwrap_or(1) as i32 - 1)
    }
    fn eval_x0(&self, degree: i32, xi: &[f64]) -> Result<CMat> {
        let t = euclid(xi);
        let fit = self
            .fits
            .iter()
            .find(|f| f.direction.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() / t > 1.0 - 1e-9)
            .ok_or_else(|| Error::Unsupported(format!("no fitted ray along ξ = {xi:?}")))?;
        let k = (-degree) as usize;
        let coef = fit.coefs.get(k).ok_or_else(|| Error::InsufficientOrder {
            what: format!("θ_{degree} was not fitted"),
            needed: k,
            available: fit.coefs.len() - 1,
        })?;
        Ok(coef * c(t.powi(degree)))
    }
}

impl FittedSource {
    /// Re-express fits taken on `cfg` in the frame parallel at x₀.
    ///
    /// For a line bundle the gauge change is u = exp(x′·A(x₀)), and with A(x₀) = i·a it maps
    /// Θ̂(ξ) to Θ̂(ξ − a). Along a ray this is the shift t ↦ t − ξ̂·a, which is exact only when
    /// a is parallel to every fitted ray (always the case for n = 2).
    pub fn to_parallel_frame(&self, cfg: &CylinderConfig) -> Result<FittedSource> {
        if cfg.connection.is_empty() {
            return Ok(self.clone());
        }
        if cfg.e_rank != 1 {
            return Err(Error::Unsupported("the parallel frame of fitted multipliers needs N_E = 1".into()));
        }
        let a: Vec<f64> = cfg.connection.iter().map(|comp| comp.first().map_or(0.0, |m| m[(0, 0)].im)).collect();
        let fits = self
            .fits
            .iter()
            .map(|f| {
                let along: f64 = f.direction.iter().zip(&a).map(|(d, x)| d * x).sum();
                let across = a.iter().zip(&f.direction).map(|(x, d)| (x - along * d).powi(2)).sum::<f64>().sqrt();
                if across > 1e-12 * (1.0 + along.abs()) {
                    return Err(Error::Unsupported(format!("A(x₀) is not parallel to the fitted ray {:?}", f.direction)));
                }
                Ok(f.shifted(-along))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FittedSource { n: self.n, size: self.size, fits })
    }
}

/// Apply D_A (mode form) to a section χ(xⁿ) at x, with an 8th-order central difference of step `dx`.
fn apply_dirac(cfg: &CylinderConfig, rep: &GammaRep, xi: &[f64], chi: &dyn Fn(f64) -> Result<nalgebra::DVector<C64>>, x: f64, dx: f64) -> Result<nalgebra::DVector<C64>> {
    let pt = CollarPoint::new(cfg, rep, x)?;
    let n = rep.n;
    let v = chi(x)?;
    let dv = fd8(chi, x, dx)?;
    let mut out = rep.tgamma(n) * (dv + &pt.kappa[n - 1] * &v);
    for a in 0..n - 1 {
        out += rep.tgamma(a + 1) * pt.tangential_derivative(xi, a) * &v;
    }
    Ok(out)
}

fn fd8(f: &dyn Fn(f64) -> Result<nalgebra::DVector<C64>>, x: f64, dx: f64) -> Result<nalgebra::DVector<C64>> {
    const W: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];
    let mut out = f(x)? * c(0.0);
    for (k, w) in W.iter().enumerate() {
        let s = (k + 1) as f64 * dx;
        out += (f(x + s)? - f(x - s)?) * c(w / dx);
    }
    Ok(out)
}

/// ‖(D_A² − ∇*∇ − R/4 − 𝔉_A)ψ‖ / ‖ψ‖, maximized over interior sample points,
/// for the mode section e^{iξ·x′}ψ(xⁿ).
pub fn lw_residual(cfg: &CylinderConfig, rep: &GammaRep, xi: &[f64], trial: &dyn Fn(f64) -> nalgebra::DVector<C64>, dx: f64) -> Result<f64> {
    check_rep(cfg, rep)?;
    let n = rep.n;
    let psi = |x: f64| -> Result<nalgebra::DVector<C64>> { Ok(trial(x)) };
    let dpsi = |x: f64| apply_dirac(cfg, rep, xi, &psi, x, dx);
    let nabla_n = |x: f64| -> Result<nalgebra::DVector<C64>> {
        let pt = CollarPoint::new(cfg, rep, x)?;
        Ok(fd8(&psi, x, dx)? + &pt.kappa[n - 1] * trial(x))
    };
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let samples = 9;
    for s in 0..samples {
        let x = cfg.length * (0.1 + 0.8 * s as f64 / (samples - 1) as f64);
        let pt = CollarPoint::new(cfg, rep, x)?;
        let v = trial(x);
        let d2 = apply_dirac(cfg, rep, xi, &dpsi, x, dx)?;
        // ∇*∇ψ = −Σ_i (∇_{e_i}∇_{e_i}ψ − Σ_j ω^j_i(e_i)∇_{e_j}ψ)
        let nn = fd8(&nabla_n, x, dx)? + &pt.kappa[n - 1] * nabla_n(x)?;
        let mut rough = -nn;
        let grads: Vec<nalgebra::DVector<C64>> = (0..n)
            .map(|j| if j < n - 1 { Ok(pt.tangential_derivative(xi, j) * &v) } else { nabla_n(x) })
            .collect::<Result<_>>()?;
        for a in 0..n - 1 {
            let ta = pt.tangential_derivative(xi, a);
            rough -= &ta * &grads[a];
            for (j, gj) in grads.iter().enumerate() {
                let w: f64 = (0..n - 1).map(|al| pt.h[(al, a)] * pt.omega[al][(j, a)]).sum();
                rough += gj * c(w);
            }
        }
        let rhs = rough + &v * c(pt.scalar_curvature(cfg) / 4.0) + pt.weitzenbock(rep) * &v;
        worst = worst.max((d2 - rhs).camax());
        scale = scale.max(v.camax());
    }
    Ok(worst / scale.max(1e-300))
}
