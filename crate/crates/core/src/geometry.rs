//! Boundary-normal-coordinate jets of metric and connection, and the derived
//! frame, spin-connection, extrinsic and curvature jets.
//!
//! Jet variables are (x¹..x^{n−1}, xⁿ); xⁿ is the inward normal coordinate.
//! Conventions: eₙ = ∂ₙ inward, II = −½∂ₙg, (n−1)H = tr_g II, Σ = II − Hg.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clifford::GammaRep;
use crate::jet::{basis, sconst, smul, MJet, SJet};
use crate::linalg::{c, eye, random_anti_hermitian};
use crate::{CMat, Error, Result, C64};

/// Sign conventions shared by the forward and inverse pipelines.
pub mod conventions {
    /// II = SFF_SIGN · ½ ∂ₙ g.
    pub const SFF_SIGN: f64 = -1.0;
    /// The normal eₙ = ∂ₙ points into the manifold.
    pub const INWARD_NORMAL: bool = true;
}

/// Metric and connection jets at a boundary point x₀ = 0.
#[derive(Clone, Debug)]
pub struct BoundaryJet {
    pub n: usize,
    pub e_rank: usize,
    /// Maximal total derivative order K.
    pub order: usize,
    pub m: f64,
    /// Tangential metric g_{αβ} as an (n−1)×(n−1) matrix jet.
    pub g: MJet,
    /// Tangential connection components A_α (anti-Hermitian N_E×N_E), α = 1..n−1.
    pub a: Vec<MJet>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn exps_factorial(e: &[u8]) -> f64 {
    e.iter().map(|&x| factorial(x as usize)).product()
}

impl BoundaryJet {
    pub fn new(n: usize, e_rank: usize, m: f64, g: MJet, a: Vec<MJet>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("n must be >= 2".into()));
        }
        if g.dims() != (n - 1, n - 1) || g.nvar != n {
            return Err(Error::InvalidInput("metric jet has wrong shape".into()));
        }
        if a.len() != n - 1 || a.iter().any(|x| x.dims() != (e_rank, e_rank) || x.nvar != n) {
            return Err(Error::InvalidInput("connection jet has wrong shape".into()));
        }
        let order = g.order.max(0) as usize;
        let g = g.truncate(order as i32);
        let a = a.iter().map(|x| x.truncate(order as i32)).collect();
        let j = BoundaryJet { n, e_rank, order, m, g, a };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        let g0 = self.g.value()?;
        for k in 0..self.g.c.len() {
            let gk = &self.g.c[k];
            if crate::linalg::max_abs(&(gk - gk.transpose())) > 1e-12 || gk.iter().any(|z| z.im.abs() > 1e-12) {
                return Err(Error::InvalidInput("metric coefficients must be real symmetric".into()));
            }
        }
        let g0r = g0.map(|z| z.re);
        if !crate::linalg::is_spd(&g0r) {
            return Err(Error::NotPositiveDefinite);
        }
        for aa in &self.a {
            for ak in &aa.c {
                if crate::linalg::max_abs(&(ak + ak.adjoint())) > 1e-12 {
                    return Err(Error::InvalidInput("connection coefficients must be anti-Hermitian".into()));
                }
            }
        }
        Ok(())
    }

    /// Flat metric, zero connection.
    pub fn flat(n: usize, e_rank: usize, order: usize, m: f64) -> Self {
        let g = MJet::constant(n, order as i32, eye(n - 1));
        let a = vec![MJet::zero(n, order as i32, &CMat::zeros(e_rank, e_rank)); n - 1];
        BoundaryJet { n, e_rank, order, m, g, a }
    }

    /// Derivative ∂_{x'}^β ∂ₙ^j g at x₀ (β an exponent vector over tangential variables).
    pub fn g_deriv(&self, beta: &[u8], j: u8) -> Option<CMat> {
        let mut e = beta.to_vec();
        e.push(j);
        self.g.coef(&e).map(|x| x * c(exps_factorial(&e)))
    }

    pub fn a_deriv(&self, alpha: usize, beta: &[u8], j: u8) -> Option<CMat> {
        let mut e = beta.to_vec();
        e.push(j);
        self.a[alpha].coef(&e).map(|x| x * c(exps_factorial(&e)))
    }

    /// Seeded random jet: g(x₀) near the identity, small random derivatives, anti-Hermitian A.
    pub fn random(n: usize, e_rank: usize, order: usize, m: f64, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = n - 1;
        let b = basis(n);
        let len = b.len(order as i32);
        let mut g = MJet::zero(n, order as i32, &CMat::zeros(d, d));
        for k in 0..len {
            let mut s = CMat::zeros(d, d);
            let amp = if k == 0 { 0.25 } else { scale };
            for i in 0..d {
                for j in i..d {
                    let v = rng.gen_range(-amp..amp);
                    s[(i, j)] = c(v);
                    s[(j, i)] = c(v);
                }
            }
            if k == 0 {
                s += eye(d);
            }
            g.c[k] = s;
        }
        let mut a = Vec::new();
        for _ in 0..d {
            let mut aj = MJet::zero(n, order as i32, &CMat::zeros(e_rank, e_rank));
            for k in 0..len {
                let amp = if k == 0 { 1.0 } else { scale };
                aj.c[k] = random_anti_hermitian(e_rank, &mut rng) * c(amp);
            }
            a.push(aj);
        }
        BoundaryJet { n, e_rank, order, m, g, a }
    }

    /// Apply a constant unitary gauge U: A ↦ U A U*.
    pub fn gauge_conjugate(&self, u: &CMat) -> Self {
        let mut out = self.clone();
        for aj in out.a.iter_mut() {
            *aj = aj.lmul_const(u).rmul_const(&u.adjoint());
        }
        out
    }

    /// Keep only data of total derivative order ≤ `k` (zeroing the rest, same carried order).
    pub fn zero_above(&self, k: usize) -> Self {
        let mut out = self.clone();
        let b = basis(self.n);
        let deg = |e: &Vec<u8>| e.iter().map(|&x| x as usize).sum::<usize>();
        for (i, e) in b.exps.iter().enumerate().take(out.g.c.len()) {
            if deg(e) > k {
                out.g.c[i] = CMat::zeros(self.n - 1, self.n - 1);
                for aj in out.a.iter_mut() {
                    aj.c[i] = CMat::zeros(self.e_rank, self.e_rank);
                }
            }
        }
        out
    }
}

/// Serialized form: keys "b1,..,b_{n-1}|j" of derivative values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryJetFile {
    pub n: usize,
    pub e_rank: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: f64,
    pub g: BTreeMap<String, Vec<Vec<f64>>>,
    /// A: key → list over α of row-major [re, im] pairs.
    #[serde(rename = "A")]
    pub a: BTreeMap<String, Vec<Vec<Vec<[f64; 2]>>>>,
}

fn key_of(e: &[u8]) -> String {
    let (beta, j) = e.split_at(e.len() - 1);
    let b: Vec<String> = beta.iter().map(|x| x.to_string()).collect();
    format!("{}|{}", b.join(","), j[0])
}

fn parse_key(s: &str, n: usize) -> Result<Vec<u8>> {
    let (b, j) = s.split_once('|').ok_or_else(|| Error::Parse(format!("bad multi-index key '{s}'")))?;
    let mut e: Vec<u8> = if b.is_empty() {
        vec![]
    } else {
        b.split(',').map(|x| x.trim().parse::<u8>().map_err(|_| Error::Parse(format!("bad multi-index key '{s}'")))).collect::<Result<_>>()?
    };
    if e.len() != n - 1 {
        return Err(Error::Parse(format!("key '{s}' must have {} tangential entries", n - 1)));
    }
    e.push(j.trim().parse::<u8>().map_err(|_| Error::Parse(format!("bad normal order in '{s}'")))?);
    Ok(e)
}

impl BoundaryJet {
    pub fn to_file(&self) -> BoundaryJetFile {
        let b = basis(self.n);
        let mut g = BTreeMap::new();
        let mut a = BTreeMap::new();
        for (i, e) in b.exps.iter().enumerate().take(self.g.c.len()) {
            let f = exps_factorial(e);
            let gm = &self.g.c[i] * c(f);
            g.insert(key_of(e), (0..self.n - 1).map(|r| (0..self.n - 1).map(|s| gm[(r, s)].re).collect()).collect());
            let comps: Vec<Vec<Vec<[f64; 2]>>> = self
                .a
                .iter()
                .map(|aj| {
                    let m = &aj.c[i] * c(f);
                    (0..self.e_rank).map(|r| (0..self.e_rank).map(|s| [m[(r, s)].re, m[(r, s)].im]).collect()).collect()
                })
                .collect();
            a.insert(key_of(e), comps);
        }
        BoundaryJetFile { n: self.n, e_rank: self.e_rank, k: self.order, m: self.m, g, a }
    }

    pub fn from_file(f: &BoundaryJetFile) -> Result<Self> {
        let n = f.n;
        if n < 2 || f.e_rank < 1 {
            return Err(Error::InvalidInput("n >= 2 and e_rank >= 1 required".into()));
        }
        let d = n - 1;
        let mut g = MJet::zero(n, f.k as i32, &CMat::zeros(d, d));
        let mut a = vec![MJet::zero(n, f.k as i32, &CMat::zeros(f.e_rank, f.e_rank)); d];
        for (key, rows) in &f.g {
            let e = parse_key(key, n)?;
            let fct = exps_factorial(&e);
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Parse(format!("g[{key}] must be {d}x{d}")));
            }
            if let Some(slot) = g.coef_mut(&e) {
                *slot = CMat::from_fn(d, d, |i, j| c(rows[i][j] / fct));
            } else {
                return Err(Error::Parse(format!("g[{key}] exceeds order K={}", f.k)));
            }
        }
        for (key, comps) in &f.a {
            let e = parse_key(key, n)?;
            let fct = exps_factorial(&e);
            if comps.len() != d {
                return Err(Error::Parse(format!("A[{key}] must list {d} components")));
            }
            for (al, mat) in comps.iter().enumerate() {
                if mat.len() != f.e_rank || mat.iter().any(|r| r.len() != f.e_rank) {
                    return Err(Error::Parse(format!("A[{key}][{al}] has wrong shape")));
                }
                let slot = a[al].coef_mut(&e).ok_or_else(|| Error::Parse(format!("A[{key}] exceeds order")))?;
                *slot = CMat::from_fn(f.e_rank, f.e_rank, |i, j| C64::new(mat[i][j][0], mat[i][j][1]) / fct);
            }
        }
        BoundaryJet::new(n, f.e_rank, f.m, g, a)
    }
}

/// Full n×n metric G = g ⊕ 1 and its Christoffel symbols, as scalar jets.
pub struct Connection {
    pub n: usize,
    pub big_g: MJet,
    pub big_ginv: MJet,
    /// gamma[l][i][j] = Γ^l_{ij}
    pub gamma: Vec<Vec<Vec<SJet>>>,
}

pub fn levi_civita(jet: &BoundaryJet) -> Result<Connection> {
    let n = jet.n;
    let big_g = MJet::from_entries(n, n, |i, j| {
        if i < n - 1 && j < n - 1 {
            jet.g.entry(i, j)
        } else if i == j {
            sconst(n, 1.0)
        } else {
            sconst(n, 0.0)
        }
    });
    let big_ginv = big_g.inverse()?;
    let dg: Vec<MJet> = (0..n).map(|k| big_g.deriv(k)).collect();
    let first = |k: usize, i: usize, j: usize| -> SJet {
        dg[i].entry(k, j).add(&dg[j].entry(k, i)).sub(&dg[k].entry(i, j)).scale(c(0.5))
    };
    let mut firsts = vec![vec![vec![sconst(n, 0.0); n]; n]; n];
    for k in 0..n {
        for i in 0..n {
            for j in i..n {
                let f = first(k, i, j);
                firsts[k][i][j] = f.clone();
                firsts[k][j][i] = f;
            }
        }
    }
    let mut gamma = vec![vec![vec![sconst(n, 0.0); n]; n]; n];
    for l in 0..n {
        for i in 0..n {
            for j in i..n {
                let mut s = sconst(n, 0.0);
                for k in 0..n {
                    s = s.add(&big_ginv.entry(l, k).mul(&firsts[k][i][j]));
                }
                gamma[l][i][j] = s.clone();
                gamma[l][j][i] = s;
            }
        }
    }
    Ok(Connection { n, big_g, big_ginv, gamma })
}

/// Frame, Levi-Civita connection coefficients and twisted spin connection jets.
#[derive(Clone, Debug)]
pub struct FrameJet {
    pub n: usize,
    /// h[(α, a)] = h^α_a, tangential frame e_a = h^α_a ∂_α.
    pub h: MJet,
    /// omega[μ][(i, j)] = ω^i_j(∂_μ) for μ = 0..n (μ = n−1 is the normal).
    pub omega: Vec<MJet>,
    /// kappa[μ] = κ_A(∂_μ) at twisted size.
    pub kappa: Vec<MJet>,
    /// Connection components actually used (after the optional gauge change).
    pub a: Vec<MJet>,
    /// Gauge U(x') applied to the auxiliary bundle, if any.
    pub gauge: Option<MJet>,
    pub parallel_at_x0: bool,
}

impl FrameJet {
    /// Full n×n frame matrix blockdiag(h, 1).
    pub fn full_frame(&self) -> MJet {
        let n = self.n;
        MJet::from_entries(n, n, |i, j| {
            if i < n - 1 && j < n - 1 {
                self.h.entry(i, j)
            } else if i == j {
                sconst(n, 1.0)
            } else {
                sconst(n, 0.0)
            }
        })
    }
}

fn omega_matrices(conn: &Connection, hf: &MJet) -> Vec<MJet> {
    let n = conn.n;
    (0..n)
        .map(|mu| {
            let gam_mu = MJet::from_entries(n, n, |l, b| conn.gamma[l][mu][b].clone());
            let inner = hf.deriv(mu).add(&gam_mu.mul(hf));
            hf.transpose().mul(&conn.big_g).mul(&inner)
        })
        .collect()
}

pub fn frame_jets(jet: &BoundaryJet, rep: &GammaRep, parallel_at_x0: bool) -> Result<FrameJet> {
    jet.validate()?;
    let n = jet.n;
    let d = n - 1;
    let conn = levi_civita(jet)?;
    let gb = jet.g.restrict_zero(n - 1);
    let mut hb = gb.spd_sqrt()?.inverse()?;
    if parallel_at_x0 && d > 1 {
        let hf0 = embed_full(&hb, n);
        let om = omega_matrices(&conn, &hf0);
        let mut gen = MJet::zero(n, jet.order as i32, &CMat::zeros(d, d));
        for beta in 0..d {
            let w0 = om[beta].value()?.view((0, 0), (d, d)).into_owned();
            let xb = crate::jet::svar(n, beta).truncate(jet.order as i32);
            gen = gen.add(&smul(&xb, &MJet::constant(n, jet.order as i32, -w0)));
        }
        hb = hb.mul(&gen.exp_nilpotent());
    }
    // parallel transport along ∂ₙ: ∂ₙh = −½ g⁻¹ ∂ₙg h
    let ginv = jet.g.inverse()?;
    let mmat = ginv.mul(&jet.g.deriv(n - 1)).scale(c(-0.5));
    let mut h = hb.clone();
    for _ in 0..=jet.order + 1 {
        h = hb.add(&mmat.mul(&h).integrate(n - 1)).truncate(jet.order as i32);
    }
    let hf = embed_full(&h, n);
    let omega = omega_matrices(&conn, &hf);

    let mut a = jet.a.clone();
    let mut gauge = None;
    if parallel_at_x0 {
        let mut gen = MJet::zero(n, jet.order as i32, &CMat::zeros(jet.e_rank, jet.e_rank));
        for (al, aj) in jet.a.iter().enumerate() {
            let xb = crate::jet::svar(n, al).truncate(jet.order as i32);
            gen = gen.add(&smul(&xb, &MJet::constant(n, jet.order as i32, aj.value()?.clone())));
        }
        let u = gen.exp_nilpotent();
        let uinv = gen.neg().exp_nilpotent();
        a = jet.a.iter().enumerate().map(|(al, aj)| u.mul(aj).mul(&uinv).sub(&u.deriv(al).mul(&uinv))).collect();
        gauge = Some(u);
    }
    let kappa = spin_connection(rep, &omega, &a, n);
    Ok(FrameJet { n, h, omega, kappa, a, gauge, parallel_at_x0 })
}

fn embed_full(h: &MJet, n: usize) -> MJet {
    MJet::from_entries(n, n, |i, j| {
        if i < n - 1 && j < n - 1 {
            h.entry(i, j)
        } else if i == j {
            sconst(n, 1.0)
        } else {
            sconst(n, 0.0)
        }
    })
}

/// κ_A(∂_μ) = −½ Σ_{i<j} ω^i_j(∂_μ) γⁱγʲ ⊗ I + I ⊗ A_μ.
pub fn spin_connection(rep: &GammaRep, omega: &[MJet], a: &[MJet], n: usize) -> Vec<MJet> {
    let size = rep.size();
    (0..n)
        .map(|mu| {
            let mut k = MJet::zero(n, omega[mu].order, &CMat::zeros(size, size));
            for i in 0..n {
                for j in i + 1..n {
                    let gg = rep.lift(&(rep.gamma(i + 1) * rep.gamma(j + 1))) * c(-0.5);
                    k = k.add(&smul(&omega[mu].entry(i, j), &MJet::from_const(n, gg)));
                }
            }
            if mu < n - 1 {
                let ae = a[mu].map(&CMat::zeros(size, size), |m| rep.embed_e(m));
                k = k.add(&ae);
            }
            k
        })
        .collect()
}

/// Second fundamental form, mean curvature and traceless part as jets.
#[derive(Clone, Debug)]
pub struct ExtrinsicData {
    pub ii: MJet,
    pub h: SJet,
    pub sigma: MJet,
}

pub fn extrinsic_data(jet: &BoundaryJet) -> Result<ExtrinsicData> {
    if jet.order == 0 {
        return Err(Error::InsufficientOrder { what: "extrinsic data needs ∂ₙg".into(), needed: 1, available: 0 });
    }
    let n = jet.n;
    let ii = jet.g.deriv(n - 1).scale(c(0.5 * conventions::SFF_SIGN));
    let ginv = jet.g.inverse()?;
    let h = ginv.mul(&ii).trace().scale(c(1.0 / (n as f64 - 1.0)));
    let sigma = ii.sub(&smul(&h, &jet.g));
    Ok(ExtrinsicData { ii, h, sigma })
}

/// F_{μν} = ∂_μA_ν − ∂_νA_μ + [A_μ, A_ν] with A_n = 0.
pub fn curvature_2form(a: &[MJet], n: usize, e_rank: usize) -> Vec<Vec<MJet>> {
    let ord = a.first().map(|x| x.order).unwrap_or(0);
    let zero = MJet::zero(n, ord, &CMat::zeros(e_rank, e_rank));
    let comp = |mu: usize| if mu < n - 1 { a[mu].clone() } else { zero.clone() };
    let mut f = vec![vec![zero.clone(); n]; n];
    for mu in 0..n {
        for nu in 0..n {
            if mu != nu {
                let (am, an) = (comp(mu), comp(nu));
                f[mu][nu] = an.deriv(mu).sub(&am.deriv(nu)).add(&am.mul(&an)).sub(&an.mul(&am));
            }
        }
    }
    f
}

/// Weitzenböck curvature 𝔉_A = Σ_{j<k} γʲγᵏ F(e_j, e_k) as a twisted matrix jet.
pub fn weitzenbock_jet(jet: &BoundaryJet, frame: &FrameJet, rep: &GammaRep) -> MJet {
    let n = jet.n;
    let size = rep.size();
    let f = curvature_2form(&frame.a, n, jet.e_rank);
    let hf = frame.full_frame();
    let mut out = MJet::zero(n, f[0][1].order, &CMat::zeros(size, size));
    for j in 0..n {
        for k in j + 1..n {
            let mut fjk = MJet::zero(n, f[0][1].order, &CMat::zeros(jet.e_rank, jet.e_rank));
            for mu in 0..n {
                for nu in 0..n {
                    if mu != nu {
                        let w = hf.entry(mu, j).mul(&hf.entry(nu, k));
                        fjk = fjk.add(&smul(&w, &f[mu][nu]));
                    }
                }
            }
            let gg = rep.lift(&(rep.gamma(j + 1) * rep.gamma(k + 1)));
            out = out.add(&fjk.map(&CMat::zeros(size, size), |m| &gg * rep.embed_e(m)));
        }
    }
    out
}

/// 𝔉_A at x₀.
pub fn weitzenbock(jet: &BoundaryJet, rep: &GammaRep) -> Result<CMat> {
    if jet.order == 0 {
        return Err(Error::InsufficientOrder { what: "Weitzenböck term needs ∂A".into(), needed: 1, available: 0 });
    }
    let frame = frame_jets(jet, rep, false)?;
    Ok(weitzenbock_jet(jet, &frame, rep).value()?.clone())
}

/// Scalar curvature of the full metric as a jet.
pub fn scalar_curvature_jet(conn: &Connection) -> SJet {
    let n = conn.n;
    let g = &conn.gamma;
    let mut r = sconst(n, 0.0);
    for i in 0..n {
        for j in 0..n {
            let mut ric = sconst(n, 0.0);
            for l in 0..n {
                ric = ric.add(&g[l][i][j].deriv(l)).sub(&g[l][i][l].deriv(j));
                for m in 0..n {
                    ric = ric.add(&g[l][l][m].mul(&g[m][i][j])).sub(&g[l][j][m].mul(&g[m][i][l]));
                }
            }
            r = r.add(&conn.big_ginv.entry(i, j).mul(&ric));
        }
    }
    r
}

/// Scalar curvature jets at the boundary point, with the check value ¼R − (n−1)/2·∂ₙH.
#[derive(Clone, Debug)]
pub struct ScalarCurvature {
    pub r: SJet,
    /// ¼R − (n−1)/2·∂ₙH at x₀.
    pub remainder_check: f64,
}

pub fn scalar_curvature_boundary(jet: &BoundaryJet) -> Result<ScalarCurvature> {
    if jet.order < 2 {
        return Err(Error::InsufficientOrder { what: "scalar curvature".into(), needed: 2, available: jet.order });
    }
    let conn = levi_civita(jet)?;
    let r = scalar_curvature_jet(&conn);
    let ext = extrinsic_data(jet)?;
    let dh = ext.h.deriv(jet.n - 1);
    let rem = r.value()?.re / 4.0 - (jet.n as f64 - 1.0) / 2.0 * dh.value()?.re;
    Ok(ScalarCurvature { r, remainder_check: rem })
}

/// Σ_{a,b} ω^b_n(e_a) γᵃγᵇ at twisted size (equals (n−1)H·I).
pub fn mean_curvature_gamma_sum(frame: &FrameJet, rep: &GammaRep) -> Result<CMat> {
    let n = frame.n;
    let h0 = frame.h.value()?;
    let mut s = CMat::zeros(rep.size(), rep.size());
    for a in 0..n - 1 {
        for b in 0..n - 1 {
            let mut w = c(0.0);
            for al in 0..n - 1 {
                w += h0[(al, a)] * frame.omega[al].value()?[(b, n - 1)];
            }
            s += rep.lift(&(rep.gamma(a + 1) * rep.gamma(b + 1))) * w;
        }
    }
    Ok(s)
}
