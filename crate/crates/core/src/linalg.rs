//! Small dense linear-algebra helpers shared by the numerical modules.

use crate::{CMat, RMat, C64};

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(n: usize, m: usize) -> CMat {
    CMat::zeros(n, m)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn trace(a: &CMat) -> C64 {
    a.diagonal().iter().sum()
}

/// Largest absolute entry.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    max_abs(&(a - b))
}

pub fn to_complex(a: &RMat) -> CMat {
    a.map(c)
}

/// Symmetric positive square root of a real SPD matrix.
pub fn spd_sqrt(a: &RMat) -> Option<RMat> {
    let eig = a.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return None;
    }
    let d = RMat::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn is_spd(a: &RMat) -> bool {
    (a - a.transpose()).amax() <= 1e-12 * (1.0 + a.amax())
        && a.clone().symmetric_eigen().eigenvalues.iter().all(|&l| l > 0.0)
}

/// Matrix exponential by scaling and squaring with a Taylor kernel.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    let norm = a.iter().map(|z| z.norm()).sum::<f64>().max(1e-300);
    let s = (norm.log2().ceil() + 1.0).max(0.0) as i32;
    let scaled = a / c(2f64.powi(s));
    let mut term = eye(n);
    let mut sum = eye(n);
    for k in 1..30 {
        term = &term * &scaled / c(k as f64);
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Orthonormal basis of the column space of a projector, by modified Gram-Schmidt.
pub fn column_basis(p: &CMat, rank: usize) -> CMat {
    let n = p.nrows();
    let mut basis: Vec<nalgebra::DVector<C64>> = Vec::new();
    let mut cols: Vec<_> = (0..p.ncols()).map(|j| p.column(j).into_owned()).collect();
    cols.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap());
    for mut v in cols {
        for b in &basis {
            let proj = b.dotc(&v);
            v -= b * proj;
        }
        let nv = v.norm();
        if nv > 1e-8 {
            basis.push(v / c(nv));
        }
        if basis.len() == rank {
            break;
        }
    }
    let mut out = zeros(n, basis.len());
    for (j, b) in basis.iter().enumerate() {
        out.set_column(j, b);
    }
    out
}

/// Random Hermitian-unitary-friendly helpers for tests and suites.
pub fn random_unitary<R: rand::Rng>(n: usize, rng: &mut R) -> CMat {
    let h = random_hermitian(n, rng);
    expm(&(h * I))
}

pub fn random_hermitian<R: rand::Rng>(n: usize, rng: &mut R) -> CMat {
    let a = CMat::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    (&a + a.adjoint()) * c(0.5)
}

pub fn random_anti_hermitian<R: rand::Rng>(n: usize, rng: &mut R) -> CMat {
    random_hermitian(n, rng) * I
}
