//! Hermitian matrix tuples, Gaussian increments and the isometric real embedding.
//!
//! Matrices are stored in the normalized scale used throughout the crate: a
//! Brownian increment `B` over time `dt` has entries of variance `dt` on the
//! diagonal and `dt/2` for the real and imaginary parts off the diagonal, and
//! the normalized matrix is `B / sqrt(N)`, so that `(1/N) Tr((B/sqrt(N))^2)`
//! has mean `dt`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

pub type CMat = DMatrix<Complex64>;

const I4: Complex64 = Complex64 { re: 0.0, im: 4.0 };

/// Normalized trace `(1/N) Tr`.
pub fn tau(a: &CMat) -> Complex64 {
    a.trace() / a.nrows() as f64
}

/// `(1/N) Re Tr(a b)` without forming the product.
pub fn tau_re_product(a: &CMat, b: &CMat) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = a[(i, j)] * b[(j, i)];
            s += x.re;
        }
    }
    s / n as f64
}

/// `(m + m^*) / 2`.
pub fn herm_part(m: &CMat) -> CMat {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

fn is_hermitian(a: &CMat, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let n = a.nrows();
    for i in 0..n {
        for j in i..n {
            if (a[(i, j)] - a[(j, i)].conj()).norm() > rel_tol * (1.0 + scale) {
                return false;
            }
        }
    }
    true
}

/// An `m`-tuple of `N x N` Hermitian matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianTuple {
    n: usize,
    mats: Vec<CMat>,
}

impl HermitianTuple {
    pub fn zeros(n: usize, m: usize) -> Self {
        assert!(n >= 1 && m >= 1, "HermitianTuple needs n >= 1 and m >= 1");
        Self { n, mats: vec![CMat::zeros(n, n); m] }
    }

    pub fn identity(n: usize, m: usize) -> Self {
        assert!(n >= 1 && m >= 1, "HermitianTuple needs n >= 1 and m >= 1");
        Self { n, mats: vec![CMat::identity(n, n); m] }
    }

    /// Validates Hermitian symmetry to `1e-12` relative tolerance.
    pub fn new(mats: Vec<CMat>) -> Result<Self> {
        if mats.is_empty() {
            return invalid("a tuple needs at least one matrix");
        }
        let n = mats[0].nrows();
        if n == 0 {
            return invalid("matrix dimension must be at least 1");
        }
        for a in &mats {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, found: a.nrows().max(a.ncols()) });
            }
            if !is_hermitian(a, 1e-12) {
                return invalid("matrix is not Hermitian");
            }
        }
        Ok(Self { n, mats })
    }

    /// Takes the Hermitian part of each matrix; used for computed results.
    pub fn from_hermitian_part(mats: Vec<CMat>) -> Self {
        let n = mats[0].nrows();
        Self { n, mats: mats.iter().map(herm_part).collect() }
    }

    pub fn single(a: CMat) -> Result<Self> {
        Self::new(vec![a])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.mats.len()
    }

    pub fn mats(&self) -> &[CMat] {
        &self.mats
    }

    pub fn mat(&self, k: usize) -> &CMat {
        &self.mats[k]
    }

    pub fn into_mats(self) -> Vec<CMat> {
        self.mats
    }

    fn check_shape(&self, other: &Self) {
        assert!(self.n == other.n && self.m() == other.m(), "tuple shape mismatch");
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_shape(other);
        Self { n: self.n, mats: self.mats.iter().zip(&other.mats).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_shape(other);
        Self { n: self.n, mats: self.mats.iter().zip(&other.mats).map(|(a, b)| a - b).collect() }
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = Complex64::new(c, 0.0);
        Self { n: self.n, mats: self.mats.iter().map(|a| a * c).collect() }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        self.check_shape(other);
        let c = Complex64::new(c, 0.0);
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.zip_apply(b, |x, y| *x += c * y);
        }
    }

    /// Normalized inner product `sum_k (1/N) Re Tr(a_k b_k)`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.check_shape(other);
        self.mats.iter().zip(&other.mats).map(|(a, b)| tau_re_product(a, b)).sum()
    }

    /// `sum_k (1/N) Tr(x_k^2)`.
    pub fn norm2(&self) -> f64 {
        hs_norm2(self)
    }

    /// `(1/N) Re Tr(x_k^p)`.
    pub fn moment(&self, k: usize, p: u32) -> f64 {
        let a = &self.mats[k];
        if p == 0 {
            return 1.0;
        }
        let mut acc = a.clone();
        for _ in 1..p {
            acc = &acc * a;
        }
        tau(&acc).re
    }
}

/// Normalized squared norm `sum_k (1/N) Tr(x_k^2)`.
pub fn hs_norm2(x: &HermitianTuple) -> f64 {
    x.mats.iter().map(|a| tau_re_product(a, a)).sum()
}

/// Sum of normalized squared norms over a list of slots.
pub fn slots_norm2(xs: &[HermitianTuple]) -> f64 {
    xs.iter().map(hs_norm2).sum()
}

/// Normalized inner product summed over slots.
pub fn slots_inner(a: &[HermitianTuple], b: &[HermitianTuple]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.inner(y)).sum()
}

/// Raw Hermitian Brownian increment over a step `dt`.
pub fn sample_increment<R: Rng + ?Sized>(n: usize, m: usize, dt: f64, rng: &mut R) -> Result<HermitianTuple> {
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    if n == 0 || m == 0 {
        return invalid("n and m must be at least 1");
    }
    Ok(gaussian_tuple(n, m, dt.sqrt(), rng))
}

/// Normalized increment `B/sqrt(N)`; `(1/N) Tr` of its square has mean `dt` per matrix.
pub fn sample_normalized<R: Rng + ?Sized>(n: usize, m: usize, dt: f64, rng: &mut R) -> Result<HermitianTuple> {
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    if n == 0 || m == 0 {
        return invalid("n and m must be at least 1");
    }
    Ok(gaussian_tuple(n, m, (dt / n as f64).sqrt(), rng))
}

/// Diagonal entries `N(0, s^2)`, off-diagonal real and imaginary parts `N(0, s^2/2)`.
pub(crate) fn gaussian_tuple<R: Rng + ?Sized>(n: usize, m: usize, s: f64, rng: &mut R) -> HermitianTuple {
    let off = s * std::f64::consts::FRAC_1_SQRT_2;
    let mats = (0..m)
        .map(|_| {
            let mut a = CMat::zeros(n, n);
            for i in 0..n {
                let d: f64 = rng.sample(StandardNormal);
                a[(i, i)] = Complex64::new(s * d, 0.0);
                for j in (i + 1)..n {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let z = Complex64::new(off * re, off * im);
                    a[(i, j)] = z;
                    a[(j, i)] = z.conj();
                }
            }
            a
        })
        .collect();
    HermitianTuple { n, mats }
}

/// Real coordinates of a tuple under the isometric embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RealCoords {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl RealCoords {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Isometric embedding: diagonal entries, then `sqrt(2) Re` and `sqrt(2) Im` of the upper triangle.
pub fn real_embedding(x: &HermitianTuple) -> RealCoords {
    let n = x.n;
    let s2 = std::f64::consts::SQRT_2;
    let mut values = Vec::with_capacity(n * n * x.m());
    for a in &x.mats {
        for i in 0..n {
            values.push(a[(i, i)].re);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                values.push(s2 * a[(i, j)].re);
                values.push(s2 * a[(i, j)].im);
            }
        }
    }
    RealCoords { n, m: x.m(), values }
}

/// Inverse of [`real_embedding`] for the given shape.
pub fn real_embedding_inverse(c: &[f64], n: usize, m: usize) -> Result<HermitianTuple> {
    if n == 0 || m == 0 {
        return invalid("n and m must be at least 1");
    }
    if c.len() != n * n * m {
        return Err(Error::DimensionMismatch { expected: n * n * m, found: c.len() });
    }
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut mats = Vec::with_capacity(m);
    let mut it = c.iter();
    for _ in 0..m {
        let mut a = CMat::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = Complex64::new(*it.next().unwrap(), 0.0);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let re = *it.next().unwrap() * r;
                let im = *it.next().unwrap() * r;
                a[(i, j)] = Complex64::new(re, im);
                a[(j, i)] = Complex64::new(re, -im);
            }
        }
        mats.push(a);
    }
    Ok(HermitianTuple { n, mats })
}

/// Coordinates whose Euclidean norm is the normalized norm: `embed(x) / sqrt(N)`.
pub fn normalized_coords(xs: &[HermitianTuple]) -> Vec<f64> {
    let mut out = Vec::new();
    for x in xs {
        let s = 1.0 / (x.n as f64).sqrt();
        out.extend(real_embedding(x).values.into_iter().map(|v| v * s));
    }
    out
}

/// Inverse of [`normalized_coords`] for `slots` tuples of shape `(n, m)`.
pub fn from_normalized_coords(v: &[f64], n: usize, m: usize, slots: usize) -> Result<Vec<HermitianTuple>> {
    let d = n * n * m;
    if v.len() != d * slots {
        return Err(Error::DimensionMismatch { expected: d * slots, found: v.len() });
    }
    let s = (n as f64).sqrt();
    v.chunks(d)
        .map(|c| {
            let scaled: Vec<f64> = c.iter().map(|x| x * s).collect();
            real_embedding_inverse(&scaled, n, m)
        })
        .collect()
}

/// Cayley transform `(X + 4i)(X - 4i)^{-1}`.
pub fn cayley(x: &CMat) -> CMat {
    let n = x.nrows();
    let id = CMat::identity(n, n);
    let minus = x - &id * I4;
    let plus = x + &id * I4;
    let inv = minus.try_inverse().expect("X - 4i is invertible for Hermitian X");
    plus * inv
}

/// Inverse Cayley map `4i (u + 1)(u - 1)^{-1}`.
pub fn cayley_inverse(u: &CMat) -> Result<CMat> {
    let n = u.nrows();
    let id = CMat::identity(n, n);
    let inv = (u - &id).try_inverse().ok_or_else(|| Error::InvalidArgument("u - 1 is singular".into()))?;
    Ok((u + &id) * inv * I4)
}

/// A list of unitary matrices of common size.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryTuple {
    n: usize,
    mats: Vec<CMat>,
}

impl UnitaryTuple {
    /// Validates `U U^* = I` to `1e-10`.
    pub fn new(n: usize, mats: Vec<CMat>) -> Result<Self> {
        let id = CMat::identity(n, n);
        for u in &mats {
            if u.nrows() != n || u.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, found: u.nrows() });
            }
            let e = (u * u.adjoint() - &id).iter().map(|z| z.norm()).fold(0.0, f64::max);
            if e > 1e-10 {
                return invalid(format!("matrix is not unitary (deviation {e:.2e})"));
            }
        }
        Ok(Self { n, mats })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, mats: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.mats.len()
    }

    pub fn mats(&self) -> &[CMat] {
        &self.mats
    }

    pub fn get(&self, k: usize) -> Option<&CMat> {
        self.mats.get(k)
    }
}

/// Independent Haar unitaries from the QR factorization of complex Ginibre matrices.
pub fn haar_unitaries<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Result<UnitaryTuple> {
    if n == 0 {
        return invalid("n must be at least 1");
    }
    let mats = (0..count)
        .map(|_| {
            let g = CMat::from_fn(n, n, |_, _| {
                let (re, im): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                Complex64::new(re, im)
            });
            let qr = g.qr();
            let (mut q, r) = (qr.q(), qr.r());
            // Fix the phases of diag(R) so the law is Haar.
            for j in 0..n {
                let d = r[(j, j)];
                let phase = if d.norm() > 0.0 { d / d.norm() } else { Complex64::new(1.0, 0.0) };
                let mut col = q.column_mut(j);
                col *= phase;
            }
            q
        })
        .collect();
    UnitaryTuple::new(n, mats)
}

/// Catalan numbers, the even moments of the standard semicircle.
pub fn catalan(p: u32) -> f64 {
    let mut c = vec![1.0f64];
    for k in 1..=p as usize {
        let next: f64 = (0..k).map(|i| c[i] * c[k - 1 - i]).sum();
        c.push(next);
    }
    c[p as usize]
}
