//! Small dense complex matrices for per-frequency spatial statistics.
//!
//! Everything here is sized for microphone counts in the single digits, so
//! storage is inline (no heap traffic for M <= 4) and the algorithms are the
//! plain textbook ones.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use smallvec::SmallVec;

use crate::error::{Error, Result, Stage};

pub type C64 = Complex64;

/// Complex column vector with inline storage for up to four entries.
pub type CVec = SmallVec<[C64; 4]>;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    n: usize,
    data: SmallVec<[C64; 16]>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat {
            n,
            data: SmallVec::from_elem(ZERO, n * n),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        m
    }

    /// Builds from row-major real/imaginary pairs.
    pub fn from_rows(rows: &[&[C64]]) -> Self {
        let n = rows.len();
        Self::from_fn(n, |r, c| {
            assert_eq!(rows[r].len(), n, "row {r} has wrong length");
            rows[r][c]
        })
    }

    /// v w^H
    pub fn outer(v: &[C64], w: &[C64]) -> Self {
        assert_eq!(v.len(), w.len());
        Self::from_fn(v.len(), |r, c| v[r] * w[c].conj())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.n, |r, c| self[(c, r)].conj())
    }

    /// (A + A^H) / 2
    pub fn hermitize(&self) -> Self {
        Self::from_fn(self.n, |r, c| (self[(r, c)] + self[(c, r)].conj()) * 0.5)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn scale_c(&self, s: C64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn mul_vec(&self, v: &[C64]) -> CVec {
        debug_assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|r| {
                let row = &self.data[r * self.n..(r + 1) * self.n];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// v^H A w
    pub fn sandwich(&self, v: &[C64], w: &[C64]) -> C64 {
        let aw = self.mul_vec(w);
        dot(v, &aw)
    }

    /// Real part of v^H A v; exact for Hermitian A up to rounding.
    pub fn quad(&self, v: &[C64]) -> f64 {
        self.sandwich(v, v).re
    }

    /// self += s * v w^H
    pub fn add_outer(&mut self, s: f64, v: &[C64], w: &[C64]) {
        for r in 0..self.n {
            let vr = v[r] * s;
            for c in 0..self.n {
                self.data[r * self.n + c] += vr * w[c].conj();
            }
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &CMat) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * s;
        }
    }

    pub fn column(&self, c: usize) -> CVec {
        (0..self.n).map(|r| self[(r, c)]).collect()
    }

    pub fn row(&self, r: usize) -> CVec {
        self.data[r * self.n..(r + 1) * self.n].iter().copied().collect()
    }

    pub fn set_row(&mut self, r: usize, v: &[C64]) {
        self.data[r * self.n..(r + 1) * self.n].copy_from_slice(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Cholesky factorization of a Hermitian positive definite matrix. Only the
    /// lower triangle is read.
    pub fn cholesky(&self) -> Result<Cholesky> {
        let n = self.n;
        let mut l = CMat::zeros(n);
        for j in 0..n {
            let mut d = self[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::numerical(
                    Stage::Linalg,
                    format!("matrix is not positive definite (pivot {j} = {d:e})"),
                ));
            }
            let d = d.sqrt();
            l[(j, j)] = C64::new(d, 0.0);
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    /// LU with partial pivoting; returns the inverse of a general square matrix.
    pub fn inverse(&self) -> Result<CMat> {
        let n = self.n;
        let mut a = self.clone();
        let mut inv = CMat::identity(n);
        let scale = self.frobenius().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[(x, col)].norm().total_cmp(&a[(y, col)].norm()))
                .unwrap();
            if a[(pivot, col)].norm() <= 1e-14 * scale {
                return Err(Error::numerical(Stage::Linalg, "matrix is singular"));
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let p = ONE / a[(col, col)];
            for c in 0..n {
                a[(col, c)] *= p;
                inv[(col, c)] *= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f == ZERO {
                    continue;
                }
                for c in 0..n {
                    let ac = a[(col, c)];
                    let ic = inv[(col, c)];
                    a[(r, c)] -= f * ac;
                    inv[(r, c)] -= f * ic;
                }
            }
        }
        Ok(inv)
    }

    /// Determinant by Gaussian elimination.
    pub fn det(&self) -> C64 {
        let n = self.n;
        let mut a = self.clone();
        let mut det = ONE;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[(x, col)].norm().total_cmp(&a[(y, col)].norm()))
                .unwrap();
            if a[(pivot, col)] == ZERO {
                return ZERO;
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                }
                det = -det;
            }
            let p = a[(col, col)];
            det *= p;
            for r in col + 1..n {
                let f = a[(r, col)] / p;
                for c in col..n {
                    let ac = a[(col, c)];
                    a[(r, c)] -= f * ac;
                }
            }
        }
        det
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.n + c]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.n + c]
    }
}

impl Add for &CMat {
    type Output = CMat;
    fn add(self, rhs: &CMat) -> CMat {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl AddAssign<&CMat> for CMat {
    fn add_assign(&mut self, rhs: &CMat) {
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += b;
        }
    }
}

impl Sub for &CMat {
    type Output = CMat;
    fn sub(self, rhs: &CMat) -> CMat {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(rhs.data.iter()) {
            *a -= b;
        }
        out
    }
}

impl Mul for &CMat {
    type Output = CMat;
    fn mul(self, rhs: &CMat) -> CMat {
        let n = self.n;
        let mut out = CMat::zeros(n);
        for r in 0..n {
            for k in 0..n {
                let a = self[(r, k)];
                if a == ZERO {
                    continue;
                }
                for c in 0..n {
                    out.data[r * n + c] += a * rhs.data[k * n + c];
                }
            }
        }
        out
    }
}

/// Lower-triangular factor L with A = L L^H.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: CMat,
}

impl Cholesky {
    pub fn solve_vec(&self, b: &[C64]) -> CVec {
        let n = self.l.n;
        let l = &self.l;
        let mut y: CVec = b.iter().copied().collect();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)].re;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)].conj() * y[k];
            }
            y[i] = s / l[(i, i)].re;
        }
        y
    }

    /// A^{-1} B
    pub fn solve_mat(&self, b: &CMat) -> CMat {
        let n = self.l.n;
        let mut out = CMat::zeros(n);
        for c in 0..n {
            let col = self.solve_vec(&b.column(c));
            for r in 0..n {
                out[(r, c)] = col[r];
            }
        }
        out
    }

    pub fn inverse(&self) -> CMat {
        self.solve_mat(&CMat::identity(self.l.n)).hermitize()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.l.n).map(|i| self.l[(i, i)].re.ln()).sum::<f64>()
    }
}

/// u^H v
pub fn dot(u: &[C64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn sub_vec(u: &[C64], v: &[C64]) -> CVec {
    u.iter().zip(v).map(|(a, b)| a - b).collect()
}

pub fn scale_vec(v: &[C64], s: C64) -> CVec {
    v.iter().map(|x| x * s).collect()
}

/// Eigendecomposition of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: CMat,
}

const HERMITIAN_TOL: f64 = 1e-8;

/// Eigenvalues in ascending order with orthonormal eigenvectors. Each
/// eigenvector's phase is fixed so that its largest-magnitude entry is real and
/// positive.
pub fn eig_hermitian(h: &CMat) -> Result<HermitianEigen> {
    let n = h.dim();
    let scale = h.frobenius();
    let asym = h.max_abs_diff(&h.adjoint());
    if !h.is_finite() || asym > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(
            Stage::Linalg,
            format!("matrix is not Hermitian (asymmetry {asym:e})"),
        ));
    }
    let sym = h.hermitize();
    let dm = DMatrix::from_fn(n, n, |r, c| sym[(r, c)]);
    let eig = SymmetricEigen::new(dm);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMat::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        let col: CVec = (0..n).map(|r| eig.eigenvectors[(r, src)]).collect();
        let col = fix_phase(&col);
        for r in 0..n {
            vectors[(r, dst)] = col[r];
        }
    }
    Ok(HermitianEigen { values, vectors })
}

/// Rotates `v` so its largest-magnitude entry (first on ties) is real positive.
pub fn fix_phase(v: &[C64]) -> CVec {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if x.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = k;
        }
    }
    let pivot = v[best];
    if pivot.norm() == 0.0 {
        return v.iter().copied().collect();
    }
    let rot = pivot.conj() / pivot.norm();
    v.iter().map(|x| x * rot).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_mat(rng: &mut ChaCha8Rng, n: usize) -> CMat {
        CMat::from_fn(n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn cholesky_solve_and_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=5 {
            let b = random_mat(&mut rng, n);
            let a = &(&b * &b.adjoint()) + &CMat::identity(n).scale(0.1);
            let ch = a.cholesky().unwrap();
            let inv = ch.inverse();
            let prod = &a * &inv;
            assert!(prod.max_abs_diff(&CMat::identity(n)) < 1e-10);
            let det = a.det();
            assert!((det.re.ln() - ch.log_det()).abs() < 1e-10);
            assert!(det.im.abs() < 1e-10 * det.re.abs());
            let lu = a.inverse().unwrap();
            assert!(lu.max_abs_diff(&inv) < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = CMat::diag(&[1.0, -1.0]);
        assert!(a.cholesky().is_err());
        assert!(CMat::zeros(2).cholesky().is_err());
    }

    #[test]
    fn lu_rejects_singular() {
        let v = [c(1.0, 0.0), c(2.0, 1.0)];
        assert!(CMat::outer(&v, &v).inverse().is_err());
    }

    #[test]
    fn eig_identity() {
        let e = eig_hermitian(&CMat::identity(3)).unwrap();
        for v in &e.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let vh_v = &e.vectors.adjoint() * &e.vectors;
        assert!(vh_v.max_abs_diff(&CMat::identity(3)) < 1e-9);
    }

    #[test]
    fn eig_diagonal_sorted() {
        let e = eig_hermitian(&CMat::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);
        assert!((e.values[2] - 3.0).abs() < 1e-12);
        // eigenvector of 1 is e2, phase-fixed to +1
        assert!((e.vectors[(1, 0)] - ONE).norm() < 1e-12);
    }

    #[test]
    fn eig_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=5 {
            for _ in 0..50 {
                let b = random_mat(&mut rng, n);
                let h = &b + &b.adjoint();
                let e = eig_hermitian(&h).unwrap();
                let scale = h.frobenius();
                let hv = &h * &e.vectors;
                let vl = &e.vectors * &CMat::diag(&e.values);
                assert!(hv.max_abs_diff(&vl) < 1e-9 * scale);
                let recon = &vl * &e.vectors.adjoint();
                assert!((&recon - &h).frobenius() < 1e-9 * scale);
                let vh_v = &e.vectors.adjoint() * &e.vectors;
                assert!(vh_v.max_abs_diff(&CMat::identity(n)) < 1e-9);
                assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let a = CMat::from_rows(&[&[ONE, ONE], &[ZERO, ONE]]);
        assert!(eig_hermitian(&a).is_err());
    }

    #[test]
    fn phase_convention() {
        let v = [c(0.0, 0.1), c(0.0, -2.0)];
        let f = fix_phase(&v);
        assert!((f[1] - c(2.0, 0.0)).norm() < 1e-15);
        assert!((f[0] - c(-0.1, 0.0)).norm() < 1e-15);
    }
}
