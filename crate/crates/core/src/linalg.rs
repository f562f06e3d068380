//! Dense complex matrices, a canonicalized SVD, Schatten norms and the two
//! hard-thresholding primitives (entrywise and spectral).

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};

use nalgebra::{DMatrix, SVD};
use num_complex::Complex64;

use crate::error::{arg_err, shape_err, Error, Result};

pub type C64 = Complex64;

pub const ORTHONORMAL_TOL: f64 = 1e-10;
pub const RECONSTRUCTION_TOL: f64 = 1e-8;

const SVD_MAX_ITERS: usize = 10_000;

// ── MatrixValue ─────────────────────────────────────────────────────

/// Dense row-major complex matrix. Real matrices carry exact-zero imaginary
/// parts.
#[derive(Clone, PartialEq)]
pub struct MatrixValue {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for MatrixValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "MatrixValue {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                if z.im == 0.0 {
                    write!(f, "{:>10.4} ", z.re)?;
                } else {
                    write!(f, "{:>8.4}{:+.4}i ", z.re, z.im)?;
                }
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl MatrixValue {
    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(arg_err("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(arg_err("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    /// Builds from row slices; panics on ragged input. Meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_real(rows.len(), cols, &data).expect("finite literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_fn(d, d, |r, c| C64::new(if r == c { 1.0 } else { 0.0 }, 0.0))
    }

    pub fn diag(values: &[f64]) -> Self {
        let d = values.len();
        Self::from_fn(d, d, |r, c| C64::new(if r == c { values[r] } else { 0.0 }, 0.0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// True when every imaginary part is exactly zero.
    pub fn is_real(&self) -> bool {
        self.data.iter().all(|z| z.im == 0.0)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|r| {
                (r..self.cols).all(|c| (self[(r, c)] - self[(c, r)].conj()).norm() <= tol)
            })
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.data.iter().fold(0.0, |m, z| m.max(z.im.abs()))
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn conj(&self) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|z| z.conj()).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|z| z * s).collect())
    }

    pub fn scale_complex(&self, s: C64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|z| z * s).collect())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err(
                format!("left cols = right rows = {}", self.cols),
                format!("right rows = {}", other.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if v.len() != self.cols {
            return Err(shape_err(format!("vector of length {}", self.cols), format!("{}", v.len())));
        }
        Ok((0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    pub fn kron(&self, other: &Self) -> Self {
        let (r2, c2) = other.shape();
        Self::from_fn(self.rows * r2, self.cols * c2, |r, c| {
            self[(r / r2, c / c2)] * other[(r % r2, c % c2)]
        })
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Real trace inner product `Re tr(Aᴴ B)`.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn from_columns(rows: usize, columns: &[Vec<C64>]) -> Self {
        Self::from_fn(rows, columns.len(), |r, c| columns[c][r])
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    fn to_nalgebra_real(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)].re)
    }
}

impl Index<(usize, usize)> for MatrixValue {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for MatrixValue {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &MatrixValue {
    type Output = MatrixValue;
    fn add(self, rhs: &MatrixValue) -> MatrixValue {
        self.try_add(rhs).expect("shape mismatch in matrix addition")
    }
}

impl Sub for &MatrixValue {
    type Output = MatrixValue;
    fn sub(self, rhs: &MatrixValue) -> MatrixValue {
        self.try_sub(rhs).expect("shape mismatch in matrix subtraction")
    }
}

impl AddAssign<&MatrixValue> for MatrixValue {
    fn add_assign(&mut self, rhs: &MatrixValue) {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in matrix addition");
        self.data.iter_mut().zip(&rhs.data).for_each(|(a, b)| *a += b);
    }
}

impl Mul<f64> for &MatrixValue {
    type Output = MatrixValue;
    fn mul(self, s: f64) -> MatrixValue {
        self.scale(s)
    }
}

impl Neg for &MatrixValue {
    type Output = MatrixValue;
    fn neg(self) -> MatrixValue {
        self.scale(-1.0)
    }
}

// ── SVD ─────────────────────────────────────────────────────────────

/// Thin SVD `A = left · diag(singular_values) · rightᴴ`.
///
/// Canonical form: singular values descending; for every nonzero triplet the
/// largest-modulus entry of the left vector (lowest index on ties) is real and
/// positive; vectors of zero singular values are the Gram-Schmidt completion of
/// the standard basis, taken in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub left: MatrixValue,
    pub singular_values: Vec<f64>,
    pub right: MatrixValue,
}

impl SvdFactors {
    /// `left · diag(values) · rightᴴ` for an arbitrary replacement spectrum.
    pub fn reconstruct_with(&self, values: &[f64]) -> MatrixValue {
        let (m, n) = (self.left.rows(), self.right.rows());
        let mut out = MatrixValue::zeros(m, n);
        for (j, &s) in values.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let u = self.left.column(j);
            let v = self.right.column(j);
            for r in 0..m {
                let us = u[r] * s;
                if us == C64::new(0.0, 0.0) {
                    continue;
                }
                let row = &mut out.as_mut_slice()[r * n..(r + 1) * n];
                for (dst, vc) in row.iter_mut().zip(&v) {
                    *dst += us * vc.conj();
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> MatrixValue {
        self.reconstruct_with(&self.singular_values)
    }

    /// Number of strictly positive singular values.
    pub fn rank(&self) -> usize {
        self.singular_values.iter().filter(|&&s| s > 0.0).count()
    }
}

/// Canonicalized thin SVD. Real inputs take a real decomposition path.
pub fn svd(a: &MatrixValue) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(arg_err("svd input must be finite"));
    }
    let (m, n) = a.shape();
    let p = m.min(n);

    let (mut left, mut values, mut right) = if a.is_real() {
        match real_svd_nalgebra(a) {
            Some(raw) => raw,
            None => jacobi_svd(a)?,
        }
    } else {
        jacobi_svd(a)?
    };

    // Descending order, stable on ties.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).expect("finite singular values"));
    left = order.iter().map(|&i| left[i].clone()).collect();
    right = order.iter().map(|&i| right[i].clone()).collect();
    values = order.iter().map(|&i| values[i].max(0.0)).collect();

    let smax = values.first().copied().unwrap_or(0.0);
    let zero_tol = f64::EPSILON * (m.max(n) as f64) * smax;
    let nonzero = values.iter().take_while(|&&s| s > zero_tol && s > 0.0).count();

    for j in 0..nonzero {
        canonicalize_phase(&mut left[j], &mut right[j]);
    }
    for v in values.iter_mut().skip(nonzero) {
        *v = 0.0;
    }
    left.truncate(nonzero);
    right.truncate(nonzero);
    complete_basis(&mut left, m, p);
    complete_basis(&mut right, n, p);

    Ok(SvdFactors {
        left: MatrixValue::from_columns(m, &left),
        singular_values: values,
        right: MatrixValue::from_columns(n, &right),
    })
}

type RawSvd = (Vec<Vec<C64>>, Vec<f64>, Vec<Vec<C64>>);

/// Real bidiagonalization SVD. Returns `None` when the factors fail the
/// reconstruction check so the caller can fall back to Jacobi.
fn real_svd_nalgebra(a: &MatrixValue) -> Option<RawSvd> {
    let (m, n) = a.shape();
    let p = m.min(n);
    let s = SVD::try_new(a.to_nalgebra_real(), true, true, 5.0 * f64::EPSILON, SVD_MAX_ITERS)?;
    let u = s.u?;
    let vt = s.v_t?;
    let left: Vec<Vec<C64>> = (0..p)
        .map(|j| (0..m).map(|r| C64::new(u[(r, j)], 0.0)).collect())
        .collect();
    let right: Vec<Vec<C64>> = (0..p)
        .map(|j| (0..n).map(|r| C64::new(vt[(j, r)], 0.0)).collect())
        .collect();
    let values: Vec<f64> = s.singular_values.iter().copied().collect();
    let f = SvdFactors {
        left: MatrixValue::from_columns(m, &left),
        singular_values: values.clone(),
        right: MatrixValue::from_columns(n, &right),
    };
    let scale = a.frobenius_norm();
    if (&f.reconstruct() - a).frobenius_norm() > 1e-12 * scale.max(f64::MIN_POSITIVE) * (m.max(n) as f64) {
        log::debug!("real SVD failed its reconstruction check, falling back to Jacobi");
        return None;
    }
    Some((left, values, right))
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD for complex matrices.
fn jacobi_svd(a: &MatrixValue) -> Result<RawSvd> {
    let (m, n) = a.shape();
    if m < n {
        let (l, s, r) = jacobi_svd(&a.adjoint())?;
        return Ok((r, s, l));
    }
    let zero = C64::new(0.0, 0.0);
    // Column-major working copies.
    let mut g: Vec<Vec<C64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<C64>> = (0..n)
        .map(|c| (0..n).map(|r| C64::new(if r == c { 1.0 } else { 0.0 }, 0.0)).collect())
        .collect();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = g[p].iter().map(|z| z.norm_sqr()).sum();
                let beta: f64 = g[q].iter().map(|z| z.norm_sqr()).sum();
                let gamma: C64 = g[p].iter().zip(&g[q]).map(|(x, y)| x.conj() * y).sum();
                let gabs = gamma.norm();
                if gabs == 0.0 || gabs <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma.conj() / gabs;
                let zeta = (beta - alpha) / (2.0 * gabs);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut g, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let yq = *xq * phase;
                        let np = *xp * c - yq * s;
                        let nq = *xp * s + yq * c;
                        *xp = np;
                        *xq = nq;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    let mut values = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    for col in g {
        let s = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        values.push(s);
        left.push(if s > 0.0 { col.into_iter().map(|z| z / s).collect() } else { vec![zero; m] });
    }
    Ok((left, values, v))
}

fn canonicalize_phase(u: &mut [C64], v: &mut [C64]) {
    let mut best = 0;
    let mut best_mod = -1.0;
    for (i, z) in u.iter().enumerate() {
        let m = z.norm();
        if m > best_mod {
            best_mod = m;
            best = i;
        }
    }
    if best_mod <= 0.0 {
        return;
    }
    let phase = u[best].conj() / best_mod;
    for z in u.iter_mut() {
        *z *= phase;
    }
    for z in v.iter_mut() {
        *z *= phase;
    }
    u[best] = C64::new(best_mod, 0.0);
}

/// Extends an orthonormal set to `target` vectors with standard-basis vectors
/// in index order, orthogonalized by two Gram-Schmidt passes.
fn complete_basis(vectors: &mut Vec<Vec<C64>>, dim: usize, target: usize) {
    let mut e = 0;
    while vectors.len() < target && e < dim {
        let mut w = vec![C64::new(0.0, 0.0); dim];
        w[e] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for q in vectors.iter() {
                let proj: C64 = q.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= proj * qi;
                }
            }
        }
        let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for z in w.iter_mut() {
                *z /= norm;
            }
            vectors.push(w);
        }
        e += 1;
    }
}

// ── Thresholding ────────────────────────────────────────────────────

/// Keeps `u[i]` when `|u[i]| >= threshold`, zeroes it otherwise.
pub fn hard_threshold_entries(u: &[f64], threshold: f64) -> Result<Vec<f64>> {
    check_threshold(threshold)?;
    Ok(u.iter()
        .map(|&x| if x.abs() >= threshold { x } else { 0.0 })
        .collect())
}

/// Spectral hard thresholding: singular values below `threshold` are zeroed.
pub fn hard_threshold_singular(a: &MatrixValue, threshold: f64) -> Result<MatrixValue> {
    hard_threshold_singular_ranked(a, threshold).map(|(m, _)| m)
}

/// Spectral hard thresholding that also reports the number of kept
/// (positive) singular values.
pub fn hard_threshold_singular_ranked(
    a: &MatrixValue,
    threshold: f64,
) -> Result<(MatrixValue, usize)> {
    check_threshold(threshold)?;
    let f = svd(a)?;
    let kept: Vec<f64> = f
        .singular_values
        .iter()
        .map(|&s| if s >= threshold && s > 0.0 { s } else { 0.0 })
        .collect();
    let rank = kept.iter().filter(|&&s| s > 0.0).count();
    Ok((f.reconstruct_with(&kept), rank))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(arg_err(format!("threshold must be a finite nonnegative number, got {t}")));
    }
    Ok(())
}

// ── Norms ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SchattenOrder {
    P(f64),
    Operator,
}

pub fn schatten_norm(a: &MatrixValue, order: SchattenOrder) -> Result<f64> {
    if let SchattenOrder::P(p) = order {
        if !(p > 0.0) || !p.is_finite() {
            return Err(arg_err(format!("Schatten order must be positive, got {p}")));
        }
    }
    let s = svd(a)?.singular_values;
    Ok(schatten_from_values(&s, order))
}

pub(crate) fn schatten_from_values(s: &[f64], order: SchattenOrder) -> f64 {
    match order {
        SchattenOrder::Operator => s.iter().fold(0.0, |m: f64, &x| m.max(x)),
        SchattenOrder::P(2.0) => s.iter().map(|x| x * x).sum::<f64>().sqrt(),
        SchattenOrder::P(1.0) => s.iter().sum(),
        SchattenOrder::P(p) => s.iter().map(|x| x.powf(p)).sum::<f64>().powf(1.0 / p),
    }
}

pub fn entrywise_inf_norm(a: &MatrixValue) -> f64 {
    a.as_slice().iter().fold(0.0, |m, z| m.max(z.norm()))
}

// ── Variational singular-value bound ────────────────────────────────

/// Outcome of [`restricted_singular_bound_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestrictedBound {
    pub singular_value: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks `λ_j(M) <= sup { |uᴴ M v| : ‖u‖ = ‖v‖ = 1, u ⟂ W }` where `W`
/// holds `j - 1` orthonormal vectors and `j` is 1-based. The supremum is the
/// operator norm of `(I - W Wᴴ) M`.
pub fn restricted_singular_bound_check(
    m: &MatrixValue,
    j: usize,
    w: &[Vec<C64>],
) -> Result<RestrictedBound> {
    let (d1, d2) = m.shape();
    if j == 0 || j > d1.min(d2) {
        return Err(arg_err(format!("index j = {j} outside 1..={}", d1.min(d2))));
    }
    if w.len() != j - 1 {
        return Err(arg_err(format!("expected {} orthogonal vectors, got {}", j - 1, w.len())));
    }
    for (a, wa) in w.iter().enumerate() {
        if wa.len() != d1 {
            return Err(shape_err(format!("vectors of length {d1}"), format!("{}", wa.len())));
        }
        for (b, wb) in w.iter().enumerate().skip(a) {
            let ip: C64 = wa.iter().zip(wb).map(|(x, y)| x.conj() * y).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            if (ip - target).norm() > 1e-8 {
                return Err(arg_err("W must be orthonormal"));
            }
        }
    }
    let mut proj = MatrixValue::identity(d1);
    for wa in w {
        for r in 0..d1 {
            for c in 0..d1 {
                proj[(r, c)] -= wa[r] * wa[c].conj();
            }
        }
    }
    let projected = proj.matmul(m)?;
    let bound = schatten_norm(&projected, SchattenOrder::Operator)?;
    let singular_value = svd(m)?.singular_values[j - 1];
    Ok(RestrictedBound {
        singular_value,
        bound,
        holds: singular_value <= bound + 1e-8,
    })
}
