//! The trace-regression measurement model `Y_i = Re tr(X_iᴴ Θ) + ε_i`.
//!
//! A [`DesignBatch`] realizes the forward operator `A ↦ (Re tr(X_iᴴ A))_i`
//! and its adjoint `v ↦ (1/n) Σ_i v_i X_i` with respect to the real trace
//! inner product `⟨A, B⟩ = Re tr(Aᴴ B)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{MatrixValue, C64};
use crate::par::{Execution, CHUNK};
use crate::rng;

/// Imaginary residue above which a Hermitian-by-construction evaluation is
/// reported.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    /// `n · d²` row-major real entries.
    Real(Vec<f64>),
    /// `n · d²` row-major complex entries.
    Complex(Vec<C64>),
    /// Matrices with exactly one nonzero per row: row `r` of matrix `i` holds
    /// `vals[i·d + r]` at column `cols[i·d + r]`. Pauli strings are of this
    /// form.
    Monomial { cols: Vec<u32>, vals: Vec<C64> },
}

/// An ordered batch of `n` square `d × d` measurement matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignBatch {
    n: usize,
    dim: usize,
    storage: Storage,
    hermitian: bool,
}

impl DesignBatch {
    /// Builds a batch from explicit matrices. All-real input is stored in
    /// real form.
    pub fn from_matrices(matrices: &[MatrixValue]) -> Result<Self> {
        let first = matrices.first().ok_or_else(|| arg_err("design batch needs n >= 1"))?;
        let d = first.rows();
        for (i, m) in matrices.iter().enumerate() {
            if m.shape() != (d, d) {
                return Err(shape_err(
                    format!("{d}x{d} design matrices"),
                    format!("matrix {i} is {}x{}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(arg_err(format!("design matrix {i} has non-finite entries")));
            }
        }
        let entries = matrices.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Self::from_complex_entries(matrices.len(), d, entries)
    }

    /// Builds a batch from `n · d²` row-major complex entries. All-real input
    /// is stored in real form.
    pub fn from_complex_entries(n: usize, d: usize, entries: Vec<C64>) -> Result<Self> {
        if entries.iter().all(|z| z.im == 0.0) {
            return Self::from_real_entries(n, d, entries.iter().map(|z| z.re).collect());
        }
        if n == 0 || d == 0 {
            return Err(arg_err("design batch needs n >= 1 and d >= 1"));
        }
        if entries.len() != n * d * d {
            return Err(shape_err(format!("{} entries", n * d * d), format!("{}", entries.len())));
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(arg_err("design entries must be finite"));
        }
        let hermitian = (0..n).all(|i| {
            let m = &entries[i * d * d..(i + 1) * d * d];
            (0..d).all(|r| (r..d).all(|c| m[r * d + c] == m[c * d + r].conj()))
        });
        Ok(Self {
            n,
            dim: d,
            storage: Storage::Complex(entries),
            hermitian,
        })
    }

    /// Builds a real batch from `n · d²` row-major entries.
    pub fn from_real_entries(n: usize, d: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(arg_err("design batch needs n >= 1 and d >= 1"));
        }
        if entries.len() != n * d * d {
            return Err(shape_err(format!("{} entries", n * d * d), format!("{}", entries.len())));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(arg_err("design entries must be finite"));
        }
        let hermitian = (0..n).all(|i| {
            let m = &entries[i * d * d..(i + 1) * d * d];
            (0..d).all(|r| (r + 1..d).all(|c| m[r * d + c] == m[c * d + r]))
        });
        Ok(Self {
            n,
            dim: d,
            storage: Storage::Real(entries),
            hermitian,
        })
    }

    /// Builds a batch of monomial matrices (one nonzero per row).
    pub fn from_monomial(n: usize, d: usize, cols: Vec<u32>, vals: Vec<C64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(arg_err("design batch needs n >= 1 and d >= 1"));
        }
        if cols.len() != n * d || vals.len() != n * d {
            return Err(shape_err(format!("{} monomial entries", n * d), format!("{}/{}", cols.len(), vals.len())));
        }
        if cols.iter().any(|&c| c as usize >= d) {
            return Err(arg_err("monomial column index out of range"));
        }
        if vals.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(arg_err("design entries must be finite"));
        }
        let hermitian = (0..n).all(|i| {
            let c = &cols[i * d..(i + 1) * d];
            let v = &vals[i * d..(i + 1) * d];
            (0..d).all(|r| {
                let t = c[r] as usize;
                c[t] as usize == r && v[t] == v[r].conj()
            })
        });
        Ok(Self {
            n,
            dim: d,
            storage: Storage::Monomial { cols, vals },
            hermitian,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when every design matrix is real.
    pub fn is_real(&self) -> bool {
        match &self.storage {
            Storage::Real(_) => true,
            Storage::Complex(v) => v.iter().all(|z| z.im == 0.0),
            Storage::Monomial { vals, .. } => vals.iter().all(|z| z.im == 0.0),
        }
    }

    /// True when every design matrix is exactly Hermitian.
    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    /// Entry `(r, c)` of matrix `i`.
    pub fn entry(&self, i: usize, r: usize, c: usize) -> C64 {
        let d = self.dim;
        assert!(i < self.n && r < d && c < d, "design index out of range");
        match &self.storage {
            Storage::Real(v) => C64::new(v[i * d * d + r * d + c], 0.0),
            Storage::Complex(v) => v[i * d * d + r * d + c],
            Storage::Monomial { cols, vals } => {
                if cols[i * d + r] as usize == c {
                    vals[i * d + r]
                } else {
                    C64::new(0.0, 0.0)
                }
            }
        }
    }

    pub fn matrix(&self, i: usize) -> MatrixValue {
        let d = self.dim;
        assert!(i < self.n, "design index out of range");
        match &self.storage {
            Storage::Real(v) => MatrixValue::from_raw(
                d,
                d,
                v[i * d * d..(i + 1) * d * d].iter().map(|&x| C64::new(x, 0.0)).collect(),
            ),
            Storage::Complex(v) => MatrixValue::from_raw(d, d, v[i * d * d..(i + 1) * d * d].to_vec()),
            Storage::Monomial { cols, vals } => {
                let mut m = MatrixValue::zeros(d, d);
                for r in 0..d {
                    m[(r, cols[i * d + r] as usize)] = vals[i * d + r];
                }
                m
            }
        }
    }

    pub fn matrices(&self) -> Vec<MatrixValue> {
        (0..self.n).map(|i| self.matrix(i)).collect()
    }

    /// Multiplies every design matrix by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let storage = match &self.storage {
            Storage::Real(v) => Storage::Real(v.iter().map(|x| x * s).collect()),
            Storage::Complex(v) => Storage::Complex(v.iter().map(|x| x * s).collect()),
            Storage::Monomial { cols, vals } => Storage::Monomial {
                cols: cols.clone(),
                vals: vals.iter().map(|x| x * s).collect(),
            },
        };
        Self { storage, ..self.clone() }
    }

    fn check_operand(&self, a: &MatrixValue) -> Result<()> {
        if a.shape() != (self.dim, self.dim) {
            return Err(shape_err(
                format!("{0}x{0} operand", self.dim),
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        Ok(())
    }

    /// Forward operator: component `i` is `Re tr(X_iᴴ A)`.
    pub fn apply(&self, a: &MatrixValue) -> Result<Vec<f64>> {
        self.apply_with(Execution::default(), a)
    }

    pub fn apply_with(&self, exec: Execution, a: &MatrixValue) -> Result<Vec<f64>> {
        self.check_operand(a)?;
        let d = self.dim;
        let dd = d * d;
        let mut out = vec![0.0; self.n];
        let check_imag = self.hermitian && !self.is_real() && a.is_hermitian(1e-9 * a.frobenius_norm().max(1.0));
        let mut imag_residue = 0.0f64;
        match &self.storage {
            Storage::Real(x) => {
                let ar = a.real_parts();
                exec.fill_chunks(&mut out, CHUNK, |off, chunk| {
                    for (k, y) in chunk.iter_mut().enumerate() {
                        let row = &x[(off + k) * dd..(off + k + 1) * dd];
                        *y = row.iter().zip(&ar).map(|(p, q)| p * q).sum();
                    }
                });
            }
            Storage::Complex(x) => {
                let av = a.as_slice();
                exec.fill_chunks(&mut out, CHUNK, |off, chunk| {
                    for (k, y) in chunk.iter_mut().enumerate() {
                        let row = &x[(off + k) * dd..(off + k + 1) * dd];
                        *y = row.iter().zip(av).map(|(p, q)| p.re * q.re + p.im * q.im).sum();
                    }
                });
                if check_imag {
                    imag_residue = exec
                        .map(self.n, |i| {
                            let row = &x[i * dd..(i + 1) * dd];
                            row.iter().zip(av).map(|(p, q)| p.re * q.im - p.im * q.re).sum::<f64>().abs()
                        })
                        .into_iter()
                        .fold(0.0, f64::max);
                }
            }
            Storage::Monomial { cols, vals } => {
                let av = a.as_slice();
                let term = |i: usize, r: usize| {
                    let p = vals[i * d + r];
                    let q = av[r * d + cols[i * d + r] as usize];
                    (p.re * q.re + p.im * q.im, p.re * q.im - p.im * q.re)
                };
                exec.fill_chunks(&mut out, CHUNK, |off, chunk| {
                    for (k, y) in chunk.iter_mut().enumerate() {
                        *y = (0..d).map(|r| term(off + k, r).0).sum();
                    }
                });
                if check_imag {
                    imag_residue = exec
                        .map(self.n, |i| (0..d).map(|r| term(i, r).1).sum::<f64>().abs())
                        .into_iter()
                        .fold(0.0, f64::max);
                }
            }
        }
        if imag_residue > IMAG_RESIDUE_TOL {
            log::warn!("trace evaluation left an imaginary residue of {imag_residue:.3e} on Hermitian inputs");
        }
        Ok(out)
    }

    /// Adjoint backprojection `(1/n) Σ_i v_i X_i`.
    pub fn adjoint_apply(&self, v: &[f64]) -> Result<MatrixValue> {
        self.adjoint_apply_with(Execution::default(), v)
    }

    /// Chunked reduction: partial sums over fixed blocks of `CHUNK` rows are
    /// combined in block order, so the result does not depend on `exec`.
    pub fn adjoint_apply_with(&self, exec: Execution, v: &[f64]) -> Result<MatrixValue> {
        if v.len() != self.n {
            return Err(shape_err(format!("weight vector of length {}", self.n), format!("{}", v.len())));
        }
        let d = self.dim;
        let dd = d * d;
        let nchunks = self.n.div_ceil(CHUNK);
        let range = |c: usize| c * CHUNK..((c + 1) * CHUNK).min(self.n);
        let inv_n = 1.0 / self.n as f64;
        let data = match &self.storage {
            Storage::Real(x) => {
                let partials = exec.map(nchunks, |c| {
                    let mut acc = vec![0.0; dd];
                    for i in range(c) {
                        let w = v[i];
                        if w == 0.0 {
                            continue;
                        }
                        for (a, p) in acc.iter_mut().zip(&x[i * dd..(i + 1) * dd]) {
                            *a += w * p;
                        }
                    }
                    acc
                });
                let mut total = vec![0.0; dd];
                for p in partials {
                    total.iter_mut().zip(p).for_each(|(t, x)| *t += x);
                }
                total.into_iter().map(|x| C64::new(x * inv_n, 0.0)).collect()
            }
            Storage::Complex(x) => {
                let partials = exec.map(nchunks, |c| {
                    let mut acc = vec![C64::new(0.0, 0.0); dd];
                    for i in range(c) {
                        let w = v[i];
                        if w == 0.0 {
                            continue;
                        }
                        for (a, p) in acc.iter_mut().zip(&x[i * dd..(i + 1) * dd]) {
                            *a += p * w;
                        }
                    }
                    acc
                });
                sum_complex(partials, dd, inv_n)
            }
            Storage::Monomial { cols, vals } => {
                let partials = exec.map(nchunks, |c| {
                    let mut acc = vec![C64::new(0.0, 0.0); dd];
                    for i in range(c) {
                        let w = v[i];
                        if w == 0.0 {
                            continue;
                        }
                        for r in 0..d {
                            acc[r * d + cols[i * d + r] as usize] += vals[i * d + r] * w;
                        }
                    }
                    acc
                });
                sum_complex(partials, dd, inv_n)
            }
        };
        Ok(MatrixValue::from_raw(d, d, data))
    }

    /// `(1/n) Σ_i |X_i[r, c]|²` for every entry, row-major.
    pub fn entry_second_moments(&self) -> Vec<f64> {
        let d = self.dim;
        let dd = d * d;
        let mut acc = vec![0.0; dd];
        match &self.storage {
            Storage::Real(x) => {
                for row in x.chunks(dd) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v * v);
                }
            }
            Storage::Complex(x) => {
                for row in x.chunks(dd) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.norm_sqr());
                }
            }
            Storage::Monomial { cols, vals } => {
                for i in 0..self.n {
                    for r in 0..d {
                        acc[r * d + cols[i * d + r] as usize] += vals[i * d + r].norm_sqr();
                    }
                }
            }
        }
        acc.into_iter().map(|a| a / self.n as f64).collect()
    }

    /// Values `X_i[r, c]` across the batch.
    pub fn entry_series(&self, r: usize, c: usize) -> Result<Vec<C64>> {
        if r >= self.dim || c >= self.dim {
            return Err(arg_err(format!("entry ({r}, {c}) outside a {0}x{0} design", self.dim)));
        }
        Ok((0..self.n).map(|i| self.entry(i, r, c)).collect())
    }
}

fn sum_complex(partials: Vec<Vec<C64>>, dd: usize, scale: f64) -> Vec<C64> {
    let mut total = vec![C64::new(0.0, 0.0); dd];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(t, x)| *t += x);
    }
    total.into_iter().map(|x| x * scale).collect()
}

// ── Observations ────────────────────────────────────────────────────

/// Observed responses, with the realized noise kept when simulated.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub values: Vec<f64>,
    pub noise_std: f64,
    /// Realized additive noise (already multiplied by `noise_std`).
    pub noise: Option<Vec<f64>>,
    pub truth_ref: Option<String>,
}

impl Observations {
    /// Wraps measured responses that carry no simulation metadata.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(arg_err("observations must be finite"));
        }
        Ok(Self {
            values,
            noise_std: 0.0,
            noise: None,
            truth_ref: None,
        })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|x| x * s).collect(),
            noise_std: self.noise_std * s.abs(),
            noise: self.noise.as_ref().map(|e| e.iter().map(|x| x * s).collect()),
            truth_ref: self.truth_ref.clone(),
        }
    }

    pub(crate) fn check_against(&self, design: &DesignBatch) -> Result<()> {
        if self.values.len() != design.n() {
            return Err(shape_err(
                format!("{} observations", design.n()),
                format!("{}", self.values.len()),
            ));
        }
        Ok(())
    }
}

// ── Generators ──────────────────────────────────────────────────────

/// i.i.d. standard normal real design, deterministic in `seed`.
pub fn gen_gaussian_design(n: usize, d: usize, seed: u64) -> Result<DesignBatch> {
    if n == 0 || d == 0 {
        return Err(arg_err("gaussian design needs n >= 1 and d >= 1"));
    }
    let mut r = rng::stream(seed);
    let entries: Vec<f64> = (0..n * d * d).map(|_| r.sample(StandardNormal)).collect();
    DesignBatch::from_real_entries(n, d, entries)
}

/// The exact-isometry design `{d · B_j}` for an orthonormal basis `{B_j}` of
/// the `d × d` matrices (`n = d²`).
pub fn orthonormal_basis_design(basis: &[MatrixValue]) -> Result<DesignBatch> {
    let first = basis.first().ok_or_else(|| arg_err("empty basis"))?;
    let d = first.rows();
    if basis.len() != d * d {
        return Err(shape_err(format!("{} basis elements", d * d), format!("{}", basis.len())));
    }
    let scaled: Vec<MatrixValue> = basis.iter().map(|b| b.scale(d as f64)).collect();
    DesignBatch::from_matrices(&scaled)
}

/// [`orthonormal_basis_design`] on the standard basis `e_a e_bᵀ`.
pub fn canonical_basis_design(d: usize) -> Result<DesignBatch> {
    if d == 0 {
        return Err(arg_err("dimension must be positive"));
    }
    let n = d * d;
    let mut entries = vec![0.0; n * n];
    for j in 0..n {
        entries[j * n + j] = d as f64;
    }
    DesignBatch::from_real_entries(n, d, entries)
}

/// `Θ = Σ_{l ≤ k} N_l N_lᵀ` with `N_l ~ N(0, I_d)`.
pub fn gen_low_rank_theta(d: usize, k: usize, seed: u64) -> Result<MatrixValue> {
    if k == 0 || k > d {
        return Err(arg_err(format!("rank must satisfy 1 <= k <= d, got k = {k}, d = {d}")));
    }
    let mut r = rng::stream(seed);
    let mut theta = vec![0.0; d * d];
    for _ in 0..k {
        let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        for a in 0..d {
            for b in 0..d {
                theta[a * d + b] += v[a] * v[b];
            }
        }
    }
    MatrixValue::from_real(d, d, &theta)
}

/// `Y = 𝕏(Θ) + noise_std · ε`, retaining the realized noise.
pub fn simulate_observations(
    design: &DesignBatch,
    theta: &MatrixValue,
    noise_std: f64,
    seed: u64,
) -> Result<Observations> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(arg_err(format!("noise_std must be finite and nonnegative, got {noise_std}")));
    }
    let clean = design.apply(theta)?;
    let mut r = rng::stream(seed);
    let noise: Vec<f64> = (0..design.n())
        .map(|_| noise_std * r.sample::<f64, _>(StandardNormal))
        .collect();
    let values = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(Observations {
        values,
        noise_std,
        noise: Some(noise),
        truth_ref: None,
    })
}

// ── Restricted isometry probing ─────────────────────────────────────

/// Monte-Carlo lower estimate of the restricted isometry constant at rank k.
#[derive(Clone, Debug, PartialEq)]
pub struct RipEstimate {
    pub k: usize,
    pub trials: usize,
    pub max_deviation: f64,
    pub deviations: Vec<f64>,
}

impl RipEstimate {
    /// Always true: probing can only bound the supremum from below.
    pub fn is_lower_estimate(&self) -> bool {
        true
    }
}

/// Random unit-Frobenius probe of rank at most `k`, matched to the design's
/// parameter space: real `G Hᵀ` for real designs, Hermitian `G D Gᴴ`
/// (random signs `D`) for Hermitian complex designs, `G Hᴴ` otherwise.
pub fn rip_probe(design: &DesignBatch, k: usize, seed: u64) -> MatrixValue {
    let d = design.dim();
    let mut r = rng::stream(seed);
    let real = design.is_real();
    let hermitian = design.is_hermitian() && !real;
    let mut draw = |complex: bool| -> Vec<C64> {
        (0..d * k)
            .map(|_| {
                let re: f64 = r.sample(StandardNormal);
                let im: f64 = if complex { r.sample(StandardNormal) } else { 0.0 };
                C64::new(re, im)
            })
            .collect()
    };
    let g = draw(!real);
    let (h, signs): (Vec<C64>, Vec<f64>) = if hermitian {
        let s = (0..k).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        (g.clone(), s)
    } else {
        (draw(!real), vec![1.0; k])
    };
    let mut a = MatrixValue::from_fn(d, d, |row, col| {
        (0..k).map(|l| g[row * k + l] * h[col * k + l].conj() * signs[l]).sum()
    });
    let norm = a.frobenius_norm();
    if norm > 0.0 {
        a = a.scale(1.0 / norm);
    }
    a
}

pub fn estimate_rip_constant(design: &DesignBatch, k: usize, trials: usize, seed: u64) -> Result<RipEstimate> {
    estimate_rip_constant_with(Execution::default(), design, k, trials, seed)
}

pub fn estimate_rip_constant_with(
    exec: Execution,
    design: &DesignBatch,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<RipEstimate> {
    if k == 0 || k > design.dim() {
        return Err(arg_err(format!("rank must satisfy 1 <= k <= d, got {k}")));
    }
    if trials == 0 {
        return Err(arg_err("trials must be >= 1"));
    }
    let deviations = exec
        .map(trials, |t| {
            let a = rip_probe(design, k, rng::derive_seed(seed, &[t as u64]));
            let y = design.apply_with(Execution::Sequential, &a)?;
            let energy = y.iter().map(|v| v * v).sum::<f64>() / design.n() as f64;
            Ok((energy - a.frobenius_norm().powi(2)).abs())
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let max_deviation = deviations.iter().copied().fold(0.0, f64::max);
    Ok(RipEstimate {
        k,
        trials,
        max_deviation,
        deviations,
    })
}
