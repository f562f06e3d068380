//! Pauli-measurement tomography simulator.
//!
//! An `m`-qubit state `Θ` (a `d × d` density matrix, `d = 2^m`) is measured
//! in random Pauli settings; each repetition yields one ±1 outcome per qubit.
//! Parities of the outcomes, averaged per setting and per marginalized subset
//! of qubits, become the observations of a trace-regression dataset whose
//! design matrices are rescaled Pauli strings.
//!
//! Conventions: qubit 1 is the leftmost Kronecker factor. Outcome tables are
//! indexed by an `m`-bit number whose most significant bit is qubit 1, with
//! bit 0 meaning outcome +1. A subset `E` of qubits is a mask whose bit `l`
//! stands for qubit `l + 1`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::container;
use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{MatrixValue, C64};
use crate::par::Execution;
use crate::rng;
use crate::trace_model::{DesignBatch, Observations};

const NEG_PROB_TOL: f64 = 1e-12;
const DENSITY_TOL: f64 = 1e-10;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `σ⁰ = I`, `σ¹ = X`, `σ² = Y`, `σ³ = Z`.
pub fn pauli_matrix(idx: u8) -> Result<MatrixValue> {
    let z = c(0.0, 0.0);
    let one = c(1.0, 0.0);
    let data = match idx {
        0 => vec![one, z, z, one],
        1 => vec![z, one, one, z],
        2 => vec![z, c(0.0, -1.0), c(0.0, 1.0), z],
        3 => vec![one, z, z, -one],
        _ => return Err(arg_err(format!("Pauli index must be 0..=3, got {idx}"))),
    };
    MatrixValue::new(2, 2, data)
}

/// `π_{o,s} = (I + o·σˢ)/2`.
pub fn eigenprojector(s: u8, o: i8) -> Result<MatrixValue> {
    if !(1..=3).contains(&s) {
        return Err(arg_err(format!("setting index must be 1..=3, got {s}")));
    }
    if o != 1 && o != -1 {
        return Err(arg_err(format!("outcome must be +1 or -1, got {o}")));
    }
    let sigma = pauli_matrix(s)?;
    Ok((&MatrixValue::identity(2) + &sigma.scale(o as f64)).scale(0.5))
}

/// Per-qubit Pauli indices. Primary settings use 1..=3; 0 marks a qubit that
/// has been marginalized away.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PauliSetting(Vec<u8>);

impl PauliSetting {
    pub fn new(qubits: Vec<u8>) -> Result<Self> {
        if qubits.is_empty() {
            return Err(arg_err("a setting needs at least one qubit"));
        }
        if let Some(&q) = qubits.iter().find(|&&q| q > 3) {
            return Err(arg_err(format!("setting index must be 0..=3, got {q}")));
        }
        Ok(Self(qubits))
    }

    pub fn m(&self) -> usize {
        self.0.len()
    }

    pub fn qubits(&self) -> &[u8] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        1 << self.m()
    }

    /// True when no qubit carries the identity.
    pub fn is_primary(&self) -> bool {
        self.0.iter().all(|&q| q != 0)
    }

    /// `σ^{s₁} ⊗ … ⊗ σ^{s_m}`.
    pub fn pauli_string(&self) -> MatrixValue {
        let (cols, vals) = self.monomial();
        let d = self.dim();
        let mut m = MatrixValue::zeros(d, d);
        for r in 0..d {
            m[(r, cols[r] as usize)] = vals[r];
        }
        m
    }

    /// The Pauli string as one nonzero per row: column index and value.
    pub(crate) fn monomial(&self) -> (Vec<u32>, Vec<C64>) {
        let m = self.m();
        let d = self.dim();
        let mut flip = 0u32;
        for (l, &s) in self.0.iter().enumerate() {
            if s == 1 || s == 2 {
                flip |= 1 << (m - 1 - l);
            }
        }
        let mut cols = Vec::with_capacity(d);
        let mut vals = Vec::with_capacity(d);
        for r in 0..d as u32 {
            let mut v = c(1.0, 0.0);
            for (l, &s) in self.0.iter().enumerate() {
                let bit = (r >> (m - 1 - l)) & 1;
                v *= match (s, bit) {
                    (2, 0) => c(0.0, -1.0),
                    (2, _) => c(0.0, 1.0),
                    (3, 1) => c(-1.0, 0.0),
                    _ => c(1.0, 0.0),
                };
            }
            cols.push(r ^ flip);
            vals.push(v);
        }
        (cols, vals)
    }
}

impl fmt::Display for PauliSetting {
    /// Letters `I`, `X`, `Y`, `Z` for indices 0..=3.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &q in &self.0 {
            f.write_str(["I", "X", "Y", "Z"][q as usize])?;
        }
        Ok(())
    }
}

/// Outcome vector for table index `idx`.
pub fn outcome_from_index(idx: usize, m: usize) -> Vec<i8> {
    (0..m)
        .map(|l| if (idx >> (m - 1 - l)) & 1 == 0 { 1 } else { -1 })
        .collect()
}

pub fn outcome_index(o: &[i8]) -> usize {
    o.iter().fold(0, |acc, &x| (acc << 1) | usize::from(x < 0))
}

/// `P_{O,S} = ⊗_l π_{o_l, s_l}`. A qubit with index 0 contributes `I` when its
/// outcome is +1 and the zero matrix otherwise.
pub fn setting_projector(setting: &PauliSetting, outcome: &[i8]) -> Result<MatrixValue> {
    if outcome.len() != setting.m() {
        return Err(shape_err(format!("{} outcomes", setting.m()), format!("{}", outcome.len())));
    }
    let mut p = MatrixValue::identity(1);
    for (&s, &o) in setting.qubits().iter().zip(outcome) {
        let factor = match s {
            0 if o == 1 => MatrixValue::identity(2),
            0 if o == -1 => MatrixValue::zeros(2, 2),
            0 => return Err(arg_err(format!("outcome must be +1 or -1, got {o}"))),
            _ => eigenprojector(s, o)?,
        };
        p = p.kron(&factor);
    }
    Ok(p)
}

/// Smallest eigenvalue of a Hermitian matrix, via the real symmetric
/// embedding `[[A, −B], [B, A]]` of `A + iB`.
pub fn min_eigenvalue_hermitian(h: &MatrixValue) -> f64 {
    let d = h.rows();
    let e = nalgebra::DMatrix::from_fn(2 * d, 2 * d, |r, col| {
        let z = h[(r % d, col % d)];
        match (r < d, col < d) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    let e = (&e + e.transpose()) * 0.5;
    e.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Checks that `theta` is a density matrix (Hermitian, PSD, unit trace).
pub fn check_density(theta: &MatrixValue) -> Result<()> {
    let d = theta.rows();
    if !theta.is_square() || !d.is_power_of_two() || d < 2 {
        return Err(arg_err(format!("density matrix must be 2^m x 2^m, got {}x{}", d, theta.cols())));
    }
    let tr = theta.trace();
    let herm = theta.is_hermitian(DENSITY_TOL);
    let lmin = if herm { min_eigenvalue_hermitian(theta) } else { f64::NAN };
    if !herm || (tr.re - 1.0).abs() > DENSITY_TOL || tr.im.abs() > DENSITY_TOL || !(lmin >= -DENSITY_TOL) {
        return Err(arg_err(format!(
            "not a density matrix: hermitian = {herm}, trace = {:.3e}{:+.3e}i, min eigenvalue = {lmin:.3e}",
            tr.re, tr.im
        )));
    }
    Ok(())
}

/// `p_{O,S} = tr(P_{O,S} Θ)` over the `2^m` outcomes in table order.
pub fn outcome_distribution(setting: &PauliSetting, theta: &MatrixValue) -> Result<Vec<f64>> {
    check_density(theta)?;
    distribution_unchecked(setting, theta)
}

fn distribution_unchecked(setting: &PauliSetting, theta: &MatrixValue) -> Result<Vec<f64>> {
    let m = setting.m();
    if theta.rows() != setting.dim() {
        return Err(shape_err(format!("{0}x{0} state", setting.dim()), format!("{}x{}", theta.rows(), theta.cols())));
    }
    let mut probs = Vec::with_capacity(1 << m);
    for idx in 0..1usize << m {
        let p = setting_projector(setting, &outcome_from_index(idx, m))?;
        let v = p.inner(theta)?;
        if v < -NEG_PROB_TOL {
            return Err(arg_err(format!("negative outcome probability {v:.3e}")));
        }
        probs.push(v.max(0.0));
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeBatch {
    pub setting: PauliSetting,
    /// One ±1 vector of length `m` per repetition.
    pub outcomes: Vec<Vec<i8>>,
}

impl OutcomeBatch {
    pub fn repetitions(&self) -> usize {
        self.outcomes.len()
    }
}

/// `T` i.i.d. outcome draws by inverse CDF over the outcome table.
pub fn sample_outcomes(setting: &PauliSetting, theta: &MatrixValue, t: usize, seed: u64) -> Result<OutcomeBatch> {
    let probs = outcome_distribution(setting, theta)?;
    Ok(sample_from_table(setting, &probs, t, seed))
}

fn sample_from_table(setting: &PauliSetting, probs: &[f64], t: usize, seed: u64) -> OutcomeBatch {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cdf.push(acc);
    }
    let last_nonzero = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let mut r = rng::stream(seed);
    let outcomes = (0..t)
        .map(|_| {
            let u: f64 = r.random();
            let idx = cdf.iter().position(|&c| u < c).unwrap_or(last_nonzero);
            outcome_from_index(idx, setting.m())
        })
        .collect();
    OutcomeBatch {
        setting: setting.clone(),
        outcomes,
    }
}

/// `f(O) = Π_l o_l`.
pub fn parity(o: &[i8]) -> i8 {
    o.iter().product()
}

/// `(S̃(E), Õ(E))`: qubits in `mask` get setting 0 and outcome +1.
pub fn marginalize(setting: &PauliSetting, outcome: &[i8], mask: u32) -> (PauliSetting, Vec<i8>) {
    let mut s = setting.qubits().to_vec();
    let mut o = outcome.to_vec();
    for l in 0..s.len() {
        if (mask >> l) & 1 == 1 {
            s[l] = 0;
            if l < o.len() {
                o[l] = 1;
            }
        }
    }
    (PauliSetting(s), o)
}

/// `N` settings with every qubit index uniform on {1, 2, 3}.
pub fn gen_random_settings(n: usize, m: usize, seed: u64) -> Result<Vec<PauliSetting>> {
    if n == 0 || m == 0 {
        return Err(arg_err("need N >= 1 settings of m >= 1 qubits"));
    }
    let mut r = rng::stream(seed);
    Ok((0..n)
        .map(|_| PauliSetting((0..m).map(|_| r.random_range(1..=3u8)).collect()))
        .collect())
}

/// `Θ = G Gᴴ / tr(G Gᴴ)` with `G` a `d × k` complex standard Gaussian matrix.
pub fn gen_density_matrix(d: usize, k: usize, seed: u64) -> Result<MatrixValue> {
    if k == 0 || k > d {
        return Err(arg_err(format!("rank must satisfy 1 <= k <= d, got k = {k}, d = {d}")));
    }
    let mut r = rng::stream(seed);
    let g: Vec<C64> = (0..d * k)
        .map(|_| c(r.sample(StandardNormal), r.sample(StandardNormal)))
        .collect();
    let mut theta = MatrixValue::from_fn(d, d, |a, b| (0..k).map(|l| g[a * k + l] * g[b * k + l].conj()).sum());
    let tr = theta.trace().re;
    theta = theta.scale(1.0 / tr);
    // Exact Hermitian symmetry and real diagonal.
    Ok(MatrixValue::from_fn(d, d, |a, b| {
        if a == b {
            c(theta[(a, a)].re, 0.0)
        } else if a < b {
            theta[(a, b)]
        } else {
            theta[(b, a)].conj()
        }
    }))
}

/// Simulates `T` repetitions for every setting, each with its own derived
/// seed.
pub fn simulate_settings(
    exec: Execution,
    settings: &[PauliSetting],
    theta: &MatrixValue,
    t: usize,
    seed: u64,
) -> Result<Vec<OutcomeBatch>> {
    check_density(theta)?;
    exec.map(settings.len(), |i| {
        let probs = distribution_unchecked(&settings[i], theta)?;
        Ok(sample_from_table(&settings[i], &probs, t, rng::derive_seed(seed, &[i as u64])))
    })
    .into_iter()
    .collect()
}

/// Rows of rescaled parity observations, one per (setting, subset).
#[derive(Clone, Debug, PartialEq)]
pub struct TomographyDataset {
    pub m: usize,
    pub d: usize,
    pub settings: Vec<PauliSetting>,
    pub setting_index: Vec<usize>,
    pub subset_mask: Vec<u32>,
    /// `Y_{S,E} = scale(E) · Ȳ_{S,E}`.
    pub y: Vec<f64>,
    /// `scale(E) · P_{S̃(E)}` per row.
    pub design: DesignBatch,
}

/// `√d · 3^{−|E|/2} · (3/4)^{m/2}`.
pub fn row_scale(m: usize, subset_size: usize) -> f64 {
    let d = (1usize << m) as f64;
    d.sqrt() * 3f64.powf(-(subset_size as f64) / 2.0) * 0.75f64.powf(m as f64 / 2.0)
}

fn assemble(settings: &[PauliSetting], mut ybar: impl FnMut(usize, u32) -> f64) -> Result<TomographyDataset> {
    let first = settings.first().ok_or_else(|| arg_err("no settings"))?;
    let m = first.m();
    if settings.iter().any(|s| s.m() != m || !s.is_primary()) {
        return Err(arg_err("settings must share m and use indices 1..=3"));
    }
    let d = 1usize << m;
    let rows = settings.len() << m;
    let mut setting_index = Vec::with_capacity(rows);
    let mut subset_mask = Vec::with_capacity(rows);
    let mut y = Vec::with_capacity(rows);
    let mut cols = Vec::with_capacity(rows * d);
    let mut vals = Vec::with_capacity(rows * d);
    for (i, s) in settings.iter().enumerate() {
        for mask in 0..1u32 << m {
            let scale = row_scale(m, mask.count_ones() as usize);
            let (marg, _) = marginalize(s, &[], mask);
            let (cc, vv) = marg.monomial();
            cols.extend(cc);
            vals.extend(vv.into_iter().map(|v| v * scale));
            setting_index.push(i);
            subset_mask.push(mask);
            y.push(scale * ybar(i, mask));
        }
    }
    Ok(TomographyDataset {
        m,
        d,
        settings: settings.to_vec(),
        setting_index,
        subset_mask,
        y,
        design: DesignBatch::from_monomial(rows, d, cols, vals)?,
    })
}

/// Builds the rescaled dataset from one outcome batch per setting.
pub fn build_rescaled_dataset(settings: &[PauliSetting], batches: &[OutcomeBatch]) -> Result<TomographyDataset> {
    if settings.len() != batches.len() {
        return Err(shape_err(format!("{} outcome batches", settings.len()), format!("{}", batches.len())));
    }
    for (s, b) in settings.iter().zip(batches) {
        if &b.setting != s {
            return Err(arg_err(format!("batch for setting {} does not match {s}", b.setting)));
        }
        if b.outcomes.is_empty() {
            return Err(arg_err("every setting needs T >= 1 repetitions"));
        }
        if b.outcomes.iter().any(|o| o.len() != s.m() || o.iter().any(|&x| x != 1 && x != -1)) {
            return Err(arg_err(format!("malformed outcomes for setting {s}")));
        }
    }
    assemble(settings, |i, mask| {
        let b = &batches[i];
        let total: i64 = b
            .outcomes
            .iter()
            .map(|o| parity(&marginalize(&b.setting, o, mask).1) as i64)
            .sum();
        total as f64 / b.repetitions() as f64
    })
}

/// The dataset with every `Ȳ` replaced by its exact expectation
/// `tr(P_{S̃(E)} Θ)`.
pub fn build_expected_dataset(settings: &[PauliSetting], theta: &MatrixValue) -> Result<TomographyDataset> {
    check_density(theta)?;
    let mut err = None;
    let ds = assemble(settings, |i, mask| {
        let (marg, _) = marginalize(&settings[i], &[], mask);
        match marg.pauli_string().inner(theta) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(ds),
    }
}

impl TomographyDataset {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// Design and observations normalized for the estimator: both are
    /// multiplied by `√d`, which makes `(1/n)‖𝕏(A)‖²` match `‖A‖_F²` in
    /// expectation over random settings when `n` counts all `N·2^m` rows.
    pub fn to_trace_regression(&self) -> Result<(DesignBatch, Observations)> {
        let s = (self.d as f64).sqrt();
        Ok((self.design.scaled(s), Observations::new(self.y.iter().map(|v| v * s).collect())?))
    }

    /// Writes `setting_index,setting_string,subset_mask,y_value`.
    pub fn write_manifest_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["setting_index", "setting_string", "subset_mask", "y_value"])?;
        for k in 0..self.rows() {
            let (marg, _) = marginalize(&self.settings[self.setting_index[k]], &[], self.subset_mask[k]);
            out.write_record([
                self.setting_index[k].to_string(),
                marg.to_string(),
                self.subset_mask[k].to_string(),
                self.y[k].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Saves the design and observations as a binary container and the row
    /// manifest next to it (`<path>.manifest.csv`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let obs = Observations::new(self.y.clone())?;
        container::save_container(path, &self.design, Some(&obs))?;
        let mut manifest = path.as_os_str().to_owned();
        manifest.push(".manifest.csv");
        self.write_manifest_csv(std::io::BufWriter::new(std::fs::File::create(manifest)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{entrywise_inf_norm, svd};

    fn approx(a: &MatrixValue, b: &MatrixValue, tol: f64) -> bool {
        entrywise_inf_norm(&(a - b)) <= tol
    }

    #[test]
    fn pauli_basics() {
        assert_eq!(pauli_matrix(1).unwrap(), MatrixValue::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        for i in 0..4 {
            let s = pauli_matrix(i).unwrap();
            assert_eq!(s.matmul(&s).unwrap(), MatrixValue::identity(2));
            assert!(s.is_hermitian(0.0));
            let tr = s.trace();
            assert_eq!(tr.re, if i == 0 { 2.0 } else { 0.0 });
        }
        assert!(pauli_matrix(4).is_err());
    }

    #[test]
    fn eigenprojector_examples() {
        assert_eq!(eigenprojector(3, 1).unwrap(), MatrixValue::diag(&[1.0, 0.0]));
        assert_eq!(eigenprojector(3, -1).unwrap(), MatrixValue::diag(&[0.0, 1.0]));
        assert_eq!(eigenprojector(1, 1).unwrap(), MatrixValue::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]));
        for s in 1..=3 {
            for o in [1, -1] {
                let p = eigenprojector(s, o).unwrap();
                assert!(approx(&p.matmul(&p).unwrap(), &p, 1e-15));
                assert!(p.is_hermitian(0.0));
                assert!((p.trace().re - 1.0).abs() < 1e-15);
            }
        }
        assert!(eigenprojector(1, 0).is_err());
        assert!(eigenprojector(0, 1).is_err());
    }

    #[test]
    fn projector_examples_and_resolution_of_identity() {
        let s = PauliSetting::new(vec![3]).unwrap();
        assert_eq!(setting_projector(&s, &[1]).unwrap(), MatrixValue::diag(&[1.0, 0.0]));
        let s = PauliSetting::new(vec![3, 3]).unwrap();
        assert_eq!(setting_projector(&s, &[1, -1]).unwrap(), MatrixValue::diag(&[0.0, 1.0, 0.0, 0.0]));
        assert!(setting_projector(&s, &[1]).is_err());
        for m in 1..=4 {
            for (k, setting) in gen_random_settings(6, m, m as u64).unwrap().into_iter().enumerate() {
                let setting = if k == 0 { marginalize(&setting, &[], 1).0 } else { setting };
                let d = setting.dim();
                let mut total = MatrixValue::zeros(d, d);
                for idx in 0..d {
                    let p = setting_projector(&setting, &outcome_from_index(idx, m)).unwrap();
                    assert!(approx(&p.matmul(&p).unwrap(), &p, 1e-14));
                    total += &p;
                }
                assert!(approx(&total, &MatrixValue::identity(d), 1e-14));
            }
        }
    }

    #[test]
    fn pauli_string_matches_kronecker() {
        for m in 1..=3 {
            for s in gen_random_settings(5, m, 10 + m as u64).unwrap() {
                let mut s = s.qubits().to_vec();
                s[0] = 0;
                let s = PauliSetting::new(s).unwrap();
                let mut k = MatrixValue::identity(1);
                for &q in s.qubits() {
                    k = k.kron(&pauli_matrix(q).unwrap());
                }
                assert_eq!(s.pauli_string(), k);
            }
        }
        assert_eq!(PauliSetting::new(vec![1, 3, 2, 0]).unwrap().to_string(), "XZYI");
    }

    #[test]
    fn distribution_examples() {
        for m in 1..=3 {
            let d = 1 << m;
            let mixed = MatrixValue::identity(d).scale(1.0 / d as f64);
            for s in gen_random_settings(3, m, 1).unwrap() {
                for p in outcome_distribution(&s, &mixed).unwrap() {
                    assert!((p - 1.0 / d as f64).abs() < 1e-15);
                }
            }
            let mut e1 = MatrixValue::zeros(d, d);
            e1[(0, 0)] = c(1.0, 0.0);
            let z = PauliSetting::new(vec![3; m]).unwrap();
            let p = outcome_distribution(&z, &e1).unwrap();
            assert_eq!(p[0], 1.0);
            assert!(p[1..].iter().all(|&x| x == 0.0));
        }
        let theta = gen_density_matrix(4, 2, 5).unwrap();
        for s in gen_random_settings(9, 2, 6).unwrap() {
            let p = outcome_distribution(&s, &theta).unwrap();
            for (idx, &pv) in p.iter().enumerate() {
                let o = outcome_from_index(idx, 2);
                let a = eigenprojector(s.qubits()[0], o[0]).unwrap();
                let b = eigenprojector(s.qubits()[1], o[1]).unwrap();
                let mut oracle = c(0.0, 0.0);
                for r1 in 0..2 {
                    for c1 in 0..2 {
                        for r2 in 0..2 {
                            for c2 in 0..2 {
                                oracle += a[(r1, c1)] * b[(r2, c2)] * theta[(c1 * 2 + c2, r1 * 2 + r2)];
                            }
                        }
                    }
                }
                assert!((pv - oracle.re).abs() < 1e-12);
            }
        }
        let not_density = MatrixValue::diag(&[1.5, -0.5]);
        let err = outcome_distribution(&PauliSetting::new(vec![3]).unwrap(), &not_density).unwrap_err();
        assert!(err.to_string().contains("min eigenvalue"));
    }

    #[test]
    fn normalization_over_many_states() {
        for t in 0..100u64 {
            let m = 1 + t as usize % 3;
            let d = 1 << m;
            let theta = gen_density_matrix(d, 1 + t as usize % d, t).unwrap();
            for s in gen_random_settings(2, m, t).unwrap() {
                let p = outcome_distribution(&s, &theta).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampling() {
        let e1 = MatrixValue::diag(&[1.0, 0.0, 0.0, 0.0]);
        let z = PauliSetting::new(vec![3, 3]).unwrap();
        let b = sample_outcomes(&z, &e1, 50, 1).unwrap();
        assert!(b.outcomes.iter().all(|o| o == &vec![1, 1]));

        let theta = gen_density_matrix(4, 2, 3).unwrap();
        let s = PauliSetting::new(vec![1, 2]).unwrap();
        assert_eq!(sample_outcomes(&s, &theta, 30, 9).unwrap(), sample_outcomes(&s, &theta, 30, 9).unwrap());
        let b = sample_outcomes(&s, &theta, 20_000, 4).unwrap();
        let p = outcome_distribution(&s, &theta).unwrap();
        let mut counts = [0usize; 4];
        for o in &b.outcomes {
            counts[outcome_index(o)] += 1;
        }
        for k in 0..4 {
            assert!((counts[k] as f64 / 20_000.0 - p[k]).abs() < 0.02);
        }
    }

    #[test]
    fn parity_and_expectation() {
        assert_eq!(parity(&[1, 1, 1]), 1);
        assert_eq!(parity(&[1, -1, 1]), -1);
        for m in 1..=3 {
            let d = 1 << m;
            let theta = gen_density_matrix(d, 2.min(d), 40 + m as u64).unwrap();
            for s in gen_random_settings(8, m, 50 + m as u64).unwrap() {
                let p = outcome_distribution(&s, &theta).unwrap();
                let e: f64 = p.iter().enumerate().map(|(i, pi)| pi * parity(&outcome_from_index(i, m)) as f64).sum();
                let tr = s.pauli_string().inner(&theta).unwrap();
                assert!((e - tr).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn marginalization() {
        let s = PauliSetting::new(vec![1, 2, 3]).unwrap();
        let o = vec![-1, 1, -1];
        assert_eq!(marginalize(&s, &o, 0), (s.clone(), o.clone()));
        let (ms, mo) = marginalize(&s, &o, 0b111);
        assert_eq!(ms.qubits(), &[0, 0, 0]);
        assert_eq!(mo, vec![1, 1, 1]);
        let (ms, mo) = marginalize(&s, &o, 0b010);
        assert_eq!(ms.qubits(), &[1, 0, 3]);
        assert_eq!(mo, vec![-1, 1, -1]);

        for m in 1..=3 {
            let d = 1 << m;
            let theta = gen_density_matrix(d, d, 70 + m as u64).unwrap();
            for s in gen_random_settings(4, m, 80 + m as u64).unwrap() {
                let p = outcome_distribution(&s, &theta).unwrap();
                for mask in 0..1u32 << m {
                    let (marg, _) = marginalize(&s, &[], mask);
                    let direct = outcome_distribution(&marg, &theta).unwrap();
                    let mut pushed = vec![0.0; d];
                    for (idx, pi) in p.iter().enumerate() {
                        let (_, mo) = marginalize(&s, &outcome_from_index(idx, m), mask);
                        pushed[outcome_index(&mo)] += pi;
                    }
                    for k in 0..d {
                        assert!((pushed[k] - direct[k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn random_settings() {
        assert_eq!(gen_random_settings(5, 3, 2).unwrap(), gen_random_settings(5, 3, 2).unwrap());
        let s = gen_random_settings(9000, 1, 3).unwrap();
        assert!(s.iter().all(|x| x.is_primary()));
        for v in 1..=3u8 {
            let count = s.iter().filter(|x| x.qubits()[0] == v).count() as f64;
            assert!((count - 3000.0).abs() <= 150.0);
        }
        assert!(gen_random_settings(0, 2, 1).is_err());
    }

    #[test]
    fn density_generator() {
        for (d, k) in [(2, 1), (4, 2), (8, 3), (16, 1)] {
            let theta = gen_density_matrix(d, k, (d * 10 + k) as u64).unwrap();
            assert!((theta.trace().re - 1.0).abs() < 1e-12);
            assert!(min_eigenvalue_hermitian(&theta) >= -1e-12);
            assert!(theta.is_hermitian(0.0));
            let s = svd(&theta).unwrap().singular_values;
            assert!(s[k - 1] > 1e-10);
            if k < d {
                assert!(s[k] < 1e-10);
            }
            check_density(&theta).unwrap();
        }
        assert!(gen_density_matrix(4, 5, 1).is_err());
    }

    #[test]
    fn dataset_layout_and_scaling() {
        assert!((row_scale(1, 0) - 1.5f64.sqrt()).abs() < 1e-15);
        let theta = gen_density_matrix(4, 1, 1).unwrap();
        let settings = gen_random_settings(3, 2, 2).unwrap();
        let batches = simulate_settings(Execution::Sequential, &settings, &theta, 25, 3).unwrap();
        let ds = build_rescaled_dataset(&settings, &batches).unwrap();
        assert_eq!(ds.rows(), 12);
        assert_eq!(ds.setting_index, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(&ds.subset_mask[..4], &[0, 1, 2, 3]);
        for k in 0..ds.rows() {
            assert!(ds.design.matrix(k).is_hermitian(0.0));
            if ds.subset_mask[k] == 3 {
                let sc = row_scale(2, 2);
                assert_eq!(ds.y[k], sc);
                assert!(approx(&ds.design.matrix(k), &MatrixValue::identity(4).scale(sc), 1e-15));
            }
        }
        assert!(ds.design.is_hermitian());
        assert!(build_rescaled_dataset(&settings, &batches[..2]).is_err());
        let parallel = simulate_settings(Execution::Parallel, &settings, &theta, 25, 3).unwrap();
        assert_eq!(parallel, batches);
    }

    #[test]
    fn expected_dataset_is_unbiased() {
        let theta = gen_density_matrix(8, 2, 5).unwrap();
        let settings = gen_random_settings(4, 3, 6).unwrap();
        let ds = build_expected_dataset(&settings, &theta).unwrap();
        let (design, obs) = ds.to_trace_regression().unwrap();
        let fitted = design.apply(&theta).unwrap();
        for k in 0..ds.rows() {
            assert!((obs.values[k] - fitted[k]).abs() < 1e-12);
        }
        let raw = ds.design.apply(&theta).unwrap();
        for k in 0..ds.rows() {
            assert!((ds.y[k] - raw[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_design_is_near_isometric() {
        for m in [3usize, 4] {
            let d = 1 << m;
            let mut last = f64::INFINITY;
            for n_settings in [40 * d, 80 * d] {
                let settings = gen_random_settings(n_settings, m, rng::derive_seed(100, &[m as u64, n_settings as u64])).unwrap();
                let theta = MatrixValue::identity(d).scale(1.0 / d as f64);
                let (design, _) = build_expected_dataset(&settings, &theta).unwrap().to_trace_regression().unwrap();
                let est = crate::trace_model::estimate_rip_constant(&design, 1, 100, 7).unwrap();
                assert!(est.max_deviation < 0.6, "m={m} N={n_settings}: {}", est.max_deviation);
                assert!(est.max_deviation < last);
                last = est.max_deviation;
            }
        }
    }

    #[test]
    fn manifest_csv() {
        let theta = gen_density_matrix(2, 1, 1).unwrap();
        let settings = vec![PauliSetting::new(vec![2]).unwrap()];
        let ds = build_expected_dataset(&settings, &theta).unwrap();
        let mut buf = Vec::new();
        ds.write_manifest_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "setting_index,setting_string,subset_mask,y_value");
        assert!(lines[1].starts_with("0,Y,0,"));
        assert!(lines[2].starts_with("0,I,1,"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tomo.trcm");
        ds.save(&path).unwrap();
        let (design, obs) = container::load_container(&path).unwrap();
        assert_eq!(design.matrices(), ds.design.matrices());
        assert_eq!(obs.unwrap().values, ds.y);
        assert!(dir.path().join("tomo.trcm.manifest.csv").exists());
    }
}
