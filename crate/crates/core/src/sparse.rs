//! Hard thresholding for sparse linear regression `Y = Xθ + ε`.
//!
//! A decorrelator `V` makes `VΣ̂` (with `Σ̂ = XᵀX/n`) close to the identity so
//! that coordinatewise thresholding of `(1/n)VXᵀ(Y − Xθ̂)` behaves like the
//! matrix case. The de-sparsified estimate `θ̂ʳ + (1/n)VXᵀ(Y − Xθ̂ʳ)` gives
//! coordinatewise confidence intervals.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::par::Execution;
use crate::rng;
use crate::stats::normal_quantile;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseInstance {
    /// `n × p` design.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta: Option<DVector<f64>>,
    /// Realized additive noise.
    pub noise: Option<DVector<f64>>,
}

impl SparseInstance {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(shape_err(format!("{} responses", x.nrows()), format!("{}", y.len())));
        }
        if x.nrows() < 2 || x.ncols() == 0 {
            return Err(arg_err("need n >= 2 samples and p >= 1 features"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(arg_err("design and responses must be finite"));
        }
        Ok(Self { x, y, theta: None, noise: None })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `Σ̂ = XᵀX / n`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.x.tr_mul(&self.x) / self.n() as f64
    }

    /// `(1/n) V Xᵀ r`.
    fn backproject(&self, v: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
        v * (self.x.tr_mul(r) / self.n() as f64)
    }

    fn residual(&self, theta_hat: &DVector<f64>) -> Result<DVector<f64>> {
        if theta_hat.len() != self.p() {
            return Err(shape_err(format!("{} coefficients", self.p()), format!("{}", theta_hat.len())));
        }
        Ok(&self.y - &self.x * theta_hat)
    }
}

/// `Y = Xθ + noise_std·ε` with isotropic Gaussian `X` and a `k`-sparse `θ`
/// whose nonzero entries are `±U[1, 2]` on a uniformly random support.
pub fn gen_sparse_instance(n: usize, p: usize, k: usize, noise_std: f64, seed: u64) -> Result<SparseInstance> {
    if k > p {
        return Err(arg_err(format!("sparsity {k} exceeds p = {p}")));
    }
    let mut r = rng::stream(seed);
    let x = DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal));
    let theta = sparse_vector(p, k, &mut r);
    instance_from_parts(x, theta, noise_std, &mut r)
}

/// As [`gen_sparse_instance`] but with `XᵀX/n = I` exactly (`n ≥ p`).
pub fn gen_orthogonal_instance(n: usize, p: usize, k: usize, noise_std: f64, seed: u64) -> Result<SparseInstance> {
    if n < p {
        return Err(arg_err(format!("an orthogonal design needs n >= p, got n = {n}, p = {p}")));
    }
    if k > p {
        return Err(arg_err(format!("sparsity {k} exceeds p = {p}")));
    }
    let mut r = rng::stream(seed);
    let g = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let x = q * (n as f64).sqrt();
    let theta = sparse_vector(p, k, &mut r);
    instance_from_parts(x, theta, noise_std, &mut r)
}

fn sparse_vector(p: usize, k: usize, r: &mut rng::StreamRng) -> DVector<f64> {
    let mut theta = DVector::zeros(p);
    for j in sample(r, p, k) {
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        theta[j] = sign * r.random_range(1.0..2.0);
    }
    theta
}

fn instance_from_parts(x: DMatrix<f64>, theta: DVector<f64>, noise_std: f64, r: &mut rng::StreamRng) -> Result<SparseInstance> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(arg_err(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let noise = DVector::from_fn(x.nrows(), |_, _| noise_std * r.sample::<f64, _>(StandardNormal));
    let y = &x * &theta + &noise;
    let mut inst = SparseInstance::new(x, y)?;
    inst.theta = Some(theta);
    inst.noise = Some(noise);
    Ok(inst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecorrelatorStrategy {
    Identity,
    /// Rows minimizing `½vᵀΣ̂v − v_j + mu‖v‖₁`, whose optimality conditions
    /// give `‖Σ̂v − e_j‖∞ ≤ mu`. `None` uses `mu = √(log p / n)`.
    RowProgram { mu: Option<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decorrelator {
    pub v: DMatrix<f64>,
    pub strategy: DecorrelatorStrategy,
    /// `r_k` for each requested `k`.
    pub certified_r: BTreeMap<usize, f64>,
    /// `M = max_j (VΣ̂Vᵀ)_jj`.
    pub m_const: f64,
}

impl Decorrelator {
    pub fn r(&self, k: usize) -> Option<f64> {
        self.certified_r.get(&k).copied()
    }
}

const ROW_TOL: f64 = 1e-6;
const DIVERGENCE: f64 = 1e10;

enum RowOutcome {
    Solved(Vec<f64>),
    Infeasible,
}

/// Coordinate descent for one row of the program.
fn solve_row(gram: &DMatrix<f64>, j: usize, mu: f64) -> RowOutcome {
    let p = gram.nrows();
    let mut v = vec![0.0; p];
    let mut g = vec![0.0; p]; // Σ̂v
    let cap = 10 * p * p;
    for _ in 0..cap.max(10) {
        for i in 0..p {
            let gii = gram[(i, i)];
            if gii <= 0.0 {
                continue;
            }
            let target = if i == j { 1.0 } else { 0.0 };
            let rho = target - (g[i] - gii * v[i]);
            let new = rho.signum() * (rho.abs() - mu).max(0.0) / gii;
            let delta = new - v[i];
            if delta != 0.0 {
                for (l, gl) in g.iter_mut().enumerate() {
                    *gl += gram[(l, i)] * delta;
                }
                v[i] = new;
            }
        }
        if v.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE) {
            return RowOutcome::Infeasible;
        }
        let kkt = (0..p)
            .map(|i| {
                let grad = g[i] - if i == j { 1.0 } else { 0.0 };
                if v[i] != 0.0 {
                    (grad + mu * v[i].signum()).abs()
                } else {
                    (grad.abs() - mu).max(0.0)
                }
            })
            .fold(0.0, f64::max);
        if kkt <= ROW_TOL {
            return RowOutcome::Solved(v);
        }
    }
    RowOutcome::Infeasible
}

fn smallest_feasible_mu(gram: &DMatrix<f64>, j: usize, mu: f64) -> f64 {
    let (mut lo, mut hi) = (mu, 1.0f64.max(mu));
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        match solve_row(gram, j, mid) {
            RowOutcome::Solved(_) => hi = mid,
            RowOutcome::Infeasible => lo = mid,
        }
    }
    hi
}

/// Builds `V` and certifies `r_k` for every `k` in `ks`.
pub fn build_decorrelator(
    exec: Execution,
    instance: &SparseInstance,
    strategy: DecorrelatorStrategy,
    ks: &[usize],
) -> Result<Decorrelator> {
    let (n, p) = (instance.n(), instance.p());
    let gram = instance.gram();
    let v = match strategy {
        DecorrelatorStrategy::Identity => DMatrix::identity(p, p),
        DecorrelatorStrategy::RowProgram { mu } => {
            let mu = mu.unwrap_or_else(|| ((p as f64).ln().max(0.0) / n as f64).sqrt());
            if !(mu > 0.0) || !mu.is_finite() {
                return Err(arg_err(format!("row program needs mu > 0, got {mu}")));
            }
            let rows = exec.map(p, |j| match solve_row(&gram, j, mu) {
                RowOutcome::Solved(v) => Ok(v),
                RowOutcome::Infeasible => Err(Error::Infeasible {
                    row: j,
                    mu,
                    min_feasible_mu: smallest_feasible_mu(&gram, j, mu),
                }),
            });
            let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
            DMatrix::from_fn(p, p, |j, i| rows[j][i])
        }
    };
    finish_decorrelator(v, strategy, &gram, ks)
}

/// Wraps a user-supplied `V`.
pub fn decorrelator_from_matrix(v: DMatrix<f64>, instance: &SparseInstance, ks: &[usize]) -> Result<Decorrelator> {
    let p = instance.p();
    if v.shape() != (p, p) {
        return Err(shape_err(format!("{p}x{p} decorrelator"), format!("{}x{}", v.nrows(), v.ncols())));
    }
    finish_decorrelator(v, DecorrelatorStrategy::Identity, &instance.gram(), ks)
}

fn finish_decorrelator(
    v: DMatrix<f64>,
    strategy: DecorrelatorStrategy,
    gram: &DMatrix<f64>,
    ks: &[usize],
) -> Result<Decorrelator> {
    let mut certified_r = BTreeMap::new();
    for &k in ks {
        certified_r.insert(k, estimate_r_k(&v, gram, k)?);
    }
    let vsv = &v * gram * v.transpose();
    let m_const = vsv.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Decorrelator {
        v,
        strategy,
        certified_r,
        m_const,
    })
}

/// `max_i` of the sum of the `k` largest `|M_ij|`, with `M = VΣ̂ − I`. This is
/// the supremum of `‖VΣ̂u − u‖∞ / ‖u‖∞` over `k`-sparse `u`.
pub fn estimate_r_k(v: &DMatrix<f64>, gram: &DMatrix<f64>, k: usize) -> Result<f64> {
    let p = gram.nrows();
    if k == 0 || k > p {
        return Err(arg_err(format!("k must satisfy 1 <= k <= p = {p}, got {k}")));
    }
    if v.shape() != (p, p) || gram.shape() != (p, p) {
        return Err(shape_err(format!("{p}x{p} matrices"), format!("{:?} and {:?}", v.shape(), gram.shape())));
    }
    let m = v * gram - DMatrix::<f64>::identity(p, p);
    Ok(r_k_of(&m, k))
}

pub(crate) fn r_k_of(m: &DMatrix<f64>, k: usize) -> f64 {
    (0..m.nrows())
        .map(|i| {
            let mut row: Vec<f64> = m.row(i).iter().map(|x| x.abs()).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            row.iter().take(k).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseConfig {
    /// Starting threshold `T₀`; `None` uses `‖(1/n)VXᵀY‖∞ + υ`.
    pub b: Option<f64>,
    /// Sparsity level whose `r_K` drives the schedule and the iteration count.
    pub k_max: usize,
    pub delta: f64,
    /// Replaces `υ = 2√(M log(p/δ)/n)`.
    pub upsilon: Option<f64>,
    /// Replaces the iteration count derived from `r_K`.
    pub iterations: Option<usize>,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            b: None,
            k_max: 2,
            delta: 0.05,
            upsilon: None,
            iterations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseStep {
    pub iter: usize,
    pub threshold: f64,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseTrace {
    pub r_k: f64,
    pub upsilon: f64,
    pub t0: f64,
    pub steps: Vec<SparseStep>,
}

/// Runs `max(1, ⌈log n / log(1/(2r_K))⌉)` thresholding steps with
/// `T_r = 2r_K·T_{r−1} + υ`.
pub fn sparse_iht_run(
    instance: &SparseInstance,
    dec: &Decorrelator,
    config: &SparseConfig,
) -> Result<(DVector<f64>, SparseTrace)> {
    let (n, p) = (instance.n(), instance.p());
    if dec.v.shape() != (p, p) {
        return Err(shape_err(format!("{p}x{p} decorrelator"), format!("{:?}", dec.v.shape())));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(arg_err(format!("delta must lie in (0, 1), got {}", config.delta)));
    }
    let r_k = match dec.r(config.k_max) {
        Some(r) => r,
        None => estimate_r_k(&dec.v, &instance.gram(), config.k_max)?,
    };
    let contraction = 2.0 * r_k;
    if contraction >= 1.0 {
        return Err(Error::AssumptionViolation(format!(
            "2 r_K = {contraction:.4} >= 1 at K = {}; use a smaller K, more samples or a better decorrelator",
            config.k_max
        )));
    }
    let upsilon = match config.upsilon {
        Some(u) if u >= 0.0 && u.is_finite() => u,
        Some(u) => return Err(arg_err(format!("upsilon must be finite and >= 0, got {u}"))),
        None => 2.0 * (dec.m_const * (p as f64 / config.delta).ln() / n as f64).sqrt(),
    };
    let t0 = match config.b {
        Some(b) if b >= 0.0 && b.is_finite() => b,
        Some(b) => return Err(arg_err(format!("B must be finite and >= 0, got {b}"))),
        None => instance.backproject(&dec.v, &instance.y).amax() + upsilon,
    };
    let iters = if let Some(r) = config.iterations {
        r.max(1)
    } else if contraction == 0.0 {
        1
    } else {
        ((n as f64).ln() / (1.0 / contraction).ln()).ceil().max(1.0) as usize
    };
    let mut theta_hat = DVector::zeros(p);
    let mut threshold = t0;
    let mut steps = Vec::with_capacity(iters);
    for iter in 1..=iters {
        threshold = contraction * threshold + upsilon;
        let r = instance.residual(&theta_hat)?;
        let alpha = instance.backproject(&dec.v, &r);
        for j in 0..p {
            if alpha[j].abs() >= threshold {
                theta_hat[j] += alpha[j];
            }
        }
        steps.push(SparseStep {
            iter,
            threshold,
            support_size: theta_hat.iter().filter(|x| **x != 0.0).count(),
        });
    }
    Ok((
        theta_hat,
        SparseTrace {
            r_k,
            upsilon,
            t0,
            steps,
        },
    ))
}

/// `θ̂ʳ + (1/n)VXᵀ(Y − Xθ̂ʳ)`.
pub fn desparsify(theta_hat: &DVector<f64>, instance: &SparseInstance, v: &DMatrix<f64>) -> Result<DVector<f64>> {
    if v.shape() != (instance.p(), instance.p()) {
        return Err(shape_err(format!("{0}x{0} decorrelator", instance.p()), format!("{:?}", v.shape())));
    }
    let r = instance.residual(theta_hat)?;
    Ok(theta_hat + instance.backproject(v, &r))
}

/// `Δ = √n(I − VΣ̂)(θ̂ʳ − θ)` and `Z = (1/√n)VXᵀε`.
pub fn sparse_delta_z(
    theta_hat: &DVector<f64>,
    instance: &SparseInstance,
    v: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let theta = instance
        .theta
        .as_ref()
        .ok_or_else(|| Error::Unsupported("the decomposition needs the true parameter".into()))?;
    let eps = instance
        .noise
        .as_ref()
        .ok_or_else(|| Error::Unsupported("the decomposition needs the realized noise".into()))?;
    let (n, p) = (instance.n() as f64, instance.p());
    let i_minus = DMatrix::<f64>::identity(p, p) - v * instance.gram();
    let delta = i_minus * (theta_hat - theta) * n.sqrt();
    let z = v * instance.x.tr_mul(eps) / n.sqrt();
    Ok((delta, z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseIntervals {
    pub estimate: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub half_width: DVector<f64>,
    pub sigma_hat: f64,
    pub level: f64,
}

impl SparseIntervals {
    pub fn coverage(&self, truth: &DVector<f64>) -> Result<f64> {
        if truth.len() != self.estimate.len() {
            return Err(shape_err(format!("{} coordinates", self.estimate.len()), format!("{}", truth.len())));
        }
        let hits = (0..truth.len())
            .filter(|&j| self.lower[j] <= truth[j] && truth[j] <= self.upper[j])
            .count();
        Ok(hits as f64 / truth.len() as f64)
    }

    pub fn mean_length(&self) -> f64 {
        2.0 * self.half_width.mean()
    }

    /// Writes `j,theta_hat,ci_lower,ci_upper,in_support`, where `in_support`
    /// marks the support of the thresholded estimate `θ̂ʳ`.
    pub fn write_csv<W: Write>(&self, w: W, thresholded: &DVector<f64>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["j", "theta_hat", "ci_lower", "ci_upper", "in_support"])?;
        for j in 0..self.estimate.len() {
            out.write_record([
                j.to_string(),
                self.estimate[j].to_string(),
                self.lower[j].to_string(),
                self.upper[j].to_string(),
                u8::from(thresholded.get(j).is_some_and(|x| *x != 0.0)).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Half-width `σ̂·√((VΣ̂Vᵀ)_jj / n)·z_{(1+level)/2}` around `estimate`.
pub fn sparse_confidence_intervals(
    estimate: &DVector<f64>,
    instance: &SparseInstance,
    v: &DMatrix<f64>,
    sigma_hat: f64,
    level: f64,
) -> Result<SparseIntervals> {
    if !(level > 0.0 && level < 1.0) {
        return Err(arg_err(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if !(sigma_hat >= 0.0) || !sigma_hat.is_finite() {
        return Err(arg_err(format!("sigma_hat must be finite and >= 0, got {sigma_hat}")));
    }
    let p = instance.p();
    if estimate.len() != p || v.shape() != (p, p) {
        return Err(shape_err(format!("{p} coordinates"), format!("{}", estimate.len())));
    }
    let q = normal_quantile((1.0 + level) / 2.0)?;
    let vsv = v * instance.gram() * v.transpose();
    let n = instance.n() as f64;
    let half_width = DVector::from_fn(p, |j, _| sigma_hat * (vsv[(j, j)].max(0.0) / n).sqrt() * q);
    Ok(SparseIntervals {
        estimate: estimate.clone(),
        lower: estimate - &half_width,
        upper: estimate + &half_width,
        half_width,
        sigma_hat,
        level,
    })
}

/// `‖Y − Xθ̂ʳ‖₂ / √n`.
pub fn sparse_sigma(instance: &SparseInstance, theta_hat: &DVector<f64>) -> Result<f64> {
    Ok(instance.residual(theta_hat)?.norm() / (instance.n() as f64).sqrt())
}

/// Reads a dense numeric CSV. A first row that does not parse as numbers is
/// treated as a header.
pub fn read_dense_csv<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if k == 0 => continue,
            Err(_) => return Err(Error::Format(format!("non-numeric value on CSV row {}", k + 1))),
        }
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Format("empty CSV".into()));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format("ragged CSV rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Builds an instance from a dense design CSV (`n` rows, `p` columns) and a
/// one-column response CSV.
pub fn read_instance_csv<R1: Read, R2: Read>(design: R1, response: R2) -> Result<SparseInstance> {
    let x = read_dense_csv(design)?;
    let y = read_dense_csv(response)?;
    if y.ncols() != 1 {
        return Err(Error::Format(format!("response CSV must have one column, found {}", y.ncols())));
    }
    SparseInstance::new(x, y.column(0).into_owned())
}
