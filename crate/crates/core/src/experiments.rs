//! Seeded Monte-Carlo experiment driver.
//!
//! A run walks a grid of parameter cells (`d × k × n` for matrix simulations,
//! `m × k × α × T` for tomography, `p × k × n` for sparse regression) and
//! executes `replicates` independent replicates per cell. Every replicate draws
//! from its own stream derived from `(seed, cell, replicate)`. Results are
//! collected in `(cell, replicate)` order before anything is written, so the
//! output files are byte-identical for a given config whatever the worker
//! count.
//!
//! Files written to `output_dir`, each starting with `# schema=1`:
//!
//! * `<mode>_replicates.csv`: one row per replicate.
//! * `<mode>_aggregate.csv`: mean and 2.5%/97.5% empirical quantiles of every
//!   metric column per cell, computed from the replicate rows alone.
//! * `<mode>_timing.csv`: wall-clock runtime per replicate. Kept apart from
//!   the metrics because it is the only non-deterministic column.
//! * `sparse_coordinates.csv` (sparse mode): per-coordinate intervals.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::iht::{initial_threshold, run_iht, upsilon_r, IhtConfig, IhtState, T0Mode, UpsilonMode};
use crate::inference::{infer, QuantileMode};
use crate::linalg::{entrywise_inf_norm, schatten_norm, MatrixValue, SchattenOrder};
use crate::par::Execution;
use crate::quantum::{build_rescaled_dataset, gen_density_matrix, gen_random_settings, simulate_settings};
use crate::rng::derive_seed;
use crate::sparse::{
    build_decorrelator, desparsify, gen_orthogonal_instance, gen_sparse_instance, sparse_confidence_intervals,
    sparse_iht_run, sparse_sigma, DecorrelatorStrategy, SparseConfig,
};
use crate::stats::{empirical_quantile, mean};
use crate::trace_model::{canonical_basis_design, gen_gaussian_design, gen_low_rank_theta, simulate_observations, DesignBatch, Observations};

pub const SCHEMA_LINE: &str = "# schema=1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MatrixSim,
    Quantum,
    Sparse,
}

impl Mode {
    pub fn file_stem(self) -> &'static str {
        match self {
            Mode::MatrixSim => "matrix",
            Mode::Quantum => "quantum",
            Mode::Sparse => "sparse",
        }
    }

    fn grid_columns(self) -> &'static [&'static str] {
        match self {
            Mode::MatrixSim => &["d", "k", "n"],
            Mode::Quantum => &["m", "k", "alpha", "t"],
            Mode::Sparse => &["p", "k", "n"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// i.i.d. standard normal entries.
    #[default]
    Gaussian,
    /// The standard basis scaled by `d`; needs `n = d²`.
    OrthonormalBasis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixGrid {
    pub d: Vec<usize>,
    pub k: Vec<usize>,
    pub n: Vec<usize>,
    pub design: DesignKind,
}

impl Default for MatrixGrid {
    fn default() -> Self {
        Self {
            d: vec![32],
            k: vec![2],
            n: vec![2000, 4000, 8000],
            design: DesignKind::Gaussian,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantumGrid {
    pub m: Vec<usize>,
    pub k: Vec<usize>,
    /// Settings per cell are `N = α·k·d`.
    pub alpha: Vec<usize>,
    /// Repetitions per setting are `T = t_factor·d`.
    pub t_factor: Vec<usize>,
}

impl Default for QuantumGrid {
    fn default() -> Self {
        Self {
            m: vec![4],
            k: vec![1, 2],
            alpha: vec![2, 3, 4, 5],
            t_factor: vec![1, 10],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecorrelatorKind {
    #[default]
    Identity,
    RowProgram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseGrid {
    pub p: Vec<usize>,
    pub k: Vec<usize>,
    pub n: Vec<usize>,
    pub k_max: usize,
    pub decorrelator: DecorrelatorKind,
    /// Row-program tolerance; `None` uses `√(log p / n)`.
    pub mu: Option<f64>,
    pub delta: f64,
    /// Use `XᵀX = n·I` designs instead of Gaussian ones.
    pub orthogonal: bool,
    pub iterations: Option<usize>,
}

impl Default for SparseGrid {
    fn default() -> Self {
        let base = SparseConfig::default();
        Self {
            p: vec![200],
            k: vec![5],
            n: vec![600],
            k_max: base.k_max,
            decorrelator: DecorrelatorKind::Identity,
            mu: None,
            delta: base.delta,
            orthogonal: false,
            iterations: None,
        }
    }
}

/// Choice of the additive threshold term.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UpsilonSetting {
    /// `υ_r` from the current residual scale.
    #[default]
    DataDriven,
    /// Constant `υ = noise_std·√(d/n)·z_quantile`.
    NoiseLevel,
    Fixed { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum T0Setting {
    /// `B = σ̂₁ + υ₁` from the data.
    #[default]
    DataDriven,
    Fixed { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IhtSettings {
    pub rho: f64,
    pub e: f64,
    pub quantile: f64,
    pub upsilon: UpsilonSetting,
    pub t0: T0Setting,
    pub max_iters: Option<usize>,
    pub upsilon_floor: f64,
}

impl Default for IhtSettings {
    fn default() -> Self {
        let base = IhtConfig::default();
        let quantile = match base.upsilon_mode {
            UpsilonMode::DataDriven { quantile } => quantile,
            UpsilonMode::Fixed(_) => 0.9,
        };
        Self {
            rho: base.rho,
            e: base.e,
            quantile,
            upsilon: UpsilonSetting::DataDriven,
            t0: T0Setting::DataDriven,
            max_iters: base.max_iters,
            upsilon_floor: base.upsilon_floor,
        }
    }
}

impl IhtSettings {
    /// Resolves the settings against one dataset. A data-driven `B` combined
    /// with a constant `υ` is evaluated once from the data and then held
    /// fixed, so the run uses a constant `υ` throughout.
    pub fn resolve(&self, design: &DesignBatch, y: &Observations, noise_std: f64) -> Result<IhtConfig> {
        let base = IhtConfig {
            rho: self.rho,
            e: self.e,
            max_iters: self.max_iters,
            upsilon_floor: self.upsilon_floor,
            upsilon_mode: UpsilonMode::DataDriven { quantile: self.quantile },
            t0_mode: T0Mode::DataDriven,
            ..IhtConfig::default()
        };
        let upsilon_mode = match self.upsilon {
            UpsilonSetting::DataDriven => base.upsilon_mode,
            UpsilonSetting::NoiseLevel => {
                UpsilonMode::Fixed(upsilon_r(noise_std, design.dim(), design.n(), self.quantile)?)
            }
            UpsilonSetting::Fixed { value } => UpsilonMode::Fixed(value),
        };
        let t0_mode = match (self.t0, upsilon_mode) {
            (T0Setting::Fixed { value }, _) => T0Mode::Fixed(value),
            (T0Setting::DataDriven, UpsilonMode::DataDriven { .. }) => T0Mode::DataDriven,
            (T0Setting::DataDriven, UpsilonMode::Fixed(_)) => T0Mode::Fixed(initial_threshold(design, y, &base)?),
        };
        let config = IhtConfig {
            upsilon_mode,
            t0_mode,
            ..base
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    pub enabled: bool,
    pub level: f64,
    pub quantile_mode: QuantileModeSetting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileModeSetting {
    #[default]
    OneSided,
    TwoSided,
}

impl From<QuantileModeSetting> for QuantileMode {
    fn from(q: QuantileModeSetting) -> Self {
        match q {
            QuantileModeSetting::OneSided => QuantileMode::OneSided,
            QuantileModeSetting::TwoSided => QuantileMode::TwoSided,
        }
    }
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            level: 0.95,
            quantile_mode: QuantileModeSetting::OneSided,
        }
    }
}

fn default_replicates() -> usize {
    50
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_noise_std() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Replicates run concurrently on this many threads; `None` uses the
    /// global pool.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Noise level of the simulated matrix and sparse observations.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub matrix: MatrixGrid,
    #[serde(default)]
    pub quantum: QuantumGrid,
    #[serde(default)]
    pub sparse: SparseGrid,
    #[serde(default)]
    pub iht: IhtSettings,
    #[serde(default)]
    pub inference: InferenceSettings,
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            replicates: default_replicates(),
            workers: None,
            output_dir: default_output_dir(),
            noise_std: default_noise_std(),
            matrix: MatrixGrid::default(),
            quantum: QuantumGrid::default(),
            sparse: SparseGrid::default(),
            iht: IhtSettings::default(),
            inference: InferenceSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config for a known mode. A missing `mode` key is filled in;
    /// a different one is an error.
    pub fn from_json_for_mode(text: &str, mode: Mode) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let wanted = serde_json::to_value(mode).map_err(|e| Error::Config(e.to_string()))?;
        match obj.get("mode") {
            None => {
                obj.insert("mode".into(), wanted);
            }
            Some(m) if *m == wanted => {}
            Some(m) => return Err(Error::Config(format!("config mode {m} does not match {wanted}"))),
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, mode: Mode) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json_for_mode(&text, mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.replicates == 0 {
            return cfg("replicates must be >= 1".into());
        }
        if self.workers == Some(0) {
            return cfg("workers must be >= 1".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return cfg(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        let lists: Vec<(&str, &[usize])> = match self.mode {
            Mode::MatrixSim => vec![("d", &self.matrix.d), ("k", &self.matrix.k), ("n", &self.matrix.n)],
            Mode::Quantum => vec![
                ("m", &self.quantum.m),
                ("k", &self.quantum.k),
                ("alpha", &self.quantum.alpha),
                ("t_factor", &self.quantum.t_factor),
            ],
            Mode::Sparse => vec![("p", &self.sparse.p), ("k", &self.sparse.k), ("n", &self.sparse.n)],
        };
        for (name, list) in lists {
            if list.is_empty() {
                return cfg(format!("grid list '{name}' is empty"));
            }
            if list.contains(&0) {
                return cfg(format!("grid list '{name}' must hold positive values"));
            }
        }
        match self.mode {
            Mode::MatrixSim => {
                for cell in self.cells() {
                    let (d, k, n) = (cell[0], cell[1], cell[2]);
                    if k > d {
                        return cfg(format!("rank k = {k} exceeds d = {d}"));
                    }
                    if self.matrix.design == DesignKind::OrthonormalBasis && n != d * d {
                        return cfg(format!("orthonormal_basis design needs n = d² = {}, got n = {n}", d * d));
                    }
                }
            }
            Mode::Quantum => {
                if let Some(&m) = self.quantum.m.iter().find(|&&m| m > 10) {
                    return cfg(format!("m = {m} qubits is beyond the dense simulator"));
                }
                for cell in self.cells() {
                    let (m, k, alpha) = (cell[0], cell[1], cell[2]);
                    let d = 1usize << m;
                    if k > d {
                        return cfg(format!("rank k = {k} exceeds d = {d}"));
                    }
                    let settings = alpha * k * d;
                    if settings as f64 > 3f64.powi(m as i32) {
                        log::warn!(
                            "m={m}, k={k}, alpha={alpha}: N = {settings} settings exceeds the 3^m = {} distinct ones; duplicates will be drawn",
                            3usize.pow(m as u32)
                        );
                    }
                }
            }
            Mode::Sparse => {
                if self.sparse.k_max == 0 {
                    return cfg("sparse k_max must be >= 1".into());
                }
                if !(self.sparse.delta > 0.0 && self.sparse.delta < 1.0) {
                    return cfg(format!("sparse delta must lie in (0, 1), got {}", self.sparse.delta));
                }
                for cell in self.cells() {
                    let (p, k, n) = (cell[0], cell[1], cell[2]);
                    if k > p {
                        return cfg(format!("sparsity k = {k} exceeds p = {p}"));
                    }
                    if self.sparse.orthogonal && n < p {
                        return cfg(format!("orthogonal designs need n >= p, got n = {n}, p = {p}"));
                    }
                }
            }
        }
        if !(self.inference.level > 0.0 && self.inference.level < 1.0) {
            return cfg(format!("inference level must lie in (0, 1), got {}", self.inference.level));
        }
        let probe = IhtConfig {
            rho: self.iht.rho,
            e: self.iht.e,
            max_iters: self.iht.max_iters,
            upsilon_floor: self.iht.upsilon_floor,
            upsilon_mode: match self.iht.upsilon {
                UpsilonSetting::Fixed { value } => UpsilonMode::Fixed(value),
                _ => UpsilonMode::DataDriven { quantile: self.iht.quantile },
            },
            t0_mode: match self.iht.t0 {
                T0Setting::Fixed { value } => T0Mode::Fixed(value),
                T0Setting::DataDriven => T0Mode::DataDriven,
            },
            ..IhtConfig::default()
        };
        probe.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Grid cells in row-major order of the mode's grid lists.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let lists: Vec<&[usize]> = match self.mode {
            Mode::MatrixSim => vec![&self.matrix.d, &self.matrix.k, &self.matrix.n],
            Mode::Quantum => vec![&self.quantum.m, &self.quantum.k, &self.quantum.alpha, &self.quantum.t_factor],
            Mode::Sparse => vec![&self.sparse.p, &self.sparse.k, &self.sparse.n],
        };
        lists.iter().fold(vec![Vec::new()], |acc, list| {
            acc.iter()
                .flat_map(|prefix| {
                    list.iter().map(move |&v| {
                        let mut next = prefix.clone();
                        next.push(v);
                        next
                    })
                })
                .collect()
        })
    }
}

/// The four error norms of `Θ̂ − Θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorMetrics {
    pub frobenius_sq: f64,
    pub operator: f64,
    pub entrywise_inf: f64,
    pub schatten1: f64,
}

pub fn compute_metrics(estimate: &MatrixValue, truth: &MatrixValue) -> Result<ErrorMetrics> {
    if estimate.shape() != truth.shape() {
        return Err(shape_err(format!("{:?}", truth.shape()), format!("{:?}", estimate.shape())));
    }
    let diff = estimate.try_sub(truth)?;
    let frob = diff.frobenius_norm();
    Ok(ErrorMetrics {
        frobenius_sq: frob * frob,
        operator: schatten_norm(&diff, SchattenOrder::Operator)?,
        entrywise_inf: entrywise_inf_norm(&diff),
        schatten1: schatten_norm(&diff, SchattenOrder::P(1.0))?,
    })
}

/// One replicate. `grid` holds the cell's parameter values in the mode's
/// column order (for tomography `t` is the repetition count `T`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub cell: usize,
    pub replicate: usize,
    pub grid: Vec<usize>,
    pub metrics: ErrorMetrics,
    /// Rank of `Θ̂`, or the support size in sparse mode.
    pub rank_hat: usize,
    /// Thresholding steps taken.
    pub r_hat: usize,
    pub converged: bool,
    pub coverage: Option<f64>,
    pub mean_ci_length: Option<f64>,
    /// Fraction of the true support kept by `θ̂ʳ` (sparse mode).
    pub support_inclusion: Option<f64>,
    pub runtime_ms: f64,
}

/// Per-coordinate output of a sparse replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateRow {
    pub j: usize,
    pub theta: f64,
    pub theta_hat: f64,
    pub debiased: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub in_support: bool,
}

/// Everything a run produced, in `(cell, replicate)` order.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricRow>,
    /// Sparse mode only: per replicate, its coordinate rows.
    pub coordinates: Vec<Vec<CoordinateRow>>,
}

/// Seed of a replicate; sub-streams `[0]`, `[1]`, `[2]` feed the parameter,
/// the design and the noise.
pub fn replicate_seed(master: u64, cell: usize, replicate: usize) -> u64 {
    derive_seed(master, &[cell as u64, replicate as u64])
}

/// Runs `f` on a pool of `workers` threads (the global pool when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    {
        if let Some(w) = workers {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            return Ok(pool.install(f));
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    Ok(f())
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64() * 1e3))
}

fn matrix_replicate(config: &ExperimentConfig, cell: usize, rep: usize, grid: &[usize]) -> Result<MetricRow> {
    let (d, k, n) = (grid[0], grid[1], grid[2]);
    let seed = replicate_seed(config.seed, cell, rep);
    let exec = Execution::default();
    let ((metrics, state, report), runtime_ms) = timed(|| {
        let theta = gen_low_rank_theta(d, k, derive_seed(seed, &[0]))?;
        let design = match config.matrix.design {
            DesignKind::Gaussian => gen_gaussian_design(n, d, derive_seed(seed, &[1]))?,
            DesignKind::OrthonormalBasis => canonical_basis_design(d)?,
        };
        let y = simulate_observations(&design, &theta, config.noise_std, derive_seed(seed, &[2]))?;
        let iht = IhtConfig {
            execution: exec,
            ..config.iht.resolve(&design, &y, config.noise_std)?
        };
        let (estimate, state) = run_iht(&design, &y, &iht)?;
        let metrics = compute_metrics(&estimate, &theta)?;
        let report = if config.inference.enabled {
            Some(infer(
                &state,
                &design,
                &y,
                config.inference.level,
                config.inference.quantile_mode.into(),
                Some(&theta),
            )?)
        } else {
            None
        };
        Ok((metrics, state, report))
    })?;
    Ok(row_from_state(cell, rep, grid.to_vec(), metrics, &state, report, runtime_ms))
}

fn row_from_state(
    cell: usize,
    replicate: usize,
    grid: Vec<usize>,
    metrics: ErrorMetrics,
    state: &IhtState,
    report: Option<crate::inference::InferenceReport>,
    runtime_ms: f64,
) -> MetricRow {
    MetricRow {
        cell,
        replicate,
        grid,
        metrics,
        rank_hat: state.rank(),
        r_hat: state.r_hat(),
        converged: state.converged,
        coverage: report.as_ref().and_then(|r| r.coverage),
        mean_ci_length: report.as_ref().map(|r| r.mean_ci_length),
        support_inclusion: None,
        runtime_ms,
    }
}

fn quantum_replicate(config: &ExperimentConfig, cell: usize, rep: usize, grid: &[usize]) -> Result<MetricRow> {
    let (m, k, alpha, t_factor) = (grid[0], grid[1], grid[2], grid[3]);
    let d = 1usize << m;
    let t = t_factor * d;
    let seed = replicate_seed(config.seed, cell, rep);
    let exec = Execution::default();
    let ((metrics, state, report), runtime_ms) = timed(|| {
        let theta = gen_density_matrix(d, k, derive_seed(seed, &[0]))?;
        let settings = gen_random_settings(alpha * k * d, m, derive_seed(seed, &[1]))?;
        let batches = simulate_settings(exec, &settings, &theta, t, derive_seed(seed, &[2]))?;
        let (design, y) = build_rescaled_dataset(&settings, &batches)?.to_trace_regression()?;
        let iht = IhtConfig {
            execution: exec,
            ..config.iht.resolve(&design, &y, config.noise_std)?
        };
        let (estimate, state) = run_iht(&design, &y, &iht)?;
        let metrics = compute_metrics(&estimate, &theta)?;
        let report = if config.inference.enabled {
            Some(infer(
                &state,
                &design,
                &y,
                config.inference.level,
                config.inference.quantile_mode.into(),
                Some(&theta),
            )?)
        } else {
            None
        };
        Ok((metrics, state, report))
    })?;
    let grid = vec![m, k, alpha, t];
    Ok(row_from_state(cell, rep, grid, metrics, &state, report, runtime_ms))
}

fn column(v: &DVector<f64>) -> MatrixValue {
    MatrixValue::from_real(v.len(), 1, v.as_slice()).expect("column shape")
}

fn sparse_replicate(
    config: &ExperimentConfig,
    cell: usize,
    rep: usize,
    grid: &[usize],
) -> Result<(MetricRow, Vec<CoordinateRow>)> {
    let (p, k, n) = (grid[0], grid[1], grid[2]);
    let sc = &config.sparse;
    let seed = replicate_seed(config.seed, cell, rep);
    let ((row, coords), runtime_ms) = timed(|| {
        let inst_seed = derive_seed(seed, &[0]);
        let inst = if sc.orthogonal {
            gen_orthogonal_instance(n, p, k, config.noise_std, inst_seed)?
        } else {
            gen_sparse_instance(n, p, k, config.noise_std, inst_seed)?
        };
        let strategy = match sc.decorrelator {
            DecorrelatorKind::Identity => DecorrelatorStrategy::Identity,
            DecorrelatorKind::RowProgram => DecorrelatorStrategy::RowProgram { mu: sc.mu },
        };
        let dec = build_decorrelator(Execution::default(), &inst, strategy, &[sc.k_max])?;
        let sparse_config = SparseConfig {
            k_max: sc.k_max,
            delta: sc.delta,
            iterations: sc.iterations,
            ..SparseConfig::default()
        };
        let (theta_hat, trace) = sparse_iht_run(&inst, &dec, &sparse_config)?;
        let theta = inst.theta.clone().expect("generated instances keep theta");
        let metrics = compute_metrics(&column(&theta_hat), &column(&theta))?;
        let support: Vec<usize> = (0..p).filter(|&j| theta[j] != 0.0).collect();
        let kept = support.iter().filter(|&&j| theta_hat[j] != 0.0).count();
        let support_inclusion = if support.is_empty() { 1.0 } else { kept as f64 / support.len() as f64 };
        let (coverage, mean_len, coords) = if config.inference.enabled {
            let sigma = sparse_sigma(&inst, &theta_hat)?;
            let debiased = desparsify(&theta_hat, &inst, &dec.v)?;
            let ci = sparse_confidence_intervals(&debiased, &inst, &dec.v, sigma, config.inference.level)?;
            let coords = (0..p)
                .map(|j| CoordinateRow {
                    j,
                    theta: theta[j],
                    theta_hat: theta_hat[j],
                    debiased: debiased[j],
                    ci_lower: ci.lower[j],
                    ci_upper: ci.upper[j],
                    in_support: theta_hat[j] != 0.0,
                })
                .collect();
            (Some(ci.coverage(&theta)?), Some(ci.mean_length()), coords)
        } else {
            (None, None, Vec::new())
        };
        let row = MetricRow {
            cell,
            replicate: rep,
            grid: grid.to_vec(),
            metrics,
            rank_hat: (0..p).filter(|&j| theta_hat[j] != 0.0).count(),
            r_hat: trace.steps.len(),
            converged: true,
            coverage,
            mean_ci_length: mean_len,
            support_inclusion: Some(support_inclusion),
            runtime_ms: 0.0,
        };
        Ok((row, coords))
    })?;
    Ok((MetricRow { runtime_ms, ..row }, coords))
}

/// Runs every cell and replicate without touching the file system.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let cells = config.cells();
    let reps = config.replicates;
    let jobs = cells.len() * reps;
    log::info!(
        "{} experiment: {} cells x {reps} replicates, seed {}",
        config.mode.file_stem(),
        cells.len(),
        config.seed
    );
    let results = with_workers(config.workers, || {
        Execution::default().map(jobs, |job| {
            let (cell, rep) = (job / reps, job % reps);
            let grid = &cells[cell];
            match config.mode {
                Mode::MatrixSim => matrix_replicate(config, cell, rep, grid).map(|r| (r, Vec::new())),
                Mode::Quantum => quantum_replicate(config, cell, rep, grid).map(|r| (r, Vec::new())),
                Mode::Sparse => sparse_replicate(config, cell, rep, grid),
            }
        })
    })?;
    let mut out = ExperimentOutput::default();
    for r in results {
        let (row, coords) = r?;
        log::debug!("cell {} replicate {}: {:?}", row.cell, row.replicate, row.metrics);
        out.rows.push(row);
        if config.mode == Mode::Sparse {
            out.coordinates.push(coords);
        }
    }
    Ok(out)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Header and string records of the replicate table.
pub fn replicate_table(mode: Mode, rows: &[MetricRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["cell", "replicate"].iter().map(|s| s.to_string()).collect();
    header.extend(mode.grid_columns().iter().map(|s| s.to_string()));
    header.extend(
        [
            "frobenius_sq",
            "operator",
            "entrywise_inf",
            "schatten1",
            "rank_hat",
            "r_hat",
            "converged",
            "coverage",
            "mean_ci_length",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    if mode == Mode::Sparse {
        header.push("support_inclusion".into());
    }
    let records = rows
        .iter()
        .map(|r| {
            let mut rec = vec![r.cell.to_string(), r.replicate.to_string()];
            rec.extend(r.grid.iter().map(|g| g.to_string()));
            rec.extend([
                r.metrics.frobenius_sq.to_string(),
                r.metrics.operator.to_string(),
                r.metrics.entrywise_inf.to_string(),
                r.metrics.schatten1.to_string(),
                r.rank_hat.to_string(),
                r.r_hat.to_string(),
                u8::from(r.converged).to_string(),
                opt(r.coverage),
                opt(r.mean_ci_length),
            ]);
            if mode == Mode::Sparse {
                rec.push(opt(r.support_inclusion));
            }
            rec
        })
        .collect();
    (header, records)
}

/// Groups replicate records by the columns before the first metric column
/// (`cell` plus the grid values, `replicate` excluded) and summarises every
/// metric column by its mean and 2.5%/97.5% empirical quantiles. Empty
/// fields are skipped; a column with no values in a cell yields empty
/// fields.
pub fn aggregate_table(header: &[String], records: &[Vec<String>]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let first_metric = header
        .iter()
        .position(|h| h == "frobenius_sq")
        .ok_or_else(|| Error::Format("replicate table lacks a frobenius_sq column".into()))?;
    let rep_col = header.iter().position(|h| h == "replicate");
    let keys: Vec<usize> = (0..first_metric).filter(|&c| Some(c) != rep_col).collect();
    let metrics: Vec<usize> = (first_metric..header.len()).collect();

    let mut out_header: Vec<String> = keys.iter().map(|&c| header[c].clone()).collect();
    out_header.push("replicates".into());
    for &c in &metrics {
        for suffix in ["mean", "q025", "q975"] {
            out_header.push(format!("{}_{suffix}", header[c]));
        }
    }

    // grid key -> (key fields, values per metric column, replicate count)
    type Group = (Vec<String>, Vec<Vec<f64>>, usize);
    let mut groups: BTreeMap<Vec<u64>, Group> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "replicate row {} has {} fields, expected {}",
                i + 1,
                rec.len(),
                header.len()
            )));
        }
        let key_vals: Vec<String> = keys.iter().map(|&c| rec[c].trim().to_string()).collect();
        let sort_key = key_vals
            .iter()
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| Error::Format(format!("grid value '{s}' is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = groups
            .entry(sort_key)
            .or_insert_with(|| (key_vals, vec![Vec::new(); metrics.len()], 0));
        entry.2 += 1;
        for (slot, &c) in metrics.iter().enumerate() {
            let s = rec[c].trim();
            if s.is_empty() {
                continue;
            }
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Format(format!("value '{s}' in column {} is not a number", header[c])))?;
            entry.1[slot].push(v);
        }
    }

    let rows = groups
        .into_values()
        .map(|(key_vals, values, count)| {
            let mut rec = key_vals;
            rec.push(count.to_string());
            for v in &values {
                if v.is_empty() {
                    rec.extend([String::new(), String::new(), String::new()]);
                } else {
                    rec.push(mean(v).to_string());
                    rec.push(empirical_quantile(v, 0.025).to_string());
                    rec.push(empirical_quantile(v, 0.975).to_string());
                }
            }
            rec
        })
        .collect();
    Ok((out_header, rows))
}

fn create_with_schema(path: &Path) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SCHEMA_LINE}")?;
    Ok(w)
}

fn write_table<W: Write>(w: W, header: &[String], records: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for r in records {
        out.write_record(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a table written by this module, skipping `#` comment lines.
pub fn read_table<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let records = reader
        .records()
        .map(|r| Ok(r?.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, records))
}

/// Re-aggregates a replicate CSV into an aggregate CSV.
pub fn report(input: &Path, output: &Path) -> Result<()> {
    let (header, records) = read_table(File::open(input)?)?;
    let mut w = create_with_schema(output)?;
    let (agg_header, agg) = aggregate_table(&header, &records)?;
    write_table(&mut w, &agg_header, &agg)
}

/// Paths of the files a run writes.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputFiles {
    pub replicates: PathBuf,
    pub aggregate: PathBuf,
    pub timing: PathBuf,
    pub coordinates: Option<PathBuf>,
}

impl OutputFiles {
    pub fn for_config(config: &ExperimentConfig) -> Self {
        let dir = &config.output_dir;
        let stem = config.mode.file_stem();
        Self {
            replicates: dir.join(format!("{stem}_replicates.csv")),
            aggregate: dir.join(format!("{stem}_aggregate.csv")),
            timing: dir.join(format!("{stem}_timing.csv")),
            coordinates: (config.mode == Mode::Sparse).then(|| dir.join("sparse_coordinates.csv")),
        }
    }
}

/// Runs the experiment and writes its CSV files. The output files are
/// created before any computation, so an unwritable directory fails fast.
pub fn run_and_write(config: &ExperimentConfig) -> Result<OutputFiles> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let files = OutputFiles::for_config(config);
    let mut rep_w = create_with_schema(&files.replicates)?;
    let mut agg_w = create_with_schema(&files.aggregate)?;
    let mut time_w = create_with_schema(&files.timing)?;
    let mut coord_w = files.coordinates.as_deref().map(create_with_schema).transpose()?;

    let output = run_experiment(config)?;

    let (header, records) = replicate_table(config.mode, &output.rows);
    write_table(&mut rep_w, &header, &records)?;
    let (agg_header, agg) = aggregate_table(&header, &records)?;
    write_table(&mut agg_w, &agg_header, &agg)?;

    let timing: Vec<Vec<String>> = output
        .rows
        .iter()
        .map(|r| vec![r.cell.to_string(), r.replicate.to_string(), r.runtime_ms.to_string()])
        .collect();
    write_table(&mut time_w, &["cell".into(), "replicate".into(), "runtime_ms".into()], &timing)?;

    if let Some(w) = coord_w.as_mut() {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "cell", "replicate", "j", "theta", "theta_hat", "debiased", "ci_lower", "ci_upper", "covered", "in_support",
        ])?;
        for (row, coords) in output.rows.iter().zip(&output.coordinates) {
            for c in coords {
                out.write_record([
                    row.cell.to_string(),
                    row.replicate.to_string(),
                    c.j.to_string(),
                    c.theta.to_string(),
                    c.theta_hat.to_string(),
                    c.debiased.to_string(),
                    c.ci_lower.to_string(),
                    c.ci_upper.to_string(),
                    u8::from(c.ci_lower <= c.theta && c.theta <= c.ci_upper).to_string(),
                    u8::from(c.in_support).to_string(),
                ])?;
            }
        }
        out.flush()?;
    }
    Ok(files)
}

pub fn run_matrix_experiment(config: &ExperimentConfig) -> Result<OutputFiles> {
    expect_mode(config, Mode::MatrixSim)?;
    run_and_write(config)
}

pub fn run_quantum_experiment(config: &ExperimentConfig) -> Result<OutputFiles> {
    expect_mode(config, Mode::Quantum)?;
    run_and_write(config)
}

pub fn run_sparse_experiment(config: &ExperimentConfig) -> Result<OutputFiles> {
    expect_mode(config, Mode::Sparse)?;
    run_and_write(config)
}

fn expect_mode(config: &ExperimentConfig, mode: Mode) -> Result<()> {
    if config.mode != mode {
        return Err(Error::Config(format!("expected mode {mode:?}, config has {:?}", config.mode)));
    }
    Ok(())
}
