//! Spectral iterative hard thresholding.
//!
//! Each step backprojects the residual, `Ψ̂ʳ = 𝕏*(Y − 𝕏(Θ̂ʳ⁻¹))`, and keeps
//! the singular values of `Θ̂ʳ⁻¹ + Ψ̂ʳ` that reach the current threshold
//! `T_r = ρ·T_{r−1} + υ_r`. The loop stops, after thresholding, once
//! `T_r ≤ (1 + e)·υ_r / (1 − ρ)`.

use std::io::Write;

use crate::error::{arg_err, Error, Result};
use crate::linalg::{hard_threshold_singular_ranked, MatrixValue};
use crate::par::Execution;
use crate::stats::normal_quantile;
use crate::trace_model::{DesignBatch, Observations, RipEstimate};

/// How the additive threshold term `υ` is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpsilonMode {
    Fixed(f64),
    /// `υ_r = σ̂_r · √(d/n) · z_quantile`, recomputed every iteration.
    DataDriven { quantile: f64 },
}

/// How the starting threshold `B` is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum T0Mode {
    /// `T₀ = B`; the first step uses `T₁ = ρB + υ₁`.
    Fixed(f64),
    /// `T₁ = B = σ̂₁ + υ₁`, computed from the data at `Θ̂⁰ = 0`.
    DataDriven,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IhtConfig {
    pub rho: f64,
    pub upsilon_mode: UpsilonMode,
    pub t0_mode: T0Mode,
    /// Stopping slack.
    pub e: f64,
    /// Iteration cap; `None` means `ceil(10 ln n)`.
    pub max_iters: Option<usize>,
    /// Confidence level carried along for reporting.
    pub delta: f64,
    /// Lower bound applied to a data-driven `υ_r`. With the default of 0 a
    /// noiseless run keeps shrinking its threshold until `max_iters`.
    pub upsilon_floor: f64,
    pub execution: Execution,
}

impl Default for IhtConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            upsilon_mode: UpsilonMode::DataDriven { quantile: 0.90 },
            t0_mode: T0Mode::DataDriven,
            e: 0.1,
            max_iters: None,
            delta: 0.05,
            upsilon_floor: 0.0,
            execution: Execution::default(),
        }
    }
}

impl IhtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(arg_err(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.e >= 0.0) || !self.e.is_finite() {
            return Err(arg_err(format!("e must be finite and >= 0, got {}", self.e)));
        }
        if self.max_iters == Some(0) {
            return Err(arg_err("max_iters must be >= 1"));
        }
        match self.upsilon_mode {
            UpsilonMode::Fixed(u) if !(u >= 0.0) || !u.is_finite() => {
                return Err(arg_err(format!("fixed upsilon must be finite and >= 0, got {u}")))
            }
            UpsilonMode::DataDriven { quantile } if !(quantile > 0.0 && quantile < 1.0) => {
                return Err(arg_err(format!("upsilon quantile must lie in (0, 1), got {quantile}")))
            }
            _ => {}
        }
        if let T0Mode::Fixed(b) = self.t0_mode {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(arg_err(format!("B must be finite and >= 0, got {b}")));
            }
        }
        if !(self.upsilon_floor >= 0.0) || !self.upsilon_floor.is_finite() {
            return Err(arg_err("upsilon_floor must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn max_iters_for(&self, n: usize) -> usize {
        self.max_iters
            .unwrap_or_else(|| ((10.0 * (n.max(1) as f64).ln()).ceil() as usize).max(1))
    }

    fn upsilon(&self, sigma: f64, d: usize, n: usize) -> Result<f64> {
        match self.upsilon_mode {
            UpsilonMode::Fixed(u) => Ok(u),
            UpsilonMode::DataDriven { quantile } => Ok(upsilon_r(sigma, d, n, quantile)?.max(self.upsilon_floor)),
        }
    }
}

/// One iteration of the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub threshold: f64,
    pub upsilon: f64,
    /// `σ̂_r`, the residual scale at the previous estimate.
    pub sigma: f64,
    pub rank: usize,
    /// `‖Y − 𝕏(Θ̂ʳ⁻¹)‖₂`.
    pub residual_l2: f64,
    /// The recursion would have raised the threshold; it was held at `T_{r−1}`.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IhtState {
    pub estimate: MatrixValue,
    /// Threshold of the latest step, or `T₀` before the first step.
    pub threshold: f64,
    pub iter: usize,
    /// The starting threshold `B`.
    pub t0: f64,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
}

impl IhtState {
    /// Starting state `Θ̂⁰ = 0` with `T₀ = B` resolved from the configuration.
    pub fn new(design: &DesignBatch, y: &Observations, config: &IhtConfig) -> Result<Self> {
        config.validate()?;
        y.check_against(design)?;
        let d = design.dim();
        let t0 = initial_threshold(design, y, config)?;
        Ok(Self {
            estimate: MatrixValue::zeros(d, d),
            threshold: t0,
            iter: 0,
            t0,
            trace: Vec::new(),
            converged: false,
        })
    }

    /// Number of thresholding steps performed, `r̂`.
    pub fn r_hat(&self) -> usize {
        self.iter
    }

    pub fn rank(&self) -> usize {
        self.trace.last().map_or(0, |t| t.rank)
    }

    /// `σ̂` from the final iteration.
    pub fn final_sigma(&self) -> Option<f64> {
        self.trace.last().map(|t| t.sigma)
    }

    /// Iteration bound evaluated at the final `υ`. When the first step used
    /// `T₁ = B` directly, the bound is taken from the equivalent starting
    /// point `T₀ = (B − υ₁)/ρ`.
    pub fn iteration_bound(&self, config: &IhtConfig) -> Option<f64> {
        let first = self.trace.first()?;
        let last = self.trace.last()?;
        let t0 = match config.t0_mode {
            T0Mode::Fixed(_) => self.t0,
            T0Mode::DataDriven => (self.t0 - first.upsilon) / config.rho,
        };
        iteration_bound(config.rho, config.e, t0, last.upsilon)
    }

    /// True when every step used the same `υ`.
    pub fn upsilon_stable(&self) -> bool {
        self.trace.windows(2).all(|w| w[1].upsilon == w[0].upsilon)
    }

    /// Writes the trace as `iter,T_r,sigma_r,rank,residual_l2`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "T_r", "sigma_r", "rank", "residual_l2"])?;
        for t in &self.trace {
            out.write_record([
                t.iter.to_string(),
                t.threshold.to_string(),
                t.sigma.to_string(),
                t.rank.to_string(),
                t.residual_l2.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `‖Y − 𝕏(Θ̂)‖₂ / √n`.
pub fn empirical_sigma(design: &DesignBatch, y: &Observations, estimate: &MatrixValue) -> Result<f64> {
    let (norm, _) = residual(Execution::default(), design, y, estimate)?;
    Ok(norm / (design.n() as f64).sqrt())
}

fn residual(exec: Execution, design: &DesignBatch, y: &Observations, estimate: &MatrixValue) -> Result<(f64, Vec<f64>)> {
    y.check_against(design)?;
    let fitted = design.apply_with(exec, estimate)?;
    let r: Vec<f64> = y.values.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    Ok((r.iter().map(|v| v * v).sum::<f64>().sqrt(), r))
}

/// `σ · √(d/n) · z_quantile`.
pub fn upsilon_r(sigma: f64, d: usize, n: usize, quantile: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(arg_err(format!("sigma must be >= 0, got {sigma}")));
    }
    if n == 0 {
        return Err(arg_err("n must be >= 1"));
    }
    Ok(sigma * (d as f64 / n as f64).sqrt() * normal_quantile(quantile)?)
}

/// `ρ·T_prev + υ`.
pub fn threshold_step(t_prev: f64, rho: f64, upsilon: f64) -> f64 {
    rho * t_prev + upsilon
}

/// `B`: the configured value in fixed mode, `σ̂(0) + υ(σ̂(0))` otherwise.
pub fn initial_threshold(design: &DesignBatch, y: &Observations, config: &IhtConfig) -> Result<f64> {
    match config.t0_mode {
        T0Mode::Fixed(b) => Ok(b),
        T0Mode::DataDriven => {
            let d = design.dim();
            let sigma = empirical_sigma(design, y, &MatrixValue::zeros(d, d))?;
            Ok(sigma + config.upsilon(sigma, d, design.n())?)
        }
    }
}

/// True iff `T_r ≤ (1 + e)·υ_r / (1 − ρ)`.
pub fn stopping_check(t_r: f64, upsilon_r: f64, rho: f64, e: f64) -> bool {
    t_r <= (1.0 + e) * upsilon_r / (1.0 - rho)
}

/// `1 + log((1−ρ)·T₀ / (e·υ)) / log(1/ρ)`, the largest number of steps the
/// stopping rule can take with a constant `υ`. `None` when `e` or `υ` is 0.
pub fn iteration_bound(rho: f64, e: f64, t0: f64, upsilon: f64) -> Option<f64> {
    if e <= 0.0 || upsilon <= 0.0 {
        return None;
    }
    let ratio = (1.0 - rho) * t0 / (e * upsilon);
    Some(1.0 + ratio.max(1.0).ln() / (1.0 / rho).ln())
}

/// The validity condition `ρ ≥ 4·√K·c̃(2K)`, checked against a probe estimate
/// at rank `2K`. Probing under-estimates `c̃`, so `true` is not a guarantee.
pub fn rho_condition_holds(rho: f64, k_max: usize, rip_2k: &RipEstimate) -> Result<bool> {
    if rip_2k.k != 2 * k_max {
        return Err(arg_err(format!("expected a rank-{} estimate, got rank {}", 2 * k_max, rip_2k.k)));
    }
    Ok(rho >= 4.0 * (k_max as f64).sqrt() * rip_2k.max_deviation)
}

/// One backprojection and thresholding step.
pub fn iht_step(state: &IhtState, design: &DesignBatch, y: &Observations, config: &IhtConfig) -> Result<IhtState> {
    let exec = config.execution;
    let (d, n) = (design.dim(), design.n());
    let (res_norm, r) = residual(exec, design, y, &state.estimate)?;
    let sigma = res_norm / (n as f64).sqrt();
    let upsilon = config.upsilon(sigma, d, n)?;
    let (threshold, clamped) = if state.iter == 0 && config.t0_mode == T0Mode::DataDriven {
        (state.t0, false)
    } else {
        let t = threshold_step(state.threshold, config.rho, upsilon);
        if t > state.threshold {
            (state.threshold, true)
        } else {
            (t, false)
        }
    };
    let psi = design.adjoint_apply_with(exec, &r)?;
    let combined = &state.estimate + &psi;
    let (estimate, rank) = hard_threshold_singular_ranked(&combined, threshold)?;
    if !estimate.is_finite() {
        return Err(Error::Numerical(format!("non-finite estimate at iteration {}", state.iter + 1)));
    }
    let mut trace = state.trace.clone();
    trace.push(TraceRecord {
        iter: state.iter + 1,
        threshold,
        upsilon,
        sigma,
        rank,
        residual_l2: res_norm,
        clamped,
    });
    Ok(IhtState {
        estimate,
        threshold,
        iter: state.iter + 1,
        t0: state.t0,
        trace,
        converged: false,
    })
}

/// Iterates [`iht_step`] until the stopping rule fires or the iteration cap
/// is reached. A capped run returns its last estimate with
/// `converged == false`.
pub fn run_iht(design: &DesignBatch, y: &Observations, config: &IhtConfig) -> Result<(MatrixValue, IhtState)> {
    let mut state = IhtState::new(design, y, config)?;
    let cap = config.max_iters_for(design.n());
    while state.iter < cap {
        state = iht_step(&state, design, y, config)?;
        let last = state.trace.last().expect("step appends a record");
        if stopping_check(last.threshold, last.upsilon, config.rho, config.e) {
            state.converged = true;
            break;
        }
    }
    if !state.converged {
        log::warn!("IHT stopped at the iteration cap ({cap}) without meeting the stopping rule");
    } else if state.upsilon_stable() {
        if let Some(bound) = state.iteration_bound(config) {
            if state.r_hat() as f64 > bound {
                log::warn!("IHT took {} steps, above the bound {bound:.3}", state.r_hat());
            }
        }
    }
    Ok((state.estimate.clone(), state))
}
