//! Debiasing and entrywise confidence intervals.
//!
//! The one-step correction `Θ̂ = Θ̂ʳ + 𝕏*(Y − 𝕏(Θ̂ʳ))` satisfies
//! `√n(Θ̂ − Θ) = Δ + Z` with `Z = (1/√n) Σ X_i ε_i`. Intervals are centered at
//! the debiased entries with half-width `σ̂ · Σ̂_{m,m'} · q / √n`.

use std::io::Write;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::iht::IhtState;
use crate::linalg::MatrixValue;
use crate::stats::normal_quantile;
use crate::trace_model::{DesignBatch, Observations};

/// Which normal quantile sets the interval width at a given level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantileMode {
    /// `q = z_level` (0.95 gives 1.645).
    #[default]
    OneSided,
    /// `q = z_{(1+level)/2}` (0.95 gives 1.960), a symmetric two-sided interval.
    TwoSided,
}

impl QuantileMode {
    pub fn quantile(self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(arg_err(format!("confidence level must lie in (0, 1), got {level}")));
        }
        match self {
            QuantileMode::OneSided => normal_quantile(level),
            QuantileMode::TwoSided => normal_quantile((1.0 + level) / 2.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceReport {
    pub debiased: MatrixValue,
    /// Bounds for the real part of each entry, row-major. The imaginary part
    /// uses the same half-width around `debiased.im`.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub half_widths: Vec<f64>,
    pub sigma_hat: f64,
    pub entry_scales: Vec<f64>,
    pub level: f64,
    pub mode: QuantileMode,
    pub coverage: Option<f64>,
    pub mean_ci_length: f64,
}

impl InferenceReport {
    pub fn dim(&self) -> usize {
        self.debiased.rows()
    }

    /// Whether entry `(m, m')` of `truth` lies in its interval. For complex
    /// entries both the real and imaginary parts must be covered.
    pub fn covers(&self, truth: &MatrixValue, m: usize, mp: usize) -> bool {
        let k = m * self.dim() + mp;
        let t = truth[(m, mp)];
        let re_ok = self.ci_lower[k] <= t.re && t.re <= self.ci_upper[k];
        let im_ok = (t.im - self.debiased[(m, mp)].im).abs() <= self.half_widths[k];
        re_ok && im_ok
    }

    /// Writes `m,m_prime,estimate_re,estimate_im,ci_lower,ci_upper,covered`;
    /// `covered` is left empty without a truth.
    pub fn write_csv<W: Write>(&self, w: W, truth: Option<&MatrixValue>) -> Result<()> {
        let d = self.dim();
        if let Some(t) = truth {
            if t.shape() != (d, d) {
                return Err(shape_err(format!("{d}x{d} truth"), format!("{}x{}", t.rows(), t.cols())));
            }
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["m", "m_prime", "estimate_re", "estimate_im", "ci_lower", "ci_upper", "covered"])?;
        for m in 0..d {
            for mp in 0..d {
                let k = m * d + mp;
                let z = self.debiased[(m, mp)];
                let covered = truth.map(|t| (self.covers(t, m, mp) as u8).to_string()).unwrap_or_default();
                out.write_record([
                    m.to_string(),
                    mp.to_string(),
                    z.re.to_string(),
                    z.im.to_string(),
                    self.ci_lower[k].to_string(),
                    self.ci_upper[k].to_string(),
                    covered,
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `Θ̂ʳ + 𝕏*(Y − 𝕏(Θ̂ʳ))`.
pub fn debias(estimate: &MatrixValue, design: &DesignBatch, y: &Observations) -> Result<MatrixValue> {
    y.check_against(design)?;
    let fitted = design.apply(estimate)?;
    let r: Vec<f64> = y.values.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    Ok(estimate + &design.adjoint_apply(&r)?)
}

/// The bias and noise terms of the debiased estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaZ {
    pub delta: MatrixValue,
    pub z: MatrixValue,
}

/// `Δ = √n(Θ̂ʳ − Θ) − √n·𝕏*𝕏(Θ̂ʳ − Θ)` and `Z = √n·𝕏*(ε)`, using the realized
/// noise stored in `y`.
pub fn delta_z_decomposition(
    estimate: &MatrixValue,
    truth: &MatrixValue,
    design: &DesignBatch,
    y: &Observations,
) -> Result<DeltaZ> {
    let eps = y
        .noise
        .as_ref()
        .ok_or_else(|| Error::Unsupported("the decomposition needs the realized noise".into()))?;
    y.check_against(design)?;
    let sqrt_n = (design.n() as f64).sqrt();
    let err = estimate.try_sub(truth)?;
    let back = design.adjoint_apply(&design.apply(&err)?)?;
    Ok(DeltaZ {
        delta: (&err - &back).scale(sqrt_n),
        z: design.adjoint_apply(eps)?.scale(sqrt_n),
    })
}

/// `Σ̂_{m,m'} = √((1/n) Σ_i |X_i[m, m']|²)`.
pub fn entry_scale(design: &DesignBatch, m: usize, mp: usize) -> Result<f64> {
    let s = design.entry_series(m, mp)?;
    Ok((s.iter().map(|z| z.norm_sqr()).sum::<f64>() / design.n() as f64).sqrt())
}

/// `(1/n) Σ_i Re(X_i[j, j'] · conj(X_i[l, l']))`, the conditional covariance
/// of `Z_{j,j'}` and `Z_{l,l'}` per unit noise variance.
pub fn z_covariance_entry(design: &DesignBatch, a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    let sa = design.entry_series(a.0, a.1)?;
    let sb = design.entry_series(b.0, b.1)?;
    let total: f64 = sa.iter().zip(&sb).map(|(p, q)| (p * q.conj()).re).sum();
    Ok(total / design.n() as f64)
}

pub fn confidence_intervals(
    debiased: &MatrixValue,
    design: &DesignBatch,
    sigma_hat: f64,
    level: f64,
    mode: QuantileMode,
) -> Result<InferenceReport> {
    let d = design.dim();
    if debiased.shape() != (d, d) {
        return Err(shape_err(format!("{d}x{d} estimate"), format!("{}x{}", debiased.rows(), debiased.cols())));
    }
    if !(sigma_hat >= 0.0) || !sigma_hat.is_finite() {
        return Err(arg_err(format!("sigma_hat must be finite and >= 0, got {sigma_hat}")));
    }
    let q = mode.quantile(level)?;
    let entry_scales: Vec<f64> = design.entry_second_moments().into_iter().map(f64::sqrt).collect();
    let factor = sigma_hat * q / (design.n() as f64).sqrt();
    let half_widths: Vec<f64> = entry_scales.iter().map(|s| factor * s).collect();
    let centers = debiased.as_slice();
    let ci_lower = centers.iter().zip(&half_widths).map(|(c, h)| c.re - h).collect();
    let ci_upper = centers.iter().zip(&half_widths).map(|(c, h)| c.re + h).collect();
    let mean_ci_length = 2.0 * half_widths.iter().sum::<f64>() / half_widths.len() as f64;
    Ok(InferenceReport {
        debiased: debiased.clone(),
        ci_lower,
        ci_upper,
        half_widths,
        sigma_hat,
        entry_scales,
        level,
        mode,
        coverage: None,
        mean_ci_length,
    })
}

/// Fraction of entries of `truth` covered by their intervals.
pub fn coverage_report(truth: &MatrixValue, report: &InferenceReport) -> Result<f64> {
    let d = report.dim();
    if truth.shape() != (d, d) {
        return Err(shape_err(format!("{d}x{d} truth"), format!("{}x{}", truth.rows(), truth.cols())));
    }
    let hits = (0..d)
        .flat_map(|m| (0..d).map(move |mp| (m, mp)))
        .filter(|&(m, mp)| report.covers(truth, m, mp))
        .count();
    Ok(hits as f64 / (d * d) as f64)
}

/// Debiases an IHT result and builds intervals with the final-iteration `σ̂`.
/// Coverage is filled in when `truth` is given.
pub fn infer(
    state: &IhtState,
    design: &DesignBatch,
    y: &Observations,
    level: f64,
    mode: QuantileMode,
    truth: Option<&MatrixValue>,
) -> Result<InferenceReport> {
    let sigma = state
        .final_sigma()
        .ok_or_else(|| arg_err("IHT state has no iterations"))?;
    let debiased = debias(&state.estimate, design, y)?;
    let mut report = confidence_intervals(&debiased, design, sigma, level, mode)?;
    if let Some(t) = truth {
        report.coverage = Some(coverage_report(t, &report)?);
    }
    Ok(report)
}
