//! End-to-end acceptance checks. Each check prints one PASS/FAIL line with
//! its measurements and runtime; the process exits non-zero if any fails.

use std::time::{Duration, Instant};

use iht_core::experiments::{self, ExperimentConfig, Mode, QuantumGrid};
use iht_core::iht::{initial_threshold, iteration_bound, run_iht, upsilon_r, IhtConfig, T0Mode, UpsilonMode};
use iht_core::inference::{delta_z_decomposition, infer, QuantileMode};
use iht_core::linalg::{entrywise_inf_norm, schatten_norm, SchattenOrder};
use iht_core::quantum::{
    gen_density_matrix, marginalize, outcome_distribution, outcome_from_index, outcome_index, parity, PauliSetting,
};
use iht_core::rng::{self, derive_seed};
use iht_core::sparse::{
    build_decorrelator, desparsify, estimate_r_k, gen_orthogonal_instance, gen_sparse_instance,
    sparse_confidence_intervals, sparse_delta_z, sparse_iht_run, sparse_sigma, DecorrelatorStrategy, SparseConfig,
};
use iht_core::stats::median;
use iht_core::trace_model::{
    canonical_basis_design, estimate_rip_constant, gen_gaussian_design, gen_low_rank_theta, simulate_observations,
};
use iht_core::Execution;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

/// Noiseless recovery on the exact-isometry design within the iteration bound.
fn exact_recovery() -> Outcome {
    let (d, k) = (16, 2);
    let x = canonical_basis_design(d).map_err(fail)?;
    let theta = gen_low_rank_theta(d, k, 101).map_err(fail)?;
    let y = simulate_observations(&x, &theta, 0.0, 0).map_err(fail)?;
    let b = initial_threshold(&x, &y, &IhtConfig::default()).map_err(fail)?;
    let upsilon = 1e-6 * b;
    let config = IhtConfig {
        upsilon_mode: UpsilonMode::Fixed(upsilon),
        t0_mode: T0Mode::Fixed(b),
        ..IhtConfig::default()
    };
    let (est, state) = run_iht(&x, &y, &config).map_err(fail)?;
    let rel = (&est - &theta).frobenius_norm() / theta.frobenius_norm();
    let bound = 1.0 + (10.0 * (1.0 - config.rho) * b / upsilon).ln() / (1.0 / config.rho).ln();
    let r_hat = state.r_hat();
    check(
        rel <= 1e-8 && (r_hat as f64) <= bound && state.converged,
        format!("relative error {rel:.2e}, r_hat {r_hat} <= bound {bound:.3}"),
    )
}

struct RateRun {
    op_error: f64,
    rank: usize,
    r_hat: usize,
    bound: f64,
}

fn rate_runs() -> Result<Vec<(usize, Vec<RateRun>)>, String> {
    let (d, k, reps) = (32, 2, 50);
    let noise = 1.0;
    let mut out = Vec::new();
    for (cell, &n) in [2000usize, 4000, 8000].iter().enumerate() {
        let mut runs = Vec::new();
        for rep in 0..reps {
            let seed = derive_seed(2024, &[cell as u64, rep]);
            let x = gen_gaussian_design(n, d, derive_seed(seed, &[1])).map_err(fail)?;
            let theta = gen_low_rank_theta(d, k, derive_seed(seed, &[0])).map_err(fail)?;
            let y = simulate_observations(&x, &theta, noise, derive_seed(seed, &[2])).map_err(fail)?;
            let upsilon = upsilon_r(noise, d, n, 0.9).map_err(fail)?;
            let b = initial_threshold(&x, &y, &IhtConfig::default()).map_err(fail)?;
            let config = IhtConfig {
                upsilon_mode: UpsilonMode::Fixed(upsilon),
                t0_mode: T0Mode::Fixed(b),
                ..IhtConfig::default()
            };
            let (est, state) = run_iht(&x, &y, &config).map_err(fail)?;
            runs.push(RateRun {
                op_error: schatten_norm(&(&est - &theta), SchattenOrder::Operator).map_err(fail)?,
                rank: state.rank(),
                r_hat: state.r_hat(),
                bound: iteration_bound(config.rho, config.e, b, upsilon).ok_or("bound undefined")?,
            });
        }
        out.push((n, runs));
    }
    Ok(out)
}

fn rate_scaling(runs: &[(usize, Vec<RateRun>)]) -> Outcome {
    let medians: Vec<f64> = runs
        .iter()
        .map(|(_, r)| median(&r.iter().map(|x| x.op_error).collect::<Vec<_>>()))
        .collect();
    let ratio = medians[2] / medians[0];
    let total: usize = runs.iter().map(|(_, r)| r.len()).sum();
    let low_rank = runs.iter().flat_map(|(_, r)| r).filter(|x| x.rank <= 2).count();
    let share = low_rank as f64 / total as f64;
    check(
        medians[0] > medians[1] && medians[1] > medians[2] && (0.35..=0.75).contains(&ratio) && share >= 0.9,
        format!(
            "median operator errors {:.4}/{:.4}/{:.4}, ratio {ratio:.3}, rank <= k in {low_rank}/{total}",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn stopping_bound(runs: &[(usize, Vec<RateRun>)]) -> Outcome {
    let all: Vec<&RateRun> = runs.iter().flat_map(|(_, r)| r).collect();
    let violations = all.iter().filter(|r| r.r_hat as f64 > r.bound).count();
    let gap = all.iter().map(|r| r.bound - r.r_hat as f64).fold(f64::INFINITY, f64::min);
    check(
        violations == 0,
        format!("{violations} of {} runs exceed the bound, smallest slack {gap:.3}", all.len()),
    )
}

/// `√n(Θ̃ − Θ) = Δ + Z` with the realized noise.
fn debias_identity() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let d = 4 + (i % 5) as usize;
        let n = 150 + 10 * i as usize;
        let x = gen_gaussian_design(n, d, derive_seed(7, &[i, 0])).map_err(fail)?;
        let theta = gen_low_rank_theta(d, 1 + (i % 2) as usize, derive_seed(7, &[i, 1])).map_err(fail)?;
        let y = simulate_observations(&x, &theta, 0.5, derive_seed(7, &[i, 2])).map_err(fail)?;
        let (est, state) = run_iht(&x, &y, &IhtConfig::default()).map_err(fail)?;
        let report = infer(&state, &x, &y, 0.95, QuantileMode::OneSided, None).map_err(fail)?;
        let dz = delta_z_decomposition(&est, &theta, &x, &y).map_err(fail)?;
        let lhs = (&report.debiased - &theta).scale((n as f64).sqrt());
        let err = entrywise_inf_norm(&(&lhs - &(&dz.delta + &dz.z)));
        worst = worst.max(err);
    }
    check(worst <= 1e-10, format!("worst entrywise reconstruction error {worst:.2e} over 100 instances"))
}

fn bias_shrinkage() -> Outcome {
    let (d, k, reps) = (16, 2, 30);
    let mut medians = Vec::new();
    for (cell, &n) in [1000usize, 2000, 4000].iter().enumerate() {
        let mut deltas = Vec::new();
        for rep in 0..reps {
            let seed = derive_seed(55, &[cell as u64, rep]);
            let x = gen_gaussian_design(n, d, derive_seed(seed, &[1])).map_err(fail)?;
            let theta = gen_low_rank_theta(d, k, derive_seed(seed, &[0])).map_err(fail)?;
            let y = simulate_observations(&x, &theta, 1.0, derive_seed(seed, &[2])).map_err(fail)?;
            let (est, _) = run_iht(&x, &y, &IhtConfig::default()).map_err(fail)?;
            let dz = delta_z_decomposition(&est, &theta, &x, &y).map_err(fail)?;
            deltas.push(entrywise_inf_norm(&dz.delta));
        }
        medians.push(median(&deltas));
    }
    check(
        medians[0] > medians[1] && medians[1] > medians[2],
        format!("median |Delta|_inf {:.4}/{:.4}/{:.4}", medians[0], medians[1], medians[2]),
    )
}

fn coverage_floor() -> Outcome {
    let (d, k, n, reps) = (64, 3, 4000, 50u64);
    let mut coverage = Vec::new();
    for rep in 0..reps {
        let seed = derive_seed(606, &[rep]);
        let x = gen_gaussian_design(n, d, derive_seed(seed, &[1])).map_err(fail)?;
        let theta = gen_low_rank_theta(d, k, derive_seed(seed, &[0])).map_err(fail)?;
        let y = simulate_observations(&x, &theta, 1.0, derive_seed(seed, &[2])).map_err(fail)?;
        let (_, state) = run_iht(&x, &y, &IhtConfig::default()).map_err(fail)?;
        let report = infer(&state, &x, &y, 0.95, QuantileMode::OneSided, Some(&theta)).map_err(fail)?;
        coverage.push(report.coverage.ok_or("coverage missing")?);
    }
    let mean = coverage.iter().sum::<f64>() / coverage.len() as f64;
    let min = coverage.iter().copied().fold(f64::INFINITY, f64::min);
    check(mean >= 0.85, format!("mean coverage {mean:.4} (lowest replicate {min:.4})"))
}

fn quantum_enumeration() -> Outcome {
    let m = 2;
    let d = 1 << m;
    let (mut sum_err, mut parity_err, mut marg_err) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..20u64 {
        let theta = gen_density_matrix(d, 1 + (t % 4) as usize, derive_seed(77, &[t])).map_err(fail)?;
        for a in 1..=3u8 {
            for b in 1..=3u8 {
                let setting = PauliSetting::new(vec![a, b]).map_err(fail)?;
                let p = outcome_distribution(&setting, &theta).map_err(fail)?;
                sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
                let expected: f64 = (0..d)
                    .map(|i| p[i] * f64::from(parity(&outcome_from_index(i, m))))
                    .sum();
                let trace = setting.pauli_string().inner(&theta).map_err(fail)?;
                parity_err = parity_err.max((expected - trace).abs());
                for mask in 0..1u32 << m {
                    let mut pushed = vec![0.0; d];
                    let mut marg_setting = None;
                    for (i, pi) in p.iter().enumerate() {
                        let (s, o) = marginalize(&setting, &outcome_from_index(i, m), mask);
                        pushed[outcome_index(&o)] += pi;
                        marg_setting = Some(s);
                    }
                    let direct = outcome_distribution(&marg_setting.expect("outcomes"), &theta).map_err(fail)?;
                    let e = pushed.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    marg_err = marg_err.max(e);
                }
            }
        }
    }
    check(
        sum_err <= 1e-10 && parity_err <= 1e-10 && marg_err <= 1e-10,
        format!("probability sum {sum_err:.1e}, parity {parity_err:.1e}, marginals {marg_err:.1e}"),
    )
}

fn quantum_trend() -> Outcome {
    let mut config = ExperimentConfig::new(Mode::Quantum);
    config.seed = 808;
    config.replicates = 20;
    config.quantum = QuantumGrid {
        m: vec![4],
        k: vec![1],
        alpha: vec![2, 5],
        t_factor: vec![10],
    };
    config.inference.enabled = false;
    let out = experiments::run_experiment(&config).map_err(fail)?;
    let mean_frob = |alpha: usize| {
        let v: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.grid[2] == alpha)
            .map(|r| r.metrics.frobenius_sq)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let sane = out.rows.iter().all(|r| {
        let m = r.metrics;
        [m.frobenius_sq, m.operator, m.entrywise_inf, m.schatten1]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0)
    });
    let (e2, e5) = (mean_frob(2), mean_frob(5));
    check(
        e5 < e2 && sane && out.rows.len() == 40,
        format!("mean squared Frobenius error alpha=2 {e2:.4}, alpha=5 {e5:.4}, metrics finite {sane}"),
    )
}

fn rip_scaling() -> Outcome {
    let (d, k, trials) = (16, 1, 200);
    let ns = [1000usize, 4000, 16000];
    let mut pts = Vec::new();
    for (i, &n) in ns.iter().enumerate() {
        let x = gen_gaussian_design(n, d, derive_seed(909, &[i as u64])).map_err(fail)?;
        let rip = estimate_rip_constant(&x, k, trials, derive_seed(909, &[i as u64, 1])).map_err(fail)?;
        pts.push(((n as f64).ln(), rip.max_deviation.ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let devs: Vec<String> = pts.iter().map(|p| format!("{:.4}", p.1.exp())).collect();
    check(
        (-0.65..=-0.35).contains(&slope),
        format!("max deviations {}, log-log slope {slope:.3}", devs.join("/")),
    )
}

/// Largest row sum over every `k`-subset, each subset summed in descending
/// order so the result is comparable bit for bit.
fn brute_force_r_k(m: &DMatrix<f64>, k: usize) -> f64 {
    let p = m.ncols();
    let mut best = 0.0f64;
    for i in 0..p {
        for subset in 0u32..1 << p {
            if subset.count_ones() as usize != k {
                continue;
            }
            let mut vals: Vec<f64> = (0..p).filter(|j| subset >> j & 1 == 1).map(|j| m[(i, j)].abs()).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            best = best.max(vals.iter().sum());
        }
    }
    best
}

fn sparse_oracles() -> Outcome {
    let p = 6;
    let mut mismatches = 0;
    let mut r = rng::stream(1010);
    for _ in 0..50 {
        let v = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal) / 3.0);
        let x = DMatrix::from_fn(20, p, |_, _| r.sample::<f64, _>(StandardNormal));
        let gram = x.tr_mul(&x) / 20.0;
        let m = &v * &gram - DMatrix::<f64>::identity(p, p);
        for k in 1..=3 {
            if estimate_r_k(&v, &gram, k).map_err(fail)? != brute_force_r_k(&m, k) {
                mismatches += 1;
            }
        }
    }

    let exact = gen_orthogonal_instance(100, 40, 4, 0.0, 1011).map_err(fail)?;
    let dec = build_decorrelator(Execution::default(), &exact, DecorrelatorStrategy::Identity, &[2]).map_err(fail)?;
    let (theta_hat, _) = sparse_iht_run(&exact, &dec, &SparseConfig::default()).map_err(fail)?;
    let truth = exact.theta.as_ref().ok_or("truth missing")?;
    let recovery = (&theta_hat - truth).amax();

    let mut identity_err = 0.0f64;
    let mut coverage = Vec::new();
    for s in 0..50u64 {
        let inst = gen_sparse_instance(600, 200, 5, 1.0, derive_seed(1012, &[s])).map_err(fail)?;
        let dec = build_decorrelator(Execution::default(), &inst, DecorrelatorStrategy::Identity, &[2]).map_err(fail)?;
        let (theta_hat, _) = sparse_iht_run(&inst, &dec, &SparseConfig::default()).map_err(fail)?;
        let truth = inst.theta.as_ref().ok_or("truth missing")?;
        let debiased = desparsify(&theta_hat, &inst, &dec.v).map_err(fail)?;
        let (delta, z) = sparse_delta_z(&theta_hat, &inst, &dec.v).map_err(fail)?;
        let lhs = (&debiased - truth) * (inst.n() as f64).sqrt();
        identity_err = identity_err.max((lhs - delta - z).amax());
        let sigma = sparse_sigma(&inst, &theta_hat).map_err(fail)?;
        let ci = sparse_confidence_intervals(&debiased, &inst, &dec.v, sigma, 0.95).map_err(fail)?;
        coverage.push(ci.coverage(truth).map_err(fail)?);
    }
    let mean_cov = coverage.iter().sum::<f64>() / coverage.len() as f64;
    check(
        mismatches == 0 && recovery <= 1e-10 && identity_err <= 1e-10 && mean_cov >= 0.85,
        format!(
            "r_k mismatches {mismatches}/150, orthogonal recovery error {recovery:.1e}, \
             decomposition error {identity_err:.1e}, mean coverage {mean_cov:.4}"
        ),
    )
}

fn report(id: usize, name: &str, limit: Duration, started: Instant, outcome: Outcome) -> bool {
    let elapsed = started.elapsed();
    let in_time = elapsed <= limit;
    let (ok, detail) = match outcome {
        Ok(d) => (in_time, d),
        Err(d) => (false, d),
    };
    println!(
        "criterion {id:>2} {}: {name}: {detail} [{:.1}s, limit {}s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;

    let t = Instant::now();
    all &= report(1, "exact recovery", secs(5), t, exact_recovery());

    let t = Instant::now();
    let runs = rate_runs();
    let rate_time = t.elapsed();
    let (c2, c3) = match &runs {
        Ok(r) => (rate_scaling(r), stopping_bound(r)),
        Err(e) => (Err(e.clone()), Err(e.clone())),
    };
    all &= report(2, "rate scaling", secs(600), t, c2);
    let t3 = Instant::now() - rate_time;
    all &= report(3, "stopping-rule bound", secs(600), t3, c3);

    let t = Instant::now();
    all &= report(4, "debias identity", secs(30), t, debias_identity());
    let t = Instant::now();
    all &= report(5, "bias shrinkage", secs(300), t, bias_shrinkage());
    let t = Instant::now();
    all &= report(6, "coverage floor", secs(900), t, coverage_floor());
    let t = Instant::now();
    all &= report(7, "tomography enumeration", secs(10), t, quantum_enumeration());
    let t = Instant::now();
    all &= report(8, "tomography recovery trend", secs(600), t, quantum_trend());
    let t = Instant::now();
    all &= report(9, "restricted isometry scaling", secs(300), t, rip_scaling());
    let t = Instant::now();
    all &= report(10, "sparse oracles", secs(300), t, sparse_oracles());

    if !all {
        std::process::exit(1);
    }
}
