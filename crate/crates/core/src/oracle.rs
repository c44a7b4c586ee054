//! Closed-form posterior for frozen hyperparameters, and chain diagnostics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditionals::{channel_set_conditional, factor_with_jitter, HyperState, Scales};
use crate::error::{Error, Result};
use crate::kernel::StableSplineKernel;
use crate::regression::{CoefficientVector, Dataset, Problem, RegressorBank};
use crate::sampler::{ChainRecord, Sampler, SamplerConfig, Variant};

/// Largest `m * p` the dense oracle accepts.
pub const ORACLE_MAX_DIM: usize = 2000;

/// Shortest trace [`iact`] accepts.
pub const MIN_TRACE_LEN: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticPosterior {
    pub mean: CoefficientVector,
    pub covariance: DMatrix<f64>,
}

fn channel_indices(channels: &[usize], p: usize) -> Vec<usize> {
    channels.iter().flat_map(|&c| c * p..(c + 1) * p).collect()
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

impl AnalyticPosterior {
    /// Conditional of the listed channels given the remaining ones fixed at
    /// `theta`, by Schur complement of the joint covariance.
    pub fn conditional(&self, channels: &[usize], theta: &CoefficientVector) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.mean.m();
        let p = self.mean.p();
        if channels.iter().any(|&c| c >= m) {
            return Err(Error::Domain(format!("channel out of range (m = {m})")));
        }
        let rest: Vec<usize> = (0..m).filter(|k| !channels.contains(k)).collect();
        let s = channel_indices(channels, p);
        let r = channel_indices(&rest, p);
        let mu = self.mean.as_slice();
        let mut mean = DVector::from_iterator(s.len(), s.iter().map(|&i| mu[i]));
        let mut cov = select(&self.covariance, &s, &s);
        if !r.is_empty() {
            let srr = select(&self.covariance, &r, &r);
            let ssr = select(&self.covariance, &s, &r);
            let chol = srr
                .cholesky()
                .ok_or_else(|| Error::Factorization("oracle covariance block is not positive definite".into()))?;
            let dev = DVector::from_iterator(r.len(), r.iter().map(|&i| theta.as_slice()[i] - mu[i]));
            mean += &ssr * chol.solve(&dev);
            cov -= &ssr * chol.solve(&ssr.transpose());
        }
        Ok((mean, cov))
    }
}

fn prior_precision(hyper: &HyperState, kernel: &StableSplineKernel, m: usize) -> DMatrix<f64> {
    let p = kernel.p();
    let mut q = DMatrix::zeros(m * p, m * p);
    for k in 0..m {
        q.view_mut((k * p, k * p), (p, p)).copy_from(&(kernel.inverse() / hyper.lambda(k)));
    }
    q
}

/// Joint Gaussian posterior of theta given fixed scale factors and noise variance.
pub fn analytic_posterior(
    problem: &Problem,
    hyper: &HyperState,
    kernel: &StableSplineKernel,
) -> Result<AnalyticPosterior> {
    let m = problem.m();
    let p = problem.p();
    if m * p > ORACLE_MAX_DIM {
        return Err(Error::SizeGuard(format!(
            "analytic posterior needs m*p <= {ORACLE_MAX_DIM}, got {}",
            m * p
        )));
    }
    if kernel.p() != p {
        return Err(Error::Dimension { expected: p, got: kernel.p() });
    }
    hyper.validate(m)?;
    let g = problem.bank().to_dense(problem.n().saturating_mul(ORACLE_MAX_DIM))?;
    let y = DVector::from_column_slice(problem.data().y());
    let inv_s2 = 1.0 / hyper.sigma2;
    let precision = prior_precision(hyper, kernel, m) + g.tr_mul(&g) * inv_s2;
    let precision = (&precision + precision.transpose()) * 0.5;
    let l = factor_with_jitter(precision, "analytic posterior precision")?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let covariance = chol.inverse();
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    let mean = chol.solve(&(g.tr_mul(&y) * inv_s2));
    Ok(AnalyticPosterior { mean: CoefficientVector::from_flat(m, p, mean.as_slice().to_vec())?, covariance })
}

/// Gradient of `|Y - G theta|^2 / sigma2 + theta' blockdiag(K^-1 / lambda) theta`.
pub fn objective_gradient(
    problem: &Problem,
    hyper: &HyperState,
    kernel: &StableSplineKernel,
    theta: &CoefficientVector,
) -> Result<DVector<f64>> {
    let m = problem.m();
    let p = problem.p();
    hyper.validate(m)?;
    let products = problem.products();
    let mut grad = vec![0.0; m * p];
    for i in 0..m {
        let out = &mut grad[i * p..(i + 1) * p];
        for (o, g) in out.iter_mut().zip(products.gty(i).iter()) {
            *o = -2.0 * g / hyper.sigma2;
        }
        for j in 0..m {
            products.gram_mul_add(i, j, theta.block(j), 2.0 / hyper.sigma2, out);
        }
        let prior = kernel.inverse() * DVector::from_column_slice(theta.block(i));
        for (o, v) in out.iter_mut().zip(prior.iter()) {
            *o += 2.0 * v / hyper.lambda(i);
        }
    }
    Ok(DVector::from_vec(grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IactEstimate {
    pub iact: f64,
    pub ess: f64,
    pub length: usize,
    /// Constant trace; `iact` is set to the trace length.
    pub degenerate: bool,
}

/// Integrated autocorrelation time by Geyer's initial monotone positive
/// sequence, truncated below at 1.
pub fn iact(trace: &[f64]) -> Result<IactEstimate> {
    let n = trace.len();
    if n < MIN_TRACE_LEN {
        return Err(Error::Domain(format!("IACT needs at least {MIN_TRACE_LEN} samples, got {n}")));
    }
    let mean = trace.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = trace.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
    };
    let gamma0 = autocov(0);
    if !(gamma0 > (1e-14 * mean.abs()).powi(2)) {
        return Ok(IactEstimate { iact: n as f64, ess: 1.0, length: n, degenerate: true });
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = autocov(2 * k) + autocov(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    let tau = (2.0 * sum / gamma0 - 1.0).max(1.0);
    Ok(IactEstimate { iact: tau, ess: n as f64 / tau, length: n, degenerate: false })
}

fn norm(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum::<f64>().sqrt()
}

/// `|est_k - truth_k| / |truth_k|` for each channel.
pub fn fit_metric(estimate: &CoefficientVector, truth: &CoefficientVector) -> Result<Vec<f64>> {
    if estimate.m() != truth.m() || estimate.p() != truth.p() {
        return Err(Error::Dimension { expected: truth.m() * truth.p(), got: estimate.m() * estimate.p() });
    }
    (0..truth.m())
        .map(|k| {
            let t = norm(truth.block(k).iter().copied());
            if t == 0.0 {
                return Err(Error::Domain(format!("true response {} has zero norm", k + 1)));
            }
            Ok(norm(estimate.block(k).iter().zip(truth.block(k)).map(|(a, b)| a - b)) / t)
        })
        .collect()
}

/// Relative error of the summed responses `i + j`.
pub fn summed_pair_error(estimate: &CoefficientVector, truth: &CoefficientVector, i: usize, j: usize) -> Result<f64> {
    if estimate.m() != truth.m() || estimate.p() != truth.p() {
        return Err(Error::Dimension { expected: truth.m() * truth.p(), got: estimate.m() * estimate.p() });
    }
    if i >= truth.m() || j >= truth.m() {
        return Err(Error::Domain(format!("pair ({i},{j}) out of range")));
    }
    let sum_t: Vec<f64> = truth.block(i).iter().zip(truth.block(j)).map(|(a, b)| a + b).collect();
    let t = norm(sum_t.iter().copied());
    if t == 0.0 {
        return Err(Error::Domain("summed true response has zero norm".into()));
    }
    let e = norm(estimate.block(i).iter().zip(estimate.block(j)).zip(&sum_t).map(|((a, b), s)| a + b - s));
    Ok(e / t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDiagnostic {
    pub name: String,
    pub iact: f64,
    pub ess: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub variant: Variant,
    pub retained: usize,
    /// Scale factor and noise variance traces after burn-in.
    pub traces: Vec<TraceDiagnostic>,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
    /// Per-coefficient IACT of the stored theta draws, when enough are retained.
    pub theta_iact: Option<Vec<f64>>,
    /// Per-channel relative error against the true responses.
    pub fit: Option<Vec<f64>>,
}

impl DiagnosticsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn trace(&self, name: &str) -> Option<&TraceDiagnostic> {
        self.traces.iter().find(|t| t.name == name)
    }
}

fn trace_diag(name: String, series: &[f64]) -> Option<TraceDiagnostic> {
    iact(series).ok().map(|e| TraceDiagnostic { name, iact: e.iact, ess: e.ess, degenerate: e.degenerate })
}

/// Diagnostics over the post-burn-in part of a chain.
pub fn diagnose(record: &ChainRecord, truth: Option<&CoefficientVector>) -> Result<DiagnosticsReport> {
    let burn = record.burn_in.min(record.completed());
    let mut traces = Vec::new();
    let width = record.lambda_trace.first().map_or(0, Vec::len);
    for k in 0..width {
        let name = if width == 1 { "lambda".to_string() } else { format!("lambda_{}", k + 1) };
        traces.extend(trace_diag(name, &record.lambda_series(k)[burn..]));
    }
    traces.extend(trace_diag("sigma2".into(), &record.sigma2_trace[burn..]));

    let w = record.m * record.p;
    let rows: Vec<usize> = record.retained_rows().collect();
    if rows.is_empty() {
        return Err(Error::Domain("no theta draws retained after burn-in".into()));
    }
    let mut mean = vec![0.0; w];
    let mut sd = vec![0.0; w];
    let mut theta_iact = (rows.len() >= MIN_TRACE_LEN).then(|| Vec::with_capacity(w));
    let mut column = Vec::with_capacity(rows.len());
    for c in 0..w {
        column.clear();
        column.extend(rows.iter().map(|&r| record.theta_samples[r * w + c]));
        let mu = column.iter().sum::<f64>() / column.len() as f64;
        mean[c] = mu;
        if column.len() > 1 {
            sd[c] = (column.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (column.len() - 1) as f64).sqrt();
        }
        if let Some(v) = theta_iact.as_mut() {
            v.push(iact(&column)?.iact);
        }
    }
    let fit = match truth {
        Some(t) => Some(fit_metric(&CoefficientVector::from_flat(record.m, record.p, mean.clone())?, t)?),
        None => None,
    };
    Ok(DiagnosticsReport {
        variant: record.variant,
        retained: rows.len(),
        traces,
        posterior_mean: mean,
        posterior_sd: sd,
        theta_iact,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceCheck {
    pub name: String,
    /// Relative discrepancy for exact checks, largest |z| for chain checks.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct EquivalenceSettings {
    pub lambda: f64,
    pub sigma2: f64,
    pub alpha: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub beta: f64,
    pub seed: u64,
    pub flip_conditional_mean: bool,
}

impl Default for EquivalenceSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sigma2: 0.1,
            alpha: 0.8,
            sweeps: 10_000,
            burn_in: 200,
            beta: 10.0,
            seed: 2024,
            flip_conditional_mean: false,
        }
    }
}

/// White-input instance with decaying, sign-alternating responses and
/// unit-scale noise of standard deviation 0.3.
pub fn small_instance(m: usize, p: usize, n: usize, seed: u64) -> Result<Problem> {
    if m == 0 || p == 0 || n == 0 {
        return Err(Error::Domain("instance needs m, p, n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let blocks: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            (0..p).map(|a| sign * 0.7f64.powi(a as i32) / (1.0 + k as f64)).collect()
        })
        .collect();
    let bank = RegressorBank::new(Dataset::new(vec![0.0; n], inputs.clone())?, p)?;
    let clean = bank.predict(&CoefficientVector::from_blocks(&blocks)?)?;
    let y = clean.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    Problem::new(Dataset::new(y, inputs)?, p)
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a.iter().zip(b).map(|(x, y)| x - y));
    d / norm(b.iter().copied()).max(f64::MIN_POSITIVE)
}

/// Compare every single and pair conditional against Schur complements of
/// the analytic posterior, then run each variant with frozen hyperparameters
/// and z-score its sample mean against the analytic mean.
pub fn equivalence_suite(problem: &Problem, settings: &EquivalenceSettings) -> Result<Vec<EquivalenceCheck>> {
    let m = problem.m();
    let p = problem.p();
    let kernel = StableSplineKernel::new(settings.alpha, p)?;
    let common = HyperState::common(settings.lambda, settings.sigma2);
    let oracle = analytic_posterior(problem, &common, &kernel)?;
    let mut checks = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let point: Vec<f64> = oracle
        .mean
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, mu)| mu + oracle.covariance[(i, i)].sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let point = CoefficientVector::from_flat(m, p, point)?;
    let mut sets: Vec<Vec<usize>> = (0..m).map(|k| vec![k]).collect();
    sets.extend((0..m).flat_map(|i| (i + 1..m).map(move |j| vec![i, j])));
    for set in sets {
        let mut post = channel_set_conditional(&set, &point, &common, problem.products(), &kernel)?;
        if settings.flip_conditional_mean {
            post.negate_mean();
        }
        let (mean, cov) = oracle.conditional(&set, &point)?;
        let label = set.iter().map(|c| (c + 1).to_string()).collect::<Vec<_>>().join(",");
        let value = rel_diff(post.mean().as_slice(), mean.as_slice()).max(rel_diff(post.covariance().as_slice(), cov.as_slice()));
        checks.push(EquivalenceCheck {
            name: format!("conditional theta[{label}]"),
            value,
            threshold: 1e-8,
            passed: value <= 1e-8,
        });
    }

    for variant in [Variant::Gs, Variant::GsD, Variant::Gsob, Variant::GsobD] {
        if variant.uses_blocks() && m < 2 {
            continue;
        }
        let mut config = SamplerConfig::new(variant, settings.sweeps + settings.burn_in, settings.alpha, p, settings.seed);
        config.burn_in = Some(settings.burn_in);
        config.beta = Some(settings.beta);
        config.flip_conditional_mean = settings.flip_conditional_mean;
        config.fixed_hyper = Some(if variant.common_scale() {
            common.clone()
        } else {
            HyperState { scales: Scales::PerResponse(vec![settings.lambda; m]), sigma2: settings.sigma2 }
        });
        let out = Sampler::new(problem, config)?.run().map_err(|abort| abort.error)?;
        let rows: Vec<usize> = out.record.retained_rows().collect();
        let mut worst: f64 = 0.0;
        for c in 0..m * p {
            let series: Vec<f64> = rows.iter().map(|&r| out.record.stored_theta(r)[c]).collect();
            let est = iact(&series)?;
            let mu = series.iter().sum::<f64>() / series.len() as f64;
            let var = series.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (series.len() - 1) as f64;
            let mcse = (var * est.iact / series.len() as f64).sqrt();
            worst = worst.max((mu - oracle.mean.as_slice()[c]).abs() / mcse);
        }
        checks.push(EquivalenceCheck {
            name: format!("{variant} chain mean"),
            value: worst,
            threshold: 3.0,
            passed: worst < 3.0,
        });
    }
    Ok(checks)
}
