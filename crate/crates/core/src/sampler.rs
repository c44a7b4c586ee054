//! Gibbs sampling with and without overlapping blocks.
//!
//! One iteration updates, in order: the scale factor(s), the noise
//! variance, every `theta_k` from its single-channel conditional, and then
//! (block variants only) `n_ob` randomly selected pairs `(theta_i, theta_j)`
//! from their joint conditional. The recorded `theta` for an iteration is the
//! state after the block updates.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::blocks::BlockSchedule;
use crate::conditionals::{
    draw_gaussian, sample_lambda_common, sample_lambda_k, sample_sigma2_from_rss, theta_block_conditional,
    theta_k_conditional, CommonShape, HyperState, Scales,
};
use crate::error::{Error, Result};
use crate::kernel::StableSplineKernel;
use crate::regression::{CoefficientVector, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain Gibbs, common scale factor.
    #[serde(rename = "GS")]
    Gs,
    /// Plain Gibbs, one scale factor per response.
    #[serde(rename = "GSd")]
    GsD,
    /// Overlapping blocks, common scale factor.
    #[serde(rename = "GSOB")]
    Gsob,
    /// Overlapping blocks, one scale factor per response.
    #[serde(rename = "GSOBd")]
    GsobD,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Gsob, Variant::GsobD, Variant::Gs, Variant::GsD];

    pub fn uses_blocks(self) -> bool {
        matches!(self, Variant::Gsob | Variant::GsobD)
    }

    pub fn common_scale(self) -> bool {
        matches!(self, Variant::Gs | Variant::Gsob)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gs => "GS",
            Variant::GsD => "GSd",
            Variant::Gsob => "GSOB",
            Variant::GsobD => "GSOBd",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Domain(format!("unknown variant `{s}` (expected GS, GSd, GSOB or GSOBd)")))
    }
}

fn default_thinning() -> usize {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub variant: Variant,
    pub n_mc: usize,
    /// Block updates per iteration; ignored by GS and GSd.
    pub n_ob: usize,
    /// Defaults to `n_mc / 2`.
    #[serde(default)]
    pub burn_in: Option<usize>,
    pub alpha: f64,
    /// Block selection rate; required by GSOB and GSOBd.
    #[serde(default)]
    pub beta: Option<f64>,
    pub p: usize,
    pub seed: u64,
    /// Use `n p / 2` instead of `m p / 2` as the common-scale shape.
    #[serde(default)]
    pub data_count_shape: bool,
    /// Store every `thinning`-th theta draw (summary means use all draws).
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    /// Freeze the scale factors and noise variance at these values.
    #[serde(default)]
    pub fixed_hyper: Option<HyperState>,
    /// Mutation hook for oracle self-tests: negates every conditional mean.
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub flip_conditional_mean: bool,
}

impl SamplerConfig {
    pub fn new(variant: Variant, n_mc: usize, alpha: f64, p: usize, seed: u64) -> Self {
        Self {
            variant,
            n_mc,
            n_ob: 1,
            burn_in: None,
            alpha,
            beta: None,
            p,
            seed,
            data_count_shape: false,
            thinning: 1,
            fixed_hyper: None,
            flip_conditional_mean: false,
        }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.n_mc / 2)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::Domain("n_mc must be positive".into()));
        }
        if self.burn_in() >= self.n_mc {
            return Err(Error::Domain(format!("burn-in {} must be below n_mc {}", self.burn_in(), self.n_mc)));
        }
        if self.thinning == 0 {
            return Err(Error::Domain("thinning must be positive".into()));
        }
        if self.variant.uses_blocks() {
            if self.n_ob == 0 {
                return Err(Error::Domain(format!("{} needs n_ob >= 1", self.variant)));
            }
            if self.beta.is_none() {
                return Err(Error::Domain(format!("{} needs a block rate beta", self.variant)));
            }
            if m < 2 {
                return Err(Error::Domain(format!("{} needs at least two input channels", self.variant)));
            }
        }
        if let Some(h) = &self.fixed_hyper {
            h.validate(m)?;
            if matches!(h.scales, Scales::PerResponse(_)) == self.variant.common_scale() {
                return Err(Error::Domain(format!("fixed scale factors do not match variant {}", self.variant)));
            }
        }
        Ok(())
    }
}

/// `splitmix64(master + replicate)`.
pub fn replicate_seed(master: u64, replicate: u64) -> u64 {
    let mut z = master.wrapping_add(replicate).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta: CoefficientVector,
    pub hyper: HyperState,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub variant: Variant,
    pub m: usize,
    pub p: usize,
    pub n_mc: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// One entry per completed iteration: `[lambda]` or `[lambda_1, .., lambda_m]`.
    pub lambda_trace: Vec<Vec<f64>>,
    pub sigma2_trace: Vec<f64>,
    /// 1-based iteration numbers of the stored theta draws.
    pub theta_iterations: Vec<usize>,
    /// Stored theta draws, row-major, `m * p` values per row.
    pub theta_samples: Vec<f64>,
    /// `(iteration, i, j)`, 0-based channels.
    pub selected_blocks: Vec<(usize, usize, usize)>,
}

impl ChainRecord {
    fn new(config: &SamplerConfig, m: usize) -> Self {
        Self {
            variant: config.variant,
            m,
            p: config.p,
            n_mc: config.n_mc,
            burn_in: config.burn_in(),
            thinning: config.thinning,
            lambda_trace: Vec::with_capacity(config.n_mc),
            sigma2_trace: Vec::with_capacity(config.n_mc),
            theta_iterations: Vec::new(),
            theta_samples: Vec::new(),
            selected_blocks: Vec::new(),
        }
    }

    pub fn completed(&self) -> usize {
        self.sigma2_trace.len()
    }

    pub fn stored_theta(&self, row: usize) -> &[f64] {
        let w = self.m * self.p;
        &self.theta_samples[row * w..(row + 1) * w]
    }

    /// Trace of one stored theta coefficient.
    pub fn coefficient_trace(&self, k: usize, lag: usize) -> Vec<f64> {
        let w = self.m * self.p;
        let idx = k * self.p + lag;
        self.theta_samples.iter().skip(idx).step_by(w).copied().collect()
    }

    /// Trace of scale factor `k` (0 for the common factor).
    pub fn lambda_series(&self, k: usize) -> Vec<f64> {
        self.lambda_trace.iter().map(|l| l[k]).collect()
    }

    /// Stored rows with iteration above the burn-in.
    pub fn retained_rows(&self) -> impl Iterator<Item = usize> + '_ {
        let burn = self.burn_in;
        self.theta_iterations.iter().enumerate().filter(move |(_, &t)| t > burn).map(|(r, _)| r)
    }
}

/// Per-coefficient posterior summary over iterations `burn_in + 1 ..= n_mc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub retained: usize,
    pub mean: CoefficientVector,
    pub sd: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

/// Linear-interpolation empirical quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug)]
struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(w: usize) -> Self {
        Self { count: 0, mean: vec![0.0; w], m2: vec![0.0; w] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((mu, m2), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *mu;
            *mu += d / n;
            *m2 += d * (v - *mu);
        }
    }
}

#[derive(Debug)]
pub struct ChainOutput {
    pub record: ChainRecord,
    pub summary: PosteriorSummary,
    pub final_state: ChainState,
}

/// A run that stopped early; `partial` holds every completed iteration.
#[derive(Debug, ThisError)]
#[error("chain aborted after {} iterations: {error}", partial.completed())]
pub struct ChainAbort {
    pub partial: ChainRecord,
    #[source]
    pub error: Error,
}

/// A configured sampler bound to one problem.
pub struct Sampler<'a> {
    problem: &'a Problem,
    config: SamplerConfig,
    kernel: StableSplineKernel,
    schedule: Option<BlockSchedule>,
    shape: CommonShape,
}

impl<'a> Sampler<'a> {
    pub fn new(problem: &'a Problem, config: SamplerConfig) -> Result<Self> {
        Self::build(problem, config, None)
    }

    /// Like [`Sampler::new`] but reuses a precomputed block schedule.
    pub fn with_schedule(problem: &'a Problem, config: SamplerConfig, schedule: BlockSchedule) -> Result<Self> {
        if schedule.m() != problem.m() {
            return Err(Error::Dimension { expected: problem.m(), got: schedule.m() });
        }
        Self::build(problem, config, Some(schedule))
    }

    fn build(problem: &'a Problem, config: SamplerConfig, schedule: Option<BlockSchedule>) -> Result<Self> {
        config.validate(problem.m())?;
        if config.p != problem.p() {
            return Err(Error::Dimension { expected: problem.p(), got: config.p });
        }
        let kernel = StableSplineKernel::new(config.alpha, config.p)?;
        let schedule = match (config.variant.uses_blocks(), config.beta, schedule) {
            (false, _, _) => None,
            (true, _, Some(s)) => Some(s),
            (true, Some(beta), None) => Some(BlockSchedule::from_data(problem.data(), beta)?),
            (true, None, None) => unreachable!("validated: block variants carry beta"),
        };
        let shape = if config.data_count_shape {
            CommonShape::DataCount { n: problem.n() }
        } else {
            CommonShape::Conjugate
        };
        Ok(Self { problem, config, kernel, schedule, shape })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn kernel(&self) -> &StableSplineKernel {
        &self.kernel
    }

    pub fn schedule(&self) -> Option<&BlockSchedule> {
        self.schedule.as_ref()
    }

    /// `sigma2 = var(Y)`, unit scale factors, and theta from one sequential
    /// pass of conditional means starting at zero.
    pub fn init(&self) -> Result<ChainState> {
        let m = self.problem.m();
        let p = self.problem.p();
        let sigma2 = self.problem.data().output_variance();
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Domain(format!("output sample variance is {sigma2}; cannot initialize")));
        }
        let start = HyperState::common(1.0, sigma2);
        let mut theta = CoefficientVector::zeros(m, p);
        for k in 0..m {
            let post = theta_k_conditional(k, &theta, &start, self.problem.products(), &self.kernel)?;
            theta.block_mut(k).copy_from_slice(post.mean().as_slice());
        }
        let hyper = match &self.config.fixed_hyper {
            Some(h) => h.clone(),
            None if self.config.variant.common_scale() => HyperState::common(1.0, sigma2),
            None => HyperState::per_response(vec![1.0; m], sigma2),
        };
        Ok(ChainState { theta, hyper, iteration: 0 })
    }

    /// One full iteration. Returns the pairs updated by block moves.
    pub fn sweep(&self, state: &mut ChainState, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
        let t = state.iteration + 1;
        self.sweep_inner(state, rng).map_err(|e| Error::AtIteration { iteration: t, source: Box::new(e) })
    }

    fn sweep_inner(&self, state: &mut ChainState, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
        let products = self.problem.products();
        let m = self.problem.m();
        let p = self.problem.p();

        if self.config.fixed_hyper.is_none() {
            state.hyper.scales = match &state.hyper.scales {
                Scales::Common(_) => Scales::Common(sample_lambda_common(&state.theta, &self.kernel, self.shape, rng)?),
                Scales::PerResponse(_) => Scales::PerResponse(
                    (0..m)
                        .map(|k| sample_lambda_k(state.theta.block(k), &self.kernel, rng))
                        .collect::<Result<_>>()?,
                ),
            };
            let rss = products.residual_sum_of_squares(&state.theta);
            state.hyper.sigma2 = sample_sigma2_from_rss(rss, self.problem.n(), rng)?;
        }

        for k in 0..m {
            let mut post = theta_k_conditional(k, &state.theta, &state.hyper, products, &self.kernel)?;
            if self.config.flip_conditional_mean {
                post.negate_mean();
            }
            let draw = draw_gaussian(&post, rng);
            state.theta.block_mut(k).copy_from_slice(draw.as_slice());
        }

        let mut selected = Vec::new();
        if let (true, Some(schedule)) = (self.config.variant.uses_blocks(), &self.schedule) {
            for _ in 0..self.config.n_ob {
                let (i, j) = schedule.select(rng);
                let mut post = theta_block_conditional(i, j, &state.theta, &state.hyper, products, &self.kernel)?;
                if self.config.flip_conditional_mean {
                    post.negate_mean();
                }
                let draw = draw_gaussian(&post, rng);
                state.theta.block_mut(i).copy_from_slice(&draw.as_slice()[..p]);
                state.theta.block_mut(j).copy_from_slice(&draw.as_slice()[p..]);
                selected.push((i, j));
            }
        }

        state.iteration += 1;
        Ok(selected)
    }

    /// Initialize and run `n_mc` iterations.
    pub fn run(&self) -> std::result::Result<ChainOutput, Box<ChainAbort>> {
        match self.init() {
            Ok(state) => self.run_from(state),
            Err(error) => Err(Box::new(ChainAbort { partial: ChainRecord::new(&self.config, self.problem.m()), error })),
        }
    }

    /// Run `n_mc` iterations from the given state with the configured seed.
    pub fn run_from(&self, mut state: ChainState) -> std::result::Result<ChainOutput, Box<ChainAbort>> {
        let m = self.problem.m();
        let w = m * self.problem.p();
        let burn = self.config.burn_in();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut record = ChainRecord::new(&self.config, m);
        let mut moments = Moments::new(w);

        for t in 1..=self.config.n_mc {
            match self.sweep(&mut state, &mut rng) {
                Ok(selected) => {
                    record.lambda_trace.push(state.hyper.lambdas());
                    record.sigma2_trace.push(state.hyper.sigma2);
                    record.selected_blocks.extend(selected.into_iter().map(|(i, j)| (t, i, j)));
                    if t % self.config.thinning == 0 {
                        record.theta_iterations.push(t);
                        record.theta_samples.extend_from_slice(state.theta.as_slice());
                    }
                    if t > burn {
                        moments.push(state.theta.as_slice());
                    }
                }
                Err(error) => return Err(Box::new(ChainAbort { partial: record, error })),
            }
        }

        let summary = summarize(&record, moments, self.problem.p());
        Ok(ChainOutput { record, summary, final_state: state })
    }
}

fn summarize(record: &ChainRecord, moments: Moments, p: usize) -> PosteriorSummary {
    let w = moments.mean.len();
    let retained = moments.count;
    let sd = moments
        .m2
        .iter()
        .map(|m2| if retained > 1 { (m2 / (retained - 1) as f64).sqrt() } else { 0.0 })
        .collect();
    let rows: Vec<usize> = record.retained_rows().collect();
    let mut q025 = vec![f64::NAN; w];
    let mut q975 = vec![f64::NAN; w];
    let mut column = Vec::with_capacity(rows.len());
    for c in 0..w {
        column.clear();
        column.extend(rows.iter().map(|&r| record.theta_samples[r * w + c]));
        column.sort_by(f64::total_cmp);
        q025[c] = quantile_sorted(&column, 0.025);
        q975[c] = quantile_sorted(&column, 0.975);
    }
    PosteriorSummary {
        retained,
        mean: CoefficientVector::from_flat(record.m, p, moments.mean).expect("width is m * p"),
        sd,
        q025,
        q975,
    }
}

/// Build a sampler from the problem's data and run it.
pub fn run(problem: &Problem, config: &SamplerConfig) -> std::result::Result<ChainOutput, Box<ChainAbort>> {
    let sampler = Sampler::new(problem, config.clone())
        .map_err(|error| Box::new(ChainAbort { partial: ChainRecord::new(config, problem.m()), error }))?;
    sampler.run()
}
