//! Synthetic MISO systems, collinear inputs and noisy outputs.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::compute_correlations;
use crate::error::{Error, Result};
use crate::regression::Dataset;

/// Maximum fraction of impulse-response energy allowed beyond the FIR order.
pub const TAIL_ENERGY_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSystemSpec {
    pub m: usize,
    pub p: usize,
    pub denominator_degree: usize,
    pub numerator_degree: usize,
    pub pole_radius_min: f64,
    pub pole_radius_max: f64,
    pub max_attempts: usize,
}

impl RandomSystemSpec {
    /// Degree-5 common denominator, degree-4 numerators, pole moduli in [0.4, 0.9].
    pub fn standard(m: usize, p: usize) -> Self {
        Self {
            m,
            p,
            denominator_degree: 5,
            numerator_degree: 4,
            pole_radius_min: 0.4,
            pole_radius_max: 0.9,
            max_attempts: 1000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.p == 0 {
            return Err(Error::Domain("system needs m >= 1 and p >= 1".into()));
        }
        let (lo, hi) = (self.pole_radius_min, self.pole_radius_max);
        if !(lo >= 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Domain(format!("pole radii must satisfy 0 <= {lo} <= {hi} < 1")));
        }
        if self.max_attempts == 0 {
            return Err(Error::Domain("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Rational transfer functions `B_k(z^-1) / A(z^-1)` with a shared `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSystem {
    /// `[1, a_1, .., a_d]`.
    pub denominator: Vec<f64>,
    pub numerators: Vec<Vec<f64>>,
    /// Poles as `[re, im]`.
    pub poles: Vec<[f64; 2]>,
    /// Impulse responses truncated to the FIR order.
    pub impulse_responses: Vec<Vec<f64>>,
}

impl TrueSystem {
    pub fn max_pole_modulus(&self) -> f64 {
        self.poles.iter().map(|&[re, im]| re.hypot(im)).fold(0.0, f64::max)
    }

    /// Output of channel k for the given input, starting at rest.
    pub fn filter(&self, k: usize, u: &[f64]) -> Vec<f64> {
        filter(&self.numerators[k], &self.denominator, u)
    }
}

/// Difference-equation filtering with zero initial conditions.
pub fn filter(numerator: &[f64], denominator: &[f64], u: &[f64]) -> Vec<f64> {
    let a0 = denominator[0];
    let mut y = vec![0.0; u.len()];
    for t in 0..u.len() {
        let mut acc = 0.0;
        for (i, &b) in numerator.iter().enumerate().take(t + 1) {
            acc += b * u[t - i];
        }
        for (i, &a) in denominator.iter().enumerate().skip(1).take(t) {
            acc -= a * y[t - i];
        }
        y[t] = acc / a0;
    }
    y
}

/// First `len` impulse-response samples, by long division.
pub fn impulse_response(numerator: &[f64], denominator: &[f64], len: usize) -> Vec<f64> {
    let mut impulse = vec![0.0; len];
    if len > 0 {
        impulse[0] = 1.0;
    }
    filter(numerator, denominator, &impulse)
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

fn draw_poles<R: Rng + ?Sized>(spec: &RandomSystemSpec, rng: &mut R) -> Vec<Complex64> {
    let mut poles = Vec::with_capacity(spec.denominator_degree);
    let pairs = spec.denominator_degree / 2;
    let radii: Vec<f64> = (0..spec.denominator_degree)
        .map(|_| rng.random_range(spec.pole_radius_min..=spec.pole_radius_max))
        .collect();
    for r in radii.iter().take(pairs) {
        let phase = rng.random_range(0.0..std::f64::consts::PI);
        let z = Complex64::from_polar(*r, phase);
        poles.push(z);
        poles.push(z.conj());
    }
    if spec.denominator_degree % 2 == 1 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        poles.push(Complex64::new(sign * radii[pairs], 0.0));
    }
    poles
}

/// Common stable denominator plus independent random numerators; each
/// response rescaled to unit peak. Systems whose energy beyond `p` exceeds
/// [`TAIL_ENERGY_LIMIT`] are redrawn.
pub fn generate_system<R: Rng + ?Sized>(spec: &RandomSystemSpec, rng: &mut R) -> Result<TrueSystem> {
    spec.validate()?;
    let slowest = spec.pole_radius_max.max(1e-3);
    let horizon = spec.p + (40.0 / -slowest.ln()).ceil() as usize + 20 * spec.denominator_degree;

    for _ in 0..spec.max_attempts {
        let poles = draw_poles(spec, rng);
        let denominator = poly_from_roots(&poles);
        let mut numerators = Vec::with_capacity(spec.m);
        let mut responses = Vec::with_capacity(spec.m);
        let mut accepted = true;
        for _ in 0..spec.m {
            let mut b: Vec<f64> = (0..=spec.numerator_degree).map(|_| rng.sample(StandardNormal)).collect();
            let g = impulse_response(&b, &denominator, horizon);
            let peak = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let total: f64 = g.iter().map(|v| v * v).sum();
            let tail: f64 = g[spec.p.min(horizon)..].iter().map(|v| v * v).sum();
            if peak == 0.0 || !(tail < TAIL_ENERGY_LIMIT * total) {
                accepted = false;
                break;
            }
            b.iter_mut().for_each(|x| *x /= peak);
            responses.push(g[..spec.p].iter().map(|v| v / peak).collect());
            numerators.push(b);
        }
        if accepted {
            return Ok(TrueSystem {
                denominator,
                numerators,
                poles: poles.iter().map(|z| [z.re, z.im]).collect(),
                impulse_responses: responses,
            });
        }
    }
    Err(Error::RegenerationLimit(spec.max_attempts))
}

/// Standard deviation of the white driving noise giving correlation
/// `target_c` between a source of the given variance and
/// `source + r`, under `c = 1 / sqrt(1 + gamma^2 / ((1 - b^2) var))`.
pub fn gamma_for_target_c(target_c: f64, ma_coefficient: f64, source_variance: f64) -> Result<f64> {
    if !(target_c > 0.0 && target_c < 1.0) {
        return Err(Error::Domain(format!("target correlation must lie in (0,1), got {target_c}")));
    }
    if !(ma_coefficient.abs() < 1.0) {
        return Err(Error::Domain(format!("|ma_coefficient| must be < 1, got {ma_coefficient}")));
    }
    if !(source_variance > 0.0) {
        return Err(Error::Domain(format!("source variance must be positive, got {source_variance}")));
    }
    let gamma2 = source_variance * (1.0 - ma_coefficient * ma_coefficient) * (1.0 / (target_c * target_c) - 1.0);
    Ok(gamma2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `u_2` is an exact copy of `u_1`; other channels independent.
    Duplicate,
    /// `u_{i+1} = u_i + r_i` for the first `correlated_prefix` channels.
    Chained,
}

/// How the link noise `r` is colored from white `v ~ N(0, gamma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkProcess {
    /// `r(t) = v(t) - b v(t-1)`.
    #[default]
    MovingAverage,
    /// `r(t) = b r(t-1) + v(t)`, whose variance `gamma^2 / (1 - b^2)` makes
    /// each link hit the target correlation exactly for a unit source.
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollinearInputSpec {
    pub m: usize,
    pub n: usize,
    pub mode: InputMode,
    pub correlated_prefix: usize,
    pub target_c: f64,
    pub ma_coefficient: f64,
    #[serde(default)]
    pub link_process: LinkProcess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInputs {
    pub inputs: Vec<Vec<f64>>,
    /// Link noise standard deviation per chained link (empty in duplicate mode).
    pub gammas: Vec<f64>,
}

fn white<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn link_noise<R: Rng + ?Sized>(n: usize, gamma: f64, b: f64, process: LinkProcess, rng: &mut R) -> Vec<f64> {
    let v = Normal::new(0.0, gamma).expect("gamma is finite and nonnegative");
    match process {
        LinkProcess::MovingAverage => {
            let mut prev: f64 = rng.sample(v);
            (0..n)
                .map(|_| {
                    let cur: f64 = rng.sample(v);
                    let r = cur - b * prev;
                    prev = cur;
                    r
                })
                .collect()
        }
        LinkProcess::Autoregressive => {
            let stationary_sd = gamma / (1.0 - b * b).sqrt();
            let mut r = stationary_sd * rng.sample::<f64, _>(StandardNormal);
            (0..n)
                .map(|_| {
                    r = b * r + rng.sample::<f64, _>(v);
                    r
                })
                .collect()
        }
    }
}

pub fn generate_inputs<R: Rng + ?Sized>(spec: &CollinearInputSpec, rng: &mut R) -> Result<GeneratedInputs> {
    if spec.m == 0 || spec.n == 0 {
        return Err(Error::Domain("inputs need m >= 1 and n >= 1".into()));
    }
    let mut inputs = Vec::with_capacity(spec.m);
    let mut gammas = Vec::new();
    match spec.mode {
        InputMode::Duplicate => {
            if spec.m < 2 {
                return Err(Error::Domain("duplicate mode needs m >= 2".into()));
            }
            let u1 = white(spec.n, rng);
            inputs.push(u1.clone());
            inputs.push(u1);
        }
        InputMode::Chained => {
            if spec.correlated_prefix == 0 || spec.correlated_prefix > spec.m {
                return Err(Error::Domain(format!(
                    "correlated_prefix must lie in 1..={}, got {}",
                    spec.m, spec.correlated_prefix
                )));
            }
            let gamma = gamma_for_target_c(spec.target_c, spec.ma_coefficient, 1.0)?;
            inputs.push(white(spec.n, rng));
            for _ in 1..spec.correlated_prefix {
                let r = link_noise(spec.n, gamma, spec.ma_coefficient, spec.link_process, rng);
                let prev = inputs.last().expect("chain is seeded");
                let next = prev.iter().zip(&r).map(|(u, r)| u + r).collect();
                inputs.push(next);
                gammas.push(gamma);
            }
        }
    }
    while inputs.len() < spec.m {
        inputs.push(white(spec.n, rng));
    }
    Ok(GeneratedInputs { inputs, gammas })
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub noiseless: Vec<f64>,
}

/// `Y = sum_k F_k u_k + e` with every system at rest before the first sample.
pub fn synthesize_dataset<R: Rng + ?Sized>(
    system: &TrueSystem,
    inputs: Vec<Vec<f64>>,
    noise_variance: f64,
    rng: &mut R,
) -> Result<SyntheticData> {
    if inputs.len() != system.numerators.len() {
        return Err(Error::Dimension { expected: system.numerators.len(), got: inputs.len() });
    }
    if !(noise_variance >= 0.0) {
        return Err(Error::Domain(format!("noise variance must be nonnegative, got {noise_variance}")));
    }
    let n = inputs.first().map_or(0, Vec::len);
    let mut noiseless = vec![0.0; n];
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != n {
            return Err(Error::Dimension { expected: n, got: u.len() });
        }
        for (acc, v) in noiseless.iter_mut().zip(system.filter(k, u)) {
            *acc += v;
        }
    }
    let sd = noise_variance.sqrt();
    let y = noiseless
        .iter()
        .map(|v| if sd > 0.0 { v + sd * rng.sample::<f64, _>(StandardNormal) } else { *v })
        .collect();
    Ok(SyntheticData { dataset: Dataset::new(y, inputs)?, noiseless })
}

/// Everything needed to regenerate one synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub system: RandomSystemSpec,
    pub inputs: CollinearInputSpec,
    pub noise_variance: f64,
    pub seed: u64,
}

/// Scoring data written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p: usize,
    pub noise_variance: f64,
    pub impulse_responses: Vec<Vec<f64>>,
    pub denominator: Vec<f64>,
    pub numerators: Vec<Vec<f64>>,
    pub poles: Vec<[f64; 2]>,
    pub gammas: Vec<f64>,
    pub empirical_correlation: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// System, then inputs, then noise, all from one seeded stream.
pub fn simulate(spec: &ExperimentSpec) -> Result<Simulation> {
    if spec.system.m != spec.inputs.m {
        return Err(Error::Dimension { expected: spec.system.m, got: spec.inputs.m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let system = generate_system(&spec.system, &mut rng)?;
    let generated = generate_inputs(&spec.inputs, &mut rng)?;
    let synthetic = synthesize_dataset(&system, generated.inputs, spec.noise_variance, &mut rng)?;
    let c = compute_correlations(&synthetic.dataset)?;
    let truth = GroundTruth {
        p: spec.system.p,
        noise_variance: spec.noise_variance,
        impulse_responses: system.impulse_responses,
        denominator: system.denominator,
        numerators: system.numerators,
        poles: system.poles,
        gammas: generated.gammas,
        empirical_correlation: c.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    Ok(Simulation { dataset: synthetic.dataset, truth })
}
