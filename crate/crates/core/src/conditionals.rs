//! Exact draws from the full conditionals of the hierarchical model
//!
//! ```text
//! Y | theta, sigma2      ~ N(G theta, sigma2 I)
//! theta_k | lambda_k     ~ N(0, lambda_k K)
//! lambda_k, sigma2       ~ Jeffreys (density proportional to 1/x)
//! ```
//!
//! Inverse-gamma laws use the shape/rate convention, density proportional to
//! `x^(-shape-1) exp(-rate/x)`. Gaussian conditionals are assembled in
//! precision form and factorized, never inverted.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::StableSplineKernel;
use crate::regression::{CoefficientVector, CrossProducts};

/// Rates below this are treated as a numerically zero quadratic form.
pub const RATE_FLOOR: f64 = 1e-300;

/// Relative diagonal jitter used for the single retry after a failed
/// Cholesky factorization.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scales {
    /// One scale factor shared by every impulse response.
    Common(f64),
    /// One scale factor per impulse response.
    PerResponse(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub scales: Scales,
    pub sigma2: f64,
}

impl HyperState {
    pub fn common(lambda: f64, sigma2: f64) -> Self {
        Self { scales: Scales::Common(lambda), sigma2 }
    }

    pub fn per_response(lambdas: Vec<f64>, sigma2: f64) -> Self {
        Self { scales: Scales::PerResponse(lambdas), sigma2 }
    }

    pub fn lambda(&self, k: usize) -> f64 {
        match &self.scales {
            Scales::Common(l) => *l,
            Scales::PerResponse(ls) => ls[k],
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match &self.scales {
            Scales::Common(l) => vec![*l],
            Scales::PerResponse(ls) => ls.clone(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.sigma2) {
            return Err(Error::Domain(format!("noise variance must be positive, got {}", self.sigma2)));
        }
        match &self.scales {
            Scales::Common(l) if !positive(*l) => {
                Err(Error::Domain(format!("scale factor must be positive, got {l}")))
            }
            Scales::PerResponse(ls) if ls.len() != m => Err(Error::Dimension { expected: m, got: ls.len() }),
            Scales::PerResponse(ls) if !ls.iter().all(|&l| positive(l)) => {
                Err(Error::Domain("all scale factors must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Shape of the common scale factor's conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommonShape {
    /// `m p / 2`: one Gaussian block of dimension p per channel.
    Conjugate,
    /// `n p / 2` with n the number of output samples.
    DataCount { n: usize },
}

impl CommonShape {
    pub fn shape(&self, m: usize, p: usize) -> f64 {
        match *self {
            CommonShape::Conjugate => (m * p) as f64 / 2.0,
            CommonShape::DataCount { n } => (n * p) as f64 / 2.0,
        }
    }
}

/// One draw from `IG(shape, rate)` as `rate / Gamma(shape, 1)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate >= RATE_FLOOR) || !rate.is_finite() {
        return Err(Error::DegenerateRate { rate });
    }
    let gamma = Gamma::new(shape, 1.0).map_err(|e| Error::Domain(format!("inverse-gamma shape {shape}: {e}")))?;
    Ok(rate / gamma.sample(rng))
}

pub(crate) fn lambda_k_params(theta_k: &[f64], kernel: &StableSplineKernel) -> Result<(f64, f64)> {
    let q = kernel.quad_form(theta_k)?;
    Ok((kernel.p() as f64 / 2.0, 0.5 * q))
}

pub(crate) fn lambda_common_params(
    theta: &CoefficientVector,
    kernel: &StableSplineKernel,
    shape: CommonShape,
) -> Result<(f64, f64)> {
    if theta.p() != kernel.p() {
        return Err(Error::Dimension { expected: kernel.p(), got: theta.p() });
    }
    let q: f64 = (0..theta.m()).map(|k| kernel.quad_form_unchecked(theta.block(k))).sum();
    Ok((shape.shape(theta.m(), theta.p()), 0.5 * q))
}

pub(crate) fn sigma2_params(rss: f64, n: usize) -> (f64, f64) {
    (n as f64 / 2.0, 0.5 * rss)
}

/// `lambda_k | theta_k ~ IG(p/2, theta_k' K^-1 theta_k / 2)`.
pub fn sample_lambda_k<R: Rng + ?Sized>(theta_k: &[f64], kernel: &StableSplineKernel, rng: &mut R) -> Result<f64> {
    let (shape, rate) = lambda_k_params(theta_k, kernel)?;
    sample_inverse_gamma(shape, rate, rng)
}

/// Common scale factor, rate `sum_k theta_k' K^-1 theta_k / 2`.
pub fn sample_lambda_common<R: Rng + ?Sized>(
    theta: &CoefficientVector,
    kernel: &StableSplineKernel,
    shape: CommonShape,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = lambda_common_params(theta, kernel, shape)?;
    sample_inverse_gamma(shape, rate, rng)
}

/// `sigma2 | . ~ IG(n/2, ||Y - G theta||^2 / 2)` from the residual vector.
pub fn sample_sigma2<R: Rng + ?Sized>(residual: &[f64], rng: &mut R) -> Result<f64> {
    if residual.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rss = residual.iter().map(|r| r * r).sum();
    sample_sigma2_from_rss(rss, residual.len(), rng)
}

/// Same law as [`sample_sigma2`], from a precomputed residual sum of squares.
pub fn sample_sigma2_from_rss<R: Rng + ?Sized>(rss: f64, n: usize, rng: &mut R) -> Result<f64> {
    let (shape, rate) = sigma2_params(rss, n);
    sample_inverse_gamma(shape, rate, rng)
}

#[derive(Debug, Clone)]
enum Root {
    /// Lower Cholesky factor of the precision.
    Precision(DMatrix<f64>),
    /// Lower Cholesky factor of the covariance.
    Covariance(DMatrix<f64>),
}

/// A Gaussian over one channel (dimension p) or a pair (dimension 2p).
#[derive(Debug, Clone)]
pub struct GaussianBlockPosterior {
    mean: DVector<f64>,
    root: Root,
}

/// Lower Cholesky factor, with one jittered retry.
pub(crate) fn factor_with_jitter(mut a: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok(ch.unpack());
    }
    let n = a.nrows();
    let bump = JITTER * a.diagonal().sum() / n as f64;
    for d in 0..n {
        a[(d, d)] += bump;
    }
    Cholesky::new(a)
        .map(|ch| ch.unpack())
        .ok_or_else(|| Error::Factorization(what.to_string()))
}

fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension { expected: a.nrows(), got: a.ncols() });
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > tol * scale {
        return Err(Error::Domain("matrix is not symmetric".into()));
    }
    Ok(())
}

impl GaussianBlockPosterior {
    pub fn from_covariance(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&covariance, 1e-12)?;
        if covariance.nrows() != mean.len() {
            return Err(Error::Dimension { expected: mean.len(), got: covariance.nrows() });
        }
        let l = factor_with_jitter(covariance, "covariance")?;
        Ok(Self { mean, root: Root::Covariance(l) })
    }

    /// Gaussian with precision `Q` and mean `Q^-1 rhs`.
    pub fn from_precision(precision: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        check_symmetric(&precision, 1e-12)?;
        if precision.nrows() != rhs.len() {
            return Err(Error::Dimension { expected: rhs.len(), got: precision.nrows() });
        }
        let l = factor_with_jitter(precision, "posterior precision")?;
        let mean = Cholesky::pack_dirty(l.clone()).solve(&rhs);
        Ok(Self { mean, root: Root::Precision(l) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub(crate) fn negate_mean(&mut self) {
        self.mean.neg_mut();
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.root {
            Root::Covariance(l) => l * l.transpose(),
            Root::Precision(l) => {
                let c = Cholesky::pack_dirty(l.clone()).inverse();
                (&c + c.transpose()) * 0.5
            }
        }
    }

    /// `mean + R z` with `R R' = covariance` and `z` standard normal.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let shift = match &self.root {
            Root::Covariance(l) => l * z,
            // L' x = z gives cov(x) = (L L')^-1
            Root::Precision(l) => l
                .tr_solve_lower_triangular(&z)
                .expect("Cholesky factor has a positive diagonal"),
        };
        &self.mean + shift
    }
}

/// Draw from a block posterior.
pub fn draw_gaussian<R: Rng + ?Sized>(post: &GaussianBlockPosterior, rng: &mut R) -> DVector<f64> {
    post.draw(rng)
}

/// Joint conditional of the listed channels given all others.
///
/// Precision: `blockdiag(K^-1 / lambda_c) + G_S' G_S / sigma2`;
/// right-hand side: `G_S' (Y - sum_{k not in S} G_k theta_k) / sigma2`.
pub fn channel_set_conditional(
    channels: &[usize],
    theta: &CoefficientVector,
    hyper: &HyperState,
    products: &CrossProducts,
    kernel: &StableSplineKernel,
) -> Result<GaussianBlockPosterior> {
    let m = products.m();
    let p = products.p();
    if kernel.p() != p {
        return Err(Error::Dimension { expected: p, got: kernel.p() });
    }
    if theta.m() != m || theta.p() != p {
        return Err(Error::Dimension { expected: m * p, got: theta.m() * theta.p() });
    }
    hyper.validate(m)?;
    for (a, &c) in channels.iter().enumerate() {
        if c >= m {
            return Err(Error::Domain(format!("channel {c} out of range (m = {m})")));
        }
        if channels[..a].contains(&c) {
            return Err(Error::Domain(format!("channel {c} listed twice")));
        }
    }

    let s = channels.len();
    let inv_s2 = 1.0 / hyper.sigma2;
    let mut precision = DMatrix::zeros(s * p, s * p);
    let mut rhs = DVector::zeros(s * p);
    for (a, &ca) in channels.iter().enumerate() {
        for (b, &cb) in channels.iter().enumerate() {
            let mut blk = products.gram(ca, cb) * inv_s2;
            if a == b {
                blk += kernel.inverse() / hyper.lambda(ca);
            }
            precision.view_mut((a * p, b * p), (p, p)).copy_from(&blk);
        }
        let mut r: Vec<f64> = products.gty(ca).iter().copied().collect();
        for k in (0..m).filter(|k| !channels.contains(k)) {
            products.gram_mul_add(ca, k, theta.block(k), -1.0, &mut r);
        }
        for (i, v) in r.into_iter().enumerate() {
            rhs[a * p + i] = v * inv_s2;
        }
    }
    // exact symmetry; the transposed Gram blocks agree only to rounding
    let precision = (&precision + precision.transpose()) * 0.5;
    GaussianBlockPosterior::from_precision(precision, rhs)
}

/// Conditional of `theta_k` given the other responses.
pub fn theta_k_conditional(
    k: usize,
    theta: &CoefficientVector,
    hyper: &HyperState,
    products: &CrossProducts,
    kernel: &StableSplineKernel,
) -> Result<GaussianBlockPosterior> {
    channel_set_conditional(&[k], theta, hyper, products, kernel)
}

/// Joint conditional of `[theta_i', theta_j']'` given the other responses.
pub fn theta_block_conditional(
    i: usize,
    j: usize,
    theta: &CoefficientVector,
    hyper: &HyperState,
    products: &CrossProducts,
    kernel: &StableSplineKernel,
) -> Result<GaussianBlockPosterior> {
    if i == j {
        return Err(Error::Domain(format!("block update needs two distinct channels, got ({i},{i})")));
    }
    channel_set_conditional(&[i, j], theta, hyper, products, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::{Dataset, Problem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn random_problem(seed: u64, n: usize, m: usize, p: usize) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..m).map(|_| normals(&mut rng, n)).collect();
        let y = normals(&mut rng, n);
        Problem::new(Dataset::new(y, inputs).unwrap(), p).unwrap()
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn lambda_k_moments() {
        let kern = StableSplineKernel::new(0.9, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta_k: Vec<f64> = (0..50).map(|i| 0.8f64.powi(i) * (i as f64 * 0.3).sin() + 0.01).collect();
        let (shape, rate) = lambda_k_params(&theta_k, &kern).unwrap();
        assert_eq!(shape, 25.0);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_lambda_k(&theta_k, &kern, &mut rng).unwrap()).collect();
        let (mean, se) = mean_and_se(&draws);
        let oracle = rate / (shape - 1.0);
        assert!((mean - oracle).abs() < 3.0 * se, "mean {mean} oracle {oracle} se {se}");
    }

    #[test]
    fn lambda_k_is_a_scale_family() {
        let kern = StableSplineKernel::new(0.9, 50).unwrap();
        let theta_k: Vec<f64> = (0..50).map(|i| 0.9f64.powi(i)).collect();
        let scaled: Vec<f64> = theta_k.iter().map(|t| 3.0 * t).collect();
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = sample_lambda_k(&theta_k, &kern, &mut a).unwrap();
            let y = sample_lambda_k(&scaled, &kern, &mut b).unwrap();
            assert!((y - 9.0 * x).abs() <= 1e-12 * y);
        }
    }

    #[test]
    fn common_shape_conventions() {
        let kern = StableSplineKernel::new(0.9, 50).unwrap();
        let theta = CoefficientVector::from_flat(2, 50, vec![0.1; 100]).unwrap();
        let (shape, _) = lambda_common_params(&theta, &kern, CommonShape::Conjugate).unwrap();
        assert_eq!(shape, 50.0);
        let (shape, _) = lambda_common_params(&theta, &kern, CommonShape::DataCount { n: 500 }).unwrap();
        assert_eq!(shape, 12_500.0);
    }

    #[test]
    fn common_reduces_to_single_block() {
        let kern = StableSplineKernel::new(0.7, 4).unwrap();
        let th = vec![1.0, -0.5, 0.25, 0.1];
        let theta = CoefficientVector::from_blocks(&[th.clone()]).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(8);
        let mut b = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x = sample_lambda_common(&theta, &kern, CommonShape::Conjugate, &mut a).unwrap();
            let y = sample_lambda_k(&th, &kern, &mut b).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn common_lambda_matches_quadrature_cdf() {
        // m = 2, p = 1: unnormalized posterior lambda^-1 * prod_k N(theta_k; 0, lambda K)
        let alpha = 0.9;
        let kern = StableSplineKernel::new(alpha, 1).unwrap();
        let theta = CoefficientVector::from_flat(2, 1, vec![0.7, -1.1]).unwrap();
        let density = |l: f64| {
            let mut d = 1.0 / l;
            for &t in theta.as_slice() {
                let v = l * alpha;
                d *= (-(t * t) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
            }
            d
        };
        // substitution l = e^s, integrate over s with the trapezoid rule
        let (lo, hi, steps) = (-12.0f64, 14.0f64, 200_000usize);
        let h = (hi - lo) / steps as f64;
        let mut cdf = Vec::with_capacity(steps + 1);
        let mut acc = 0.0;
        let mut prev = density(lo.exp()) * lo.exp();
        cdf.push((lo.exp(), 0.0));
        for i in 1..=steps {
            let s = lo + i as f64 * h;
            let cur = density(s.exp()) * s.exp();
            acc += 0.5 * (prev + cur) * h;
            cdf.push((s.exp(), acc));
            prev = cur;
        }
        let total = acc;
        let quad_cdf = |x: f64| {
            let idx = cdf.partition_point(|&(l, _)| l < x);
            cdf[idx.min(cdf.len() - 1)].1 / total
        };

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n_draws = 20_000;
        let draws: Vec<f64> = (0..n_draws)
            .map(|_| sample_lambda_common(&theta, &kern, CommonShape::Conjugate, &mut rng).unwrap())
            .collect();
        for &x in &[0.3, 0.6, 1.0, 2.0, 5.0] {
            let emp = draws.iter().filter(|&&d| d <= x).count() as f64 / n_draws as f64;
            let target = quad_cdf(x);
            let se = (target * (1.0 - target) / n_draws as f64).sqrt();
            assert!((emp - target).abs() < 4.0 * se + 1e-3, "x={x} emp={emp} quad={target}");
        }
    }

    #[test]
    fn degenerate_rates_are_errors() {
        let kern = StableSplineKernel::new(0.9, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = CoefficientVector::zeros(2, 3);
        assert!(matches!(
            sample_lambda_common(&zero, &kern, CommonShape::Conjugate, &mut rng),
            Err(Error::DegenerateRate { .. })
        ));
        assert!(matches!(sample_lambda_k(&[0.0; 3], &kern, &mut rng), Err(Error::DegenerateRate { .. })));
        assert!(matches!(sample_sigma2(&[0.0; 5], &mut rng), Err(Error::DegenerateRate { .. })));
    }

    #[test]
    fn sigma2_moments_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let residual = normals(&mut rng, 500);
        let rss: f64 = residual.iter().map(|r| r * r).sum();
        let (shape, rate) = sigma2_params(rss, 500);
        assert_eq!(shape, 250.0);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_sigma2(&residual, &mut rng).unwrap()).collect();
        let (mean, se) = mean_and_se(&draws);
        assert!((mean - rate / (shape - 1.0)).abs() < 3.0 * se);

        let scaled: Vec<f64> = residual.iter().map(|r| r * 2.0).collect();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let x = sample_sigma2(&residual, &mut a).unwrap();
        let y = sample_sigma2(&scaled, &mut b).unwrap();
        assert!((y - 4.0 * x).abs() < 1e-12 * y);
    }

    #[test]
    fn zero_input_recovers_prior() {
        let data = Dataset::new(vec![1.0; 20], vec![vec![0.0; 20], vec![1.0; 20]]).unwrap();
        let problem = Problem::new(data, 3).unwrap();
        let kern = StableSplineKernel::new(0.8, 3).unwrap();
        let theta = CoefficientVector::from_flat(2, 3, vec![0.0, 0.0, 0.0, 0.3, 0.2, 0.1]).unwrap();
        let hyper = HyperState::per_response(vec![2.0, 1.0], 0.5);
        let post = theta_k_conditional(0, &theta, &hyper, problem.products(), &kern).unwrap();
        assert!(post.mean().amax() < 1e-14);
        assert!((post.covariance() - kern.matrix() * 2.0).amax() < 1e-12);
    }

    #[test]
    fn huge_noise_washes_out_likelihood() {
        let problem = random_problem(3, 40, 1, 4);
        let kern = StableSplineKernel::new(0.9, 4).unwrap();
        let theta = CoefficientVector::zeros(1, 4);
        let hyper = HyperState::common(1.5, 1e12);
        let post = theta_k_conditional(0, &theta, &hyper, problem.products(), &kern).unwrap();
        assert!((post.covariance() - kern.matrix() * 1.5).amax() < 1e-8);
    }

    #[test]
    fn single_channel_mean_is_generalized_ridge() {
        let problem = random_problem(17, 20, 1, 3);
        let kern = StableSplineKernel::new(0.9, 3).unwrap();
        let (lambda, sigma2) = (0.7, 0.4);
        let post = theta_k_conditional(
            0,
            &CoefficientVector::zeros(1, 3),
            &HyperState::common(lambda, sigma2),
            problem.products(),
            &kern,
        )
        .unwrap();
        let g = problem.bank().block(0);
        let y = DVector::from_column_slice(problem.data().y());
        let k_inv_dense = kern.matrix().clone().lu().try_inverse().unwrap();
        let lhs = k_inv_dense * (sigma2 / lambda) + g.transpose() * &g;
        let ridge = lhs.lu().solve(&(g.transpose() * y)).unwrap();
        assert!((post.mean() - ridge).amax() < 1e-8);
    }

    #[test]
    fn orthogonal_inputs_decouple_block() {
        let n = 40;
        let mut u1 = vec![0.0; n];
        let mut u2 = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in 0..10 {
            u1[t] = rng.sample(StandardNormal);
            u2[20 + t] = rng.sample(StandardNormal);
        }
        let y = normals(&mut rng, n);
        let problem = Problem::new(Dataset::new(y, vec![u1, u2]).unwrap(), 3).unwrap();
        assert!(problem.products().gram(0, 1).amax() == 0.0);
        let kern = StableSplineKernel::new(0.9, 3).unwrap();
        let theta = CoefficientVector::zeros(2, 3);
        let hyper = HyperState::per_response(vec![1.0, 0.5], 0.3);
        let prods = problem.products();
        let pair = theta_block_conditional(0, 1, &theta, &hyper, prods, &kern).unwrap();
        let cov = pair.covariance();
        assert!(cov.view((0, 3), (3, 3)).amax() < 1e-14);
        for k in 0..2 {
            let single = theta_k_conditional(k, &theta, &hyper, prods, &kern).unwrap();
            assert!((cov.view((3 * k, 3 * k), (3, 3)) - single.covariance()).amax() < 1e-12);
            assert!((pair.mean().rows(3 * k, 3) - single.mean()).amax() < 1e-12);
        }
    }

    #[test]
    fn pair_conditional_matches_schur_complement() {
        let (n, m, p) = (30, 3, 2);
        let problem = random_problem(23, n, m, p);
        let kern = StableSplineKernel::new(0.6, p).unwrap();
        let hyper = HyperState::per_response(vec![0.8, 1.3, 0.5], 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let theta = CoefficientVector::from_flat(m, p, normals(&mut rng, m * p)).unwrap();

        // joint Gaussian posterior from the dense regressor
        let g = problem.bank().to_dense(1 << 20).unwrap();
        let y = DVector::from_column_slice(problem.data().y());
        let k_inv = kern.matrix().clone().lu().try_inverse().unwrap();
        let mut prec = g.transpose() * &g / hyper.sigma2;
        for k in 0..m {
            let mut blk = prec.view_mut((k * p, k * p), (p, p));
            blk += &k_inv / hyper.lambda(k);
        }
        let cov = prec.clone().lu().try_inverse().unwrap();
        let mean = &cov * (g.transpose() * y / hyper.sigma2);

        for &(i, j) in &[(0usize, 1usize), (0, 2), (2, 1)] {
            let rest: Vec<usize> = (0..m).filter(|&k| k != i && k != j).collect();
            let a_idx: Vec<usize> = [i, j].iter().flat_map(|&c| (c * p)..(c * p + p)).collect();
            let b_idx: Vec<usize> = rest.iter().flat_map(|&c| (c * p)..(c * p + p)).collect();
            let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| cov[(rows[r], cols[c])]);
            let s_aa = pick(&a_idx, &a_idx);
            let s_ab = pick(&a_idx, &b_idx);
            let s_bb = pick(&b_idx, &b_idx);
            let s_bb_inv = s_bb.lu().try_inverse().unwrap();
            let cond_cov = &s_aa - &s_ab * &s_bb_inv * s_ab.transpose();
            let diff_b = DVector::from_fn(b_idx.len(), |r, _| theta.as_slice()[b_idx[r]] - mean[b_idx[r]]);
            let mean_a = DVector::from_fn(a_idx.len(), |r, _| mean[a_idx[r]]);
            let cond_mean = mean_a + &s_ab * &s_bb_inv * diff_b;

            let post = theta_block_conditional(i, j, &theta, &hyper, problem.products(), &kern).unwrap();
            assert!((post.mean() - &cond_mean).amax() < 1e-8, "pair ({i},{j})");
            assert!((post.covariance() - &cond_cov).amax() < 1e-8, "pair ({i},{j})");
        }
    }

    #[test]
    fn duplicate_inputs_leave_difference_direction_at_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = normals(&mut rng, 60);
        let y = normals(&mut rng, 60);
        let p = 4;
        let problem = Problem::new(Dataset::new(y, vec![u.clone(), u]).unwrap(), p).unwrap();
        let kern = StableSplineKernel::new(0.9, p).unwrap();
        let lambda = 0.6;
        let hyper = HyperState::common(lambda, 0.3);
        let post =
            theta_block_conditional(0, 1, &CoefficientVector::zeros(2, p), &hyper, problem.products(), &kern)
                .unwrap();
        let eig = kern.matrix().clone().symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        let mut d = DVector::zeros(2 * p);
        d.rows_mut(0, p).copy_from(&v);
        d.rows_mut(p, p).copy_from(&(-v));
        d /= d.norm();
        let cov = post.covariance();
        let expected = lambda * eig.eigenvalues[top];
        assert!((&cov * &d - &d * expected).amax() < 1e-8 * expected);
        // every data-informed direction is much tighter than the null one
        assert!(cov.symmetric_eigenvalues().min() < 0.1 * expected);
    }

    #[test]
    fn scaling_data_and_noise_leaves_mean_invariant() {
        let problem = random_problem(41, 30, 2, 3);
        let c = 2.5;
        let scaled_inputs: Vec<Vec<f64>> = problem.data().inputs().iter().map(|u| u.iter().map(|x| x * c).collect()).collect();
        let scaled_y: Vec<f64> = problem.data().y().iter().map(|x| x * c).collect();
        let scaled = Problem::new(Dataset::new(scaled_y, scaled_inputs).unwrap(), 3).unwrap();
        let kern = StableSplineKernel::new(0.9, 3).unwrap();
        let theta = CoefficientVector::from_flat(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.0]).unwrap();
        let a = theta_k_conditional(0, &theta, &HyperState::common(0.9, 0.2), problem.products(), &kern).unwrap();
        let b = theta_k_conditional(0, &theta, &HyperState::common(0.9, 0.2 * c * c), scaled.products(), &kern).unwrap();
        assert!((a.mean() - b.mean()).amax() < 1e-10);
    }

    #[test]
    fn block_conditional_rejects_same_channel() {
        let problem = random_problem(1, 10, 2, 2);
        let kern = StableSplineKernel::new(0.9, 2).unwrap();
        let r = theta_block_conditional(1, 1, &CoefficientVector::zeros(2, 2), &HyperState::common(1.0, 1.0), problem.products(), &kern);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_hyper_rejected() {
        let problem = random_problem(1, 10, 2, 2);
        let kern = StableSplineKernel::new(0.9, 2).unwrap();
        let theta = CoefficientVector::zeros(2, 2);
        for hyper in [
            HyperState::common(-1.0, 1.0),
            HyperState::common(1.0, 0.0),
            HyperState::per_response(vec![1.0], 1.0),
        ] {
            assert!(theta_k_conditional(0, &theta, &hyper, problem.products(), &kern).is_err());
        }
    }

    #[test]
    fn draws_collapse_onto_mean_for_tiny_covariance() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let post = GaussianBlockPosterior::from_covariance(mean.clone(), DMatrix::identity(3, 3) * 1e-30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((post.draw(&mut rng) - mean).amax() < 1e-12);
    }

    #[test]
    fn empirical_covariance_matches_target() {
        let p = 5;
        let kern = StableSplineKernel::new(0.8, p).unwrap();
        let target = kern.matrix().clone();
        let mean = DVector::from_fn(p, |i, _| i as f64);
        let by_cov = GaussianBlockPosterior::from_covariance(mean.clone(), target.clone()).unwrap();
        let by_prec =
            GaussianBlockPosterior::from_precision(kern.inverse().clone(), kern.inverse() * &mean).unwrap();
        assert!((by_prec.mean() - &mean).amax() < 1e-9);
        for post in [by_cov, by_prec] {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let n = 100_000;
            let mut sum = DVector::zeros(p);
            let mut outer = DMatrix::zeros(p, p);
            for _ in 0..n {
                let x = draw_gaussian(&post, &mut rng);
                sum += &x;
                outer += &x * x.transpose();
            }
            let mu = sum / n as f64;
            let emp = outer / n as f64 - &mu * mu.transpose();
            assert!((&emp - &target).norm() / target.norm() < 0.05);
        }
    }

    #[test]
    fn same_seed_same_draw() {
        let post = GaussianBlockPosterior::from_covariance(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let a = post.draw(&mut ChaCha8Rng::seed_from_u64(5));
        let b = post.draw(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(GaussianBlockPosterior::from_covariance(DVector::zeros(2), c).is_err());
    }
}
