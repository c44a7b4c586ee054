//! Input collinearity and the overlapping-block selection distribution.
//!
//! Pairs are unordered (`i < j`). Each pair gets weight `exp(beta c_ij) - 1`
//! where `c_ij` is the absolute sample correlation of inputs i and j, and the
//! weights are normalized over all pairs.

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::regression::Dataset;

/// Pairs whose probability falls below this are left out of the sampler.
pub const PRUNE_BELOW: f64 = 1e-12;

/// `c_ij = |cov(u_i, u_j)| / sqrt(var(u_i) var(u_j))`, diagonal set to 1.
pub fn compute_correlations(data: &Dataset) -> Result<DMatrix<f64>> {
    let m = data.m();
    let centered: Vec<Vec<f64>> = data
        .inputs()
        .iter()
        .map(|u| {
            let mean = u.iter().sum::<f64>() / u.len() as f64;
            u.iter().map(|x| x - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(k) = norms.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroVariance(k));
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    if j <= i {
                        return 0.0;
                    }
                    let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).abs().min(1.0)
                })
                .collect()
        })
        .collect();
    let mut c = DMatrix::identity(m, m);
    for i in 0..m {
        for j in i + 1..m {
            c[(i, j)] = rows[i][j];
            c[(j, i)] = rows[i][j];
        }
    }
    Ok(c)
}

/// Selection distribution over unordered channel pairs.
#[derive(Debug, Clone)]
pub struct BlockSchedule {
    beta: f64,
    correlations: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
    probabilities: Vec<f64>,
    active: Vec<usize>,
    alias: WeightedAliasIndex<f64>,
    uniform_fallback: bool,
}

impl BlockSchedule {
    pub fn new(correlations: DMatrix<f64>, beta: f64) -> Result<Self> {
        let m = correlations.nrows();
        if correlations.ncols() != m {
            return Err(Error::Dimension { expected: m, got: correlations.ncols() });
        }
        if m < 2 {
            return Err(Error::Domain("overlapping blocks need at least two channels".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("block rate beta must be positive, got {beta}")));
        }

        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
        let cs: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let c = 0.5 * (correlations[(i, j)] + correlations[(j, i)]);
                if c.is_finite() && (0.0..=1.0 + 1e-12).contains(&c) {
                    Ok(c.min(1.0))
                } else {
                    Err(Error::Domain(format!("correlation c[{i}][{j}] = {c} outside [0, 1]")))
                }
            })
            .collect::<Result<_>>()?;

        let weights = pair_weights(&cs, beta);
        let total: f64 = weights.iter().sum();
        let uniform_fallback = total <= 0.0;
        let probabilities: Vec<f64> = if uniform_fallback {
            warn!("all input correlations are zero; selecting blocks uniformly");
            vec![1.0 / pairs.len() as f64; pairs.len()]
        } else {
            weights.iter().map(|w| w / total).collect()
        };

        let active: Vec<usize> = (0..pairs.len()).filter(|&k| probabilities[k] >= PRUNE_BELOW).collect();
        let alias = WeightedAliasIndex::new(active.iter().map(|&k| probabilities[k]).collect())
            .map_err(|e| Error::Domain(format!("block sampler: {e}")))?;

        Ok(Self { beta, correlations, pairs, probabilities, active, alias, uniform_fallback })
    }

    pub fn from_data(data: &Dataset, beta: f64) -> Result<Self> {
        Self::new(compute_correlations(data)?, beta)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn m(&self) -> usize {
        self.correlations.nrows()
    }

    pub fn correlations(&self) -> &DMatrix<f64> {
        &self.correlations
    }

    /// All unordered pairs `(i, j)` with `i < j`, in row-major order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn is_uniform_fallback(&self) -> bool {
        self.uniform_fallback
    }

    /// Number of pairs kept in the sampling structure.
    pub fn active_pairs(&self) -> usize {
        self.active.len()
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        let m = self.m();
        i * (2 * m - i - 1) / 2 + (j - i - 1)
    }

    /// `P_ij`, symmetric in its arguments and zero on the diagonal.
    pub fn probability(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.probabilities[self.pair_index(a, b)]
    }

    /// One categorical draw of a pair `(i, j)`, `i < j`.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        self.pairs[self.active[self.alias.sample(rng)]]
    }

    /// Long-format CSV `i,j,value` (1-based) of the correlation matrix.
    pub fn write_correlations_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "c"])?;
        let m = self.m();
        for i in 0..m {
            for j in 0..m {
                w.write_record([(i + 1).to_string(), (j + 1).to_string(), self.correlations[(i, j)].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format CSV `i,j,value` (1-based, `i < j`) of the probabilities.
    pub fn write_probabilities_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "p"])?;
        for (&(i, j), p) in self.pairs.iter().zip(&self.probabilities) {
            w.write_record([(i + 1).to_string(), (j + 1).to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `exp(beta c) - 1`, rescaled by `exp(-beta c_max)` when the exponent would
/// overflow. Only ratios matter.
fn pair_weights(cs: &[f64], beta: f64) -> Vec<f64> {
    let c_max = cs.iter().copied().fold(0.0, f64::max);
    if beta * c_max < 700.0 {
        cs.iter().map(|&c| (beta * c).exp_m1()).collect()
    } else {
        let floor = (-beta * c_max).exp();
        cs.iter().map(|&c| (beta * (c - c_max)).exp() - floor).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Chain of `prefix` inputs where each link keeps correlation `link_c`
    /// with a unit-variance source; all other channels uncorrelated.
    fn chained_structure(m: usize, prefix: usize, link_c: f64) -> DMatrix<f64> {
        let v = 1.0 / (link_c * link_c) - 1.0;
        let var = |k: usize| 1.0 + k as f64 * v;
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                1.0
            } else if i < prefix && j < prefix {
                (var(i.min(j)) / var(i.max(j))).sqrt()
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identical_and_negated_inputs_are_fully_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = white(&mut rng, 200);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let data = Dataset::new(vec![0.0; 200], vec![u.clone(), u, neg]).unwrap();
        let c = compute_correlations(&data).unwrap();
        assert!((c[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((c[(0, 2)] - 1.0).abs() < 1e-12);
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn zero_variance_input_rejected() {
        let data = Dataset::new(vec![0.0; 3], vec![vec![1.0, 2.0, 3.0], vec![4.0; 3]]).unwrap();
        assert!(matches!(compute_correlations(&data), Err(Error::ZeroVariance(1))));
    }

    #[test]
    fn two_channels_get_all_mass() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let s = BlockSchedule::new(c, 100.0).unwrap();
        assert_eq!(s.probability(0, 1), 1.0);
        assert_eq!(s.probability(1, 0), 1.0);
        assert_eq!(s.probability(1, 1), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| s.select(&mut rng) == (0, 1)));
    }

    #[test]
    fn equal_correlations_split_evenly() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]);
        let s = BlockSchedule::new(c, 20.0).unwrap();
        for &p in s.probabilities() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn chained_structure_mass_split() {
        let s = BlockSchedule::new(chained_structure(100, 10, 0.99), 100.0).unwrap();
        for i in 0..9 {
            let p = s.probability(i, i + 1);
            assert!((0.06..0.08).contains(&p), "pair ({},{}) got {p}", i + 1, i + 2);
        }
        assert!(s.probability(0, 9) < 5e-4);
        assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // independent pairs are pruned from the sampler
        assert_eq!(s.active_pairs(), 45);
    }

    #[test]
    fn selection_frequencies_match_probabilities() {
        let s = BlockSchedule::new(chained_structure(12, 6, 0.99), 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 100_000;
        let mut counts = vec![0usize; s.pairs().len()];
        for _ in 0..draws {
            let (i, j) = s.select(&mut rng);
            counts[s.pair_index(i, j)] += 1;
        }
        for (k, &p) in s.probabilities().iter().enumerate() {
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = counts[k] as f64 / draws as f64;
            assert!((freq - p).abs() <= 3.0 * se + 1e-12, "pair {:?}: {freq} vs {p}", s.pairs()[k]);
        }
    }

    #[test]
    fn selection_is_reproducible() {
        let s = BlockSchedule::new(chained_structure(8, 4, 0.95), 30.0).unwrap();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..50).map(|_| s.select(&mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..50).map(|_| s.select(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn small_beta_is_nearly_linear() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.7, 0.2, 1.0, 0.4, 0.7, 0.4, 1.0]);
        let s = BlockSchedule::new(c, 1e-6).unwrap();
        let total = 0.2 + 0.7 + 0.4;
        for (&(i, j), &p) in s.pairs().iter().zip(s.probabilities()) {
            let linear = s.correlations()[(i, j)] / total;
            assert!((p - linear).abs() < 1e-4 * linear);
        }
    }

    #[test]
    fn huge_beta_does_not_overflow() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.99, 0.5, 0.99, 1.0, 0.98, 0.5, 0.98, 1.0]);
        let s = BlockSchedule::new(c, 5000.0).unwrap();
        assert!(s.probabilities().iter().all(|p| p.is_finite()));
        assert!(s.probability(0, 1) > 0.99);
    }

    #[test]
    fn zero_correlations_fall_back_to_uniform() {
        let s = BlockSchedule::new(DMatrix::identity(4, 4), 100.0).unwrap();
        assert!(s.is_uniform_fallback());
        assert!(s.probabilities().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(BlockSchedule::new(DMatrix::identity(1, 1), 1.0).is_err());
        assert!(BlockSchedule::new(DMatrix::identity(3, 3), 0.0).is_err());
        assert!(BlockSchedule::new(DMatrix::identity(3, 3), -2.0).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0]);
        assert!(BlockSchedule::new(bad, 1.0).is_err());
    }

    #[test]
    fn csv_exports() {
        let dir = tempfile::tempdir().unwrap();
        let s = BlockSchedule::new(chained_structure(3, 3, 0.9), 10.0).unwrap();
        s.write_correlations_csv(dir.path().join("c.csv")).unwrap();
        s.write_probabilities_csv(dir.path().join("p.csv")).unwrap();
        let c = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
        let p = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert_eq!(c.lines().count(), 1 + 9);
        assert_eq!(p.lines().count(), 1 + 3);
        assert!(p.starts_with("i,j,p\n1,2,"));
    }

    proptest! {
        #[test]
        fn normalized_and_monotone(cs in proptest::collection::vec(0.0f64..1.0, 6), beta in 0.1f64..200.0) {
            let mut c = DMatrix::identity(4, 4);
            let mut k = 0;
            for i in 0..4 {
                for j in i + 1..4 {
                    c[(i, j)] = cs[k];
                    c[(j, i)] = cs[k];
                    k += 1;
                }
            }
            let s = BlockSchedule::new(c, beta).unwrap();
            let total: f64 = s.probabilities().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for a in 0..6 {
                for b in 0..6 {
                    if cs[a] > cs[b] + 1e-9 {
                        prop_assert!(s.probabilities()[a] >= s.probabilities()[b]);
                    }
                }
            }
        }
    }
}
