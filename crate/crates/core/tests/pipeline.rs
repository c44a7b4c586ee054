use gsob_core::conditionals::{GaussianBlockPosterior, HyperState};
use gsob_core::oracle::{analytic_posterior, diagnose, small_instance};
use gsob_core::persist::{read_record, write_record, write_summary};
use gsob_core::sampler::{run, ChainState, Sampler, SamplerConfig, Variant};
use gsob_core::simgen::{simulate, CollinearInputSpec, ExperimentSpec, InputMode, LinkProcess, RandomSystemSpec};
use gsob_core::{CoefficientVector, Problem};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frozen(variant: Variant, hyper: &HyperState, m: usize) -> HyperState {
    if variant.common_scale() {
        hyper.clone()
    } else {
        HyperState::per_response(vec![hyper.lambda(0); m], hyper.sigma2)
    }
}

#[test]
fn one_sweep_preserves_the_exact_posterior() {
    let problem = small_instance(3, 2, 40, 12).unwrap();
    let hyper = HyperState::common(0.8, 0.09);
    let mut config = SamplerConfig::new(Variant::Gs, 1, 0.85, 2, 0);
    let kernel = gsob_core::StableSplineKernel::new(0.85, 2).unwrap();
    let oracle = analytic_posterior(&problem, &hyper, &kernel).unwrap();
    let joint = GaussianBlockPosterior::from_covariance(oracle.mean.to_dvector(), oracle.covariance.clone()).unwrap();
    let d = joint.dim();
    let draws = 6000;

    for variant in Variant::ALL {
        config.variant = variant;
        config.beta = Some(5.0);
        config.n_ob = 2;
        config.fixed_hyper = Some(frozen(variant, &hyper, 3));
        let sampler = Sampler::new(&problem, config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(variant as u64 + 1);
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for _ in 0..draws {
            let start = joint.draw(&mut rng);
            let mut state = ChainState {
                theta: CoefficientVector::from_flat(3, 2, start.as_slice().to_vec()).unwrap(),
                hyper: frozen(variant, &hyper, 3),
                iteration: 0,
            };
            sampler.sweep(&mut state, &mut rng).unwrap();
            for (c, v) in state.theta.as_slice().iter().enumerate() {
                let dev = v - oracle.mean.as_slice()[c];
                sum[c] += dev;
                sq[c] += dev * dev;
            }
        }
        for c in 0..d {
            let var = oracle.covariance[(c, c)];
            let z = sum[c] / draws as f64 / (var / draws as f64).sqrt();
            assert!(z.abs() < 4.0, "{variant} coefficient {c}: mean z {z}");
            let ratio = sq[c] / draws as f64 / var;
            assert!((ratio - 1.0).abs() < 0.1, "{variant} coefficient {c}: variance ratio {ratio}");
        }
    }
}

#[test]
fn simulate_identify_persist_diagnose() {
    let sim = simulate(&ExperimentSpec {
        system: RandomSystemSpec::standard(3, 30),
        inputs: CollinearInputSpec {
            m: 3,
            n: 400,
            mode: InputMode::Chained,
            correlated_prefix: 2,
            target_c: 0.95,
            ma_coefficient: 0.8,
            link_process: LinkProcess::MovingAverage,
        },
        noise_variance: 0.05,
        seed: 6,
    })
    .unwrap();
    let truth = CoefficientVector::from_blocks(&sim.truth.impulse_responses).unwrap();
    let problem = Problem::new(sim.dataset, 30).unwrap();
    let mut config = SamplerConfig::new(Variant::Gsob, 200, 0.9, 30, 8);
    config.beta = Some(50.0);
    config.n_ob = 2;
    let out = run(&problem, &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_record(dir.path(), &out.record).unwrap();
    write_summary(dir.path(), &out.summary).unwrap();
    let back = read_record(dir.path()).unwrap();
    let report = diagnose(&back, Some(&truth)).unwrap();
    assert_eq!(report.retained, 100);
    let fit = report.fit.unwrap();
    assert!(fit.iter().all(|&e| e < 0.5), "fit errors {fit:?}");
    for (a, b) in report.posterior_mean.iter().zip(out.summary.mean.as_slice()) {
        assert!((a - b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn summaries_respect_quantile_order(seed in 0u64..1000, variant in prop::sample::select(Variant::ALL.to_vec())) {
        let problem = small_instance(2, 3, 30, seed).unwrap();
        let mut config = SamplerConfig::new(variant, 40, 0.8, 3, seed);
        config.beta = Some(3.0);
        let out = run(&problem, &config).unwrap();
        prop_assert_eq!(out.summary.retained, 20);
        for c in 0..6 {
            prop_assert!(out.summary.q025[c] <= out.summary.q975[c]);
            prop_assert!(out.summary.sd[c] >= 0.0);
        }
        prop_assert!(out.record.sigma2_trace.iter().all(|s| *s > 0.0 && s.is_finite()));
    }
}
