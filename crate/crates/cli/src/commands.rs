use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gsob_core::blocks::{compute_correlations, BlockSchedule};
use gsob_core::oracle::{
    diagnose as diagnose_record, equivalence_suite, small_instance, EquivalenceSettings, ORACLE_MAX_DIM,
};
use gsob_core::persist::{read_record, write_abort_marker, write_record, write_summary};
use gsob_core::sampler::{replicate_seed, ChainRecord, Sampler, SamplerConfig, Variant};
use gsob_core::simgen::{simulate as simulate_experiment, GroundTruth, InputMode};
use gsob_core::{CoefficientVector, Dataset, Problem};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{default_truth_path, FileConfig, IdentifyConfig, IdentifyOverrides};
use crate::{CliError, DiagnoseArgs, IdentifyArgs, OracleArgs, SimulateArgs};

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let cfg = FileConfig::load(&args.config)?;
    let mut gen = cfg
        .generate
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{} has no [generate] section", args.config.display())))?;
    if let Some(seed) = args.seed {
        gen.seed = seed;
    }
    let data_path = args
        .data
        .or(cfg.data.path)
        .ok_or_else(|| CliError::Usage("missing required key `data.path` (config or --data)".into()))?;
    let truth_path = args.truth.or(cfg.data.truth).unwrap_or_else(|| default_truth_path(&data_path));

    let spec = gen.experiment()?;
    let sim = simulate_experiment(&spec)?;
    ensure_parent(&data_path)?;
    ensure_parent(&truth_path)?;
    sim.dataset.write_csv(&data_path)?;
    sim.truth.write_json(&truth_path)?;

    let c = &sim.truth.empirical_correlation;
    let m = spec.inputs.m;
    println!("wrote {} (n={}, m={m}) and {}", data_path.display(), spec.inputs.n, truth_path.display());
    if m >= 2 {
        println!("c_12 = {:.5}", c[0][1]);
    }
    if spec.inputs.mode == InputMode::Chained && spec.inputs.correlated_prefix >= 2 {
        let k = spec.inputs.correlated_prefix;
        let adjacent: Vec<f64> = (0..k - 1).map(|i| c[i][i + 1]).collect();
        let lo = adjacent.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = adjacent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("adjacent prefix pairs: c in [{lo:.5}, {hi:.5}]; c_1,{k} = {:.5}", c[0][k - 1]);
    }
    let prefix = if spec.inputs.mode == InputMode::Duplicate { 2 } else { spec.inputs.correlated_prefix };
    let mut max_indep: f64 = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            if j >= prefix {
                max_indep = max_indep.max(c[i][j].abs());
            }
        }
    }
    if m > prefix {
        println!("max |c| involving independent inputs = {max_indep:.5}");
    }
    Ok(())
}

fn load_truth(path: &Path, m: usize, p: usize) -> Result<CoefficientVector, CliError> {
    let truth = GroundTruth::read_json(path)?;
    if truth.impulse_responses.len() != m {
        return Err(CliError::Usage(format!(
            "{} has {} responses, data has {m} inputs",
            path.display(),
            truth.impulse_responses.len()
        )));
    }
    let blocks: Vec<Vec<f64>> = truth
        .impulse_responses
        .iter()
        .map(|g| (0..p).map(|a| g.get(a).copied().unwrap_or(0.0)).collect())
        .collect();
    Ok(CoefficientVector::from_blocks(&blocks)?)
}

fn write_matrix_csv(path: &Path, m: usize, c: impl Fn(usize, usize) -> f64) -> Result<(), CliError> {
    let mut s = String::from("i,j,c\n");
    for i in 0..m {
        for j in 0..m {
            let _ = writeln!(s, "{},{},{}", i + 1, j + 1, c(i, j));
        }
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_block_frequencies(path: &Path, record: &ChainRecord, schedule: &BlockSchedule) -> Result<(), CliError> {
    let total = record.selected_blocks.len().max(1) as f64;
    let mut counts = vec![0usize; schedule.pairs().len()];
    for &(_, i, j) in &record.selected_blocks {
        if let Some(idx) = schedule.pairs().iter().position(|&q| q == (i, j)) {
            counts[idx] += 1;
        }
    }
    let mut s = String::from("i,j,count,frequency,probability\n");
    for (idx, &(i, j)) in schedule.pairs().iter().enumerate() {
        if counts[idx] > 0 || schedule.probabilities()[idx] >= 1e-12 {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                j + 1,
                counts[idx],
                counts[idx] as f64 / total,
                schedule.probabilities()[idx]
            );
        }
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct RunResult {
    variant: Variant,
    replicate: usize,
    seed: u64,
    directory: PathBuf,
    completed: usize,
    seconds: f64,
    status: String,
    lambda_iact: Option<f64>,
    lambda_ess: Option<f64>,
    mean_fit_error: Option<f64>,
    #[serde(skip)]
    numerical_failure: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a IdentifyConfig,
    data_sha256: String,
    truth_sha256: Option<String>,
    started_unix: u64,
    total_seconds: f64,
    seed_rule: &'static str,
    runs: &'a [RunResult],
}

struct RunContext<'a> {
    cfg: &'a IdentifyConfig,
    problem: &'a Problem,
    schedule: Option<&'a BlockSchedule>,
    truth: Option<&'a CoefficientVector>,
}

fn run_one(ctx: &RunContext<'_>, variant: Variant, replicate: usize) -> Result<RunResult, CliError> {
    let cfg = ctx.cfg;
    let seed = replicate_seed(cfg.seed, replicate as u64);
    let dir = cfg.output.join(variant.name()).join(format!("rep{replicate:03}"));
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join(gsob_core::persist::ABORT_MARKER));

    let mut sc = SamplerConfig::new(variant, cfg.n_mc, cfg.alpha, cfg.p, seed);
    sc.n_ob = cfg.n_ob;
    sc.burn_in = Some(cfg.burn_in);
    sc.beta = cfg.beta;
    sc.data_count_shape = cfg.data_count_shape;
    sc.thinning = cfg.thinning;
    let sampler = match (variant.uses_blocks(), ctx.schedule) {
        (true, Some(s)) => Sampler::with_schedule(ctx.problem, sc, s.clone())?,
        _ => Sampler::new(ctx.problem, sc)?,
    };

    let start = Instant::now();
    let outcome = sampler.run();
    let seconds = start.elapsed().as_secs_f64();
    let mut result = RunResult {
        variant,
        replicate,
        seed,
        directory: dir.clone(),
        completed: 0,
        seconds,
        status: "ok".into(),
        lambda_iact: None,
        lambda_ess: None,
        mean_fit_error: None,
        numerical_failure: false,
    };
    match outcome {
        Ok(out) => {
            write_record(&dir, &out.record)?;
            write_summary(&dir, &out.summary)?;
            result.completed = out.record.completed();
            let report = diagnose_record(&out.record, ctx.truth)?;
            report.write_json(&dir.join("diagnostics.json"))?;
            let lambda = report.trace("lambda").or_else(|| report.trace("lambda_1"));
            result.lambda_iact = lambda.map(|t| t.iact);
            result.lambda_ess = lambda.map(|t| t.ess);
            result.mean_fit_error = report.fit.as_ref().map(|f| f.iter().sum::<f64>() / f.len() as f64);
            if cfg.emit_figures {
                if let (true, Some(s)) = (variant.uses_blocks(), ctx.schedule) {
                    write_block_frequencies(&dir.join("block_frequencies.csv"), &out.record, s)?;
                }
            }
        }
        Err(abort) => {
            write_record(&dir, &abort.partial)?;
            write_abort_marker(&dir, &abort.error)?;
            result.completed = abort.partial.completed();
            result.status = format!("aborted: {}", abort.error);
            result.numerical_failure = abort.error.is_numerical();
            if !result.numerical_failure {
                return Err(abort.error.into());
            }
        }
    }
    Ok(result)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn identify(args: IdentifyArgs) -> Result<(), CliError> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let overrides = IdentifyOverrides {
        data: args.data,
        truth: args.truth,
        output: args.out,
        variants: args.variant,
        p: args.p,
        alpha: args.alpha,
        data_count_shape: args.data_count_shape,
        n_mc: args.n_mc,
        n_ob: args.n_ob,
        burn_in: args.burn_in,
        beta: args.beta,
        thinning: args.thinning,
        seed: args.seed,
        replicates: args.replicates,
        threads: args.threads,
        emit_figures: args.emit_figures,
    };
    let cfg = IdentifyConfig::resolve(&file, overrides)?;
    let started_unix = unix_seconds();
    let started = Instant::now();

    if !cfg.data.is_file() {
        return Err(CliError::Usage(format!("dataset {} does not exist", cfg.data.display())));
    }
    let data_sha256 = sha256_file(&cfg.data)?;
    let dataset = Dataset::read_csv(&cfg.data)?;
    let truth_sha256 = cfg.truth.as_deref().map(sha256_file).transpose()?;
    let truth = cfg.truth.as_deref().map(|t| load_truth(t, dataset.m(), cfg.p)).transpose()?;
    info!("loaded {} (n={}, m={})", cfg.data.display(), dataset.n(), dataset.m());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    let (problem, schedule) = pool.install(|| -> Result<_, CliError> {
        let problem = Problem::new(dataset, cfg.p)?;
        let schedule = match (cfg.variants.iter().any(|v| v.uses_blocks()), cfg.beta) {
            (true, Some(beta)) if problem.m() >= 2 => Some(BlockSchedule::from_data(problem.data(), beta)?),
            _ => None,
        };
        Ok((problem, schedule))
    })?;

    fs::create_dir_all(&cfg.output)?;
    if cfg.emit_figures {
        let figures = cfg.output.join("figures");
        fs::create_dir_all(&figures)?;
        match &schedule {
            Some(s) => {
                s.write_correlations_csv(figures.join("correlations.csv"))?;
                s.write_probabilities_csv(figures.join("probabilities.csv"))?;
            }
            None if problem.m() >= 2 => {
                let c = compute_correlations(problem.data())?;
                write_matrix_csv(&figures.join("correlations.csv"), c.nrows(), |i, j| c[(i, j)])?;
            }
            None => {}
        }
    }

    let ctx = RunContext { cfg: &cfg, problem: &problem, schedule: schedule.as_ref(), truth: truth.as_ref() };
    let tasks: Vec<(Variant, usize)> =
        cfg.variants.iter().flat_map(|&v| (0..cfg.replicates).map(move |r| (v, r))).collect();
    let results: Vec<Result<RunResult, CliError>> =
        pool.install(|| tasks.par_iter().map(|&(v, r)| run_one(&ctx, v, r)).collect());

    let mut runs = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }

    let mut table = String::from("variant,replicate,seed,status,completed,seconds,lambda_iact,lambda_ess,mean_fit_error\n");
    for r in &runs {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{:.3},{},{},{}",
            r.variant,
            r.replicate,
            r.seed,
            if r.status == "ok" { "ok" } else { "aborted" },
            r.completed,
            r.seconds,
            fmt_opt(r.lambda_iact),
            fmt_opt(r.lambda_ess),
            fmt_opt(r.mean_fit_error)
        );
        println!(
            "{:<6} rep {:>3}: {} after {} iterations in {:.2}s{}{}",
            r.variant.name(),
            r.replicate,
            r.status,
            r.completed,
            r.seconds,
            r.lambda_iact.map_or(String::new(), |t| format!(", lambda IACT {t:.2}")),
            r.mean_fit_error.map_or(String::new(), |e| format!(", mean fit error {e:.4}"))
        );
    }
    fs::write(cfg.output.join("results.csv"), table)?;

    let manifest = Manifest {
        tool: "gsob",
        version: env!("CARGO_PKG_VERSION"),
        command: "identify",
        config: &cfg,
        data_sha256,
        truth_sha256,
        started_unix,
        total_seconds: started.elapsed().as_secs_f64(),
        seed_rule: "chain seed = splitmix64(seed + replicate)",
        runs: &runs,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(cfg.output.join("manifest.json"), json + "\n")?;

    if let Some(e) = first_error {
        return Err(e);
    }
    if let Some(r) = runs.iter().find(|r| r.numerical_failure) {
        return Err(CliError::Numerical(format!("{} replicate {}: {}", r.variant, r.replicate, r.status)));
    }
    Ok(())
}

pub fn oracle_check(args: OracleArgs) -> Result<(), CliError> {
    let file = FileConfig::load_optional(args.config.as_deref())?;
    let p = args.p.or(file.model.p).unwrap_or(3);
    let problem = match &file.data.path {
        Some(path) => {
            let data = Dataset::read_csv(path)?;
            if data.m() * p > ORACLE_MAX_DIM {
                return Err(CliError::Usage(format!(
                    "size guard: oracle needs m*p <= {ORACLE_MAX_DIM}, got {}",
                    data.m() * p
                )));
            }
            Problem::new(data, p)?
        }
        None => {
            if args.m.saturating_mul(p) > ORACLE_MAX_DIM {
                return Err(CliError::Usage(format!(
                    "size guard: oracle needs m*p <= {ORACLE_MAX_DIM}, got {}",
                    args.m.saturating_mul(p)
                )));
            }
            small_instance(args.m, p, args.n, args.seed.unwrap_or(1))?
        }
    };
    let settings = EquivalenceSettings {
        lambda: args.lambda,
        sigma2: args.sigma2,
        alpha: args.alpha.or(file.model.alpha).unwrap_or(0.9),
        sweeps: args.sweeps,
        beta: args.beta,
        seed: args.seed.or(file.sampler.seed).unwrap_or(EquivalenceSettings::default().seed),
        flip_conditional_mean: args.corrupt_mean,
        ..EquivalenceSettings::default()
    };
    println!("instance m={} p={} n={}; {} sweeps per variant", problem.m(), problem.p(), problem.n(), settings.sweeps);
    let checks = equivalence_suite(&problem, &settings)?;
    for c in &checks {
        let kind = if c.name.ends_with("chain mean") { "max |z|" } else { "rel. discrepancy" };
        println!(
            "{}: {} ({kind} {:.3e}, limit {:.0e})",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.value,
            c.threshold
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} oracle checks failed", checks.len())));
    }
    println!("all {} oracle checks passed", checks.len());
    Ok(())
}

pub fn diagnose(args: DiagnoseArgs) -> Result<(), CliError> {
    if !args.chain.join("chain.json").is_file() {
        return Err(CliError::Usage(format!("{} is not a chain directory", args.chain.display())));
    }
    let record = read_record(&args.chain)?;
    let truth = args.truth.as_deref().map(|t| load_truth(t, record.m, record.p)).transpose()?;
    let report = diagnose_record(&record, truth.as_ref())?;
    let out = args.out.unwrap_or_else(|| args.chain.join("diagnostics.json"));
    ensure_parent(&out)?;
    report.write_json(&out)?;
    println!("{} chain, {} retained draws", report.variant, report.retained);
    if report.traces.is_empty() {
        println!("  traces too short for IACT (need {} retained iterations)", gsob_core::oracle::MIN_TRACE_LEN);
    }
    for t in &report.traces {
        println!(
            "  {:<10} IACT {:>8.2}  ESS {:>8.1}{}",
            t.name,
            t.iact,
            t.ess,
            if t.degenerate { "  (constant trace)" } else { "" }
        );
    }
    if let Some(fit) = &report.fit {
        let mean = fit.iter().sum::<f64>() / fit.len() as f64;
        println!("  mean relative fit error {mean:.4} over {} responses", fit.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}
