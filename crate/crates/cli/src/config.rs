//! Run configuration: TOML sections, resolved against command-line overrides.

use std::path::{Path, PathBuf};

use gsob_core::sampler::Variant;
use gsob_core::simgen::{CollinearInputSpec, ExperimentSpec, InputMode, LinkProcess, RandomSystemSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    pub generate: Option<GenerateSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub m: usize,
    pub n: usize,
    /// Length of the stored true impulse responses.
    pub p: usize,
    pub mode: InputMode,
    #[serde(default = "one")]
    pub correlated_prefix: usize,
    pub target_c: Option<f64>,
    pub ma_coefficient: Option<f64>,
    #[serde(default)]
    pub link_process: LinkProcess,
    pub noise_variance: f64,
    pub seed: u64,
    pub denominator_degree: Option<usize>,
    pub numerator_degree: Option<usize>,
    pub pole_radius_min: Option<f64>,
    pub pole_radius_max: Option<f64>,
    pub max_attempts: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub p: Option<usize>,
    pub alpha: Option<f64>,
    pub data_count_shape: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub variants: Option<Vec<String>>,
    pub n_mc: Option<usize>,
    pub n_ob: Option<usize>,
    pub burn_in: Option<usize>,
    pub beta: Option<f64>,
    pub thinning: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output: Option<PathBuf>,
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
    pub emit_figures: Option<bool>,
}

impl FileConfig {
    /// Parse a config file; relative paths inside it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.data.path);
        rebase(&mut cfg.data.truth);
        rebase(&mut cfg.run.output);
        Ok(cfg)
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

fn require<T>(value: Option<T>, key: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required key `{key}` (config or flag)")))
}

/// Ground-truth path used when `[data] truth` is absent.
pub fn default_truth_path(data: &Path) -> PathBuf {
    data.with_extension("truth.json")
}

impl GenerateSection {
    pub fn experiment(&self) -> Result<ExperimentSpec, CliError> {
        let std = RandomSystemSpec::standard(self.m, self.p);
        let chained = self.mode == InputMode::Chained;
        let target_c = match (chained, self.target_c) {
            (true, None) => return Err(CliError::Usage("chained inputs need `generate.target_c`".into())),
            (_, c) => c.unwrap_or(1.0),
        };
        let ma = match (chained, self.ma_coefficient) {
            (true, None) => return Err(CliError::Usage("chained inputs need `generate.ma_coefficient`".into())),
            (_, b) => b.unwrap_or(0.0),
        };
        Ok(ExperimentSpec {
            system: RandomSystemSpec {
                m: self.m,
                p: self.p,
                denominator_degree: self.denominator_degree.unwrap_or(std.denominator_degree),
                numerator_degree: self.numerator_degree.unwrap_or(std.numerator_degree),
                pole_radius_min: self.pole_radius_min.unwrap_or(std.pole_radius_min),
                pole_radius_max: self.pole_radius_max.unwrap_or(std.pole_radius_max),
                max_attempts: self.max_attempts.unwrap_or(std.max_attempts),
            },
            inputs: CollinearInputSpec {
                m: self.m,
                n: self.n,
                mode: self.mode,
                correlated_prefix: self.correlated_prefix,
                target_c,
                ma_coefficient: ma,
                link_process: self.link_process,
            },
            noise_variance: self.noise_variance,
            seed: self.seed,
        })
    }
}

/// Command-line values that replace config keys when given.
#[derive(Debug, Clone, Default)]
pub struct IdentifyOverrides {
    pub data: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub variants: Option<Vec<String>>,
    pub p: Option<usize>,
    pub alpha: Option<f64>,
    pub data_count_shape: bool,
    pub n_mc: Option<usize>,
    pub n_ob: Option<usize>,
    pub burn_in: Option<usize>,
    pub beta: Option<f64>,
    pub thinning: Option<usize>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub threads: Option<usize>,
    pub emit_figures: bool,
}

/// Fully resolved settings for `identify`; written to the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    pub data: PathBuf,
    pub truth: Option<PathBuf>,
    pub output: PathBuf,
    pub variants: Vec<Variant>,
    pub p: usize,
    pub alpha: f64,
    pub data_count_shape: bool,
    pub n_mc: usize,
    pub n_ob: usize,
    pub burn_in: usize,
    pub beta: Option<f64>,
    pub thinning: usize,
    pub seed: u64,
    pub replicates: usize,
    pub threads: usize,
    pub emit_figures: bool,
}

pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>, CliError> {
    let mut out: Vec<Variant> = Vec::new();
    for name in names.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        let v = name.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no sampler variant selected".into()));
    }
    Ok(out)
}

impl IdentifyConfig {
    pub fn resolve(file: &FileConfig, o: IdentifyOverrides) -> Result<Self, CliError> {
        let data = require(o.data.or_else(|| file.data.path.clone()), "data.path")?;
        let truth = o.truth.or_else(|| file.data.truth.clone()).or_else(|| {
            let guess = default_truth_path(&data);
            guess.exists().then_some(guess)
        });
        let variants = parse_variants(&require(o.variants.or_else(|| file.sampler.variants.clone()), "sampler.variants")?)?;
        let n_mc = require(o.n_mc.or(file.sampler.n_mc), "sampler.n_mc")?;
        let uses_blocks = variants.iter().any(|v| v.uses_blocks());
        let n_ob = match o.n_ob.or(file.sampler.n_ob) {
            Some(v) => v,
            None if uses_blocks => return Err(CliError::Usage("missing required key `sampler.n_ob`".into())),
            None => 1,
        };
        let beta = o.beta.or(file.sampler.beta);
        if uses_blocks && beta.is_none() {
            return Err(CliError::Usage("missing required key `sampler.beta` for a block variant".into()));
        }
        let threads = o.threads.or(file.run.threads).unwrap_or(1);
        let replicates = o.replicates.or(file.run.replicates).unwrap_or(1);
        if threads == 0 || replicates == 0 {
            return Err(CliError::Usage("`run.threads` and `run.replicates` must be positive".into()));
        }
        Ok(Self {
            output: require(o.output.or_else(|| file.run.output.clone()), "run.output")?,
            data,
            truth,
            variants,
            p: require(o.p.or(file.model.p), "model.p")?,
            alpha: require(o.alpha.or(file.model.alpha), "model.alpha")?,
            data_count_shape: o.data_count_shape || file.model.data_count_shape.unwrap_or(false),
            n_mc,
            n_ob,
            burn_in: o.burn_in.or(file.sampler.burn_in).unwrap_or(n_mc / 2),
            beta,
            thinning: o.thinning.or(file.sampler.thinning).unwrap_or(1),
            seed: require(o.seed.or(file.sampler.seed), "sampler.seed")?,
            replicates,
            threads,
            emit_figures: o.emit_figures || file.run.emit_figures.unwrap_or(false),
        })
    }
}
