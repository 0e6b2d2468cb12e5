//! Experiment configuration: a TOML document resolved against per-target
//! defaults.
//!
//! Tables `score_model` and `ratio` hold overrides only; every key missing
//! from them takes the default for the target's dimension.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::densities::{BeliefTarget, SamplingDist};
use crate::density_eval::{DensityEvalConfig, Divergence};
use crate::diffusion::ScoreModelConfig;
use crate::error::{Error, Result};
use crate::rum::RumConfig;
use crate::sampler::AldConfig;
use crate::tempering::RatioTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LambdaSpec {
    /// Uniform for `d ≤ 4`; otherwise Gaussian at the target's moments with
    /// three times its variance (per component for mixtures of more than
    /// four dimensions with several components).
    Auto,
    Uniform,
    DiagonalGaussian { mean: Vec<f64>, var: Vec<f64> },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
    },
}

impl Default for LambdaSpec {
    fn default() -> Self {
        Self::Auto
    }
}

impl LambdaSpec {
    pub fn resolve(&self, target: &BeliefTarget) -> Result<SamplingDist> {
        let domain = target.domain().clone();
        match self {
            Self::Uniform => Ok(SamplingDist::uniform(domain)),
            Self::DiagonalGaussian { mean, var } => SamplingDist::diagonal_gaussian(domain, mean.clone(), var.clone()),
            Self::GaussianMixture { weights, means, vars } => {
                SamplingDist::gaussian_mixture(domain, weights.clone(), means.clone(), vars.clone())
            }
            Self::Auto => {
                if target.dim() <= 4 {
                    return Ok(SamplingDist::uniform(domain));
                }
                let comps = target.components().unwrap_or_default();
                if comps.len() > 1 && target.name().to_ascii_lowercase().starts_with("mixturegaussians") {
                    let weights = comps.iter().map(|c| c.0).collect();
                    let means = comps.iter().map(|c| c.1.clone()).collect();
                    let vars = comps.iter().map(|c| c.2.iter().map(|v| 3.0 * v).collect()).collect();
                    return SamplingDist::gaussian_mixture(domain, weights, means, vars);
                }
                let (mean, var) = target
                    .moments()
                    .ok_or_else(|| Error::Config(format!("no moments for '{}'; give lambda explicitly", target.name())))?;
                SamplingDist::diagonal_gaussian(domain, mean, var.iter().map(|v| 3.0 * v).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldMode {
    /// Sample-based estimate from the ratio net and MWD importance samples.
    Estimated,
    /// A fixed constant tempering `constant`.
    Constant,
    /// No tempering: samples from the MWD model itself.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub mode: FieldMode,
    pub constant: f64,
    /// Importance samples per dimension.
    pub importance_per_dim: usize,
    pub divergence: Divergence,
    pub tol: f64,
    /// Side of the exported field grid.
    pub grid: usize,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            mode: FieldMode::Estimated,
            constant: 1.0,
            importance_per_dim: 2000,
            divergence: Divergence::Exact,
            tol: 1e-5,
            grid: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AldPreset {
    /// 50 steps per level, base step 0.15.
    Standard,
    /// 15 steps per level, base step 7.
    Fast2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    /// Defaults to `fast-2d` for two-dimensional targets, else `standard`.
    pub preset: Option<AldPreset>,
    pub steps_per_level: Option<usize>,
    pub eps_base: Option<f64>,
    pub levels: usize,
    pub n_samples: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            preset: None,
            steps_per_level: None,
            eps_base: None,
            levels: 40,
            n_samples: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Size of the reference sample from the target.
    pub reference_n: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { reference_n: 5000 }
    }
}

fn default_rum() -> RumConfig {
    RumConfig::bradley_terry()
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: String,
    /// Defaults to `1000 d`.
    #[serde(default)]
    pub n_pairs: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub lambda: LambdaSpec,
    #[serde(default = "default_rum")]
    pub rum: RumConfig,
    /// Train the score model on winners only (every loser masked).
    #[serde(default)]
    pub winners_only: bool,
    #[serde(default)]
    pub score_model: toml::Table,
    #[serde(default)]
    pub ratio: toml::Table,
    #[serde(default)]
    pub field: FieldSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

/// All settings of one experiment after defaults are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub target: String,
    pub n_pairs: usize,
    pub seeds: Vec<u64>,
    pub lambda: SamplingDist,
    pub rum: RumConfig,
    pub score_model: ScoreModelConfig,
    pub ratio: RatioTrainConfig,
    pub field: FieldSpec,
    pub ald: AldConfig,
    pub n_samples: usize,
    pub reference_n: usize,
}

impl Resolved {
    pub fn density_eval(&self, seed: u64) -> DensityEvalConfig {
        DensityEvalConfig {
            divergence: self.field.divergence,
            tol: self.field.tol,
            sigma_min: self.score_model.sigma_min,
            sigma_max: self.score_model.sigma_max,
            fd_step: 1e-4,
            seed,
        }
    }

    pub fn belief_target(&self) -> Result<BeliefTarget> {
        BeliefTarget::by_name(&self.target)
    }
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overrides: &toml::Table, what: &str) -> Result<T> {
    let mut table = match toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))? {
        toml::Value::Table(t) => t,
        _ => return Err(Error::Config(format!("{what} defaults are not a table"))),
    };
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{what}]: {e}")))
}

impl ExperimentConfig {
    /// Defaults for a built-in target.
    pub fn for_target(name: &str) -> Result<Self> {
        BeliefTarget::by_name(name)?;
        Ok(Self {
            target: name.to_ascii_lowercase(),
            n_pairs: None,
            seeds: default_seeds(),
            out_dir: default_out().join(name.to_ascii_lowercase()),
            lambda: LambdaSpec::Auto,
            rum: default_rum(),
            winners_only: false,
            score_model: toml::Table::new(),
            ratio: toml::Table::new(),
            field: FieldSpec::default(),
            sampler: SamplerSpec::default(),
            eval: EvalSpec::default(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.resolve_for(&BeliefTarget::by_name(&self.target)?)
    }

    /// Resolves against an explicit target instead of the named one; the
    /// target only supplies the dimension and the `auto` sampling density.
    pub fn resolve_for(&self, target: &BeliefTarget) -> Result<Resolved> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let d = target.dim();
        let lambda = self.lambda.resolve(target)?;
        lambda.validate()?;
        if !(self.rum.s > 0.0) {
            return Err(Error::Config("rum.s must be positive".into()));
        }
        let n_pairs = self.n_pairs.unwrap_or(1000 * d);
        if n_pairs == 0 {
            return Err(Error::Config("n_pairs must be positive".into()));
        }
        let mut score_model: ScoreModelConfig = merge(&ScoreModelConfig::for_dim(d), &self.score_model, "score_model")?;
        if score_model.d != d {
            return Err(Error::Config(format!("score_model.d = {} but the target has d = {d}", score_model.d)));
        }
        if self.winners_only {
            score_model.mask_prob = 1.0;
        }
        score_model.validate()?;
        let ratio_base = RatioTrainConfig {
            hidden: score_model.hidden,
            ..RatioTrainConfig::default()
        };
        let ratio: RatioTrainConfig = merge(&ratio_base, &self.ratio, "ratio")?;
        if ratio.iterations == 0 || ratio.hidden == 0 {
            return Err(Error::Config("ratio iterations and hidden width must be positive".into()));
        }
        let preset = self
            .sampler
            .preset
            .unwrap_or(if d == 2 { AldPreset::Fast2d } else { AldPreset::Standard });
        let mut ald = match preset {
            AldPreset::Standard => AldConfig::standard(score_model.sigma_min, score_model.sigma_max),
            AldPreset::Fast2d => AldConfig::fast_2d(score_model.sigma_min, score_model.sigma_max),
        };
        if self.sampler.levels != ald.schedule.len() {
            ald.schedule = crate::diffusion::noise_schedule(score_model.sigma_min, score_model.sigma_max, self.sampler.levels);
        }
        if let Some(steps) = self.sampler.steps_per_level {
            ald.steps_per_level = steps;
        }
        if let Some(eps) = self.sampler.eps_base {
            ald.eps_base = eps;
        }
        ald.validate()?;
        if self.field.mode == FieldMode::Constant && !(self.field.constant > 0.0) {
            return Err(Error::Config("constant tempering must be positive".into()));
        }
        if self.field.importance_per_dim == 0 || self.field.grid == 0 {
            return Err(Error::Config("importance_per_dim and grid must be positive".into()));
        }
        if self.sampler.n_samples == 0 || self.eval.reference_n == 0 {
            return Err(Error::Config("n_samples and reference_n must be positive".into()));
        }
        Ok(Resolved {
            target: self.target.to_ascii_lowercase(),
            n_pairs,
            seeds: self.seeds.clone(),
            lambda,
            rum: self.rum,
            score_model,
            ratio,
            field: self.field.clone(),
            ald,
            n_samples: self.sampler.n_samples,
            reference_n: self.eval.reference_n,
        })
    }
}
