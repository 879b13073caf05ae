//! Experiment configuration: a single JSON document whose defaults mirror
//! the reference setup (seven-parameter grating box, 80x40x200 training
//! schedule, 32-walker sampler, 2e4 posterior draws).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{BoundaryPenalty, PriorBox, TrainConfig};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, SurrogateTrainConfig};
use crate::linalg::Matrix;
use crate::mcmc::McmcConfig;

/// Which forward model an experiment uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ForwardSpec {
    /// The built-in positive curve over the prior box.
    SyntheticCurve,
    /// `f(x) = A x + c` with the matrix given row by row.
    Linear { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// A surrogate model JSON produced by `train-surrogate`.
    SurrogateMlp { path: PathBuf },
}

impl ForwardSpec {
    /// Instantiates the model. Relative surrogate paths are resolved against
    /// `base` (the config file's directory) first, then the working directory.
    pub fn build(&self, prior: &PriorBox, base: Option<&Path>) -> Result<ForwardModel> {
        match self {
            ForwardSpec::SyntheticCurve => ForwardModel::synthetic_curve(prior.lo(), prior.hi()),
            ForwardSpec::Linear { matrix, offset } => {
                ForwardModel::linear(Matrix::from_rows(matrix)?, offset.clone())
            }
            ForwardSpec::SurrogateMlp { path } => {
                let resolved = match base {
                    Some(dir) if path.is_relative() && dir.join(path).exists() => dir.join(path),
                    _ => path.clone(),
                };
                if !resolved.exists() {
                    return Err(Error::Config(format!(
                        "surrogate file not found: {}",
                        resolved.display()
                    )));
                }
                ForwardModel::load(&resolved)
            }
        }
    }
}

/// How the measurement weights and noise enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConvention {
    /// `y = f(x)(1 + b z)`, `w = y_meas` treated as a constant.
    MeasurementWeighted,
    /// `y = f(x) + b z`, `w = 1`. Used by the analytic linear benchmark.
    Unit,
}

/// Prior support and boundary-penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub lambda_bd: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let b = PriorBox::default_grating();
        Self {
            lo: b.lo().to_vec(),
            hi: b.hi().to_vec(),
            lambda_bd: b.lambda_bd,
        }
    }
}

impl PriorSpec {
    pub fn build(&self) -> Result<PriorBox> {
        PriorBox::new(self.lo.clone(), self.hi.clone(), self.lambda_bd)
    }
}

/// Flow architecture plus its training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnConfig {
    pub layers: usize,
    pub subnet_width: usize,
    pub subnet_depth: usize,
    /// Soft-clamp scale; `null` disables clamping (raw exponential).
    pub clamp: Option<f64>,
    pub boundary: BoundaryPenalty,
    pub train: TrainConfig,
}

impl Default for InnConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            subnet_width: 256,
            subnet_depth: 2,
            clamp: Some(2.0),
            boundary: BoundaryPenalty::Relu,
            train: TrainConfig::default(),
        }
    }
}

impl InnConfig {
    pub fn clamp_value(&self) -> f64 {
        self.clamp.unwrap_or(f64::INFINITY)
    }
}

/// Ensemble-sampler settings plus the optional noise-scale augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    #[serde(flatten)]
    pub config: McmcConfig,
    pub augment_b: bool,
    pub b_range: (f64, f64),
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            config: McmcConfig::default(),
            augment_b: false,
            b_range: (1e-3, 0.3),
        }
    }
}

/// Pair generation and surrogate training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSpec {
    pub pairs: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_frac: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        let c = SurrogateTrainConfig::default();
        Self {
            pairs: 10_000,
            width: c.width,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            holdout_frac: c.holdout_frac,
        }
    }
}

impl SurrogateSpec {
    pub fn train_config(&self) -> SurrogateTrainConfig {
        SurrogateTrainConfig {
            width: self.width,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            holdout_frac: self.holdout_frac,
        }
    }
}

/// The whole experiment: forward model, prior, truth, noise levels, both
/// samplers, and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Forward model used for inference by both methods.
    pub forward: ForwardSpec,
    /// Forward model the measurement is synthesized from; defaults to
    /// `forward`. Lets an experiment synthesize from the exact curve while
    /// both samplers run on its surrogate.
    pub synthesis: Option<ForwardSpec>,
    pub prior: PriorSpec,
    pub param_names: Option<Vec<String>>,
    /// Ground truth; defaults to the box center.
    pub x_true: Option<Vec<f64>>,
    pub b_values: Vec<f64>,
    pub noise_convention: NoiseConvention,
    pub inn: InnConfig,
    pub mcmc: McmcSettings,
    pub sample_count: usize,
    pub marginal_bins: usize,
    pub seed: u64,
    pub surrogate: SurrogateSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            forward: ForwardSpec::SyntheticCurve,
            synthesis: None,
            prior: PriorSpec::default(),
            param_names: None,
            x_true: None,
            b_values: vec![0.01, 0.03, 0.1],
            noise_convention: NoiseConvention::MeasurementWeighted,
            inn: InnConfig::default(),
            mcmc: McmcSettings::default(),
            sample_count: 20_000,
            marginal_bins: 50,
            seed: 0,
        surrogate: SurrogateSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let prior = self.prior.build()?;
        if self.b_values.is_empty() {
            return Err(Error::Config("b_values must not be empty".into()));
        }
        if self.b_values.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config(
                "b values must be positive (the likelihood needs b > 0)".into(),
            ));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be positive".into()));
        }
        if self.marginal_bins < 2 {
            return Err(Error::Config("marginal_bins must be at least 2".into()));
        }
        if let Some(x) = &self.x_true {
            if x.len() != prior.dim() {
                return Err(Error::Config("x_true dimension vs prior".into()));
            }
            if !prior.contains(x) {
                return Err(Error::Config("x_true lies outside the prior box".into()));
            }
        }
        if let Some(names) = &self.param_names {
            if names.len() != prior.dim() {
                return Err(Error::Config("param_names length vs prior dim".into()));
            }
        }
        if self.inn.layers == 0 || self.inn.subnet_width == 0 || self.inn.subnet_depth == 0 {
            return Err(Error::Config("INN architecture fields must be positive".into()));
        }
        if let Some(c) = self.inn.clamp {
            if !(c > 0.0) {
                return Err(Error::Config("clamp must be positive".into()));
            }
        }
        self.inn.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.mcmc.b_range.0 >= self.mcmc.b_range.1 || self.mcmc.b_range.0 <= 0.0 {
            return Err(Error::Config("b_range must satisfy 0 < lo < hi".into()));
        }
        Ok(())
    }

    /// Ground truth for synthesis: the configured value or the box center.
    pub fn truth(&self) -> Result<Vec<f64>> {
        let prior = self.prior.build()?;
        Ok(self.x_true.clone().unwrap_or_else(|| prior.mid()))
    }

    /// Parameter names: configured, the grating names when the prior is the
    /// default grating box, else `x1..xd`.
    pub fn names(&self) -> Vec<String> {
        if let Some(n) = &self.param_names {
            return n.clone();
        }
        if self.prior == PriorSpec::default() {
            return PriorBox::grating_names();
        }
        crate::samples::default_names(self.prior.lo.len())
    }

    /// SHA-256 of the canonical JSON form; stamps every artifact.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Derives a reproducible per-stage seed from the experiment seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_paper_shaped() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.inn.layers, 10);
        assert_eq!(cfg.inn.subnet_width, 256);
        assert_eq!(cfg.inn.train.epochs, 80);
        assert_eq!(cfg.sample_count, 20_000);
        assert_eq!(cfg.b_values, vec![0.01, 0.03, 0.1]);
        let prior = cfg.prior.build().unwrap();
        assert_eq!(prior.lo(), &[85.0, 45.0, 76.0, 2.0, 0.0, 2.0, 0.1]);
        assert_eq!(prior.hi(), &[100.0, 55.0, 88.0, 4.0, 5.0, 10.0, 3.0]);
        assert_eq!(cfg.names()[0], "h");
    }

    #[test]
    fn zero_b_rejected() {
        let cfg = ExperimentConfig {
            b_values: vec![0.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn sparse_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"b_values":[0.03],"seed":7}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.b_values, vec![0.03]);
        assert_eq!(cfg.inn.train.batch_size, 200);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(0, "measurement"), stage_seed(0, "train"));
        assert_eq!(stage_seed(3, "mcmc"), stage_seed(3, "mcmc"));
    }
}
