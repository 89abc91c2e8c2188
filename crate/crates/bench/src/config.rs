//! Run configuration, read from TOML. Unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rebar_core::estimators::EstimatorKind;
use rebar_core::optim::{AdamConfig, DEFAULT_EMA_DECAY, DEFAULT_MINIBATCH, LEARNING_RATE_GRID};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BinarizeRule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Toy,
    Gen,
    Structpred,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Toy => "toy",
            Task::Gen => "gen",
            Task::Structpred => "structpred",
        })
    }
}

/// One estimator entry: `kind`, `kind(0.1)`, `kind(adaptive)` or `kind(adaptive:1)`.
///
/// A bare kind uses the `[estimator]` section's λ and adaptation flag.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub lambda: Option<f64>,
    pub adapt_lambda: Option<bool>,
}

impl EstimatorSpec {
    pub fn lambda(&self, settings: &EstimatorSettings) -> f64 {
        self.lambda.unwrap_or(settings.lambda)
    }

    pub fn adapt_lambda(&self, settings: &EstimatorSettings) -> bool {
        self.kind.uses_temperature() && self.adapt_lambda.unwrap_or(settings.adapt_lambda)
    }
}

impl FromStr for EstimatorSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => match rest.strip_suffix(')') {
                Some(arg) => (name.trim(), Some(arg.trim())),
                None => return invalid(format!("unclosed parenthesis in estimator `{s}`")),
            },
            None => (s, None),
        };
        let kind: EstimatorKind = name.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        let mut spec = EstimatorSpec {
            kind,
            lambda: None,
            adapt_lambda: None,
        };
        let Some(arg) = arg else { return Ok(spec) };
        if !kind.uses_temperature() {
            return invalid(format!("`{kind}` has no temperature to set in `{s}`"));
        }
        let number = |t: &str| -> Result<f64, ConfigError> {
            t.parse::<f64>()
                .ok()
                .filter(|l| *l > 0.0 && l.is_finite())
                .ok_or_else(|| ConfigError::Invalid(format!("bad temperature `{t}` in `{s}`")))
        };
        if let Some(rest) = arg.strip_prefix("adaptive") {
            spec.adapt_lambda = Some(true);
            match rest.strip_prefix(':') {
                Some(l) => spec.lambda = Some(number(l.trim())?),
                None if rest.is_empty() => {}
                None => return invalid(format!("bad estimator argument in `{s}`")),
            }
        } else {
            spec.lambda = Some(number(arg)?);
            spec.adapt_lambda = Some(false);
        }
        Ok(spec)
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.adapt_lambda, self.lambda) {
            (Some(true), Some(l)) => write!(f, "{}(adaptive:{l})", self.kind),
            (Some(true), None) => write!(f, "{}(adaptive)", self.kind),
            (_, Some(l)) => write!(f, "{}({l})", self.kind),
            _ => write!(f, "{}", self.kind),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub t: f64,
    pub theta0: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { t: 0.45, theta0: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deterministic {
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub units: usize,
    pub deterministic: Deterministic,
    /// Hidden width of the two tanh layers in the nonlinear model.
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 1,
            units: 200,
            deterministic: Deterministic::Linear,
            width: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image file for `source = "idx"`.
    pub path: Option<String>,
    pub binarize: BinarizeRule,
    pub binarize_seed: u64,
    /// Synthetic data only.
    pub dim: usize,
    pub count: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            binarize: BinarizeRule::Threshold,
            binarize_seed: 0,
            dim: 16,
            count: 1000,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub minibatch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimConfig {
            lr: LEARNING_RATE_GRID[2],
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            minibatch: DEFAULT_MINIBATCH,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineChoice {
    /// Learned input-dependent baseline for every score-function estimator
    /// except plain REINFORCE, on tasks that have inputs.
    Auto,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub lambda: f64,
    pub eta: f64,
    pub adapt_eta: bool,
    pub adapt_lambda: bool,
    pub fd_step: f64,
    pub modified: bool,
    pub baseline: BaselineChoice,
    /// Hidden width of the baseline network; 0 makes it affine.
    pub baseline_hidden: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            lambda: rebar_core::estimators::DEFAULT_LAMBDA,
            eta: 1.0,
            adapt_eta: true,
            adapt_lambda: false,
            fd_step: rebar_core::estimators::DEFAULT_FD_STEP,
            modified: false,
            baseline: BaselineChoice::Auto,
            baseline_hidden: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceConfig {
    pub decay: f64,
    /// Steps excluded from comparisons while the EMA warms up.
    pub warmup: u64,
    /// Probes are evaluated every this many steps.
    pub probe_every: u64,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        VarianceConfig {
            decay: DEFAULT_EMA_DECAY,
            warmup: 1000,
            probe_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples in the importance-weighted bound reported by `eval`.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Estimators to train with. For variance runs the first is the driver
    /// and every entry is probed.
    pub estimators: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// Output directory; nothing is written when absent.
    #[serde(default)]
    pub out: Option<String>,
    /// Record real elapsed time in `wall_ms`. Off by default so that telemetry is reproducible.
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub variance: VarianceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_trials() -> usize {
    5
}

fn default_steps() -> u64 {
    1000
}

fn default_log_interval() -> u64 {
    100
}

impl RunConfig {
    pub fn new(task: Task, estimators: &[&str]) -> Self {
        RunConfig {
            task,
            estimators: estimators.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            trials: default_trials(),
            steps: default_steps(),
            log_interval: default_log_interval(),
            out: None,
            wall_clock: false,
            toy: ToyConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            estimator: EstimatorSettings::default(),
            variance: VarianceConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Canonical serialization: every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn estimator_specs(&self) -> Result<Vec<EstimatorSpec>, ConfigError> {
        self.estimators.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let specs = self.estimator_specs()?;
        if specs.is_empty() {
            return invalid("at least one estimator is required");
        }
        if self.trials == 0 || self.steps == 0 || self.log_interval == 0 {
            return invalid("trials, steps and log_interval must be positive");
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return invalid("Adam needs β₁, β₂ in [0, 1) and ε > 0");
        }
        if o.minibatch == 0 {
            return invalid("minibatch must be positive");
        }
        let e = &self.estimator;
        if !(e.lambda > 0.0 && e.lambda.is_finite()) || !e.eta.is_finite() {
            return invalid(format!("need λ > 0 and finite η, got λ = {} η = {}", e.lambda, e.eta));
        }
        if !(e.fd_step > 0.0 && e.fd_step <= 0.1) {
            return invalid(format!("fd_step must lie in (0, 0.1], got {}", e.fd_step));
        }
        let v = &self.variance;
        if !(v.decay > 0.0 && v.decay < 1.0) || v.probe_every == 0 {
            return invalid("variance decay must lie in (0, 1) and probe_every must be positive");
        }
        match self.task {
            Task::Toy => {
                let t = &self.toy;
                if !(t.t > 0.0 && t.t < 1.0 && t.theta0 > 0.0 && t.theta0 < 1.0) {
                    return invalid(format!("toy needs t and theta0 in (0, 1), got {} and {}", t.t, t.theta0));
                }
            }
            Task::Gen | Task::Structpred => {
                let m = &self.model;
                if m.layers == 0 || m.units == 0 || m.width == 0 {
                    return invalid("model layers, units and width must be positive");
                }
                if m.layers > 1 {
                    if let Some(s) = specs.iter().find(|s| !s.kind.supports_multilayer()) {
                        return invalid(format!(
                            "`{}` handles a single stochastic layer; {} layers need rebar_multilayer or rebar_coupled_multilayer",
                            s.kind, m.layers
                        ));
                    }
                }
                let d = &self.data;
                match d.source {
                    DataSource::Idx if d.path.is_none() => return invalid("data.source = \"idx\" needs data.path"),
                    DataSource::Synthetic if d.dim == 0 || d.count < 10 => {
                        return invalid("synthetic data needs dim > 0 and count >= 10")
                    }
                    _ => {}
                }
                if self.task == Task::Structpred && d.source == DataSource::Synthetic && d.dim < 2 {
                    return invalid("structured prediction needs at least 2 dimensions");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_syntax() {
        let s: EstimatorSpec = "rebar(0.1)".parse().unwrap();
        assert_eq!((s.lambda, s.adapt_lambda), (Some(0.1), Some(false)));
        let s: EstimatorSpec = "rebar(adaptive:1)".parse().unwrap();
        assert_eq!((s.lambda, s.adapt_lambda), (Some(1.0), Some(true)));
        assert_eq!(s.to_string(), "rebar(adaptive:1)");
        let s: EstimatorSpec = "nvil".parse().unwrap();
        assert_eq!(s.to_string(), "nvil");
        assert!("nvil(0.1)".parse::<EstimatorSpec>().is_err());
        assert!("rebar(-1)".parse::<EstimatorSpec>().is_err());
        assert!("rebar(0.1".parse::<EstimatorSpec>().is_err());
        assert!("bogus".parse::<EstimatorSpec>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = "task = \"toy\"\nestimators = [\"rebar\"]\n";
        assert!(RunConfig::from_toml(ok).is_ok());
        assert!(RunConfig::from_toml(&format!("{ok}colour = 1\n")).is_err());
        assert!(RunConfig::from_toml(&format!("{ok}[optim]\nlearning_rate = 1\n")).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let mut c = RunConfig::new(Task::Gen, &["rebar", "nvil"]);
        c.out = Some("runs/a".into());
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = 1;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::new(Task::Gen, &["rebar"]);
        c.model.layers = 2;
        assert!(c.validate().is_err());
        c.estimators = vec!["rebar_multilayer".into()];
        assert!(c.validate().is_ok());
        c.optim.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
