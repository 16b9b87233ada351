//! Experiment configuration: parsing, defaults, and validation.
//!
//! Configurations describe one batch of trials declaratively: the latent
//! graph, mechanism and noise families, intervention style, sample budget,
//! numerical tolerances, and output location. The on-disk format is flat
//! `key = value` text — diff-friendly provenance for experiments — with
//! `#` comments and optional `[section]` headers that organize a file
//! without affecting its meaning. A JSON object with the same keys is
//! accepted interchangeably; files starting with `{` are parsed as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::change::EquivalenceConfig;
use crate::graph::Dag;
use crate::scm::{CombinationRule, InterventionStyle, MechanismKind, NoiseFamily};
use crate::{Error, Result};

/// Latent graph shape drawn for each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Chain,
    Diamond,
    Triangle,
    Random,
}

/// Everything a batch of trials needs, with one value per knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Number of latent nodes.
    pub n: usize,
    /// Observed dimension; 0 means "equal to `n`".
    pub d: usize,
    pub graph_kind: GraphKind,
    /// Edge probability for random graphs.
    pub edge_prob: f64,
    /// Pin the graph across trials; unset draws a fresh graph per trial.
    pub graph_seed: Option<u64>,
    pub mechanism: MechanismKind,
    pub coupling: CombinationRule,
    pub intervention: InterventionStyle,
    pub noise_family: NoiseFamily,
    /// Multiplier on every node's noise scale.
    pub noise_scale: f64,
    /// Samples drawn per environment.
    pub samples_per_env: usize,
    /// Relative threshold deciding "this score coordinate changed".
    pub equivalence_tol: f64,
    /// Quantile the change decision is read at.
    pub equivalence_quantile: f64,
    /// Relative singular-value cutoff for rank decisions.
    pub rank_tol: f64,
    /// Distance-correlation level above which residual dependence fails.
    pub independence_threshold: f64,
    pub trials: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker-pool size; unset uses all logical cores. The
    /// `SCALEI_THREADS` environment variable overrides both.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let eq = EquivalenceConfig::default();
        ExperimentConfig {
            n: 3,
            d: 0,
            graph_kind: GraphKind::Chain,
            edge_prob: 0.5,
            graph_seed: None,
            mechanism: MechanismKind::Quadratic,
            coupling: CombinationRule::Additive,
            intervention: InterventionStyle::Soft,
            noise_family: NoiseFamily::Mixed,
            noise_scale: 1.0,
            samples_per_env: 20_000,
            equivalence_tol: eq.tol,
            equivalence_quantile: eq.quantile,
            rank_tol: 1e-6,
            independence_threshold: 0.05,
            trials: 1,
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse from text, auto-detecting JSON (leading `{`) versus flat
    /// `key = value` lines.
    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let trimmed = text.trim_start();
        let cfg: ExperimentConfig = if trimmed.starts_with('{') {
            serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?
        } else {
            let value = keyvalue_to_json(text)?;
            serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("invalid config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a config file, reporting the path on I/O problems.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::parse_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Observed dimension after resolving the "match `n`" default.
    pub fn observed_dim(&self) -> usize {
        if self.d == 0 {
            self.n
        } else {
            self.d
        }
    }

    /// The change-decision parameters in the form the analysis stage takes.
    pub fn equivalence(&self) -> EquivalenceConfig {
        EquivalenceConfig {
            tol: self.equivalence_tol,
            quantile: self.equivalence_quantile,
            min_samples: EquivalenceConfig::default().min_samples,
        }
    }

    /// Build the latent graph for one trial.
    pub fn dag(&self, trial_graph_seed: u64) -> Result<Dag> {
        match self.graph_kind {
            GraphKind::Chain => Ok(Dag::chain(self.n)),
            GraphKind::Diamond => Ok(Dag::diamond()),
            GraphKind::Triangle => Ok(Dag::triangle()),
            GraphKind::Random => Ok(Dag::random(
                self.n,
                self.edge_prob,
                self.graph_seed.unwrap_or(trial_graph_seed),
            )),
        }
    }

    /// Check every invariant; called by the parsers and before any run.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        match self.graph_kind {
            GraphKind::Diamond if self.n != 4 => {
                return fail(format!("the diamond graph fixes n = 4, got n = {}", self.n));
            }
            GraphKind::Triangle if self.n != 3 => {
                return fail(format!("the triangle graph fixes n = 3, got n = {}", self.n));
            }
            _ => {}
        }
        if self.d != 0 && self.d < self.n {
            return fail(format!(
                "observed dimension d = {} is below the latent dimension n = {}",
                self.d, self.n
            ));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return fail(format!("edge_prob = {} is not in [0, 1]", self.edge_prob));
        }
        if self.noise_scale <= 0.0 {
            return fail(format!("noise_scale = {} must be positive", self.noise_scale));
        }
        if self.samples_per_env < 1000 {
            return fail(format!(
                "samples_per_env = {} is below the 1000-sample floor",
                self.samples_per_env
            ));
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.equivalence_tol <= 0.0 || self.rank_tol <= 0.0 {
            return fail("tolerances must be positive".into());
        }
        if !(0.0..1.0).contains(&self.equivalence_quantile) {
            return fail(format!(
                "equivalence_quantile = {} is not in [0, 1)",
                self.equivalence_quantile
            ));
        }
        if self.independence_threshold <= 0.0 {
            return fail("independence_threshold must be positive".into());
        }
        if self.threads == Some(0) {
            return fail("threads must be at least 1 when set".into());
        }
        Ok(())
    }
}

/// Parse flat `key = value` lines into a JSON object so one deserializer
/// serves both formats. Values become booleans or numbers when they read as
/// such, strings otherwise.
fn keyvalue_to_json(text: &str) -> Result<serde_json::Value> {
    let mut map = serde_json::Map::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            // Section headers group lines for the reader only.
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim();
        if map.contains_key(&key) {
            return Err(Error::Config(format!(
                "line {}: key `{key}` given twice",
                lineno + 1
            )));
        }
        map.insert(key, scalar_to_json(value));
    }
    Ok(serde_json::Value::Object(map))
}

fn scalar_to_json(value: &str) -> serde_json::Value {
    match value {
        "true" => return true.into(),
        "false" => return false.into(),
        _ => {}
    }
    if let Ok(u) = value.parse::<u64>() {
        return u.into();
    }
    if let Ok(i) = value.parse::<i64>() {
        return i.into();
    }
    if let Ok(f) = value.parse::<f64>() {
        if let Some(number) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(number);
        }
    }
    serde_json::Value::String(value.to_string())
}
