//! Declarative experiment configs and the commands behind the `csa` binary.
//!
//! A config is one JSON document. Every command is a deterministic function
//! of the config and its seeds, so rerunning one rewrites identical files.

mod commands;
mod output;

pub use commands::{
    attention_mass, cmd_attention_quality, cmd_mad, cmd_robustness, cmd_run, cmd_sweep_lambda, AttentionQualityReport,
    LambdaPoint, MadCurvePoint, MadFinal, MadReport, QualityRow, RobustnessGap, RobustnessReport, RobustnessRow,
    RunReport, SeedSummary, SweepReport, VariantSummary,
};
pub use output::{Fixed6, SUMMARY_VERSION};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CsaError, Result};
use crate::graph::{
    load_manifest, perturb_edges, perturb_features, synthetic_planted, Graph, PlantedParams, DEFAULT_RATIOS,
};
use crate::models::{ModelConfig, ModelKind};
use crate::train::{uses_lambda, TrainConfig, VariantRegistry};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "CSA_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Path to a dataset manifest, relative to the config file.
    Manifest(PathBuf),
    Planted(PlantedParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    /// Random feature vectors on a node subset.
    Feature,
    /// Random extra edges.
    Edge,
}

impl PerturbationKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Feature => "feature",
            PerturbationKind::Edge => "edge",
        }
    }

    pub fn apply(self, g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
        match self {
            PerturbationKind::Feature => perturb_features(g, fraction, seed),
            PerturbationKind::Edge => perturb_edges(g, fraction, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kinds: Vec<PerturbationKind>,
    pub fractions: Vec<f64>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            kinds: vec![PerturbationKind::Feature, PerturbationKind::Edge],
            fractions: vec![0.0, 0.1, 0.2, 0.3, 0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    /// Training variants by registry name.
    pub variants: Vec<String>,
    /// Causal loss weight; replaces `train.lambda` when present.
    pub lambda: Option<f64>,
    /// Supervised layers; replace `train.layers` when present.
    pub layers: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Train / validation / test fractions.
    pub ratios: [f64; 3],
    pub perturbation: PerturbationSpec,
    /// λ values for `sweep-lambda` when none are given on the command line.
    pub lambdas: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Planted(PlantedParams::default()),
            model: ModelConfig::default(),
            variants: vec!["none".into(), "csa2".into()],
            lambda: None,
            layers: None,
            train: TrainConfig::default(),
            seeds: (0..10).collect(),
            ratios: DEFAULT_RATIOS,
            perturbation: PerturbationSpec::default(),
            lambdas: (1..=10).map(|k| k as f64 / 10.0).collect(),
            output_dir: PathBuf::from("results"),
        }
    }
}

/// A parsed config together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    /// Non-fatal problems found during validation.
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Training settings with the top-level `lambda` and `layers` applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(l) = self.lambda {
            t.lambda = l;
        }
        if let Some(layers) = &self.layers {
            t.layers = layers.clone();
        }
        t
    }

    /// Checks the config; returns warnings for settings that will be ignored.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.model.validate()?;
        self.effective_train().validate()?;
        if self.variants.is_empty() {
            return Err(CsaError::invalid("config lists no variants"));
        }
        let registry = VariantRegistry::builtin();
        let options = self.effective_train().variant_options();
        for v in &self.variants {
            registry.create(v, &options)?;
        }
        let train = self.effective_train();
        for v in self.variants.iter().filter(|v| *v != "none") {
            if self.model.kind != ModelKind::Gat {
                return Err(CsaError::invalid(format!(
                    "variant `{v}` needs a gat model, got {}",
                    self.model.kind
                )));
            }
            if uses_lambda(v) && train.layers.is_empty() {
                return Err(CsaError::invalid(format!(
                    "variant `{v}` needs at least one supervised layer"
                )));
            }
            if let Some(l) = train.layers.iter().find(|&&l| l >= self.model.layers) {
                return Err(CsaError::invalid(format!(
                    "supervised layer {l} out of range for {} layers",
                    self.model.layers
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(CsaError::invalid("config lists no seeds"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CsaError::invalid("seeds must be distinct"));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0))
            || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(CsaError::invalid(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                self.ratios
            )));
        }
        if let Some(f) = self.perturbation.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(CsaError::invalid(format!("perturbation fraction {f} outside [0, 1]")));
        }
        if let Some(l) = self.lambdas.iter().find(|l| l.is_nan() || **l < 0.0) {
            return Err(CsaError::invalid(format!("swept lambda {l} must be >= 0")));
        }
        let mut warnings = Vec::new();
        if self.lambda.is_some() {
            for v in self.variants.iter().filter(|v| !uses_lambda(v)) {
                warnings.push(format!("lambda is ignored by variant `{v}`"));
            }
        }
        Ok(warnings)
    }

    pub fn load_graph(&self, base_dir: &Path) -> Result<Graph> {
        match &self.dataset {
            DatasetSource::Manifest(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                load_manifest(&path)
            }
            DatasetSource::Planted(params) => Ok(synthetic_planted(params)?.graph),
        }
    }

    /// `env_override` (usually the value of [`OUTPUT_ENV`]) wins over `output_dir`.
    pub fn output_dir(&self, base_dir: &Path, env_override: Option<PathBuf>) -> PathBuf {
        match env_override.filter(|p| !p.as_os_str().is_empty()) {
            Some(p) => p,
            None if self.output_dir.is_absolute() => self.output_dir.clone(),
            None => base_dir.join(&self.output_dir),
        }
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| CsaError::io(path, e))?;
    let config = ExperimentConfig::from_json(&text)?;
    let warnings = config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig {
        config,
        base_dir,
        warnings,
    })
}
