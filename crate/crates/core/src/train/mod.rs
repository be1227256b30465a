//! Optimisation loop, evaluation and representation diagnostics.

mod metrics;
mod optim;
mod variants;

pub use metrics::{accuracy, argmax, evaluate, mad, masked_cross_entropy, mean_std, MadPairs, MadResult};
pub use optim::{AdamConfig, OptimizerState, WeightDecay};
pub use variants::{uses_lambda, StepContext, TrainingVariant, VariantOptions, VariantRegistry};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csa::CounterfactualScheme;
use crate::error::{CsaError, Result};
use crate::graph::{random_split, Graph, Split};
use crate::models::{Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Init = 0,
    Probe = 1,
    Dropout = 2,
    Counterfactual = 3,
}

pub fn rng_for(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub lambda: f64,
    /// Layers that receive causal supervision (or intervention, for `last`).
    pub layers: Vec<usize>,
    pub uniform_lo: f64,
    pub uniform_hi: f64,
    pub last_scheme: CounterfactualScheme,
    /// Record MAD of the evaluation logits before training and after every step.
    pub track_mad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let v = VariantOptions::default();
        Self {
            optimizer: AdamConfig::default(),
            max_epochs: 1000,
            patience: 100,
            lambda: v.lambda,
            layers: v.layers,
            uniform_lo: v.uniform_lo,
            uniform_hi: v.uniform_hi,
            last_scheme: v.last_scheme,
            track_mad: false,
        }
    }
}

impl TrainConfig {
    pub fn variant_options(&self) -> VariantOptions {
        VariantOptions {
            lambda: self.lambda,
            layers: self.layers.clone(),
            uniform_lo: self.uniform_lo,
            uniform_hi: self.uniform_hi,
            last_scheme: self.last_scheme.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.max_epochs == 0 {
            return Err(CsaError::invalid("max_epochs must be at least 1"));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(CsaError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training objective: classification loss plus the causal term.
    pub loss: f64,
    pub ce_loss: f64,
    pub csa_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub test_acc: f64,
}

/// MAD of the evaluation logits after `epoch` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadPoint {
    pub epoch: usize,
    pub all: f64,
    pub interclass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub variant: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub mad: Vec<MadPoint>,
}

impl RunHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// Test accuracy at the best-validation epoch.
    pub fn test_acc(&self) -> f64 {
        self.best().test_acc
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn mad_point(model: &Model, g: &Graph, overrides: &crate::models::Overrides, epoch: usize) -> Result<MadPoint> {
    let logits = model.predict(g, overrides)?;
    Ok(MadPoint {
        epoch,
        all: mad(&logits, MadPairs::All)?.value,
        interclass: mad(&logits, MadPairs::InterClass(g.labels()))?.value,
    })
}

/// Full-graph training with early stopping on validation accuracy.
///
/// `variant.prepare` runs first, drawing from the probe stream of `seed`;
/// dropout and counterfactual sampling use their own streams. On return the
/// model holds the parameters of the best-validation epoch.
pub fn train(
    model: &mut Model,
    g: &Graph,
    split: &Split,
    variant: &mut dyn TrainingVariant,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunHistory> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(CsaError::invalid("train, validation and test sets must be non-empty"));
    }
    variant.prepare(model, g, &mut rng_for(seed, RngStream::Probe))?;
    let overrides = variant.overrides(model, g)?;
    let mut dropout_rng = rng_for(seed, RngStream::Dropout);
    let mut cf_rng = rng_for(seed, RngStream::Counterfactual);
    let mut optimizer = OptimizerState::new(config.optimizer.clone())?;
    let labels = g.labels_arc();
    let train_mask = split.train_mask();

    let mut history = RunHistory {
        variant: variant.name().to_string(),
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        mad: Vec::new(),
    };
    if config.track_mad {
        history.mad.push(mad_point(model, g, &overrides, 0)?);
    }
    let mut best: Option<(f64, f64)> = None;
    let mut best_params: Vec<Tensor> = Vec::new();

    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, g, true, &overrides, &mut dropout_rng)?;
        let ce = tape.cross_entropy(out.logits, labels.clone(), train_mask.clone())?;
        let causal = variant.causal_term(StepContext {
            tape: &mut tape,
            model,
            store: model.params(),
            graph: g,
            output: &out,
            labels: &labels,
            mask: &train_mask,
            rng: &mut cf_rng,
        })?;
        let total = match causal {
            Some(c) => tape.add(ce, c)?,
            None => ce,
        };
        let ce_value = tape.value(ce)[0];
        let causal_value = causal.map_or(0.0, |c| tape.value(c)[0]);
        let loss = tape.value(total)[0];
        if !loss.is_finite() {
            return Err(CsaError::Diverged {
                epoch,
                ce: ce_value,
                causal: causal_value,
            });
        }
        model.params_mut().zero_grad();
        tape.backward(total, model.params_mut())?;
        optimizer.step(model.params_mut());
        variant.after_step(&out.traces);

        let logits = model.predict(g, &overrides)?;
        let record = EpochRecord {
            epoch,
            loss,
            ce_loss: ce_value,
            csa_loss: causal_value,
            train_acc: accuracy(&logits, g.labels(), &split.train)?,
            val_acc: accuracy(&logits, g.labels(), &split.val)?,
            val_loss: masked_cross_entropy(&logits, g.labels(), &split.val)?,
            test_acc: accuracy(&logits, g.labels(), &split.test)?,
        };
        if config.track_mad {
            history.mad.push(mad_point(model, g, &overrides, epoch + 1)?);
        }
        let improved = match best {
            None => true,
            Some((acc, loss)) => record.val_acc > acc || (record.val_acc == acc && record.val_loss < loss),
        };
        if improved {
            best = Some((record.val_acc, record.val_loss));
            history.best_epoch = epoch;
            best_params = model.params().iter().map(|(_, _, t)| t.clone()).collect();
        }
        history.epochs.push(record);
        if epoch - history.best_epoch >= config.patience {
            history.stopped_early = true;
            break;
        }
    }
    for (id, saved) in model.params().ids().collect::<Vec<_>>().into_iter().zip(best_params) {
        model.params_mut().get_mut(id).data_mut().copy_from_slice(saved.data());
    }
    Ok(history)
}

/// Result of one seed: the split, trained model and history.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub split: Split,
    pub model: Model,
    pub history: RunHistory,
}

/// Splits `g` and initialises a fresh model from `seed`, then trains `variant`.
pub fn run_seed(
    g: &Graph,
    ratios: [f64; 3],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variant: &str,
    seed: u64,
) -> Result<SeedRun> {
    let split = random_split(g, ratios, seed)?;
    let mut model = Model::new(
        model_config,
        g.feature_dim(),
        g.class_count(),
        &mut rng_for(seed, RngStream::Init),
    )?;
    let mut v = VariantRegistry::builtin().create(variant, &train_config.variant_options())?;
    let history = train(&mut model, g, &split, v.as_mut(), train_config, seed)?;
    Ok(SeedRun { split, model, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedResult {
    pub variant: String,
    pub runs: Vec<RunHistory>,
    /// Test accuracy at the best-validation epoch, as a fraction.
    pub test_mean: f64,
    pub test_std: f64,
}

impl MultiSeedResult {
    pub fn from_runs(variant: &str, runs: Vec<RunHistory>) -> Self {
        let accs: Vec<f64> = runs.iter().map(RunHistory::test_acc).collect();
        let (test_mean, test_std) = mean_std(&accs);
        Self {
            variant: variant.to_string(),
            runs,
            test_mean,
            test_std,
        }
    }
}

/// [`run_seed`] for every seed, in parallel; results keep the seed order.
pub fn multi_seed_run(
    g: &Graph,
    ratios: [f64; 3],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variant: &str,
    seeds: &[u64],
) -> Result<MultiSeedResult> {
    if seeds.is_empty() {
        return Err(CsaError::invalid("multi-seed run needs at least one seed"));
    }
    let runs = seeds
        .par_iter()
        .map(|&s| run_seed(g, ratios, model_config, train_config, variant, s).map(|r| r.history))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiSeedResult::from_runs(variant, runs))
}
