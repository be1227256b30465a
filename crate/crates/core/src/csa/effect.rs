use std::sync::Arc;

use rand::rngs::mock::StepRng;
use rand::{Rng, RngCore};

use crate::error::{CsaError, Result};
use crate::graph::Graph;
use crate::models::{AttentionMap, ForwardOutput, LayerTrace, Model, Overrides};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Linear read-out of one layer's node features into class logits.
///
/// The weight is stored as `[layer width x classes]` so the logits are
/// `X^l . weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub layer_index: usize,
    pub in_dim: usize,
    pub classes: usize,
    pub weight: ParamId,
}

impl LayerProbe {
    /// Adds a Glorot-initialised probe for `layer` to the model's store.
    pub fn new(model: &mut Model, layer: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if layer >= model.num_layers() {
            return Err(CsaError::invalid(format!(
                "probe for layer {layer}, model has {} layers",
                model.num_layers()
            )));
        }
        let in_dim = model.layer_output_dim(layer);
        let classes = model.classes();
        let bound = (6.0 / (in_dim + classes) as f64).sqrt();
        let data = (0..in_dim * classes).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = model
            .params_mut()
            .add(format!("probe{layer}.w"), Tensor::new(vec![in_dim, classes], data)?);
        Ok(Self {
            layer_index: layer,
            in_dim,
            classes,
            weight,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match tape.shape(x) {
            [_, d] if *d == self.in_dim => {}
            other => {
                return Err(CsaError::shape("layer probe", other, &[0, self.in_dim]));
            }
        }
        let w = tape.param(store, self.weight);
        tape.matmul(x, w)
    }
}

/// Probe logits of one layer under factual and counterfactual attention.
#[derive(Debug, Clone, Copy)]
pub struct LayerEffect {
    pub layer_index: usize,
    pub effect: Var,
    pub factual: Var,
    pub counterfactual: Var,
}

/// Effect of the learned attention at `trace.layer_index`.
///
/// Both branches recompute the layer from the trace input without dropout.
/// The factual branch recomputes the attention, so gradients reach the
/// attention parameters through it; the counterfactual branch uses
/// `counterfactual` as constants.
pub fn layer_effect(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    g: &Graph,
    trace: &LayerTrace,
    counterfactual: &AttentionMap,
    probe: &LayerProbe,
) -> Result<LayerEffect> {
    let l = trace.layer_index;
    if probe.layer_index != l {
        return Err(CsaError::invalid(format!(
            "probe for layer {} applied to layer {l}",
            probe.layer_index
        )));
    }
    if probe.in_dim != model.layer_output_dim(l) || probe.classes != model.classes() {
        return Err(CsaError::shape(
            "layer probe",
            &[probe.in_dim, probe.classes],
            &[model.layer_output_dim(l), model.classes()],
        ));
    }
    // eval mode draws nothing from the rng
    let mut rng = StepRng::new(0, 0);
    let (x_fact, _) = model.layer_forward_with(store, tape, g, l, &trace.input, false, None, &mut rng)?;
    let (x_cf, _) = model.layer_forward_with(store, tape, g, l, &trace.input, false, Some(counterfactual), &mut rng)?;
    let factual = probe.apply(tape, store, x_fact)?;
    let counterfactual = probe.apply(tape, store, x_cf)?;
    let effect = tape.sub(factual, counterfactual)?;
    Ok(LayerEffect {
        layer_index: l,
        effect,
        factual,
        counterfactual,
    })
}

/// `sum_l lambda_l * CE(effect_l, labels, mask)`.
///
/// `effects` and `lambdas` are paired positionally. With no effects the
/// result is a constant zero.
pub fn csa_loss(
    tape: &mut Tape,
    effects: &[Var],
    labels: &Arc<[usize]>,
    mask: &Arc<[usize]>,
    lambdas: &[f64],
) -> Result<Var> {
    if effects.len() != lambdas.len() {
        return Err(CsaError::invalid(format!(
            "{} effect terms but {} lambda values",
            effects.len(),
            lambdas.len()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| l.is_nan() || **l < 0.0) {
        return Err(CsaError::invalid(format!("lambda must be >= 0, got {bad}")));
    }
    let mut total: Option<Var> = None;
    for (&effect, &lambda) in effects.iter().zip(lambdas) {
        let ce = tape.cross_entropy(effect, Arc::clone(labels), Arc::clone(mask))?;
        let term = tape.scale(ce, lambda);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant_from(Vec::new(), vec![0.0])))
}

/// Final-layer effect: eval-mode logits of the factual model minus those of
/// a full forward pass with `overrides` applied and propagated onwards.
pub fn ablation_last(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    g: &Graph,
    overrides: &Overrides,
) -> Result<Var> {
    if overrides.is_empty() {
        return Err(CsaError::invalid(
            "last-layer ablation needs at least one intervened layer",
        ));
    }
    let mut rng = StepRng::new(0, 0);
    let factual = model.forward_with(store, tape, g, false, &Overrides::new(), &mut rng)?;
    let counterfactual = model.forward_with(store, tape, g, false, overrides, &mut rng)?;
    tape.sub(factual.logits, counterfactual.logits)
}

/// Dummy attention on every attention layer.
pub fn pure_overrides(model: &Model, g: &Graph) -> Result<Overrides> {
    if !model.is_attention() {
        return Err(CsaError::invalid(format!(
            "pure ablation needs an attention model, got {}",
            model.kind()
        )));
    }
    Ok((0..model.num_layers())
        .filter_map(|l| model.layer_heads(l).map(|h| (l, AttentionMap::uniform(g, h))))
        .collect())
}

/// Forward pass with all attention replaced by dummy weights.
pub fn ablation_pure(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    g: &Graph,
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput> {
    let overrides = pure_overrides(model, g)?;
    model.forward_with(store, tape, g, train, &overrides, rng)
}
