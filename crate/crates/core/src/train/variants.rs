//! Training variants: what is added to the standard classification loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;

use crate::csa::{
    ablation_last, csa_loss, layer_effect, make_counterfactual, pure_overrides, CounterfactualScheme, HistoricalBuffer,
    LayerProbe,
};
use crate::error::{CsaError, Result};
use crate::graph::Graph;
use crate::models::{ForwardOutput, LayerTrace, Model, Overrides};
use crate::tensor::{ParamStore, Tape, Var};

/// Settings shared by all variant factories.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantOptions {
    /// Weight of every causal term.
    pub lambda: f64,
    /// Layers whose attention is intervened on.
    pub layers: Vec<usize>,
    pub uniform_lo: f64,
    pub uniform_hi: f64,
    /// Counterfactual used by the `last` variant.
    pub last_scheme: CounterfactualScheme,
}

impl Default for VariantOptions {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            layers: vec![0],
            uniform_lo: 0.0,
            uniform_hi: 1.0,
            last_scheme: CounterfactualScheme::Identity,
        }
    }
}

/// Borrowed state of one training step, handed to [`TrainingVariant::causal_term`].
pub struct StepContext<'a> {
    pub tape: &'a mut Tape,
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub graph: &'a Graph,
    /// The train-mode forward pass whose logits feed the classification loss.
    pub output: &'a ForwardOutput,
    pub labels: &'a Arc<[usize]>,
    pub mask: &'a Arc<[usize]>,
    /// Stream reserved for counterfactual sampling.
    pub rng: &'a mut dyn RngCore,
}

/// A training objective, selected by name at run time.
///
/// A fresh instance is created per run, so implementations may keep
/// per-run state such as probes or a historical attention buffer.
pub trait TrainingVariant: Send {
    fn name(&self) -> &'static str;

    /// Called once before the first epoch; may append parameters to the model.
    fn prepare(&mut self, _model: &mut Model, _g: &Graph, _rng: &mut dyn RngCore) -> Result<()> {
        Ok(())
    }

    /// Attention overrides applied to every forward pass, training and evaluation alike.
    fn overrides(&self, _model: &Model, _g: &Graph) -> Result<Overrides> {
        Ok(Overrides::new())
    }

    /// The weighted causal loss term, if the variant has one.
    fn causal_term(&mut self, _ctx: StepContext<'_>) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Called after the optimizer step with the traces of that step's forward pass.
    fn after_step(&mut self, _traces: &[LayerTrace]) {}

    /// Attention recorded for the historical counterfactual, if the variant keeps one.
    fn history(&self) -> Option<&HistoricalBuffer> {
        None
    }
}

fn check_layers(model: &Model, layers: &[usize], what: &str) -> Result<()> {
    if !model.is_attention() {
        return Err(CsaError::invalid(format!(
            "{what} needs an attention model, got {}",
            model.kind()
        )));
    }
    if layers.is_empty() {
        return Err(CsaError::invalid(format!("{what} needs at least one supervised layer")));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= model.num_layers()) {
        return Err(CsaError::invalid(format!(
            "{what}: layer {l} out of range for {} layers",
            model.num_layers()
        )));
    }
    Ok(())
}

fn record_history(history: &mut HistoricalBuffer, layers: &[usize], traces: &[LayerTrace]) {
    for &l in layers {
        if let Some(map) = traces.get(l).and_then(|t| t.attention.clone()) {
            history.record(l, map);
        }
    }
}

struct Vanilla;

impl TrainingVariant for Vanilla {
    fn name(&self) -> &'static str {
        "none"
    }
}

struct Pure;

impl TrainingVariant for Pure {
    fn name(&self) -> &'static str {
        "pure"
    }

    fn prepare(&mut self, model: &mut Model, _g: &Graph, _rng: &mut dyn RngCore) -> Result<()> {
        check_layers(model, &[0], "pure ablation")
    }

    fn overrides(&self, model: &Model, g: &Graph) -> Result<Overrides> {
        pure_overrides(model, g)
    }
}

/// Per-layer effect supervision with probes.
struct CausalSupervision {
    name: &'static str,
    scheme: CounterfactualScheme,
    lambda: f64,
    layers: Vec<usize>,
    probes: Vec<LayerProbe>,
    history: HistoricalBuffer,
}

impl TrainingVariant for CausalSupervision {
    fn name(&self) -> &'static str {
        self.name
    }

    fn prepare(&mut self, model: &mut Model, _g: &Graph, rng: &mut dyn RngCore) -> Result<()> {
        check_layers(model, &self.layers, self.name)?;
        self.probes = self
            .layers
            .iter()
            .map(|&l| LayerProbe::new(model, l, rng))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn causal_term(&mut self, ctx: StepContext<'_>) -> Result<Option<Var>> {
        let mut effects = Vec::with_capacity(self.probes.len());
        for probe in &self.probes {
            let trace = &ctx.output.traces[probe.layer_index];
            let factual = trace
                .attention
                .as_ref()
                .ok_or_else(|| CsaError::invalid("supervised layer has no attention"))?;
            let cf = make_counterfactual(
                &self.scheme,
                ctx.graph,
                probe.layer_index,
                factual,
                &self.history,
                ctx.rng,
            )?;
            effects.push(layer_effect(ctx.tape, ctx.model, ctx.store, ctx.graph, trace, &cf, probe)?.effect);
        }
        let lambdas = vec![self.lambda; effects.len()];
        csa_loss(ctx.tape, &effects, ctx.labels, ctx.mask, &lambdas).map(Some)
    }

    fn after_step(&mut self, traces: &[LayerTrace]) {
        record_history(&mut self.history, &self.layers, traces);
    }

    fn history(&self) -> Option<&HistoricalBuffer> {
        Some(&self.history)
    }
}

/// Effect read from final logits after propagating the intervention.
struct LastLayer {
    scheme: CounterfactualScheme,
    lambda: f64,
    layers: Vec<usize>,
    history: HistoricalBuffer,
}

impl TrainingVariant for LastLayer {
    fn name(&self) -> &'static str {
        "last"
    }

    fn prepare(&mut self, model: &mut Model, _g: &Graph, _rng: &mut dyn RngCore) -> Result<()> {
        check_layers(model, &self.layers, "last")
    }

    fn causal_term(&mut self, ctx: StepContext<'_>) -> Result<Option<Var>> {
        let mut overrides = Overrides::new();
        for &l in &self.layers {
            let factual = ctx.output.traces[l]
                .attention
                .as_ref()
                .ok_or_else(|| CsaError::invalid("intervened layer has no attention"))?;
            overrides.insert(
                l,
                make_counterfactual(&self.scheme, ctx.graph, l, factual, &self.history, ctx.rng)?,
            );
        }
        let effect = ablation_last(ctx.tape, ctx.model, ctx.store, ctx.graph, &overrides)?;
        csa_loss(ctx.tape, &[effect], ctx.labels, ctx.mask, &[self.lambda]).map(Some)
    }

    fn after_step(&mut self, traces: &[LayerTrace]) {
        record_history(&mut self.history, &self.layers, traces);
    }

    fn history(&self) -> Option<&HistoricalBuffer> {
        Some(&self.history)
    }
}

type Factory = fn(&VariantOptions) -> Result<Box<dyn TrainingVariant>>;

fn check_lambda(o: &VariantOptions) -> Result<()> {
    if o.lambda.is_nan() || o.lambda < 0.0 {
        return Err(CsaError::invalid(format!("lambda must be >= 0, got {}", o.lambda)));
    }
    Ok(())
}

fn supervised(
    name: &'static str,
    scheme: CounterfactualScheme,
    o: &VariantOptions,
) -> Result<Box<dyn TrainingVariant>> {
    check_lambda(o)?;
    // fail on bad scheme settings before training starts
    scheme.generator()?;
    Ok(Box::new(CausalSupervision {
        name,
        scheme,
        lambda: o.lambda,
        layers: o.layers.clone(),
        probes: Vec::new(),
        history: HistoricalBuffer::new(),
    }))
}

/// Name-keyed training variant factories.
pub struct VariantRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl VariantRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `none`, `dummy`, `csa1` (uniform), `csa2` (identity),
    /// `csa3` (historical), `last` and `pure`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("none", |_| Ok(Box::new(Vanilla)));
        r.register("pure", |_| Ok(Box::new(Pure)));
        r.register("dummy", |o| supervised("dummy", CounterfactualScheme::Dummy, o));
        r.register("csa1", |o| {
            let scheme = CounterfactualScheme::UniformRandom {
                lo: o.uniform_lo,
                hi: o.uniform_hi,
            };
            supervised("csa1", scheme, o)
        });
        r.register("csa2", |o| supervised("csa2", CounterfactualScheme::Identity, o));
        r.register("csa3", |o| supervised("csa3", CounterfactualScheme::Historical, o));
        r.register("last", |o| {
            check_lambda(o)?;
            o.last_scheme.generator()?;
            Ok(Box::new(LastLayer {
                scheme: o.last_scheme.clone(),
                lambda: o.lambda,
                layers: o.layers.clone(),
                history: HistoricalBuffer::new(),
            }))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, name: &str, options: &VariantOptions) -> Result<Box<dyn TrainingVariant>> {
        let factory = self.factories.get(name).ok_or_else(|| CsaError::UnknownName {
            kind: "training variant",
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(options)
    }
}

/// Whether a variant uses `lambda` at all.
pub fn uses_lambda(name: &str) -> bool {
    !matches!(name, "none" | "pure")
}
