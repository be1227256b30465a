//! Causal supervision of attention.
//!
//! A counterfactual generator produces the attention map imposed by
//! `do(A = a*)`. The effect of the learned attention at a layer is the
//! difference between probe logits of the factual layer output and of the
//! same layer recomputed under the counterfactual map. The causal loss
//! classifies those effect logits.

mod effect;
#[cfg(test)]
mod tests;

pub use effect::{ablation_last, ablation_pure, csa_loss, layer_effect, pure_overrides, LayerEffect, LayerProbe};

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{CsaError, Result};
use crate::graph::Graph;
use crate::models::AttentionMap;

/// Counterfactual attention selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CounterfactualScheme {
    /// `1 / |N(i)|` on every incoming edge.
    Dummy,
    /// Independent `U(lo, hi)` draws per edge and head, normalised per node.
    UniformRandom {
        #[serde(default)]
        lo: f64,
        #[serde(default = "one")]
        hi: f64,
    },
    /// All weight on the self-loop.
    Identity,
    /// The factual map recorded at the previous training iteration.
    Historical,
}

fn one() -> f64 {
    1.0
}

impl CounterfactualScheme {
    /// Registry name of the generator implementing this scheme.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dummy => "dummy",
            Self::UniformRandom { .. } => "uniform",
            Self::Identity => "identity",
            Self::Historical => "historical",
        }
    }

    pub fn options(&self) -> SchemeOptions {
        match *self {
            Self::UniformRandom { lo, hi } => SchemeOptions {
                lo,
                hi,
                ..SchemeOptions::default()
            },
            _ => SchemeOptions::default(),
        }
    }

    pub fn generator(&self) -> Result<Box<dyn CounterfactualGenerator>> {
        SchemeRegistry::builtin().create(self.name(), &self.options())
    }
}

impl fmt::Display for CounterfactualScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UniformRandom { lo, hi } => write!(f, "uniform({lo}, {hi})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Construction options shared by all generator factories.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOptions {
    pub lo: f64,
    pub hi: f64,
    /// Whether the historical scheme falls back to dummy attention when no
    /// map has been recorded yet.
    pub historical_fallback: bool,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            historical_fallback: true,
        }
    }
}

/// Detached factual attention maps from the previous iteration, per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoricalBuffer {
    maps: BTreeMap<usize, AttentionMap>,
}

impl HistoricalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, layer: usize) -> Option<&AttentionMap> {
        self.maps.get(&layer)
    }

    pub fn record(&mut self, layer: usize, map: AttentionMap) {
        self.maps.insert(layer, map);
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn clear(&mut self) {
        self.maps.clear();
    }
}

/// Everything a generator may look at.
#[derive(Debug, Clone, Copy)]
pub struct CounterfactualContext<'a> {
    pub graph: &'a Graph,
    pub layer: usize,
    pub factual: &'a AttentionMap,
    pub history: &'a HistoricalBuffer,
}

/// Produces the counterfactual attention for one layer.
///
/// Output maps have as many heads as the factual map and satisfy the
/// per-destination normalisation.
pub trait CounterfactualGenerator: Send + Sync {
    fn name(&self) -> &'static str;

    fn generate(&self, ctx: &CounterfactualContext<'_>, rng: &mut dyn RngCore) -> Result<AttentionMap>;
}

struct DummyGenerator;

impl CounterfactualGenerator for DummyGenerator {
    fn name(&self) -> &'static str {
        "dummy"
    }

    fn generate(&self, ctx: &CounterfactualContext<'_>, _rng: &mut dyn RngCore) -> Result<AttentionMap> {
        Ok(AttentionMap::uniform(ctx.graph, ctx.factual.num_heads()))
    }
}

struct UniformGenerator {
    lo: f64,
    hi: f64,
}

impl CounterfactualGenerator for UniformGenerator {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn generate(&self, ctx: &CounterfactualContext<'_>, rng: &mut dyn RngCore) -> Result<AttentionMap> {
        let e = ctx.graph.num_edges();
        let heads = (0..ctx.factual.num_heads())
            .map(|_| (0..e).map(|_| rng.gen_range(self.lo..self.hi)).collect())
            .collect();
        Ok(AttentionMap::new(heads).normalized(ctx.graph))
    }
}

struct IdentityGenerator;

impl CounterfactualGenerator for IdentityGenerator {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn generate(&self, ctx: &CounterfactualContext<'_>, _rng: &mut dyn RngCore) -> Result<AttentionMap> {
        Ok(AttentionMap::identity(ctx.graph, ctx.factual.num_heads()))
    }
}

struct HistoricalGenerator {
    fallback: bool,
}

impl CounterfactualGenerator for HistoricalGenerator {
    fn name(&self) -> &'static str {
        "historical"
    }

    fn generate(&self, ctx: &CounterfactualContext<'_>, rng: &mut dyn RngCore) -> Result<AttentionMap> {
        match ctx.history.get(ctx.layer) {
            Some(map) => {
                if map.num_heads() != ctx.factual.num_heads() {
                    return Err(CsaError::invalid(format!(
                        "historical map for layer {} has {} heads, layer has {}",
                        ctx.layer,
                        map.num_heads(),
                        ctx.factual.num_heads()
                    )));
                }
                map.validate(ctx.graph)?;
                Ok(map.clone())
            }
            None if self.fallback => DummyGenerator.generate(ctx, rng),
            None => Err(CsaError::invalid(format!(
                "no historical attention recorded for layer {} and fallback is disabled",
                ctx.layer
            ))),
        }
    }
}

type Factory = fn(&SchemeOptions) -> Result<Box<dyn CounterfactualGenerator>>;

/// Name-keyed counterfactual generator factories.
pub struct SchemeRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// The dummy, uniform, identity and historical generators.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("dummy", |_| Ok(Box::new(DummyGenerator)));
        r.register("uniform", |o| {
            if o.lo.is_nan() || o.lo < 0.0 || o.lo >= o.hi || !o.hi.is_finite() {
                return Err(CsaError::invalid(format!(
                    "uniform scheme needs 0 <= lo < hi, got lo={} hi={}",
                    o.lo, o.hi
                )));
            }
            Ok(Box::new(UniformGenerator { lo: o.lo, hi: o.hi }))
        });
        r.register("identity", |_| Ok(Box::new(IdentityGenerator)));
        r.register("historical", |o| {
            Ok(Box::new(HistoricalGenerator {
                fallback: o.historical_fallback,
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

    pub fn create(&self, name: &str, options: &SchemeOptions) -> Result<Box<dyn CounterfactualGenerator>> {
        let factory = self.factories.get(name).ok_or_else(|| CsaError::UnknownName {
            kind: "counterfactual scheme",
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(options)
    }
}

/// Counterfactual map for `layer` under `scheme`.
pub fn make_counterfactual(
    scheme: &CounterfactualScheme,
    g: &Graph,
    layer: usize,
    factual: &AttentionMap,
    history: &HistoricalBuffer,
    rng: &mut dyn RngCore,
) -> Result<AttentionMap> {
    let ctx = CounterfactualContext {
        graph: g,
        layer,
        factual,
        history,
    };
    scheme.generator()?.generate(&ctx, rng)
}
