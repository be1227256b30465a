//! GAT, GCN and MLP node classifiers on the tape.
//!
//! Every forward pass records one [`LayerTrace`] per layer. GAT layers accept
//! an optional attention override, which replaces the learned weights by
//! constants on the tape so no gradient reaches the override.

mod attention;
pub mod checkpoint;
#[cfg(test)]
mod tests;

pub use attention::{AttentionMap, ROW_SUM_TOL};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{CsaError, Result};
use crate::graph::Graph;
use crate::tensor::{CsrMatrix, ParamId, ParamStore, Tape, Tensor, Var};

/// Attention overrides keyed by layer index.
pub type Overrides = BTreeMap<usize, AttentionMap>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gat,
    Gcn,
    Mlp,
}

impl FromStr for ModelKind {
    type Err = CsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(Self::Gat),
            "gcn" => Ok(Self::Gcn),
            "mlp" => Ok(Self::Mlp),
            _ => Err(CsaError::UnknownName {
                kind: "model",
                name: s.to_string(),
                available: "gat, gcn, mlp".to_string(),
            }),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gat => "gat",
            Self::Gcn => "gcn",
            Self::Mlp => "mlp",
        })
    }
}

/// Architecture hyperparameters.
///
/// GCN and MLP hidden layers are `hidden * heads` wide so all three kinds
/// have the same hidden width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub out_heads: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gat,
            layers: 2,
            hidden: 8,
            heads: 8,
            out_heads: 1,
            dropout: 0.6,
            attn_dropout: 0.6,
            slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.out_heads == 0 {
            return Err(CsaError::invalid(
                "layers, hidden, heads and out_heads must all be at least 1",
            ));
        }
        for (what, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(CsaError::invalid(format!("{what} must be in [0, 1), got {p}")));
            }
        }
        if self.slope < 0.0 {
            return Err(CsaError::invalid(format!("slope must be >= 0, got {}", self.slope)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMerge {
    Concat,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Self::Elu => tape.elu(x, 1.0),
            Self::Relu => tape.relu(x),
            Self::Identity => x,
        }
    }
}

/// One multi-head GAT layer. `w[h]` is `[in_dim x out_dim]`, `a[h]` is
/// `[2 out_dim x 1]` with the destination half first.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub slope: f64,
    pub merge: HeadMerge,
    pub activation: Activation,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub w: Vec<ParamId>,
    pub a: Vec<ParamId>,
}

impl GatLayerParams {
    pub fn output_dim(&self) -> usize {
        match self.merge {
            HeadMerge::Concat => self.heads * self.out_dim,
            HeadMerge::Average => self.out_dim,
        }
    }
}

/// A GCN (`propagate`) or plain linear layer with weight `[in_dim x out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub w: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Gat(GatLayerParams),
    Gcn(DenseLayer),
    Linear(DenseLayer),
}

impl Layer {
    pub fn output_dim(&self) -> usize {
        match self {
            Self::Gat(p) => p.output_dim(),
            Self::Gcn(d) | Self::Linear(d) => d.out_dim,
        }
    }

    pub fn as_gat(&self) -> Option<&GatLayerParams> {
        match self {
            Self::Gat(p) => Some(p),
            _ => None,
        }
    }
}

/// Input of a layer: the raw (sparse, constant) node features or a tape value.
#[derive(Debug, Clone)]
pub enum LayerInput {
    Features(Arc<CsrMatrix>),
    Hidden(Var),
}

impl LayerInput {
    fn dropout(&self, tape: &mut Tape, p: f64, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(match self {
            Self::Features(x) if p > 0.0 => Self::Features(Arc::new(x.dropout(p, rng))),
            Self::Features(x) => Self::Features(Arc::clone(x)),
            Self::Hidden(v) => Self::Hidden(tape.dropout(*v, p, rng)?),
        })
    }

    /// `input . w`.
    fn project(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        match self {
            Self::Features(x) => tape.sparse_matmul(x, w),
            Self::Hidden(v) => tape.matmul(*v, w),
        }
    }

    fn rows(&self, tape: &Tape) -> usize {
        match self {
            Self::Features(x) => x.rows(),
            Self::Hidden(v) => tape.shape(*v).first().copied().unwrap_or(0),
        }
    }
}

/// What one layer saw and produced during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub input: LayerInput,
    pub output: Var,
    /// Factual attention (or the override, when one was applied); `None`
    /// for layers without attention.
    pub attention: Option<AttentionMap>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub traces: Vec<LayerTrace>,
}

fn glorot(rng: &mut dyn RngCore, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

fn check_rows(tape: &Tape, input: &LayerInput, g: &Graph) -> Result<()> {
    let rows = input.rows(tape);
    if rows != g.num_nodes() {
        return Err(CsaError::shape("layer input", &[rows], &[g.num_nodes()]));
    }
    Ok(())
}

/// Unnormalised scores of one head from the projected features `wh`.
fn head_scores(tape: &mut Tape, g: &Graph, wh: Var, a: Var, slope: f64) -> Result<Var> {
    let h_dst = tape.gather_rows(wh, Arc::clone(g.dst()))?;
    let h_src = tape.gather_rows(wh, Arc::clone(g.src()))?;
    let pair = tape.concat_cols(&[h_dst, h_src])?;
    let raw = tape.matmul(pair, a)?;
    tape.leaky_relu(raw, slope)
}

/// Per-head edge scores `LeakyReLU(a^T [W h_i || W h_j])` for every edge `j -> i`.
pub fn gat_scores(
    tape: &mut Tape,
    params: &GatLayerParams,
    store: &ParamStore,
    g: &Graph,
    input: &LayerInput,
) -> Result<Vec<Var>> {
    check_rows(tape, input, g)?;
    (0..params.heads)
        .map(|h| {
            let w = tape.param(store, params.w[h]);
            let wh = input.project(tape, w)?;
            let a = tape.param(store, params.a[h]);
            head_scores(tape, g, wh, a, params.slope)
        })
        .collect()
}

/// One GAT layer. Returns the merged, activated output and the attention
/// used: the factual softmax weights, or a copy of `attention_override`.
///
/// Dropout on the input and on the factual attention is applied only when
/// `train` is set. Override weights enter the tape as constants and are never
/// dropped out.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer_forward(
    tape: &mut Tape,
    params: &GatLayerParams,
    store: &ParamStore,
    g: &Graph,
    input: &LayerInput,
    train: bool,
    attention_override: Option<&AttentionMap>,
    rng: &mut dyn RngCore,
) -> Result<(Var, AttentionMap)> {
    check_rows(tape, input, g)?;
    if let Some(o) = attention_override {
        if o.num_heads() != params.heads {
            return Err(CsaError::invalid(format!(
                "attention override has {} heads, layer has {}",
                o.num_heads(),
                params.heads
            )));
        }
        o.validate(g)?;
    }
    let input = if train {
        input.dropout(tape, params.dropout, rng)?
    } else {
        input.clone()
    };
    let n = g.num_nodes();
    let e = g.num_edges();
    let mut outputs = Vec::with_capacity(params.heads);
    let mut maps = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let w = tape.param(store, params.w[h]);
        let wh = input.project(tape, w)?;
        let alpha = match attention_override {
            Some(o) => {
                maps.push(o.head(h).to_vec());
                tape.constant_from(vec![e, 1], o.head(h).to_vec())
            }
            None => {
                let a = tape.param(store, params.a[h]);
                let scores = head_scores(tape, g, wh, a, params.slope)?;
                let alpha = tape.segment_softmax(scores, Arc::clone(g.dst()), n)?;
                maps.push(tape.value(alpha).to_vec());
                if train {
                    tape.dropout(alpha, params.attn_dropout, rng)?
                } else {
                    alpha
                }
            }
        };
        let values = tape.gather_rows(wh, Arc::clone(g.src()))?;
        outputs.push(tape.segment_weighted_sum(alpha, values, Arc::clone(g.dst()), n)?);
    }
    let merged = match params.merge {
        HeadMerge::Concat => tape.concat_cols(&outputs)?,
        HeadMerge::Average => {
            let mut acc = outputs[0];
            for &o in &outputs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / params.heads as f64)
        }
    };
    let out = params.activation.apply(tape, merged);
    Ok((out, AttentionMap::new(maps)))
}

/// Symmetric GCN edge weights `1 / sqrt(deg(i) deg(j))`, self-loops counted.
pub fn gcn_edge_weights(g: &Graph) -> Vec<f64> {
    g.edges()
        .map(|(s, d)| 1.0 / ((g.in_degree(s) * g.in_degree(d)) as f64).sqrt())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn dense_layer_forward(
    tape: &mut Tape,
    layer: &DenseLayer,
    propagate: bool,
    store: &ParamStore,
    g: &Graph,
    input: &LayerInput,
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    check_rows(tape, input, g)?;
    let input = if train {
        input.dropout(tape, layer.dropout, rng)?
    } else {
        input.clone()
    };
    let w = tape.param(store, layer.w);
    let mut h = input.project(tape, w)?;
    if propagate {
        let weights = tape.constant_from(vec![g.num_edges(), 1], gcn_edge_weights(g));
        let values = tape.gather_rows(h, Arc::clone(g.src()))?;
        h = tape.segment_weighted_sum(weights, values, Arc::clone(g.dst()), g.num_nodes())?;
    }
    Ok(layer.activation.apply(tape, h))
}

/// A node classifier together with its parameter store.
///
/// Extra tensors (such as layer probes) may be appended to the store; they
/// never affect the forward pass.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    in_dim: usize,
    classes: usize,
    layers: Vec<Layer>,
    params: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, in_dim: usize, classes: usize, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 || classes == 0 {
            return Err(CsaError::invalid(
                "model needs at least one input feature and one class",
            ));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers);
        let mut d_in = in_dim;
        for l in 0..config.layers {
            let last = l + 1 == config.layers;
            let layer = match config.kind {
                ModelKind::Gat => {
                    let (heads, out_dim, merge, activation) = if last {
                        (config.out_heads, classes, HeadMerge::Average, Activation::Identity)
                    } else {
                        (config.heads, config.hidden, HeadMerge::Concat, Activation::Elu)
                    };
                    let mut w = Vec::with_capacity(heads);
                    let mut a = Vec::with_capacity(heads);
                    for h in 0..heads {
                        w.push(params.add(format!("layer{l}.head{h}.w"), glorot(rng, d_in, out_dim)));
                        a.push(params.add(format!("layer{l}.head{h}.a"), glorot(rng, 2 * out_dim, 1)));
                    }
                    Layer::Gat(GatLayerParams {
                        in_dim: d_in,
                        out_dim,
                        heads,
                        slope: config.slope,
                        merge,
                        activation,
                        dropout: config.dropout,
                        attn_dropout: config.attn_dropout,
                        w,
                        a,
                    })
                }
                ModelKind::Gcn | ModelKind::Mlp => {
                    let (out_dim, activation) = if last {
                        (classes, Activation::Identity)
                    } else {
                        (config.hidden * config.heads, Activation::Relu)
                    };
                    let dense = DenseLayer {
                        in_dim: d_in,
                        out_dim,
                        activation,
                        dropout: config.dropout,
                        w: params.add(format!("layer{l}.w"), glorot(rng, d_in, out_dim)),
                    };
                    if config.kind == ModelKind::Gcn {
                        Layer::Gcn(dense)
                    } else {
                        Layer::Linear(dense)
                    }
                }
            };
            d_in = layer.output_dim();
            layers.push(layer);
        }
        Ok(Self {
            config: config.clone(),
            in_dim,
            classes,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_attention(&self) -> bool {
        self.config.kind == ModelKind::Gat
    }

    /// Width of layer `l`'s output.
    pub fn layer_output_dim(&self, l: usize) -> usize {
        self.layers[l].output_dim()
    }

    /// Head count of layer `l`, or `None` for layers without attention.
    pub fn layer_heads(&self, l: usize) -> Option<usize> {
        self.layers.get(l).and_then(Layer::as_gat).map(|p| p.heads)
    }

    /// Runs layer `l` alone using `store` for the parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        g: &Graph,
        l: usize,
        input: &LayerInput,
        train: bool,
        attention_override: Option<&AttentionMap>,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Option<AttentionMap>)> {
        let layer = self
            .layers
            .get(l)
            .ok_or_else(|| CsaError::invalid(format!("layer {l} out of range for {} layers", self.layers.len())))?;
        match layer {
            Layer::Gat(p) => {
                let (out, map) = gat_layer_forward(tape, p, store, g, input, train, attention_override, rng)?;
                Ok((out, Some(map)))
            }
            Layer::Gcn(d) | Layer::Linear(d) => {
                if attention_override.is_some() {
                    return Err(CsaError::invalid(format!(
                        "attention override on layer {l} of a {} model",
                        self.config.kind
                    )));
                }
                let propagate = matches!(layer, Layer::Gcn(_));
                Ok((
                    dense_layer_forward(tape, d, propagate, store, g, input, train, rng)?,
                    None,
                ))
            }
        }
    }

    /// Full forward pass using `store` for the parameters.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        g: &Graph,
        train: bool,
        overrides: &Overrides,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        if g.feature_dim() != self.in_dim {
            return Err(CsaError::shape("model input", &[g.feature_dim()], &[self.in_dim]));
        }
        if let Some((&l, _)) = overrides.iter().next_back() {
            if l >= self.layers.len() {
                return Err(CsaError::invalid(format!(
                    "attention override for layer {l}, model has {} layers",
                    self.layers.len()
                )));
            }
        }
        let mut input = LayerInput::Features(Arc::clone(g.sparse_features()));
        let mut traces = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (output, attention) =
                self.layer_forward_with(store, tape, g, l, &input, train, overrides.get(&l), rng)?;
            traces.push(LayerTrace {
                layer_index: l,
                input,
                output,
                attention,
            });
            input = LayerInput::Hidden(output);
        }
        let logits = traces.last().map(|t| t.output).expect("at least one layer");
        Ok(ForwardOutput { logits, traces })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        g: &Graph,
        train: bool,
        overrides: &Overrides,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        self.forward_with(&self.params, tape, g, train, overrides, rng)
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn predict(&self, g: &Graph, overrides: &Overrides) -> Result<Tensor> {
        let mut tape = Tape::new();
        // eval mode draws no random numbers
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut tape, g, false, overrides, &mut rng)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Ids of the architecture's own parameters in creation order, excluding
    /// anything appended to the store later.
    pub fn model_param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|layer| match layer {
            Layer::Gat(p) => p.w.iter().zip(&p.a).flat_map(|(&w, &a)| [w, a]).collect::<Vec<_>>(),
            Layer::Gcn(d) | Layer::Linear(d) => vec![d.w],
        })
    }
}
