use std::path::Path;

use rand::rngs::mock::StepRng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use super::output::{write_csv, write_file, write_json, Fixed6, SUMMARY_VERSION};
use super::{DatasetSource, ExperimentConfig, PerturbationKind};
use crate::error::{CsaError, Result};
use crate::graph::{synthetic_planted, Graph};
use crate::models::{AttentionMap, ModelKind};
use crate::tensor::Tape;
use crate::train::{
    mean_std, multi_seed_run, run_seed, uses_lambda, MultiSeedResult, RunHistory, TrainConfig, VariantRegistry,
};

fn fixed6<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    Fixed6(*x).serialize(s)
}

fn fixed6_vec<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(xs.iter().map(|&x| Fixed6(x)))
}

fn fixed6_opt<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => Fixed6(*v).serialize(s),
        None => s.serialize_none(),
    }
}

fn text(x: f64) -> String {
    Fixed6(x).text()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Test accuracy in percent at the best-validation epoch.
    #[serde(serialize_with = "fixed6")]
    pub test_acc: f64,
    #[serde(serialize_with = "fixed6")]
    pub val_acc: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

/// Mean and population std of test accuracy, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    #[serde(serialize_with = "fixed6")]
    pub mean: f64,
    #[serde(serialize_with = "fixed6")]
    pub std: f64,
    pub runs: Vec<SeedSummary>,
}

impl VariantSummary {
    fn from_result(r: &MultiSeedResult) -> Self {
        Self {
            variant: r.variant.clone(),
            mean: 100.0 * r.test_mean,
            std: 100.0 * r.test_std,
            runs: r
                .runs
                .iter()
                .map(|h| SeedSummary {
                    seed: h.seed,
                    test_acc: 100.0 * h.test_acc(),
                    val_acc: 100.0 * h.best().val_acc,
                    best_epoch: h.best_epoch,
                    epochs: h.epochs.len(),
                    stopped_early: h.stopped_early,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub version: u32,
    pub command: &'static str,
    pub dataset: String,
    pub nodes: usize,
    pub model: String,
    #[serde(serialize_with = "fixed6")]
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl RunReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

fn write_histories(out: &Path, runs: &[RunHistory]) -> Result<()> {
    let dir = out.join("histories");
    for h in runs {
        write_file(
            &dir,
            &format!("{}_seed{}.jsonl", h.variant, h.seed),
            h.to_jsonl()?.as_bytes(),
        )?;
    }
    Ok(())
}

/// Trains every configured variant on every seed.
///
/// Writes `summary.json` and `histories/<variant>_seed<seed>.jsonl` under `out`.
pub fn cmd_run(cfg: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<RunReport> {
    let g = cfg.load_graph(base_dir)?;
    let train = cfg.effective_train();
    let mut variants = Vec::new();
    for v in &cfg.variants {
        let r = multi_seed_run(&g, cfg.ratios, &cfg.model, &train, v, &cfg.seeds)?;
        write_histories(out, &r.runs)?;
        variants.push(VariantSummary::from_result(&r));
    }
    let report = RunReport {
        version: SUMMARY_VERSION,
        command: "run",
        dataset: g.name().to_string(),
        nodes: g.num_nodes(),
        model: cfg.model.kind.to_string(),
        lambda: train.lambda,
        seeds: cfg.seeds.clone(),
        variants,
    };
    write_json(out, "summary.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaPoint {
    #[serde(serialize_with = "fixed6")]
    pub lambda: f64,
    #[serde(serialize_with = "fixed6")]
    pub mean_acc: f64,
    #[serde(serialize_with = "fixed6")]
    pub std_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub version: u32,
    pub command: &'static str,
    pub dataset: String,
    pub variant: String,
    pub points: Vec<LambdaPoint>,
    /// First λ reaching the highest mean accuracy.
    #[serde(serialize_with = "fixed6")]
    pub best_lambda: f64,
}

/// Accuracy of the first λ-weighted variant in the config for each of `values`.
///
/// Writes `lambda_sweep.csv` (`lambda,mean_acc,std_acc`, percent) and `lambda_sweep.json`.
pub fn cmd_sweep_lambda(cfg: &ExperimentConfig, base_dir: &Path, out: &Path, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(CsaError::invalid("no lambda values to sweep"));
    }
    if let Some(l) = values.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(CsaError::invalid(format!("swept lambda {l} must be finite and >= 0")));
    }
    let variant = cfg
        .variants
        .iter()
        .find(|v| uses_lambda(v))
        .ok_or_else(|| CsaError::invalid("sweep-lambda needs a variant that uses lambda"))?;
    let g = cfg.load_graph(base_dir)?;
    let mut points = Vec::new();
    for &lambda in values {
        let train = TrainConfig {
            lambda,
            ..cfg.effective_train()
        };
        let r = multi_seed_run(&g, cfg.ratios, &cfg.model, &train, variant, &cfg.seeds)?;
        points.push(LambdaPoint {
            lambda,
            mean_acc: 100.0 * r.test_mean,
            std_acc: 100.0 * r.test_std,
        });
    }
    let best = points
        .iter()
        .fold(&points[0], |b, p| if p.mean_acc > b.mean_acc { p } else { b });
    let report = SweepReport {
        version: SUMMARY_VERSION,
        command: "sweep-lambda",
        dataset: g.name().to_string(),
        variant: variant.clone(),
        best_lambda: best.lambda,
        points,
    };
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| vec![text(p.lambda), text(p.mean_acc), text(p.std_acc)])
        .collect();
    write_csv(out, "lambda_sweep.csv", &["lambda", "mean_acc", "std_acc"], &rows)?;
    write_json(out, "lambda_sweep.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub kind: PerturbationKind,
    #[serde(serialize_with = "fixed6")]
    pub fraction: f64,
    pub variant: String,
    #[serde(serialize_with = "fixed6")]
    pub mean: f64,
    #[serde(serialize_with = "fixed6")]
    pub std: f64,
}

/// Variant minus vanilla accuracy at the smallest and largest fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessGap {
    pub kind: PerturbationKind,
    pub variant: String,
    #[serde(serialize_with = "fixed6")]
    pub gap_low: f64,
    #[serde(serialize_with = "fixed6")]
    pub gap_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub version: u32,
    pub command: &'static str,
    pub dataset: String,
    pub rows: Vec<RobustnessRow>,
    pub gaps: Vec<RobustnessGap>,
}

impl RobustnessReport {
    pub fn row(&self, kind: PerturbationKind, fraction: f64, variant: &str) -> Option<&RobustnessRow> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && r.fraction == fraction && r.variant == variant)
    }
}

/// Seed for the perturbation of one trial, kept apart from the split and init streams.
fn perturbation_seed(seed: u64) -> u64 {
    seed ^ 0x7065_7274_7572_6221
}

/// Accuracy under input noise for every kind, fraction and variant.
///
/// Each seed perturbs the clean graph once, then splits and trains on the
/// noisy copy; all variants see the same noisy graph for a given seed.
/// Writes `robustness.csv` (`kind,fraction,variant,mean,std`) and `robustness.json`.
pub fn cmd_robustness(cfg: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<RobustnessReport> {
    let spec = &cfg.perturbation;
    if spec.kinds.is_empty() || spec.fractions.is_empty() {
        return Err(CsaError::invalid(
            "robustness needs at least one perturbation kind and fraction",
        ));
    }
    let g = cfg.load_graph(base_dir)?;
    let train = cfg.effective_train();
    let mut rows = Vec::new();
    for &kind in &spec.kinds {
        for &fraction in &spec.fractions {
            let graphs: Vec<Graph> = cfg
                .seeds
                .par_iter()
                .map(|&s| kind.apply(&g, fraction, perturbation_seed(s)))
                .collect::<Result<_>>()?;
            for v in &cfg.variants {
                let accs: Vec<f64> = cfg
                    .seeds
                    .par_iter()
                    .zip(&graphs)
                    .map(|(&s, pg)| run_seed(pg, cfg.ratios, &cfg.model, &train, v, s).map(|r| r.history.test_acc()))
                    .collect::<Result<_>>()?;
                let (mean, std) = mean_std(&accs);
                rows.push(RobustnessRow {
                    kind,
                    fraction,
                    variant: v.clone(),
                    mean: 100.0 * mean,
                    std: 100.0 * std,
                });
            }
        }
    }
    let lo = spec.fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spec.fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut report = RobustnessReport {
        version: SUMMARY_VERSION,
        command: "robustness",
        dataset: g.name().to_string(),
        rows,
        gaps: Vec::new(),
    };
    if cfg.variants.iter().any(|v| v == "none") {
        for &kind in &spec.kinds {
            for v in cfg.variants.iter().filter(|v| *v != "none") {
                let mean = |f: f64, name: &str| report.row(kind, f, name).map_or(f64::NAN, |r| r.mean);
                report.gaps.push(RobustnessGap {
                    kind,
                    variant: v.clone(),
                    gap_low: mean(lo, v) - mean(lo, "none"),
                    gap_high: mean(hi, v) - mean(hi, "none"),
                });
            }
        }
    }
    let csv_rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.kind.name().to_string(),
                text(r.fraction),
                r.variant.clone(),
                text(r.mean),
                text(r.std),
            ]
        })
        .collect();
    write_csv(
        out,
        "robustness.csv",
        &["kind", "fraction", "variant", "mean", "std"],
        &csv_rows,
    )?;
    write_json(out, "robustness.json", &report)?;
    Ok(report)
}

/// Seed-averaged MAD after `epoch` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MadCurvePoint {
    pub epoch: usize,
    pub variant: String,
    #[serde(serialize_with = "fixed6")]
    pub mad_all: f64,
    #[serde(serialize_with = "fixed6")]
    pub mad_interclass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MadFinal {
    pub variant: String,
    /// Mean over seeds of each run's last recorded MAD.
    #[serde(serialize_with = "fixed6")]
    pub mad_all: f64,
    #[serde(serialize_with = "fixed6")]
    pub mad_interclass: f64,
    #[serde(serialize_with = "fixed6_vec")]
    pub interclass_per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MadReport {
    pub version: u32,
    pub command: &'static str,
    pub dataset: String,
    pub curve: Vec<MadCurvePoint>,
    #[serde(rename = "final")]
    pub finals: Vec<MadFinal>,
}

impl MadReport {
    pub fn final_of(&self, variant: &str) -> Option<&MadFinal> {
        self.finals.iter().find(|f| f.variant == variant)
    }
}

/// MAD of the evaluation logits over training for every variant.
///
/// Epoch 0 is the initialised model. Runs stop early at different epochs,
/// so the averaged curve covers the epochs every seed reached.
/// Writes `mad.csv` (`epoch,variant,mad_all,mad_interclass`) and `mad.json`.
pub fn cmd_mad(cfg: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<MadReport> {
    let g = cfg.load_graph(base_dir)?;
    let train = TrainConfig {
        track_mad: true,
        ..cfg.effective_train()
    };
    let mut curve = Vec::new();
    let mut finals = Vec::new();
    for v in &cfg.variants {
        let r = multi_seed_run(&g, cfg.ratios, &cfg.model, &train, v, &cfg.seeds)?;
        let len = r.runs.iter().map(|h| h.mad.len()).min().unwrap_or(0);
        let n = r.runs.len() as f64;
        for epoch in 0..len {
            let sum = |f: fn(&crate::train::MadPoint) -> f64| r.runs.iter().map(|h| f(&h.mad[epoch])).sum::<f64>() / n;
            curve.push(MadCurvePoint {
                epoch,
                variant: v.clone(),
                mad_all: sum(|p| p.all),
                mad_interclass: sum(|p| p.interclass),
            });
        }
        let last = |f: fn(&crate::train::MadPoint) -> f64| -> Vec<f64> {
            r.runs.iter().map(|h| h.mad.last().map_or(f64::NAN, f)).collect()
        };
        let interclass_per_seed = last(|p| p.interclass);
        finals.push(MadFinal {
            variant: v.clone(),
            mad_all: mean_std(&last(|p| p.all)).0,
            mad_interclass: mean_std(&interclass_per_seed).0,
            interclass_per_seed,
        });
    }
    let report = MadReport {
        version: SUMMARY_VERSION,
        command: "mad",
        dataset: g.name().to_string(),
        curve,
        finals,
    };
    let rows: Vec<Vec<String>> = report
        .curve
        .iter()
        .map(|p| {
            vec![
                p.epoch.to_string(),
                p.variant.clone(),
                text(p.mad_all),
                text(p.mad_interclass),
            ]
        })
        .collect();
    write_csv(
        out,
        "mad.csv",
        &["epoch", "variant", "mad_all", "mad_interclass"],
        &rows,
    )?;
    write_json(out, "mad.json", &report)?;
    Ok(report)
}

/// Share of attention placed on informative neighbours.
///
/// For every head and every node with at least one neighbour other than
/// itself, the attention on informative edges is divided by the attention on
/// all non-self edges; the result is the mean over nodes and heads.
/// `informative` is aligned with the graph's edge list.
pub fn attention_mass(g: &Graph, map: &AttentionMap, informative: &[bool]) -> Result<f64> {
    if informative.len() != g.num_edges() {
        return Err(CsaError::shape(
            "attention_mass",
            &[informative.len()],
            &[g.num_edges()],
        ));
    }
    map.validate(g)?;
    let src = g.src();
    let (mut total, mut count) = (0.0, 0usize);
    for head in &map.heads {
        for v in 0..g.num_nodes() {
            let (mut good, mut all) = (0.0, 0.0);
            for e in g.incoming(v) {
                if src[e] != v {
                    all += head[e];
                    if informative[e] {
                        good += head[e];
                    }
                }
            }
            if all > 0.0 {
                total += good / all;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(CsaError::invalid(
            "attention_mass: no node has a neighbour besides itself",
        ));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityRow {
    pub variant: String,
    /// Mass on the first layer, mean and std over seeds.
    #[serde(serialize_with = "fixed6")]
    pub mass: f64,
    #[serde(serialize_with = "fixed6")]
    pub mass_std: f64,
    /// Seed-averaged mass of every attention layer.
    #[serde(serialize_with = "fixed6_vec")]
    pub per_layer: Vec<f64>,
    #[serde(serialize_with = "fixed6")]
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionQualityReport {
    pub version: u32,
    pub command: &'static str,
    /// Mass under uniform neighbour attention.
    #[serde(serialize_with = "fixed6")]
    pub baseline: f64,
    /// Informative share of all non-self edges.
    #[serde(serialize_with = "fixed6")]
    pub informative_edge_fraction: f64,
    pub rows: Vec<QualityRow>,
    #[serde(serialize_with = "fixed6_opt")]
    pub best_gain_over_vanilla: Option<f64>,
}

impl AttentionQualityReport {
    pub fn row(&self, variant: &str) -> Option<&QualityRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains each variant on the planted graph and measures where its
/// evaluation-mode attention goes. Writes `attention_quality.json`.
pub fn cmd_attention_quality(cfg: &ExperimentConfig, out: &Path) -> Result<AttentionQualityReport> {
    let DatasetSource::Planted(params) = &cfg.dataset else {
        return Err(CsaError::invalid("attn-quality needs a `planted` dataset"));
    };
    if cfg.model.kind != ModelKind::Gat {
        return Err(CsaError::invalid("attn-quality needs a gat model"));
    }
    let planted = synthetic_planted(params)?;
    let g = &planted.graph;
    let informative = planted.informative_mask();
    let heads = cfg.model.heads;
    let baseline = attention_mass(g, &AttentionMap::uniform(g, heads), &informative)?;
    let non_self = g.edges().filter(|(s, d)| s != d).count();
    let informative_edge_fraction = informative.iter().filter(|&&b| b).count() as f64 / non_self.max(1) as f64;

    let train = cfg.effective_train();
    let registry = VariantRegistry::builtin();
    let mut rows = Vec::new();
    for v in &cfg.variants {
        let per_seed: Vec<(Vec<f64>, f64)> = cfg
            .seeds
            .par_iter()
            .map(|&s| {
                let run = run_seed(g, cfg.ratios, &cfg.model, &train, v, s)?;
                let overrides = registry.create(v, &train.variant_options())?.overrides(&run.model, g)?;
                let mut tape = Tape::new();
                let fwd = run
                    .model
                    .forward(&mut tape, g, false, &overrides, &mut StepRng::new(0, 0))?;
                let masses = fwd
                    .traces
                    .iter()
                    .filter_map(|t| t.attention.as_ref())
                    .map(|a| attention_mass(g, a, &informative))
                    .collect::<Result<Vec<_>>>()?;
                Ok((masses, run.history.test_acc()))
            })
            .collect::<Result<_>>()?;
        let layers = per_seed[0].0.len();
        let per_layer: Vec<f64> = (0..layers)
            .map(|l| mean_std(&per_seed.iter().map(|(m, _)| m[l]).collect::<Vec<_>>()).0)
            .collect();
        let (mass, mass_std) = mean_std(&per_seed.iter().map(|(m, _)| m[0]).collect::<Vec<_>>());
        rows.push(QualityRow {
            variant: v.clone(),
            mass,
            mass_std,
            per_layer,
            test_acc: 100.0 * mean_std(&per_seed.iter().map(|(_, a)| *a).collect::<Vec<_>>()).0,
        });
    }
    let vanilla = rows.iter().find(|r| r.variant == "none").map(|r| r.mass);
    let best_gain_over_vanilla = vanilla.and_then(|base| {
        rows.iter()
            .filter(|r| r.variant != "none")
            .map(|r| r.mass - base)
            .reduce(f64::max)
    });
    let report = AttentionQualityReport {
        version: SUMMARY_VERSION,
        command: "attn-quality",
        baseline,
        informative_edge_fraction,
        rows,
        best_gain_over_vanilla,
    };
    write_json(out, "attention_quality.json", &report)?;
    Ok(report)
}
