#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::{Layer, LayerInput, Model, ModelConfig, Overrides};
use crate::tensor::gradcheck::check_params;
use crate::tensor::{ParamStore, Tape, Tensor};

fn random_graph(seed: u64, n: usize, d: usize, classes: usize, p: f64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|v| v % classes).collect();
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                pairs.push((u, v));
            }
        }
    }
    Graph::from_undirected("rand", Tensor::new(vec![n, d], data).unwrap(), labels, classes, &pairs).unwrap()
}

fn gat(layers: usize, heads: usize, hidden: usize, in_dim: usize, classes: usize, seed: u64) -> Model {
    let config = ModelConfig {
        layers,
        heads,
        hidden,
        ..ModelConfig::default()
    };
    Model::new(&config, in_dim, classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn no_rng() -> StepRng {
    StepRng::new(0, 0)
}

fn generate(
    scheme: &CounterfactualScheme,
    g: &Graph,
    heads: usize,
    history: &HistoricalBuffer,
    seed: u64,
) -> AttentionMap {
    let factual = AttentionMap::uniform(g, heads);
    make_counterfactual(scheme, g, 0, &factual, history, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn all_schemes() -> Vec<CounterfactualScheme> {
    vec![
        CounterfactualScheme::Dummy,
        CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 },
        CounterfactualScheme::Identity,
        CounterfactualScheme::Historical,
    ]
}

// ---- dense oracles, sharing no code with the tape ----

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn matmul(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * w.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// One GAT layer evaluated node by node. `fixed` replaces the softmax weights.
fn dense_gat_layer(model: &Model, l: usize, x: &[Vec<f64>], g: &Graph, fixed: Option<&AttentionMap>) -> Vec<Vec<f64>> {
    let Layer::Gat(p) = &model.layers()[l] else {
        panic!("gat layer expected")
    };
    let n = g.num_nodes();
    let store = model.params();
    let mut per_head = Vec::new();
    for h in 0..p.heads {
        let wh = matmul(x, store.get(p.w[h]));
        let a = store.get(p.a[h]).data();
        let d = p.out_dim;
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            let neigh: Vec<usize> = (0..n).filter(|&j| g.has_edge(j, i)).collect();
            let weights: Vec<f64> = match fixed {
                Some(map) => neigh
                    .iter()
                    .map(|&j| {
                        let e = g.incoming(i).find(|&e| g.src()[e] == j).unwrap();
                        map.head(h)[e]
                    })
                    .collect(),
                None => {
                    let s: Vec<f64> = neigh
                        .iter()
                        .map(|&j| {
                            let raw: f64 = (0..d).map(|k| a[k] * wh[i][k] + a[d + k] * wh[j][k]).sum();
                            if raw > 0.0 {
                                raw
                            } else {
                                p.slope * raw
                            }
                        })
                        .collect();
                    let z: f64 = s.iter().map(|v| v.exp()).sum();
                    s.iter().map(|v| v.exp() / z).collect()
                }
            };
            for (&j, w) in neigh.iter().zip(&weights) {
                for k in 0..d {
                    out[i][k] += w * wh[j][k];
                }
            }
        }
        per_head.push(out);
    }
    let last = l + 1 == model.num_layers();
    (0..n)
        .map(|i| {
            if last {
                (0..p.out_dim)
                    .map(|k| per_head.iter().map(|o| o[i][k]).sum::<f64>() / p.heads as f64)
                    .collect()
            } else {
                per_head.iter().flat_map(|o| o[i].iter().map(|&v| elu(v))).collect()
            }
        })
        .collect()
}

fn dense_forward(model: &Model, g: &Graph, overrides: &Overrides) -> Vec<Vec<f64>> {
    let mut x = rows_of(g.features());
    for l in 0..model.num_layers() {
        x = dense_gat_layer(model, l, &x, g, overrides.get(&l));
    }
    x
}

// ---- generators ----

#[test]
fn dummy_spreads_weight_evenly() {
    // node 0 has three neighbours plus its self-loop
    let x = Tensor::zeros(vec![5, 1]);
    let g = Graph::from_undirected("star", x, vec![0; 5], 1, &[(0, 1), (0, 2), (0, 3)]).unwrap();
    let map = generate(&CounterfactualScheme::Dummy, &g, 2, &HistoricalBuffer::new(), 0);
    for h in 0..2 {
        for e in g.incoming(0) {
            assert_eq!(map.head(h)[e], 0.25);
        }
        assert_eq!(map.head(h)[g.self_loop_edge(4)], 1.0);
    }
}

#[test]
fn identity_has_one_nonzero_per_node() {
    let g = random_graph(1, 12, 2, 2, 0.3);
    let map = generate(&CounterfactualScheme::Identity, &g, 3, &HistoricalBuffer::new(), 0);
    map.validate(&g).unwrap();
    for h in 0..3 {
        for v in 0..g.num_nodes() {
            let nonzero: Vec<usize> = g.incoming(v).filter(|&e| map.head(h)[e] != 0.0).collect();
            assert_eq!(nonzero, vec![g.self_loop_edge(v)]);
        }
    }
}

#[test]
fn near_constant_uniform_draws_approach_dummy() {
    let g = random_graph(2, 15, 2, 2, 0.4);
    let scheme = CounterfactualScheme::UniformRandom { lo: 0.999, hi: 1.001 };
    let map = generate(&scheme, &g, 2, &HistoricalBuffer::new(), 3);
    let dummy = AttentionMap::uniform(&g, 2);
    for h in 0..2 {
        for (x, y) in map.head(h).iter().zip(dummy.head(h)) {
            assert!((x - y).abs() < 1e-3);
        }
    }
    assert_ne!(map, dummy);
}

#[test]
fn uniform_is_seeded_and_independent_per_head() {
    let g = random_graph(4, 10, 2, 2, 0.4);
    let scheme = CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 };
    let a = generate(&scheme, &g, 2, &HistoricalBuffer::new(), 5);
    let b = generate(&scheme, &g, 2, &HistoricalBuffer::new(), 5);
    assert_eq!(a, b);
    assert_ne!(a.head(0), a.head(1));
    assert_ne!(a, generate(&scheme, &g, 2, &HistoricalBuffer::new(), 6));
}

#[test]
fn uniform_rejects_bad_bounds() {
    for (lo, hi) in [(0.5, 0.5), (1.0, 0.0), (-0.1, 1.0), (0.0, f64::INFINITY)] {
        assert!(CounterfactualScheme::UniformRandom { lo, hi }.generator().is_err());
    }
}

#[test]
fn historical_copies_buffer_or_falls_back() {
    let g = random_graph(7, 9, 2, 2, 0.4);
    let empty = HistoricalBuffer::new();
    let fallback = generate(&CounterfactualScheme::Historical, &g, 2, &empty, 0);
    assert_eq!(fallback, AttentionMap::uniform(&g, 2));

    let recorded = generate(
        &CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 },
        &g,
        2,
        &empty,
        8,
    );
    let mut history = HistoricalBuffer::new();
    history.record(0, recorded.clone());
    assert_eq!(history.get(0), Some(&recorded));
    assert_eq!(
        generate(&CounterfactualScheme::Historical, &g, 2, &history, 0),
        recorded
    );

    let strict = SchemeRegistry::builtin()
        .create(
            "historical",
            &SchemeOptions {
                historical_fallback: false,
                ..SchemeOptions::default()
            },
        )
        .unwrap();
    let factual = AttentionMap::uniform(&g, 2);
    let ctx = CounterfactualContext {
        graph: &g,
        layer: 0,
        factual: &factual,
        history: &empty,
    };
    assert!(strict.generate(&ctx, &mut no_rng()).is_err());
    let ctx = CounterfactualContext {
        history: &history,
        ..ctx
    };
    assert_eq!(strict.generate(&ctx, &mut no_rng()).unwrap(), recorded);
}

#[test]
fn every_scheme_yields_normalized_maps() {
    for seed in 0..10 {
        let g = random_graph(100 + seed, 14, 2, 3, 0.25);
        let mut history = HistoricalBuffer::new();
        history.record(
            0,
            generate(
                &CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 },
                &g,
                2,
                &history,
                seed,
            ),
        );
        for scheme in all_schemes() {
            let map = generate(&scheme, &g, 2, &history, seed);
            assert!(map.max_row_sum_error(&g) < 1e-9, "{scheme}");
            map.validate(&g).unwrap();
        }
    }
}

#[test]
fn registry_lookup() {
    let registry = SchemeRegistry::builtin();
    assert_eq!(
        registry.names().collect::<Vec<_>>(),
        ["dummy", "historical", "identity", "uniform"]
    );
    for scheme in all_schemes() {
        assert_eq!(scheme.generator().unwrap().name(), scheme.name());
    }
    let err = registry.create("random", &SchemeOptions::default()).err().unwrap();
    assert!(err.to_string().contains("identity"));
}

#[test]
fn scheme_json_shape() {
    let s: CounterfactualScheme = serde_json::from_str(r#"{"kind":"uniform_random"}"#).unwrap();
    assert_eq!(s, CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 });
    let s: CounterfactualScheme = serde_json::from_str(r#"{"kind":"historical"}"#).unwrap();
    assert_eq!(s, CounterfactualScheme::Historical);
}

// ---- effects ----

fn factual_trace(model: &Model, g: &Graph, tape: &mut Tape) -> Vec<crate::models::LayerTrace> {
    model
        .forward(tape, g, false, &Overrides::new(), &mut no_rng())
        .unwrap()
        .traces
}

#[test]
fn effect_vanishes_when_counterfactual_equals_factual() {
    let g = random_graph(10, 8, 3, 3, 0.4);
    let mut model = gat(2, 2, 4, 3, 3, 11);
    let probe = LayerProbe::new(&mut model, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tape = Tape::new();
    let traces = factual_trace(&model, &g, &mut tape);
    let factual = traces[0].attention.clone().unwrap();
    let eff = layer_effect(&mut tape, &model, model.params(), &g, &traces[0], &factual, &probe).unwrap();
    assert!(tape.value(eff.effect).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn zero_probe_gives_exactly_zero_effect() {
    let g = random_graph(12, 8, 3, 3, 0.4);
    let mut model = gat(2, 2, 4, 3, 3, 13);
    let probe = LayerProbe::new(&mut model, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    model.params_mut().get_mut(probe.weight).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let traces = factual_trace(&model, &g, &mut tape);
    let cf = AttentionMap::uniform(&g, 2);
    let eff = layer_effect(&mut tape, &model, model.params(), &g, &traces[0], &cf, &probe).unwrap();
    assert!(tape.value(eff.effect).iter().all(|&v| v == 0.0));
}

#[test]
fn dummy_effect_matches_dense_oracle() {
    let x = Tensor::from_rows(&[vec![1.0, -0.5], vec![0.3, 2.0], vec![-1.2, 0.7]]).unwrap();
    let g = Graph::from_undirected("tri", x, vec![0, 1, 1], 2, &[(0, 1), (1, 2)]).unwrap();
    let mut model = gat(2, 2, 3, 2, 2, 14);
    let probe = LayerProbe::new(&mut model, 0, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let mut tape = Tape::new();
    let traces = factual_trace(&model, &g, &mut tape);
    let cf = AttentionMap::uniform(&g, 2);
    let eff = layer_effect(&mut tape, &model, model.params(), &g, &traces[0], &cf, &probe).unwrap();

    let x0 = rows_of(g.features());
    let fact = dense_gat_layer(&model, 0, &x0, &g, None);
    let mean = dense_gat_layer(&model, 0, &x0, &g, Some(&cf));
    let p = model.params().get(probe.weight);
    let diff: Vec<Vec<f64>> = fact
        .iter()
        .zip(&mean)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let expected = matmul(&diff, p);
    for i in 0..3 {
        for c in 0..2 {
            assert!((tape.value(eff.effect)[i * 2 + c] - expected[i][c]).abs() < 1e-10);
        }
    }
}

#[test]
fn probe_dimension_is_checked() {
    let g = random_graph(16, 6, 3, 2, 0.4);
    let mut model = gat(2, 2, 4, 3, 2, 17);
    let probe1 = LayerProbe::new(&mut model, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tape = Tape::new();
    let traces = factual_trace(&model, &g, &mut tape);
    let cf = AttentionMap::uniform(&g, 2);
    assert!(layer_effect(&mut tape, &model, model.params(), &g, &traces[0], &cf, &probe1).is_err());
    let bad = LayerProbe {
        layer_index: 0,
        in_dim: 3,
        ..probe1
    };
    assert!(layer_effect(&mut tape, &model, model.params(), &g, &traces[0], &cf, &bad).is_err());
    assert!(LayerProbe::new(&mut model, 2, &mut no_rng()).is_err());
}

#[test]
fn counterfactual_branch_sends_no_gradient_to_attention_vectors() {
    let g = random_graph(18, 8, 3, 2, 0.4);
    let mut model = gat(2, 2, 3, 3, 2, 19);
    let probe = LayerProbe::new(&mut model, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let Layer::Gat(p0) = model.layers()[0].clone() else {
        panic!()
    };
    let labels = g.labels_arc();
    let mask: Arc<[usize]> = Arc::from((0..8).collect::<Vec<_>>());
    let cf = generate(
        &CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 },
        &g,
        2,
        &HistoricalBuffer::new(),
        3,
    );

    // loss on the counterfactual branch alone
    let mut store = model.params().clone();
    let mut tape = Tape::new();
    let input = LayerInput::Features(Arc::clone(g.sparse_features()));
    let (x_cf, _) = model
        .layer_forward_with(&store, &mut tape, &g, 0, &input, false, Some(&cf), &mut no_rng())
        .unwrap();
    let logits = probe.apply(&mut tape, &store, x_cf).unwrap();
    let loss = tape
        .cross_entropy(logits, Arc::clone(&labels), Arc::clone(&mask))
        .unwrap();
    tape.backward(loss, &mut store).unwrap();
    for &a in &p0.a {
        assert!(store.get(a).grad().is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
    }
    assert!(store.get(p0.w[0]).grad().unwrap().iter().any(|&v| v != 0.0));

    // full effect vs effect with the counterfactual logits frozen
    let grad_a = |freeze: bool| {
        let mut store = model.params().clone();
        let mut tape = Tape::new();
        let traces = factual_trace(&model, &g, &mut tape);
        let eff = layer_effect(&mut tape, &model, &store, &g, &traces[0], &cf, &probe).unwrap();
        let effect = if freeze {
            let frozen = tape.to_tensor(eff.counterfactual);
            let c = tape.constant(&frozen);
            tape.sub(eff.factual, c).unwrap()
        } else {
            eff.effect
        };
        let loss = tape
            .cross_entropy(effect, Arc::clone(&labels), Arc::clone(&mask))
            .unwrap();
        tape.backward(loss, &mut store).unwrap();
        p0.a.iter()
            .flat_map(|&a| store.get(a).grad().unwrap().to_vec())
            .collect::<Vec<_>>()
    };
    let full = grad_a(false);
    let frozen = grad_a(true);
    assert!(full.iter().any(|&v| v != 0.0));
    for (x, y) in full.iter().zip(&frozen) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    let g = random_graph(20, 8, 3, 2, 0.4);
    let mut model = gat(2, 2, 3, 3, 2, 21);
    let probes = [
        LayerProbe::new(&mut model, 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(),
        LayerProbe::new(&mut model, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
    ];
    let labels = g.labels_arc();
    let mask: Arc<[usize]> = Arc::from(vec![0, 1, 3, 4, 6]);
    let cfs = [
        generate(
            &CounterfactualScheme::UniformRandom { lo: 0.0, hi: 1.0 },
            &g,
            2,
            &HistoricalBuffer::new(),
            5,
        ),
        AttentionMap::identity(&g, 1),
    ];
    let report = check_params(model.params(), 1e-5, |tape, store| {
        let out = model.forward_with(
            store,
            tape,
            &g,
            true,
            &Overrides::new(),
            &mut ChaCha8Rng::seed_from_u64(6),
        )?;
        let ce = tape.cross_entropy(out.logits, Arc::clone(&labels), Arc::clone(&mask))?;
        let mut effects = Vec::new();
        for (probe, cf) in probes.iter().zip(&cfs) {
            effects.push(layer_effect(tape, &model, store, &g, &out.traces[probe.layer_index], cf, probe)?.effect);
        }
        let causal = csa_loss(tape, &effects, &labels, &mask, &[0.7, 0.3])?;
        tape.add(ce, causal)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
}

// ---- causal loss ----

#[test]
fn csa_loss_cases() {
    let labels: Arc<[usize]> = Arc::from(vec![0, 1, 2, 3, 4, 0]);
    let mask: Arc<[usize]> = Arc::from(vec![0, 2, 5]);
    let mut tape = Tape::new();
    let zero = tape.constant(&Tensor::zeros(vec![6, 5]));

    let off = csa_loss(&mut tape, &[zero], &labels, &mask, &[0.0]).unwrap();
    assert_eq!(tape.value(off), &[0.0]);
    let single = csa_loss(&mut tape, &[zero], &labels, &mask, &[0.3]).unwrap();
    assert!((tape.value(single)[0] - 0.3 * 5f64.ln()).abs() < 1e-12);
    let none = csa_loss(&mut tape, &[], &labels, &mask, &[]).unwrap();
    assert_eq!(tape.value(none), &[0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rand_logits = || {
        let data = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![6, 5], data).unwrap()
    };
    let (t1, t2) = (rand_logits(), rand_logits());
    let (e1, e2) = (tape.constant(&t1), tape.constant(&t2));
    let two = csa_loss(&mut tape, &[e1, e2], &labels, &mask, &[0.4, 0.1]).unwrap();
    let ce = |t: &Tensor| {
        mask.iter()
            .map(|&i| {
                let row = t.row(i);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[labels[i]].exp() / z).ln()
            })
            .sum::<f64>()
            / mask.len() as f64
    };
    assert!((tape.value(two)[0] - (0.4 * ce(&t1) + 0.1 * ce(&t2))).abs() < 1e-12);

    assert!(csa_loss(&mut tape, &[zero], &labels, &mask, &[-0.1]).is_err());
    assert!(csa_loss(&mut tape, &[zero], &labels, &mask, &[0.1, 0.2]).is_err());
}

// ---- ablations ----

#[test]
fn last_ablation_cases() {
    let g = random_graph(22, 4, 3, 2, 0.6);
    let model = gat(2, 2, 3, 3, 2, 23);
    let mut tape = Tape::new();
    let traces = factual_trace(&model, &g, &mut tape);

    let mut same = Overrides::new();
    same.insert(0, traces[0].attention.clone().unwrap());
    let zero = ablation_last(&mut tape, &model, model.params(), &g, &same).unwrap();
    assert!(tape.value(zero).iter().all(|v| v.abs() < 1e-9));

    let cf = AttentionMap::uniform(&g, 2);
    let mut overrides = Overrides::new();
    overrides.insert(0, cf.clone());
    let eff = ablation_last(&mut tape, &model, model.params(), &g, &overrides).unwrap();
    let fact = dense_forward(&model, &g, &Overrides::new());
    let counter = dense_forward(&model, &g, &overrides);
    for i in 0..4 {
        for c in 0..2 {
            let expected = fact[i][c] - counter[i][c];
            assert!((tape.value(eff)[i * 2 + c] - expected).abs() < 1e-10);
        }
    }
    assert!(ablation_last(&mut tape, &model, model.params(), &g, &Overrides::new()).is_err());
}

#[test]
fn last_ablation_collapses_to_layer_effect_for_one_layer() {
    let g = random_graph(24, 7, 3, 3, 0.4);
    let mut model = gat(1, 1, 4, 3, 3, 25);
    let probe = LayerProbe::new(&mut model, 0, &mut no_rng()).unwrap();
    let eye: Vec<f64> = (0..9).map(|k| if k % 4 == 0 { 1.0 } else { 0.0 }).collect();
    model
        .params_mut()
        .get_mut(probe.weight)
        .data_mut()
        .copy_from_slice(&eye);
    let cf = AttentionMap::identity(&g, 1);
    let mut tape = Tape::new();
    let traces = factual_trace(&model, &g, &mut tape);
    let eff = layer_effect(&mut tape, &model, model.params(), &g, &traces[0], &cf, &probe).unwrap();
    let mut overrides = Overrides::new();
    overrides.insert(0, cf);
    let last = ablation_last(&mut tape, &model, model.params(), &g, &overrides).unwrap();
    assert_eq!(tape.value(eff.effect), tape.value(last));
}

#[test]
fn pure_ablation_is_mean_aggregation() {
    let g = random_graph(26, 7, 3, 2, 0.4);
    let model = gat(2, 2, 3, 3, 2, 27);
    let mut tape = Tape::new();
    let out = ablation_pure(&mut tape, &model, model.params(), &g, false, &mut no_rng()).unwrap();
    let expected = dense_forward(&model, &g, &pure_overrides(&model, &g).unwrap());
    for i in 0..7 {
        for c in 0..2 {
            assert!((tape.value(out.logits)[i * 2 + c] - expected[i][c]).abs() < 1e-12);
        }
    }

    let mlp = Model::new(
        &ModelConfig {
            kind: crate::models::ModelKind::Mlp,
            ..ModelConfig::default()
        },
        3,
        2,
        &mut no_rng(),
    )
    .unwrap();
    assert!(pure_overrides(&mlp, &g).is_err());
}

#[test]
fn pure_ablation_on_isolated_nodes_is_per_node_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let data = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Graph::from_undirected(
        "iso",
        Tensor::new(vec![5, 3], data).unwrap(),
        vec![0, 1, 0, 1, 0],
        2,
        &[],
    )
    .unwrap();
    let model = gat(2, 2, 3, 3, 2, 29);
    let mut tape = Tape::new();
    let out = ablation_pure(&mut tape, &model, model.params(), &g, false, &mut no_rng()).unwrap();
    // x -> concat_h elu(x W_h) -> mean_h (. W'_h)
    let store = model.params();
    let (Layer::Gat(p0), Layer::Gat(p1)) = (&model.layers()[0], &model.layers()[1]) else {
        panic!()
    };
    let x = rows_of(g.features());
    let hidden: Vec<Vec<f64>> = {
        let parts: Vec<Vec<Vec<f64>>> = p0.w.iter().map(|&w| matmul(&x, store.get(w))).collect();
        (0..5)
            .map(|i| parts.iter().flat_map(|m| m[i].iter().map(|&v| elu(v))).collect())
            .collect()
    };
    let w_out = matmul(&hidden, store.get(p1.w[0]));
    for i in 0..5 {
        for c in 0..2 {
            assert!((tape.value(out.logits)[i * 2 + c] - w_out[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn pure_ablation_leaves_attention_vectors_without_gradient() {
    let g = random_graph(30, 8, 3, 2, 0.4);
    let model = gat(2, 2, 3, 3, 2, 31);
    let mut store: ParamStore = model.params().clone();
    let mut tape = Tape::new();
    let out = ablation_pure(&mut tape, &model, &store, &g, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mask: Arc<[usize]> = Arc::from((0..8).collect::<Vec<_>>());
    let loss = tape.cross_entropy(out.logits, g.labels_arc(), mask).unwrap();
    tape.backward(loss, &mut store).unwrap();
    for layer in model.layers() {
        let p = layer.as_gat().unwrap();
        for &a in &p.a {
            assert!(store.get(a).grad().is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
        }
        assert!(store.get(p.w[0]).grad().is_some());
    }
}
