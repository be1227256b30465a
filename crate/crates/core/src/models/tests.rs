#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::check_params;

fn no_rng() -> StepRng {
    StepRng::new(0, 0)
}

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

fn gat_config(layers: usize, heads: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        hidden,
        ..ModelConfig::default()
    }
}

/// A standalone layer with its own store, identity activation and no dropout.
fn single_layer(seed: u64, in_dim: usize, out_dim: usize, heads: usize) -> (GatLayerParams, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut w = Vec::new();
    let mut a = Vec::new();
    for h in 0..heads {
        w.push(store.add(format!("w{h}"), glorot(&mut rng, in_dim, out_dim)));
        a.push(store.add(format!("a{h}"), glorot(&mut rng, 2 * out_dim, 1)));
    }
    let params = GatLayerParams {
        in_dim,
        out_dim,
        heads,
        slope: 0.2,
        merge: HeadMerge::Concat,
        activation: Activation::Identity,
        dropout: 0.0,
        attn_dropout: 0.0,
        w,
        a,
    };
    (params, store)
}

/// `x . w` by the textbook triple loop.
fn dense_product(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|j| (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn run_layer(
    params: &GatLayerParams,
    store: &ParamStore,
    g: &Graph,
    attention_override: Option<&AttentionMap>,
) -> (Tensor, AttentionMap) {
    let mut tape = Tape::new();
    let input = LayerInput::Features(Arc::clone(g.sparse_features()));
    let (out, map) = gat_layer_forward(
        &mut tape,
        params,
        store,
        g,
        &input,
        false,
        attention_override,
        &mut no_rng(),
    )
    .unwrap();
    (tape.to_tensor(out), map)
}

#[test]
fn zero_attention_vector_gives_uniform_weights() {
    let g = random_graph(1, 7, 3, 2, 0.4);
    let (params, mut store) = single_layer(2, 3, 4, 2);
    for &a in &params.a {
        store.get_mut(a).data_mut().fill(0.0);
    }
    let (_, map) = run_layer(&params, &store, &g, None);
    let uniform = AttentionMap::uniform(&g, 2);
    for h in 0..2 {
        for (x, y) in map.head(h).iter().zip(uniform.head(h)) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn isolated_node_attends_only_to_itself() {
    let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![3.0, 0.0]]).unwrap();
    let g = Graph::from_undirected("iso", x, vec![0, 1, 0], 2, &[(0, 1)]).unwrap();
    let (params, store) = single_layer(3, 2, 3, 3);
    let (_, map) = run_layer(&params, &store, &g, None);
    let loop2 = g.self_loop_edge(2);
    for h in 0..3 {
        assert_eq!(map.head(h)[loop2], 1.0);
    }
}

#[test]
fn scores_match_dense_per_edge_oracle() {
    let g = random_graph(4, 5, 4, 2, 0.5);
    let (params, store) = single_layer(5, 4, 3, 2);
    let mut tape = Tape::new();
    let input = LayerInput::Features(Arc::clone(g.sparse_features()));
    let scores = gat_scores(&mut tape, &params, &store, &g, &input).unwrap();
    for h in 0..2 {
        let wh = dense_product(g.features(), store.get(params.w[h]));
        let a = store.get(params.a[h]).data();
        let d = params.out_dim;
        for (e, (s, t)) in g.edges().enumerate() {
            let raw: f64 = (0..d).map(|k| a[k] * wh[t][k] + a[d + k] * wh[s][k]).sum();
            let expected = if raw > 0.0 { raw } else { 0.2 * raw };
            assert!((tape.value(scores[h])[e] - expected).abs() < 1e-12, "edge {e}");
        }
    }
}

#[test]
fn factual_attention_is_normalized() {
    let g = random_graph(6, 9, 3, 3, 0.3);
    let (params, store) = single_layer(7, 3, 4, 4);
    let (_, map) = run_layer(&params, &store, &g, None);
    map.validate(&g).unwrap();
    assert!(map.max_row_sum_error(&g) < 1e-9);
}

#[test]
fn uniform_override_is_neighbourhood_mean() {
    let g = random_graph(8, 8, 3, 2, 0.4);
    let (params, store) = single_layer(9, 3, 2, 2);
    let (out, _) = run_layer(&params, &store, &g, Some(&AttentionMap::uniform(&g, 2)));
    for h in 0..2 {
        let wh = dense_product(g.features(), store.get(params.w[h]));
        for i in 0..g.num_nodes() {
            let neigh: Vec<usize> = (0..g.num_nodes()).filter(|&j| g.has_edge(j, i)).collect();
            for k in 0..2 {
                let mean = neigh.iter().map(|&j| wh[j][k]).sum::<f64>() / neigh.len() as f64;
                assert!((out.get(i, h * 2 + k) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identity_override_returns_own_projection_exactly() {
    let g = random_graph(10, 6, 4, 2, 0.5);
    let (params, store) = single_layer(11, 4, 3, 1);
    let (out, _) = run_layer(&params, &store, &g, Some(&AttentionMap::identity(&g, 1)));
    let wh = dense_product(g.features(), store.get(params.w[0]));
    for i in 0..6 {
        for k in 0..3 {
            assert_eq!(out.get(i, k), wh[i][k]);
        }
    }
}

#[test]
fn overriding_with_factual_values_reproduces_output() {
    let g = random_graph(12, 10, 3, 2, 0.3);
    let (params, store) = single_layer(13, 3, 4, 3);
    let (factual, map) = run_layer(&params, &store, &g, None);
    let (replayed, _) = run_layer(&params, &store, &g, Some(&map));
    for (x, y) in factual.data().iter().zip(replayed.data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn override_errors() {
    let g = random_graph(14, 5, 3, 2, 0.5);
    let (params, store) = single_layer(15, 3, 2, 2);
    let mut tape = Tape::new();
    let input = LayerInput::Features(Arc::clone(g.sparse_features()));
    let wrong_heads = AttentionMap::uniform(&g, 3);
    assert!(gat_layer_forward(
        &mut tape,
        &params,
        &store,
        &g,
        &input,
        false,
        Some(&wrong_heads),
        &mut no_rng()
    )
    .is_err());
    let short = AttentionMap::new(vec![vec![1.0; 2]; 2]);
    assert!(gat_layer_forward(
        &mut tape,
        &params,
        &store,
        &g,
        &input,
        false,
        Some(&short),
        &mut no_rng()
    )
    .is_err());
    let mut unnormalized = AttentionMap::uniform(&g, 2);
    unnormalized.heads[1][0] += 0.1;
    assert!(gat_layer_forward(
        &mut tape,
        &params,
        &store,
        &g,
        &input,
        false,
        Some(&unnormalized),
        &mut no_rng()
    )
    .is_err());

    let mlp = Model::new(
        &ModelConfig {
            kind: ModelKind::Mlp,
            ..ModelConfig::default()
        },
        3,
        2,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let mut overrides = Overrides::new();
    overrides.insert(0, AttentionMap::uniform(&g, 1));
    assert!(mlp.predict(&g, &overrides).is_err());

    let gat = Model::new(&gat_config(2, 2, 3), 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut overrides = Overrides::new();
    overrides.insert(2, AttentionMap::uniform(&g, 1));
    assert!(gat.predict(&g, &overrides).is_err());
}

#[test]
fn permuting_nodes_permutes_outputs() {
    let n = 9;
    let g = random_graph(16, n, 4, 3, 0.35);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = Model::new(&gat_config(2, 3, 4), 4, 3, &mut rng).unwrap();
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        p.shuffle(&mut rng);
        p
    };
    // node v of g becomes node perm[v] of h
    let mut rows = vec![Vec::new(); n];
    let mut labels = vec![0; n];
    for v in 0..n {
        rows[perm[v]] = g.features().row(v).to_vec();
        labels[perm[v]] = g.labels()[v];
    }
    let pairs: Vec<(usize, usize)> = g.undirected_pairs().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
    let h = Graph::from_undirected("perm", Tensor::from_rows(&rows).unwrap(), labels, 3, &pairs).unwrap();
    let out_g = model.predict(&g, &Overrides::new()).unwrap();
    let out_h = model.predict(&h, &Overrides::new()).unwrap();
    for v in 0..n {
        for c in 0..3 {
            assert!((out_g.get(v, c) - out_h.get(perm[v], c)).abs() < 1e-9);
        }
    }
}

#[test]
fn gcn_on_regular_graph_matches_dense_oracle() {
    // 6-cycle: every node has degree 3 with its self-loop
    let n = 6;
    let pairs: Vec<(usize, usize)> = (0..n).map(|v| (v, (v + 1) % n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let data = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Graph::from_undirected("ring", Tensor::new(vec![n, 3], data).unwrap(), vec![0; n], 2, &pairs).unwrap();
    let config = ModelConfig {
        kind: ModelKind::Gcn,
        layers: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(&config, 3, 2, &mut rng).unwrap();
    let Layer::Gcn(layer) = &model.layers()[0] else {
        panic!("gcn layer expected")
    };
    let xw = dense_product(g.features(), model.params().get(layer.w));
    let out = model.predict(&g, &Overrides::new()).unwrap();
    for i in 0..n {
        for c in 0..2 {
            let neigh = [(i + n - 1) % n, i, (i + 1) % n];
            let expected = neigh.iter().map(|&j| xw[j][c]).sum::<f64>() / 3.0;
            assert!((out.get(i, c) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_ignores_edges() {
    let g = random_graph(19, 8, 4, 2, 0.2);
    let denser = g
        .with_undirected_pairs(&[(0, 1), (1, 2), (2, 3), (3, 7), (0, 5)])
        .unwrap();
    let config = ModelConfig {
        kind: ModelKind::Mlp,
        ..ModelConfig::default()
    };
    let model = Model::new(&config, 4, 2, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
    let a = model.predict(&g, &Overrides::new()).unwrap();
    let b = model.predict(&denser, &Overrides::new()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_rng() {
    let g = random_graph(21, 8, 4, 2, 0.4);
    let model = Model::new(&ModelConfig::default(), 4, 2, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let a = model.predict(&g, &Overrides::new()).unwrap();
    let b = model.predict(&g, &Overrides::new()).unwrap();
    assert_eq!(a, b);

    let train = |seed| {
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &g,
                true,
                &Overrides::new(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
        tape.to_tensor(out.logits)
    };
    assert_eq!(train(5), train(5));
    assert_ne!(train(5), train(6));
    assert_ne!(train(5), a);
}

#[test]
fn one_layer_gat_hand_computed() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let g = Graph::from_undirected("pair", x, vec![0, 1], 2, &[(0, 1)]).unwrap();
    let mut model = Model::new(&gat_config(1, 1, 1), 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let Layer::Gat(p) = model.layers()[0].clone() else {
        panic!("gat layer expected")
    };
    model
        .params_mut()
        .get_mut(p.w[0])
        .data_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    model
        .params_mut()
        .get_mut(p.a[0])
        .data_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, -1.0]);
    let out = model.predict(&g, &Overrides::new()).unwrap();
    // node 0: scores 1 (self) and 0 (from 1); node 1: 0 (from 0) and LeakyReLU(-1) = -0.2 (self)
    let e = std::f64::consts::E;
    let expected = [
        [e / (1.0 + e), 1.0 / (1.0 + e)],
        [1.0 / (1.0 + (-0.2f64).exp()), (-0.2f64).exp() / (1.0 + (-0.2f64).exp())],
    ];
    for i in 0..2 {
        for c in 0..2 {
            assert!((out.get(i, c) - expected[i][c]).abs() < 1e-15);
        }
    }
}

#[test]
fn two_layer_gat_gradients_match_finite_differences() {
    let g = random_graph(23, 6, 3, 2, 0.5);
    let model = Model::new(&gat_config(2, 2, 3), 3, 2, &mut ChaCha8Rng::seed_from_u64(24)).unwrap();
    let labels = g.labels_arc();
    let mask: Arc<[usize]> = Arc::from((0..6).collect::<Vec<_>>());
    for train in [false, true] {
        let report = check_params(model.params(), 1e-5, |tape, store| {
            let mut rng = ChaCha8Rng::seed_from_u64(25);
            let out = model.forward_with(store, tape, &g, train, &Overrides::new(), &mut rng)?;
            tape.cross_entropy(out.logits, Arc::clone(&labels), Arc::clone(&mask))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "train={train}: {:?}", report.worst());
    }
}

#[test]
fn gcn_and_mlp_gradients_match_finite_differences() {
    let g = random_graph(26, 6, 3, 2, 0.5);
    let labels = g.labels_arc();
    let mask: Arc<[usize]> = Arc::from(vec![0, 2, 3, 5]);
    for kind in [ModelKind::Gcn, ModelKind::Mlp] {
        let config = ModelConfig {
            kind,
            hidden: 2,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(&config, 3, 2, &mut ChaCha8Rng::seed_from_u64(27)).unwrap();
        let report = check_params(model.params(), 1e-5, |tape, store| {
            let out = model.forward_with(store, tape, &g, false, &Overrides::new(), &mut no_rng())?;
            tape.cross_entropy(out.logits, Arc::clone(&labels), Arc::clone(&mask))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{kind}: {:?}", report.worst());
    }
}

#[test]
fn traces_cover_every_layer() {
    let g = random_graph(28, 7, 3, 2, 0.4);
    let model = Model::new(&gat_config(3, 2, 4), 3, 2, &mut ChaCha8Rng::seed_from_u64(29)).unwrap();
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &g, false, &Overrides::new(), &mut no_rng())
        .unwrap();
    assert_eq!(out.traces.len(), 3);
    for (l, t) in out.traces.iter().enumerate() {
        assert_eq!(t.layer_index, l);
        assert_eq!(tape.shape(t.output), &[7, model.layer_output_dim(l)]);
        assert_eq!(t.attention.as_ref().unwrap().num_heads(), model.layer_heads(l).unwrap());
    }
    assert_eq!(model.layer_output_dim(0), 8);
    assert_eq!(model.layer_output_dim(2), 2);
}

#[test]
fn checkpoint_round_trip() {
    let g = random_graph(30, 6, 3, 2, 0.5);
    let mut model = Model::new(&gat_config(2, 2, 3), 3, 2, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    model
        .params_mut()
        .add("probe0", Tensor::new(vec![6, 2], vec![0.5; 12]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params().len(), model.params().len());
    for ((_, n1, t1), (_, n2, t2)) in model.params().iter().zip(loaded.params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data());
    }
    assert_eq!(
        model.predict(&g, &Overrides::new()).unwrap(),
        loaded.predict(&g, &Overrides::new()).unwrap()
    );
    let bytes = std::fs::read(&path).unwrap();
    assert!(load_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
}

fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    checkpoint::read_checkpoint(bytes)
}

#[test]
fn config_validation_and_kind_names() {
    assert!(ModelConfig {
        dropout: 1.0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        layers: 0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert_eq!("GAT".parse::<ModelKind>().unwrap(), ModelKind::Gat);
    assert!("gin".parse::<ModelKind>().is_err());
    assert_eq!(ModelKind::Mlp.to_string(), "mlp");
}
