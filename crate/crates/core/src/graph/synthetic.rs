use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

/// Planted-partition graph parameters.
///
/// Node `v` belongs to block `v / nodes_per_block`, which is also its label.
/// Same-block pairs connect with probability `p_informative`, cross-block
/// pairs with `p_noise`. Features are `signal * mu_block + noise_std * eps`
/// with standard normal `mu_block` and `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedParams {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_informative: f64,
    pub p_noise: f64,
    pub feature_dim: usize,
    pub signal: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            blocks: 3,
            nodes_per_block: 40,
            p_informative: 0.15,
            p_noise: 0.05,
            feature_dim: 16,
            signal: 0.5,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedGraph {
    pub graph: Graph,
    /// Same-block node pairs `(u, v)` with `u < v` that received an edge.
    pub informative: BTreeSet<(usize, usize)>,
}

impl PlantedGraph {
    /// Per-edge flag aligned with the graph's edge list; self-loops are `false`.
    pub fn informative_mask(&self) -> Vec<bool> {
        self.graph
            .edges()
            .map(|(s, d)| s != d && self.informative.contains(&(s.min(d), s.max(d))))
            .collect()
    }
}

pub fn synthetic_planted(params: &PlantedParams) -> Result<PlantedGraph> {
    let p = params;
    if p.blocks == 0 || p.nodes_per_block == 0 {
        return Err(CsaError::invalid(
            "planted graph needs at least one block with one node",
        ));
    }
    for prob in [p.p_informative, p.p_noise] {
        if !(0.0..=1.0).contains(&prob) {
            return Err(CsaError::invalid(format!("edge probability {prob} outside [0, 1]")));
        }
    }
    if p.p_informative <= p.p_noise {
        return Err(CsaError::invalid(format!(
            "p_informative ({}) must exceed p_noise ({})",
            p.p_informative, p.p_noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.blocks * p.nodes_per_block;
    let block = |v: usize| v / p.nodes_per_block;

    let means: Vec<Vec<f64>> = (0..p.blocks)
        .map(|_| {
            (0..p.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * p.feature_dim);
    for v in 0..n {
        for mu in &means[block(v)] {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(p.signal * mu + p.noise_std * eps);
        }
    }

    let mut pairs = Vec::new();
    let mut informative = BTreeSet::new();
    for u in 0..n {
        for v in u + 1..n {
            let same = block(u) == block(v);
            let prob = if same { p.p_informative } else { p.p_noise };
            if rng.gen::<f64>() < prob {
                pairs.push((u, v));
                if same {
                    informative.insert((u, v));
                }
            }
        }
    }
    let labels = (0..n).map(block).collect();
    let graph = Graph::from_undirected(
        "planted",
        Tensor::new(vec![n, p.feature_dim], data)?,
        labels,
        p.blocks,
        &pairs,
    )?;
    Ok(PlantedGraph { graph, informative })
}
