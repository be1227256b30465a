use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{CsaError, Result};

/// Train / validation / test proportions used throughout the experiments.
pub const DEFAULT_RATIOS: [f64; 3] = [0.48, 0.32, 0.20];

/// Disjoint node-id sets covering every node. Each set is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    pub fn train_mask(&self) -> Arc<[usize]> {
        self.train.clone().into()
    }

    pub fn val_mask(&self) -> Arc<[usize]> {
        self.val.clone().into()
    }

    pub fn test_mask(&self) -> Arc<[usize]> {
        self.test.clone().into()
    }
}

/// Uniform class-agnostic shuffle of the nodes of `g`, sliced by `ratios`.
pub fn random_split(g: &Graph, ratios: [f64; 3], seed: u64) -> Result<Split> {
    split_nodes(g.num_nodes(), ratios, seed)
}

/// Train and validation sizes are `round(ratio * n)`; the test set takes the
/// remainder.
pub fn split_nodes(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CsaError::invalid(format!(
            "split ratios must be in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test, seed })
}
