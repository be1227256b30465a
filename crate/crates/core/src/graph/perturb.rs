use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Graph;
use crate::error::{CsaError, Result};

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CsaError::invalid(format!(
            "perturbation fraction must be in [0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// `ceil(fraction * total)`, tolerant of products like `0.3 * 10 = 3.0000000000000004`.
fn fraction_of(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Replaces the whole feature vector of a random `ceil(fraction * n)` node
/// subset with independent Bernoulli(0.5) draws in `{0, 1}`.
pub fn perturb_features(g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
    check_fraction(fraction)?;
    let n = g.num_nodes();
    let k = fraction_of(fraction, n);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = sample(&mut rng, n, k).into_vec();
    nodes.sort_unstable();
    let mut features = g.features().clone();
    let d = features.cols();
    let data = features.data_mut();
    for v in nodes {
        for x in &mut data[v * d..(v + 1) * d] {
            *x = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
    g.with_features(features)
}

/// Adds `ceil(fraction * m)` uniformly drawn new undirected edges, where `m`
/// is the current number of undirected non-self edges.
pub fn perturb_edges(g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
    check_fraction(fraction)?;
    let count = fraction_of(fraction, g.undirected_pairs().len());
    add_random_edges(g, count, seed)
}

/// Adds exactly `count` distinct undirected edges drawn uniformly from the
/// node pairs that are not yet connected.
pub fn add_random_edges(g: &Graph, count: usize, seed: u64) -> Result<Graph> {
    let n = g.num_nodes();
    let existing = g.undirected_pairs();
    let total = n * n.saturating_sub(1) / 2;
    let available = total - existing.len();
    if available == 0 {
        return Err(CsaError::invalid("graph is already complete"));
    }
    if count > available {
        return Err(CsaError::invalid(format!(
            "cannot add {count} edges: only {available} node pairs are unconnected"
        )));
    }
    if count == 0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let existing_set: BTreeSet<(usize, usize)> = existing.iter().copied().collect();
    let mut added: BTreeSet<(usize, usize)> = BTreeSet::new();
    if available >= 2 * count {
        while added.len() < count {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let pair = (u.min(v), u.max(v));
            if !existing_set.contains(&pair) {
                added.insert(pair);
            }
        }
    } else {
        // dense case: enumerate the complement and sample from it
        let mut free = Vec::with_capacity(available);
        for u in 0..n {
            for v in u + 1..n {
                if !existing_set.contains(&(u, v)) {
                    free.push((u, v));
                }
            }
        }
        added.extend(sample(&mut rng, free.len(), count).into_iter().map(|i| free[i]));
    }
    let mut pairs = existing;
    pairs.extend(added);
    g.with_undirected_pairs(&pairs)
}
