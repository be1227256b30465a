use serde::{Deserialize, Serialize};

use crate::error::{CsaError, Result};
use crate::graph::Graph;

/// Tolerance on per-destination row sums of a valid attention map.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Per-head edge weights aligned with a graph's edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub heads: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn new(heads: Vec<Vec<f64>>) -> Self {
        Self { heads }
    }

    /// Weight `1 / |N(i)|` on every incoming edge of `i`, self-loop included.
    pub fn uniform(g: &Graph, heads: usize) -> Self {
        let row: Vec<f64> = g.dst().iter().map(|&d| 1.0 / g.in_degree(d) as f64).collect();
        Self::new(vec![row; heads])
    }

    /// Weight 1 on each self-loop and 0 on every other edge.
    pub fn identity(g: &Graph, heads: usize) -> Self {
        let row: Vec<f64> = g.edges().map(|(s, d)| if s == d { 1.0 } else { 0.0 }).collect();
        Self::new(vec![row; heads])
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.heads[h]
    }

    /// Divides every entry by the sum of its destination segment.
    ///
    /// Segments whose weights are all zero become uniform.
    pub fn normalized(mut self, g: &Graph) -> Self {
        for head in &mut self.heads {
            for v in 0..g.num_nodes() {
                let range = g.incoming(v);
                let total: f64 = head[range.clone()].iter().sum();
                if total > 0.0 {
                    head[range].iter_mut().for_each(|w| *w /= total);
                } else {
                    let u = 1.0 / range.len() as f64;
                    head[range].iter_mut().for_each(|w| *w = u);
                }
            }
        }
        self
    }

    /// Checks edge alignment, non-negativity and per-destination row sums.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        if self.heads.is_empty() {
            return Err(CsaError::invalid("attention map has no heads"));
        }
        for (h, head) in self.heads.iter().enumerate() {
            if head.len() != g.num_edges() {
                return Err(CsaError::invalid(format!(
                    "attention head {h} has {} entries, graph has {} edges",
                    head.len(),
                    g.num_edges()
                )));
            }
            if let Some(w) = head.iter().find(|w| !w.is_finite() || **w < 0.0) {
                return Err(CsaError::invalid(format!("attention head {h} has invalid weight {w}")));
            }
            for v in 0..g.num_nodes() {
                let total: f64 = head[g.incoming(v)].iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(CsaError::invalid(format!(
                        "attention head {h} sums to {total} at node {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest deviation of any destination row sum from 1.
    pub fn max_row_sum_error(&self, g: &Graph) -> f64 {
        let mut worst = 0.0f64;
        for head in &self.heads {
            for v in 0..g.num_nodes() {
                let total: f64 = head[g.incoming(v)].iter().sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    }
}
