//! Graphs, dataset ingestion, node splits and perturbation tooling.

mod io;
mod perturb;
mod split;
mod synthetic;

pub use io::{
    load_edgelist_csv, load_manifest, load_webkb_text, write_edgelist_csv, write_webkb_text, DatasetFormat,
    DatasetManifest,
};
pub use perturb::{add_random_edges, perturb_edges, perturb_features};
pub use split::{random_split, split_nodes, Split, DEFAULT_RATIOS};
pub use synthetic::{synthetic_planted, PlantedGraph, PlantedParams};

use std::sync::Arc;

use crate::error::{CsaError, Result};
use crate::tensor::{CsrMatrix, Tensor};

/// Immutable attributed graph.
///
/// Edges are directed `(src, dst)` pairs sorted by `(dst, src)`, so the
/// incoming edges of every node form one contiguous segment. Every node has
/// exactly one self-loop and there are no duplicate edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    name: String,
    features: Tensor,
    sparse_features: Arc<CsrMatrix>,
    labels: Arc<[usize]>,
    class_count: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    offsets: Vec<usize>,
    self_loops: Vec<usize>,
}

impl Graph {
    /// Builds a graph from undirected pairs: both directions are inserted,
    /// self-loops are added and duplicates collapse.
    pub fn from_undirected(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let directed: Vec<(usize, usize)> = pairs.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
        Self::from_directed(name, features, labels, class_count, &directed)
    }

    /// Builds a graph from directed pairs as given (plus self-loops).
    pub fn from_directed(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(CsaError::invalid(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        let n = features.rows();
        if labels.len() != n {
            return Err(CsaError::invalid(format!("{} labels for {} nodes", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(CsaError::invalid(format!("label {bad} outside [0, {class_count})")));
        }
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(pairs.len() + n);
        for &(s, d) in pairs {
            if s >= n || d >= n {
                return Err(CsaError::invalid(format!(
                    "edge ({s}, {d}) references a node outside [0, {n})"
                )));
            }
            edges.push((d, s));
        }
        edges.extend((0..n).map(|v| (v, v)));
        edges.sort_unstable();
        edges.dedup();

        let mut offsets = vec![0; n + 1];
        for &(d, _) in &edges {
            offsets[d + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut self_loops = vec![0; n];
        for (e, &(d, s)) in edges.iter().enumerate() {
            if d == s {
                self_loops[d] = e;
            }
        }
        let src: Vec<usize> = edges.iter().map(|&(_, s)| s).collect();
        let dst: Vec<usize> = edges.iter().map(|&(d, _)| d).collect();
        Ok(Self {
            name: name.into(),
            sparse_features: Arc::new(CsrMatrix::from_dense(&features)),
            features,
            labels: labels.into(),
            class_count,
            src: src.into(),
            dst: dst.into(),
            offsets,
            self_loops,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Directed edge count, self-loops included.
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// The node features in CSR form, shared across forward passes.
    pub fn sparse_features(&self) -> &Arc<CsrMatrix> {
        &self.sparse_features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_arc(&self) -> Arc<[usize]> {
        self.labels.clone()
    }

    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    /// Iterator over directed `(src, dst)` edges in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    /// Edge-index range of the incoming edges of `node`.
    pub fn incoming(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    /// Number of incoming edges, self-loop included.
    pub fn in_degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn self_loop_edge(&self, node: usize) -> usize {
        self.self_loops[node]
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.src[self.incoming(dst)].binary_search(&src).is_ok()
    }

    /// Unordered non-self node pairs `{u, v}` joined by an edge in either direction.
    pub fn undirected_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .edges()
            .filter(|(s, d)| s != d)
            .map(|(s, d)| (s.min(d), s.max(d)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    /// Same structure and labels with replaced node features.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(CsaError::shape(
                "with_features",
                self.features.shape(),
                features.shape(),
            ));
        }
        Ok(Self {
            sparse_features: Arc::new(CsrMatrix::from_dense(&features)),
            features,
            ..self.clone()
        })
    }

    /// Same nodes with an edge set rebuilt from undirected pairs.
    pub fn with_undirected_pairs(&self, pairs: &[(usize, usize)]) -> Result<Self> {
        Graph::from_undirected(
            self.name.clone(),
            self.features.clone(),
            self.labels.to_vec(),
            self.class_count,
            pairs,
        )
    }
}

/// Mean over nodes of the fraction of non-self neighbours sharing the node's label.
///
/// Self-loops are ignored and nodes without other neighbours are left out of
/// the average.
pub fn node_homophily(g: &Graph) -> Result<f64> {
    let labels = g.labels();
    let mut total = 0.0;
    let mut counted = 0usize;
    for v in 0..g.num_nodes() {
        let mut same = 0usize;
        let mut deg = 0usize;
        for e in g.incoming(v) {
            let u = g.src()[e];
            if u == v {
                continue;
            }
            deg += 1;
            if labels[u] == labels[v] {
                same += 1;
            }
        }
        if deg > 0 {
            total += same as f64 / deg as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(CsaError::invalid("no non-trivial edges"));
    }
    Ok(total / counted as f64)
}
