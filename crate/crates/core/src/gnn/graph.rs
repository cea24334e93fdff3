use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// An undirected graph with per-task binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub n_nodes: usize,
    /// Undirected edges, each listed once with `u < v`.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
}

impl Graph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// One-hot node degree, capped at `dim - 1`.
    pub fn node_features(&self, dim: usize) -> Array2<f64> {
        let mut x = Array2::zeros((self.n_nodes, dim));
        if dim == 0 {
            return x;
        }
        for (v, d) in self.degrees().into_iter().enumerate() {
            x[[v, d.min(dim - 1)]] = 1.0;
        }
        x
    }

    /// Relabels nodes: node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (perm[u], perm[v]);
                (a.min(b), a.max(b))
            })
            .collect();
        Graph {
            n_nodes: self.n_nodes,
            edges,
            labels: self.labels.clone(),
        }
    }
}

/// A mini-batch of graphs flattened into one disjoint union.
///
/// Neighbor lists use global node indices and are stored in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    features: Array2<f64>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    graph_of_node: Vec<usize>,
    n_graphs: usize,
    labels: Option<Array2<f64>>,
}

impl GraphBatch {
    /// Builds a batch, checking symmetry, absence of self-loops and that
    /// `graph_of_node` is non-decreasing.
    pub fn new(
        features: Array2<f64>,
        adjacency: Vec<Vec<usize>>,
        graph_of_node: Vec<usize>,
        n_graphs: usize,
        labels: Option<Array2<f64>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if adjacency.len() != n || graph_of_node.len() != n {
            return Err(invalid(
                "adjacency and graph_of_node must have one entry per node",
            ));
        }
        if graph_of_node.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("graph_of_node must be non-decreasing"));
        }
        if graph_of_node.iter().any(|&g| g >= n_graphs) {
            return Err(invalid("graph index out of range"));
        }
        if let Some(l) = &labels {
            if l.nrows() != n_graphs {
                return Err(invalid("labels must have one row per graph"));
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for (v, list) in adjacency.iter().enumerate() {
            for &u in list {
                if u >= n {
                    return Err(invalid(format!("neighbor {u} out of range")));
                }
                if u == v {
                    return Err(invalid(format!("self-loop at node {v}")));
                }
                if graph_of_node[u] != graph_of_node[v] {
                    return Err(invalid("edge crosses graph boundary"));
                }
                if !adjacency[u].contains(&v) {
                    return Err(invalid(format!("asymmetric edge {v} -> {u}")));
                }
                neighbors.push(u);
            }
            offsets.push(neighbors.len());
        }
        Ok(Self {
            features,
            offsets,
            neighbors,
            graph_of_node,
            n_graphs,
            labels,
        })
    }

    /// Batches graphs with one-hot degree features of width `feature_dim`.
    pub fn from_graphs<'a, I>(graphs: I, feature_dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Graph>,
    {
        let graphs: Vec<&Graph> = graphs.into_iter().collect();
        if graphs.is_empty() {
            return Err(invalid("empty batch"));
        }
        let n_total: usize = graphs.iter().map(|g| g.n_nodes).sum();
        let n_tasks = graphs[0].labels.len();
        let mut features = Array2::zeros((n_total, feature_dim));
        let mut adjacency = Vec::with_capacity(n_total);
        let mut graph_of_node = Vec::with_capacity(n_total);
        let mut labels = Array2::zeros((graphs.len(), n_tasks));
        let mut base = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.labels.len() != n_tasks {
                return Err(invalid("graphs disagree on task count"));
            }
            features
                .slice_mut(ndarray::s![base..base + g.n_nodes, ..])
                .assign(&g.node_features(feature_dim));
            for list in g.adjacency() {
                adjacency.push(list.into_iter().map(|u| u + base).collect());
            }
            graph_of_node.extend(std::iter::repeat_n(gi, g.n_nodes));
            for (t, &y) in g.labels.iter().enumerate() {
                labels[[gi, t]] = y;
            }
            base += g.n_nodes;
        }
        let labels = if n_tasks > 0 { Some(labels) } else { None };
        Self::new(features, adjacency, graph_of_node, graphs.len(), labels)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_graphs(&self) -> usize {
        self.n_graphs
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn graph_of_node(&self) -> &[usize] {
        &self.graph_of_node
    }

    pub fn labels(&self) -> Option<&Array2<f64>> {
        self.labels.as_ref()
    }

    /// Same graphs with labels removed.
    pub fn unlabeled(&self) -> GraphBatch {
        GraphBatch {
            labels: None,
            ..self.clone()
        }
    }

    /// `out[v] = scale * x[v] + sum_{u in N(v)} x[u]`.
    pub(crate) fn aggregate(&self, x: &Array2<f64>, self_scale: f64) -> Array2<f64> {
        let mut out = x * self_scale;
        for v in 0..self.n_nodes() {
            let mut row = out.row_mut(v);
            for &u in self.neighbors(v) {
                row += &x.row(u);
            }
        }
        out
    }

    /// Per-graph sum of node rows.
    pub(crate) fn sum_pool(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_graphs, x.ncols()));
        for (v, &g) in self.graph_of_node.iter().enumerate() {
            let mut row = out.row_mut(g);
            row += &x.row(v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph {
            n_nodes: 3,
            edges: vec![(0, 1), (1, 2)],
            labels: vec![1.0],
        }
    }

    #[test]
    fn batch_from_graphs_offsets_indices() {
        let g = path3();
        let b = GraphBatch::from_graphs([&g, &g], 4).unwrap();
        assert_eq!(b.n_nodes(), 6);
        assert_eq!(b.n_graphs(), 2);
        assert_eq!(b.neighbors(4), &[3, 5]);
        assert_eq!(b.graph_of_node(), &[0, 0, 0, 1, 1, 1]);
        // degree one-hot
        assert_eq!(b.features()[[1, 2]], 1.0);
        assert_eq!(b.features()[[0, 1]], 1.0);
    }

    #[test]
    fn rejects_asymmetric_and_self_loops() {
        let x = Array2::zeros((2, 1));
        assert!(GraphBatch::new(x.clone(), vec![vec![1], vec![]], vec![0, 0], 1, None).is_err());
        assert!(GraphBatch::new(x.clone(), vec![vec![0], vec![]], vec![0, 0], 1, None).is_err());
        assert!(GraphBatch::new(x.clone(), vec![vec![], vec![]], vec![1, 0], 2, None).is_err());
        assert!(GraphBatch::new(x, vec![vec![1], vec![0]], vec![0, 0], 1, None).is_ok());
    }

    #[test]
    fn aggregate_and_pool() {
        let g = Graph {
            n_nodes: 2,
            edges: vec![(0, 1)],
            labels: vec![],
        };
        let b = GraphBatch::from_graphs([&g], 1).unwrap();
        let x = ndarray::array![[1.0], [2.0]];
        assert_eq!(b.aggregate(&x, 1.0), ndarray::array![[3.0], [3.0]]);
        assert_eq!(b.sum_pool(&x), ndarray::array![[3.0]]);
    }
}
