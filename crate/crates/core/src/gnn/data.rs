//! Synthetic structural graph-classification tasks.
//!
//! Graphs are random spanning trees with extra random edges. Labels come
//! from a structural predicate; the generator rejection-samples so that the
//! first task's classes alternate exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, GraphBatch};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Does the graph contain a triangle?
    Triangle,
    /// Are two nodes of degree >= 3 adjacent?
    DegreeProfile,
}

impl TaskKind {
    pub fn label(&self, g: &Graph) -> bool {
        match self {
            TaskKind::Triangle => has_triangle(g),
            TaskKind::DegreeProfile => {
                let deg = g.degrees();
                g.edges.iter().any(|&(u, v)| deg[u] >= 3 && deg[v] >= 3)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub tasks: Vec<TaskKind>,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Extra edges beyond the spanning tree, as a fraction of node count (upper bound).
    pub extra_edge_ratio: f64,
    /// Width of the one-hot degree features.
    pub feature_dim: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::DegreeProfile],
            min_nodes: 5,
            max_nodes: 35,
            extra_edge_ratio: 0.3,
            feature_dim: 8,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(invalid("at least one task is required"));
        }
        if self.min_nodes < 4 || self.min_nodes > self.max_nodes {
            return Err(invalid(
                "node range must satisfy 4 <= min_nodes <= max_nodes",
            ));
        }
        if self.feature_dim < 2 {
            return Err(invalid("feature_dim must be at least 2"));
        }
        if !(0.0..=4.0).contains(&self.extra_edge_ratio) {
            return Err(invalid("extra_edge_ratio must lie in [0, 4]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub feature_dim: usize,
    pub n_tasks: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Seeded shuffle into `(train, test)` index lists.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.graphs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.graphs.len() as f64) * train_fraction).round() as usize;
        let test = idx.split_off(cut.min(idx.len()));
        (idx, test)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<GraphBatch> {
        GraphBatch::from_graphs(indices.iter().map(|&i| &self.graphs[i]), self.feature_dim)
    }

    /// Consecutive batches of at most `size` graphs over `indices`.
    pub fn batches(&self, indices: &[usize], size: usize) -> Result<Vec<GraphBatch>> {
        if size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        indices.chunks(size).map(|c| self.batch(c)).collect()
    }

    /// Fraction of positive labels for task `t`.
    pub fn positive_rate(&self, t: usize) -> f64 {
        let pos = self.graphs.iter().filter(|g| g.labels[t] > 0.5).count();
        pos as f64 / self.graphs.len().max(1) as f64
    }
}

fn has_triangle(g: &Graph) -> bool {
    let adj = g.adjacency();
    g.edges.iter().any(|&(u, v)| {
        // both lists are sorted
        let (a, b) = (&adj[u], &adj[v]);
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    })
}

fn random_graph<R: Rng>(rng: &mut R, spec: &TaskSpec) -> Graph {
    let n = rng.gen_range(spec.min_nodes..=spec.max_nodes);
    let mut edges = std::collections::BTreeSet::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        edges.insert((u, v));
    }
    let max_extra = (n as f64 * spec.extra_edge_ratio).round() as usize;
    let extra = rng.gen_range(0..=max_extra);
    let mut attempts = 0;
    let mut added = 0;
    while added < extra && attempts < 20 * (extra + 1) {
        attempts += 1;
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && edges.insert((a.min(b), a.max(b))) {
            added += 1;
        }
    }
    Graph {
        n_nodes: n,
        edges: edges.into_iter().collect(),
        labels: Vec::new(),
    }
}

/// Deterministic fallback with the requested first-task label.
fn forced_graph<R: Rng>(rng: &mut R, spec: &TaskSpec, positive: bool) -> Graph {
    let n = rng.gen_range(spec.min_nodes..=spec.max_nodes);
    // a path has no triangle and max degree 2
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (v - 1, v)).collect();
    if positive {
        match spec.tasks[0] {
            TaskKind::Triangle => edges.push((0, 2)),
            TaskKind::DegreeProfile => {
                // nodes 1 and 2 become adjacent hubs
                edges.push((1, 3));
                edges.push((0, 2));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Graph {
        n_nodes: n,
        edges,
        labels: Vec::new(),
    }
}

/// Generates `n_graphs` labeled graphs; identical for identical seeds.
pub fn synth_dataset(seed: u64, n_graphs: usize, spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    if n_graphs == 0 {
        return Err(invalid("n_graphs must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_graphs);
    for i in 0..n_graphs {
        let want = i % 2 == 1;
        let mut g = (0..500)
            .map(|_| random_graph(&mut rng, spec))
            .find(|g| spec.tasks[0].label(g) == want)
            .unwrap_or_else(|| forced_graph(&mut rng, spec, want));
        g.labels = spec
            .tasks
            .iter()
            .map(|t| if t.label(&g) { 1.0 } else { 0.0 })
            .collect();
        graphs.push(g);
    }
    graphs.shuffle(&mut rng);
    Ok(Dataset {
        graphs,
        feature_dim: spec.feature_dim,
        n_tasks: spec.tasks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = TaskSpec::default();
        assert_eq!(
            synth_dataset(7, 50, &spec).unwrap(),
            synth_dataset(7, 50, &spec).unwrap()
        );
        assert_ne!(
            synth_dataset(7, 50, &spec).unwrap(),
            synth_dataset(8, 50, &spec).unwrap()
        );
    }

    #[test]
    fn balanced_and_in_range() {
        for kind in [TaskKind::Triangle, TaskKind::DegreeProfile] {
            let spec = TaskSpec {
                tasks: vec![kind],
                ..TaskSpec::default()
            };
            let d = synth_dataset(1, 200, &spec).unwrap();
            let rate = d.positive_rate(0);
            assert!((0.4..=0.6).contains(&rate), "{kind:?} rate {rate}");
            for g in &d.graphs {
                assert!((spec.min_nodes..=spec.max_nodes).contains(&g.n_nodes));
                assert!(g.edges.len() >= g.n_nodes - 1);
                assert!(g.edges.iter().all(|&(u, v)| u < v && v < g.n_nodes));
                assert_eq!(kind.label(g), g.labels[0] > 0.5);
            }
        }
    }

    #[test]
    fn triangle_predicate() {
        let tri = Graph {
            n_nodes: 3,
            edges: vec![(0, 1), (0, 2), (1, 2)],
            labels: vec![],
        };
        let path = Graph {
            n_nodes: 3,
            edges: vec![(0, 1), (1, 2)],
            labels: vec![],
        };
        assert!(TaskKind::Triangle.label(&tri));
        assert!(!TaskKind::Triangle.label(&path));
    }

    #[test]
    fn rejects_zero_graphs() {
        assert!(synth_dataset(0, 0, &TaskSpec::default()).is_err());
    }
}
