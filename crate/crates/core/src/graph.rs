//! Undirected community graphs, GCN normalization, edge splits and
//! descriptive statistics.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// An unordered node pair stored as `(min, max)`.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    labels: Vec<String>,
    edges: BTreeSet<Edge>,
}

impl Graph {
    pub fn new(labels: Vec<String>) -> Self {
        Graph {
            labels,
            edges: BTreeSet::new(),
        }
    }

    /// Graph with nodes labelled `0..n`.
    pub fn with_nodes(n: usize) -> Self {
        Graph::new((0..n).map(|i| i.to_string()).collect())
    }

    pub fn from_edges(labels: Vec<String>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut g = Graph::new(labels);
        for (a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    /// Builds a graph from labelled pairs, registering nodes in
    /// first-appearance order. Duplicate edges are merged.
    pub fn from_labeled_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut intern = |s: &str| -> usize {
            *index.entry(s.to_string()).or_insert_with(|| {
                labels.push(s.to_string());
                labels.len() - 1
            })
        };
        let idx: Vec<Edge> = pairs
            .iter()
            .map(|(a, b)| (intern(a.as_ref()), intern(b.as_ref())))
            .collect();
        let mut g = Graph::new(labels);
        for (a, b) in idx {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    /// Inserts an undirected edge. Returns `false` if it was already present.
    pub fn add_edge(&mut self, a: usize, b: usize) -> Result<bool> {
        let n = self.node_count();
        if a >= n || b >= n {
            return Err(Error::InvalidInput(format!(
                "edge ({a}, {b}) out of range for {n} nodes"
            )));
        }
        if a == b {
            return Err(Error::InvalidInput(format!("self-loop on node {a}")));
        }
        Ok(self.edges.insert(ordered(a, b)))
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Edges in ascending `(min, max)` order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&ordered(a, b))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count()];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Same node set, restricted to `edges`.
    pub fn with_edge_subset(&self, edges: &[Edge]) -> Result<Graph> {
        Graph::from_edges(self.labels.clone(), edges.iter().copied())
    }

    /// Every unordered non-adjacent pair, ascending.
    pub fn non_edges(&self) -> Vec<Edge> {
        let n = self.node_count();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if !self.edges.contains(&(a, b)) {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

#[inline]
pub fn ordered(a: usize, b: usize) -> Edge {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalized_adjacency(g: &Graph) -> Matrix {
    let n = g.node_count();
    let inv_sqrt: Vec<f64> = g
        .degrees()
        .into_iter()
        .map(|d| 1.0 / ((d + 1) as f64).sqrt())
        .collect();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = inv_sqrt[i] * inv_sqrt[i];
    }
    for (a, b) in g.edges() {
        let w = inv_sqrt[a] * inv_sqrt[b];
        m[(a, b)] = w;
        m[(b, a)] = w;
    }
    m
}

/// Train/dev/test partition of a graph's edges with frozen evaluation negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub train: Vec<Edge>,
    pub dev: Vec<Edge>,
    pub test: Vec<Edge>,
    pub dev_negatives: Vec<Edge>,
    pub test_negatives: Vec<Edge>,
    pub seed: u64,
}

impl EdgeSplit {
    pub fn train_graph(&self, g: &Graph) -> Result<Graph> {
        g.with_edge_subset(&self.train)
    }
}

/// Sizes for a floor-rule three-way split; the remainder goes to the first part.
pub(crate) fn floor_allocation(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let dev = (b * n as f64 + 1e-9).floor() as usize;
    let test = (c * n as f64 + 1e-9).floor() as usize;
    Ok((n - dev - test, dev, test))
}

/// Uniformly random edge partition; dev/test each get an equal number of
/// negatives sampled without replacement from the non-edges, disjoint from
/// each other.
pub fn split_edges(g: &Graph, ratios: (f64, f64, f64), seed: u64) -> Result<EdgeSplit> {
    let m = g.edge_count();
    if m < 5 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 edges to split, graph has {m}"
        )));
    }
    let (_, n_dev, n_test) = floor_allocation(m, ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<Edge> = g.edges().collect();
    edges.shuffle(&mut rng);
    let test: Vec<Edge> = edges.split_off(m - n_test);
    let dev: Vec<Edge> = edges.split_off(m - n_test - n_dev);
    let train = edges;

    let mut negatives = draw_non_edges(g, n_dev + n_test, &mut rng)?;
    let test_negatives = negatives.split_off(n_dev);
    let dev_negatives = negatives;

    Ok(EdgeSplit {
        train: sorted(train),
        dev: sorted(dev),
        test: sorted(test),
        dev_negatives: sorted(dev_negatives),
        test_negatives: sorted(test_negatives),
        seed,
    })
}

/// `m` distinct non-adjacent pairs sampled uniformly without replacement.
pub fn sample_negatives(g: &Graph, m: usize, seed: u64) -> Result<Vec<Edge>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_non_edges(g, m, &mut rng).map(sorted)
}

fn draw_non_edges(g: &Graph, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Edge>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut pool = g.non_edges();
    if pool.len() < m {
        return Err(Error::InsufficientNonEdges {
            requested: m,
            available: pool.len(),
        });
    }
    let (chosen, _) = pool.partial_shuffle(rng, m);
    Ok(chosen.to_vec())
}

fn sorted(mut v: Vec<Edge>) -> Vec<Edge> {
    v.sort_unstable();
    v
}

/// Descriptive statistics of a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub density: f64,
    pub avg_degree: f64,
    /// Mean BFS distance over reachable unordered pairs; 0 when there are none.
    pub avg_shortest_path: f64,
    /// Newman modularity of the supplied partition.
    pub modularity: Option<f64>,
}

pub fn graph_stats(g: &Graph, partition: Option<&[usize]>) -> Result<GraphStats> {
    let n = g.node_count();
    let m = g.edge_count();
    let density = if n > 1 {
        2.0 * m as f64 / (n as f64 * (n - 1) as f64)
    } else {
        0.0
    };
    let avg_degree = if n > 0 {
        2.0 * m as f64 / n as f64
    } else {
        0.0
    };

    let adj = g.adjacency_lists();
    let mut total = 0u64;
    let mut pairs = 0u64;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &d in &dist[s + 1..] {
            if d != usize::MAX {
                total += d as u64;
                pairs += 1;
            }
        }
    }
    let avg_shortest_path = if pairs > 0 {
        total as f64 / pairs as f64
    } else {
        0.0
    };

    let modularity = partition.map(|p| modularity(g, p)).transpose()?;
    Ok(GraphStats {
        nodes: n,
        edges: m,
        density,
        avg_degree,
        avg_shortest_path,
        modularity,
    })
}

/// `Q = Σ_c (e_cc − a_c²)` for a node → community assignment.
pub fn modularity(g: &Graph, partition: &[usize]) -> Result<f64> {
    if partition.len() != g.node_count() {
        return Err(Error::InvalidInput(format!(
            "partition covers {} nodes, graph has {}",
            partition.len(),
            g.node_count()
        )));
    }
    let m = g.edge_count();
    if m == 0 {
        return Ok(0.0);
    }
    let k = partition.iter().max().map_or(0, |&c| c + 1);
    let mut inside = vec![0usize; k];
    let mut ends = vec![0usize; k];
    for (a, b) in g.edges() {
        ends[partition[a]] += 1;
        ends[partition[b]] += 1;
        if partition[a] == partition[b] {
            inside[partition[a]] += 1;
        }
    }
    let m = m as f64;
    Ok((0..k)
        .map(|c| inside[c] as f64 / m - (ends[c] as f64 / (2.0 * m)).powi(2))
        .sum())
}
