//! Planted-subspace benchmark: a stochastic block model whose concept
//! embeddings carry block information only inside a known rotated
//! `k`-dimensional subspace.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::{write_edge_list, write_partition};
use crate::linalg::{dot, orthonormalize, Matrix};
use crate::subspace::SubspaceProjector;

fn d40() -> usize {
    40
}
fn d2() -> usize {
    2
}
fn d05() -> f64 {
    0.5
}
fn d002() -> f64 {
    0.02
}
fn d32() -> usize {
    32
}
fn d3() -> usize {
    3
}
fn d50() -> usize {
    50
}
fn d1() -> f64 {
    1.0
}
fn d03() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedParams {
    #[serde(default = "d40")]
    pub n_nodes: usize,
    #[serde(default = "d2")]
    pub n_blocks: usize,
    #[serde(default = "d05")]
    pub p_in: f64,
    #[serde(default = "d002")]
    pub p_out: f64,
    #[serde(default = "d32")]
    pub d: usize,
    #[serde(default = "d3")]
    pub k: usize,
    #[serde(default = "d50")]
    pub n_concepts: usize,
    #[serde(default = "d1")]
    pub signal_strength: f64,
    #[serde(default = "d03")]
    pub noise: f64,
    /// Standard deviation of the per-concept mean shared by all nodes on
    /// the unplanted coordinates.
    #[serde(default = "d1")]
    pub offset_strength: f64,
    /// Per-concept multipliers of the signal strength, cycled over concept
    /// ids. Empty means 1 for every concept.
    #[serde(default)]
    pub signal_schedule: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            n_nodes: d40(),
            n_blocks: d2(),
            p_in: d05(),
            p_out: d002(),
            d: d32(),
            k: d3(),
            n_concepts: d50(),
            signal_strength: d1(),
            noise: d03(),
            offset_strength: d1(),
            signal_schedule: Vec::new(),
            seed: 0,
        }
    }
}

impl PlantedParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return bad(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            ));
        }
        if self.k > self.d || self.d == 0 {
            return bad(format!(
                "need 0 <= k <= d and d >= 1, got k={} d={}",
                self.k, self.d
            ));
        }
        if self.n_blocks == 0 || self.n_blocks > self.n_nodes {
            return bad(format!(
                "need 1 <= n_blocks <= n_nodes, got {} blocks for {} nodes",
                self.n_blocks, self.n_nodes
            ));
        }
        if self.n_concepts == 0 {
            return bad("need at least one concept".into());
        }
        let scalars = [self.signal_strength, self.noise, self.offset_strength];
        if scalars
            .iter()
            .chain(&self.signal_schedule)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("signal and noise scales must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Signal multiplier of a concept.
    pub fn concept_signal(&self, concept: usize) -> f64 {
        if self.signal_schedule.is_empty() {
            1.0
        } else {
            self.signal_schedule[concept % self.signal_schedule.len()]
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub graph: Graph,
    /// Block of each node.
    pub communities: Vec<usize>,
    pub q_true: Matrix,
    pub embeddings: EmbeddingTable,
    /// Parameters with `seed` set to the seed actually used.
    pub params: PlantedParams,
    /// Whether the sampled graph is connected; disconnected draws are kept.
    pub connected: bool,
    pub isolated_nodes: usize,
}

impl PlantedInstance {
    /// First `k` columns of `q_true`.
    pub fn planted_basis(&self) -> Vec<Vec<f64>> {
        (0..self.params.k).map(|j| self.q_true.col(j)).collect()
    }
}

fn connected_components(g: &Graph) -> usize {
    let adj = g.adjacency_lists();
    let mut seen = vec![false; g.node_count()];
    let mut components = 0;
    for s in 0..g.node_count() {
        if seen[s] {
            continue;
        }
        components += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    components
}

/// Random orthogonal matrix: Gram–Schmidt on the columns of a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let q = orthonormalize(&cols)?;
    let mut m = Matrix::zeros(d, d);
    for (j, c) in q.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub fn generate_planted(params: &PlantedParams, seed: u64) -> Result<PlantedInstance> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_nodes;
    let communities: Vec<usize> = (0..n).map(|i| i * params.n_blocks / n).collect();
    let labels: Vec<String> = (0..n).map(|i| format!("node{i:03}")).collect();

    let mut graph = Graph::new(labels.clone());
    for i in 0..n {
        for j in i + 1..n {
            let p = if communities[i] == communities[j] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.random_bool(p) {
                graph.add_edge(i, j)?;
            }
        }
    }

    let q_true = random_orthogonal(params.d, &mut rng)?;
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let k = params.k;
    let d = params.d;
    let mut matrices = Vec::with_capacity(params.n_concepts);
    for c in 0..params.n_concepts {
        let sig = Normal::new(0.0, params.signal_strength * params.concept_signal(c))
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let shared = Normal::new(0.0, params.offset_strength)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let block_means: Vec<Vec<f64>> = (0..params.n_blocks)
            .map(|_| (0..k).map(|_| sig.sample(&mut rng)).collect())
            .collect();
        let concept_mean: Vec<f64> = (0..d - k).map(|_| shared.sample(&mut rng)).collect();
        let mut latent = Matrix::zeros(n, d);
        for (i, &g) in communities.iter().enumerate() {
            let row = latent.row_mut(i);
            for j in 0..k {
                row[j] = block_means[g][j] + noise.sample(&mut rng);
            }
            for j in k..d {
                row[j] = concept_mean[j - k] + noise.sample(&mut rng);
            }
        }
        // Row x_i = Q z_i, so X = Z Qᵀ.
        matrices.push(latent.matmul_t(&q_true)?);
    }
    let concepts = (0..params.n_concepts)
        .map(|c| format!("concept{c:03}"))
        .collect();
    let embeddings = EmbeddingTable::new(d, labels, concepts, matrices)?;

    let isolated_nodes = graph.degrees().iter().filter(|&&x| x == 0).count();
    let connected = connected_components(&graph) == 1;
    if !connected {
        log::info!("planted graph (seed {seed}) is disconnected; kept as drawn");
    }
    Ok(PlantedInstance {
        graph,
        communities,
        q_true,
        embeddings,
        params: PlantedParams {
            seed,
            ..params.clone()
        },
        connected,
        isolated_nodes,
    })
}

/// `‖UᵀV‖²_F / min(|a|, |b|)` for orthonormalized bases `U`, `V`.
pub fn subspace_affinity(basis_a: &[Vec<f64>], basis_b: &[Vec<f64>]) -> Result<f64> {
    if basis_a.is_empty() || basis_b.is_empty() {
        return Err(Error::InvalidInput("affinity needs non-empty bases".into()));
    }
    let d = basis_a[0].len();
    if basis_a.iter().chain(basis_b).any(|v| v.len() != d) {
        return Err(Error::Dimension("basis vectors differ in length".into()));
    }
    let u = orthonormalize(basis_a)?;
    let v = orthonormalize(basis_b)?;
    let mut s = 0.0;
    for a in &u {
        for b in &v {
            s += dot(a, b).powi(2);
        }
    }
    Ok((s / u.len().min(v.len()) as f64).clamp(0.0, 1.0))
}

/// Columns of the projector's rotation at its active indices.
pub fn recovered_basis(projector: &SubspaceProjector) -> Result<Vec<Vec<f64>>> {
    if projector.d_star() == 0 {
        return Err(Error::InvalidInput(
            "projector has no active dimensions".into(),
        ));
    }
    Ok(projector.basis())
}

/// File names written by [`write_instance`].
pub const EDGES_FILE: &str = "edges.tsv";
pub const PARTITION_FILE: &str = "partition.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.toml";
pub const PLANTED_FILE: &str = "planted.toml";
pub const Q_TRUE_FILE: &str = "q_true.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlantedManifest {
    params: PlantedParams,
    q_true: String,
    connected: bool,
    isolated_nodes: usize,
}

/// Ground truth needed to score recovery from disk.
#[derive(Debug, Clone)]
pub struct PlantedTruth {
    pub params: PlantedParams,
    pub q_true: Matrix,
}

impl PlantedTruth {
    pub fn planted_basis(&self) -> Vec<Vec<f64>> {
        (0..self.params.k).map(|j| self.q_true.col(j)).collect()
    }
}

/// Writes edges, partition, embeddings, `q_true` and the planted manifest.
/// Returns the path of the planted manifest.
pub fn write_instance(inst: &PlantedInstance, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_edge_list(&inst.graph, &dir.join(EDGES_FILE))?;
    write_partition(
        inst.graph.labels(),
        &inst.communities,
        &dir.join(PARTITION_FILE),
    )?;
    inst.embeddings.save(&dir.join(EMBEDDINGS_FILE))?;
    let q_path = dir.join(Q_TRUE_FILE);
    let bytes: Vec<u8> = inst
        .q_true
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    std::fs::write(&q_path, bytes).map_err(|e| Error::io(&q_path, e))?;
    let manifest = PlantedManifest {
        params: inst.params.clone(),
        q_true: Q_TRUE_FILE.into(),
        connected: inst.connected,
        isolated_nodes: inst.isolated_nodes,
    };
    let path = dir.join(PLANTED_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_truth(path: &Path) -> Result<PlantedTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: PlantedManifest =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let q_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&m.q_true);
    let bytes = std::fs::read(&q_path).map_err(|e| Error::io(&q_path, e))?;
    let d = m.params.d;
    if bytes.len() != 8 * d * d {
        return Err(Error::format(
            &q_path,
            format!("expected {} bytes, found {}", 8 * d * d, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let q_true = Matrix::from_vec(d, d, data).map_err(|e| Error::format(&q_path, e.to_string()))?;
    Ok(PlantedTruth {
        params: m.params,
        q_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_sq;
    use proptest::prelude::*;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn orth_err(q: &Matrix) -> f64 {
        frobenius_sq(
            &q.matmul_t(q)
                .unwrap()
                .sub(&Matrix::identity(q.rows()))
                .unwrap(),
        )
        .sqrt()
    }

    #[test]
    fn extreme_probabilities_give_two_cliques() {
        let p = PlantedParams {
            p_in: 1.0,
            p_out: 0.0,
            n_nodes: 10,
            n_concepts: 2,
            ..Default::default()
        };
        let inst = generate_planted(&p, 1).unwrap();
        assert_eq!(inst.graph.edge_count(), 2 * 10);
        for (a, b) in inst.graph.edges() {
            assert_eq!(inst.communities[a], inst.communities[b]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = PlantedParams::default();
        let a = generate_planted(&p, 9).unwrap();
        let b = generate_planted(&p, 9).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.q_true, b.q_true);
        assert_eq!(a.graph, b.graph);
        assert_ne!(generate_planted(&p, 10).unwrap().q_true, a.q_true);
    }

    #[test]
    fn noiseless_latent_takes_two_values_per_planted_coordinate() {
        let p = PlantedParams {
            noise: 0.0,
            n_concepts: 4,
            ..Default::default()
        };
        let inst = generate_planted(&p, 2).unwrap();
        for x in inst.embeddings.matrices() {
            let z = x.matmul(&inst.q_true).unwrap();
            for j in 0..p.k {
                let mut vals: Vec<f64> = z.col(j);
                vals.sort_by(f64::total_cmp);
                vals.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
                assert_eq!(vals.len(), 2);
            }
        }
    }

    #[test]
    fn affinity_examples() {
        let e = |i| unit(4, i);
        assert!((subspace_affinity(&[e(0), e(1)], &[e(1), e(0)]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(subspace_affinity(&[e(1)], &[e(2)]).unwrap(), 0.0);
        assert!((subspace_affinity(&[e(1), e(2)], &[e(1), e(3)]).unwrap() - 0.5).abs() < 1e-12);
        assert!(subspace_affinity(&[e(1), e(1)], &[e(2)]).is_err());
        assert!(subspace_affinity(&[], &[e(2)]).is_err());
    }

    #[test]
    fn recovered_basis_examples() {
        let p = SubspaceProjector::new(Matrix::identity(4), vec![0, 3]).unwrap();
        assert_eq!(recovered_basis(&p).unwrap(), vec![unit(4, 0), unit(4, 3)]);
        let perm = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
        let p = SubspaceProjector::new(perm, vec![1]).unwrap();
        assert_eq!(recovered_basis(&p).unwrap(), vec![unit(3, 0)]);
        let empty = SubspaceProjector::new(Matrix::identity(2), vec![]).unwrap();
        assert!(recovered_basis(&empty).is_err());

        let inst = generate_planted(&PlantedParams::default(), 3).unwrap();
        let perfect = SubspaceProjector::new(inst.q_true.clone(), vec![0, 1, 2]).unwrap();
        let a =
            subspace_affinity(&recovered_basis(&perfect).unwrap(), &inst.planted_basis()).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn instance_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate_planted(&PlantedParams::default(), 4).unwrap();
        let path = write_instance(&inst, dir.path()).unwrap();
        let truth = load_truth(&path).unwrap();
        assert_eq!(truth.q_true, inst.q_true);
        assert_eq!(truth.params, inst.params);
        let table = EmbeddingTable::load(&dir.path().join(EMBEDDINGS_FILE)).unwrap();
        assert_eq!(table, inst.embeddings);
    }

    #[test]
    fn invalid_params() {
        let bad = PlantedParams {
            p_in: 0.1,
            p_out: 0.2,
            ..Default::default()
        };
        assert!(generate_planted(&bad, 0).is_err());
        let bad = PlantedParams {
            k: 40,
            ..Default::default()
        };
        assert!(generate_planted(&bad, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn q_true_is_orthogonal(seed in any::<u64>(), d in 1usize..40) {
            let p = PlantedParams { d, k: d.min(3), n_concepts: 1, n_nodes: 4, ..Default::default() };
            let inst = generate_planted(&p, seed).unwrap();
            prop_assert!(orth_err(&inst.q_true) < 1e-10);
        }

        #[test]
        fn planted_span_is_basis_covariant(seed in any::<u64>()) {
            // Rotating everything by M maps the planted span to M times it.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_orthogonal(8, &mut rng).unwrap();
            let m = random_orthogonal(8, &mut rng).unwrap();
            let mq = m.matmul(&q).unwrap();
            let planted: Vec<Vec<f64>> = (0..3).map(|j| q.col(j)).collect();
            let moved: Vec<Vec<f64>> = planted.iter().map(|v| m.mul_vec(v).unwrap()).collect();
            let direct: Vec<Vec<f64>> = (0..3).map(|j| mq.col(j)).collect();
            prop_assert!((subspace_affinity(&moved, &direct).unwrap() - 1.0).abs() < 1e-10);
        }
    }
}
