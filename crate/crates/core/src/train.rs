//! Training regime, MAUC evaluation, grid search and truncation curves.
//!
//! One superepoch visits every train concept once in a shuffled order. Each
//! visit is one forward/backward pass over the train edges; gradients are
//! averaged over `accumulation` concepts before an Adam step, which is
//! followed by the structured prox on `W0`.

use std::cmp::Ordering;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{floor_allocation, normalized_adjacency, split_edges, Edge, EdgeSplit, Graph};
use crate::linalg::{row_norms, Matrix};
use crate::model::{
    backward, forward_propagated, loss, Gradients, LinkTarget, ModelConfig, RotationGAE,
};
use crate::optim::{active_rows, apply_structured_prox, AdamState, ProxConfig, ProxMode};

/// Derives an independent stream seed from a base seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EDGES: u64 = 1;
const STREAM_CONCEPTS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConceptSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded 60/20/20 split of `n` concept ids, each part sorted.
pub fn split_concepts(n: usize, seed: u64) -> Result<ConceptSplit> {
    let (_, n_dev, n_test) = floor_allocation(n, (0.6, 0.2, 0.2))?;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = ids.split_off(n - n_test);
    let mut dev = ids.split_off(n - n_test - n_dev);
    ids.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    Ok(ConceptSplit {
        train: ids,
        dev,
        test,
        seed,
    })
}

/// Everything a trial needs, with the per-concept message passing `Â X`
/// precomputed over the train adjacency.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    pub embeddings: EmbeddingTable,
    pub edges: EdgeSplit,
    pub concepts: ConceptSplit,
    pub a_norm: Matrix,
    pub target: LinkTarget,
    propagated: Vec<Matrix>,
}

impl Dataset {
    /// Splits edges and concepts with seeds derived from `seed`.
    pub fn new(graph: Graph, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        let edges = split_edges(&graph, (0.6, 0.2, 0.2), derive_seed(seed, STREAM_EDGES))?;
        let concepts = split_concepts(
            embeddings.concept_count(),
            derive_seed(seed, STREAM_CONCEPTS),
        )?;
        Dataset::with_splits(graph, embeddings, edges, concepts)
    }

    pub fn with_splits(
        graph: Graph,
        embeddings: EmbeddingTable,
        edges: EdgeSplit,
        concepts: ConceptSplit,
    ) -> Result<Self> {
        if embeddings.nodes().len() != graph.node_count() {
            return Err(Error::Dimension(format!(
                "graph has {} nodes, embeddings have {}",
                graph.node_count(),
                embeddings.nodes().len()
            )));
        }
        if concepts.train.is_empty() {
            return Err(Error::InvalidInput("no train concepts".into()));
        }
        let train_graph = edges.train_graph(&graph)?;
        let a_norm = normalized_adjacency(&train_graph);
        let target = LinkTarget::from_graph(&train_graph);
        let propagated = embeddings
            .matrices()
            .iter()
            .map(|x| a_norm.matmul(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            graph,
            embeddings,
            edges,
            concepts,
            a_norm,
            target,
            propagated,
        })
    }

    pub fn d(&self) -> usize {
        self.embeddings.d()
    }

    /// `Â X` for a concept.
    pub fn propagated(&self, concept: usize) -> &Matrix {
        &self.propagated[concept]
    }

    pub fn concept_label(&self, concept: usize) -> &str {
        &self.embeddings.concepts()[concept]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Dev,
    Test,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Dev => "dev",
            Which::Test => "test",
        }
    }
}

/// Mann–Whitney AUC: pairs ranked correctly plus half the ties, over all pairs.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidInput(format!(
            "auc needs scores on both sides, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    crate::linalg::check_finite(pos)?;
    crate::linalg::check_finite(neg)?;
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = sorted_neg.partition_point(|&n| n < p);
        let not_above = sorted_neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

fn edge_scores(logits: &Matrix, edges: &[Edge]) -> Vec<f64> {
    edges.iter().map(|&(a, b)| logits[(a, b)]).collect()
}

/// AUC of one concept on the held-out edges of `which` against the frozen
/// negatives.
pub fn concept_auc(
    model: &RotationGAE,
    data: &Dataset,
    concept: usize,
    which: Which,
) -> Result<f64> {
    if concept >= data.embeddings.concept_count() {
        return Err(Error::InvalidInput(format!(
            "no embeddings for concept id {concept}"
        )));
    }
    let (pos, neg) = match which {
        Which::Dev => (&data.edges.dev, &data.edges.dev_negatives),
        Which::Test => (&data.edges.test, &data.edges.test_negatives),
    };
    let (logits, _) = forward_propagated(model, &data.a_norm, data.propagated(concept).clone())?;
    auc(&edge_scores(&logits, pos), &edge_scores(&logits, neg))
        .map_err(|e| Error::InvalidInput(format!("concept {:?}: {e}", data.concept_label(concept))))
}

/// Mean AUC over the dev or test concepts, with the per-concept values in
/// concept-id order.
pub fn evaluate_mauc(model: &RotationGAE, data: &Dataset, which: Which) -> Result<(f64, Vec<f64>)> {
    let ids = match which {
        Which::Dev => &data.concepts.dev,
        Which::Test => &data.concepts.test,
    };
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("no {} concepts", which.name())));
    }
    let aucs = ids
        .iter()
        .map(|&c| concept_auc(model, data, c, which))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&aucs), aucs))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn default_superepochs() -> usize {
    100
}
fn default_accumulation() -> usize {
    10
}
fn default_learning_rates() -> Vec<f64> {
    vec![1e-4, 3e-4, 1e-3]
}
fn default_lambda_o() -> Vec<f64> {
    vec![1e-3, 3e-3, 1e-2]
}
fn default_lambda_s() -> Vec<f64> {
    vec![1e-2, 3e-2, 1e-1]
}
fn default_hidden() -> usize {
    10
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_superepochs")]
    pub superepochs: usize,
    /// Concepts per optimizer step.
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_lambda_o")]
    pub lambda_o: Vec<f64>,
    #[serde(default = "default_lambda_s")]
    pub lambda_s: Vec<f64>,
    #[serde(default)]
    pub prox_mode: ProxMode,
    #[serde(default = "default_hidden")]
    pub h1: usize,
    #[serde(default = "default_hidden")]
    pub h2: usize,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    #[serde(default = "default_true")]
    pub rotate: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            superepochs: default_superepochs(),
            accumulation: default_accumulation(),
            learning_rates: default_learning_rates(),
            lambda_o: default_lambda_o(),
            lambda_s: default_lambda_s(),
            prox_mode: ProxMode::default(),
            h1: default_hidden(),
            h2: default_hidden(),
            use_bias: true,
            rotate: true,
            seed: 0,
        }
    }
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub learning_rate: f64,
    pub lambda_o: f64,
    pub lambda_s: f64,
}

impl TrainConfig {
    /// Longer, smaller grid tuned for the planted benchmark, whose gradients
    /// are an order of magnitude larger than those the default grid expects.
    pub fn benchmark() -> TrainConfig {
        TrainConfig {
            superepochs: 300,
            learning_rates: vec![3e-3, 1e-2],
            lambda_o: vec![1e-2],
            lambda_s: vec![2e-2, 3e-2],
            ..TrainConfig::default()
        }
    }

    /// Same settings for the model that neither rotates nor shrinks.
    pub fn baseline(&self) -> TrainConfig {
        TrainConfig {
            rotate: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.lambda_o.is_empty() || self.lambda_s.is_empty() {
            return Err(Error::InvalidInput(
                "hyperparameter grids must be non-empty".into(),
            ));
        }
        if self.accumulation == 0 {
            return Err(Error::InvalidInput(
                "accumulation must be at least 1".into(),
            ));
        }
        let all = self
            .learning_rates
            .iter()
            .chain(&self.lambda_o)
            .chain(&self.lambda_s);
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "grid values must be finite and non-negative".into(),
            ));
        }
        if self.learning_rates.iter().any(|&r| r <= 0.0) {
            return Err(Error::InvalidInput(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Grid in lexicographic `(r, λ_o, λ_s)` order. Without rotation only the
    /// learning rate is searched and both penalties are zero.
    pub fn grid(&self) -> Vec<TrialPoint> {
        let mut points = Vec::new();
        for &learning_rate in &self.learning_rates {
            if !self.rotate {
                points.push(TrialPoint {
                    learning_rate,
                    lambda_o: 0.0,
                    lambda_s: 0.0,
                });
                continue;
            }
            for &lambda_o in &self.lambda_o {
                for &lambda_s in &self.lambda_s {
                    points.push(TrialPoint {
                        learning_rate,
                        lambda_o,
                        lambda_s,
                    });
                }
            }
        }
        points
    }

    pub fn model_config(&self, d: usize, point: &TrialPoint) -> ModelConfig {
        ModelConfig {
            d,
            h1: self.h1,
            h2: self.h2,
            lambda_o: point.lambda_o,
            lambda_s: point.lambda_s,
            rotate: self.rotate,
            use_bias: self.use_bias,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub point: TrialPoint,
    pub rotate: bool,
    pub prox_mode: ProxMode,
    pub superepochs: usize,
    #[serde(skip)]
    pub model: RotationGAE,
    pub dev_mauc: f64,
    pub test_mauc: f64,
    pub dev_aucs: Vec<f64>,
    pub test_aucs: Vec<f64>,
    pub d_star: usize,
    pub parameter_count: usize,
    /// Mean prediction loss over the last superepoch.
    pub final_loss: f64,
    pub optimizer_steps: usize,
    pub seconds: f64,
}

/// Trains one configuration from a fresh initialization.
pub fn train_trial(
    data: &Dataset,
    config: &TrainConfig,
    point: &TrialPoint,
    seed: u64,
) -> Result<TrialResult> {
    let model = RotationGAE::init(&config.model_config(data.d(), point), seed)?;
    train_from(data, config, point, model, seed)
}

/// Trains `model` in place of a fresh initialization; its architecture must
/// match the config.
pub fn train_from(
    data: &Dataset,
    config: &TrainConfig,
    point: &TrialPoint,
    mut model: RotationGAE,
    seed: u64,
) -> Result<TrialResult> {
    config.validate()?;
    let start = Instant::now();
    let model_config = config.model_config(data.d(), point);
    let arch = model.architecture();
    if (arch.d, arch.h1, arch.h2, arch.rotate, arch.use_bias)
        != (
            model_config.d,
            model_config.h1,
            model_config.h2,
            model_config.rotate,
            model_config.use_bias,
        )
    {
        return Err(Error::InvalidInput(
            "model architecture does not match the training config".into(),
        ));
    }
    let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(point.learning_rate, &lens);
    let prox = ProxConfig::new(
        if config.rotate { point.lambda_s } else { 0.0 },
        config.prox_mode,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));

    let mut acc = Gradients::zeros_like(&model);
    let mut pending = 0usize;
    let mut steps = 0usize;
    let mut final_loss = f64::NAN;
    let mut order = data.concepts.train.clone();

    let mut step =
        |model: &mut RotationGAE, acc: &mut Gradients, pending: &mut usize| -> Result<()> {
            acc.scale(1.0 / *pending as f64);
            adam.step(&mut model.tensors_mut(), &acc.tensors())?;
            apply_structured_prox(&mut model.w0, &adam, 1, &prox)?;
            *acc = Gradients::zeros_like(model);
            *pending = 0;
            Ok(())
        };

    for superepoch in 0..config.superepochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &c in &order {
            let (logits, cache) =
                forward_propagated(&model, &data.a_norm, data.propagated(c).clone())?;
            let parts = loss(&logits, &data.target, &model, &model_config)?;
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {} at superepoch {superepoch}, concept {:?} (r={}, lambda_o={}, lambda_s={})",
                    parts.total,
                    data.concept_label(c),
                    point.learning_rate,
                    point.lambda_o,
                    point.lambda_s
                )));
            }
            loss_sum += parts.prediction;
            let grads = backward(&cache, &data.a_norm, &data.target, &model, &model_config)?;
            acc.add_scaled(1.0, &grads);
            pending += 1;
            if pending == config.accumulation {
                step(&mut model, &mut acc, &mut pending)?;
                steps += 1;
            }
        }
        if pending > 0 {
            step(&mut model, &mut acc, &mut pending)?;
            steps += 1;
        }
        final_loss = loss_sum / order.len() as f64;
        if superepoch % 10 == 0 {
            log::debug!("superepoch {superepoch}: prediction loss {final_loss:.5}");
        }
    }
    if !model.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }

    let (dev_mauc, dev_aucs) = evaluate_mauc(&model, data, Which::Dev)?;
    let (test_mauc, test_aucs) = evaluate_mauc(&model, data, Which::Test)?;
    Ok(TrialResult {
        point: *point,
        rotate: config.rotate,
        prox_mode: config.prox_mode,
        superepochs: config.superepochs,
        d_star: active_rows(&model.w0).len(),
        parameter_count: model.parameter_count(),
        model,
        dev_mauc,
        test_mauc,
        dev_aucs,
        test_aucs,
        final_loss,
        optimizer_steps: steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Higher dev MAUC first, then smaller `d_star`, then the smaller
/// `(r, λ_o, λ_s)` tuple.
pub fn compare_trials(a: &TrialResult, b: &TrialResult) -> Ordering {
    b.dev_mauc
        .total_cmp(&a.dev_mauc)
        .then(a.d_star.cmp(&b.d_star))
        .then(a.point.learning_rate.total_cmp(&b.point.learning_rate))
        .then(a.point.lambda_o.total_cmp(&b.point.lambda_o))
        .then(a.point.lambda_s.total_cmp(&b.point.lambda_s))
}

/// Index of the winning trial.
pub fn select_best(trials: &[TrialResult]) -> Option<usize> {
    (0..trials.len()).min_by(|&i, &j| compare_trials(&trials[i], &trials[j]).then(i.cmp(&j)))
}

#[derive(Debug, Clone)]
pub struct TrialFailure {
    pub point: TrialPoint,
    pub message: String,
    pub numerical: bool,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Successful trials in grid order.
    pub trials: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
    pub best: usize,
}

impl GridOutcome {
    pub fn best(&self) -> &TrialResult {
        &self.trials[self.best]
    }
}

/// Runs every grid point from the same initialization seed. Failed trials
/// are reported; the search errors only if all of them fail.
pub fn grid_search(data: &Dataset, config: &TrainConfig) -> Result<GridOutcome> {
    config.validate()?;
    let points = config.grid();
    let results = exec::map(&points, |p| train_trial(data, config, p, config.seed));
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    let mut last_error = None;
    for (p, r) in points.iter().zip(results) {
        match r {
            Ok(t) => trials.push(t),
            Err(e) => {
                log::warn!("trial {p:?} failed: {e}");
                failures.push(TrialFailure {
                    point: *p,
                    message: e.to_string(),
                    numerical: e.is_numerical(),
                });
                last_error = Some(e);
            }
        }
    }
    match select_best(&trials) {
        Some(best) => Ok(GridOutcome {
            trials,
            failures,
            best,
        }),
        None => Err(last_error.unwrap_or_else(|| Error::InvalidInput("empty grid".into()))),
    }
}

/// Rows of `W0` ordered by descending norm, ties by index.
pub fn ranked_rows(w0: &Matrix) -> Vec<usize> {
    let norms = row_norms(w0);
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx
}

/// Copy of `model` with every `W0` row outside `keep` set to zero.
pub fn keep_rows(model: &RotationGAE, keep: &[usize]) -> RotationGAE {
    let mut out = model.clone();
    let mut mask = vec![false; model.d];
    for &k in keep {
        mask[k] = true;
    }
    for (j, keep) in mask.into_iter().enumerate() {
        if !keep {
            out.w0.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Model truncated to its `size` largest `W0` rows.
pub fn truncate_top(model: &RotationGAE, size: usize) -> RotationGAE {
    let ranked = ranked_rows(&model.w0);
    keep_rows(model, &ranked[..size.min(ranked.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub size: usize,
    pub mauc: f64,
}

/// Dev MAUC of the top-`k` truncation for `k = 1..=min(max_size, d)`.
pub fn mauc_curve(model: &RotationGAE, data: &Dataset, max_size: usize) -> Result<Vec<CurvePoint>> {
    if max_size == 0 {
        return Err(Error::InvalidInput("curve sizes start at 1".into()));
    }
    let sizes: Vec<usize> = (1..=max_size.min(model.d)).collect();
    exec::map(&sizes, |&size| {
        let (mauc, _) = evaluate_mauc(&truncate_top(model, size), data, Which::Dev)?;
        Ok(CurvePoint { size, mauc })
    })
    .into_iter()
    .collect()
}
