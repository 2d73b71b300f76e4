//! Manifest-driven end-to-end run: grid search, truncation curve and knee,
//! projector, per-concept dispersion, PCA views, recovery scoring and the
//! optional probes.
//!
//! Every CSV goes through [`CsvWriter`], so reruns with the same manifest
//! produce identical bytes. Wall-clock times only appear in
//! `results.jsonl`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::io::{
    read_axis_pairs, read_edge_list_with_nodes, read_node_labels, read_partition, read_ratings,
    CsvWriter,
};
use crate::knee::{knee_select, Knee};
use crate::linalg::{pca_top2, Matrix};
use crate::model::{save_checkpoint, RotationGAE};
use crate::probe::{
    discordant_counts, logreg_fit, mcnemar, ols_r2, welch_t, LabeledSet, LogRegOptions, OlsResult,
    TestResult, WelchResult,
};
use crate::subspace::{
    axis_score, compare_rating_extremes, dispersion, mutual_nn_filter, AxisPair, AxisScore,
    RatingComparison, SubspaceProjector,
};
use crate::svg::emit_svg_scatter;
use crate::synth::{load_truth, recovered_basis, subspace_affinity, PlantedTruth};
use crate::train::{
    concept_auc, derive_seed, grid_search, mauc_curve, mean, std_dev, truncate_top, CurvePoint,
    Dataset, GridOutcome, TrainConfig, Which,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const FAILED_MARKER: &str = "FAILED";
pub const BEST_CHECKPOINT: &str = "best.bin";
pub const BASELINE_CHECKPOINT: &str = "baseline.bin";
pub const PROJECTOR_CHECKPOINT: &str = "projector.bin";

const STREAM_PROBE: u64 = 4;

fn default_version() -> u32 {
    MANIFEST_VERSION
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_true() -> bool {
    true
}
fn default_curve_max() -> usize {
    100
}
fn default_min_freq() -> u64 {
    100
}
fn default_top_n() -> usize {
    100
}
fn default_l2() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub edges: PathBuf,
    pub embeddings: PathBuf,
    /// `node<TAB>group`, used to color the PCA views.
    #[serde(default)]
    pub partition: Option<PathBuf>,
    /// Planted-instance manifest; enables recovery scoring.
    #[serde(default)]
    pub planted: Option<PathBuf>,
    /// `node<TAB>0|1`; enables the indexical probe.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Antonym pairs; enables the semantic probe together with
    /// `axis_embeddings`.
    #[serde(default)]
    pub axis: Option<PathBuf>,
    /// Embedding table whose nodes are the axis words; the first concept is used.
    #[serde(default)]
    pub axis_embeddings: Option<PathBuf>,
    /// Rating name to `word<TAB>rating` file.
    #[serde(default)]
    pub ratings: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IndexicalMode {
    /// One classifier per held-out concept over its nodes.
    #[default]
    PerConcept,
    /// One classifier over the nodes of all held-out concepts stacked.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    #[serde(default = "default_min_freq")]
    pub min_freq: u64,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default)]
    pub mode: IndexicalMode,
    #[serde(default = "default_l2")]
    pub l2: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            min_freq: default_min_freq(),
            top_n: default_top_n(),
            mode: IndexicalMode::default(),
            l2: default_l2(),
        }
    }
}

/// Run description. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Also search the rotate-off baseline and compare against it.
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default = "default_curve_max")]
    pub curve_max: usize,
    /// Concept shown in the PCA views; the first test concept by default.
    #[serde(default)]
    pub pca_concept: Option<String>,
    pub inputs: Inputs,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeSettings,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let m = Self::parse(&text, base).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::format(path, msg),
            other => other,
        })?;
        m.check_files()?;
        Ok(m)
    }

    /// Parses manifest text, resolving paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m: RunManifest =
            toml::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        if m.curve_max == 0 {
            return Err(Error::InvalidInput("curve_max must be at least 1".into()));
        }
        m.train.validate()?;
        m.out = resolve(base, &m.out);
        let i = &mut m.inputs;
        i.edges = resolve(base, &i.edges);
        i.embeddings = resolve(base, &i.embeddings);
        for p in [
            &mut i.partition,
            &mut i.planted,
            &mut i.labels,
            &mut i.axis,
            &mut i.axis_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
        for p in i.ratings.values_mut() {
            *p = resolve(base, p);
        }
        Ok(m)
    }

    /// Every referenced input must exist.
    pub fn check_files(&self) -> Result<()> {
        let i = &self.inputs;
        let mut all: Vec<&PathBuf> = vec![&i.edges, &i.embeddings];
        all.extend(
            [
                &i.partition,
                &i.planted,
                &i.labels,
                &i.axis,
                &i.axis_embeddings,
            ]
            .into_iter()
            .flatten(),
        );
        all.extend(i.ratings.values());
        for p in all {
            if !p.is_file() {
                return Err(Error::InvalidInput(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        if i.axis.is_some() != i.axis_embeddings.is_some() {
            return Err(Error::InvalidInput(
                "axis and axis_embeddings must be given together".into(),
            ));
        }
        Ok(())
    }

    /// Seed override that also reaches the training config.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Grid,
    Baseline,
    Curve,
    Project,
    Concepts,
    Pca,
    Recovery,
    Semantic,
    Indexical,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Grid => "grid",
            Stage::Baseline => "baseline",
            Stage::Curve => "curve",
            Stage::Project => "project",
            Stage::Concepts => "concepts",
            Stage::Pca => "pca",
            Stage::Recovery => "recovery",
            Stage::Semantic => "probe-semantic",
            Stage::Indexical => "probe-indexical",
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl PipelineError {
    /// 2 for unusable inputs, 3 for numerical failures, 4 for any other
    /// failure after outputs were started.
    pub fn exit_code(&self) -> i32 {
        if self.error.is_numerical() {
            3
        } else if self.stage == Stage::Load {
            2
        } else {
            4
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|error| PipelineError { stage, error })
    }
}

/// Inputs read from disk.
pub struct Loaded {
    pub data: Dataset,
    pub partition: Option<Vec<usize>>,
    pub truth: Option<PlantedTruth>,
    pub labels: Option<Vec<(usize, bool)>>,
    pub axis_pairs: Option<Vec<AxisPair>>,
    pub ratings: BTreeMap<String, std::collections::HashMap<String, f64>>,
}

pub fn load_inputs(m: &RunManifest) -> Result<Loaded> {
    let embeddings = EmbeddingTable::load(&m.inputs.embeddings)?;
    let graph = read_edge_list_with_nodes(&m.inputs.edges, embeddings.nodes())?;
    let partition = m
        .inputs
        .partition
        .as_deref()
        .map(|p| read_partition(p, &graph))
        .transpose()?;
    let truth = m.inputs.planted.as_deref().map(load_truth).transpose()?;
    if let Some(t) = &truth {
        if t.params.d != embeddings.d() {
            return Err(Error::InvalidInput(format!(
                "planted instance has d={}, embeddings have d={}",
                t.params.d,
                embeddings.d()
            )));
        }
    }
    let labels = m
        .inputs
        .labels
        .as_deref()
        .map(|p| read_node_labels(p, &graph))
        .transpose()?;
    let axis_pairs = match (&m.inputs.axis, &m.inputs.axis_embeddings) {
        (Some(a), Some(e)) => Some(load_axis_pairs(a, e, embeddings.d())?),
        _ => None,
    };
    let mut ratings = BTreeMap::new();
    for (name, p) in &m.inputs.ratings {
        ratings.insert(name.clone(), read_ratings(p)?);
    }
    let data = Dataset::new(graph, embeddings, m.seed)?;
    Ok(Loaded {
        data,
        partition,
        truth,
        labels,
        axis_pairs,
        ratings,
    })
}

/// Pairs from the axis file with vectors looked up in the first concept of
/// the word table. Pairs with an unknown word are dropped.
pub fn load_axis_pairs(axis: &Path, table: &Path, d: usize) -> Result<Vec<AxisPair>> {
    let records = read_axis_pairs(axis)?;
    let words = EmbeddingTable::load(table)?;
    if words.d() != d {
        return Err(Error::format(
            table,
            format!(
                "axis embeddings have d={}, concept embeddings d={d}",
                words.d()
            ),
        ));
    }
    let m = words.matrix(0);
    let index: std::collections::HashMap<&str, usize> = words
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut out = Vec::new();
    for r in records {
        match (index.get(r.word_p.as_str()), index.get(r.word_q.as_str())) {
            (Some(&p), Some(&q)) => out.push(AxisPair {
                pair_id: r.pair_id,
                x_p: m.row(p).to_vec(),
                x_q: m.row(q).to_vec(),
                word_p: r.word_p,
                word_q: r.word_q,
                frequency_p: r.freq_p,
                frequency_q: r.freq_q,
            }),
            _ => log::warn!(
                "pair {} ({}, {}) has no embedding; skipped",
                r.pair_id,
                r.word_p,
                r.word_q
            ),
        }
    }
    Ok(out)
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Trial table rows for one grid, failures included.
pub fn trials_rows(csv: &mut CsvWriter, tag: &str, outcome: &GridOutcome) {
    for (i, t) in outcome.trials.iter().enumerate() {
        csv.row(&[
            &tag,
            &t.point.learning_rate,
            &t.point.lambda_o,
            &t.point.lambda_s,
            &serde_plain(&t.prox_mode),
            &t.superepochs,
            &t.dev_mauc,
            &std_dev(&t.dev_aucs),
            &t.test_mauc,
            &std_dev(&t.test_aucs),
            &t.d_star,
            &t.parameter_count,
            &t.final_loss,
            &if i == outcome.best { "best" } else { "ok" },
        ]);
    }
    for f in &outcome.failures {
        csv.row(&[
            &tag,
            &f.point.learning_rate,
            &f.point.lambda_o,
            &f.point.lambda_s,
            &"",
            &"",
            &"NA",
            &"NA",
            &"NA",
            &"NA",
            &"NA",
            &"NA",
            &"NA",
            &"failed",
        ]);
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub const TRIALS_HEADER: [&str; 14] = [
    "model",
    "learning_rate",
    "lambda_o",
    "lambda_s",
    "prox_mode",
    "superepochs",
    "dev_mauc",
    "dev_std",
    "test_mauc",
    "test_std",
    "d_star",
    "parameter_count",
    "final_loss",
    "status",
];

/// One JSON object per trial, with runtimes.
pub fn write_results_jsonl(path: &Path, grids: &[(&str, &GridOutcome)]) -> Result<()> {
    let mut text = Vec::new();
    for (tag, g) in grids {
        for t in &g.trials {
            let mut v = serde_json::to_value(t).map_err(|e| Error::InvalidInput(e.to_string()))?;
            v["model"] = serde_json::Value::from(*tag);
            writeln!(text, "{v}").map_err(|e| Error::io(path, e))?;
        }
        for f in &g.failures {
            let v = serde_json::json!({
                "model": tag,
                "point": f.point,
                "error": f.message,
            });
            writeln!(text, "{v}").map_err(|e| Error::io(path, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Curve, knee and the truncation size actually used.
#[derive(Debug, Clone)]
pub struct Selection {
    pub curve: Vec<CurvePoint>,
    pub knee: Option<Knee>,
    /// Knee size, or the trained `d_star` when the curve has no knee.
    pub size: usize,
    pub model: RotationGAE,
    pub projector: SubspaceProjector,
}

pub fn select_subspace(
    model: &RotationGAE,
    d_star: usize,
    data: &Dataset,
    curve_max: usize,
) -> Result<Selection> {
    let curve = mauc_curve(model, data, curve_max)?;
    let knee = if curve.len() >= 3 {
        let xs: Vec<f64> = curve.iter().map(|p| p.size as f64).collect();
        let ys: Vec<f64> = curve.iter().map(|p| p.mauc).collect();
        knee_select(&xs, &ys)?
    } else {
        None
    };
    let size = match &knee {
        Some(k) => curve[k.index].size,
        None => {
            log::warn!("curve has no knee; keeping the {d_star} trained rows");
            d_star.min(curve.len())
        }
    };
    if size == 0 {
        return Err(Error::Numerical(
            "training pruned every input dimension".into(),
        ));
    }
    let truncated = truncate_top(model, size);
    let projector = SubspaceProjector::from_model(&truncated);
    if projector.d_star() == 0 {
        return Err(Error::Numerical("selected subspace is empty".into()));
    }
    Ok(Selection {
        curve,
        knee,
        size,
        model: truncated,
        projector,
    })
}

pub fn curve_csv(seed: u64, sel: &Selection) -> CsvWriter {
    let mut csv = CsvWriter::new(seed, &["size", "dev_mauc", "knee"]);
    let knee_size = sel.knee.as_ref().map(|k| sel.curve[k.index].size);
    for p in &sel.curve {
        csv.row(&[&p.size, &p.mauc, &u8::from(Some(p.size) == knee_size)]);
    }
    match knee_size {
        Some(k) => csv.comment(&format!("knee={k}")),
        None => csv.comment(&format!("knee=none selected={}", sel.size)),
    }
    csv
}

/// Test-edge AUC and subspace dispersion of one concept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptRow {
    pub concept: String,
    pub split: &'static str,
    pub auc: f64,
    pub dispersion: f64,
}

pub fn concept_rows(
    model: &RotationGAE,
    projector: &SubspaceProjector,
    data: &Dataset,
) -> Result<Vec<ConceptRow>> {
    let split_of = |c: usize| {
        if data.concepts.dev.binary_search(&c).is_ok() {
            "dev"
        } else if data.concepts.test.binary_search(&c).is_ok() {
            "test"
        } else {
            "train"
        }
    };
    let ids: Vec<usize> = (0..data.embeddings.concept_count()).collect();
    crate::exec::map(&ids, |&c| {
        Ok(ConceptRow {
            concept: data.concept_label(c).to_string(),
            split: split_of(c),
            auc: concept_auc(model, data, c, Which::Test)?,
            dispersion: dispersion(&projector.project_rows(data.embeddings.matrix(c))?)?,
        })
    })
    .into_iter()
    .collect()
}

/// OLS of AUC on dispersion; `None` when dispersion has no spread.
pub fn dispersion_ols(rows: &[ConceptRow]) -> Option<OlsResult> {
    let x: Vec<f64> = rows.iter().map(|r| r.dispersion).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.auc).collect();
    match ols_r2(&x, &y) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("dispersion regression skipped: {e}");
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Full,
    Subspace,
    Complement,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Full, Space::Subspace, Space::Complement];

    pub fn tag(self) -> &'static str {
        match self {
            Space::Full => "full",
            Space::Subspace => "subspace",
            Space::Complement => "complement",
        }
    }

    pub fn features(self, projector: &SubspaceProjector, x: &Matrix) -> Result<Matrix> {
        match self {
            Space::Full => Ok(x.clone()),
            Space::Subspace => projector.project_rows(x),
            Space::Complement => projector.complement_rows(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpaceAccuracy {
    pub space: Space,
    pub dev: f64,
    pub test: f64,
    /// Test-split comparison against the full space; `None` for the full
    /// space itself or when the predictions never disagree.
    pub versus_full: Option<TestResult>,
}

#[derive(Debug, Clone)]
pub struct IndexicalReport {
    pub mode: IndexicalMode,
    pub spaces: Vec<SpaceAccuracy>,
}

impl IndexicalReport {
    pub fn space(&self, s: Space) -> &SpaceAccuracy {
        self.spaces
            .iter()
            .find(|a| a.space == s)
            .expect("all spaces reported")
    }
}

struct Predictions {
    dev: Vec<(bool, bool)>,
    test: Vec<(bool, bool)>,
}

fn fit_and_predict(set: &LabeledSet, options: LogRegOptions) -> Result<Predictions> {
    let model = logreg_fit(set, options)?;
    let pred = |rows: &[usize]| -> Vec<(bool, bool)> {
        rows.iter()
            .map(|&i| (model.predict(set.features.row(i)), set.labels[i]))
            .collect()
    };
    Ok(Predictions {
        dev: pred(&set.dev),
        test: pred(&set.test),
    })
}

fn accuracy(p: &[(bool, bool)]) -> f64 {
    if p.is_empty() {
        return f64::NAN;
    }
    p.iter().filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

/// Predicts node labels from concept embeddings in the full space, the
/// subspace and its complement. Every space sees the same splits, so test
/// predictions pair up for McNemar's test.
pub fn indexical_probe(
    data: &Dataset,
    projector: &SubspaceProjector,
    labels: &[(usize, bool)],
    concepts: &[usize],
    mode: IndexicalMode,
    options: LogRegOptions,
    seed: u64,
) -> Result<IndexicalReport> {
    if labels.is_empty() || concepts.is_empty() {
        return Err(Error::InvalidInput(
            "indexical probe needs labeled nodes and concepts".into(),
        ));
    }
    let nodes: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let y: Vec<bool> = labels.iter().map(|l| l.1).collect();
    let groups: Vec<(u64, Vec<usize>)> = match mode {
        IndexicalMode::PerConcept => concepts
            .iter()
            .map(|&c| (derive_seed(seed, STREAM_PROBE ^ ((c as u64) << 8)), vec![c]))
            .collect(),
        IndexicalMode::Pooled => vec![(derive_seed(seed, STREAM_PROBE), concepts.to_vec())],
    };
    let per_space = crate::exec::map(&Space::ALL, |&space| -> Result<Predictions> {
        let mut all = Predictions {
            dev: Vec::new(),
            test: Vec::new(),
        };
        for (set_seed, cs) in &groups {
            let mut rows = Vec::new();
            let mut yy = Vec::new();
            for &c in cs {
                let f =
                    space.features(projector, &data.embeddings.matrix(c).select_rows(&nodes))?;
                rows.extend(f.row_iter().map(<[f64]>::to_vec));
                yy.extend_from_slice(&y);
            }
            let width = rows.first().map_or(0, Vec::len);
            let x = Matrix::from_vec(rows.len(), width, rows.concat())?;
            let set = LabeledSet::new(x, yy, *set_seed)?;
            let p = fit_and_predict(&set, options)?;
            all.dev.extend(p.dev);
            all.test.extend(p.test);
        }
        Ok(all)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let full_test: Vec<bool> = per_space[0].test.iter().map(|p| p.0).collect();
    let truth: Vec<bool> = per_space[0].test.iter().map(|p| p.1).collect();
    let spaces = Space::ALL
        .iter()
        .zip(&per_space)
        .map(|(&space, p)| {
            let versus_full = if space == Space::Full {
                None
            } else {
                let mine: Vec<bool> = p.test.iter().map(|q| q.0).collect();
                let (b, c) = discordant_counts(&mine, &full_test, &truth);
                mcnemar(b, c).ok()
            };
            SpaceAccuracy {
                space,
                dev: accuracy(&p.dev),
                test: accuracy(&p.test),
                versus_full,
            }
        })
        .collect();
    Ok(IndexicalReport { mode, spaces })
}

pub fn probe_csv(seed: u64, r: &IndexicalReport) -> CsvWriter {
    let mut csv = CsvWriter::new(
        seed,
        &[
            "space_tag",
            "split",
            "accuracy",
            "test_name",
            "statistic",
            "p_value",
        ],
    );
    for s in &r.spaces {
        csv.row(&[&s.space.tag(), &"dev", &s.dev, &"none", &"NA", &"NA"]);
        let (name, stat, p) = match (s.space, s.versus_full) {
            (Space::Full, _) => ("none", None, None),
            (_, Some(t)) => ("mcnemar_vs_full", Some(t.statistic), Some(t.p_value)),
            (_, None) => ("mcnemar_vs_full", None, None),
        };
        csv.row(&[&s.space.tag(), &"test", &s.test, &name, &na(stat), &na(p)]);
    }
    csv.comment(&format!("mode={}", serde_plain(&r.mode)));
    csv
}

/// Scores of the mutually nearest pairs, highest first, plus the rating
/// comparisons that had enough rated pairs.
pub struct SemanticReport {
    pub kept: Vec<AxisPair>,
    pub scores: Vec<AxisScore>,
    pub comparisons: Vec<(String, std::result::Result<RatingComparison, String>)>,
}

pub fn semantic_probe(
    projector: &SubspaceProjector,
    pairs: &[AxisPair],
    ratings: &BTreeMap<String, std::collections::HashMap<String, f64>>,
    settings: &ProbeSettings,
) -> Result<SemanticReport> {
    let kept = mutual_nn_filter(pairs, settings.min_freq);
    let mut scores = kept
        .iter()
        .map(|p| axis_score(projector, p))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pair_id.cmp(&b.pair_id)));
    let comparisons = ratings
        .iter()
        .map(|(name, r)| {
            let cmp = compare_rating_extremes(&kept, &scores, r, settings.top_n)
                .map_err(|e| e.to_string());
            if let Err(e) = &cmp {
                log::warn!("rating {name}: {e}");
            }
            (name.clone(), cmp)
        })
        .collect();
    Ok(SemanticReport {
        kept,
        scores,
        comparisons,
    })
}

fn write_pca(
    out: &Path,
    seed: u64,
    tag: &str,
    points: &Matrix,
    nodes: &[String],
    groups: &[String],
    concept: &str,
) -> Result<()> {
    if points.cols() == 0 {
        log::warn!("{tag} space is empty; no PCA view");
        return Ok(());
    }
    let pca = pca_top2(points)?;
    let mut csv = CsvWriter::new(seed, &["node", "group", "pc1", "pc2"]);
    for ((n, g), row) in nodes.iter().zip(groups).zip(pca.coords.row_iter()) {
        csv.row(&[n, g, &row[0], &row[1]]);
    }
    csv.comment(&format!(
        "concept={concept} explained_variance={},{}",
        pca.explained_variance[0], pca.explained_variance[1]
    ));
    csv.write(&out.join(format!("pca_{tag}.csv")))?;
    emit_svg_scatter(
        &pca.coords,
        groups,
        &format!("{concept}: {tag} space"),
        &out.join(format!("pca_{tag}.svg")),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub planted_k: usize,
    pub selected_size: usize,
    pub trained_d_star: usize,
    /// Affinity of the knee-selected span with the planted span.
    pub affinity: f64,
    /// Affinity of every trained active row.
    pub affinity_trained: f64,
}

pub fn score_recovery(
    truth: &PlantedTruth,
    selected: &SubspaceProjector,
    trained: &SubspaceProjector,
) -> Result<Recovery> {
    let planted = truth.planted_basis();
    let score = |p: &SubspaceProjector| -> Result<f64> {
        if planted.is_empty() || p.d_star() == 0 {
            return Ok(0.0);
        }
        subspace_affinity(&recovered_basis(p)?, &planted)
    };
    Ok(Recovery {
        planted_k: truth.params.k,
        selected_size: selected.d_star(),
        trained_d_star: trained.d_star(),
        affinity: score(selected)?,
        affinity_trained: score(trained)?,
    })
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub out: PathBuf,
    pub best_dev_mauc: f64,
    pub best_test_mauc: f64,
    pub best_d_star: usize,
    pub baseline_test_mauc: Option<f64>,
    pub knee: Option<usize>,
    pub selected_size: usize,
    pub recovery: Option<Recovery>,
    pub dispersion: Option<OlsResult>,
    pub indexical: Option<IndexicalReport>,
    pub comparison: Option<WelchResult>,
}

fn write_failed(out: &Path, err: &PipelineError) {
    let path = out.join(FAILED_MARKER);
    if let Err(e) = std::fs::write(
        &path,
        format!("stage={}\n{}\n", err.stage.name(), err.error),
    ) {
        log::error!("could not write {}: {e}", path.display());
    }
}

/// Runs every stage, writing into `manifest.out`. On failure a `FAILED`
/// marker naming the stage is left next to the partial outputs.
pub fn run_pipeline(manifest: &RunManifest) -> std::result::Result<PipelineReport, PipelineError> {
    let out = manifest.out.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::io(&out, e))
        .at(Stage::Load)?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker)
            .map_err(|e| Error::io(&marker, e))
            .at(Stage::Load)?;
    }
    let r = run_stages(manifest, &out);
    if let Err(e) = &r {
        write_failed(&out, e);
    }
    r
}

/// Grid search for the subspace model and, if enabled, the baseline.
/// Writes `trials.csv`, `results.jsonl`, `best.bin` and `baseline.bin`.
pub fn stage_grid(
    m: &RunManifest,
    data: &Dataset,
    out: &Path,
) -> std::result::Result<(GridOutcome, Option<GridOutcome>), PipelineError> {
    let mut config = m.train.clone();
    config.seed = m.seed;
    let grid = grid_search(data, &config).at(Stage::Grid)?;
    let baseline = if m.baseline {
        Some(grid_search(data, &config.baseline()).at(Stage::Baseline)?)
    } else {
        None
    };
    let mut trials = CsvWriter::new(m.seed, &TRIALS_HEADER);
    trials_rows(&mut trials, "subspace", &grid);
    let mut grids = vec![("subspace", &grid)];
    if let Some(b) = &baseline {
        trials_rows(&mut trials, "baseline", b);
        grids.push(("baseline", b));
        save_checkpoint(&b.best().model, &out.join(BASELINE_CHECKPOINT)).at(Stage::Baseline)?;
    }
    trials.write(&out.join("trials.csv")).at(Stage::Grid)?;
    write_results_jsonl(&out.join("results.jsonl"), &grids).at(Stage::Grid)?;
    save_checkpoint(&grid.best().model, &out.join(BEST_CHECKPOINT)).at(Stage::Grid)?;
    Ok((grid, baseline))
}

/// Welch test of per-concept test AUCs, written to `comparison.csv`.
pub fn stage_compare(
    seed: u64,
    subspace: &[f64],
    baseline: &[f64],
    out: &Path,
) -> std::result::Result<WelchResult, PipelineError> {
    let w = welch_t(subspace, baseline).at(Stage::Baseline)?;
    let mut csv = CsvWriter::new(
        seed,
        &[
            "model_a", "model_b", "mean_a", "mean_b", "t", "df", "p_value",
        ],
    );
    csv.row(&[
        &"subspace",
        &"baseline",
        &mean(subspace),
        &mean(baseline),
        &w.t,
        &w.df,
        &w.p_value,
    ]);
    csv.write(&out.join("comparison.csv")).at(Stage::Baseline)?;
    Ok(w)
}

/// Curve and knee (`curve.csv`) plus the truncated model (`projector.bin`).
pub fn stage_curve(
    m: &RunManifest,
    data: &Dataset,
    best: &RotationGAE,
    out: &Path,
) -> std::result::Result<Selection, PipelineError> {
    let d_star = crate::optim::active_rows(&best.w0).len();
    let sel = select_subspace(best, d_star, data, m.curve_max).at(Stage::Curve)?;
    curve_csv(m.seed, &sel)
        .write(&out.join("curve.csv"))
        .at(Stage::Curve)?;
    save_checkpoint(&sel.model, &out.join(PROJECTOR_CHECKPOINT)).at(Stage::Project)?;
    Ok(sel)
}

/// Per-concept AUC and dispersion (`concepts.csv`) with the regression
/// summary (`dispersion_ols.csv`).
pub fn stage_concepts(
    seed: u64,
    data: &Dataset,
    best: &RotationGAE,
    projector: &SubspaceProjector,
    out: &Path,
) -> std::result::Result<Option<OlsResult>, PipelineError> {
    let rows = concept_rows(best, projector, data).at(Stage::Concepts)?;
    let mut csv = CsvWriter::new(seed, &["concept", "split", "test_auc", "dispersion"]);
    for r in &rows {
        csv.row(&[&r.concept, &r.split, &r.auc, &r.dispersion]);
    }
    csv.write(&out.join("concepts.csv")).at(Stage::Concepts)?;
    let ols = dispersion_ols(&rows);
    let mut csv = CsvWriter::new(
        seed,
        &["n", "slope", "intercept", "r2", "f_stat", "p_value"],
    );
    csv.row(&[
        &rows.len(),
        &na(ols.map(|o| o.slope)),
        &na(ols.map(|o| o.intercept)),
        &na(ols.map(|o| o.r2)),
        &na(ols.map(|o| o.f_stat)),
        &na(ols.map(|o| o.p_value)),
    ]);
    csv.write(&out.join("dispersion_ols.csv"))
        .at(Stage::Concepts)?;
    Ok(ols)
}

/// PCA views of one concept in the three spaces.
pub fn stage_pca(
    m: &RunManifest,
    loaded: &Loaded,
    projector: &SubspaceProjector,
    out: &Path,
) -> std::result::Result<(), PipelineError> {
    let data = &loaded.data;
    let concept = match &m.pca_concept {
        Some(label) => data
            .embeddings
            .concept_index(label)
            .ok_or_else(|| Error::InvalidInput(format!("pca concept {label:?} has no embeddings")))
            .at(Stage::Pca)?,
        None => data.concepts.test.first().copied().unwrap_or(0),
    };
    let nodes = data.graph.labels();
    let groups: Vec<String> = match (&loaded.partition, &loaded.labels) {
        (Some(p), _) => p.iter().map(|g| format!("group {g}")).collect(),
        (None, Some(l)) => {
            let mut g = vec!["unlabeled".to_string(); nodes.len()];
            for &(i, v) in l {
                g[i] = if v { "1" } else { "0" }.to_string();
            }
            g
        }
        (None, None) => vec!["node".to_string(); nodes.len()],
    };
    let x = data.embeddings.matrix(concept);
    let label = data.concept_label(concept);
    for space in Space::ALL {
        let pts = space.features(projector, x).at(Stage::Pca)?;
        write_pca(out, m.seed, space.tag(), &pts, nodes, &groups, label).at(Stage::Pca)?;
    }
    Ok(())
}

/// Affinity with the planted subspace, written to `recovery.csv`.
pub fn stage_recovery(
    seed: u64,
    truth: &PlantedTruth,
    best: &RotationGAE,
    projector: &SubspaceProjector,
    out: &Path,
) -> std::result::Result<Recovery, PipelineError> {
    let trained = SubspaceProjector::from_model(best);
    let r = score_recovery(truth, projector, &trained).at(Stage::Recovery)?;
    let mut csv = CsvWriter::new(
        seed,
        &[
            "planted_k",
            "selected_size",
            "trained_d_star",
            "affinity",
            "affinity_trained",
        ],
    );
    csv.row(&[
        &r.planted_k,
        &r.selected_size,
        &r.trained_d_star,
        &r.affinity,
        &r.affinity_trained,
    ]);
    csv.write(&out.join("recovery.csv")).at(Stage::Recovery)?;
    Ok(r)
}

/// `axis_scores.csv` and, with ratings, `semantic_report.csv`.
pub fn stage_semantic(
    m: &RunManifest,
    pairs: &[AxisPair],
    ratings: &BTreeMap<String, std::collections::HashMap<String, f64>>,
    projector: &SubspaceProjector,
    out: &Path,
) -> std::result::Result<SemanticReport, PipelineError> {
    let rep = semantic_probe(projector, pairs, ratings, &m.probe).at(Stage::Semantic)?;
    let by_id: std::collections::HashMap<u64, &AxisPair> =
        rep.kept.iter().map(|p| (p.pair_id, p)).collect();
    let mut csv = CsvWriter::new(m.seed, &["rank", "pair_id", "word_p", "word_q", "score"]);
    for (rank, s) in rep.scores.iter().enumerate() {
        let p = by_id[&s.pair_id];
        csv.row(&[&(rank + 1), &s.pair_id, &p.word_p, &p.word_q, &s.score]);
    }
    csv.comment(&format!("kept {} of {} pairs", rep.kept.len(), pairs.len()));
    csv.write(&out.join("axis_scores.csv"))
        .at(Stage::Semantic)?;
    if !rep.comparisons.is_empty() {
        let mut csv = CsvWriter::new(
            m.seed,
            &[
                "rating",
                "n",
                "rated_pairs",
                "mean_top",
                "mean_bottom",
                "t",
                "df",
                "p_value",
            ],
        );
        for (name, c) in &rep.comparisons {
            match c {
                Ok(c) => csv.row(&[
                    name,
                    &c.n,
                    &c.rated_pairs,
                    &c.mean_top,
                    &c.mean_bottom,
                    &c.welch.t,
                    &c.welch.df,
                    &c.welch.p_value,
                ]),
                Err(e) => csv.comment(&format!("{name}: {e}")),
            }
        }
        csv.write(&out.join("semantic_report.csv"))
            .at(Stage::Semantic)?;
    }
    Ok(rep)
}

/// Indexical probe over the test concepts, written to `probe_report.csv`.
pub fn stage_indexical(
    m: &RunManifest,
    data: &Dataset,
    labels: &[(usize, bool)],
    projector: &SubspaceProjector,
    out: &Path,
) -> std::result::Result<IndexicalReport, PipelineError> {
    let options = LogRegOptions {
        l2: m.probe.l2,
        ..LogRegOptions::default()
    };
    let rep = indexical_probe(
        data,
        projector,
        labels,
        &data.concepts.test,
        m.probe.mode,
        options,
        m.seed,
    )
    .at(Stage::Indexical)?;
    probe_csv(m.seed, &rep)
        .write(&out.join("probe_report.csv"))
        .at(Stage::Indexical)?;
    Ok(rep)
}

fn run_stages(m: &RunManifest, out: &Path) -> std::result::Result<PipelineReport, PipelineError> {
    let loaded = load_inputs(m).at(Stage::Load)?;
    let data = &loaded.data;
    log::info!(
        "{} nodes, {} edges, {} concepts, d={}",
        data.graph.node_count(),
        data.graph.edge_count(),
        data.embeddings.concept_count(),
        data.d()
    );
    let (grid, baseline) = stage_grid(m, data, out)?;
    let best = grid.best();
    let comparison = match &baseline {
        Some(b) => Some(stage_compare(
            m.seed,
            &best.test_aucs,
            &b.best().test_aucs,
            out,
        )?),
        None => None,
    };
    let sel = stage_curve(m, data, &best.model, out)?;
    let dispersion = stage_concepts(m.seed, data, &best.model, &sel.projector, out)?;
    stage_pca(m, &loaded, &sel.projector, out)?;
    let recovery = match &loaded.truth {
        Some(truth) => Some(stage_recovery(
            m.seed,
            truth,
            &best.model,
            &sel.projector,
            out,
        )?),
        None => None,
    };
    if let Some(pairs) = &loaded.axis_pairs {
        stage_semantic(m, pairs, &loaded.ratings, &sel.projector, out)?;
    }
    let indexical = match &loaded.labels {
        Some(labels) => Some(stage_indexical(m, data, labels, &sel.projector, out)?),
        None => None,
    };
    Ok(PipelineReport {
        out: out.to_path_buf(),
        best_dev_mauc: best.dev_mauc,
        best_test_mauc: best.test_mauc,
        best_d_star: best.d_star,
        baseline_test_mauc: baseline.as_ref().map(|b| b.best().test_mauc),
        knee: sel.knee.as_ref().map(|k| sel.curve[k.index].size),
        selected_size: sel.size,
        recovery,
        dispersion,
        indexical,
        comparison,
    })
}
