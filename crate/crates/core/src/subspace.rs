//! Projection into the learned subspace and the probes built on it.
//!
//! A point `x` maps to `(Rᵀx)` restricted to the active indices; the
//! complement keeps the inactive ones.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::model::RotationGAE;
use crate::optim::active_rows;
use crate::probe::{welch_t, WelchResult};

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceProjector {
    r: Matrix,
    active: Vec<usize>,
}

impl SubspaceProjector {
    pub fn new(r: Matrix, mut active: Vec<usize>) -> Result<Self> {
        if r.rows() != r.cols() {
            return Err(Error::Dimension(format!(
                "rotation must be square, got {}x{}",
                r.rows(),
                r.cols()
            )));
        }
        active.sort_unstable();
        active.dedup();
        if let Some(&bad) = active.iter().find(|&&j| j >= r.rows()) {
            return Err(Error::InvalidInput(format!(
                "active index {bad} out of range for d={}",
                r.rows()
            )));
        }
        Ok(SubspaceProjector { r, active })
    }

    /// Rotation of the model with the nonzero rows of `W0` as active set.
    pub fn from_model(model: &RotationGAE) -> Self {
        SubspaceProjector {
            r: model.r.clone(),
            active: active_rows(&model.w0),
        }
    }

    pub fn d(&self) -> usize {
        self.r.rows()
    }

    pub fn d_star(&self) -> usize {
        self.active.len()
    }

    pub fn rotation(&self) -> &Matrix {
        &self.r
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Ascending indices outside the active set.
    pub fn inactive(&self) -> Vec<usize> {
        let set: HashSet<usize> = self.active.iter().copied().collect();
        (0..self.d()).filter(|j| !set.contains(j)).collect()
    }

    fn coords(&self, x: &[f64], idx: &[usize]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::Dimension(format!(
                "vector of length {} for a projector with d={}",
                x.len(),
                self.d()
            )));
        }
        Ok(idx
            .iter()
            .map(|&j| (0..self.d()).map(|i| self.r[(i, j)] * x[i]).sum())
            .collect())
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.coords(x, &self.active)
    }

    pub fn project_complement(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.coords(x, &self.inactive())
    }

    /// Row-wise projection of an `n × d` matrix.
    pub fn project_rows(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.matmul(&self.r)?.select_cols(&self.active))
    }

    pub fn complement_rows(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.matmul(&self.r)?.select_cols(&self.inactive()))
    }

    /// Columns of `R` at the active indices.
    pub fn basis(&self) -> Vec<Vec<f64>> {
        self.active.iter().map(|&j| self.r.col(j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisPair {
    pub pair_id: u64,
    pub word_p: String,
    pub word_q: String,
    pub x_p: Vec<f64>,
    pub x_q: Vec<f64>,
    pub frequency_p: u64,
    pub frequency_q: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AxisScore {
    pub pair_id: u64,
    pub score: f64,
}

/// Sum of the projected norms of both words.
pub fn axis_score(projector: &SubspaceProjector, pair: &AxisPair) -> Result<AxisScore> {
    Ok(AxisScore {
        pair_id: pair.pair_id,
        score: norm2(&projector.project(&pair.x_p)?) + norm2(&projector.project(&pair.x_q)?),
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Keeps pairs whose words both occur at least `min_freq` times and are
/// each other's cosine nearest neighbors among the words of the surviving
/// pairs. Equal similarities go to the word from the lower pair id. Output
/// is in ascending pair-id order.
pub fn mutual_nn_filter(pairs: &[AxisPair], min_freq: u64) -> Vec<AxisPair> {
    let mut frequent: Vec<&AxisPair> = pairs
        .iter()
        .filter(|p| p.frequency_p >= min_freq && p.frequency_q >= min_freq)
        .collect();
    frequent.sort_by_key(|p| p.pair_id);

    // Word pool in tie-break order; a word listed twice keeps its first vector.
    let mut pool: Vec<(&str, &[f64])> = Vec::new();
    let mut seen = HashSet::new();
    for p in &frequent {
        for (w, x) in [(&p.word_p, &p.x_p), (&p.word_q, &p.x_q)] {
            if seen.insert(w.as_str()) {
                pool.push((w.as_str(), x.as_slice()));
            }
        }
    }
    let nearest: HashMap<&str, Option<&str>> = pool
        .iter()
        .map(|&(w, x)| {
            let mut best: Option<(&str, f64)> = None;
            for &(v, y) in &pool {
                if v == w {
                    continue;
                }
                let s = cosine(x, y);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((v, s));
                }
            }
            (w, best.map(|(v, _)| v))
        })
        .collect();

    frequent
        .into_iter()
        .filter(|p| {
            nearest[p.word_p.as_str()] == Some(p.word_q.as_str())
                && nearest[p.word_q.as_str()] == Some(p.word_p.as_str())
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatingComparison {
    pub n: usize,
    pub rated_pairs: usize,
    pub mean_top: f64,
    pub mean_bottom: f64,
    pub welch: WelchResult,
}

/// Compares the mean rating of the `n` highest-scoring pairs with the `n`
/// lowest. A pair's rating is the mean of its two words' ratings; pairs
/// with an unrated word are skipped. Equal scores order by pair id.
pub fn compare_rating_extremes(
    pairs: &[AxisPair],
    scores: &[AxisScore],
    ratings: &HashMap<String, f64>,
    n: usize,
) -> Result<RatingComparison> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let by_id: HashMap<u64, &AxisPair> = pairs.iter().map(|p| (p.pair_id, p)).collect();
    let mut rated: Vec<(f64, u64, f64)> = scores
        .iter()
        .filter_map(|s| {
            let p = by_id.get(&s.pair_id)?;
            let a = ratings.get(&p.word_p)?;
            let b = ratings.get(&p.word_q)?;
            Some((s.score, s.pair_id, 0.5 * (a + b)))
        })
        .collect();
    if rated.len() < 2 * n {
        return Err(Error::InvalidInput(format!(
            "need {} rated pairs, found {}",
            2 * n,
            rated.len()
        )));
    }
    rated.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top: Vec<f64> = rated[..n].iter().map(|r| r.2).collect();
    let bottom: Vec<f64> = rated[rated.len() - n..].iter().map(|r| r.2).collect();
    let welch = welch_t(&top, &bottom)?;
    Ok(RatingComparison {
        n,
        rated_pairs: rated.len(),
        mean_top: crate::train::mean(&top),
        mean_bottom: crate::train::mean(&bottom),
        welch,
    })
}

/// Mean Euclidean distance of the rows of `points` to their centroid.
pub fn dispersion(points: &Matrix) -> Result<f64> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::InvalidInput(
            "dispersion of an empty point set".into(),
        ));
    }
    let centroid: Vec<f64> = points
        .column_sums()
        .into_iter()
        .map(|s| s / n as f64)
        .collect();
    Ok(points
        .row_iter()
        .map(|r| {
            r.iter()
                .zip(&centroid)
                .map(|(a, c)| (a - c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64)
}
