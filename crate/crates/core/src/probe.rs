//! Probing classifiers and the statistics used to compare spaces:
//! logistic regression, Welch's t-test, McNemar's test and simple OLS.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::floor_allocation;
use crate::linalg::{dot, Matrix};
use crate::special::{chi2_sf, f_sf, student_t_two_tailed};

/// Features with binary labels and a seeded 60/20/20 split.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<bool>,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<bool>, seed: u64) -> Result<Self> {
        Self::with_ratios(features, labels, (0.6, 0.2, 0.2), seed)
    }

    pub fn with_ratios(
        features: Matrix,
        labels: Vec<bool>,
        ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let n = labels.len();
        let (_, n_dev, n_test) = floor_allocation(n, ratios)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = idx.split_off(n - n_test);
        let dev = idx.split_off(n - n_test - n_dev);
        Ok(LabeledSet {
            features,
            labels,
            train: idx,
            dev,
            test,
            seed,
        })
    }

    /// Features and labels of the given rows.
    pub fn subset(&self, rows: &[usize]) -> (Matrix, Vec<bool>) {
        (
            self.features.select_rows(rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogRegModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// Class 1 when `σ(w·x + b) ≥ 0.5`.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) >= 0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LogRegOptions {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        LogRegOptions {
            l2: 1e-4,
            max_iter: 5000,
            tol: 1e-8,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits on the training rows of `set`.
pub fn logreg_fit(set: &LabeledSet, options: LogRegOptions) -> Result<LogRegModel> {
    let (x, y) = set.subset(&set.train);
    logreg_fit_xy(&x, &y, options)
}

/// Full-batch gradient descent with Armijo backtracking on the mean
/// negative log-likelihood plus `½ l2 ‖w‖²` (bias unpenalized).
pub fn logreg_fit_xy(x: &Matrix, y: &[bool], options: LogRegOptions) -> Result<LogRegModel> {
    let n = x.rows();
    if n != y.len() {
        return Err(Error::Dimension(format!("{n} rows for {} labels", y.len())));
    }
    if n < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 training samples".into(),
        ));
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(Error::InvalidInput(
            "training labels contain a single class".into(),
        ));
    }
    let k = x.cols();
    let nf = n as f64;
    let l2 = options.l2;

    let objective = |w: &[f64], b: f64| -> f64 {
        let mut s = 0.0;
        for (row, &label) in x.row_iter().zip(y) {
            let z = dot(w, row) + b;
            s += softplus(z) - if label { z } else { 0.0 };
        }
        s / nf + 0.5 * l2 * dot(w, w)
    };
    let gradient = |w: &[f64], b: f64| -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; k];
        let mut gb = 0.0;
        for (row, &label) in x.row_iter().zip(y) {
            let r = sigmoid(dot(w, row) + b) - if label { 1.0 } else { 0.0 };
            crate::linalg::axpy(r, row, &mut gw);
            gb += r;
        }
        for (g, &wi) in gw.iter_mut().zip(w) {
            *g = *g / nf + l2 * wi;
        }
        (gw, gb / nf)
    };

    let mut w = vec![0.0; k];
    let mut b = 0.0;
    let mut f = objective(&w, b);
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..options.max_iter {
        let (gw, gb) = gradient(&w, b);
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        iterations = it;
        if gmax < options.tol {
            converged = true;
            break;
        }
        let gnorm2 = dot(&gw, &gw) + gb * gb;
        // Armijo backtracking, starting from twice the last accepted step.
        step *= 2.0;
        loop {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let b_new = b - step * gb;
            let f_new = objective(&w_new, b_new);
            if f_new <= f - 0.5 * step * gnorm2 {
                w = w_new;
                b = b_new;
                f = f_new;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                // No further progress is representable.
                return Ok(LogRegModel {
                    weights: w,
                    bias: b,
                    l2,
                    iterations: it,
                    converged: false,
                });
            }
        }
        iterations = it + 1;
    }
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return Err(Error::Numerical("logistic regression diverged".into()));
    }
    Ok(LogRegModel {
        weights: w,
        bias: b,
        l2,
        iterations,
        converged,
    })
}

/// Fraction of rows whose prediction matches the label.
pub fn logreg_accuracy(model: &LogRegModel, features: &Matrix, labels: &[bool]) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    if features.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let correct = features
        .row_iter()
        .zip(labels)
        .filter(|(x, &l)| model.predict(x) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// McNemar's test on the discordant counts `b` and `c`, continuity corrected.
pub fn mcnemar(b: usize, c: usize) -> Result<TestResult> {
    if b + c == 0 {
        return Err(Error::NoDiscordantPairs);
    }
    let diff = (b as f64 - c as f64).abs();
    let chi2 = if diff <= 1.0 {
        0.0
    } else {
        (diff - 1.0).powi(2) / (b + c) as f64
    };
    Ok(TestResult {
        statistic: chi2,
        p_value: chi2_sf(chi2, 1.0),
    })
}

/// Exact two-sided binomial variant of McNemar's test; the statistic is
/// `min(b, c)`.
pub fn mcnemar_exact(b: usize, c: usize) -> Result<TestResult> {
    let n = b + c;
    if n == 0 {
        return Err(Error::NoDiscordantPairs);
    }
    let k = b.min(c);
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let tail: f64 = (0..=k).map(|i| (ln_choose(n, i) + ln_half_n).exp()).sum();
    Ok(TestResult {
        statistic: k as f64,
        p_value: (2.0 * tail).min(1.0),
    })
}

fn ln_choose(n: usize, k: usize) -> f64 {
    use crate::special::ln_gamma;
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Discordant counts between two prediction vectors scored against `labels`:
/// `b` = first right and second wrong, `c` = the reverse.
pub fn discordant_counts(first: &[bool], second: &[bool], labels: &[bool]) -> (usize, usize) {
    let mut b = 0;
    let mut c = 0;
    for ((&p, &q), &l) in first.iter().zip(second).zip(labels) {
        match (p == l, q == l) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    (b, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test, two-tailed.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "welch t-test needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        if ma == mb {
            return Ok(WelchResult {
                t: 0.0,
                df,
                p_value: 1.0,
            });
        }
        log::warn!("welch t-test on zero-variance samples with different means; reporting p = 0");
        return Ok(WelchResult {
            t: if ma > mb {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            df,
            p_value: 0.0,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p_value: student_t_two_tailed(t, df),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OlsResult {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `F(1, n − 2)`; `+∞` for a perfect fit.
    pub f_stat: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Least-squares fit of `y = slope · x + intercept`.
pub fn ols_r2(x: &[f64], y: &[f64]) -> Result<OlsResult> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} x values for {} y values",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("ols needs n >= 3, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("x has zero variance".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r2 = if sst == 0.0 {
        0.0
    } else {
        (1.0 - sse / sst).clamp(0.0, 1.0)
    };
    let df2 = nf - 2.0;
    let f_stat = if r2 >= 1.0 {
        f64::INFINITY
    } else {
        r2 * df2 / (1.0 - r2)
    };
    Ok(OlsResult {
        slope,
        intercept,
        r2,
        f_stat,
        p_value: f_sf(f_stat, 1.0, df2),
        n,
    })
}
