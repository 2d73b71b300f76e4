//! Adam with gradient accumulation and the row-wise proximal step for the
//! `ℓ1/ℓ2` (group lasso) penalty on `W0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, row_norms, Matrix};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state for tensors of the given lengths.
    pub fn new(learning_rate: f64, tensor_lens: &[usize]) -> Self {
        AdamState {
            learning_rate,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            t: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update with gradients already averaged over the accumulation window.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::Dimension(format!("tensor {k} changed shape")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Diagonal metric of the last update for tensor `k`:
    /// `(√v̂ + ε) / r`, i.e. the quadratic model Adam's step minimizes.
    pub fn metric(&self, k: usize) -> Vec<f64> {
        let bc2 = if self.t == 0 {
            1.0
        } else {
            1.0 - self.beta2.powi(self.t as i32)
        };
        self.v[k]
            .iter()
            .map(|&v| ((v / bc2).sqrt() + self.epsilon) / self.learning_rate)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProxMode {
    /// Euclidean prox with threshold `r · λ_s`.
    ClosedForm,
    /// Prox in Adam's diagonal metric, solved by Newton–Raphson.
    #[default]
    WeightedNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    pub lambda_s: f64,
    pub mode: ProxMode,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl ProxConfig {
    pub fn new(lambda_s: f64, mode: ProxMode) -> Self {
        ProxConfig {
            lambda_s,
            mode,
            newton_tol: 1e-12,
            newton_max_iter: 100,
        }
    }
}

/// Block soft-threshold: the proximal map of `τ‖·‖₂`.
pub fn prox_row(v: &[f64], tau: f64) -> Vec<f64> {
    let n = norm2(v);
    if n <= tau {
        return vec![0.0; v.len()];
    }
    let shrink = 1.0 - tau / n;
    v.iter().map(|x| shrink * x).collect()
}

/// Solves `argmin_x ½ Σ dᵢ (xᵢ − vᵢ)² + τ‖x‖₂` for a positive diagonal metric.
///
/// For a nonzero solution, `xᵢ = dᵢ vᵢ θ / (dᵢ θ + τ)` with `θ = ‖x‖₂`, so the
/// problem reduces to the positive root of `g(θ) = θ − ‖x(θ)‖₂` on `(0, ‖v‖]`.
pub fn prox_row_weighted(
    v: &[f64],
    metric: &[f64],
    tau: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    if v.len() != metric.len() {
        return Err(Error::Dimension(format!(
            "row of length {} with metric of length {}",
            v.len(),
            metric.len()
        )));
    }
    if metric.iter().any(|&d| d.is_nan() || d <= 0.0) {
        return Err(Error::InvalidInput(
            "metric weights must be positive".into(),
        ));
    }
    if tau == 0.0 {
        return Ok(v.to_vec());
    }
    let dv_norm = v
        .iter()
        .zip(metric)
        .map(|(x, d)| (x * d).powi(2))
        .sum::<f64>()
        .sqrt();
    if dv_norm <= tau {
        return Ok(vec![0.0; v.len()]);
    }

    let x_of = |theta: f64| -> Vec<f64> {
        v.iter()
            .zip(metric)
            .map(|(&vi, &di)| di * vi * theta / (di * theta + tau))
            .collect()
    };
    // g and g' at θ.
    let eval = |theta: f64| -> (f64, f64) {
        let x = x_of(theta);
        let nx = norm2(&x);
        let mut dnx = 0.0;
        for ((&xi, &vi), &di) in x.iter().zip(v).zip(metric) {
            let denom = di * theta + tau;
            dnx += xi * di * vi * tau / (denom * denom);
        }
        let dnx = if nx > 0.0 { dnx / nx } else { 0.0 };
        (theta - nx, 1.0 - dnx)
    };

    let v_norm = norm2(v);
    let d_min = metric.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = v_norm.max(1.0);
    // g < 0 just right of 0 and g(‖v‖) > 0.
    let (mut lo, mut hi) = (0.0, v_norm);
    let mut theta = (v_norm - tau / d_min).max(0.0);
    if theta <= lo || theta > hi {
        theta = 0.5 * (lo + hi);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let (g, dg) = eval(theta);
        residual = g.abs();
        if residual <= tol * scale {
            return Ok(x_of(theta));
        }
        if g < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let newton = theta - g / dg;
        theta = if dg.is_finite() && dg != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            // Root bracketed to machine precision.
            return Ok(x_of(0.5 * (lo + hi)));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Applies the row prox to every row of `w0` in place. `w0_index` is the
/// position of `w0` among the tensors tracked by `adam`, whose metric is used
/// in weighted mode.
pub fn apply_structured_prox(
    w0: &mut Matrix,
    adam: &AdamState,
    w0_index: usize,
    config: &ProxConfig,
) -> Result<()> {
    if config.lambda_s == 0.0 {
        return Ok(());
    }
    let cols = w0.cols();
    match config.mode {
        ProxMode::ClosedForm => {
            let tau = adam.learning_rate * config.lambda_s;
            for i in 0..w0.rows() {
                let out = prox_row(w0.row(i), tau);
                w0.row_mut(i).copy_from_slice(&out);
            }
        }
        ProxMode::WeightedNewton => {
            let metric = adam.metric(w0_index);
            if metric.len() != w0.as_slice().len() {
                return Err(Error::Dimension("metric does not match W0".into()));
            }
            for i in 0..w0.rows() {
                if w0.row(i).iter().all(|&x| x == 0.0) {
                    continue;
                }
                let out = prox_row_weighted(
                    w0.row(i),
                    &metric[i * cols..(i + 1) * cols],
                    config.lambda_s,
                    config.newton_tol,
                    config.newton_max_iter,
                )?;
                w0.row_mut(i).copy_from_slice(&out);
            }
        }
    }
    Ok(())
}

/// Threshold below which a row counts as removed.
pub const ACTIVE_ROW_EPS: f64 = 1e-12;

/// Indices of rows with nonzero norm, ascending.
pub fn active_rows(w0: &Matrix) -> Vec<usize> {
    row_norms(w0)
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > ACTIVE_ROW_EPS)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut adam = AdamState::new(1e-3, &[2]);
        adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [0.3, -5.0, 1e-3] {
            let mut p = vec![0.0];
            let mut adam = AdamState::new(1e-2, &[1]);
            adam.step(&mut [&mut p], &[&[g]]).unwrap();
            let expected = 1e-2 * g.abs() / (g.abs() + EPSILON);
            assert!((p[0].abs() - expected).abs() < 1e-15);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.5, 0.25, -1.0];
            let mut adam = AdamState::new(3e-3, &[3]);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64).sin() + 0.1).collect();
                adam.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn prox_row_examples() {
        let out = prox_row(&[3.0, 4.0], 1.0);
        assert!((out[0] - 2.4).abs() < 1e-15 && (out[1] - 3.2).abs() < 1e-15);
        assert_eq!(prox_row(&[3.0, 4.0], 5.0), vec![0.0, 0.0]);
        assert_eq!(prox_row(&[3.0, 4.0], 0.0), vec![3.0, 4.0]);
    }

    #[test]
    fn weighted_prox_uniform_metric_reduces_to_closed_form() {
        let v = [1.0, -2.0, 0.5];
        let c = 4.0;
        let out = prox_row_weighted(&v, &[c; 3], 2.0, 1e-12, 100).unwrap();
        let reference = prox_row(&v, 2.0 / c);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_prox_zero_region() {
        // ‖diag(d) v‖ = ‖(0.3, 0.4)‖ = 0.5 ≤ τ.
        assert_eq!(
            prox_row_weighted(&[3.0, 4.0], &[0.1, 0.1], 0.5, 1e-12, 100).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn weighted_prox_rejects_bad_metric() {
        assert!(prox_row_weighted(&[1.0], &[0.0], 1.0, 1e-12, 100).is_err());
        assert!(prox_row_weighted(&[1.0, 2.0], &[1.0], 1.0, 1e-12, 100).is_err());
    }

    #[test]
    fn weighted_prox_reports_non_convergence() {
        let err = prox_row_weighted(&[3.0, 4.0], &[1.0, 4.0], 2.0, 1e-300, 2).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 2, .. }));
    }

    #[test]
    fn structured_prox_edge_cases() {
        let mut w0 = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]).unwrap();
        let mut adam = AdamState::new(0.1, &[6]);
        let before = w0.clone();
        apply_structured_prox(
            &mut w0,
            &adam,
            0,
            &ProxConfig::new(0.0, ProxMode::ClosedForm),
        )
        .unwrap();
        assert_eq!(w0, before);

        let grads = vec![0.5; 6];
        let mut dummy = vec![0.0; 6];
        adam.step(&mut [&mut dummy], &[&grads]).unwrap();
        for mode in [ProxMode::ClosedForm, ProxMode::WeightedNewton] {
            let mut w = before.clone();
            // Closed form: tau = 0.1 * 15 = 1.5. Weighted: metric 0.5 / 0.1 = 5 per entry.
            apply_structured_prox(&mut w, &adam, 0, &ProxConfig::new(15.0, mode)).unwrap();
            assert_eq!(w.row(1), &[0.0, 0.0]);
            assert_eq!(w.row(2), &[0.0, 0.0], "{mode:?}");
            assert!(norm2(w.row(0)) > 0.0 && norm2(w.row(0)) < 5.0);
        }
    }

    #[test]
    fn active_rows_examples() {
        let w = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        assert_eq!(active_rows(&w), vec![0]);
        assert!(active_rows(&Matrix::zeros(3, 2)).is_empty());
        let cfg = crate::model::ModelConfig {
            h1: 4,
            h2: 2,
            ..crate::model::ModelConfig::new(6)
        };
        let m = crate::model::RotationGAE::init(&cfg, 1).unwrap();
        assert_eq!(active_rows(&m.w0), (0..6).collect::<Vec<_>>());
    }

    fn stationarity_residual(x: &[f64], v: &[f64], d: &[f64], tau: f64) -> f64 {
        let nx = norm2(x);
        x.iter()
            .zip(v)
            .zip(d)
            .map(|((xi, vi), di)| (di * (xi - vi) + tau * xi / nx).abs())
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn closed_form_norm_and_nonexpansive(
            u in proptest::collection::vec(-10.0..10.0f64, 4),
            w in proptest::collection::vec(-10.0..10.0f64, 4),
            tau in 0.0..8.0f64,
        ) {
            let pu = prox_row(&u, tau);
            let pw = prox_row(&w, tau);
            let diff: Vec<f64> = pu.iter().zip(&pw).map(|(a, b)| a - b).collect();
            let orig: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - b).collect();
            prop_assert!(norm2(&diff) <= norm2(&orig) + 1e-12);
            prop_assert!((norm2(&pu) - (norm2(&u) - tau).max(0.0)).abs() < 1e-12);
        }

        #[test]
        fn weighted_prox_is_stationary(
            v in proptest::collection::vec(-5.0..5.0f64, 1..8),
            seed_d in proptest::collection::vec(0.05..20.0f64, 8),
            tau in 0.0..3.0f64,
        ) {
            let d = &seed_d[..v.len()];
            let x = prox_row_weighted(&v, d, tau, 1e-12, 100).unwrap();
            if x.iter().any(|&xi| xi != 0.0) {
                prop_assert!(stationarity_residual(&x, &v, d, tau) < 1e-8);
            }
        }

        #[test]
        fn structured_prox_commutes_with_row_permutation(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, 3), 4),
            grads in proptest::collection::vec(-1.0..1.0f64, 12),
            lambda in 0.0..2.0f64,
            weighted in any::<bool>(),
        ) {
            let mode = if weighted { ProxMode::WeightedNewton } else { ProxMode::ClosedForm };
            let w = Matrix::from_rows(&rows).unwrap();
            let mut adam = AdamState::new(0.05, &[12]);
            let mut dummy = vec![0.0; 12];
            adam.step(&mut [&mut dummy], &[&grads]).unwrap();
            let perm = [2usize, 0, 3, 1];
            let mut permuted_grads = vec![0.0; 12];
            for (i, &p) in perm.iter().enumerate() {
                permuted_grads[i * 3..i * 3 + 3].copy_from_slice(&grads[p * 3..p * 3 + 3]);
            }
            let mut adam_p = AdamState::new(0.05, &[12]);
            let mut dummy = vec![0.0; 12];
            adam_p.step(&mut [&mut dummy], &[&permuted_grads]).unwrap();

            let cfg = ProxConfig::new(lambda, mode);
            let mut a = w.clone();
            apply_structured_prox(&mut a, &adam, 0, &cfg).unwrap();
            let mut b = w.select_rows(&perm);
            apply_structured_prox(&mut b, &adam_p, 0, &cfg).unwrap();
            prop_assert_eq!(a.select_rows(&perm), b);
        }
    }
}
