//! Kneedle knee detection for concave increasing curves.

use crate::error::{Error, Result};

/// Knee detection outcome for a curve; `None` means no knee was found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knee {
    /// Position in the input arrays.
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

/// Normalized difference curve `y_norm − x_norm`. Constant `y` gives zeros.
pub fn difference_curve(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "{} x values for {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "knee detection needs at least 3 points, got {}",
            xs.len()
        )));
    }
    crate::linalg::check_finite(xs)?;
    crate::linalg::check_finite(ys)?;
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "x values must be strictly increasing".into(),
        ));
    }
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let yr = ymax - ymin;
    Ok(xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let yn = if yr > 0.0 { (y - ymin) / yr } else { 0.0 };
            yn - (x - x0) / (x1 - x0)
        })
        .collect())
}

/// Kneedle with sensitivity `s`. A local maximum of the difference curve
/// becomes the knee once the curve drops below `Δ_max − s · mean(Δx_norm)`
/// before the next local maximum.
pub fn knee_select_with(xs: &[f64], ys: &[f64], sensitivity: f64) -> Result<Option<Knee>> {
    let diff = difference_curve(xs, ys)?;
    let n = diff.len();
    // Normalized x spans [0, 1] over n - 1 steps.
    let step = 1.0 / (n - 1) as f64;
    let is_local_max = |i: usize| -> bool {
        i > 0 && i + 1 < n && diff[i] > diff[i - 1] && diff[i] >= diff[i + 1]
    };
    let mut candidate: Option<(usize, f64)> = None;
    for (i, &di) in diff.iter().enumerate().skip(1) {
        if is_local_max(i) {
            candidate = Some((i, di - sensitivity * step));
            continue;
        }
        if let Some((k, threshold)) = candidate {
            if di < threshold {
                return Ok(Some(Knee {
                    index: k,
                    x: xs[k],
                    y: ys[k],
                }));
            }
        }
    }
    Ok(None)
}

/// Kneedle with the default sensitivity of 1.
pub fn knee_select(xs: &[f64], ys: &[f64]) -> Result<Option<Knee>> {
    knee_select_with(xs, ys, 1.0)
}
