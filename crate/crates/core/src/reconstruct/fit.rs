//! Least-squares double-Gaussian fit.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{ReconstructError, ReconstructionResult};
use crate::model::{DoubleGaussianParams, PixelGrid};

pub const MAX_FIT_ITERATIONS: usize = 200;
const RELATIVE_STEP_TOLERANCE: f64 = 1e-8;
const MAX_DAMPING: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub amplitude: f64,
    pub sigma_plus_um: f64,
    pub sigma_minus_um: f64,
    /// `sqrt(Σ r² / Σ y²)` over the fitted entries.
    pub rms_residual: f64,
    pub iterations: usize,
}

impl FitResult {
    pub fn params(&self) -> DoubleGaussianParams {
        DoubleGaussianParams {
            amplitude: self.amplitude,
            sigma_plus_um: self.sigma_plus_um,
            sigma_minus_um: self.sigma_minus_um,
        }
    }
}

/// Fits the normalized reconstruction; unmeasured entries are ignored.
pub fn fit_double_gaussian(
    result: &ReconstructionResult,
    grid: &PixelGrid,
    initial: Option<DoubleGaussianParams>,
) -> Result<FitResult, ReconstructError> {
    let (rows, cols) = (result.rows, result.cols);
    if rows != grid.n_pixels || cols != grid.n_pixels {
        return Err(ReconstructError::ShapeMismatch(format!(
            "{rows}×{cols} reconstruction on a {}-pixel grid",
            grid.n_pixels
        )));
    }
    let mask: Vec<bool> = (0..rows * cols)
        .map(|k| result.is_measured(k / cols, k % cols))
        .collect();
    fit_double_gaussian_matrix(&result.gamma, &mask, grid, initial)
}

/// Fits `a exp(−(x_i + x_j)²/4σ+²) exp(−(x_i − x_j)²/4σ−²)` to a row-major
/// `N × N` matrix over the entries where `mask` is set.
///
/// Damped Gauss–Newton on `(a, ln σ+, ln σ−)`; stops when every parameter
/// changes by less than 1e-8 relative.
pub fn fit_double_gaussian_matrix(
    data: &[f64],
    mask: &[bool],
    grid: &PixelGrid,
    initial: Option<DoubleGaussianParams>,
) -> Result<FitResult, ReconstructError> {
    let n = grid.n_pixels;
    if data.len() != n * n || mask.len() != n * n {
        return Err(ReconstructError::ShapeMismatch(format!(
            "{} values for a {n}-pixel grid",
            data.len()
        )));
    }
    let start = match initial {
        Some(p) => p,
        None => default_initial_guess(data, grid),
    };
    start
        .check()
        .map_err(|e| ReconstructError::InvalidParameter(e.to_string()))?;

    let x: Vec<f64> = (0..n).map(|i| grid.centered_coordinate(i)).collect();
    let cells: Vec<(f64, f64, f64)> = (0..n * n)
        .filter(|&k| mask[k] && data[k].is_finite())
        .map(|k| {
            let (i, j) = (k / n, k % n);
            ((x[i] + x[j]).powi(2), (x[i] - x[j]).powi(2), data[k])
        })
        .collect();
    let norm: f64 = cells.iter().map(|c| c.2 * c.2).sum();

    let cost = |theta: &Vector3<f64>| -> f64 {
        let (sp2, sm2) = ((2.0 * theta[1]).exp(), (2.0 * theta[2]).exp());
        cells
            .iter()
            .map(|&(s2, d2, y)| {
                let f = theta[0] * (-s2 / (4.0 * sp2) - d2 / (4.0 * sm2)).exp();
                (y - f).powi(2)
            })
            .sum()
    };
    let normal_equations = |theta: &Vector3<f64>| -> (Matrix3<f64>, Vector3<f64>) {
        let (sp2, sm2) = ((2.0 * theta[1]).exp(), (2.0 * theta[2]).exp());
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for &(s2, d2, y) in &cells {
            let e = (-s2 / (4.0 * sp2) - d2 / (4.0 * sm2)).exp();
            let f = theta[0] * e;
            let grad = Vector3::new(e, f * s2 / (2.0 * sp2), f * d2 / (2.0 * sm2));
            jtj += grad * grad.transpose();
            jtr += grad * (y - f);
        }
        (jtj, jtr)
    };

    let mut theta = Vector3::new(
        start.amplitude,
        start.sigma_plus_um.ln(),
        start.sigma_minus_um.ln(),
    );
    let mut current = cost(&theta);
    let mut damping = 1e-3;
    let params_of = |t: &Vector3<f64>| Vector3::new(t[0], t[1].exp(), t[2].exp());
    let finish = |t: &Vector3<f64>, c: f64, iterations: usize| FitResult {
        amplitude: t[0],
        sigma_plus_um: t[1].exp(),
        sigma_minus_um: t[2].exp(),
        rms_residual: if norm > 0.0 { (c / norm).sqrt() } else { c.sqrt() },
        iterations,
    };

    for iteration in 1..=MAX_FIT_ITERATIONS {
        let (jtj, jtr) = normal_equations(&theta);
        loop {
            let mut lhs = jtj;
            for k in 0..3 {
                lhs[(k, k)] += damping * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = lhs.lu().solve(&jtr) else {
                damping *= 10.0;
                if damping > MAX_DAMPING {
                    return Ok(finish(&theta, current, iteration));
                }
                continue;
            };
            let candidate = theta + step;
            let trial = cost(&candidate);
            if trial.is_finite() && trial <= current {
                let (old, new) = (params_of(&theta), params_of(&candidate));
                let relative = (0..3)
                    .map(|k| ((new[k] - old[k]) / old[k].abs().max(1e-300)).abs())
                    .fold(0.0, f64::max);
                theta = candidate;
                current = trial;
                damping = (damping / 3.0).max(1e-12);
                if relative < RELATIVE_STEP_TOLERANCE {
                    return Ok(finish(&theta, current, iteration));
                }
                break;
            }
            damping *= 4.0;
            if damping > MAX_DAMPING {
                // No downhill step exists at this precision: a minimum.
                return Ok(finish(&theta, current, iteration));
            }
        }
    }
    let last = finish(&theta, current, MAX_FIT_ITERATIONS);
    Err(ReconstructError::NonConvergence {
        iterations: MAX_FIT_ITERATIONS,
        residual: last.rms_residual,
        last: last.params(),
    })
}

/// Starting point derived from the data: `σ−` from the spread of the
/// anti-diagonal profile, `σ+` from the half-maximum width of the ridge
/// across the row holding the peak, `a` from the peak value.
pub fn default_initial_guess(data: &[f64], grid: &PixelGrid) -> DoubleGaussianParams {
    let n = grid.n_pixels;
    let x: Vec<f64> = (0..n).map(|i| grid.centered_coordinate(i)).collect();
    let pitch = grid.pitch_um;

    let (peak_at, peak) = data
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });

    // Along the anti-diagonal, d = x_i − x_j has standard deviation √2 σ−.
    let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let v = data[i * n + (n - 1 - i)].max(0.0);
        let d = x[i] - x[n - 1 - i];
        w += v;
        m1 += v * d;
        m2 += v * d * d;
    }
    let sigma_minus = if w > 0.0 {
        let var = (m2 / w - (m1 / w).powi(2)).max(0.0);
        (var.sqrt() / std::f64::consts::SQRT_2).max(pitch)
    } else {
        n as f64 * pitch
    };

    // Across the ridge, a row profile has standard deviation ≈ √2 σ+.
    let row = peak_at / n;
    let col = peak_at % n;
    let half = 0.5 * peak;
    let profile = |j: usize| data[row * n + j];
    let crossing = |range: &mut dyn Iterator<Item = usize>, toward: usize| -> f64 {
        let mut prev = col;
        for j in range {
            let v = profile(j);
            if v < half {
                let (a, b) = (profile(prev), v);
                let t = if a != b { (a - half) / (a - b) } else { 0.5 };
                return x[prev] + t * (x[j] - x[prev]);
            }
            prev = j;
        }
        x[toward]
    };
    let right = crossing(&mut (col + 1..n), n - 1);
    let left = crossing(&mut (0..col).rev(), 0);
    let fwhm = (right - left).abs().max(pitch);
    let sigma_plus = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * std::f64::consts::SQRT_2);

    DoubleGaussianParams {
        amplitude: if peak.is_finite() && peak > 0.0 { peak } else { 1.0 / (n * n) as f64 },
        sigma_plus_um: sigma_plus.max(0.1 * pitch),
        sigma_minus_um: sigma_minus,
    }
}

/// Column `col` of `Γ̂` normalized to unit sum: the distribution of the
/// first photon given the second at `col`.
pub fn conditional_profile(result: &ReconstructionResult, col: usize) -> Vec<f64> {
    let column: Vec<f64> = (0..result.rows).map(|i| result.get(i, col)).collect();
    let total: f64 = column.iter().sum();
    if total > 0.0 {
        column.into_iter().map(|v| v / total).collect()
    } else {
        column
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_double_gaussian;

    fn fit_truth(n: usize, pitch: f64, sp: f64, sm: f64) -> FitResult {
        let grid = PixelGrid::centered(n, pitch).unwrap();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(sp, sm)).unwrap();
        let data: Vec<f64> = jd.matrix().iter().copied().collect();
        fit_double_gaussian_matrix(&data, &vec![true; n * n], &grid, None).unwrap()
    }

    #[test]
    fn recovers_own_forward_model() {
        let fit = fit_truth(48, 13.0, 20.0, 150.0);
        assert!(fit.rms_residual < 1e-10, "{fit:?}");
        assert_close!(fit.sigma_plus_um, 20.0, 1e-6);
        assert_close!(fit.sigma_minus_um, 150.0, 1e-5);
    }

    #[test]
    fn isotropic_case() {
        let fit = fit_truth(32, 10.0, 40.0, 40.0);
        assert!((fit.sigma_plus_um / fit.sigma_minus_um - 1.0).abs() < 0.01);
    }

    #[test]
    fn reference_source_on_wide_grid() {
        let fit = fit_truth(128, 13.0, 12.06, 926.12);
        assert!((fit.sigma_plus_um / 12.06 - 1.0).abs() < 0.02, "{fit:?}");
        assert!((fit.sigma_minus_um / 926.12 - 1.0).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn initial_guess_is_in_the_right_range() {
        let grid = PixelGrid::centered(64, 13.0).unwrap();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(12.06, 926.12)).unwrap();
        let data: Vec<f64> = jd.matrix().iter().copied().collect();
        let g = default_initial_guess(&data, &grid);
        assert!(g.sigma_plus_um > 5.0 && g.sigma_plus_um < 30.0, "{g:?}");
        assert!(g.sigma_minus_um > 100.0, "{g:?}");
    }
}
