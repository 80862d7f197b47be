//! Pixel geometry, the joint pair distribution `Γ_ij` and the double-Gaussian
//! source model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::compensated_sum;

/// Tolerance used by [`JointDistribution::validate`] for the sum rules.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

/// Largest grid accepted by default; correlation images are `N²` dense.
pub const DEFAULT_MAX_PIXELS: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("grid must have at least one pixel")]
    EmptyGrid,
    #[error("grid of {0} pixels exceeds the cap of {1}")]
    GridTooLarge(usize, usize),
    #[error("pixel pitch must be positive and finite, got {0}")]
    InvalidPitch(f64),
    #[error("invalid double-Gaussian parameters: {0}")]
    InvalidDoubleGaussian(String),
    #[error("double-Gaussian normalization underflowed; widths are far below the pixel pitch")]
    NormalizationUnderflow,
    #[error("matrix is {rows}x{cols}, expected {expected}x{expected}")]
    ShapeMismatch { rows: usize, cols: usize, expected: usize },
    #[error("pixel index {index} out of range for {n_pixels} pixels")]
    IndexOutOfRange { index: usize, n_pixels: usize },
    #[error("joint distribution violates {} invariant(s): {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("invalid source configuration: {0}")]
    InvalidSource(String),
}

/// One-dimensional row of pixels. Coordinates are in micrometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub n_pixels: usize,
    pub pitch_um: f64,
    /// Coordinate of the center of pixel 0.
    pub origin_um: f64,
}

impl PixelGrid {
    pub fn new(n_pixels: usize, pitch_um: f64, origin_um: f64) -> Result<Self, ModelError> {
        let grid = Self {
            n_pixels,
            pitch_um,
            origin_um,
        };
        grid.check(DEFAULT_MAX_PIXELS)?;
        Ok(grid)
    }

    /// Grid whose pixel centers are symmetric about zero.
    pub fn centered(n_pixels: usize, pitch_um: f64) -> Result<Self, ModelError> {
        Self::new(n_pixels, pitch_um, -0.5 * (n_pixels as f64 - 1.0) * pitch_um)
    }

    pub fn check(&self, max_pixels: usize) -> Result<(), ModelError> {
        if self.n_pixels == 0 {
            return Err(ModelError::EmptyGrid);
        }
        if self.n_pixels > max_pixels {
            return Err(ModelError::GridTooLarge(self.n_pixels, max_pixels));
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(ModelError::InvalidPitch(self.pitch_um));
        }
        Ok(())
    }

    /// Absolute coordinate of the center of pixel `i`.
    pub fn center(&self, i: usize) -> f64 {
        self.origin_um + i as f64 * self.pitch_um
    }

    /// Coordinate of pixel `i` measured from the grid midpoint.
    pub fn centered_coordinate(&self, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.n_pixels as f64 - 1.0)) * self.pitch_um
    }
}

/// A broken [`JointDistribution`] invariant, with the worst offending entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape { rows: usize, cols: usize, expected: usize },
    NonFinite { i: usize, j: usize },
    Negative { i: usize, j: usize, value: f64 },
    Normalization { sum: f64 },
    Marginal { i: usize, stored: f64, row_sum: f64 },
    DiagonalExceedsMarginal { i: usize, diagonal: f64, marginal: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Shape {
                rows,
                cols,
                expected,
            } => write!(f, "shape: matrix is {rows}x{cols}, expected {expected}x{expected}"),
            Violation::NonFinite { i, j } => write!(f, "finiteness: entry ({i},{j})"),
            Violation::Negative { i, j, value } => {
                write!(f, "non-negativity: entry ({i},{j}) = {value:e}")
            }
            Violation::Normalization { sum } => write!(f, "normalization: sum = {sum}"),
            Violation::Marginal { i, stored, row_sum } => {
                write!(f, "marginal: Γ_{i} = {stored} but row sum = {row_sum}")
            }
            Violation::DiagonalExceedsMarginal {
                i,
                diagonal,
                marginal,
            } => write!(f, "diagonal bound: Γ_{i}{i} = {diagonal} > Γ_{i} = {marginal}"),
        }
    }
}

/// Probability `Γ_ij` that the first photon of a pair lands on pixel `i` and the
/// second on pixel `j`, together with the marginals `Γ_i = Σ_j Γ_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    grid: PixelGrid,
    gamma: Array2<f64>,
    marginal: Vec<f64>,
}

impl JointDistribution {
    /// Wraps a matrix without checking it. Marginals are computed from the rows.
    pub fn from_matrix_unchecked(grid: PixelGrid, gamma: Array2<f64>) -> Self {
        let marginal = gamma.rows().into_iter().map(|r| compensated_sum(r.iter().copied())).collect();
        Self {
            grid,
            gamma,
            marginal,
        }
    }

    /// Wraps a matrix, rejecting it if any invariant is broken.
    pub fn new(grid: PixelGrid, gamma: Array2<f64>) -> Result<Self, ModelError> {
        let (rows, cols) = gamma.dim();
        if rows != grid.n_pixels || cols != grid.n_pixels {
            return Err(ModelError::ShapeMismatch {
                rows,
                cols,
                expected: grid.n_pixels,
            });
        }
        let jd = Self::from_matrix_unchecked(grid, gamma);
        let violations = jd.validate();
        if violations.is_empty() {
            Ok(jd)
        } else {
            Err(ModelError::Invalid(violations))
        }
    }

    /// Uniform `Γ_ij = 1/N²`.
    pub fn uniform(grid: PixelGrid) -> Self {
        let n = grid.n_pixels;
        let p = 1.0 / (n * n) as f64;
        Self::from_matrix_unchecked(grid, Array2::from_elem((n, n), p))
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn n_pixels(&self) -> usize {
        self.grid.n_pixels
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.gamma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[[i, j]]
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginal
    }

    /// `Γ_i = Σ_j Γ_ij`.
    pub fn marginal(&self, i: usize) -> Result<f64, ModelError> {
        self.marginal
            .get(i)
            .copied()
            .ok_or(ModelError::IndexOutOfRange {
                index: i,
                n_pixels: self.grid.n_pixels,
            })
    }

    /// Every broken invariant; empty when the distribution is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.grid.n_pixels;
        let (rows, cols) = self.gamma.dim();
        if rows != n || cols != n || self.marginal.len() != n {
            out.push(Violation::Shape {
                rows,
                cols,
                expected: n,
            });
            return out;
        }
        if let Some(((i, j), _)) = self.gamma.indexed_iter().find(|(_, v)| !v.is_finite()) {
            out.push(Violation::NonFinite { i, j });
            return out;
        }

        let worst_negative = self
            .gamma
            .indexed_iter()
            .filter(|(_, &v)| v < 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1));
        if let Some(((i, j), &value)) = worst_negative {
            out.push(Violation::Negative { i, j, value });
        }

        let sum = compensated_sum(self.gamma.iter().copied());
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            out.push(Violation::Normalization { sum });
        }

        let worst_marginal = (0..n)
            .map(|i| {
                let row_sum = compensated_sum(self.gamma.row(i).iter().copied());
                (i, row_sum, (row_sum - self.marginal[i]).abs())
            })
            .filter(|&(_, _, err)| err > NORMALIZATION_TOLERANCE)
            .max_by(|a, b| a.2.total_cmp(&b.2));
        if let Some((i, row_sum, _)) = worst_marginal {
            out.push(Violation::Marginal {
                i,
                stored: self.marginal[i],
                row_sum,
            });
        }

        let worst_diag = (0..n)
            .map(|i| (i, self.gamma[[i, i]], self.marginal[i]))
            .filter(|&(_, d, m)| d > m + NORMALIZATION_TOLERANCE)
            .max_by(|a, b| (a.1 - a.2).total_cmp(&(b.1 - b.2)));
        if let Some((i, diagonal, marginal)) = worst_diag {
            out.push(Violation::DiagonalExceedsMarginal {
                i,
                diagonal,
                marginal,
            });
        }
        out
    }

    /// Largest `|Γ_ij − Γ_ji|`. The detection model treats the two photons of a
    /// pair as interchangeable, which needs this to be zero.
    pub fn asymmetry(&self) -> f64 {
        let n = self.grid.n_pixels;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.gamma[[i, j]] - self.gamma[[j, i]]).abs());
            }
        }
        worst
    }
}

/// Half the L1 distance between two matrices, each normalized by its own sum.
///
/// # Panics
/// If the shapes differ.
pub fn total_variation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "total_variation shape mismatch");
    let sa = compensated_sum(a.iter().copied());
    let sb = compensated_sum(b.iter().copied());
    0.5 * compensated_sum(a.iter().zip(b.iter()).map(|(x, y)| (x / sa - y / sb).abs()))
}

/// Parameters of `a · exp(−(x_i+x_j)²/4σ₊²) · exp(−(x_i−x_j)²/4σ₋²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleGaussianParams {
    #[serde(default = "one")]
    pub amplitude: f64,
    pub sigma_plus_um: f64,
    pub sigma_minus_um: f64,
}

fn one() -> f64 {
    1.0
}

impl DoubleGaussianParams {
    pub fn new(sigma_plus_um: f64, sigma_minus_um: f64) -> Self {
        Self {
            amplitude: 1.0,
            sigma_plus_um,
            sigma_minus_um,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let ok = |s: f64| s > 0.0 && !s.is_nan();
        if !ok(self.sigma_plus_um) || !ok(self.sigma_minus_um) {
            return Err(ModelError::InvalidDoubleGaussian(format!(
                "widths must be positive, got σ+={} σ-={}",
                self.sigma_plus_um, self.sigma_minus_um
            )));
        }
        if !self.amplitude.is_finite() {
            return Err(ModelError::InvalidDoubleGaussian("amplitude must be finite".into()));
        }
        Ok(())
    }

    /// Unnormalized model value at centered coordinates `(xi, xj)`.
    pub fn evaluate(&self, xi: f64, xj: f64) -> f64 {
        let s = xi + xj;
        let d = xi - xj;
        let sp = self.sigma_plus_um;
        let sm = self.sigma_minus_um;
        self.amplitude * (-(s * s) / (4.0 * sp * sp) - (d * d) / (4.0 * sm * sm)).exp()
    }
}

/// Evaluates the double-Gaussian at pixel centers (measured from the grid
/// midpoint) and normalizes to unit sum.
pub fn build_double_gaussian(
    grid: &PixelGrid,
    params: &DoubleGaussianParams,
) -> Result<JointDistribution, ModelError> {
    grid.check(DEFAULT_MAX_PIXELS)?;
    params.check()?;
    let n = grid.n_pixels;
    let unit = DoubleGaussianParams {
        amplitude: 1.0,
        ..*params
    };
    let raw = Array2::from_shape_fn((n, n), |(i, j)| {
        unit.evaluate(grid.centered_coordinate(i), grid.centered_coordinate(j))
    });
    let total = compensated_sum(raw.iter().copied());
    if !(total > 0.0 && total.is_finite()) {
        return Err(ModelError::NormalizationUnderflow);
    }
    let mut gamma = raw.mapv(|v| v / total);
    // Evaluation is symmetric up to rounding in (xi + xj); force exact symmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (gamma[[i, j]] + gamma[[j, i]]);
            gamma[[i, j]] = v;
            gamma[[j, i]] = v;
        }
    }
    Ok(JointDistribution::from_matrix_unchecked(*grid, gamma))
}

/// How the number of pairs per frame is distributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairNumberModel {
    Poisson,
    /// Any distribution with the given variance; realized for sampling as a
    /// negative binomial (over-dispersed) or a Poisson/two-point mixture
    /// (under-dispersed).
    GenericMoments { variance: f64 },
    /// `probabilities[m] = P(m)`.
    Explicit { probabilities: Vec<f64> },
}

/// Photon-pair source: mean pairs per frame and their number statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub mean_pairs: f64,
    #[serde(default = "poisson")]
    pub pair_number_model: PairNumberModel,
}

fn poisson() -> PairNumberModel {
    PairNumberModel::Poisson
}

impl SourceConfig {
    pub fn poisson(mean_pairs: f64) -> Self {
        Self {
            mean_pairs,
            pair_number_model: PairNumberModel::Poisson,
        }
    }

    /// Fixed number of pairs per frame.
    pub fn fixed(pairs: usize) -> Self {
        let mut probabilities = vec![0.0; pairs + 1];
        probabilities[pairs] = 1.0;
        Self {
            mean_pairs: pairs as f64,
            pair_number_model: PairNumberModel::Explicit { probabilities },
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if !(self.mean_pairs >= 0.0 && self.mean_pairs.is_finite()) {
            return Err(ModelError::InvalidSource(format!(
                "mean_pairs must be finite and non-negative, got {}",
                self.mean_pairs
            )));
        }
        match &self.pair_number_model {
            PairNumberModel::Poisson => Ok(()),
            PairNumberModel::GenericMoments { variance } => {
                if *variance >= 0.0 && variance.is_finite() {
                    Ok(())
                } else {
                    Err(ModelError::InvalidSource(format!(
                        "variance must be finite and non-negative, got {variance}"
                    )))
                }
            }
            PairNumberModel::Explicit { probabilities } => {
                if probabilities.is_empty() || probabilities.iter().any(|p| !(*p >= 0.0)) {
                    return Err(ModelError::InvalidSource(
                        "explicit probabilities must be non-empty and non-negative".into(),
                    ));
                }
                let total = compensated_sum(probabilities.iter().copied());
                if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(ModelError::InvalidSource(format!(
                        "explicit probabilities sum to {total}"
                    )));
                }
                let mean = compensated_sum(probabilities.iter().enumerate().map(|(m, p)| m as f64 * p));
                if (mean - self.mean_pairs).abs() > 1e-9 * mean.max(1.0) {
                    return Err(ModelError::InvalidSource(format!(
                        "mean_pairs {} disagrees with the explicit distribution mean {mean}",
                        self.mean_pairs
                    )));
                }
                Ok(())
            }
        }
    }

    /// Variance `σ_m²` of the pair number.
    pub fn variance(&self) -> f64 {
        match &self.pair_number_model {
            PairNumberModel::Poisson => self.mean_pairs,
            PairNumberModel::GenericMoments { variance } => *variance,
            PairNumberModel::Explicit { probabilities } => {
                let mean = self.mean_pairs;
                compensated_sum(
                    probabilities
                        .iter()
                        .enumerate()
                        .map(|(m, p)| (m as f64 - mean).powi(2) * p),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_grid() -> PixelGrid {
        PixelGrid::centered(64, 13.0).unwrap()
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert_eq!(PixelGrid::new(0, 1.0, 0.0), Err(ModelError::EmptyGrid));
        assert!(matches!(PixelGrid::new(4, 0.0, 0.0), Err(ModelError::InvalidPitch(_))));
        assert!(matches!(
            PixelGrid::new(5000, 1.0, 0.0),
            Err(ModelError::GridTooLarge(5000, DEFAULT_MAX_PIXELS))
        ));
    }

    #[test]
    fn two_pixel_gaussian_symmetries() {
        let grid = PixelGrid::centered(2, 10.0).unwrap();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(7.0, 7.0)).unwrap();
        let g = jd.matrix();
        assert_eq!(g[[0, 1]], g[[1, 0]]);
        assert_eq!(g[[0, 0]], g[[1, 1]]);
        assert!(jd.validate().is_empty());
    }

    #[test]
    fn wide_gaussian_tends_to_uniform() {
        let grid = PixelGrid::centered(8, 1.0).unwrap();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(1e6, 1e6)).unwrap();
        for &v in jd.matrix() {
            assert_close!(v, 1.0 / 64.0, 1e-12);
        }
    }

    #[test]
    fn reference_source_has_antidiagonal_ridge() {
        let grid = reference_grid();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(12.06, 926.12)).unwrap();
        assert!(jd.validate().is_empty());
        assert_eq!(jd.asymmetry(), 0.0);
        let g = jd.matrix();
        // Each row peaks on the anti-diagonal j = N-1-i.
        for i in 0..64 {
            let argmax = (0..64).max_by(|&a, &b| g[[i, a]].total_cmp(&g[[i, b]])).unwrap();
            assert_eq!(argmax, 63 - i, "row {i}");
        }
        // Ridge width: one pixel off the ridge the sum coordinate moves by one
        // pitch, so the ratio is exp(-13²/(4·12.06²)) up to the (tiny) σ- factor.
        let i = 20;
        let on = g[[i, 63 - i]];
        let off = g[[i, 62 - i]];
        let expected_ratio = (-(13.0f64 * 13.0) / (4.0 * 12.06 * 12.06)).exp();
        assert_close!(off / on, expected_ratio, 2e-3);
        // Marginals sum to one.
        let total: f64 = (0..64).map(|i| jd.marginal(i).unwrap()).sum();
        assert_close!(total, 1.0, 1e-12);
    }

    #[test]
    fn gaussian_valid_down_to_a_tenth_of_the_pitch() {
        let grid = PixelGrid::centered(16, 13.0).unwrap();
        for &(sp, sm) in &[(1.3, 1.3), (1.3, 500.0), (400.0, 1.3), (13.0, 13.0)] {
            let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(sp, sm)).unwrap();
            assert!(jd.validate().is_empty(), "σ+={sp} σ-={sm}: {:?}", jd.validate());
        }
    }

    #[test]
    fn underflow_is_reported() {
        let grid = PixelGrid::centered(64, 13.0).unwrap();
        // Only odd N has a pixel at the center; N=64 puts x=±6.5 µm, so a
        // ~0.01 µm width underflows every entry.
        let r = build_double_gaussian(&grid, &DoubleGaussianParams::new(0.01, 0.01));
        assert_eq!(r, Err(ModelError::NormalizationUnderflow));
    }

    #[test]
    fn validate_uniform_is_clean() {
        let jd = JointDistribution::uniform(PixelGrid::centered(5, 1.0).unwrap());
        assert!(jd.validate().is_empty());
        for i in 0..5 {
            assert_close!(jd.marginal(i).unwrap(), 0.2, 1e-15);
        }
    }

    #[test]
    fn validate_flags_negative_entry() {
        let grid = PixelGrid::centered(3, 1.0).unwrap();
        let mut g = Array2::from_elem((3, 3), 1.0 / 9.0);
        g[[0, 2]] = -1e-6;
        g[[0, 0]] += 1.0 / 9.0 + 1e-6;
        let v = JointDistribution::from_matrix_unchecked(grid, g).validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(matches!(v[0], Violation::Negative { i: 0, j: 2, value } if value == -1e-6));
    }

    #[test]
    fn validate_flags_normalization() {
        let grid = PixelGrid::centered(4, 1.0).unwrap();
        let g = Array2::from_elem((4, 4), 2.0 / 16.0);
        let v = JointDistribution::from_matrix_unchecked(grid, g).validate();
        assert_eq!(v.len(), 1, "{v:?}");
        match v[0] {
            Violation::Normalization { sum } => assert_close!(sum, 2.0, 1e-12),
            ref other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn marginal_of_point_mass() {
        let grid = PixelGrid::centered(4, 1.0).unwrap();
        let mut g = Array2::zeros((4, 4));
        g[[0, 0]] = 1.0;
        let jd = JointDistribution::new(grid, g).unwrap();
        assert_eq!(jd.marginal(0).unwrap(), 1.0);
        for k in 1..4 {
            assert_eq!(jd.marginal(k).unwrap(), 0.0);
        }
        assert_eq!(
            jd.marginal(4),
            Err(ModelError::IndexOutOfRange {
                index: 4,
                n_pixels: 4
            })
        );
    }

    #[test]
    fn total_variation_basics() {
        let a = Array2::from_elem((2, 2), 0.25);
        let mut b = Array2::zeros((2, 2));
        b[[0, 0]] = 1.0;
        assert_close!(total_variation(&a, &a), 0.0, 1e-15);
        assert_close!(total_variation(&a, &b), 0.75, 1e-15);
        // Scale-free.
        assert_close!(total_variation(&a.mapv(|v| v * 3.0), &b), 0.75, 1e-15);
    }

    #[test]
    fn source_variance_and_checks() {
        assert_eq!(SourceConfig::poisson(2.0).variance(), 2.0);
        let fixed = SourceConfig::fixed(3);
        fixed.check().unwrap();
        assert_eq!(fixed.variance(), 0.0);
        let bad = SourceConfig {
            mean_pairs: 1.0,
            pair_number_model: PairNumberModel::Explicit {
                probabilities: vec![0.5, 0.25],
            },
        };
        assert!(bad.check().is_err());
        assert!(SourceConfig::poisson(-1.0).check().is_err());
    }
}
