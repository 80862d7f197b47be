//! Inversion of accumulated moments back to the joint distribution.
//!
//! Each inversion produces a [`RawGamma`] on the scale set by the supplied
//! detector parameters (or scale 1 when they are unknown). Background removal
//! works on raw values; [`finalize`] clamps and normalizes.

mod fit;

pub use fit::{
    conditional_profile, default_initial_guess, fit_double_gaussian, fit_double_gaussian_matrix,
    FitResult, MAX_FIT_ITERATIONS,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accumulate::{AccumulateError, MomentAccumulator};
use crate::model::DoubleGaussianParams;

/// Mean direct images at or above this value count as saturated.
pub const SATURATION_LIMIT: f64 = 1.0 - 1e-12;

/// Default width of the background box filter, in pixels.
pub const DEFAULT_FILTER_WIDTH: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructError {
    #[error("pixel {index} is saturated (mean count {value})")]
    SaturatedPixel { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("filter width {width} must be at least 1 and below the matrix size {n}")]
    FilterWidth { width: usize, n: usize },
    #[error("no positive entries left to normalize")]
    AllNonPositive,
    #[error("the same-pixel probability cannot be reconstructed from binary frames")]
    DiagonalUnavailable,
    #[error("fit did not converge after {iterations} iterations (relative rms residual {residual:e}); last iterate {last:?}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last: DoubleGaussianParams,
    },
    #[error(transparent)]
    Accumulate(#[from] AccumulateError),
}

/// How the product of means `⟨x_i⟩⟨x_j⟩` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductEstimator {
    /// Product of the two mean direct images.
    #[default]
    ProductOfMeans,
    /// Average product of pixel values in consecutive frames.
    SuccessiveFrames,
}

/// Moment images in the shape the inversions consume.
///
/// Rows and columns of `corr` refer to `row_mean` and `col_mean`; they are
/// the same pixel line unless the data come from two separate lines, in which
/// case no entry is a same-pixel product.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentImages {
    pub row_mean: Vec<f64>,
    pub col_mean: Vec<f64>,
    pub corr: Array2<f64>,
    /// Estimate of `⟨x_i⟩⟨x_j⟩`.
    pub product: Array2<f64>,
    /// `⟨x_i²⟩` of the row line when it shares pixels with the columns.
    pub square: Option<Vec<f64>>,
    pub same_line: bool,
}

impl MomentImages {
    /// Images of a single pixel line.
    pub fn single_line(mean: &[f64], corr: &Array2<f64>) -> Result<Self, ReconstructError> {
        let images = Self {
            row_mean: mean.to_vec(),
            col_mean: mean.to_vec(),
            corr: corr.clone(),
            product: outer(mean, mean),
            square: None,
            same_line: true,
        };
        images.check()?;
        Ok(images)
    }

    /// Images of two distinct pixel lines.
    pub fn two_lines(
        row_mean: &[f64],
        col_mean: &[f64],
        corr: &Array2<f64>,
    ) -> Result<Self, ReconstructError> {
        let images = Self {
            row_mean: row_mean.to_vec(),
            col_mean: col_mean.to_vec(),
            corr: corr.clone(),
            product: outer(row_mean, col_mean),
            square: None,
            same_line: false,
        };
        images.check()?;
        Ok(images)
    }

    pub fn from_accumulator(
        acc: &MomentAccumulator,
        estimator: ProductEstimator,
    ) -> Result<Self, ReconstructError> {
        let (row_mean, col_mean) = acc.mean_lines()?;
        let same_line = matches!(acc.layout(), crate::accumulate::Layout::Full { .. });
        let product = match estimator {
            ProductEstimator::ProductOfMeans => outer(&row_mean, &col_mean),
            ProductEstimator::SuccessiveFrames => {
                let s = acc.mean_corr_successive()?;
                if same_line {
                    // Symmetrize: frame order carries no information here.
                    (&s + &s.t()) * 0.5
                } else {
                    s
                }
            }
        };
        let square = if same_line { Some(acc.mean_square()?) } else { None };
        Ok(Self {
            row_mean,
            col_mean,
            corr: acc.mean_corr()?,
            product,
            square,
            same_line,
        })
    }

    pub fn with_square(mut self, square: Vec<f64>) -> Self {
        self.square = Some(square);
        self
    }

    fn check(&self) -> Result<(), ReconstructError> {
        let shape = (self.row_mean.len(), self.col_mean.len());
        if self.corr.dim() != shape || self.product.dim() != shape {
            return Err(ReconstructError::ShapeMismatch(format!(
                "correlation image {:?} vs direct images {:?}",
                self.corr.dim(),
                shape
            )));
        }
        if let Some(sq) = &self.square {
            if sq.len() != self.row_mean.len() {
                return Err(ReconstructError::ShapeMismatch("square image length".into()));
            }
        }
        Ok(())
    }

    fn covariance(&self) -> Array2<f64> {
        &self.corr - &self.product
    }

    /// Entries that are same-pixel products and carry no pair information.
    fn is_same_pixel(&self, i: usize, j: usize) -> bool {
        self.same_line && i == j
    }
}

fn outer(a: &[f64], b: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Physical parameters that fix the absolute scale of `Γ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpcScale {
    pub eta: f64,
    pub mean_pairs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmccdScale {
    /// Conversion gain `A`.
    pub gain: f64,
    pub eta: f64,
    pub mean_pairs: f64,
}

/// Parameters for the non-Poissonian and diagonal inversions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmccdModel {
    pub gain: f64,
    pub offset: f64,
    pub background_variance: f64,
    pub eta: f64,
    pub mean_pairs: f64,
    pub pair_variance: f64,
}

impl EmccdModel {
    fn check(&self) -> Result<(), ReconstructError> {
        if !(self.gain > 0.0 && self.eta > 0.0 && self.mean_pairs > 0.0) {
            return Err(ReconstructError::InvalidParameter(format!(
                "A = {}, η = {}, m̄ = {} must all be positive",
                self.gain, self.eta, self.mean_pairs
            )));
        }
        Ok(())
    }

    fn denominator(&self) -> f64 {
        2.0 * self.gain * self.gain * self.mean_pairs * self.eta * self.eta
    }

    /// `Γ_i` from the mean direct image.
    fn marginal(&self, mean: f64) -> f64 {
        (mean - self.offset) / (2.0 * self.gain * self.mean_pairs * self.eta)
    }
}

/// Un-normalized reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGamma {
    /// Row-major `rows × cols` values; non-finite entries are dropped at
    /// finalization.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub same_line: bool,
    /// Reconstructed `Γ_ii`, when the readout allows it.
    pub diagonal: Option<Vec<f64>>,
    pub scale_note: String,
    /// Entries whose logarithm argument was not positive (SPC only).
    pub nonpositive_log: usize,
    pub worst_log_argument: Option<(usize, usize, f64)>,
    pub non_poisson_correction: bool,
    /// Summary of the background subtracted by [`remove_background`].
    pub background: Option<BackgroundReport>,
}

impl RawGamma {
    fn from_matrix(m: Array2<f64>, same_line: bool, scale_note: String) -> Self {
        let (rows, cols) = m.dim();
        Self {
            values: m.into_raw_vec_and_offset().0,
            rows,
            cols,
            same_line,
            diagonal: None,
            scale_note,
            nonpositive_log: 0,
            worst_log_argument: None,
            non_poisson_correction: false,
            background: None,
        }
    }

    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.values.clone())
            .expect("stored shape matches values")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn diagonal_valid(&self) -> bool {
        self.diagonal.is_some()
    }

    /// Whether `(i, j)` holds a usable pair estimate.
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_finite() && !(self.same_line && i == j)
    }
}

/// Binary-readout inversion
/// `Γ_ij = ln[1 + (⟨c_ic_j⟩ − ⟨c_i⟩⟨c_j⟩)/((1 − ⟨c_i⟩)(1 − ⟨c_j⟩))] / (2η²m̄)`.
///
/// Entries whose logarithm argument is not positive become `−∞` and are
/// dropped at finalization. Same-pixel entries are set to zero.
pub fn reconstruct_spc_images(
    images: &MomentImages,
    scale: Option<SpcScale>,
) -> Result<RawGamma, ReconstructError> {
    images.check()?;
    let factor = match scale {
        Some(s) => {
            if !(s.eta > 0.0 && s.mean_pairs > 0.0) {
                return Err(ReconstructError::InvalidParameter(format!(
                    "η = {} and m̄ = {} must be positive",
                    s.eta, s.mean_pairs
                )));
            }
            1.0 / (2.0 * s.eta * s.eta * s.mean_pairs)
        }
        None => 1.0,
    };
    for (index, &value) in images.row_mean.iter().chain(&images.col_mean).enumerate() {
        if value >= SATURATION_LIMIT {
            let index = index % images.row_mean.len().max(1);
            return Err(ReconstructError::SaturatedPixel { index, value });
        }
    }
    let cov = images.covariance();
    let (rows, cols) = cov.dim();
    let mut out = Array2::zeros((rows, cols));
    let mut dropped = 0;
    let mut worst: Option<(usize, usize, f64)> = None;
    for i in 0..rows {
        for j in 0..cols {
            if images.is_same_pixel(i, j) {
                continue;
            }
            let argument =
                1.0 + cov[[i, j]] / ((1.0 - images.row_mean[i]) * (1.0 - images.col_mean[j]));
            if argument > 0.0 {
                out[[i, j]] = argument.ln() * factor;
            } else {
                out[[i, j]] = f64::NEG_INFINITY;
                dropped += 1;
                if worst.is_none_or(|(_, _, w)| argument < w) {
                    worst = Some((i, j, argument));
                }
            }
        }
    }
    let note = match scale {
        Some(s) => format!("1/(2η²m̄) with η = {}, m̄ = {}", s.eta, s.mean_pairs),
        None => "normalized-only".to_string(),
    };
    let mut raw = RawGamma::from_matrix(out, images.same_line, note);
    raw.nonpositive_log = dropped;
    raw.worst_log_argument = worst;
    Ok(raw)
}

/// [`reconstruct_spc_images`] for one pixel line.
pub fn reconstruct_spc(
    mean: &[f64],
    corr: &Array2<f64>,
    scale: Option<SpcScale>,
) -> Result<RawGamma, ReconstructError> {
    reconstruct_spc_images(&MomentImages::single_line(mean, corr)?, scale)
}

/// Linear-readout inversion `Γ_ij = (⟨x_ix_j⟩ − ⟨x_i⟩⟨x_j⟩)/(2A²m̄η²)`.
///
/// Negative entries are kept; same-pixel entries are set to zero.
pub fn reconstruct_emccd_images(
    images: &MomentImages,
    scale: Option<EmccdScale>,
) -> Result<RawGamma, ReconstructError> {
    images.check()?;
    let factor = match scale {
        Some(s) => {
            if !(s.gain > 0.0 && s.eta > 0.0 && s.mean_pairs > 0.0) {
                return Err(ReconstructError::InvalidParameter(format!(
                    "A = {}, η = {}, m̄ = {} must all be positive",
                    s.gain, s.eta, s.mean_pairs
                )));
            }
            1.0 / (2.0 * s.gain * s.gain * s.mean_pairs * s.eta * s.eta)
        }
        None => 1.0,
    };
    let mut out = images.covariance() * factor;
    if images.same_line {
        out.diag_mut().fill(0.0);
    }
    let note = match scale {
        Some(s) => format!(
            "1/(2A²m̄η²) with A = {}, η = {}, m̄ = {}",
            s.gain, s.eta, s.mean_pairs
        ),
        None => "normalized-only".to_string(),
    };
    Ok(RawGamma::from_matrix(out, images.same_line, note))
}

/// [`reconstruct_emccd_images`] for one pixel line.
pub fn reconstruct_emccd(
    mean: &[f64],
    corr: &Array2<f64>,
    scale: Option<EmccdScale>,
) -> Result<RawGamma, ReconstructError> {
    reconstruct_emccd_images(&MomentImages::single_line(mean, corr)?, scale)
}

/// Linear-readout inversion for a pair number with arbitrary variance:
/// the rank-one term `(σ_m² − m̄)/m̄² (⟨x_i⟩ − x₀)(⟨x_j⟩ − x₀)` is removed
/// from the covariance before scaling.
pub fn reconstruct_general_images(
    images: &MomentImages,
    model: &EmccdModel,
) -> Result<RawGamma, ReconstructError> {
    images.check()?;
    model.check()?;
    let excess = (model.pair_variance - model.mean_pairs) / (model.mean_pairs * model.mean_pairs);
    let cov = images.covariance();
    let denominator = model.denominator();
    let mut out = Array2::from_shape_fn(cov.dim(), |(i, j)| {
        let background =
            excess * (images.row_mean[i] - model.offset) * (images.col_mean[j] - model.offset);
        (cov[[i, j]] - background) / denominator
    });
    if images.same_line {
        out.diag_mut().fill(0.0);
    }
    let mut raw = RawGamma::from_matrix(
        out,
        images.same_line,
        format!(
            "1/(2A²m̄η²) with A = {}, η = {}, m̄ = {}, σ_m² = {}",
            model.gain, model.eta, model.mean_pairs, model.pair_variance
        ),
    );
    raw.non_poisson_correction = model.pair_variance != model.mean_pairs;
    Ok(raw)
}

/// [`reconstruct_general_images`] for one pixel line.
pub fn reconstruct_general(
    mean: &[f64],
    corr: &Array2<f64>,
    model: &EmccdModel,
) -> Result<RawGamma, ReconstructError> {
    reconstruct_general_images(&MomentImages::single_line(mean, corr)?, model)
}

/// Same-pixel probabilities `Γ_ii` from `⟨x_i⟩` and `⟨x_i²⟩` of a linear
/// readout. Negative results are returned as they are.
pub fn reconstruct_diagonal(
    mean: &[f64],
    square: &[f64],
    model: &EmccdModel,
) -> Result<Vec<f64>, ReconstructError> {
    model.check()?;
    if mean.len() != square.len() {
        return Err(ReconstructError::ShapeMismatch(format!(
            "{} means vs {} squares",
            mean.len(),
            square.len()
        )));
    }
    let (a, x0, eta, mbar) = (model.gain, model.offset, model.eta, model.mean_pairs);
    let factorial2 = mbar * mbar + model.pair_variance - mbar;
    Ok(mean
        .iter()
        .zip(square)
        .map(|(&mu, &sq)| {
            let gi = model.marginal(mu);
            (sq - 4.0 * a * a * factorial2 * eta * eta * gi * gi
                - 4.0 * (a * a + a * x0) * mbar * eta * gi
                - model.background_variance
                - x0 * x0)
                / model.denominator()
        })
        .collect())
}

/// Attaches the reconstructed diagonal to a linear-readout result.
pub fn with_diagonal(mut raw: RawGamma, diagonal: Vec<f64>) -> Result<RawGamma, ReconstructError> {
    if !raw.same_line || diagonal.len() != raw.rows {
        return Err(ReconstructError::ShapeMismatch(
            "diagonal needs a square single-line reconstruction".into(),
        ));
    }
    raw.diagonal = Some(diagonal);
    Ok(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundReport {
    pub filter_width: usize,
    /// Mean of the subtracted background over valid entries.
    pub mean_removed: f64,
    pub max_abs_removed: f64,
}

/// Subtracts a smooth background: the local mean of valid entries in a
/// `width × width` box (truncated and renormalized at the edges).
pub fn remove_background(raw: &RawGamma, width: usize) -> Result<RawGamma, ReconstructError> {
    let n = raw.rows.min(raw.cols);
    if width == 0 || width >= n {
        return Err(ReconstructError::FilterWidth { width, n });
    }
    let (rows, cols) = (raw.rows, raw.cols);
    // Integral images of valid values and of the validity mask.
    let stride = cols + 1;
    let mut sum = vec![0.0; (rows + 1) * stride];
    let mut count = vec![0.0; (rows + 1) * stride];
    for i in 0..rows {
        for j in 0..cols {
            let (v, c) = if raw.is_valid(i, j) {
                (raw.get(i, j), 1.0)
            } else {
                (0.0, 0.0)
            };
            let at = (i + 1) * stride + j + 1;
            sum[at] = v + sum[at - 1] + sum[at - stride] - sum[at - stride - 1];
            count[at] = c + count[at - 1] + count[at - stride] - count[at - stride - 1];
        }
    }
    let box_total = |table: &[f64], r0: usize, r1: usize, c0: usize, c1: usize| {
        table[r1 * stride + c1] - table[r0 * stride + c1] - table[r1 * stride + c0]
            + table[r0 * stride + c0]
    };
    let before = width / 2;
    let after = width - 1 - before;
    let mut out = raw.clone();
    let mut removed_sum = 0.0;
    let mut removed_max: f64 = 0.0;
    let mut removed_count = 0usize;
    for i in 0..rows {
        let (r0, r1) = (i.saturating_sub(before), (i + after + 1).min(rows));
        for j in 0..cols {
            if !raw.is_valid(i, j) {
                continue;
            }
            let (c0, c1) = (j.saturating_sub(before), (j + after + 1).min(cols));
            let c = box_total(&count, r0, r1, c0, c1);
            let background = box_total(&sum, r0, r1, c0, c1) / c;
            out.values[i * cols + j] = raw.get(i, j) - background;
            removed_sum += background;
            removed_max = removed_max.max(background.abs());
            removed_count += 1;
        }
    }
    out.background = Some(BackgroundReport {
        filter_width: width,
        mean_removed: if removed_count > 0 {
            removed_sum / removed_count as f64
        } else {
            0.0
        },
        max_abs_removed: removed_max,
    });
    Ok(out)
}

/// Normalized reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    /// Row-major normalized `Γ̂`, entries ≥ 0 summing to 1.
    pub gamma: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub raw: RawGamma,
    pub diagonal_valid: bool,
    pub scale_note: String,
    /// Factor that took the clamped raw values to unit sum.
    pub normalization: f64,
    /// Total of the negative raw entries that were clamped to zero.
    pub clamped_mass: f64,
    pub dropped_entries: usize,
}

impl ReconstructionResult {
    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.gamma.clone())
            .expect("stored shape matches values")
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.cols + j]
    }

    /// Whether entry `(i, j)` was reconstructed (rather than unavailable).
    pub fn is_measured(&self, i: usize, j: usize) -> bool {
        !(self.raw.same_line && i == j && !self.diagonal_valid)
    }

    /// Total-variation distance to `truth` after unmeasured entries of the
    /// truth are set to zero and both matrices are scaled to unit sum.
    pub fn total_variation_to(&self, truth: &Array2<f64>) -> Result<f64, ReconstructError> {
        if truth.dim() != (self.rows, self.cols) {
            return Err(ReconstructError::ShapeMismatch(format!(
                "truth is {:?}, reconstruction {}×{}",
                truth.dim(),
                self.rows,
                self.cols
            )));
        }
        let masked = Array2::from_shape_fn(truth.dim(), |(i, j)| {
            if self.is_measured(i, j) {
                truth[[i, j]]
            } else {
                0.0
            }
        });
        Ok(crate::model::total_variation(&self.matrix(), &masked))
    }
}

/// Clamps negative and dropped entries to zero, inserts the diagonal when
/// available and scales to unit sum.
pub fn finalize(raw: &RawGamma) -> Result<ReconstructionResult, ReconstructError> {
    let (rows, cols) = (raw.rows, raw.cols);
    let mut gamma = vec![0.0; rows * cols];
    let mut clamped = 0.0;
    let mut dropped = 0;
    for i in 0..rows {
        for j in 0..cols {
            let v = if raw.same_line && i == j {
                match &raw.diagonal {
                    Some(d) => d[i],
                    None => continue,
                }
            } else {
                raw.get(i, j)
            };
            if !v.is_finite() {
                dropped += 1;
            } else if v < 0.0 {
                clamped += v;
            } else {
                gamma[i * cols + j] = v;
            }
        }
    }
    let total: f64 = gamma.iter().sum();
    if !(total > 0.0) {
        return Err(ReconstructError::AllNonPositive);
    }
    for g in &mut gamma {
        *g /= total;
    }
    Ok(ReconstructionResult {
        gamma,
        rows,
        cols,
        raw: raw.clone(),
        diagonal_valid: raw.diagonal_valid(),
        scale_note: raw.scale_note.clone(),
        normalization: 1.0 / total,
        clamped_mass: clamped,
        dropped_entries: dropped,
    })
}
