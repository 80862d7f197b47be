//! Sharded simulate-and-accumulate driver and the reconstruction front end.
//!
//! The frame range is cut into fixed-size shards that are accumulated
//! independently and merged in order. Shard boundaries do not depend on the
//! thread count, so parallel and sequential runs give bit-identical sums.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accumulate::{AccumulateError, Layout, MomentAccumulator};
use crate::model::{JointDistribution, ModelError, PixelGrid, SourceConfig};
use crate::reconstruct::{
    finalize, reconstruct_diagonal, reconstruct_emccd_images, reconstruct_general_images,
    reconstruct_spc_images, remove_background, with_diagonal, EmccdModel, EmccdScale, MomentImages,
    ProductEstimator, RawGamma, ReconstructError, ReconstructionResult, SpcScale,
};
use crate::sim::{Frame, FrameKind, FrameSimulator, Scratch, SensorConfig, SimError};

/// Frames per shard.
pub const SHARD_FRAMES: u64 = 1 << 14;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Accumulate(#[from] AccumulateError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Mismatch(String),
}

/// Runs `f` on each shard range `[start, end)` of `0..n_frames` and merges
/// the results in frame order.
fn sharded(
    n_frames: u64,
    layout: Layout,
    f: impl Fn(u64, u64) -> MomentAccumulator + Sync,
) -> MomentAccumulator {
    let shards: Vec<(u64, u64)> = (0..n_frames.div_ceil(SHARD_FRAMES))
        .map(|s| (s * SHARD_FRAMES, ((s + 1) * SHARD_FRAMES).min(n_frames)))
        .collect();
    let mut total = MomentAccumulator::with_layout(layout);

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        // Bound the number of live shard accumulators.
        let batch = 2 * rayon::current_num_threads().max(1);
        for chunk in shards.chunks(batch) {
            let parts: Vec<MomentAccumulator> = chunk.par_iter().map(|&(a, b)| f(a, b)).collect();
            for p in &parts {
                total
                    .merge_in_place(p)
                    .expect("shards share one layout");
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        for &(a, b) in &shards {
            total
                .merge_in_place(&f(a, b))
                .expect("shards share one layout");
        }
    }
    total
}

/// Accumulates frames `0..n_frames` of `sim` without materializing them.
pub fn accumulate_simulated(sim: &FrameSimulator, n_frames: u64, layout: Layout) -> Result<MomentAccumulator, PipelineError> {
    if layout.frame_len() != sim.n_pixels() {
        return Err(PipelineError::Mismatch(format!(
            "layout expects {} pixels per frame, simulator produces {}",
            layout.frame_len(),
            sim.n_pixels()
        )));
    }
    Ok(sharded(n_frames, layout, |start, end| {
        let mut acc = MomentAccumulator::with_layout(layout);
        let mut scratch = Scratch::default();
        let mut frame = Frame::empty(sim.kind(), sim.n_pixels());
        for l in start..end {
            sim.frame_into(l, &mut scratch, &mut frame);
            acc.push(&frame).expect("simulator frames match the layout");
        }
        acc
    }))
}

/// Same as [`accumulate_simulated`] but always on the calling thread.
pub fn accumulate_simulated_sequential(
    sim: &FrameSimulator,
    n_frames: u64,
    layout: Layout,
) -> Result<MomentAccumulator, PipelineError> {
    if layout.frame_len() != sim.n_pixels() {
        return Err(PipelineError::Mismatch("layout does not match simulator".into()));
    }
    let mut total = MomentAccumulator::with_layout(layout);
    let mut scratch = Scratch::default();
    let mut frame = Frame::empty(sim.kind(), sim.n_pixels());
    let mut start = 0;
    while start < n_frames {
        let end = (start + SHARD_FRAMES).min(n_frames);
        let mut acc = MomentAccumulator::with_layout(layout);
        for l in start..end {
            sim.frame_into(l, &mut scratch, &mut frame);
            acc.push(&frame)?;
        }
        total.merge_in_place(&acc)?;
        start = end;
    }
    Ok(total)
}

/// Joint distribution over two pixel lines of `N` pixels each, laid out as a
/// `2N`-pixel line: the first photon of a pair lands on line A at `i` and
/// the second on line B at `j` with probability `Γ_ij`. The photons are
/// interchangeable, so the `2N × 2N` matrix holds `Γ/2` in both off-diagonal
/// blocks.
pub fn embed_two_lines(jd: &JointDistribution) -> Result<JointDistribution, ModelError> {
    let n = jd.n_pixels();
    let mut g = Array2::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * jd.get(i, j);
            g[[i, n + j]] = v;
            g[[n + j, i]] = v;
        }
    }
    let grid = jd.grid();
    let wide = PixelGrid::new(2 * n, grid.pitch_um, grid.origin_um)?;
    JointDistribution::new(wide, g)
}

/// Which inversion turns moments into `Γ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inversion {
    Spc,
    Emccd,
    General,
}

impl Inversion {
    pub fn expected_kind(&self) -> FrameKind {
        match self {
            Inversion::Spc => FrameKind::Binary,
            _ => FrameKind::Gray,
        }
    }
}

/// Physical parameters known to the reconstruction. Missing values switch
/// the corresponding inversion to normalized-only output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KnownParameters {
    pub eta: Option<f64>,
    pub mean_pairs: Option<f64>,
    pub pair_variance: Option<f64>,
    pub gain: Option<f64>,
    pub offset: Option<f64>,
    pub background_variance: Option<f64>,
}

impl KnownParameters {
    /// Everything the simulator was configured with.
    pub fn from_config(source: &SourceConfig, sensor: &SensorConfig) -> Self {
        let noise = sensor.mode.noise();
        Self {
            eta: Some(sensor.eta),
            mean_pairs: Some(source.mean_pairs),
            pair_variance: Some(source.variance()),
            gain: noise.map(|n| n.conversion_gain()),
            offset: noise.map(|n| n.offset()),
            background_variance: noise.map(|n| n.background_variance()),
        }
    }

    fn emccd_model(&self) -> Option<EmccdModel> {
        Some(EmccdModel {
            gain: self.gain?,
            offset: self.offset?,
            background_variance: self.background_variance.unwrap_or(0.0),
            eta: self.eta?,
            mean_pairs: self.mean_pairs?,
            pair_variance: self.pair_variance.or(self.mean_pairs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub inversion: Inversion,
    #[serde(default)]
    pub estimator: ProductEstimator,
    /// Background box filter width; `None` skips background removal.
    #[serde(default)]
    pub filter_width: Option<usize>,
    #[serde(default)]
    pub parameters: KnownParameters,
    /// Reconstruct `Γ_ii` as well (linear readout only).
    #[serde(default)]
    pub diagonal: bool,
}

impl ReconstructOptions {
    pub fn new(inversion: Inversion) -> Self {
        Self {
            inversion,
            estimator: ProductEstimator::ProductOfMeans,
            filter_width: None,
            parameters: KnownParameters::default(),
            diagonal: false,
        }
    }
}

/// Raw `Γ̂` from accumulated moments, before background removal.
pub fn invert_accumulated(
    acc: &MomentAccumulator,
    kind: FrameKind,
    options: &ReconstructOptions,
) -> Result<RawGamma, PipelineError> {
    if kind != options.inversion.expected_kind() {
        return Err(PipelineError::Mismatch(format!(
            "{:?} frames cannot be inverted with the {:?} formula",
            kind, options.inversion
        )));
    }
    let images = MomentImages::from_accumulator(acc, options.estimator)?;
    let p = &options.parameters;
    let mut raw = match options.inversion {
        Inversion::Spc => {
            let scale = match (p.eta, p.mean_pairs) {
                (Some(eta), Some(mean_pairs)) => Some(SpcScale { eta, mean_pairs }),
                _ => None,
            };
            reconstruct_spc_images(&images, scale)?
        }
        Inversion::Emccd => {
            let scale = match (p.gain, p.eta, p.mean_pairs) {
                (Some(gain), Some(eta), Some(mean_pairs)) => Some(EmccdScale {
                    gain,
                    eta,
                    mean_pairs,
                }),
                _ => None,
            };
            reconstruct_emccd_images(&images, scale)?
        }
        Inversion::General => {
            let model = p.emccd_model().ok_or_else(|| {
                PipelineError::Mismatch(
                    "the general inversion needs A, x0, η, m̄ and σ_m²".into(),
                )
            })?;
            reconstruct_general_images(&images, &model)?
        }
    };
    if options.diagonal {
        if kind == FrameKind::Binary {
            return Err(ReconstructError::DiagonalUnavailable.into());
        }
        let model = p.emccd_model().ok_or_else(|| {
            PipelineError::Mismatch("the diagonal needs A, x0, σ0², η and m̄".into())
        })?;
        let square = images
            .square
            .as_ref()
            .ok_or_else(|| PipelineError::Mismatch("two-line data have no same-pixel moments".into()))?;
        let diagonal = reconstruct_diagonal(&images.row_mean, square, &model)?;
        raw = with_diagonal(raw, diagonal)?;
    }
    Ok(raw)
}

/// Inversion, optional background removal and normalization.
pub fn reconstruct_accumulated(
    acc: &MomentAccumulator,
    kind: FrameKind,
    options: &ReconstructOptions,
) -> Result<ReconstructionResult, PipelineError> {
    let raw = invert_accumulated(acc, kind, options)?;
    let raw = match options.filter_width {
        Some(w) => remove_background(&raw, w)?,
        None => raw,
    };
    Ok(finalize(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_double_gaussian, DoubleGaussianParams};

    #[test]
    fn shard_merge_matches_single_pass() {
        let grid = PixelGrid::centered(6, 13.0).unwrap();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(15.0, 60.0)).unwrap();
        let sensor = SensorConfig::spc(grid, 0.5, 0.02);
        let sim = FrameSimulator::new(&jd, &SourceConfig::poisson(1.0), &sensor, 5).unwrap();
        let n = SHARD_FRAMES + 123;
        let a = accumulate_simulated(&sim, n, Layout::Full { n: 6 }).unwrap();
        let b = accumulate_simulated_sequential(&sim, n, Layout::Full { n: 6 }).unwrap();
        assert_eq!(a, b);
        let mut direct = MomentAccumulator::new(6);
        for l in 0..n {
            direct.push(&sim.frame(l)).unwrap();
        }
        // Binary sums are integers, so the order of additions is irrelevant.
        assert_eq!(a.sum_xx(), direct.sum_xx());
        assert_eq!(a.sum_x_next(), direct.sum_x_next());
    }

    #[test]
    fn two_line_embedding_is_valid() {
        let grid = PixelGrid::centered(5, 13.0).unwrap();
        let jd = build_double_gaussian(&grid, &DoubleGaussianParams::new(15.0, 60.0)).unwrap();
        let wide = embed_two_lines(&jd).unwrap();
        assert!(wide.validate().is_empty());
        assert_eq!(wide.get(1, 5 + 3), 0.5 * jd.get(1, 3));
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let mut acc = MomentAccumulator::new(2);
        acc.push(&Frame::binary(vec![1.0, 0.0])).unwrap();
        let opts = ReconstructOptions::new(Inversion::Emccd);
        assert!(matches!(
            invert_accumulated(&acc, FrameKind::Binary, &opts),
            Err(PipelineError::Mismatch(_))
        ));
    }
}
