//! Monte Carlo forward model: pair count, pair positions, quantum-efficiency
//! thinning and per-pixel readout.
//!
//! Every frame draws from its own ChaCha stream selected by the frame index,
//! so any frame can be regenerated in isolation and frames can be produced in
//! any order or in parallel with bit-identical results.

mod emccd;

pub use emccd::{gauss_legendre, EmccdNoiseParams, EmccdSampler, ExceedanceTable, ERLANG_SUM_LIMIT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JointDistribution, ModelError, PixelGrid, SourceConfig};
use crate::oracle::{OracleError, PairCountDistribution};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("frame has {found} pixels, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Binary,
    Gray,
}

/// One acquisition: per-pixel counts `c_i ∈ {0, 1}` or gray values `x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub kind: FrameKind,
    pub values: Vec<f64>,
}

impl Frame {
    pub fn binary(values: Vec<f64>) -> Self {
        Self {
            kind: FrameKind::Binary,
            values,
        }
    }

    pub fn gray(values: Vec<f64>) -> Self {
        Self {
            kind: FrameKind::Gray,
            values,
        }
    }

    pub fn empty(kind: FrameKind, n: usize) -> Self {
        Self {
            kind,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `true` unless a binary frame holds something other than 0 or 1.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            FrameKind::Binary => self.values.iter().all(|&v| v == 0.0 || v == 1.0),
            FrameKind::Gray => self.values.iter().all(|v| v.is_finite()),
        }
    }
}

/// Slow sinusoidal modulation of the EMCCD multiplication gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainDrift {
    /// Relative amplitude, e.g. 0.05 for ±5%.
    pub amplitude: f64,
    pub period_frames: f64,
    #[serde(default)]
    pub phase: f64,
}

impl GainDrift {
    pub fn scale(&self, frame_index: u64) -> f64 {
        let angle = std::f64::consts::TAU * frame_index as f64 / self.period_frames + self.phase;
        1.0 + self.amplitude * angle.sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReadoutMode {
    /// Binary pixel with false-positive probability `p10`.
    Spc { p10: f64 },
    /// EMCCD gray value compared with `threshold`: `c_i = [x_i ≥ threshold]`.
    EmccdThresholded {
        noise: EmccdNoiseParams,
        threshold: f64,
    },
    /// Raw EMCCD gray values.
    EmccdLinear { noise: EmccdNoiseParams },
}

impl ReadoutMode {
    pub fn frame_kind(&self) -> FrameKind {
        match self {
            Self::EmccdLinear { .. } => FrameKind::Gray,
            _ => FrameKind::Binary,
        }
    }

    pub fn noise(&self) -> Option<&EmccdNoiseParams> {
        match self {
            Self::Spc { .. } => None,
            Self::EmccdThresholded { noise, .. } | Self::EmccdLinear { noise } => Some(noise),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub grid: PixelGrid,
    /// Quantum efficiency `η`.
    pub eta: f64,
    pub mode: ReadoutMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_drift: Option<GainDrift>,
}

impl SensorConfig {
    pub fn spc(grid: PixelGrid, eta: f64, p10: f64) -> Self {
        Self {
            grid,
            eta,
            mode: ReadoutMode::Spc { p10 },
            gain_drift: None,
        }
    }

    pub fn emccd(grid: PixelGrid, eta: f64, noise: EmccdNoiseParams) -> Self {
        Self {
            grid,
            eta,
            mode: ReadoutMode::EmccdLinear { noise },
            gain_drift: None,
        }
    }

    pub fn thresholded(grid: PixelGrid, eta: f64, noise: EmccdNoiseParams, threshold: f64) -> Self {
        Self {
            grid,
            eta,
            mode: ReadoutMode::EmccdThresholded { noise, threshold },
            gain_drift: None,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SimError::InvalidParameter(format!(
                "eta = {} must lie in [0, 1]",
                self.eta
            )));
        }
        match &self.mode {
            ReadoutMode::Spc { p10 } => {
                if !(0.0..=1.0).contains(p10) {
                    return Err(SimError::InvalidParameter(format!(
                        "p10 = {p10} must lie in [0, 1]"
                    )));
                }
                if self.gain_drift.is_some() {
                    return Err(SimError::InvalidParameter(
                        "gain drift applies only to EMCCD readout".into(),
                    ));
                }
            }
            ReadoutMode::EmccdThresholded { noise, threshold } => {
                noise.check()?;
                if !threshold.is_finite() {
                    return Err(SimError::InvalidParameter(format!("threshold = {threshold}")));
                }
            }
            ReadoutMode::EmccdLinear { noise } => noise.check()?,
        }
        if let Some(drift) = &self.gain_drift {
            if !(drift.amplitude >= 0.0 && drift.amplitude < 1.0 && drift.period_frames > 0.0) {
                return Err(SimError::InvalidParameter(format!(
                    "gain drift amplitude {} / period {}",
                    drift.amplitude, drift.period_frames
                )));
            }
        }
        Ok(())
    }

    pub fn frame_kind(&self) -> FrameKind {
        self.mode.frame_kind()
    }
}

/// Draws the number of pairs per frame.
#[derive(Debug, Clone)]
pub enum PairCountSampler {
    Zero,
    Poisson(Poisson<f64>),
    /// Cumulative distribution for inverse-transform sampling.
    Table(Vec<f64>),
}

impl PairCountSampler {
    pub fn new(source: &SourceConfig) -> Result<Self, SimError> {
        Self::from_distribution(&PairCountDistribution::from_source(source)?)
    }

    pub fn from_distribution(dist: &PairCountDistribution) -> Result<Self, SimError> {
        match dist {
            PairCountDistribution::Poisson { mean } if *mean == 0.0 => Ok(Self::Zero),
            PairCountDistribution::Poisson { mean } => Poisson::new(*mean)
                .map(Self::Poisson)
                .map_err(|e| SimError::InvalidParameter(format!("Poisson mean {mean}: {e}"))),
            PairCountDistribution::Explicit { probabilities } => {
                let mut running = 0.0;
                let cdf = probabilities
                    .iter()
                    .map(|p| {
                        running += p;
                        running
                    })
                    .collect();
                Ok(Self::Table(cdf))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            Self::Zero => 0,
            Self::Poisson(p) => p.sample(rng) as usize,
            Self::Table(cdf) => {
                let total = *cdf.last().expect("non-empty distribution");
                let u = rng.random::<f64>() * total;
                cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
            }
        }
    }
}

/// `m ~ P(m)` for the configured source.
pub fn sample_pair_count<R: Rng + ?Sized>(sampler: &PairCountSampler, rng: &mut R) -> usize {
    sampler.sample(rng)
}

/// Categorical sampler over the `N²` ordered cells of `Γ`.
#[derive(Debug, Clone)]
pub struct PairSampler {
    n: usize,
    alias: WeightedAliasIndex<f64>,
}

impl PairSampler {
    pub fn new(jd: &JointDistribution) -> Result<Self, SimError> {
        let weights: Vec<f64> = jd.matrix().iter().copied().collect();
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| SimError::InvalidParameter(format!("pair distribution: {e}")))?;
        Ok(Self {
            n: jd.n_pixels(),
            alias,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.n
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let cell = self.alias.sample(rng);
        (cell / self.n, cell % self.n)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, m: usize, rng: &mut R, out: &mut Vec<(usize, usize)>) {
        out.clear();
        out.extend((0..m).map(|_| self.sample(rng)));
    }
}

/// `m` independent ordered pixel pairs drawn from `Γ`.
pub fn sample_pair_positions<R: Rng + ?Sized>(
    jd: &JointDistribution,
    m: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, SimError> {
    let sampler = PairSampler::new(jd)?;
    let mut out = Vec::with_capacity(m);
    sampler.sample_into(m, rng, &mut out);
    Ok(out)
}

/// Adds the photoelectrons of `pairs` to `electrons`; each photon survives
/// independently with probability `eta`.
pub fn detect_photoelectrons<R: Rng + ?Sized>(
    pairs: &[(usize, usize)],
    eta: f64,
    rng: &mut R,
    electrons: &mut [u32],
) {
    for &(i, j) in pairs {
        if rng.random::<f64>() < eta {
            electrons[i] += 1;
        }
        if rng.random::<f64>() < eta {
            electrons[j] += 1;
        }
    }
}

/// Binary readout: any electron fires the pixel, an empty pixel fires with
/// probability `p10`.
pub fn spc_readout<R: Rng + ?Sized>(electrons: &[u32], p10: f64, rng: &mut R) -> Frame {
    let mut frame = Frame::empty(FrameKind::Binary, electrons.len());
    spc_readout_into(electrons, p10, rng, &mut frame.values);
    frame
}

fn spc_readout_into<R: Rng + ?Sized>(electrons: &[u32], p10: f64, rng: &mut R, out: &mut [f64]) {
    for (o, &k) in out.iter_mut().zip(electrons) {
        // One draw per pixel regardless of k keeps the stream layout fixed.
        let noise = rng.random::<f64>() < p10;
        *o = if k > 0 || noise { 1.0 } else { 0.0 };
    }
}

/// Gray-value readout of every pixel.
pub fn emccd_readout<R: Rng + ?Sized>(
    electrons: &[u32],
    sampler: &EmccdSampler,
    gain_scale: f64,
    rng: &mut R,
) -> Frame {
    Frame::gray(
        electrons
            .iter()
            .map(|&k| sampler.sample(k as usize, gain_scale, rng))
            .collect(),
    )
}

/// Reusable per-thread buffers for [`FrameSimulator::frame_into`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    pairs: Vec<(usize, usize)>,
    electrons: Vec<u32>,
}

/// Deterministic frame generator for one experiment.
#[derive(Debug, Clone)]
pub struct FrameSimulator {
    pairs: PairSampler,
    counts: PairCountSampler,
    sensor: SensorConfig,
    emccd: Option<EmccdSampler>,
    seed: u64,
}

impl FrameSimulator {
    pub fn new(
        jd: &JointDistribution,
        source: &SourceConfig,
        sensor: &SensorConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        sensor.check()?;
        if sensor.grid.n_pixels != jd.n_pixels() {
            return Err(SimError::ShapeMismatch {
                expected: sensor.grid.n_pixels,
                found: jd.n_pixels(),
            });
        }
        let emccd = sensor.mode.noise().map(|n| EmccdSampler::new(*n)).transpose()?;
        Ok(Self {
            pairs: PairSampler::new(jd)?,
            counts: PairCountSampler::new(source)?,
            sensor: sensor.clone(),
            emccd,
            seed,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.pairs.n_pixels()
    }

    pub fn kind(&self) -> FrameKind {
        self.sensor.frame_kind()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The random stream owned by frame `index`.
    pub fn frame_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    pub fn frame(&self, index: u64) -> Frame {
        let mut scratch = Scratch::default();
        let mut frame = Frame::empty(self.kind(), self.n_pixels());
        self.frame_into(index, &mut scratch, &mut frame);
        frame
    }

    /// Regenerates frame `index` into `out`, reusing `scratch`.
    pub fn frame_into(&self, index: u64, scratch: &mut Scratch, out: &mut Frame) {
        let n = self.n_pixels();
        let mut rng = self.frame_rng(index);
        let m = self.counts.sample(&mut rng);
        self.pairs.sample_into(m, &mut rng, &mut scratch.pairs);
        scratch.electrons.clear();
        scratch.electrons.resize(n, 0);
        detect_photoelectrons(&scratch.pairs, self.sensor.eta, &mut rng, &mut scratch.electrons);

        out.kind = self.kind();
        out.values.resize(n, 0.0);
        let gain_scale = self.sensor.gain_drift.map_or(1.0, |d| d.scale(index));
        match (&self.sensor.mode, &self.emccd) {
            (ReadoutMode::Spc { p10 }, _) => {
                spc_readout_into(&scratch.electrons, *p10, &mut rng, &mut out.values)
            }
            (ReadoutMode::EmccdLinear { .. }, Some(sampler)) => {
                for (o, &k) in out.values.iter_mut().zip(&scratch.electrons) {
                    *o = sampler.sample(k as usize, gain_scale, &mut rng);
                }
            }
            (ReadoutMode::EmccdThresholded { threshold, .. }, Some(sampler)) => {
                for (o, &k) in out.values.iter_mut().zip(&scratch.electrons) {
                    let x = sampler.sample(k as usize, gain_scale, &mut rng);
                    *o = if x >= *threshold { 1.0 } else { 0.0 };
                }
            }
            _ => unreachable!("EMCCD modes always carry a sampler"),
        }
    }

    /// Frames `start..end` in order.
    pub fn frames(&self, start: u64, end: u64) -> impl Iterator<Item = Frame> + '_ {
        (start..end).map(move |l| self.frame(l))
    }
}

/// The first `n_frames` frames of the experiment identified by `seed`.
pub fn simulate_frames(
    jd: &JointDistribution,
    source: &SourceConfig,
    sensor: &SensorConfig,
    n_frames: u64,
    seed: u64,
) -> Result<impl Iterator<Item = Frame>, SimError> {
    let sim = FrameSimulator::new(jd, source, sensor, seed)?;
    Ok((0..n_frames).map(move |l| sim.frame(l)))
}
