//! Helpers shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use paircam::accumulate::Layout;
use paircam::io::{HashingWriter, StackWriter};
use paircam::model::{
    build_double_gaussian, total_variation, DoubleGaussianParams, JointDistribution, PixelGrid,
    SourceConfig,
};
use paircam::reconstruct::ReconstructionResult;
use paircam::sim::{Frame, FrameSimulator, Scratch};
use rand::Rng;

pub const REFERENCE_PIXELS: usize = 64;
pub const REFERENCE_PITCH_UM: f64 = 13.0;
pub const REFERENCE_SIGMA_PLUS_UM: f64 = 12.06;
pub const REFERENCE_SIGMA_MINUS_UM: f64 = 926.12;
pub const REFERENCE_ETA: f64 = 0.44;
pub const REFERENCE_P10: f64 = 0.015;
pub const REFERENCE_MEAN_PAIRS: f64 = 2.0;

/// The 64-pixel double-Gaussian source used by the end-to-end tests.
pub fn reference_source() -> (PixelGrid, JointDistribution, SourceConfig) {
    let grid = PixelGrid::centered(REFERENCE_PIXELS, REFERENCE_PITCH_UM).unwrap();
    let jd = build_double_gaussian(
        &grid,
        &DoubleGaussianParams::new(REFERENCE_SIGMA_PLUS_UM, REFERENCE_SIGMA_MINUS_UM),
    )
    .unwrap();
    (grid, jd, SourceConfig::poisson(REFERENCE_MEAN_PAIRS))
}

/// A random symmetric, non-negative, unit-sum `n × n` matrix. Some entries
/// are zeroed so that sparse distributions are covered as well.
pub fn random_gamma<R: Rng>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = if rng.random::<f64>() < 0.15 { 0.0 } else { rng.random::<f64>() };
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    if g.sum() == 0.0 {
        g[[0, n - 1]] = 1.0;
        g[[n - 1, 0]] = 1.0;
    }
    let total = g.sum();
    g / total
}

pub fn random_distribution<R: Rng>(n: usize, pitch: f64, rng: &mut R) -> JointDistribution {
    let grid = PixelGrid::centered(n, pitch).unwrap();
    JointDistribution::new(grid, random_gamma(n, rng)).unwrap()
}

/// Exact electron-count distributions obtained by visiting every outcome of
/// `m` pairs: both ordered landing cells and the survival of each photon.
pub struct Enumerated {
    pub n: usize,
    pub m: usize,
    /// `single[i][k] = P(k_i = k | m)`.
    pub single: Vec<Vec<f64>>,
    /// `joint[i * n + j][a * (2m + 1) + b] = P(k_i = a, k_j = b | m)`.
    pub joint: Vec<Vec<f64>>,
}

impl Enumerated {
    pub fn joint(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        self.joint[i * self.n + j][a * (2 * self.m + 1) + b]
    }
}

pub fn enumerate_counts(gamma: &Array2<f64>, eta: f64, m: usize) -> Enumerated {
    let n = gamma.nrows();
    let width = 2 * m + 1;
    let mut out = Enumerated {
        n,
        m,
        single: vec![vec![0.0; width]; n],
        joint: vec![vec![0.0; width * width]; n * n],
    };
    let mut branches = Vec::new();
    for a in 0..n {
        for b in 0..n {
            for (sa, pa) in [(0, 1.0 - eta), (1, eta)] {
                for (sb, pb) in [(0, 1.0 - eta), (1, eta)] {
                    let w = gamma[[a, b]] * pa * pb;
                    if w > 0.0 {
                        branches.push((a, b, sa, sb, w));
                    }
                }
            }
        }
    }
    let mut counts = vec![0usize; n];
    visit(&branches, m, 1.0, &mut counts, &mut out);
    out
}

fn visit(
    branches: &[(usize, usize, usize, usize, f64)],
    remaining: usize,
    prob: f64,
    counts: &mut [usize],
    out: &mut Enumerated,
) {
    if remaining == 0 {
        let n = out.n;
        let width = 2 * out.m + 1;
        for i in 0..n {
            out.single[i][counts[i]] += prob;
            for j in 0..n {
                if i != j {
                    out.joint[i * n + j][counts[i] * width + counts[j]] += prob;
                }
            }
        }
        return;
    }
    for &(a, b, sa, sb, w) in branches {
        counts[a] += sa;
        counts[b] += sb;
        visit(branches, remaining - 1, prob * w, counts, out);
        counts[a] -= sa;
        counts[b] -= sb;
    }
}

/// Total-variation distance to the truth restricted to the entries the
/// reconstruction measured; both sides are renormalized on that set.
pub fn tv_to_truth(result: &ReconstructionResult, truth: &JointDistribution) -> f64 {
    let (rows, cols) = (result.rows, result.cols);
    let masked = Array2::from_shape_fn((rows, cols), |(i, j)| {
        if result.is_measured(i, j) {
            truth.get(i, j)
        } else {
            0.0
        }
    });
    total_variation(&result.matrix(), &masked)
}

/// SHA-256 of the serialized stack of frames `0..n_frames`.
pub fn stack_hash(sim: &FrameSimulator, n_frames: u64) -> String {
    let mut writer =
        StackWriter::new(HashingWriter::new(), sim.kind(), sim.n_pixels(), n_frames).unwrap();
    let mut scratch = Scratch::default();
    let mut frame = Frame::empty(sim.kind(), sim.n_pixels());
    for l in 0..n_frames {
        sim.frame_into(l, &mut scratch, &mut frame);
        writer.write_frame(&frame).unwrap();
    }
    writer.finish().unwrap().finish_hex()
}

pub fn full(n: usize) -> Layout {
    Layout::Full { n }
}

pub fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "{} criterion {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}
