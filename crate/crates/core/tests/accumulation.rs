//! Accumulator behaviour on simulated frame streams.

mod common;

use paircam::accumulate::{Layout, MomentAccumulator};
use paircam::model::{JointDistribution, SourceConfig};
use paircam::oracle::{spc_moments, PixelPair};
use paircam::pipeline::{accumulate_simulated, accumulate_simulated_sequential, embed_two_lines};
use paircam::sim::{EmccdNoiseParams, FrameSimulator, SensorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn push_all(sim: &FrameSimulator, start: u64, end: u64, layout: Layout) -> MomentAccumulator {
    let mut acc = MomentAccumulator::with_layout(layout);
    for f in sim.frames(start, end) {
        acc.push(&f).unwrap();
    }
    acc
}

#[test]
fn split_binary_stream_merges_exactly() {
    let (grid, jd, source) = reference_source();
    let sim = FrameSimulator::new(&jd, &source, &SensorConfig::spc(grid, 0.44, 0.015), 21).unwrap();
    let layout = full(REFERENCE_PIXELS);
    let whole = push_all(&sim, 0, 100, layout);
    let merged = push_all(&sim, 0, 50, layout).merge(&push_all(&sim, 50, 100, layout)).unwrap();
    assert_eq!(whole, merged);
    assert_eq!(merged.n_frames(), 100);
}

#[test]
fn split_gray_stream_merges_to_rounding() {
    let (grid, jd, source) = reference_source();
    let sensor = SensorConfig::emccd(grid, 0.44, EmccdNoiseParams::reference());
    let sim = FrameSimulator::new(&jd, &source, &sensor, 22).unwrap();
    let layout = full(REFERENCE_PIXELS);
    let whole = push_all(&sim, 0, 100, layout);
    let merged = push_all(&sim, 0, 50, layout).merge(&push_all(&sim, 50, 100, layout)).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    assert!(whole.sum_x().iter().zip(merged.sum_x()).all(|(&a, &b)| close(a, b)));
    assert!(whole.sum_xx().iter().zip(merged.sum_xx().iter()).all(|(&a, &b)| close(a, b)));
    assert!(whole
        .sum_x_next()
        .iter()
        .zip(merged.sum_x_next().iter())
        .all(|(&a, &b)| close(a, b)));
    assert_eq!(whole.first_frame(), merged.first_frame());
    assert_eq!(whole.last_frame(), merged.last_frame());
}

#[test]
fn sharded_and_sequential_runs_are_bit_identical() {
    let (grid, jd, source) = reference_source();
    let sensor = SensorConfig::emccd(grid, 0.44, EmccdNoiseParams::reference());
    let sim = FrameSimulator::new(&jd, &source, &sensor, 23).unwrap();
    // Spans several shards with a partial last one.
    let frames = 40_000;
    let layout = full(REFERENCE_PIXELS);
    assert_eq!(
        accumulate_simulated(&sim, frames, layout).unwrap(),
        accumulate_simulated_sequential(&sim, frames, layout).unwrap()
    );
}

#[test]
fn successive_product_estimates_product_of_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let jd = random_distribution(8, 10.0, &mut rng);
    let (eta, p10) = (0.5, 0.02);
    let source = SourceConfig::poisson(1.5);
    let sim = FrameSimulator::new(&jd, &source, &SensorConfig::spc(*jd.grid(), eta, p10), 25).unwrap();
    let frames = 100_000u64;
    let acc = accumulate_simulated(&sim, frames, full(8)).unwrap();
    let successive = acc.mean_corr_successive().unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let m = spc_moments(PixelPair::from_distribution(&jd, i, j), eta, source.mean_pairs, p10)
                .unwrap();
            let target = m.mean_i * m.mean_j;
            // Consecutive products share a frame: allow for lag-one
            // correlation with a factor-three variance bound.
            let se = (3.0 * target * (1.0 - target) / (frames - 1) as f64).sqrt();
            let z = (successive[[i, j]] - target) / se;
            assert!(z.abs() < 5.0, "({i}, {j}): {} vs {target} ({z:.2})", successive[[i, j]]);
        }
    }
}

#[test]
fn covariance_ridge_follows_the_source() {
    let (grid, jd, source) = reference_source();
    let sim = FrameSimulator::new(&jd, &source, &SensorConfig::spc(grid, 0.44, 0.015), 26).unwrap();
    let n = REFERENCE_PIXELS;
    let acc = accumulate_simulated(&sim, 200_000, full(n)).unwrap();
    let corr = acc.mean_corr().unwrap();
    let successive = acc.mean_corr_successive().unwrap();
    let covariance = &corr - &successive;
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| covariance[[i, j]]).collect();
        let peak = (0..n)
            .filter(|&j| j != i)
            .max_by(|&a, &b| covariance[[i, a]].total_cmp(&covariance[[i, b]]))
            .unwrap();
        let ridge = n - 1 - i;
        assert!(peak.abs_diff(ridge) <= 2, "row {i}: peak at {peak}, ridge at {ridge}");
        assert!(covariance[[i, peak]] > 0.0);
        let mean_off: f64 = row.iter().sum::<f64>() / row.len() as f64;
        assert!(covariance[[i, peak]] > 10.0 * mean_off.abs());
    }
}

#[test]
fn cross_layout_keeps_only_the_cross_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let jd = random_distribution(5, 10.0, &mut rng);
    let two = embed_two_lines(&jd).unwrap();
    let sensor = SensorConfig::spc(*two.grid(), 0.6, 0.01);
    let sim = FrameSimulator::new(&two, &SourceConfig::poisson(1.0), &sensor, 28).unwrap();
    let cross = accumulate_simulated(&sim, 5_000, Layout::Cross { n_a: 5, n_b: 5 }).unwrap();
    let full_acc = accumulate_simulated(&sim, 5_000, full(10)).unwrap();
    let block = full_acc.sum_xx();
    let cross_sums = cross.sum_xx();
    assert_eq!(cross_sums.dim(), (5, 5));
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(cross_sums[[i, j]], block[[i, 5 + j]]);
        }
    }
    let (a, b) = cross.mean_lines().unwrap();
    let all = full_acc.mean_direct().unwrap();
    assert_eq!(a, all[..5].to_vec());
    assert_eq!(b, all[5..].to_vec());
}

#[test]
fn two_line_embedding_preserves_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let jd: JointDistribution = random_distribution(6, 10.0, &mut rng);
    let two = embed_two_lines(&jd).unwrap();
    assert_eq!(two.n_pixels(), 12);
    assert!((two.matrix().sum() - 1.0).abs() < 1e-12);
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(two.get(i, 6 + j), jd.get(i, j) / 2.0);
            assert_eq!(two.get(i, j), 0.0);
        }
    }
}
