//! Quick desk checks of the installed build.

use ndarray::Array2;
use paircam::accumulate::Layout;
use paircam::model::{build_double_gaussian, DoubleGaussianParams, JointDistribution, PixelGrid, SourceConfig};
use paircam::oracle::{emccd_moments, p_photons_given_pairs, spc_moments, PixelPair, SinglePixel};
use paircam::pipeline::{accumulate_simulated, reconstruct_accumulated, Inversion, KnownParameters, ReconstructOptions};
use paircam::reconstruct::{reconstruct_emccd, reconstruct_spc, EmccdScale, SpcScale};
use paircam::sim::{EmccdNoiseParams, FrameSimulator, SensorConfig};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

const ETA: f64 = 0.44;
const MEAN_PAIRS: f64 = 2.0;
const P10: f64 = 0.015;

fn source(n: usize) -> Result<JointDistribution, CliError> {
    let grid = PixelGrid::centered(n, 13.0).map_err(|e| CliError::Data(e.to_string()))?;
    build_double_gaussian(&grid, &DoubleGaussianParams::new(15.0, 40.0)).map_err(|e| CliError::Data(e.to_string()))
}

fn worst_off_diagonal(raw: &Array2<f64>, truth: &JointDistribution) -> f64 {
    let peak = truth.matrix().iter().copied().fold(0.0, f64::max);
    raw.indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|((i, j), v)| (v - truth.get(i, j)).abs() / peak)
        .fold(0.0, f64::max)
}

fn spot_values() -> Result<Check, CliError> {
    let p = p_photons_given_pairs(SinglePixel::new(0.25, 0.1), 1, 1)?;
    let dark = spc_moments(PixelPair::new(0.0, 0.0, 0.0, 0.0, 0.0), ETA, MEAN_PAIRS, P10)?;
    let noise = EmccdNoiseParams::reference();
    let response = noise.linear_response();
    let lin = emccd_moments(PixelPair::new(0.0, 0.2, 0.0, 0.0, 0.0), ETA, MEAN_PAIRS, MEAN_PAIRS, &response)?;
    let pass = (p - 0.3).abs() < 1e-15 && (dark.mean_i - P10).abs() < 1e-15 && lin.mean_i == response.offset;
    Ok(Check {
        name: "oracle spot values",
        pass,
        detail: format!("P(1|1) = {p}, dark ⟨c⟩ = {}, dark ⟨x⟩ − x0 = {}", dark.mean_i, lin.mean_i - response.offset),
    })
}

fn round_trips() -> Result<Check, CliError> {
    let jd = source(8)?;
    let n = jd.n_pixels();
    let pair = |i, j| PixelPair::from_distribution(&jd, i, j);

    let spc = |i, j| spc_moments(pair(i, j), ETA, MEAN_PAIRS, P10);
    let mut mean = vec![0.0; n];
    let mut corr = Array2::zeros((n, n));
    for i in 0..n {
        mean[i] = spc(i, i)?.mean_i;
        for j in 0..n {
            corr[[i, j]] = if i == j { mean[i] } else { spc(i, j)?.mean_ij };
        }
    }
    let raw = reconstruct_spc(&mean, &corr, Some(SpcScale { eta: ETA, mean_pairs: MEAN_PAIRS }))?;
    let spc_error = worst_off_diagonal(&raw.matrix(), &jd);

    let response = EmccdNoiseParams::reference().linear_response();
    let lin = |i, j| emccd_moments(pair(i, j), ETA, MEAN_PAIRS, MEAN_PAIRS, &response);
    for i in 0..n {
        mean[i] = lin(i, i)?.mean_i;
        for j in 0..n {
            let m = lin(i, j)?;
            corr[[i, j]] = if i == j { m.mean_sq_i } else { m.mean_ij };
        }
    }
    let scale = EmccdScale { gain: response.gain, eta: ETA, mean_pairs: MEAN_PAIRS };
    let raw = reconstruct_emccd(&mean, &corr, Some(scale))?;
    let emccd_error = worst_off_diagonal(&raw.matrix(), &jd);
    Ok(Check {
        name: "inversion round trips",
        pass: spc_error < 1e-10 && emccd_error < 1e-10,
        detail: format!("relative error SPC {spc_error:.2e}, EMCCD {emccd_error:.2e} (tol 1e-10)"),
    })
}

fn determinism() -> Result<Check, CliError> {
    let jd = source(8)?;
    let sensor = SensorConfig::emccd(*jd.grid(), ETA, EmccdNoiseParams::reference());
    let src = SourceConfig::poisson(MEAN_PAIRS);
    let a = FrameSimulator::new(&jd, &src, &sensor, 7)?;
    let b = FrameSimulator::new(&jd, &src, &sensor, 7)?;
    let pass = a.frames(0, 500).eq(b.frames(0, 500));
    Ok(Check {
        name: "seeded determinism",
        pass,
        detail: "two simulators with one seed give identical frames".into(),
    })
}

fn small_end_to_end() -> Result<Check, CliError> {
    let jd = source(8)?;
    let n = jd.n_pixels();
    let sensor = SensorConfig::spc(*jd.grid(), ETA, P10);
    let src = SourceConfig::poisson(MEAN_PAIRS);
    let sim = FrameSimulator::new(&jd, &src, &sensor, 11)?;
    let acc = accumulate_simulated(&sim, 200_000, Layout::Full { n })?;
    let mut options = ReconstructOptions::new(Inversion::Spc);
    options.parameters = KnownParameters::from_config(&src, &sensor);
    let result = reconstruct_accumulated(&acc, sim.kind(), &options)?;
    let tv = result.total_variation_to(jd.matrix())?;
    Ok(Check {
        name: "small SPC simulation",
        pass: tv < 0.05,
        detail: format!("8 pixels, 200000 frames: TV to truth {tv:.4} (tol 0.05)"),
    })
}

pub fn run() -> Result<Vec<Check>, CliError> {
    Ok(vec![spot_values()?, round_trips()?, determinism()?, small_end_to_end()?])
}
