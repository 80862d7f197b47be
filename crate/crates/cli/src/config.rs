//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use paircam::io::load_joint_distribution;
use paircam::model::{
    build_double_gaussian, DoubleGaussianParams, JointDistribution, PixelGrid, SourceConfig,
};
use paircam::pipeline::{embed_two_lines, Inversion, KnownParameters, ReconstructOptions};
use paircam::reconstruct::ProductEstimator;
use paircam::sim::{EmccdNoiseParams, GainDrift, ReadoutMode, SensorConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Largest grid the CLI accepts.
pub const MAX_PIXELS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_pixels: usize,
    pub pitch_um: f64,
    /// Center of pixel 0; the grid is centered on zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_um: Option<f64>,
}

impl GridSpec {
    pub fn grid(&self) -> Result<PixelGrid, CliError> {
        let grid = match self.origin_um {
            Some(origin) => PixelGrid::new(self.n_pixels, self.pitch_um, origin),
            None => PixelGrid::centered(self.n_pixels, self.pitch_um),
        }
        .map_err(|e| CliError::field("grid", e))?;
        grid.check(MAX_PIXELS).map_err(|e| CliError::field("grid", e))?;
        Ok(grid)
    }
}

/// Ground truth `Γ`: a double Gaussian on the grid or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    DoubleGaussian(DoubleGaussianParams),
    Csv(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePreset {
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Preset(NoisePreset),
    Explicit(EmccdNoiseParams),
}

impl NoiseSpec {
    pub fn params(&self) -> EmccdNoiseParams {
        match self {
            NoiseSpec::Preset(NoisePreset::Reference) => EmccdNoiseParams::reference(),
            NoiseSpec::Explicit(p) => *p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeSpec {
    Spc { p10: f64 },
    EmccdThresholded { noise: NoiseSpec, threshold: f64 },
    EmccdLinear { noise: NoiseSpec },
}

impl ModeSpec {
    fn readout(&self) -> ReadoutMode {
        match *self {
            ModeSpec::Spc { p10 } => ReadoutMode::Spc { p10 },
            ModeSpec::EmccdThresholded { noise, threshold } => ReadoutMode::EmccdThresholded {
                noise: noise.params(),
                threshold,
            },
            ModeSpec::EmccdLinear { noise } => ReadoutMode::EmccdLinear {
                noise: noise.params(),
            },
        }
    }

    fn default_inversion(&self) -> Inversion {
        match self {
            ModeSpec::EmccdLinear { .. } => Inversion::Emccd,
            _ => Inversion::Spc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub eta: f64,
    pub mode: ModeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_drift: Option<GainDrift>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSpec {
    /// Defaults to the inversion matching the readout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<Inversion>,
    #[serde(default)]
    pub estimator: ProductEstimator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_width: Option<usize>,
    #[serde(default)]
    pub diagonal: bool,
    /// Report only the normalized `Γ̂`, ignoring the configured scale.
    #[serde(default)]
    pub normalized_only: bool,
    /// Columns whose conditional profiles are written; defaults to the middle one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profile_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub distribution: DistributionSpec,
    pub source: SourceConfig,
    pub sensor: SensorSpec,
    pub n_frames: u64,
    pub seed: u64,
    #[serde(default)]
    pub reconstruction: ReconstructionSpec,
    /// Photons of a pair go to two separate lines of `n_pixels` each.
    #[serde(default)]
    pub two_lines: bool,
    /// Also write the frames as CSV.
    #[serde(default)]
    pub frames_csv: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// A configuration together with the directory relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config = parse(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedConfig { config, base_dir };
    loaded.validate()?;
    Ok(loaded)
}

fn in_unit_interval(path: &str, v: f64, allow_zero: bool) -> Result<(), CliError> {
    let ok = v <= 1.0 && if allow_zero { v >= 0.0 } else { v > 0.0 };
    if ok {
        Ok(())
    } else {
        let lower = if allow_zero { "[0" } else { "(0" };
        Err(CliError::field(path, format!("{v} is outside {lower}, 1]")))
    }
}

impl LoadedConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Field-level checks; core validation runs afterwards on the built objects.
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let grid = c.grid.grid()?;
        match &c.distribution {
            DistributionSpec::DoubleGaussian(p) => {
                p.check().map_err(|e| CliError::field("distribution.double_gaussian", e))?
            }
            DistributionSpec::Csv(p) => {
                let p = self.resolve(p);
                if !p.exists() {
                    return Err(CliError::field("distribution.csv", format!("{} does not exist", p.display())));
                }
            }
        }
        c.source.check().map_err(|e| CliError::field("source", e))?;
        in_unit_interval("sensor.eta", c.sensor.eta, false)?;
        if let ModeSpec::Spc { p10 } = c.sensor.mode {
            in_unit_interval("sensor.mode.p10", p10, true)?;
        }
        if c.n_frames == 0 {
            return Err(CliError::field("n_frames", "must be at least 1"));
        }
        let r = &c.reconstruction;
        if let Some(w) = r.filter_width {
            if w == 0 || w >= grid.n_pixels {
                return Err(CliError::field(
                    "reconstruction.filter_width",
                    format!("{w} must lie in [1, {})", grid.n_pixels),
                ));
            }
        }
        if let Some(&col) = r.profile_columns.iter().find(|&&col| col >= grid.n_pixels) {
            return Err(CliError::field("reconstruction.profile_columns", format!("column {col} is off the grid")));
        }
        if r.diagonal && (c.two_lines || !matches!(c.sensor.mode, ModeSpec::EmccdLinear { .. })) {
            return Err(CliError::field(
                "reconstruction.diagonal",
                "needs single-line linear EMCCD readout",
            ));
        }
        self.sensor_config(&grid)?
            .check()
            .map_err(|e| CliError::field("sensor", e))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<PixelGrid, CliError> {
        self.config.grid.grid()
    }

    /// Sensor over the simulated line: twice the grid in two-line mode.
    pub fn sensor_config(&self, grid: &PixelGrid) -> Result<SensorConfig, CliError> {
        let c = &self.config;
        let grid = if c.two_lines {
            PixelGrid::new(2 * grid.n_pixels, grid.pitch_um, grid.origin_um)
                .map_err(|e| CliError::field("grid", e))?
        } else {
            *grid
        };
        Ok(SensorConfig {
            grid,
            eta: c.sensor.eta,
            mode: c.sensor.mode.readout(),
            gain_drift: c.sensor.gain_drift,
        })
    }

    pub fn ground_truth(&self) -> Result<JointDistribution, CliError> {
        let grid = self.grid()?;
        match &self.config.distribution {
            DistributionSpec::DoubleGaussian(p) => {
                build_double_gaussian(&grid, p).map_err(|e| CliError::field("distribution.double_gaussian", e))
            }
            DistributionSpec::Csv(p) => load_joint_distribution(&self.resolve(p), Some(&grid))
                .map_err(|e| CliError::field("distribution.csv", e)),
        }
    }

    /// The distribution the simulator samples from.
    pub fn simulated_distribution(&self, truth: &JointDistribution) -> Result<JointDistribution, CliError> {
        if self.config.two_lines {
            embed_two_lines(truth).map_err(|e| CliError::Data(e.to_string()))
        } else {
            Ok(truth.clone())
        }
    }

    pub fn reconstruct_options(&self) -> Result<ReconstructOptions, CliError> {
        let c = &self.config;
        let r = &c.reconstruction;
        let mut options = ReconstructOptions::new(r.inversion.unwrap_or(c.sensor.mode.default_inversion()));
        options.estimator = r.estimator;
        options.filter_width = r.filter_width;
        options.diagonal = r.diagonal;
        if !r.normalized_only {
            options.parameters = KnownParameters::from_config(&c.source, &self.sensor_config(&self.grid()?)?);
        }
        Ok(options)
    }
}
