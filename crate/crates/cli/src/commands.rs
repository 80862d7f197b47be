//! The simulate, reconstruct and fit subcommands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use paircam::accumulate::{Layout, MomentAccumulator};
use paircam::io::{
    create_stack, load_joint_distribution, matrix_from_csv, open_stack, save_joint_distribution,
    sha256_hex, write_frames_csv, write_matrix_csv, HashingWriter,
};
use paircam::model::{build_double_gaussian, PixelGrid};
use paircam::pipeline::{reconstruct_accumulated, SHARD_FRAMES};
use paircam::reconstruct::{
    conditional_profile, fit_double_gaussian_matrix, BackgroundReport, FitResult,
    ReconstructionResult,
};
use paircam::sim::{Frame, FrameSimulator, ReadoutMode, Scratch, SensorConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, LoadedConfig};
use crate::error::CliError;

pub const FRAMES_FILE: &str = "frames.ppfr";
pub const FRAMES_CSV_FILE: &str = "frames.csv";
pub const TRUTH_FILE: &str = "ground_truth.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GAMMA_FILE: &str = "gamma_hat.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const FIT_FILE: &str = "fit.json";

/// Frames written per batch; bounds memory in both build flavours.
const WRITE_BATCH_SHARDS: u64 = 8;

fn progress(message: impl AsRef<str>) {
    eprintln!("paircam: {}", message.as_ref());
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut hasher = HashingWriter::new();
    std::io::copy(&mut reader, &mut hasher)?;
    Ok(hasher.finish_hex())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &ExperimentConfig) -> Result<String, CliError> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

fn frames_range(sim: &FrameSimulator, start: u64, end: u64) -> Vec<Frame> {
    let mut scratch = Scratch::default();
    (start..end)
        .map(|l| {
            let mut frame = Frame::empty(sim.kind(), sim.n_pixels());
            sim.frame_into(l, &mut scratch, &mut frame);
            frame
        })
        .collect()
}

/// Frames `start..end` cut into shard-sized pieces, generated in parallel
/// when available. Frames depend only on their index, so the result is the
/// same either way.
fn frames_batch(sim: &FrameSimulator, start: u64, end: u64) -> Vec<Vec<Frame>> {
    let pieces: Vec<(u64, u64)> = (start..end)
        .step_by(SHARD_FRAMES as usize)
        .map(|a| (a, (a + SHARD_FRAMES).min(end)))
        .collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pieces.par_iter().map(|&(a, b)| frames_range(sim, a, b)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pieces.iter().map(|&(a, b)| frames_range(sim, a, b)).collect()
    }
}

fn effective_parameters(sensor: &SensorConfig, config: &ExperimentConfig) -> Result<Value, CliError> {
    let mut v = json!({
        "n_pixels_simulated": sensor.grid.n_pixels,
        "frame_kind": sensor.mode.frame_kind(),
        "eta": sensor.eta,
        "mean_pairs": config.source.mean_pairs,
        "pair_variance": config.source.variance(),
    });
    let extra = match &sensor.mode {
        ReadoutMode::Spc { p10 } => json!({ "p10": p10 }),
        ReadoutMode::EmccdLinear { noise } => json!({
            "conversion_gain": noise.conversion_gain(),
            "offset": noise.offset(),
            "background_variance": noise.background_variance(),
        }),
        ReadoutMode::EmccdThresholded { noise, threshold } => json!({
            "conversion_gain": noise.conversion_gain(),
            "offset": noise.offset(),
            "background_variance": noise.background_variance(),
            "threshold": threshold,
            "false_positive_probability": noise.exceedance_probability(0, *threshold)?,
            "one_electron_detection_probability": noise.exceedance_probability(1, *threshold)?,
        }),
    };
    if let (Value::Object(a), Value::Object(b)) = (&mut v, extra) {
        a.extend(b);
    }
    Ok(v)
}

/// Writes the frame stack, ground truth, effective config and manifest to `out`.
pub fn simulate(cfg: &LoadedConfig, out: &Path) -> Result<Value, CliError> {
    let config = &cfg.config;
    create_dir(out)?;
    let grid = cfg.grid()?;
    let truth = cfg.ground_truth()?;
    let simulated = cfg.simulated_distribution(&truth)?;
    let sensor = cfg.sensor_config(&grid)?;
    let sim = FrameSimulator::new(&simulated, &config.source, &sensor, config.seed)?;

    let truth_path = out.join(TRUTH_FILE);
    let truth_sidecar = save_joint_distribution(&truth_path, &truth)?;

    let frames_path = out.join(FRAMES_FILE);
    let mut csv = if config.frames_csv {
        Some(BufWriter::new(File::create(out.join(FRAMES_CSV_FILE))?))
    } else {
        None
    };
    let mut stack = create_stack(&frames_path, sim.kind(), sim.n_pixels(), config.n_frames)?;
    let batch = WRITE_BATCH_SHARDS * SHARD_FRAMES;
    let mut start = 0;
    while start < config.n_frames {
        let end = (start + batch).min(config.n_frames);
        for piece in frames_batch(&sim, start, end) {
            for frame in &piece {
                stack.write_frame(frame)?;
            }
            if let Some(w) = csv.as_mut() {
                write_frames_csv(&mut *w, &piece)?;
            }
        }
        start = end;
        progress(format!("simulated {end}/{} frames", config.n_frames));
    }
    stack.finish()?.flush()?;
    if let Some(mut w) = csv {
        w.flush()?;
    }

    write_json(&out.join(CONFIG_FILE), config)?;
    let mut outputs = json!({
        "frames": { "file": FRAMES_FILE, "sha256": hash_file(&frames_path)? },
        "ground_truth": { "file": TRUTH_FILE, "sha256": truth_sidecar.checksum },
        "config": { "file": CONFIG_FILE },
    });
    if config.frames_csv {
        outputs["frames_csv"] = json!({ "file": FRAMES_CSV_FILE, "sha256": hash_file(&out.join(FRAMES_CSV_FILE))? });
    }
    let manifest = json!({
        "tool": "paircam",
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_hash(config)?,
        "seed": config.seed,
        "n_frames": config.n_frames,
        "effective_parameters": effective_parameters(&sensor, config)?,
        "outputs": outputs,
    });
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Sidecar written next to a reconstructed `Γ̂` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSidecar {
    pub n_pixels: usize,
    pub pitch_um: f64,
    pub origin_um: f64,
    pub checksum: String,
    /// Whether same-pixel entries carry reconstructed values.
    pub diagonal_measured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub amplitude: f64,
    pub sigma_plus_um: f64,
    pub sigma_minus_um: f64,
    pub rms_residual: f64,
    pub iterations: usize,
}

impl From<FitResult> for FitSummary {
    fn from(f: FitResult) -> Self {
        Self {
            amplitude: f.amplitude,
            sigma_plus_um: f.sigma_plus_um,
            sigma_minus_um: f.sigma_minus_um,
            rms_residual: f.rms_residual,
            iterations: f.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub frame_kind: String,
    pub n_frames: u64,
    pub scale_note: String,
    pub non_poisson_correction: bool,
    pub diagonal_valid: bool,
    pub normalization: f64,
    pub clamped_mass: f64,
    pub dropped_entries: usize,
    pub nonpositive_log_entries: usize,
    pub background_report: Option<BackgroundReport>,
    pub fit: Option<FitSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_to_truth: Option<f64>,
    pub profile_columns: Vec<usize>,
    pub gamma_sha256: String,
}

fn reconstruction_mask(result: &ReconstructionResult) -> Vec<bool> {
    (0..result.rows * result.cols)
        .map(|k| result.is_measured(k / result.cols, k % result.cols))
        .collect()
}

fn fit_masked(data: &[f64], mask: &[bool], grid: &PixelGrid) -> Result<FitResult, CliError> {
    Ok(fit_double_gaussian_matrix(data, mask, grid, None)?)
}

fn write_profiles(
    path: &Path,
    result: &ReconstructionResult,
    grid: &PixelGrid,
    columns: &[usize],
    fit: Option<&FitResult>,
) -> Result<(), CliError> {
    let model = match fit {
        Some(f) => Some(build_double_gaussian(grid, &f.params()).map_err(|e| CliError::Data(e.to_string()))?),
        None => None,
    };
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["pixel".to_string(), "x_um".to_string()];
    for c in columns {
        header.push(format!("given_{c}"));
        if model.is_some() {
            header.push(format!("fit_given_{c}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    let measured: Vec<Vec<f64>> = columns.iter().map(|&c| conditional_profile(result, c)).collect();
    let fitted: Vec<Vec<f64>> = match &model {
        Some(m) => columns
            .iter()
            .map(|&c| {
                let col: Vec<f64> = (0..result.rows)
                    .map(|i| if result.is_measured(i, c) { m.get(i, c) } else { 0.0 })
                    .collect();
                let total: f64 = col.iter().sum();
                col.into_iter().map(|v| if total > 0.0 { v / total } else { v }).collect()
            })
            .collect(),
        None => Vec::new(),
    };
    for i in 0..result.rows {
        let mut row = vec![i.to_string(), grid.center(i).to_string()];
        for (k, p) in measured.iter().enumerate() {
            row.push(p[i].to_string());
            if let Some(f) = fitted.get(k) {
                row.push(f[i].to_string());
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub struct ReconstructInputs {
    pub stack: PathBuf,
    pub truth: Option<PathBuf>,
}

/// Accumulates a stack, inverts it and writes `Γ̂`, profiles and the report.
/// A failed fit is recorded in the report and returned as the error after
/// all files are written.
pub fn reconstruct(cfg: &LoadedConfig, inputs: &ReconstructInputs, out: &Path) -> Result<Report, CliError> {
    create_dir(out)?;
    let grid = cfg.grid()?;
    let n = grid.n_pixels;
    let layout = if cfg.config.two_lines {
        Layout::Cross { n_a: n, n_b: n }
    } else {
        Layout::Full { n }
    };
    let options = cfg.reconstruct_options()?;

    let mut reader = open_stack(&inputs.stack)?;
    let header = reader.header();
    if header.n_pixels as usize != layout.frame_len() {
        return Err(CliError::Data(format!(
            "stack has {} pixels per frame, the configuration expects {}",
            header.n_pixels,
            layout.frame_len()
        )));
    }
    let mut acc = MomentAccumulator::with_layout(layout);
    while let Some(frame) = reader.read_frame()? {
        acc.push(&frame).map_err(|e| CliError::Data(e.to_string()))?;
        if acc.n_frames() % (1 << 20) == 0 {
            progress(format!("accumulated {} frames", acc.n_frames()));
        }
    }
    progress(format!("accumulated {} frames", acc.n_frames()));
    let result = reconstruct_accumulated(&acc, header.kind, &options)?;

    let gamma_path = out.join(GAMMA_FILE);
    let checksum = write_matrix_csv(&gamma_path, &result.matrix())?;
    write_json(
        &gamma_path.with_extension("json"),
        &ReconstructionSidecar {
            n_pixels: n,
            pitch_um: grid.pitch_um,
            origin_um: grid.origin_um,
            checksum: checksum.clone(),
            diagonal_measured: result.diagonal_valid || !result.raw.same_line,
        },
    )?;

    let fit = fit_masked(&result.gamma, &reconstruction_mask(&result), &grid);
    let columns = if cfg.config.reconstruction.profile_columns.is_empty() {
        vec![n / 2]
    } else {
        cfg.config.reconstruction.profile_columns.clone()
    };
    write_profiles(&out.join(PROFILES_FILE), &result, &grid, &columns, fit.as_ref().ok())?;

    let truth = match &inputs.truth {
        Some(p) => Some(load_joint_distribution(p, Some(&grid))?),
        None => None,
    };
    let tv_to_truth = match &truth {
        Some(t) => Some(result.total_variation_to(t.matrix())?),
        None => None,
    };
    let enum_name = |v: Value| v.as_str().unwrap_or_default().to_string();
    let report = Report {
        mode: enum_name(serde_json::to_value(options.inversion)?),
        frame_kind: enum_name(serde_json::to_value(header.kind)?),
        n_frames: acc.n_frames(),
        scale_note: result.scale_note.clone(),
        non_poisson_correction: result.raw.non_poisson_correction,
        diagonal_valid: result.diagonal_valid,
        normalization: result.normalization,
        clamped_mass: result.clamped_mass,
        dropped_entries: result.dropped_entries,
        nonpositive_log_entries: result.raw.nonpositive_log,
        background_report: result.raw.background.clone(),
        fit: fit.as_ref().ok().map(|f| (*f).into()),
        fit_error: fit.as_ref().err().map(|e| e.to_string()),
        tv_to_truth,
        profile_columns: columns,
        gamma_sha256: checksum,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    fit?;
    Ok(report)
}

/// Fits a reconstructed `Γ̂` CSV; the grid comes from its sidecar.
pub fn fit(input: &Path, out: &Path) -> Result<FitSummary, CliError> {
    let side = input.with_extension("json");
    let sidecar: ReconstructionSidecar = serde_json::from_slice(
        &std::fs::read(&side).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?,
    )?;
    let bytes = std::fs::read(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let found = sha256_hex(&bytes);
    if found != sidecar.checksum {
        return Err(CliError::Data(format!(
            "{}: checksum {found} does not match the sidecar",
            input.display()
        )));
    }
    let matrix = matrix_from_csv(&bytes[..])?;
    let n = sidecar.n_pixels;
    if matrix.dim() != (n, n) {
        return Err(CliError::Data(format!("Γ̂ is {:?}, sidecar says {n} pixels", matrix.dim())));
    }
    let grid = PixelGrid::new(n, sidecar.pitch_um, sidecar.origin_um).map_err(|e| CliError::Data(e.to_string()))?;
    let mask: Vec<bool> = (0..n * n).map(|k| sidecar.diagonal_measured || k / n != k % n).collect();
    let data: Vec<f64> = matrix.iter().copied().collect();
    let summary: FitSummary = fit_masked(&data, &mask, &grid)?.into();
    create_dir(out)?;
    write_json(&out.join(FIT_FILE), &summary)?;
    Ok(summary)
}
