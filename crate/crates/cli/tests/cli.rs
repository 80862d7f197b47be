use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use paircam::io::{create_stack, read_matrix_csv};
use paircam::sim::FrameKind;
use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_paircam");

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn paircam(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("PAIRCAM_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr(out));
}

fn spc_config(n_pixels: usize, n_frames: u64, seed: u64) -> Value {
    json!({
        "grid": {"n_pixels": n_pixels, "pitch_um": 13.0},
        "distribution": {"double_gaussian": {"sigma_plus_um": 12.06, "sigma_minus_um": 926.12}},
        "source": {"mean_pairs": 2.0},
        "sensor": {"eta": 0.44, "mode": {"kind": "spc", "p10": 0.015}},
        "n_frames": n_frames,
        "seed": seed
    })
}

fn linear_config(n_pixels: usize, n_frames: u64, seed: u64) -> Value {
    let mut cfg = spc_config(n_pixels, n_frames, seed);
    cfg["sensor"]["mode"] = json!({"kind": "emccd_linear", "noise": "reference"});
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn simulate(config: &Path, out: &Path) -> Output {
    paircam(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn reconstruct(config: &Path, out: &Path) -> Output {
    paircam(&["reconstruct", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn minimal_run_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "min.json", &spc_config(4, 10, 1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_exit(&simulate(&cfg, &a), 0);
    assert_exit(&simulate(&cfg, &b), 0);

    let mut reader = paircam::io::open_stack(&a.join("frames.ppfr")).unwrap();
    let header = reader.header();
    assert_eq!(header.kind, FrameKind::Binary);
    assert_eq!(header.n_pixels, 4);
    assert_eq!(header.n_frames, 10);
    let mut frames = 0;
    while let Some(frame) = reader.read_frame().unwrap() {
        assert!(frame.values.iter().all(|&c| c == 0.0 || c == 1.0));
        frames += 1;
    }
    assert_eq!(frames, 10);

    for file in ["frames.ppfr", "ground_truth.csv", "manifest.json", "config.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "min.json", &spc_config(8, 200, 1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_exit(&simulate(&cfg, &a), 0);
    let out = paircam(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert_exit(&out, 0);
    assert_ne!(fs::read(a.join("frames.ppfr")).unwrap(), fs::read(b.join("frames.ppfr")).unwrap());
    assert_eq!(read_json(&b.join("manifest.json"))["seed"], 2);
}

#[test]
fn manifest_records_effective_parameters_and_hashes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    assert_exit(&simulate(&configs_dir().join("spc_reference.json"), &out), 0);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["n_frames"], 100_000);
    let eff = &manifest["effective_parameters"];
    assert_eq!(eff["eta"], 0.44);
    assert_eq!(eff["p10"], 0.015);
    assert_eq!(eff["mean_pairs"], 2.0);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let outputs = manifest["outputs"].as_object().unwrap();
    let stack = &outputs["frames"];
    let bytes = fs::read(out.join("frames.ppfr")).unwrap();
    assert_eq!(stack["sha256"].as_str().unwrap(), paircam::io::sha256_hex(&bytes));
}

#[test]
fn thresholded_manifest_records_dark_and_single_electron_rates() {
    let dir = TempDir::new().unwrap();
    let mut cfg = spc_config(8, 100, 4);
    cfg["sensor"]["mode"] = json!({"kind": "emccd_thresholded", "noise": "reference", "threshold": 516.0});
    let cfg = write_config(dir.path(), "thr.json", &cfg);
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    let eff = &read_json(&out.join("manifest.json"))["effective_parameters"];
    let i0 = eff["false_positive_probability"].as_f64().unwrap();
    let i1 = eff["one_electron_detection_probability"].as_f64().unwrap();
    assert!((i0 - 0.015).abs() < 5e-4, "I0 = {i0}");
    assert!((i1 - 0.8905).abs() < 5e-4, "I1 = {i1}");
}

#[test]
fn invalid_eta_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = spc_config(4, 10, 1);
    cfg["sensor"]["eta"] = json!(1.5);
    let cfg = write_config(dir.path(), "bad.json", &cfg);
    let out = simulate(&cfg, &dir.path().join("run"));
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("sensor.eta"), "{}", stderr(&out));
}

#[test]
fn unknown_field_names_its_path() {
    let dir = TempDir::new().unwrap();
    let mut cfg = spc_config(4, 10, 1);
    cfg["sensor"]["gian"] = json!(1.0);
    let cfg = write_config(dir.path(), "bad.json", &cfg);
    let out = simulate(&cfg, &dir.path().join("run"));
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("sensor"), "{}", stderr(&out));
}

#[test]
fn spc_reconstruction_shows_the_antidiagonal_ridge() {
    let dir = TempDir::new().unwrap();
    let cfg = configs_dir().join("spc_reference.json");
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    let run = paircam(&["--json", "reconstruct", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_exit(&run, 0);
    let report = stdout_json(&run);
    assert_eq!(report["mode"], "spc");
    assert_eq!(report["diagonal_valid"], false);
    let tv = report["tv_to_truth"].as_f64().unwrap();
    assert!(tv > 0.0 && tv < 1.0, "TV = {tv}");

    let gamma = read_matrix_csv(&out.join("gamma_hat.csv")).unwrap();
    let n = gamma.nrows();
    assert_eq!(n, 64);
    let rows: Vec<usize> = (8..n - 8).collect();
    let on_ridge = rows
        .iter()
        .filter(|&&i| {
            let (peak, _) = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, gamma[[i, j]]))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            peak.abs_diff(n - 1 - i) <= 2
        })
        .count();
    assert!(on_ridge * 10 >= rows.len() * 9, "{on_ridge} of {} rows peak on the antidiagonal", rows.len());

    let fit = &report["fit"];
    let sigma_plus = fit["sigma_plus_um"].as_f64().unwrap();
    assert!((sigma_plus - 12.06).abs() / 12.06 < 0.2, "σ+ = {sigma_plus}");
    assert!(out.join("profiles.csv").exists());
    assert_eq!(read_json(&out.join("report.json")), report);
}

#[test]
fn reconstruction_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "lin.json", &linear_config(16, 5000, 9));
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    assert_exit(&reconstruct(&cfg, &out), 0);
    let first = fs::read(out.join("gamma_hat.csv")).unwrap();
    let report = fs::read(out.join("report.json")).unwrap();
    assert_exit(&reconstruct(&cfg, &out), 0);
    assert_eq!(first, fs::read(out.join("gamma_hat.csv")).unwrap());
    assert_eq!(report, fs::read(out.join("report.json")).unwrap());
}

#[test]
fn binary_stack_with_linear_inversion_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = spc_config(8, 500, 1);
    let sim_cfg = write_config(dir.path(), "spc.json", &cfg);
    let out = dir.path().join("run");
    assert_exit(&simulate(&sim_cfg, &out), 0);
    cfg["reconstruction"] = json!({"inversion": "emccd"});
    let rec_cfg = write_config(dir.path(), "emccd.json", &cfg);
    let run = reconstruct(&rec_cfg, &out);
    assert_exit(&run, 3);
}

#[test]
fn empty_stack_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "spc.json", &spc_config(4, 10, 1));
    let stack = dir.path().join("empty.ppfr");
    create_stack(&stack, FrameKind::Binary, 4, 0).unwrap().finish().unwrap();
    let run = paircam(&[
        "reconstruct",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--stack",
        stack.to_str().unwrap(),
    ]);
    assert_exit(&run, 3);
    assert!(stderr(&run).contains("need at least"), "{}", stderr(&run));
}

#[test]
fn pixel_count_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let small = write_config(dir.path(), "small.json", &spc_config(4, 10, 1));
    let large = write_config(dir.path(), "large.json", &spc_config(8, 10, 1));
    let out = dir.path().join("run");
    assert_exit(&simulate(&small, &out), 0);
    assert_exit(&reconstruct(&large, &out), 3);
}

#[test]
fn super_poissonian_general_inversion_reports_the_correction() {
    let dir = TempDir::new().unwrap();
    let mut cfg = linear_config(16, 20_000, 7);
    cfg["source"]["pair_number_model"] = json!({"kind": "generic_moments", "variance": 4.0});
    cfg["reconstruction"] = json!({"inversion": "general", "diagonal": true});
    let cfg = write_config(dir.path(), "sp.json", &cfg);
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    assert_exit(&reconstruct(&cfg, &out), 0);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["mode"], "general");
    assert_eq!(report["non_poisson_correction"], true);
    assert_eq!(report["diagonal_valid"], true);
}

#[test]
fn two_line_mode_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let mut cfg = spc_config(8, 20_000, 3);
    cfg["two_lines"] = json!(true);
    let cfg = write_config(dir.path(), "two.json", &cfg);
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    let header = paircam::io::open_stack(&out.join("frames.ppfr")).unwrap().header();
    assert_eq!(header.n_pixels, 16);
    assert_exit(&reconstruct(&cfg, &out), 0);
    let gamma = read_matrix_csv(&out.join("gamma_hat.csv")).unwrap();
    assert_eq!(gamma.dim(), (8, 8));
}

#[test]
fn bundled_configs_reconstruct_their_own_output() {
    let dir = TempDir::new().unwrap();
    let mut names: Vec<_> = fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    assert!(names.len() >= 5);
    for path in names {
        let mut cfg = read_json(&path);
        cfg["n_frames"] = json!(2000);
        let stem = path.file_stem().unwrap().to_str().unwrap().to_owned();
        let cfg_path = write_config(dir.path(), &format!("{stem}.json"), &cfg);
        let out = dir.path().join(&stem);
        assert_exit(&simulate(&cfg_path, &out), 0);
        let run = reconstruct(&cfg_path, &out);
        assert!(
            matches!(run.status.code(), Some(0) | Some(4)),
            "{stem}: exit {:?}, {}",
            run.status.code(),
            stderr(&run)
        );
        assert!(out.join("gamma_hat.csv").exists(), "{stem}");
    }
}

#[test]
fn fit_command_matches_reconstruction_fit() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "spc.json", &spc_config(32, 50_000, 5));
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    assert_exit(&reconstruct(&cfg, &out), 0);
    let fit_out = dir.path().join("fit");
    let run = paircam(&[
        "--json",
        "fit",
        "--input",
        out.join("gamma_hat.csv").to_str().unwrap(),
        "--out",
        fit_out.to_str().unwrap(),
    ]);
    assert_exit(&run, 0);
    let fit = stdout_json(&run);
    let report = read_json(&out.join("report.json"));
    let a = fit["sigma_plus_um"].as_f64().unwrap();
    let b = report["fit"]["sigma_plus_um"].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
    assert_eq!(read_json(&fit_out.join("fit.json")), fit);
}

#[test]
fn fit_rejects_an_edited_matrix() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "spc.json", &spc_config(8, 2000, 5));
    let out = dir.path().join("run");
    assert_exit(&simulate(&cfg, &out), 0);
    assert_exit(&reconstruct(&cfg, &out), 0);
    let csv = out.join("gamma_hat.csv");
    let mut text = fs::read_to_string(&csv).unwrap();
    text.push('\n');
    fs::write(&csv, text).unwrap();
    let run = paircam(&["fit", "--input", csv.to_str().unwrap(), "--out", dir.path().join("fit").to_str().unwrap()]);
    assert_exit(&run, 3);
}

#[test]
fn oracle_examples() {
    let v = stdout_json(&paircam(&["oracle", r#"{"op":"p_photons_given_pairs","Γ_i":0.25,"Γ_ii":0.1,"n":1,"m":1}"#]));
    assert!((v["value"].as_f64().unwrap() - 0.3).abs() < 1e-15);

    let v = stdout_json(&paircam(&["oracle", r#"{"op":"spc_moments","eta":0.44,"mean_pairs":2.0,"p10":0.015}"#]));
    assert!((v["mean_i"].as_f64().unwrap() - 0.015).abs() < 1e-15);

    let v = stdout_json(&paircam(&[
        "oracle",
        r#"{"op":"emccd_moments","gamma_j":0.2,"eta":0.44,"mean_pairs":2.0}"#,
    ]));
    assert_eq!(v["mean_i"], v["offset"]);
}

#[test]
fn oracle_reads_files_and_stdin() {
    use std::io::Write;
    use std::process::Stdio;

    let dir = TempDir::new().unwrap();
    let query = r#"{"op":"p_photons_given_pairs","gamma_i":0.25,"gamma_ii":0.1,"n":1,"m":1}"#;
    let file = dir.path().join("q.json");
    fs::write(&file, query).unwrap();
    let from_file = stdout_json(&paircam(&["oracle", "--config", file.to_str().unwrap()]));

    let mut child = Command::new(BIN)
        .args(["oracle", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(query.as_bytes()).unwrap();
    let from_stdin = child.wait_with_output().unwrap();
    assert_exit(&from_stdin, 0);
    assert_eq!(from_file, stdout_json(&from_stdin));
}

#[test]
fn oracle_rejects_unknown_ops_and_domain_violations() {
    assert_exit(&paircam(&["oracle", r#"{"op":"nope"}"#]), 2);
    assert_exit(&paircam(&["oracle", r#"{"op":"p_photons_given_pairs","gamma_i":1.5,"n":0,"m":1}"#]), 2);
}

#[test]
fn output_directory_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "min.json", &spc_config(4, 10, 1));
    let out = dir.path().join("from-env");
    let run = Command::new(BIN)
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .env("PAIRCAM_OUT", &out)
        .output()
        .unwrap();
    assert_exit(&run, 0);
    assert!(out.join("frames.ppfr").exists());
}

#[test]
fn json_simulate_output_is_the_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "min.json", &spc_config(4, 10, 1));
    let out = dir.path().join("run");
    let run = paircam(&["--json", "simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_exit(&run, 0);
    assert_eq!(stdout_json(&run), read_json(&out.join("manifest.json")));
}

#[test]
fn selftest_passes() {
    let run = paircam(&["--json", "selftest"]);
    assert_exit(&run, 0);
    let checks = stdout_json(&run);
    assert!(checks.as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn zero_threads_is_rejected() {
    assert_exit(&paircam(&["--threads", "0", "selftest"]), 2);
}
