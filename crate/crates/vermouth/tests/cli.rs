//! End-to-end checks of the command-line interface: exit codes, override
//! precedence, byte-level reproducibility, and artifact round trips.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use vermouth::params::ParamStore;
use vermouth::report::{read_json_report, CSV_HEADER};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vermouth"));
    cmd.env_remove("VERMOUTH_PRECISION");
    cmd
}

/// Downscaled configuration so every invocation finishes in seconds.
const TINY: &[&str] = &[
    "--set",
    "data.image_size=16",
    "--set",
    "backbone.base_channels=8",
    "--set",
    "backbone.channel_multipliers=1,2",
    "--set",
    "backbone.latent_channels=2",
    "--set",
    "text.dim=8",
    "--set",
    "text.vocab_size=128",
    "--set",
    "text.max_tokens=8",
    "--set",
    "head.channels=8,8",
    "--set",
    "head.gn_groups=4",
    "--set",
    "expert.channels=4,6",
    "--set",
    "expert.bottleneck=2",
    "--set",
    "data.categories=3",
    "--set",
    "data.n_per_class=3",
    "--set",
    "data.shots=2",
    "--set",
    "train.epochs=2",
    "--set",
    "opts.t=100",
    "--set",
    "opts.cfg_scale=1",
    "--seeds",
    "0",
];

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vermouth-cli-{name}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout_of(out: &std::process::Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_prints_and_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sweep") && text.contains("ablate"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty(), "usage text goes to standard error");
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = bin()
        .args(["train", "--config", "/nonexistent/cfg.json", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_set_key_and_sweep_factor_are_usage_errors() {
    let out = bin()
        .args(["train", "--set", "nope.key=1", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin()
        .args(["sweep", "--factor", "speed", "--values", "1,2", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_precision_env_is_a_usage_error() {
    let out = bin()
        .env("VERMOUTH_PRECISION", "f16")
        .args(["train", "--out", "/tmp/x"])
        .args(TINY)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_is_reproducible_byte_for_byte() {
    let dir = tmp("train");
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let stem = dir.join(format!("run{run}"));
        fs::create_dir_all(&stem).unwrap();
        let stem = stem.join("model");
        let out = bin()
            .args(["train", "--seed", "7"])
            .args(TINY)
            .args(["--out", stem.to_str().unwrap()])
            .output()
            .unwrap();
        stdout_of(&out);
        artifacts.push((
            fs::read(stem.with_extension("vmf1")).unwrap(),
            fs::read(stem.with_extension("json")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "identical checkpoints");
    assert_eq!(artifacts[0].1, artifacts[1].1, "identical reports");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_file_loads_and_flags_override_it() {
    let dir = tmp("cfgfile");
    let cfg_path = dir.join("run.json");
    fs::write(&cfg_path, r#"{"opts.t": 50, "data.shots": 1}"#).unwrap();
    let stem = dir.join("model");
    let out = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .args(TINY)
        .args(["--set", "opts.t=100", "--out", stem.to_str().unwrap()])
        .output()
        .unwrap();
    stdout_of(&out);
    // The written report is valid JSON with one row.
    let report = read_json_report(&stem.with_extension("json")).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].task, "classify");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn eval_reproduces_the_trained_metric() {
    let dir = tmp("eval");
    let stem = dir.join("model");
    let out = bin()
        .args(["train", "--seed", "3"])
        .args(TINY)
        .args(["--out", stem.to_str().unwrap()])
        .output()
        .unwrap();
    let train_line = stdout_of(&out).lines().next().unwrap().to_string();
    let ckpt = stem.with_extension("vmf1");
    let out = bin()
        .args(["eval", "--seed", "3", "--params", ckpt.to_str().unwrap()])
        .args(TINY)
        .output()
        .unwrap();
    let eval_line = stdout_of(&out).lines().next().unwrap().to_string();
    assert_eq!(train_line, eval_line, "same metric from the checkpoint");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_writes_reports_and_plot_renders_svg() {
    let dir = tmp("sweep");
    let csv_path = dir.join("sweep.csv");
    let out = bin()
        .args(["sweep", "--factor", "time-steps", "--values", "0,100"])
        .args(TINY)
        .args(["--out", csv_path.to_str().unwrap(), "--format", "csv"])
        .output()
        .unwrap();
    stdout_of(&out);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 3, "header plus two cells at one seed");

    let json_path = dir.join("sweep.json");
    let out = bin()
        .args(["sweep", "--factor", "time-steps", "--values", "0,100"])
        .args(TINY)
        .args(["--out", json_path.to_str().unwrap(), "--format", "json"])
        .output()
        .unwrap();
    stdout_of(&out);

    let svg_path = dir.join("curve.svg");
    let out = bin()
        .args([
            "plot",
            "--report",
            json_path.to_str().unwrap(),
            "--x-factor",
            "time-steps",
            "--out",
            svg_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    stdout_of(&out);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<?xml"));
    assert!(svg.contains("<svg") && svg.contains("<polyline"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gen_data_extract_and_pretrain_write_artifacts() {
    let dir = tmp("artifacts");
    let set_stem = dir.join("set");
    let out = bin()
        .args(["gen-data"])
        .args(TINY)
        .args(["--out", set_stem.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(stdout_of(&out).contains("wrote"));
    assert!(set_stem.with_extension("json").is_file());
    assert!(set_stem.with_extension("vmf1").is_file());

    let taps = dir.join("taps.vmf1");
    let out = bin()
        .args(["extract", "--index", "0"])
        .args(TINY)
        .args(["--out", taps.to_str().unwrap()])
        .output()
        .unwrap();
    stdout_of(&out);
    let entries = vermouth::io::load_tensors(&taps).unwrap();
    assert!(entries.iter().any(|(name, _)| name.starts_with("tap.")));

    let pre = dir.join("pre.vmf1");
    let out = bin()
        .args(["pretrain", "--epochs", "1"])
        .args(TINY)
        .args(["--out", pre.to_str().unwrap()])
        .output()
        .unwrap();
    stdout_of(&out);
    let store = ParamStore::<f64>::load(&pre).unwrap();
    assert!(store.len() > 0, "checkpoint holds the full pipeline store");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn f32_precision_runs_end_to_end() {
    let dir = tmp("f32");
    let stem = dir.join("model");
    let out = bin()
        .env("VERMOUTH_PRECISION", "f32")
        .args(["train"])
        .args(TINY)
        .args(["--out", stem.to_str().unwrap()])
        .output()
        .unwrap();
    let line = stdout_of(&out);
    assert!(line.contains("classify top1"));
    fs::remove_dir_all(&dir).unwrap();
}
