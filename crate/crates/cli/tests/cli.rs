//! Subcommand behavior through the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crashsev::PipelineConfig;
use crashsev_core::ingest::COVARIATES;
use crashsev_core::probit::ModelSpec;
use crashsev_core::synth::CrashSynthConfig;
use serde_json::Value;

fn crashsev(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crashsev"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Config reading `out/synth_crashes.csv` on the synthetic grid.
fn synth_config(n: usize, k: usize) -> PipelineConfig {
    let synth = CrashSynthConfig::example(n);
    let mut cfg = PipelineConfig::default();
    cfg.input.crashes = Some("out/synth_crashes.csv".into());
    cfg.grid.cell_size_km = synth.grid.cell_size_km;
    cfg.grid.origin_lat = Some(synth.grid.origin_lat);
    cfg.grid.origin_lon = Some(synth.grid.origin_lon);
    cfg.grid.n_rows = Some(synth.grid.n_rows);
    cfg.grid.n_cols = Some(synth.grid.n_cols);
    cfg.hotspots.k = k;
    cfg.model = ModelSpec {
        fixed_vars: vec!["exceeding_speed_limit".into(), "dark".into()],
        n_draws: 1,
        ..Default::default()
    };
    cfg.synth = Some(synth);
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_header() -> String {
    let mut cols = vec!["id", "lat", "lon", "max_injury"];
    cols.extend(COVARIATES);
    cols.join(",")
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.input.crashes = Some("does_not_exist.csv".into());
    let path = write_config(dir.path(), &cfg);
    let out = crashsev(&path, &["rasterize"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("does_not_exist.csv"), "{}", stderr(&out));
}

#[test]
fn empty_input_gives_empty_collection() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("crashes.csv"), format!("{}\n", csv_header())).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.input.crashes = Some("crashes.csv".into());
    let path = write_config(dir.path(), &cfg);
    let out = crashsev(&path, &["rasterize"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let cells = read_json(&dir.path().join("out/cells.geojson"));
    assert_eq!(cells["type"], "FeatureCollection");
    assert_eq!(cells["features"].as_array().unwrap().len(), 0);
}

#[test]
fn constant_attribute_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(100, 4);
    let grid = cfg.synth.as_ref().unwrap().grid;
    let zeros = vec!["0"; COVARIATES.len()].join(",");
    let mut text = format!("{}\n", csv_header());
    for r in 0..3 {
        for c in 0..3 {
            let (lat, lon) = grid.unproject((c as f64 + 10.5) * grid.cell_size_km, (r as f64 + 10.5) * grid.cell_size_km);
            text.push_str(&format!("c{r}{c},{lat},{lon},O,{zeros}\n"));
        }
    }
    std::fs::write(dir.path().join("crashes.csv"), text).unwrap();
    let mut cfg = cfg;
    cfg.input.crashes = Some("crashes.csv".into());
    let path = write_config(dir.path(), &cfg);
    let out = crashsev(&path, &["analyze"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("degenerate"), "{}", stderr(&out));
}

#[test]
fn k_two_writes_two_district_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &synth_config(5000, 2));
    assert!(crashsev(&path, &["synth"]).status.success());
    let out = crashsev(&path, &["analyze"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let files: Vec<String> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("district_") && n.ends_with(".csv"))
        .collect();
    assert_eq!(files.len(), 2, "{files:?}");
}

#[test]
fn single_district_skips_pooled_test() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &synth_config(3000, 1));
    assert!(crashsev(&path, &["synth"]).status.success());
    for cmd in ["analyze", "fit", "lrtests"] {
        let out = crashsev(&path, &[cmd]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let matrix = read_json(&dir.path().join("out/transfer_matrix.json"));
    let cells = matrix["matrix"]["cells"].as_array().unwrap();
    assert!(cells.iter().flat_map(|r| r.as_array().unwrap()).all(Value::is_null));
    let pooled = read_json(&dir.path().join("out/pooled_test.json"));
    assert_eq!(pooled["status"], "skipped");
    assert!(pooled["notice"].as_str().unwrap().contains("skipped"));
}

#[test]
fn synth_is_seeded() {
    let runs: Vec<(Vec<u8>, Vec<u8>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = synth_config(500, 4);
            cfg.seed = 42;
            let path = write_config(dir.path(), &cfg);
            assert!(crashsev(&path, &["synth"]).status.success());
            (
                std::fs::read(dir.path().join("out/synth_crashes.csv")).unwrap(),
                std::fs::read(dir.path().join("out/synth_truth.json")).unwrap(),
            )
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn synth_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &synth_config(100, 4));
    assert!(crashsev(&path, &["synth", "--n", "5000"]).status.success());
    let mut reader = csv::Reader::from_path(dir.path().join("out/synth_crashes.csv")).unwrap();
    assert_eq!(reader.records().count(), 5000);
}

#[test]
fn missing_class_warns_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(3000, 1);
    // no latent value reaches the serious threshold
    cfg.synth.as_mut().unwrap().severity.params.threshold_u1 = 50.0;
    let path = write_config(dir.path(), &cfg);
    assert!(crashsev(&path, &["synth"]).status.success());
    assert!(crashsev(&path, &["analyze"]).status.success());
    let out = crashsev(&path, &["fit", "--district", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let fit = read_json(&dir.path().join("out/fit_district_1.json"));
    let warnings = fit["result"]["diagnostics"]["warnings"].as_array().unwrap();
    assert!(warnings.iter().any(|w| w.as_str().unwrap().contains("no observations in class")));
}
