//! End-to-end runs of the installed binary: exit codes, artifact layout, and
//! the determinism contract (identical config and seed give identical bytes,
//! manifest excepted).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn perihom() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perihom"))
}

fn run(args: &[&str]) -> Output {
    perihom().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small enough for subsecond runs, large enough that every gate is honest:
/// two commensurable epsilons on a box of 16 cells, walks above the shipped
/// floors.
fn base_config(out: &Path) -> Value {
    json!({
        "kernel": { "family": "boxcar", "dim": 1, "radius": 1.0 },
        "medium": { "form": "modulated-sine", "scale": 1.0, "amp": 0.5, "time_amp": 0.5 },
        "grid": { "n": 32, "nt": 32 },
        "box": { "half_width": 8.0, "nx": 1024 },
        "eps": [0.5, 0.25],
        "t_final": 0.4,
        "snapshots": 8,
        "sigma": 1.0,
        "residual_points": 16,
        "seed": 7,
        "paths": 12000,
        "horizon": 50.0,
        "out_dir": out.to_str().unwrap()
    })
}

/// Assembled value for the base medium on the 32 x 32 cell grid; the walk
/// estimate must agree with it statistically.
const BASE_AEFF_N32: f64 = 0.172227605331;

#[test]
fn validate_accepts_the_stock_demo_config() {
    let tmp = TempDir::new().unwrap();
    let demo = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/demo.json");
    let out = run(&["validate", "--config", demo, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report = read_json(&tmp.path().join("report.json"));
    assert_eq!(report["pass"], json!(true));
    assert_eq!(report["kernel"]["family"], json!("boxcar"));
    assert!(report["medium"]["observed_min"].as_f64().unwrap() > 0.0);
    let manifest = read_json(&tmp.path().join("manifest.json"));
    assert_eq!(manifest["command"], json!("validate"));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn validate_rejects_nonpositive_declared_bounds() {
    let tmp = TempDir::new().unwrap();
    let cfg = json!({
        "kernel": { "family": "boxcar", "dim": 1, "radius": 1.0 },
        "medium": {
            "form": "product-sum", "dim": 1, "constant": 1.0,
            "terms": [], "bounds": [0.0, 2.0]
        },
        "out_dir": tmp.path().join("out").to_str().unwrap()
    });
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn validate_rejects_an_asymmetric_tabulated_medium() {
    let tmp = TempDir::new().unwrap();
    let (n, nt) = (4usize, 4usize);
    let mut values = Vec::with_capacity(n * n * nt);
    for _t in 0..nt {
        for eta in 0..n {
            for xi in 0..n {
                values.push(1.0 + 0.1 * (xi as f64 - eta as f64) / n as f64);
            }
        }
    }
    let cfg = json!({
        "kernel": { "family": "boxcar", "dim": 1, "radius": 1.0 },
        "medium": {
            "form": "tabulated", "dim": 1, "n": n, "nt": nt,
            "values": values, "bounds": [0.5, 1.5]
        },
        "out_dir": tmp.path().join("out").to_str().unwrap()
    });
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("symmetry"), "{}", stderr(&out));
}

#[test]
fn validate_rejects_an_incommensurable_epsilon() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let mut cfg = base_config(&outdir);
    cfg["eps"] = json!([0.3]);
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn effective_recovers_the_flat_diffusivity() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let mut cfg = base_config(&outdir);
    cfg["medium"] = json!({ "form": "constant", "dim": 1, "value": 1.0 });
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["effective", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let eff = read_json(&outdir.join("effective.json"));
    let a = eff["a_eff"][0][0].as_f64().unwrap();
    assert!((a - 1.0 / 6.0).abs() <= 1e-8, "a_eff = {a}");
    assert!(outdir.join("chi_1.csv").is_file());
}

#[test]
fn identical_runs_write_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let (o1, o2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let path = write_config(tmp.path(), &base_config(&o1));
    let cfg_str = path.to_str().unwrap();
    assert_eq!(code(&run(&["effective", "--config", cfg_str])), 0);
    assert_eq!(
        code(&run(&["effective", "--config", cfg_str, "--out", o2.to_str().unwrap()])),
        0
    );
    for file in ["effective.json", "chi_1.csv"] {
        assert_eq!(
            fs::read(o1.join(file)).unwrap(),
            fs::read(o2.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
}

#[test]
fn two_dimensional_fields_use_the_binary_format() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let cfg = json!({
        "kernel": { "family": "gaussian", "dim": 2, "sigma": 0.25 },
        "medium": { "form": "constant", "dim": 2, "value": 1.0 },
        "grid": { "n": 8, "nt": 8 },
        "out_dir": outdir.to_str().unwrap()
    });
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["effective", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    for name in ["chi_1.bin", "chi_2.bin"] {
        let bytes = fs::read(outdir.join(name)).unwrap();
        let header = b"perihom-field v1 2 8 8\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 8 * 8 * 8 * 8);
    }
}

#[test]
fn flags_override_the_file() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let path = write_config(tmp.path(), &base_config(&outdir));
    let out = run(&["effective", "--config", path.to_str().unwrap(), "--grid", "16,16"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eff = read_json(&outdir.join("effective.json"));
    assert_eq!(eff["grid"]["n"], json!(16));
    assert_eq!(eff["grid"]["nt"], json!(16));
}

#[test]
fn converge_with_a_single_epsilon_writes_one_row() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let path = write_config(tmp.path(), &base_config(&outdir));
    let out = run(&["converge", "--config", path.to_str().unwrap(), "--eps", "0.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = fs::read_to_string(outdir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epsilon,sup_error,final_error,residual");
    assert_eq!(lines.len(), 2);
    let sweep = read_json(&outdir.join("sweep.json"));
    assert_eq!(sweep["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn mc_reports_the_walk_estimate() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let path = write_config(tmp.path(), &base_config(&outdir));
    let out = perihom()
        .args(["mc", "--config", path.to_str().unwrap()])
        .env("PERIHOM_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mc = read_json(&outdir.join("mc.json"));
    assert_eq!(mc["paths"], json!(12000));
    assert_eq!(mc["seed"], json!(7));
    let a = mc["a_mc"][0][0].as_f64().unwrap();
    let se = mc["se"][0][0].as_f64().unwrap();
    assert!(se > 0.0);
    assert!((a - BASE_AEFF_N32).abs() <= 4.0 * se, "a_mc = {a}, se = {se}");
    let rate = mc["accept_rate"].as_f64().unwrap();
    assert!(rate > 0.0 && rate <= 1.0);
}

#[test]
fn mc_rejects_runs_below_the_shipped_floors() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");

    let mut low_paths = base_config(&outdir);
    low_paths["paths"] = json!(500);
    let path = write_config(tmp.path(), &low_paths);
    let out = run(&["mc", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let mut low_horizon = base_config(&outdir);
    low_horizon["horizon"] = json!(10.0);
    let path = write_config(tmp.path(), &low_horizon);
    let out = run(&["mc", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn kappa_writes_the_second_corrector_fields() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let path = write_config(tmp.path(), &base_config(&outdir));
    let out = run(&["kappa", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    assert!(outdir.join("kappa_11.csv").is_file());
    let kappa = read_json(&outdir.join("kappa.json"));
    let eff = read_json(&outdir.join("effective.json"));
    assert_eq!(kappa["a_hat"], eff["a_hat"]);
    for c in kappa["components"].as_array().unwrap() {
        assert!(c["compatibility_defect"].as_f64().unwrap() <= 1e-8);
    }
}

#[test]
fn residual_stays_small_for_a_constant_medium() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let mut cfg = base_config(&outdir);
    cfg["medium"] = json!({ "form": "constant", "dim": 1, "value": 1.0 });
    cfg["eps"] = json!([0.25]);
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["residual", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = fs::read_to_string(outdir.join("residual.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epsilon,nx,residual");
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[1], "1024");
    let r: f64 = fields[2].parse().unwrap();
    // With no modulation the expansion is exact up to the O(eps^2) moment
    // remainder of the jump operator itself.
    assert!(r < 5e-3, "residual = {r}");
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let mut cfg = base_config(&outdir);
    cfg["speling_mistake"] = json!(1);
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("speling_mistake"), "{}", stderr(&out));
}

#[test]
fn a_missing_config_flag_is_a_usage_error() {
    let out = run(&["validate"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn demo_passes_on_a_small_problem() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let path = write_config(tmp.path(), &base_config(&outdir));
    let out = run(&["demo", "--config", path.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let demo = read_json(&outdir.join("demo.json"));
    assert_eq!(demo["pass"], json!(true));
    for gate in demo["gates"].as_array().unwrap() {
        assert_eq!(gate["pass"], json!(true), "gate {:?}", gate["name"]);
    }
    for artifact in ["effective.json", "mc.json", "sweep.csv", "sweep.json", "manifest.json"] {
        assert!(outdir.join(artifact).is_file(), "missing {artifact}");
    }
}

#[test]
fn demo_fails_loudly_when_the_limit_is_perturbed() {
    let tmp = TempDir::new().unwrap();
    let outdir = tmp.path().join("out");
    let path = write_config(tmp.path(), &base_config(&outdir));
    let out = run(&["demo", "--config", path.to_str().unwrap(), "--perturb-aeff", "1.5"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    let demo = read_json(&outdir.join("demo.json"));
    assert_eq!(demo["pass"], json!(false));
    let failed: Vec<&str> = demo["gates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|g| g["pass"] == json!(false))
        .map(|g| g["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"error_small"), "failed gates: {failed:?}");
}
