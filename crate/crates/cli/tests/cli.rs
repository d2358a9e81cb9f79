use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn mfc(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfc"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("MFC_THREADS", t);
    }
    cmd.output().unwrap()
}

fn run(sub: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mfc(&args, None)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn free_instance_solves_to_zero_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("solve", &config("free.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta = json(&tmp.path().join("solve.json"));
    assert!(meta["theta"].as_f64().unwrap().abs() < 1e-6);
    assert_eq!(meta["converged"], true);
}

#[test]
fn too_small_grid_is_a_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("free.json")).unwrap().replace("\"cells\": 64", "\"cells\": 3");
    let cfg = write_config(tmp.path(), &text);
    let o = run("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid.cells"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(mfc(&["--help"], None).status.code(), Some(0));
    assert_eq!(mfc(&["--version"], None).status.code(), Some(0));
    assert_eq!(mfc(&["bogus"], None).status.code(), Some(1));
    assert_eq!(mfc(&["solve"], None).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let o = run("solve", &tmp.path().join("missing.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_arguments_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("convex.json");
    let out = tmp.path();
    assert_eq!(run("converge", &cfg, out, &["--n", ""]).status.code(), Some(1));
    let dup = run("chaos", &cfg, out, &["--n", "8", "--replicas", "2", "--times", "0.5,0.5"]);
    assert_eq!(dup.status.code(), Some(1));
    assert!(stderr(&dup).contains("duplicates"), "{}", stderr(&dup));
    assert_eq!(run("kl", &cfg, out, &["--n", "8", "--k", "0"]).status.code(), Some(1));
}

#[test]
fn budget_exhaustion_exits_two_with_results_written() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("external.json"))
        .unwrap()
        .replace("\"grid\"", "\"solver\": {\"max_iters\": 1, \"tol\": 1e-14},\n  \"grid\"");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(json(&out.join("solve.json"))["converged"], false);
    assert!(out.join("control.csv").exists() && out.join("manifest.json").exists());
}

#[test]
fn manifest_lists_every_file_in_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run("chaos", &config("convex.json"), &out, &["--n", "4,8", "--replicas", "3", "--times", "0,1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = json(&out.join("manifest.json"));
    let mut listed: Vec<String> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    listed.push("manifest.json".into());
    listed.sort();
    let mut present: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    present.sort();
    assert_eq!(listed, present);
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["grid"], serde_json::json!([64, 100]));
    assert_eq!(manifest["spec_hash"].as_str().unwrap().len(), 64);
    // a second command into the same directory replaces the first one's files
    let o = run("kl", &config("convex.json"), &out, &["--n", "4", "--replicas", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out.join("chaos.csv").exists() && out.join("kl.csv").exists());
}

#[test]
fn reruns_and_worker_counts_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("convex.json");
    let mut dirs = Vec::new();
    for (i, threads) in ["1", "8", "8"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let args = ["chaos", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--n", "8,32", "--replicas", "6", "--seed", "42"];
        let o = mfc(&args, Some(threads));
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        dirs.push(out);
    }
    for name in ["chaos.csv", "chaos_sup.csv", "chaos_summary_N8.csv", "control.csv", "density.csv"] {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(a, std::fs::read(d.join(name)).unwrap(), "{name}");
        }
    }
}

#[test]
fn converge_and_kl_tables_have_the_documented_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("conv");
    let o = run("converge", &config("noninteracting.json"), &out, &["--n", "1,4", "--replicas", "200", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let header = std::fs::read_to_string(out.join("converge.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "N,cost_N,stderr,theta,gap");
    // without interaction one particle already follows the mean-field law
    let gap = column(&out.join("converge.csv"), "gap")[0];
    let se = column(&out.join("converge.csv"), "stderr")[0];
    assert!(gap < 4.0 * se + 2e-3, "gap {gap}, stderr {se}");

    let out = tmp.path().join("kl");
    let o = run("kl", &config("noninteracting.json"), &out, &["--n", "4,16", "--replicas", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let header = std::fs::read_to_string(out.join("kl.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "N,k,kl_bound,kl_to_wiener_per_particle,tv_bound,stderr");
    assert!(column(&out.join("kl.csv"), "kl_bound").iter().all(|&v| v == 0.0));
}

#[test]
fn lift_reproduces_the_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lift");
    let o = run("lift", &config("external.json"), &out, &["--replicas", "20000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(column(&out.join("lift.csv"), "W1").iter().all(|&d| d < 0.01));
    assert!(column(&out.join("lift_kinetic.csv"), "relative_error")[0] < 0.02);
}

#[test]
fn pair_solve_writes_product_grid_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"{
        "spec_version": 1,
        "T": 0.1,
        "mu0": {"kind": "von_mises", "params": {"mean": 0.3, "kappa": 1.0}},
        "vext": {"cos": [0.0, 0.5], "sin": []},
        "kb": {"cos": [], "sin": [0.0, 0.2]},
        "grid": {"cells": 16, "steps": 40}
    }"#;
    let cfg = write_config(tmp.path(), text);
    let out = tmp.path().join("pair");
    let o = run("solve", &cfg, &out, &["--pair"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = std::fs::read_to_string(out.join("pair_density.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 41 * 16 * 16);
    assert!(json(&out.join("solve.json"))["theta"].as_f64().unwrap().is_finite());
}
