use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rfsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfsel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rfsel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic world plus a bundle built from it.
fn world(dir: &Path, area: &str) -> (PathBuf, PathBuf) {
    let w = dir.join("world");
    ok(&["synth", "--seed", "3", "--area", area, "--emitters", "15", "--tests", "30", "--out", s(&w)]);
    let bundle = dir.join("bundle");
    ok(&["precompute", "--in", s(&w.join("rfm.jsonl")), "--bundle", s(&bundle)]);
    (w, bundle)
}

fn manifest(bundle: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(bundle.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn standard_area_gives_fifty_cells_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (w, bundle) = world(dir.path(), "20x10");
    assert!(w.join("world.meta").exists());
    assert_eq!(fs::read_to_string(w.join("tests.jsonl")).unwrap().lines().count(), 30);
    let m = manifest(&bundle);
    assert_eq!(m["cells"].as_array().unwrap().len(), 50);
    assert_eq!(m["roi"]["cell_size"], 2.0);

    let again = dir.path().join("again");
    ok(&["precompute", "--in", s(&w.join("rfm.jsonl")), "--bundle", s(&again)]);
    assert_eq!(
        fs::read(bundle.join("manifest.json")).unwrap(),
        fs::read(again.join("manifest.json")).unwrap()
    );
}

#[test]
fn missing_input_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let out = rfsel(&["precompute", "--in", s(&missing), "--bundle", s(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.jsonl"));
    assert!(!dir.path().join("b").exists());
}

#[test]
fn locate_writes_one_row_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let (w, bundle) = world(dir.path(), "8x6");
    let first = fs::read_to_string(w.join("tests.jsonl")).unwrap().lines().next().unwrap().to_string();
    let q = dir.path().join("q.jsonl");
    fs::write(&q, first + "\n").unwrap();
    let text = ok(&["locate", "--bundle", s(&bundle), "--m", "4", "--h", "-1", "--method", "map", "--in", s(&q)]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "query_id,x,y,elapsed_seconds,fallback_flag");
    assert_eq!(lines.len(), 2);
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[0], "1");
    assert!(row[1].parse::<f64>().is_ok() && row[2].parse::<f64>().is_ok());
    assert!(row[4] == "0" || row[4] == "1");
}

#[test]
fn bad_m_is_a_computation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (w, bundle) = world(dir.path(), "8x6");
    let out = rfsel(&["locate", "--bundle", s(&bundle), "--m", "99", "--in", s(&w.join("tests.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad-m"));
}

#[test]
fn segment_eval_loss_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("world");
    ok(&["synth", "--seed", "5", "--area", "8x6", "--emitters", "15", "--tests", "60", "--out", s(&w)]);
    let text = ok(&[
        "segment-eval",
        "--in",
        s(&w.join("rfm.jsonl")),
        "--validation",
        s(&w.join("tests.jsonl")),
    ]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("m,loss"));
    let losses: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 12);
    assert!(losses.windows(2).all(|p| p[1] <= p[0]));
    assert_eq!(*losses.last().unwrap(), 0.0);
}

#[test]
fn eval_emits_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let (w, bundle) = world(dir.path(), "8x6");
    let out = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--bundle",
        s(&bundle),
        "--tests",
        s(&w.join("tests.jsonl")),
        "--grid",
        "methods=knn,map;m=2,4,M;h=-1",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,selector,m,h,mean_time_s,ce50_m,ce75_m,ce90_m,large_error_pct,fallback_pct");
    // 2 methods x 3 values of m, plus one full-search row per method
    assert_eq!(lines.len(), 1 + 6 + 2);
    assert_eq!(lines.iter().filter(|l| l.contains(",none,")).count(), 2);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("world");
    ok(&["synth", "--seed", "2", "--area", "8x6", "--emitters", "15", "--tests", "10", "--out", s(&w)]);
    let cfg = dir.path().join("pipeline.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 11\n[paths]\nrfm = {:?}\nbundle = {:?}\n[selector]\nmethod = \"forward\"\nepsilon = 0.02\n",
            s(&w.join("rfm.jsonl")),
            s(&dir.path().join("b"))
        ),
    )
    .unwrap();
    ok(&["--config", s(&cfg), "precompute", "--method", "backward", "--seed", "4"]);
    let m = manifest(&dir.path().join("b"));
    assert_eq!(m["meta"]["selector"]["kind"], "backward");
    assert_eq!(m["meta"]["selector"]["epsilon"], 0.02);
    assert_eq!(m["meta"]["seed"], 4);
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[selector]\nnu = 2.0\n").unwrap();
    let out = rfsel(&["--config", s(&cfg), "ingest", "--in", "unused.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nu"));
}

#[test]
fn ingest_and_densify_roundtrip_schema() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    fs::write(
        &raw,
        "{\"x\":0.5,\"y\":0.5,\"obs\":{\"a\":-50,\"b\":-100}}\n{\"x\":1.5,\"y\":1.5,\"t\":2.0,\"obs\":{\"a\":-60}}\n",
    )
    .unwrap();
    let clean = dir.path().join("clean.jsonl");
    let text = ok(&["ingest", "--in", s(&raw), "--out", s(&clean)]);
    assert!(text.contains("samples: 2"));
    assert!(!fs::read_to_string(&clean).unwrap().contains("\"b\""));
    let grid = dir.path().join("grid.jsonl");
    ok(&["densify", "--in", s(&clean), "--spacing", "0.5", "--length-scale", "1.0", "--out", s(&grid)]);
    let lines = fs::read_to_string(&grid).unwrap().lines().count();
    assert_eq!(lines, 16);

    fs::write(&raw, "{\"x\":0.5,\"y\":0.5,\"obs\":{\"a\":-120}}\n").unwrap();
    let out = rfsel(&["ingest", "--in", s(&raw)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("-120"));
}
