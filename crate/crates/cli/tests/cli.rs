use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_commonfeat"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn commonfeat")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stderr_kind(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn tiny_csv(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.csv");
    std::fs::write(
        &p,
        "a,b,c\n0,x,1\n1,y,1\n0,x,0\n1,y,0\n0,y,1\n1,x,0\n0,x,1\n1,y,1\n0,x,0\n",
    )
    .unwrap();
    p
}

fn product_csv(dir: &Path) -> PathBuf {
    // every cell of {0,1}x{0,1}x{0,1,2} exactly once: an exact product distribution
    let mut s = String::from("a,b,c\n");
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..3 {
                s.push_str(&format!("{a},{b},{c}\n"));
            }
        }
    }
    let p = dir.join("product.csv");
    std::fs::write(&p, s).unwrap();
    p
}

fn triangle_json(dir: &Path) -> PathBuf {
    let p = dir.join("tri.json");
    std::fs::write(&p, r#"{"r": 3, "index_sets": [[1, 2], [2, 3], [1, 3]]}"#).unwrap();
    p
}

#[test]
fn fit_eig_writes_features_trace_and_manifest() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    let out = run(&["fit", "tiny.csv", "--k", "2", "--out", "f.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let f = read_json(&dir.path().join("f.json"));
    assert_eq!(f["k"], 2);
    let manifest = read_json(&dir.path().join("f.manifest.json"));
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["inputs"]["tiny.csv"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("f.trace.json").exists());
}

#[test]
fn mace_and_eig_agree_on_joint_correlation() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    for (m, o) in [("eig", "e.json"), ("mace", "m.json")] {
        let out = run(&["fit", "tiny.csv", "--k", "1", "--method", m, "--out", o], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let e = read_json(&dir.path().join("e.trace.json"))["joint_correlation"][0].as_f64().unwrap();
    let m = read_json(&dir.path().join("m.trace.json"))["joint_correlation"][0].as_f64().unwrap();
    assert!((e - m).abs() < 1e-6, "eig {e} mace {m}");
}

#[test]
fn mh_fit_writes_curve() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    let out = run(
        &["fit", "tiny.csv", "--method", "mh", "--steps", "200", "--out", "h.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("h.curve.csv")).unwrap();
    assert!(curve.starts_with("step,mh_score\n"));
    assert_eq!(curve.lines().count(), 202);
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["fit", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_kind(&out), "io");
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = run(&["fit", "x.csv", "--method", "sgd"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_kind(&out), "usage");
}

#[test]
fn ragged_csv_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "a,b\n0,1\n1\n").unwrap();
    let out = run(&["ingest", "bad.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_kind(&out), "format");
}

#[test]
fn bits_suite_passes_on_triangle() {
    let dir = TempDir::new().unwrap();
    triangle_json(dir.path());
    let out = run(&["verify", "tri.json", "--suite", "bits"], dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["details"]["max_projector_distance"].as_f64().unwrap() < 1e-9);
}

#[test]
fn bits_suite_needs_bits_input() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    let out = run(&["verify", "tiny.csv", "--suite", "bits"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_kind(&out), "domain");
}

#[test]
fn theorem1_on_product_distribution_has_zero_target() {
    let dir = TempDir::new().unwrap();
    product_csv(dir.path());
    let out = run(&["verify", "product.csv", "--suite", "theorem1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["details"]["target"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn lemma1_suite_passes() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    let out = run(&["verify", "tiny.csv", "--suite", "lemma1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn corrupted_features_fail_verification() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    assert!(run(&["fit", "tiny.csv", "--k", "2", "--out", "f.json"], dir.path()).status.success());
    let ok = run(&["verify", "tiny.csv", "--suite", "mh-identity", "--features", "f.json"], dir.path());
    assert!(ok.status.success());

    let text = std::fs::read_to_string(dir.path().join("f.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    let before = v.to_string();
    scale_first_number(&mut v, 3.0);
    assert_ne!(before, v.to_string());
    std::fs::write(dir.path().join("bad.json"), v.to_string()).unwrap();
    let bad = run(&["verify", "tiny.csv", "--suite", "mh-identity", "--features", "bad.json"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let rep: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(rep["passed"], false);
}

fn scale_first_number(v: &mut Value, factor: f64) -> bool {
    match v {
        Value::Number(n) if n.is_f64() => {
            *v = serde_json::json!(n.as_f64().unwrap() * factor);
            true
        }
        Value::Array(a) => a.iter_mut().any(|x| scale_first_number(x, factor)),
        Value::Object(o) => o
            .iter_mut()
            .filter(|(k, _)| k.as_str() != "k")
            .any(|(_, x)| scale_first_number(x, factor)),
        _ => false,
    }
}

#[test]
fn bits_command_reports_analytic_spectrum() {
    let dir = TempDir::new().unwrap();
    let out = run(&["bits", "--r", "3", "--sets", "1,2;2,3;1,3", "--k", "3"], dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let numeric: Vec<f64> = v["spectrum"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let exact: Vec<f64> = v["analytic_spectrum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(numeric.len(), exact.len());
    for (a, b) in numeric.iter().zip(&exact) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!((exact[0] - 3.0).abs() < 1e-12);
    assert!((exact[1] - 2.0).abs() < 1e-12);
}

#[test]
fn complexity_on_triangle_is_degenerate() {
    let dir = TempDir::new().unwrap();
    triangle_json(dir.path());
    let out = run(&["complexity", "tri.json", "--k", "1"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_kind(&out), "degeneracy");
}

#[test]
fn complexity_on_csv_reports_exponent() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    let out = run(
        &["complexity", "tiny.csv", "--n-grid", "20,40", "--trials", "20", "--seed", "3"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["exponent"]["alpha_k"].as_f64().unwrap() > 0.0);
    assert_eq!(v["monte_carlo"]["points"].as_array().unwrap().len(), 2);
}

fn pgm(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            b.push(f(r, c));
        }
    }
    b
}

#[test]
fn preprocess_identical_images_gives_singleton_alphabets() {
    let dir = TempDir::new().unwrap();
    let img = pgm(28, 28, |r, c| if (r * 3 + c * 5) % 7 < 3 { 200 } else { 0 });
    std::fs::write(dir.path().join("a.pgm"), &img).unwrap();
    std::fs::write(dir.path().join("b.pgm"), &img).unwrap();
    let out = run(&["preprocess", "--images", "a.pgm", "b.pgm", "--out", "p.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let side = read_json(&dir.path().join("p.alphabet.json"));
    let vars = side["variables"].as_array().unwrap();
    assert_eq!(vars.len(), 64);
    assert!(vars.iter().all(|v| v["representatives"].as_object().unwrap().len() == 1));
    let csv = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("p.manifest.json").exists());
}

#[test]
fn outputs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    for o in ["a.json", "b.json"] {
        let out = run(
            &["fit", "tiny.csv", "--k", "2", "--method", "mace", "--seed", "9", "--out", o],
            dir.path(),
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    let ta = std::fs::read(dir.path().join("a.trace.json")).unwrap();
    let tb = std::fs::read(dir.path().join("b.trace.json")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn estimate_round_trips_through_fit() {
    let dir = TempDir::new().unwrap();
    tiny_csv(dir.path());
    let est = run(&["estimate", "tiny.csv", "--out", "d.json"], dir.path());
    assert!(est.status.success());
    let a = run(&["fit", "tiny.csv", "--k", "2"], dir.path());
    let b = run(&["fit", "d.json", "--k", "2"], dir.path());
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let fa: Value = serde_json::from_slice(&a.stdout).unwrap();
    let fb: Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(fa["eigenvalues_hint"], fb["eigenvalues_hint"]);
}
