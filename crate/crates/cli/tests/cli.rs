use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use taptq::bundle::{TensorBundle, MANIFEST_FILE, PAYLOAD_FILE};
use taptq_cli::run::REPORT_FILE;
use taptq_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY};
use tempfile::TempDir;

const SMALL: &str = r#"{
  "net": {"depth": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "seq_len": 8,
          "outlier_channels": 2, "outlier_scale": 8.0, "seed": 0},
  "pool_size": 12,
  "pipeline": {"fit": {"rank": 4, "lambda": 0.001, "fit_always": false}}
}"#;

fn taptq(args: &[&str]) -> i32 {
    run(std::iter::once("taptq").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let cfg = dir.path().join("small.json");
        fs::write(&cfg, SMALL).unwrap();
        let g = dir.path().join("g");
        assert_eq!(taptq(&["gen", "--config", s(&cfg), "--out", s(&g)]), EXIT_OK);
        let sel = dir.path().join("s");
        assert_eq!(
            taptq(&["select", "--pool", s(&g.join("pool")), "--n", "4", "--out", s(&sel)]),
            EXIT_OK
        );
        Self { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn quantize(&self, out: &str, extra: &[&str]) -> i32 {
        let (cfg, net, calib, out) = (self.p("small.json"), self.p("g/net"), self.p("s/calib"), self.p(out));
        let mut args = vec!["quantize", "--config", s(&cfg), "--net", s(&net), "--calib", s(&calib), "--out", s(&out)];
        args.extend_from_slice(extra);
        taptq(&args)
    }
}

fn read_report(run: &Path) -> Value {
    serde_json::from_slice(&fs::read(run.join(REPORT_FILE)).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic_with_default_pool() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(taptq(&["gen", "--seed", "3", "--out", s(&a)]), EXIT_OK);
    assert_eq!(taptq(&["gen", "--seed", "3", "--out", s(&b)]), EXIT_OK);
    for sub in ["net", "pool"] {
        for f in [MANIFEST_FILE, PAYLOAD_FILE] {
            assert_eq!(fs::read(a.join(sub).join(f)).unwrap(), fs::read(b.join(sub).join(f)).unwrap());
        }
    }
    assert_eq!(TensorBundle::read(a.join("pool")).unwrap().entries.len(), 20);
}

#[test]
fn corrupt_payload_is_a_data_error() {
    let f = Fixture::new();
    let payload = f.p("g/pool").join(PAYLOAD_FILE);
    let mut bytes = fs::read(&payload).unwrap();
    bytes[10] ^= 0x40;
    fs::write(&payload, bytes).unwrap();
    let out = f.p("s2");
    assert_eq!(taptq(&["select", "--pool", s(&f.p("g/pool")), "--out", s(&out)]), EXIT_DATA);
}

#[test]
fn select_default_pool() {
    let dir = TempDir::new().unwrap();
    let g = dir.path().join("g");
    assert_eq!(taptq(&["gen", "--out", s(&g)]), EXIT_OK);
    let out = dir.path().join("s");
    assert_eq!(
        taptq(&["select", "--pool", s(&g.join("pool")), "--net", s(&g.join("net")), "--n", "8", "--out", s(&out)]),
        EXIT_OK
    );
    let sel: Value = serde_json::from_slice(&fs::read(out.join("selection.json")).unwrap()).unwrap();
    assert_eq!(sel["selected_ids"].as_array().unwrap().len(), 8);
    assert_eq!(sel["selection"]["stage2_clusters"]["k"], 4);
    assert_eq!(sel["planted_selected"].as_array().unwrap().len(), 0);
    assert_eq!(TensorBundle::read(out.join("calib")).unwrap().entries.len(), 8);

    for bad in ["0", "3"] {
        assert_eq!(
            taptq(&["select", "--pool", s(&g.join("pool")), "--n", bad, "--out", s(&out)]),
            EXIT_USAGE
        );
    }
}

#[test]
fn usage_errors() {
    assert_eq!(taptq(&["quantize"]), EXIT_USAGE);
    assert_eq!(taptq(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(taptq(&["--help"]), EXIT_OK);
    let f = Fixture::new();
    assert_eq!(f.quantize("r", &["--bits", "4"]), EXIT_USAGE);
    assert_eq!(f.quantize("r", &["--rank", "17"]), EXIT_USAGE);
}

#[test]
fn missing_calibration_is_not_found() {
    let f = Fixture::new();
    let missing = f.p("nowhere");
    let r = taptq::bundle::TensorBundle::read(&missing).unwrap_err();
    assert!(r.to_string().contains("nowhere"));
    let (net, out) = (f.p("g/net"), f.p("r"));
    assert_eq!(
        taptq(&["quantize", "--net", s(&net), "--calib", s(&missing), "--out", s(&out)]),
        EXIT_DATA
    );
}

#[test]
fn sixteen_bit_run_is_near_lossless() {
    let f = Fixture::new();
    assert_eq!(f.quantize("r", &["--bits", "16,16"]), EXIT_OK);
    let rep = read_report(&f.p("r"));
    for m in rep["pipeline"]["modules"].as_array().unwrap() {
        assert!(m["accumulated_mse"].as_f64().unwrap() < 1e-4, "{m}");
    }
    assert_eq!(taptq(&["verify", "--run", s(&f.p("r"))]), EXIT_OK);
}

#[test]
fn exhaustive_curves_cover_the_grid() {
    let f = Fixture::new();
    assert_eq!(f.quantize("r", &["--method", "exhaustive", "--grid-n", "40"]), EXIT_OK);
    let curves = f.p("r/curves");
    let mut n = 0;
    for e in fs::read_dir(&curves).unwrap() {
        let p = e.unwrap().path();
        if p.file_name().unwrap() == "depth_profile.csv" {
            continue;
        }
        let rows = csv::Reader::from_path(&p).unwrap().records().count();
        assert_eq!(rows, 40, "{}", p.display());
        n += 1;
    }
    assert!(n > 0);
    assert_eq!(taptq(&["verify", "--run", s(&f.p("r"))]), EXIT_OK);
}

#[test]
fn verify_detects_tampered_adapters() {
    let f = Fixture::new();
    assert_eq!(f.quantize("r", &["--tau", "0"]), EXIT_OK);
    let run_dir = f.p("r");
    assert_eq!(taptq(&["verify", "--run", s(&run_dir)]), EXIT_OK);

    let path = run_dir.join("adapters");
    let mut b = TensorBundle::read(&path).unwrap();
    let (_, u) = b.entries.iter_mut().find(|(n, _)| n.ends_with(".u")).unwrap();
    *u = u.scale(1.5);
    b.write(&path).unwrap();
    assert_eq!(taptq(&["verify", "--run", s(&run_dir)]), EXIT_VERIFY);
}

#[test]
fn verify_detects_edited_choice() {
    let f = Fixture::new();
    assert_eq!(f.quantize("r", &["--method", "exhaustive", "--grid-n", "30"]), EXIT_OK);
    let run_dir = f.p("r");
    let mut rep = read_report(&run_dir);
    let t = &mut rep["pipeline"]["modules"][0]["traces"][0]["trace"]["trace"];
    let chosen = t["chosen_index"].as_u64().unwrap();
    t["chosen_index"] = Value::from(if chosen == 0 { 1 } else { chosen - 1 });
    fs::write(run_dir.join(REPORT_FILE), serde_json::to_vec_pretty(&rep).unwrap()).unwrap();
    assert_eq!(taptq(&["verify", "--run", s(&run_dir)]), EXIT_VERIFY);
}

#[test]
fn verify_detects_edited_tre() {
    let f = Fixture::new();
    assert_eq!(f.quantize("r", &[]), EXIT_OK);
    let run_dir = f.p("r");
    let mut rep = read_report(&run_dir);
    let m = &mut rep["pipeline"]["modules"][0];
    m["tre"] = Value::from(m["tre"].as_f64().unwrap() * 2.0);
    fs::write(run_dir.join(REPORT_FILE), serde_json::to_vec_pretty(&rep).unwrap()).unwrap();
    assert_eq!(taptq(&["verify", "--run", s(&run_dir)]), EXIT_VERIFY);
}

#[test]
fn report_formats() {
    let f = Fixture::new();
    assert_eq!(f.quantize("a", &[]), EXIT_OK);
    assert_eq!(f.quantize("b", &["--bits", "8,8"]), EXIT_OK);
    let (a, b) = (f.p("a"), f.p("b"));
    for (fmt, file) in [("md", "r.md"), ("json", "r.json"), ("csv", "r.csv")] {
        let out = f.p(file);
        assert_eq!(
            taptq(&["report", "--run", s(&a), "--run", s(&b), "--format", fmt, "--out", s(&out)]),
            EXIT_OK
        );
    }
    let md = fs::read_to_string(f.p("r.md")).unwrap();
    assert!(md.contains("Active adapters per tau"));
    for tau in ["| 0 |", "| 0.005 |", "| 0.007 |", "| 0.01 |", "| 0.02 |", "| inf |"] {
        assert!(md.contains(tau), "missing row {tau}");
    }
    assert!(md.contains("W8A8") && md.contains("W4A8"));
    let json: Value = serde_json::from_slice(&fs::read(f.p("r.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(json[0]["tau_sweep"].as_array().unwrap().len(), 6);
    let rows = csv::Reader::from_path(f.p("r.csv")).unwrap().records().count();
    assert_eq!(rows, 4);
    assert_eq!(taptq(&["report", "--run", s(&f.p("missing"))]), EXIT_DATA);
}
