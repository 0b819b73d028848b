use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neuron_lens::{
    netdissect, quantile_interval, ActivationArchive, ConceptStore, ExplanationRecord, RandomCorpusSpec,
};
use serde_json::Value;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        RandomCorpusSpec {
            n_samples: 16,
            height: 8,
            width: 8,
            n_objects: 6,
            n_attributes: 3,
            n_neurons: 3,
            n_cls: 5,
            planted_per_neuron: 2,
            max_plant_arity: 2,
            background_rate: 0.1,
            dropout: 0.05,
            seed: 21,
        }
        .generate()
        .unwrap()
        .write(dir.path())
        .unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn acts(&self) -> PathBuf {
        self.path("activations.nlaa")
    }

    fn concepts(&self) -> PathBuf {
        self.path("concepts.nlcm")
    }
}

fn run(args: &[&dyn AsRefOs]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_neuron-lens"));
    for a in args {
        cmd.arg(a.os());
    }
    cmd.env_remove("NEURON_LENS_THREADS");
    cmd.output().unwrap()
}

trait AsRefOs {
    fn os(&self) -> &std::ffi::OsStr;
}

impl AsRefOs for &str {
    fn os(&self) -> &std::ffi::OsStr {
        self.as_ref()
    }
}

impl AsRefOs for PathBuf {
    fn os(&self) -> &std::ffi::OsStr {
        self.as_os_str()
    }
}

fn json_lines(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn records(path: &Path) -> Vec<ExplanationRecord> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn cluster_all_neurons() {
    let fx = Fixture::new();
    let out = run(&[&"cluster", &"--activations", &fx.acts(), &"--all-neurons", &"--clusters", &"5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["neuron"], i);
        assert_eq!(l["intervals"].as_array().unwrap().len(), 5);
    }
    let again = run(&[&"cluster", &"--activations", &fx.acts(), &"--all-neurons", &"--clusters", &"5"]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn cluster_rejects_zero_clusters() {
    let fx = Fixture::new();
    let out = run(&[&"cluster", &"--activations", &fx.acts(), &"--neuron", &"0", &"--clusters", &"0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[&"cluster", &"--activations", &fx.acts(), &"--neuron", &"9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_file_is_io_error() {
    let fx = Fixture::new();
    let out = run(&[&"cluster", &"--activations", &fx.path("nope.nlaa"), &"--all-neurons"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&[&"explain", &"--activations", &fx.acts(), &"--concepts", &fx.path("nope.nlcm")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_archive_is_validation_error() {
    let fx = Fixture::new();
    std::fs::write(fx.path("bad.nlaa"), b"NOPE!garbage").unwrap();
    let out = run(&[&"cluster", &"--activations", &fx.path("bad.nlaa"), &"--all-neurons"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn explain_defaults_and_manifest() {
    let fx = Fixture::new();
    let out_path = fx.path("out.jsonl");
    let out = run(&[&"explain", &"--activations", &fx.acts(), &"--concepts", &fx.concepts(), &"--output", &out_path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&out_path);
    assert_eq!(recs.len(), 15);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.neuron, i / 5);
        assert_eq!(r.cluster_index, i % 5 + 1);
        assert!(r.wall_time_ms.is_none());
        assert!(r.labmask.is_none());
    }

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("out.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "explain");
    assert_eq!(manifest["records"], 15);
    assert_eq!(manifest["config"]["beam_width"], 10);
    assert_eq!(manifest["config"]["heuristic"], "mmesh");
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn manifest_goes_to_stderr_without_output() {
    let fx = Fixture::new();
    let out = run(&[&"explain", &"--activations", &fx.acts(), &"--concepts", &fx.concepts(), &"--neurons", &"1"]);
    assert!(out.status.success());
    assert_eq!(json_lines(&out.stdout).len(), 5);
    let manifest: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(manifest["config"]["neurons"], "1");
}

#[test]
fn timings_flag_fills_wall_time() {
    let fx = Fixture::new();
    let out = run(&[
        &"explain",
        &"--activations",
        &fx.acts(),
        &"--concepts",
        &fx.concepts(),
        &"--neurons",
        &"0",
        &"--timings",
        &"--manifest",
        &fx.path("m.json"),
    ]);
    assert!(out.status.success());
    let recs: Vec<ExplanationRecord> =
        json_lines(&out.stdout).into_iter().map(|v| serde_json::from_value(v).unwrap()).collect();
    assert!(recs.iter().all(|r| r.wall_time_ms.is_some()));
}

#[test]
fn legacy_mode_is_netdissect() {
    let fx = Fixture::new();
    let out = run(&[
        &"explain",
        &"--activations",
        &fx.acts(),
        &"--concepts",
        &fx.concepts(),
        &"--legacy-quantile",
        &"0.005",
        &"--max-arity",
        &"1",
        &"--manifest",
        &fx.path("m.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs: Vec<ExplanationRecord> =
        json_lines(&out.stdout).into_iter().map(|v| serde_json::from_value(v).unwrap()).collect();
    assert_eq!(recs.len(), 3);
    let archive = ActivationArchive::load(fx.acts()).unwrap();
    let store = ConceptStore::load(fx.concepts()).unwrap();
    for r in &recs {
        assert_eq!(r.cluster_index, 0);
        assert!(r.interval_hi.is_none());
        let iv = quantile_interval(&archive, r.neuron, 0.005).unwrap();
        assert_eq!(r.interval_lo, iv.lo);
        let nd = netdissect(&archive, &store, r.neuron, iv).unwrap();
        assert_eq!(r.formula, store.labels()[nd.best]);
        assert_eq!(r.iou, nd.scores[nd.best]);
        assert_eq!(r.visited_labels, store.n_labels() as u64);
    }
}

#[test]
fn heuristics_agree_on_formulas() {
    let fx = Fixture::new();
    let mut by_heuristic = Vec::new();
    for h in ["none", "mmesh", "cfh", "areas"] {
        let out = run(&[
            &"explain",
            &"--activations",
            &fx.acts(),
            &"--concepts",
            &fx.concepts(),
            &"--heuristic",
            &h,
            &"--manifest",
            &fx.path("m.json"),
        ]);
        assert!(out.status.success());
        let recs: Vec<ExplanationRecord> =
            json_lines(&out.stdout).into_iter().map(|v| serde_json::from_value(v).unwrap()).collect();
        by_heuristic.push(recs);
    }
    let none = &by_heuristic[0];
    for other in &by_heuristic[1..] {
        for (a, b) in none.iter().zip(other) {
            assert_eq!(a.formula, b.formula);
            assert_eq!(a.iou, b.iou);
            assert!(b.visited_labels <= a.visited_labels);
        }
    }
    let total = |rs: &[ExplanationRecord]| rs.iter().map(|r| r.visited_labels).sum::<u64>();
    assert!(total(&by_heuristic[1]) < total(none));
}

#[test]
fn env_var_sets_threads_and_zero_is_rejected() {
    let fx = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_neuron-lens"))
        .args(["explain", "--neurons", "0", "--activations"])
        .arg(fx.acts())
        .arg("--concepts")
        .arg(fx.concepts())
        .env("NEURON_LENS_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(manifest["threads"], 3);

    let out = run(&[&"explain", &"--activations", &fx.acts(), &"--concepts", &fx.concepts(), &"--threads", &"0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[&"explain", &"--activations", &fx.acts(), &"--concepts", &fx.concepts(), &"--neurons", &"7"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[&"explain", &"--activations", &fx.acts(), &"--concepts", &fx.concepts(), &"--heuristic", &"fast"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn metrics_recompute_records() {
    let fx = Fixture::new();
    let rec_path = fx.path("rec.jsonl");
    let out = run(&[
        &"explain",
        &"--activations",
        &fx.acts(),
        &"--concepts",
        &fx.concepts(),
        &"--objective",
        &"detacc",
        &"--output",
        &rec_path,
    ]);
    assert!(out.status.success());
    let out = run(&[&"metrics", &"--record", &rec_path, &"--activations", &fx.acts(), &"--concepts", &fx.concepts()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let suites = json_lines(&out.stdout);
    let recs = records(&rec_path);
    assert_eq!(suites.len(), recs.len());
    for (s, r) in suites.iter().zip(&recs) {
        assert_eq!(s["iou"].as_f64().unwrap(), r.iou);
        assert_eq!(s["detacc"].as_f64().unwrap(), r.detacc);
        assert_eq!(s["samplecov"].as_f64().unwrap(), r.samplecov);
        assert_eq!(s["actcov"].as_f64().unwrap(), r.actcov);
        assert_eq!(s["explcov"].as_f64().unwrap(), r.explcov);
        assert!(s["labmask"].is_null());
    }

    let out = run(&[&"metrics", &"--record", &rec_path, &"--activations", &fx.acts(), &"--concepts", &fx.path("gone")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn labmask_from_masked_directory() {
    let fx = Fixture::new();
    let rec_path = fx.path("rec.jsonl");
    let out = run(&[
        &"explain",
        &"--activations",
        &fx.acts(),
        &"--concepts",
        &fx.concepts(),
        &"--neurons",
        &"0",
        &"--output",
        &rec_path,
    ]);
    assert!(out.status.success());
    let recs = records(&rec_path);

    // masking with a no-op for the first record's formula: self-similarity
    let masked_dir = fx.path("masked");
    std::fs::create_dir(&masked_dir).unwrap();
    let a = ActivationArchive::load(fx.acts()).unwrap();
    let same = ActivationArchive::new(
        a.n_samples(),
        a.n_neurons(),
        a.height(),
        a.width(),
        recs[0].formula.clone(),
        a.data().to_vec(),
    )
    .unwrap();
    same.write(masked_dir.join("first.nlaa")).unwrap();

    let out = run(&[
        &"metrics",
        &"--record",
        &rec_path,
        &"--activations",
        &fx.acts(),
        &"--concepts",
        &fx.concepts(),
        &"--masked-activations",
        &masked_dir,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let suites = json_lines(&out.stdout);
    assert!((suites[0]["labmask"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    for (s, r) in suites.iter().zip(&recs).skip(1) {
        if r.formula != recs[0].formula {
            assert!(s["labmask"].is_null());
        }
    }

    let out = run(&[
        &"explain",
        &"--activations",
        &fx.acts(),
        &"--concepts",
        &fx.concepts(),
        &"--neurons",
        &"0",
        &"--masked-activations",
        &masked_dir,
        &"--output",
        &fx.path("with_mask.jsonl"),
    ]);
    assert!(out.status.success());
    assert!((records(&fx.path("with_mask.jsonl"))[0].labmask.unwrap() - 1.0).abs() < 1e-12);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("with_mask.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
}
