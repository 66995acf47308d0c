use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn hypstruct(dir: &Path, args: &[&str], config: Option<Value>) -> Output {
    hypstruct_env(dir, args, config, &[])
}

fn hypstruct_env(dir: &Path, args: &[&str], config: Option<Value>, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hypstruct"));
    cmd.current_dir(dir).args(args);
    if let Some(cfg) = config {
        let name = format!("{}.config.json", args[0]);
        fs::write(dir.join(&name), cfg.to_string()).unwrap();
        cmd.arg("--config").arg(name);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path:?}: {e}"))).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn quick_embed() -> Value {
    json!({ "budget": { "restarts": 2, "steps": 1500 } })
}

fn quick_train(method: &str, epochs: usize) -> Value {
    json!({ "method": method, "train": { "epochs": epochs } })
}

#[test]
fn embed_tree_reports_both_modes_and_poincare_wins() {
    let dir = TempDir::new().unwrap();
    let out = hypstruct(dir.path(), &["embed-tree", "--out", "o"], Some(quick_embed()));
    assert_ok(&out);
    let report = read_json(dir.path().join("o/embed_tree.json"));
    let hyp = report["cpcc"]["poincare"].as_f64().unwrap();
    let l2 = report["cpcc"]["l2"].as_f64().unwrap();
    assert!(hyp >= l2, "poincare {hyp} < l2 {l2}");
    assert!(report["version"].as_str().unwrap().starts_with("hypstruct "));
    assert_eq!(report["config"]["budget"]["restarts"], 2);
    for f in ["pairs_l2.csv", "pairs_poincare.csv", "scatter_l2.svg", "scatter_poincare.svg", "disk_poincare.svg"] {
        assert!(dir.path().join("o").join(f).exists(), "{f}");
    }
    let pairs = fs::read_to_string(dir.path().join("o/pairs_l2.csv")).unwrap();
    assert_eq!(pairs.lines().next(), Some("i,j,name_i,name_j,d_tree,d_embed"));
    assert_eq!(pairs.lines().count(), 1 + 13 * 12 / 2);
}

#[test]
fn embed_tree_is_deterministic_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    assert_ok(&hypstruct(dir.path(), &["embed-tree", "--out", "a", "--seed", "5"], Some(quick_embed())));
    assert_ok(&hypstruct_env(
        dir.path(),
        &["embed-tree", "--out", "b", "--seed", "5"],
        Some(quick_embed()),
        &[("HYPSTRUCT_THREADS", "1")],
    ));
    for f in ["embed_tree.json", "pairs_l2.csv", "pairs_poincare.csv", "scatter_poincare.svg", "disk_poincare.svg"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    assert_eq!(read_json(dir.path().join("a/config.json"))["config"]["seed"], 5);
}

#[test]
fn embed_tree_rejects_two_vertex_tree() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("tiny.json"), r#"{"name":"root","children":[{"name":"a"}]}"#).unwrap();
    let out = hypstruct(dir.path(), &["embed-tree", "--out", "o"], Some(json!({ "tree": "tiny.json" })));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vertices"));
}

#[test]
fn malformed_config_exits_one() {
    let dir = TempDir::new().unwrap();
    let out = hypstruct(dir.path(), &["spectra", "--out", "o"], Some(json!({ "no_such_field": 1 })));
    assert_eq!(out.status.code(), Some(1));
    let out = hypstruct(dir.path(), &["spectra", "--out", "o", "--config", "missing.json"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn hypstructure_training_beats_flat_on_train_cpcc() {
    let dir = TempDir::new().unwrap();
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "flat"], Some(quick_train("flat", 60))));
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "hyp"], Some(quick_train("hypstructure", 60))));
    let flat = read_json(dir.path().join("flat/train_summary.json"));
    let hyp = read_json(dir.path().join("hyp/train_summary.json"));
    let (f, h) = (
        flat["final_train_cpcc"].as_f64().unwrap(),
        hyp["final_train_cpcc"].as_f64().unwrap(),
    );
    assert!(h > f, "hyp {h} <= flat {f}");
    assert!(hyp["final_train_cpcc"].as_f64().unwrap() > hyp["initial"]["cpcc"].as_f64().unwrap());
    assert_eq!(hyp["config"]["objective"]["alpha"], 1.0);
    assert_eq!(flat["config"]["objective"]["alpha"], 0.0);
    let history = fs::read_to_string(dir.path().join("hyp/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 61);
}

#[test]
fn zero_weight_config_matches_flat_method() {
    let dir = TempDir::new().unwrap();
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "flat"], Some(quick_train("flat", 5))));
    let custom = json!({
        "method": "hypstructure",
        "objective": { "alpha": 0.0, "beta": 0.0 },
        "train": { "epochs": 5 },
    });
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "custom"], Some(custom)));
    let a = read_json(dir.path().join("flat/checkpoint.json"));
    let b = read_json(dir.path().join("custom/checkpoint.json"));
    assert_eq!(a["params"], b["params"]);
    assert_eq!(
        fs::read(dir.path().join("flat/history.csv")).unwrap(),
        fs::read(dir.path().join("custom/history.csv")).unwrap()
    );
    assert_eq!(a["config_echo"]["config"]["objective"], b["config_echo"]["config"]["objective"]);
}

#[test]
fn missing_dataset_exits_one() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({ "data": { "kind": "csv", "train": "nowhere.csv" } });
    let out = hypstruct(dir.path(), &["train", "--out", "o"], Some(cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
}

#[test]
fn divergence_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "method": "flat",
        "train": { "epochs": 3, "lr0": 1e200, "momentum": 0.0, "schedule": "constant" },
    });
    let out = hypstruct(dir.path(), &["train", "--out", "o"], Some(cfg));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Three classes at the corners of an isoceles triangle matching the tree
/// metric of `root -> {g -> {a1, a2}, b1}`, with an identity encoder.
fn write_exact_fixture(dir: &Path, feature_rows: &[(&str, [f64; 2])]) {
    fs::write(
        dir.join("tree.json"),
        r#"{"name":"root","children":[{"name":"g","children":[{"name":"a1"},{"name":"a2"}]},{"name":"b1"}]}"#,
    )
    .unwrap();
    let mut csv = String::from("label,f0,f1\n");
    for (label, x) in feature_rows {
        csv.push_str(&format!("{label},{},{}\n", x[0], x[1]));
    }
    fs::write(dir.join("data.csv"), csv).unwrap();
    let ck = json!({
        "encoder": { "kind": "linear", "input_dim": 2, "hidden_dim": 1, "output_dim": 2, "seed": 0 },
        "head": { "kind": "classifier", "classes": 3 },
        "params": {
            "enc.w": [1.0, 0.0, 0.0, 1.0],
            "enc.b": [0.0, 0.0],
            "head.w": vec![0.0; 6],
            "head.b": vec![0.0; 3],
        },
        "config_echo": {},
    });
    fs::write(dir.join("identity.json"), ck.to_string()).unwrap();
}

fn eval_config() -> Value {
    json!({
        "tree": "tree.json",
        "checkpoint": "identity.json",
        "data": { "kind": "csv", "train": "data.csv" },
        "knn_k": 1,
    })
}

#[test]
fn eval_on_exact_tree_configuration() {
    let dir = TempDir::new().unwrap();
    let h = 8f64.sqrt();
    let rows: Vec<(&str, [f64; 2])> = (0..4)
        .flat_map(|_| [("a1", [-1.0, 0.0]), ("a2", [1.0, 0.0]), ("b1", [0.0, h])])
        .collect();
    write_exact_fixture(dir.path(), &rows);
    let out = hypstruct(dir.path(), &["eval", "--out", "o"], Some(eval_config()));
    assert_ok(&out);
    let report = read_json(dir.path().join("o/eval.json"));
    for key in ["delta_rel", "test_cpcc", "knn_fine_accuracy", "knn_coarse_accuracy"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert!(report["delta_rel"].as_f64().unwrap().abs() <= 1e-12);
    assert!((report["test_cpcc"].as_f64().unwrap() - 1.0).abs() <= 1e-12);
    assert_eq!(report["knn_fine_accuracy"], 1.0);
    assert_eq!(report["reports"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_random_features_are_less_tree_like() {
    let dir = TempDir::new().unwrap();
    // Deterministic scatter that is far from a tree metric.
    let labels = ["a1", "a2", "b1"];
    let rows: Vec<(&str, [f64; 2])> = (0..60)
        .map(|i| {
            let t = i as f64 * 2.399963;
            let r = (i as f64 + 1.0).sqrt();
            (labels[i % 3], [r * t.cos(), r * t.sin()])
        })
        .collect();
    write_exact_fixture(dir.path(), &rows);
    assert_ok(&hypstruct(dir.path(), &["eval", "--out", "o"], Some(eval_config())));
    let report = read_json(dir.path().join("o/eval.json"));
    assert!(report["delta_rel"].as_f64().unwrap() > 0.05, "{}", report["delta_rel"]);
}

#[test]
fn eval_shape_mismatch_exits_one() {
    let dir = TempDir::new().unwrap();
    write_exact_fixture(dir.path(), &[("a1", [0.0, 0.0])]);
    // Default synthetic data is 16-dimensional; the checkpoint expects 2.
    let cfg = json!({ "checkpoint": "identity.json" });
    let out = hypstruct(dir.path(), &["eval", "--out", "o"], Some(cfg));
    assert_eq!(out.status.code(), Some(1));
}

fn spectra(dir: &Path, input: Value) -> Value {
    let out = hypstruct(dir, &["spectra", "--out", "o"], Some(json!({ "input": input })));
    assert_ok(&out);
    read_json(dir.join("o/spectra.json"))
}

#[test]
fn spectra_balanced_closed_form_agrees() {
    let dir = TempDir::new().unwrap();
    let r = spectra(dir.path(), json!({ "kind": "balanced", "level_counts": [1, 2, 4], "r": [0.8, 0.2] }));
    assert!(r["max_abs_discrepancy"].as_f64().unwrap() <= 1e-8);
    assert_eq!(r["dominant_gap"], 2);
    let csv = fs::read_to_string(dir.path().join("o/spectrum_closed_form.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn spectra_identity_has_no_transitions() {
    let dir = TempDir::new().unwrap();
    let r = spectra(dir.path(), json!({ "kind": "balanced", "level_counts": [1, 2, 4], "r": [0.0, 0.0] }));
    assert!(r["transitions"].as_array().unwrap().is_empty());
    assert!(r["dominant_gap"].is_null());
}

#[test]
fn spectra_coarse_count_gap() {
    let dir = TempDir::new().unwrap();
    let r = spectra(dir.path(), json!({ "kind": "balanced", "level_counts": [1, 20, 100], "r": [0.9, 0.1] }));
    assert_eq!(r["dominant_gap"], 20);
}

#[test]
fn spectra_rejects_non_symmetric_matrix() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("m.csv"), "1,2\n0,1\n").unwrap();
    let cfg = json!({ "input": { "kind": "matrix", "path": "m.csv" } });
    let out = hypstruct(dir.path(), &["spectra", "--out", "o"], Some(cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("symmetric"));
}

#[test]
fn oodsim_controls_and_borda() {
    let dir = TempDir::new().unwrap();
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "flat"], Some(quick_train("flat", 20))));
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "hyp"], Some(quick_train("hypstructure", 20))));
    let cfg = json!({
        "checkpoints": [
            { "name": "flat", "path": "flat/checkpoint.json" },
            { "name": "hyp", "path": "hyp/checkpoint.json" },
        ],
        "ood": [
            { "name": "same", "source": { "kind": "id_eval" } },
            { "name": "far", "source": { "kind": "synthetic", "n": 300, "distance": 30.0, "sigma": 1.0 } },
        ],
    });
    assert_ok(&hypstruct(dir.path(), &["oodsim", "--out", "o"], Some(cfg)));
    let r = read_json(dir.path().join("o/oodsim.json"));
    for m in r["methods"].as_array().unwrap() {
        let same = m["auroc"]["same"].as_f64().unwrap();
        let far = m["auroc"]["far"].as_f64().unwrap();
        assert!((same - 0.5).abs() <= 0.05, "{same}");
        assert!(far >= 0.99, "{far}");
    }
    let borda: f64 = r["borda"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    // Two methods, two datasets: one point per dataset is handed out.
    assert!((borda - 2.0).abs() < 1e-12);
    let hist = fs::read_to_string(dir.path().join("o/histograms.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 2 * 2 * 20);
}

#[test]
fn oodsim_empty_ood_set_exits_one() {
    let dir = TempDir::new().unwrap();
    assert_ok(&hypstruct(dir.path(), &["train", "--out", "m"], Some(quick_train("flat", 2))));
    fs::write(dir.path().join("empty.csv"), "f0,f1\n").unwrap();
    let cfg = json!({
        "checkpoints": [{ "name": "m", "path": "m/checkpoint.json" }],
        "ood": [{ "name": "empty", "source": { "kind": "csv", "path": "empty.csv" } }],
    });
    let out = hypstruct(dir.path(), &["oodsim", "--out", "o"], Some(cfg));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}
