#[path = "../../core/tests/common/server.rs"]
mod server;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use webcp::conformal::ConformalThreshold;
use webcp::pipeline::RunManifest;

fn webcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_webcp"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    ok(&webcp(&["synth", "--out", s(&fx)]));
    (dir, fx)
}

#[test]
fn run_executes_all_stages_and_is_reproducible() {
    let (_dir, fx) = fixture();
    let cfg = fx.join("pipeline.json");
    ok(&webcp(&["run", "--config", s(&cfg)]));
    let read = || -> RunManifest { serde_json::from_str(&fs::read_to_string(fx.join("run/run_manifest.json")).unwrap()).unwrap() };
    let first = read();
    assert_eq!(first.artifacts.len(), 6);
    ok(&webcp(&["run", "--config", s(&cfg)]));
    assert_eq!(read(), first);
}

#[test]
fn run_flags_override_config() {
    let (dir, fx) = fixture();
    let out = dir.path().join("elsewhere");
    ok(&webcp(&[
        "run",
        "--config",
        s(&fx.join("pipeline.json")),
        "--alpha",
        "0.2",
        "--mc-samples",
        "7",
        "--method",
        "standard",
        "--output-dir",
        s(&out),
    ]));
    let t = ConformalThreshold::read(&out.join("threshold.json")).unwrap();
    assert_eq!(t.alpha, 0.2);
    assert_eq!(t.method, webcp::Method::Standard);
    assert!(t.mc_samples.is_none());
}

#[test]
fn missing_inputs_are_stage_errors_naming_the_path() {
    let (_dir, fx) = fixture();
    let out = webcp(&["run", "--config", s(&fx.join("pipeline.json")), "--stages", "calibrate"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("plausibilities.jsonl"), "{err}");
}

#[test]
fn config_errors_exit_2_and_list_every_violation() {
    let (_dir, fx) = fixture();
    let path = fx.join("pipeline.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["alpha"] = 1.5.into();
    cfg["mc_samples"] = 0.into();
    cfg["per_class"] = 0.into();
    fs::write(&path, cfg.to_string()).unwrap();
    let out = webcp(&["run", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["alpha", "mc_samples", "per_class"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
    assert_eq!(webcp(&["run", "--config", s(&path), "--stages", "bogus"]).status.code(), Some(2));
    assert_eq!(webcp(&["calibrate", "--scores", "x"]).status.code(), Some(2));
}

#[test]
fn stage_commands_compose() {
    let (dir, fx) = fixture();
    let d = dir.path();
    let corpus = d.join("corpus");
    ok(&webcp(&[
        "mine",
        "--classes",
        s(&fx.join("classes.json")),
        "--per-class",
        "53",
        "--provider",
        s(&fx.join("web")),
        "--out",
        s(&corpus),
        "--task-name",
        "synthetic",
    ]));
    let emb = d.join("emb");
    for store in ["sentences", "queries", "content_images", "content_prompts", "classifier_images", "classifier_labels"] {
        let dump = fx.join(format!("embedding_dumps/{store}.json"));
        let out = emb.join(format!("{store}.wcpe"));
        ok(&webcp(&["embed-import", s(&dump), "--out", s(&out)]));
        let check = webcp(&["embed-check", s(&out)]);
        ok(&check);
        let summary: serde_json::Value = serde_json::from_slice(&check.stdout).unwrap();
        assert!(summary["count"].as_u64().unwrap() > 0);
    }
    assert_eq!(
        webcp(&["embed-check", s(&emb.join("queries.wcpe")), "--expect-dim", "999"]).status.code(),
        Some(3)
    );

    let plaus = d.join("p.jsonl");
    ok(&webcp(&[
        "plausibility",
        "--corpus",
        s(&corpus),
        "--embeddings",
        s(&emb),
        "--pseudo-map",
        s(&fx.join("pseudo_map.json")),
        "--out",
        s(&plaus),
    ]));
    let scores = d.join("scores.jsonl");
    ok(&webcp(&[
        "score",
        "--images",
        s(&emb.join("classifier_images.wcpe")),
        "--labels",
        s(&emb.join("classifier_labels.wcpe")),
        "--classes",
        s(&fx.join("classes.json")),
        "--out",
        s(&scores),
    ]));
    let thr = d.join("t.json");
    let base = ["--plausibilities", s(&plaus), "--scores", s(&scores), "--out", s(&thr)];
    ok(&webcp(&[&["calibrate", "--seed", "7", "--mc-samples", "50"], &base[..]].concat()));
    let webcp_t = ConformalThreshold::read(&thr).unwrap();
    assert_eq!(webcp_t.iteration_sizes.len(), 50);
    ok(&webcp(&[&["calibrate", "--method", "standard"], &base[..]].concat()));
    assert!(ConformalThreshold::read(&thr).unwrap().iteration_sizes.is_empty());
    ok(&webcp(&[
        "calibrate",
        "--method",
        "standard",
        "--labels",
        s(&fx.join("labels/oracle.jsonl")),
        "--scores",
        s(&scores),
        "--out",
        s(&thr),
    ]));
    assert_eq!(
        webcp(&[&["calibrate", "--alpha", "0"], &base[..]].concat()).status.code(),
        Some(2)
    );

    let sets = d.join("sets.jsonl");
    ok(&webcp(&["predict", "--scores", s(&scores), "--threshold", s(&thr), "--out", s(&sets)]));
    assert!(!fs::read_to_string(&sets).unwrap().is_empty());

    let eval = d.join("eval.json");
    fs::write(
        &eval,
        serde_json::json!({
            "plausibilities": "p.jsonl",
            "scores": "scores.jsonl",
            "test_labels": s(&fx.join("labels/test.jsonl")),
            "oracle_labels": s(&fx.join("labels/oracle.jsonl")),
            "benchmark": {"alphas": [0.1, 0.2], "mc_samples": 20}
        })
        .to_string(),
    )
    .unwrap();
    let report = d.join("report.csv");
    ok(&webcp(&["evaluate", "--config", s(&eval), "--out", s(&report)]));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(d.join("report.json").is_file());

    let requests = d.join("requests");
    let cfg_path = fx.join("pipeline.json");
    ok(&webcp(&["run", "--config", s(&cfg_path), "--stages", "mine"]));
    ok(&webcp(&["embed-requests", "--config", s(&cfg_path), "--out", s(&requests)]));
    assert_eq!(fs::read_dir(&requests).unwrap().count(), 6);
}

#[test]
fn synthetic_evaluation_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let eval = dir.path().join("eval.json");
    fs::write(
        &eval,
        r#"{"synthetic": {"num_classes": 4, "dim": 16, "n_calib": 60, "n_test": 100},
            "seeds": [1, 2], "benchmark": {"alphas": [0.2], "mc_samples": 10}}"#,
    )
    .unwrap();
    let report = dir.path().join("r.csv");
    ok(&webcp(&["evaluate", "--config", s(&eval), "--out", s(&report)]));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("method,alpha,calib_coverage,calib_efficiency,test_coverage,test_efficiency,delta_cov"));
    assert_eq!(text.lines().count(), 4);

    fs::write(&eval, r#"{"seeds": [1]}"#).unwrap();
    assert_eq!(webcp(&["evaluate", "--config", s(&eval), "--out", s(&report)]).status.code(), Some(2));
}

#[test]
fn embed_import_from_service() {
    let srv = server::serve(vec![("/embed", vec![(200, r#"{"dim":2,"vectors":{"a":[1.0,0.0]}}"#.into())])]);
    let dir = tempfile::tempdir().unwrap();
    let req = dir.path().join("req.json");
    fs::write(&req, r#"{"kind":"text","items":[{"id":"a","payload":"hello"}]}"#).unwrap();
    let out = dir.path().join("a.wcpe");
    ok(&webcp(&[
        "embed-import",
        "--service",
        &format!("{}/embed", srv.base),
        "--request",
        s(&req),
        "--out",
        s(&out),
    ]));
    assert_eq!(webcp::load_embeddings(&out).unwrap().len(), 1);
}

#[test]
fn logs_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_webcp"))
        .args(["synth", "--out", s(&dir.path().join("fx"))])
        .env_remove("RUST_LOG")
        .output()
        .unwrap();
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap();
    let event: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(event["level"], "info");
    assert!(event["pages"].as_u64().unwrap() > 0);
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                if path.file_name().is_some_and(|n| n != "run") {
                    stack.push(path);
                }
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn bundled_fixture_matches_synth_output() {
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic");
    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("fx");
    ok(&webcp(&["synth", "--spec", s(&bundled.join("synth_spec.json")), "--out", s(&fresh)]));
    let (a, b) = (files_under(&bundled), files_under(&fresh));
    let names = |v: &[(PathBuf, Vec<u8>)]| v.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    for ((path, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{} differs from a fresh synth run", path.display());
    }
}
