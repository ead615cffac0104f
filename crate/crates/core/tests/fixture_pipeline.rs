use std::fs;

use webcp::evaluation::EvalReport;
use webcp::pipeline::{run_pipeline, PipelineConfig, Stage};
use webcp::synth::{write_fixture, FixtureSpec};

#[test]
fn fixture_runs_end_to_end_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let summary = write_fixture(&FixtureSpec::default(), dir.path()).unwrap();
    assert_eq!(summary.mined_examples, 3 * 53);

    let cfg = PipelineConfig::load(&dir.path().join("pipeline.json")).unwrap();
    let first = run_pipeline(&cfg, &Stage::ALL).unwrap();
    let report = fs::read_to_string(dir.path().join("run/report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&report).unwrap();
    assert!(report.rows.iter().any(|r| r.method == "oracle"));

    let second = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(first.artifacts, second.artifacts);
    assert_eq!(first.intermediates, second.intermediates);
}
