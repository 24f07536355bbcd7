mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use common::{e2e_config, e2e_pipeline, fixture};
use figqa_core::gateway::{CallRecord, ModelRole, PromptName};
use figqa_core::jsonl::read_records;
use figqa_core::pipeline::{Pipeline, PipelineError, Stage};
use figqa_core::replay::replay_run;
use figqa_core::verification::{FilterKind, FilterVerdict};

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn golden() -> Vec<u8> {
    bytes(&fixture("e2e").join("expected_retained.jsonl"))
}

fn ledger(out: &Path) -> Vec<CallRecord> {
    read_records(&out.join("mock_ledger.jsonl")).unwrap()
}

/// Filter a verification call belongs to.
fn filter_of(call: &CallRecord) -> Option<FilterKind> {
    match (call.template, call.role) {
        (PromptName::SourceCheck, _) => Some(FilterKind::SourceConsistency),
        (PromptName::VisdepCheck, ModelRole::Text) => Some(FilterKind::VisualDependenceText),
        (PromptName::VisdepCheck, ModelRole::Vision) => Some(FilterKind::VisualDependenceVision),
        (PromptName::VisionAnswer, _) => Some(FilterKind::VisionConsistency),
        _ => None,
    }
}

#[test]
fn full_run_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    assert_eq!(bytes(&p.layout().retained()), golden());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let mut outputs = Vec::new();
    for _ in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let p = e2e_pipeline(dir.path());
        p.run(Stage::All).unwrap();
        p.run(Stage::Evaluate).unwrap();
        let l = p.layout();
        outputs.push(
            [l.retained(), l.dataset(), l.verdicts(), l.candidates(), l.claims(), l.eval_result(), l.funnel_txt()]
                .iter()
                .map(|f| bytes(f))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn separate_stages_equal_end_to_end() {
    let a = tempfile::tempdir().unwrap();
    let pa = e2e_pipeline(a.path());
    pa.run(Stage::All).unwrap();

    let b = tempfile::tempdir().unwrap();
    let pb = e2e_pipeline(b.path());
    for stage in [Stage::Prepare, Stage::Extract, Stage::Generate, Stage::Verify, Stage::Annotate, Stage::Stats] {
        pb.run(stage).unwrap();
    }
    for name in [
        "prepared.jsonl",
        "contexts.jsonl",
        "discards.jsonl",
        "claims.jsonl",
        "candidates.jsonl",
        "verdicts.jsonl",
        "retained.jsonl",
        "dataset.jsonl",
        "funnel.txt",
        "verify.manifest.json",
    ] {
        assert_eq!(bytes(&a.path().join("out").join(name)), bytes(&b.path().join("out").join(name)), "{name}");
    }
}

#[test]
fn rerunning_a_finished_stage_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    let before = p.mock().unwrap().calls().len();
    p.run(Stage::Verify).unwrap();
    p.run(Stage::Generate).unwrap();
    assert_eq!(p.mock().unwrap().calls().len(), before);
    assert_eq!(bytes(&p.layout().retained()), golden());
}

#[test]
fn resume_after_crash_at_every_point() {
    let total = {
        let dir = tempfile::tempdir().unwrap();
        let p = e2e_pipeline(dir.path());
        p.run(Stage::All).unwrap();
        p.mock().unwrap().calls().len()
    };
    for crash_at in 0..total {
        let dir = tempfile::tempdir().unwrap();
        {
            let p = e2e_pipeline(dir.path());
            p.mock().unwrap().crash_after(Some(crash_at));
            assert!(p.run(Stage::All).is_err(), "crash at {crash_at} went unnoticed");
        }
        let p = Pipeline::with_mock_script(e2e_config(dir.path()), &dir.path().join("mock.json")).unwrap();
        p.run(Stage::All).unwrap();
        assert_eq!(bytes(&p.layout().retained()), golden(), "crash at {crash_at}");

        let calls = ledger(p.layout().root());
        assert_eq!(calls.len(), total, "crash at {crash_at}");
        let mut seen = HashSet::new();
        for c in &calls {
            assert!(seen.insert((c.role, c.digest.clone())), "crash at {crash_at}: repeated call {c:?}");
        }
    }
}

#[test]
fn no_calls_after_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    let verdicts: Vec<FilterVerdict> = read_records(&p.layout().verdicts()).unwrap();
    let mut rejected_at: BTreeMap<String, FilterKind> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| !v.passed) {
        rejected_at.insert(v.candidate_key.clone(), v.filter);
    }
    assert_eq!(rejected_at.len(), 3);
    for call in ledger(p.layout().root()) {
        let (Some(filter), Some(stop)) = (filter_of(&call), rejected_at.get(&call.item_key)) else {
            continue;
        };
        assert!(filter <= *stop, "{call:?} after rejection at {stop}");
    }
}

#[test]
fn replay_agrees_with_retained_set() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    let report = replay_run(p.layout().root()).unwrap();
    assert!(report.violations.is_empty(), "{report}");
    assert_eq!(report.expected_retained, 2);
    assert_eq!(report.candidates, 5);
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    let path = p.layout().verdicts();
    let text = std::fs::read_to_string(&path).unwrap();
    let flipped = text.replacen("\"passed\":true", "\"passed\":false", 1);
    std::fs::write(&path, flipped).unwrap();
    let report = replay_run(p.layout().root()).unwrap();
    assert!(!report.violations.is_empty());
}

#[test]
fn stats_funnel_matches_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    let table = std::fs::read_to_string(p.layout().funnel_txt()).unwrap();
    let counts: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| {
            let cells: Vec<&str> = l.split_whitespace().collect();
            cells[cells.len() - 2]
        })
        .collect();
    assert_eq!(counts, ["3", "6", "5", "3", "2"]);
    assert!(table.contains("33.3%"));
}

#[test]
fn evaluation_report_on_mock() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    p.run(Stage::All).unwrap();
    p.run(Stage::Evaluate).unwrap();
    let result: serde_json::Value = serde_json::from_slice(&bytes(&p.layout().eval_result())).unwrap();
    assert_eq!(result["overall"]["correct"], 1);
    assert_eq!(result["overall"]["total"], 2);
}

#[test]
fn missing_inputs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = e2e_pipeline(dir.path());
    for stage in [Stage::Extract, Stage::Generate, Stage::Verify, Stage::Annotate, Stage::Evaluate, Stage::Stats] {
        let err = p.run(stage).unwrap_err();
        assert!(matches!(err, PipelineError::Input(_)), "{stage:?}: {err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn target_retained_stops_after_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = e2e_config(dir.path());
    cfg.target_retained = Some(1);
    let p = Pipeline::with_mock_script(cfg, &dir.path().join("mock.json")).unwrap();
    p.run(Stage::All).unwrap();
    let verify: serde_json::Value = serde_json::from_slice(&bytes(&p.layout().manifest(Stage::Verify))).unwrap();
    assert_eq!(verify["batch_limit"], 0);
    assert!(verify["counts"]["retained"].as_u64().unwrap() >= 1);
}
