mod common;

use std::collections::BTreeMap;

use common::{expected, run_extraction_corpus, PrepFailure};
use figqa_core::figure::{FigureContext, FigureDiscard};

#[test]
fn contexts_match_golden() {
    let run = run_extraction_corpus();
    let want: Vec<FigureContext> = expected("expected_contexts.jsonl");
    assert_eq!(run.contexts.len(), want.len());
    for (got, want) in run.contexts.iter().zip(&want) {
        assert_eq!(got, want);
    }
}

#[test]
fn discards_match_golden() {
    let run = run_extraction_corpus();
    let want: Vec<FigureDiscard> = expected("expected_discards.jsonl");
    assert_eq!(run.discards, want);
}

#[test]
fn failed_papers_match_golden() {
    let run = run_extraction_corpus();
    let want: Vec<PrepFailure> = expected("expected_failures.jsonl");
    assert_eq!(run.failures, want);
}

#[test]
fn every_figure_is_accounted_for() {
    let run = run_extraction_corpus();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &run.contexts {
        *seen.entry(&c.arxiv_id).or_default() += 1;
    }
    for d in &run.discards {
        *seen.entry(&d.arxiv_id).or_default() += 1;
    }
    for (paper, n) in &run.figures_per_paper {
        assert_eq!(seen.get(paper.as_str()).copied().unwrap_or(0), *n, "{paper}");
    }
    assert_eq!(run.figures_per_paper.len() + run.failures.len(), 20);
}
