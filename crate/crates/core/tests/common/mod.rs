//! Fixture helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use figqa_core::dataset::load_corpus;
use figqa_core::figure::{build_figure_contexts, ExtractConfig, FigureContext, FigureDiscard};
use figqa_core::jsonl::read_records;
use figqa_core::latex::{prepare_paper, PrepConfig};
use figqa_core::pipeline::{Pipeline, RunConfig};
use serde::{Deserialize, Serialize};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepFailure {
    pub arxiv_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct ExtractionRun {
    pub contexts: Vec<FigureContext>,
    pub discards: Vec<FigureDiscard>,
    pub failures: Vec<PrepFailure>,
    /// Corpus figures per successfully prepared paper.
    pub figures_per_paper: BTreeMap<String, usize>,
}

/// Runs cleaning and context extraction over the extraction fixture corpus.
pub fn run_extraction_corpus() -> ExtractionRun {
    let dir = fixture("extraction");
    let papers = load_corpus(&dir.join("corpus.jsonl"), &dir.join("latex")).expect("corpus loads");
    let mut run = ExtractionRun::default();
    for raw in &papers {
        match prepare_paper(raw, &PrepConfig::default()) {
            Ok(clean) => {
                let ex = build_figure_contexts(raw, &clean, &ExtractConfig::default());
                run.figures_per_paper.insert(raw.arxiv_id.clone(), raw.figure_caption_pairs.len());
                run.contexts.extend(ex.contexts);
                run.discards.extend(ex.discards);
            }
            Err(e) => run.failures.push(PrepFailure {
                arxiv_id: raw.arxiv_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    run
}

pub fn expected<T: serde::de::DeserializeOwned>(file: &str) -> Vec<T> {
    read_records(&fixture("extraction").join(file)).expect("golden file reads")
}

/// Copies the end-to-end fixture into `dir` and returns its config with the
/// output directory set to `dir/out`.
pub fn e2e_config(dir: &Path) -> RunConfig {
    let src = fixture("e2e");
    copy_dir(&src, dir);
    let mut cfg = RunConfig::load(&dir.join("run.toml")).expect("fixture config loads");
    cfg.output_dir = dir.join("out");
    cfg
}

pub fn e2e_pipeline(dir: &Path) -> Pipeline {
    let cfg = e2e_config(dir);
    Pipeline::with_mock_script(cfg, &dir.join("mock.json")).expect("pipeline builds")
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            if entry.file_name() != "out" {
                copy_dir(&entry.path(), &to);
            }
        } else {
            std::fs::copy(entry.path(), to).unwrap();
        }
    }
}
