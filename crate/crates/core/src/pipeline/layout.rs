//! File names inside the output directory.

use std::path::{Path, PathBuf};

use super::Stage;

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn prepared(&self) -> PathBuf {
        self.file("prepared.jsonl")
    }
    pub fn contexts(&self) -> PathBuf {
        self.file("contexts.jsonl")
    }
    pub fn discards(&self) -> PathBuf {
        self.file("discards.jsonl")
    }
    pub fn claims(&self) -> PathBuf {
        self.file("claims.jsonl")
    }
    pub fn candidates(&self) -> PathBuf {
        self.file("candidates.jsonl")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.file("verdicts.jsonl")
    }
    pub fn retained(&self) -> PathBuf {
        self.file("retained.jsonl")
    }
    pub fn annotations(&self) -> PathBuf {
        self.file("annotations.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.file("dataset.jsonl")
    }
    pub fn eval_sample(&self) -> PathBuf {
        self.file("eval_sample.jsonl")
    }
    pub fn eval_result(&self) -> PathBuf {
        self.file("eval_result.json")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.file("eval_report.txt")
    }
    pub fn funnel_txt(&self) -> PathBuf {
        self.file("funnel.txt")
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.file("run_manifest.json")
    }
    pub fn transcripts(&self) -> PathBuf {
        self.file("transcripts.jsonl")
    }
    pub fn mock_ledger(&self) -> PathBuf {
        self.file("mock_ledger.jsonl")
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.file(&format!("{}.manifest.json", stage.as_str()))
    }
}
