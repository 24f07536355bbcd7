//! Append-only verdict log.

use std::collections::BTreeMap;
use std::path::Path;

use super::FilterVerdict;
use crate::jsonl::{read_records_repairing, Appender, JsonlError};

#[derive(Debug)]
pub struct VerdictLog {
    appender: Appender,
}

impl VerdictLog {
    /// Opens the log for appending and returns the verdicts already in it.
    /// A partially written final line is discarded.
    pub fn open(path: &Path) -> Result<(Self, Vec<FilterVerdict>), JsonlError> {
        let existing = read_records_repairing(path)?;
        let appender = Appender::open(path)?;
        Ok((Self { appender }, existing))
    }

    pub fn append(&self, verdict: &FilterVerdict) -> Result<(), JsonlError> {
        self.appender.append(verdict)
    }

    pub fn path(&self) -> &Path {
        self.appender.path()
    }
}

/// Groups verdicts by candidate. Only the first verdict per
/// (candidate, filter) counts; the rest are reported as duplicates.
pub fn index_verdicts(verdicts: Vec<FilterVerdict>) -> (BTreeMap<String, Vec<FilterVerdict>>, usize) {
    let mut by_key: BTreeMap<String, Vec<FilterVerdict>> = BTreeMap::new();
    let mut duplicates = 0;
    for v in verdicts {
        let entry = by_key.entry(v.candidate_key.clone()).or_default();
        if entry.iter().any(|e| e.filter == v.filter) {
            duplicates += 1;
        } else {
            entry.push(v);
        }
    }
    for list in by_key.values_mut() {
        list.sort_by_key(|v| v.filter);
    }
    (by_key, duplicates)
}
