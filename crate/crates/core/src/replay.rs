//! Offline audit of a finished run.
//!
//! Re-derives the retained set from the candidates and the verdict log with
//! no model calls and compares it against the retained file. The rules are
//! restated here rather than borrowed from the cascade so that a fault in
//! one does not hide in the other.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::dataset::VerifiedRecord;
use crate::generation::{ClaimQa, QaCandidate, QaOutcome};
use crate::jsonl::{read_records, read_records_repairing, JsonlError};
use crate::pipeline::Layout;
use crate::verification::{FilterKind, FilterVerdict};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub candidates: usize,
    pub verdicts: usize,
    pub expected_retained: usize,
    pub retained: usize,
    pub violations: Vec<String>,
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "candidates:        {}", self.candidates)?;
        writeln!(f, "verdicts:          {}", self.verdicts)?;
        writeln!(f, "expected retained: {}", self.expected_retained)?;
        writeln!(f, "retained file:     {}", self.retained)?;
        if self.violations.is_empty() {
            writeln!(f, "consistent")
        } else {
            for v in &self.violations {
                writeln!(f, "violation: {v}")?;
            }
            Ok(())
        }
    }
}

/// Audits the run in `output_dir`.
pub fn replay_run(output_dir: &Path) -> Result<ReplayReport, JsonlError> {
    let layout = Layout::new(output_dir);
    let qas: Vec<ClaimQa> = read_records_repairing(&layout.candidates())?;
    let verdicts: Vec<FilterVerdict> = read_records_repairing(&layout.verdicts())?;
    let retained: Vec<VerifiedRecord> = read_records(&layout.retained())?;
    let candidates: Vec<QaCandidate> = qas
        .into_iter()
        .filter_map(|q| match q.outcome {
            QaOutcome::Generated { candidate } => Some(candidate),
            QaOutcome::Declined { .. } => None,
        })
        .collect();
    Ok(audit(&candidates, &verdicts, &retained))
}

/// Checks verdicts and retained records against each other.
pub fn audit(candidates: &[QaCandidate], verdicts: &[FilterVerdict], retained: &[VerifiedRecord]) -> ReplayReport {
    let mut violations = Vec::new();
    let by_key: BTreeMap<&str, &QaCandidate> = candidates.iter().map(|c| (c.key.as_str(), c)).collect();

    let mut per_candidate: BTreeMap<&str, BTreeMap<FilterKind, &FilterVerdict>> = BTreeMap::new();
    for v in verdicts {
        if !by_key.contains_key(v.candidate_key.as_str()) {
            violations.push(format!("{}: verdict for unknown candidate", v.log_key()));
        }
        let slot = per_candidate.entry(v.candidate_key.as_str()).or_default();
        if slot.insert(v.filter, v).is_some() {
            violations.push(format!("{}: logged more than once", v.log_key()));
        }
    }

    let mut expected = BTreeSet::new();
    for (key, filters) in &per_candidate {
        let mut failed_at = None;
        for (i, kind) in FilterKind::ORDER.iter().enumerate() {
            match (filters.get(kind), failed_at) {
                (Some(_), Some(f)) => violations.push(format!("{key}/{kind}: verdict after failing filter {f}")),
                (Some(v), None) if !v.passed => failed_at = Some(*kind),
                (Some(_), None) => {}
                (None, _) => {
                    if let Some(later) = FilterKind::ORDER[i + 1..].iter().find(|k| filters.contains_key(*k)) {
                        violations.push(format!("{key}/{later}: verdict without {kind} before it"));
                    }
                }
            }
        }
        let all_passed = FilterKind::ORDER.iter().all(|k| filters.get(k).is_some_and(|v| v.passed));
        if all_passed {
            expected.insert(*key);
        }
        if let Some(v) = filters.get(&FilterKind::VisionConsistency) {
            match &v.voting {
                Some(voting) => {
                    if !voting.is_consistent() {
                        violations.push(format!("{}: vote tally does not match its runs", v.log_key()));
                    }
                    if v.passed != voting.majority.letter().is_some_and(|l| {
                        by_key.get(key).is_some_and(|c| c.correct_letter() == l)
                    }) {
                        violations.push(format!("{}: pass flag disagrees with the vote", v.log_key()));
                    }
                }
                // Only a failed image read ends the filter without a vote.
                None if !v.passed && v.note.is_some() => {}
                None => violations.push(format!("{}: no vote tally", v.log_key())),
            }
        }
    }

    let mut seen = BTreeSet::new();
    for r in retained {
        if !seen.insert(r.key.as_str()) {
            violations.push(format!("{}: retained twice", r.key));
        }
        if !expected.contains(r.key.as_str()) {
            violations.push(format!("{}: retained without passing every filter", r.key));
            continue;
        }
        let filters = &per_candidate[r.key.as_str()];
        let vote = filters[&FilterKind::VisionConsistency].voting.as_ref();
        if vote.and_then(|v| v.reasoning.as_deref()) != Some(r.reasoning.as_str()) {
            violations.push(format!("{}: reasoning is not the first agreeing run's response", r.key));
        }
        let keys: Vec<String> = FilterKind::ORDER.iter().map(|k| filters[k].log_key()).collect();
        if r.provenance.verdict_keys != keys {
            violations.push(format!("{}: provenance lists other verdicts", r.key));
        }
        if let Some(c) = by_key.get(r.key.as_str()) {
            if c.question != r.question || c.options != r.options || c.correct_index != r.correct_index {
                violations.push(format!("{}: record differs from its candidate", r.key));
            }
        }
    }
    for key in expected.difference(&seen) {
        violations.push(format!("{key}: passed every filter but is not retained"));
    }

    ReplayReport {
        candidates: candidates.len(),
        verdicts: verdicts.len(),
        expected_retained: expected.len(),
        retained: retained.len(),
        violations,
    }
}
