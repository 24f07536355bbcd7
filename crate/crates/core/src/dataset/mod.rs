//! Verified records, their on-disk format, and dataset-level statistics.

mod corpus;
mod funnel;
mod sample;
mod taxonomy;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use corpus::{latex_file_name, load_corpus, CorpusError, CorpusRecord};
pub use funnel::{
    compute_funnel, compute_funnel_with, render_funnel_table, retention_tenths, FunnelCounts, FunnelError, FunnelStage,
    FunnelStats, Rounding,
};
pub use sample::{
    allocate_proportional, stratified_sample, stratum_of, SampleError, SampleOutcome, StratumKey,
};
pub use taxonomy::{annotate_taxonomy, TaxonomyKind, TaxonomyLabel};

use crate::digest::sha256_hex;
use crate::figure::{collapse_whitespace, FigureContext};
use crate::generation::QaCandidate;
use crate::jsonl::{self, JsonlError};
use crate::verification::{FilterVerdict, VotingRecord};

macro_rules! closed_vocabulary {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            /// Reads a model's answer: an exact category name (ignoring
            /// case, spacing and decoration), or text naming exactly one
            /// category.
            pub fn parse_response(response: &str) -> Option<Self> {
                let cleaned = normalize_label(response);
                if let Some(v) = Self::ALL.iter().find(|v| normalize_label(v.as_str()) == cleaned) {
                    return Some(*v);
                }
                let padded = format!(" {cleaned} ");
                let mut hits = Self::ALL
                    .iter()
                    .filter(|v| padded.contains(&format!(" {} ", normalize_label(v.as_str()))));
                match (hits.next(), hits.next()) {
                    (Some(v), None) => Some(*v),
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .find(|v| v.as_str() == s)
                    .copied()
                    .ok_or_else(|| format!("unknown {} {s:?}", stringify!($name)))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

fn normalize_label(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    collapse_whitespace(&mapped)
}

closed_vocabulary! {
    /// Visual modality of a figure, in descending dataset frequency.
    FigureType {
        LinePlot => "Line Plot",
        Composite => "Composite",
        Diagram => "Diagram",
        ScatterPlot => "Scatter Plot",
        BarChart => "Bar Chart",
        Heatmap => "Heatmap",
        Graph => "Graph",
        BoxPlot => "Box Plot",
        Other => "Other",
        Illustration => "Illustration",
        Photo => "Photo",
        PieChart => "Pie Chart",
    }
}

closed_vocabulary! {
    /// Cognitive operation a question asks for.
    QuestionType {
        Relational => "Relational",
        Comparative => "Comparative",
        Descriptive => "Descriptive",
        Compositional => "Compositional",
        Structural => "Structural",
    }
}

/// Where a record came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub claim: String,
    pub context_digest: String,
    /// Log keys of the verdicts that admitted the record.
    pub verdict_keys: Vec<String>,
    /// `options[i]` was generated as option `option_permutation[i]`.
    pub option_permutation: Vec<usize>,
}

/// A question that passed every filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifiedRecord {
    pub key: String,
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    pub figure_image_ref: String,
    pub caption: String,
    pub reasoning: String,
    pub arxiv_id: String,
    pub figure_index: usize,
    pub primary_category: String,
    pub figure_type: Option<FigureType>,
    pub question_type: Option<QuestionType>,
    pub provenance: Provenance,
}

impl VerifiedRecord {
    /// Builds the record for a candidate admitted by `verdicts`.
    pub fn assemble(
        candidate: &QaCandidate,
        ctx: &FigureContext,
        claim: &str,
        voting: &VotingRecord,
        verdicts: &[FilterVerdict],
    ) -> Result<Self, String> {
        let reasoning = voting
            .reasoning
            .clone()
            .ok_or_else(|| format!("{}: vote has no reasoning", candidate.key))?;
        let record = Self {
            key: candidate.key.clone(),
            question: candidate.question.clone(),
            options: candidate.options.clone(),
            correct_index: candidate.correct_index,
            figure_image_ref: ctx.figure_image_ref.clone(),
            caption: candidate.caption.clone(),
            reasoning,
            arxiv_id: ctx.arxiv_id.clone(),
            figure_index: ctx.figure_index,
            primary_category: ctx.primary_category.clone(),
            figure_type: None,
            question_type: None,
            provenance: Provenance {
                claim: claim.to_string(),
                context_digest: sha256_hex(ctx.context.as_bytes()),
                verdict_keys: verdicts.iter().map(FilterVerdict::log_key).collect(),
                option_permutation: candidate.permutation.clone(),
            },
        };
        record.validate()?;
        Ok(record)
    }

    pub fn correct_letter(&self) -> char {
        crate::gateway::option_letter(self.correct_index)
    }

    pub fn validate(&self) -> Result<(), String> {
        let as_candidate = QaCandidate {
            key: self.key.clone(),
            figure_key: crate::figure::FigureKey {
                arxiv_id: self.arxiv_id.clone(),
                figure_index: self.figure_index,
            },
            claim_key: self.key.clone(),
            question: self.question.clone(),
            options: self.options.clone(),
            correct_index: self.correct_index,
            permutation: self.provenance.option_permutation.clone(),
            caption: self.caption.clone(),
        };
        as_candidate.validate()?;
        if self.reasoning.trim().is_empty() {
            return Err("reasoning is empty".into());
        }
        Ok(())
    }

    /// Hash over the canonical JSON form, for duplicate detection.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("record serializes"))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema violation at line {line}: {detail}")]
    SchemaViolation { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Writes one record per line.
pub fn write_dataset(records: &[VerifiedRecord], path: &Path) -> Result<(), DatasetError> {
    Ok(jsonl::write_records(path, records)?)
}

/// Reads a dataset written by [`write_dataset`]; every record is checked
/// against the record invariants.
pub fn read_dataset(path: &Path) -> Result<Vec<VerifiedRecord>, DatasetError> {
    let records: Vec<VerifiedRecord> = jsonl::read_records(path).map_err(|e| match e {
        JsonlError::Schema { line, detail, .. } => DatasetError::SchemaViolation { line, detail },
        other => DatasetError::Io(other),
    })?;
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|detail| DatasetError::SchemaViolation { line: i + 1, detail })?;
    }
    Ok(records)
}
