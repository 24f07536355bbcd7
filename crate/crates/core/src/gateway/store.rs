//! Durable record of completed model calls.
//!
//! An endpoint backed by a store answers any request it has already
//! completed from the store, so a resumed run never repeats a call.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{ModelRequest, ModelRole, ModelTranscript, PromptName};
use crate::jsonl::{read_records_repairing, Appender, JsonlError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub role: ModelRole,
    pub model_name: String,
    pub template: PromptName,
    pub item_key: String,
    pub sample_index: u32,
    #[serde(flatten)]
    pub transcript: ModelTranscript,
}

type StoreKey = (ModelRole, String, String);

#[derive(Debug)]
pub struct TranscriptStore {
    entries: RwLock<HashMap<StoreKey, ModelTranscript>>,
    appender: Appender,
}

impl TranscriptStore {
    /// Opens (or creates) the store file, dropping a torn final line.
    pub fn open(path: &Path) -> Result<Self, JsonlError> {
        let records: Vec<TranscriptRecord> = read_records_repairing(path)?;
        let entries = records
            .into_iter()
            .map(|r| ((r.role, r.model_name, r.transcript.request_digest.clone()), r.transcript))
            .collect();
        Ok(Self {
            entries: RwLock::new(entries),
            appender: Appender::open(path)?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, role: ModelRole, model_name: &str, digest: &str) -> Option<ModelTranscript> {
        self.entries
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&(role, model_name.to_string(), digest.to_string()))
            .cloned()
    }

    pub fn record(
        &self,
        role: ModelRole,
        model_name: &str,
        request: &ModelRequest,
        transcript: &ModelTranscript,
    ) -> Result<(), JsonlError> {
        self.appender.append(&TranscriptRecord {
            role,
            model_name: model_name.to_string(),
            template: request.template,
            item_key: request.item_key.clone(),
            sample_index: request.sample_index,
            transcript: transcript.clone(),
        })?;
        self.entries
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert((role, model_name.to_string(), transcript.request_digest.clone()), transcript.clone());
        Ok(())
    }
}
