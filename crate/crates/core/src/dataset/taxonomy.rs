//! Closed-vocabulary figure-type and question-type labels.

use serde::{Deserialize, Serialize};

use super::{FigureType, QuestionType, VerifiedRecord};
use crate::gateway::{format_options, Endpoint, GatewayError, ModelRequest, PromptName, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyKind {
    FigureType,
    QuestionType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyLabel {
    pub record_key: String,
    pub kind: TaxonomyKind,
    /// Category name, or `None` when no answer fit the vocabulary.
    pub value: Option<String>,
    pub annotator_model: String,
}

impl TaxonomyLabel {
    /// Writes the label into the matching record field.
    pub fn apply(&self, record: &mut VerifiedRecord) {
        match self.kind {
            TaxonomyKind::FigureType => {
                record.figure_type = self.value.as_deref().and_then(|v| v.parse().ok());
            }
            TaxonomyKind::QuestionType => {
                record.question_type = self.value.as_deref().and_then(|v| v.parse().ok());
            }
        }
    }
}

/// Labels one record. Figure types go to a vision endpoint with the image;
/// question types to a text endpoint. An out-of-vocabulary answer is
/// retried once, then the label is left empty.
pub fn annotate_taxonomy(
    endpoint: &Endpoint,
    prompts: &PromptSet,
    record: &VerifiedRecord,
    kind: TaxonomyKind,
) -> Result<TaxonomyLabel, GatewayError> {
    let options = format_options(&record.options);
    let (template, prompt) = match kind {
        TaxonomyKind::FigureType => (
            PromptName::FigureTypeLabel,
            prompts.render(PromptName::FigureTypeLabel, &[("caption", &record.caption)])?,
        ),
        TaxonomyKind::QuestionType => (
            PromptName::QuestionTypeLabel,
            prompts.render(
                PromptName::QuestionTypeLabel,
                &[("question", &record.question), ("options", &options)],
            )?,
        ),
    };
    for sample in 0..2 {
        let request = ModelRequest::new(template, prompt.clone())
            .for_item(record.key.clone())
            .sample(sample);
        let value = match kind {
            TaxonomyKind::FigureType => {
                let text = endpoint
                    .complete_vision(request.with_image(record.figure_image_ref.clone()))?
                    .text;
                FigureType::parse_response(&text).map(|v| v.as_str().to_string())
            }
            TaxonomyKind::QuestionType => {
                let text = endpoint.complete_text(request)?.text;
                QuestionType::parse_response(&text).map(|v| v.as_str().to_string())
            }
        };
        if value.is_some() {
            return Ok(TaxonomyLabel {
                record_key: record.key.clone(),
                kind,
                value,
                annotator_model: endpoint.config().model_name.clone(),
            });
        }
        log::warn!("{}: {kind:?} answer outside the vocabulary", record.key);
    }
    Ok(TaxonomyLabel {
        record_key: record.key.clone(),
        kind,
        value: None,
        annotator_model: endpoint.config().model_name.clone(),
    })
}
