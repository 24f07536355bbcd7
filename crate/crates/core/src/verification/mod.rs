//! Cascaded filters deciding which generated questions are kept.
//!
//! A candidate is kept only if every filter passes. Filters run in a
//! fixed order and the first failure stops the cascade, so later filters
//! never see (or spend model calls on) a rejected candidate.

mod log;
mod vote;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::log::{index_verdicts, VerdictLog};
pub use self::vote::{majority_vote, vote_with_rule, VoteRule, VotingRecord, VOTE_COUNT};

use crate::figure::FigureContext;
use crate::gateway::{
    format_options, selection_or_ambiguous, Completion, Endpoint, GatewayError, ModelRequest, PromptName, PromptSet,
    Selection,
};
use crate::generation::{QaCandidate, OPTION_COUNT};
use crate::jsonl::JsonlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    SourceConsistency,
    VisualDependenceText,
    VisualDependenceVision,
    VisionConsistency,
}

impl FilterKind {
    /// Cascade order.
    pub const ORDER: [FilterKind; 4] = [
        FilterKind::SourceConsistency,
        FilterKind::VisualDependenceText,
        FilterKind::VisualDependenceVision,
        FilterKind::VisionConsistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::SourceConsistency => "source_consistency",
            FilterKind::VisualDependenceText => "visual_dependence_text",
            FilterKind::VisualDependenceVision => "visual_dependence_vision",
            FilterKind::VisionConsistency => "vision_consistency",
        }
    }

    /// Whether the filter belongs to the text-only part of the cascade.
    pub fn is_text_stage(self) -> bool {
        self != FilterKind::VisionConsistency
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One logged filter decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub candidate_key: String,
    pub filter: FilterKind,
    pub passed: bool,
    pub selection: Selection,
    /// Request digests of the model calls behind this verdict.
    pub transcript_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting: Option<VotingRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl FilterVerdict {
    /// Key of this verdict within the log.
    pub fn log_key(&self) -> String {
        format!("{}/{}", self.candidate_key, self.filter)
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Log(#[from] JsonlError),
}

/// Result of one filter call that did not fail outright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Check<T> {
    Done(T),
    /// The endpoint stayed unavailable; nothing may be recorded.
    Deferred(String),
}

fn defer_or<T>(err: GatewayError) -> Result<Check<T>, GatewayError> {
    if err.is_deferrable() {
        Ok(Check::Deferred(err.to_string()))
    } else {
        Err(err)
    }
}

fn verdict(q: &QaCandidate, filter: FilterKind, passed: bool, selection: Selection, c: &Completion) -> FilterVerdict {
    FilterVerdict {
        candidate_key: q.key.clone(),
        filter,
        passed,
        selection,
        transcript_refs: vec![c.transcript.request_digest.clone()],
        voting: None,
        note: None,
    }
}

/// Text model answers from the figure's citing paragraphs; passes only if
/// it picks exactly the designated answer.
pub fn check_source_consistency(
    text_model: &Endpoint,
    prompts: &PromptSet,
    q: &QaCandidate,
    context: &str,
) -> Result<Check<FilterVerdict>, GatewayError> {
    let options = format_options(&q.options);
    let prompt = prompts.render(
        PromptName::SourceCheck,
        &[("context", context), ("question", &q.question), ("options", &options)],
    )?;
    let request = ModelRequest::new(PromptName::SourceCheck, prompt).for_item(q.key.clone());
    let completion = match text_model.complete_text(request) {
        Ok(c) => c,
        Err(e) => return defer_or(e),
    };
    let selection = selection_or_ambiguous(&completion.text, OPTION_COUNT);
    let passed = selection == Selection::Letter(q.correct_letter());
    Ok(Check::Done(verdict(q, FilterKind::SourceConsistency, passed, selection, &completion)))
}

/// One caption-only stage. Passes when the model does not recover the
/// designated answer without the figure.
pub fn check_visual_dependence_stage(
    model: &Endpoint,
    prompts: &PromptSet,
    q: &QaCandidate,
    filter: FilterKind,
) -> Result<Check<FilterVerdict>, GatewayError> {
    let options = format_options(&q.options);
    let prompt = prompts.render(
        PromptName::VisdepCheck,
        &[("caption", &q.caption), ("question", &q.question), ("options", &options)],
    )?;
    let request = ModelRequest::new(PromptName::VisdepCheck, prompt).for_item(q.key.clone());
    let result = match filter {
        FilterKind::VisualDependenceText => model.complete_text(request),
        FilterKind::VisualDependenceVision => model.complete_vision(request),
        other => panic!("{other} is not a visual-dependence stage"),
    };
    let completion = match result {
        Ok(c) => c,
        Err(e) => return defer_or(e),
    };
    let selection = selection_or_ambiguous(&completion.text, OPTION_COUNT);
    let passed = selection != Selection::Letter(q.correct_letter());
    Ok(Check::Done(verdict(q, filter, passed, selection, &completion)))
}

/// Both caption-only stages; the vision stage runs only when the text
/// stage passes.
pub fn check_visual_dependence(
    text_model: &Endpoint,
    vision_model: &Endpoint,
    prompts: &PromptSet,
    q: &QaCandidate,
) -> Result<Check<Vec<FilterVerdict>>, GatewayError> {
    let first = match check_visual_dependence_stage(text_model, prompts, q, FilterKind::VisualDependenceText)? {
        Check::Done(v) => v,
        Check::Deferred(r) => return Ok(Check::Deferred(r)),
    };
    if !first.passed {
        return Ok(Check::Done(vec![first]));
    }
    match check_visual_dependence_stage(vision_model, prompts, q, FilterKind::VisualDependenceVision)? {
        Check::Done(second) => Ok(Check::Done(vec![first, second])),
        Check::Deferred(r) => Ok(Check::Deferred(r)),
    }
}

/// Vision model answers from figure and caption three times; passes when
/// the vote lands on the designated answer.
///
/// The three runs are issued as a unit: if any is unavailable, the whole
/// triple is deferred.
pub fn check_vision_consistency(
    vision_model: &Endpoint,
    prompts: &PromptSet,
    q: &QaCandidate,
    image: &str,
    rule: VoteRule,
) -> Result<Check<FilterVerdict>, GatewayError> {
    let options = format_options(&q.options);
    let prompt = prompts.render(
        PromptName::VisionAnswer,
        &[("caption", &q.caption), ("question", &q.question), ("options", &options)],
    )?;
    let mut runs = Vec::with_capacity(VOTE_COUNT);
    let mut refs = Vec::with_capacity(VOTE_COUNT);
    for sample in 0..VOTE_COUNT as u32 {
        let request = ModelRequest::new(PromptName::VisionAnswer, prompt.clone())
            .for_item(q.key.clone())
            .with_image(image)
            .sample(sample);
        match vision_model.complete_vision(request) {
            Ok(c) => {
                refs.push(c.transcript.request_digest);
                runs.push((selection_or_ambiguous(&c.text, OPTION_COUNT), c.text));
            }
            Err(GatewayError::ImageUnreadable(detail)) => {
                return Ok(Check::Done(FilterVerdict {
                    candidate_key: q.key.clone(),
                    filter: FilterKind::VisionConsistency,
                    passed: false,
                    selection: Selection::Ambiguous,
                    transcript_refs: refs,
                    voting: None,
                    note: Some(format!("image unreadable: {detail}")),
                }));
            }
            Err(e) => return defer_or(e),
        }
    }
    let runs: [(Selection, String); VOTE_COUNT] = runs.try_into().expect("three runs");
    let voting = VotingRecord::from_runs(&runs, rule);
    Ok(Check::Done(FilterVerdict {
        candidate_key: q.key.clone(),
        filter: FilterKind::VisionConsistency,
        passed: voting.majority == Selection::Letter(q.correct_letter()),
        selection: voting.majority,
        transcript_refs: refs,
        voting: Some(voting),
        note: None,
    }))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CascadeOutcome {
    Retained(VotingRecord),
    Rejected(FilterKind),
    Deferred { filter: FilterKind, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeResult {
    pub outcome: CascadeOutcome,
    /// Every verdict for the candidate in cascade order, replayed or new.
    pub verdicts: Vec<FilterVerdict>,
    pub new_verdicts: usize,
}

/// Endpoints and settings shared by every cascade run.
#[derive(Debug, Clone)]
pub struct Verifier<'a> {
    pub text_model: &'a Endpoint,
    pub vision_model: &'a Endpoint,
    pub prompts: &'a PromptSet,
    pub vote_rule: VoteRule,
}

impl Verifier<'_> {
    fn run_filter(
        &self,
        filter: FilterKind,
        q: &QaCandidate,
        ctx: &FigureContext,
    ) -> Result<Check<FilterVerdict>, GatewayError> {
        match filter {
            FilterKind::SourceConsistency => check_source_consistency(self.text_model, self.prompts, q, &ctx.context),
            FilterKind::VisualDependenceText => check_visual_dependence_stage(self.text_model, self.prompts, q, filter),
            FilterKind::VisualDependenceVision => {
                check_visual_dependence_stage(self.vision_model, self.prompts, q, filter)
            }
            FilterKind::VisionConsistency => {
                check_vision_consistency(self.vision_model, self.prompts, q, &ctx.figure_image_ref, self.vote_rule)
            }
        }
    }

    /// Runs the remaining filters for `q`.
    ///
    /// `prior` holds verdicts already logged for this candidate; those
    /// filters are not re-run. Each new verdict is passed to `record`
    /// before the next filter starts.
    pub fn run_cascade(
        &self,
        q: &QaCandidate,
        ctx: &FigureContext,
        prior: &[FilterVerdict],
        record: &mut dyn FnMut(&FilterVerdict) -> Result<(), JsonlError>,
    ) -> Result<CascadeResult, VerifyError> {
        let mut verdicts = Vec::new();
        let mut new_verdicts = 0;
        for filter in FilterKind::ORDER {
            let v = match prior.iter().find(|v| v.filter == filter) {
                Some(v) => v.clone(),
                None => match self.run_filter(filter, q, ctx)? {
                    Check::Done(v) => {
                        record(&v)?;
                        new_verdicts += 1;
                        v
                    }
                    Check::Deferred(reason) => {
                        return Ok(CascadeResult {
                            outcome: CascadeOutcome::Deferred { filter, reason },
                            verdicts,
                            new_verdicts,
                        })
                    }
                },
            };
            let passed = v.passed;
            let voting = v.voting.clone();
            verdicts.push(v);
            if !passed {
                return Ok(CascadeResult {
                    outcome: CascadeOutcome::Rejected(filter),
                    verdicts,
                    new_verdicts,
                });
            }
            if filter == FilterKind::VisionConsistency {
                let voting = voting.ok_or_else(|| {
                    VerifyError::Gateway(GatewayError::Fatal(format!("{}: passing vote without tally", q.key)))
                })?;
                return Ok(CascadeResult {
                    outcome: CascadeOutcome::Retained(voting),
                    verdicts,
                    new_verdicts,
                });
            }
        }
        unreachable!("cascade ends at the vision filter")
    }
}
