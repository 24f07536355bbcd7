//! Claim extraction and question generation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::figure::{collapse_whitespace, FigureContext, FigureKey};
use crate::gateway::{
    letter_index, parse_patterns_block, tag_content, Endpoint, GatewayError, ModelRequest, PatternsBlock, PromptName, PromptSet,
};

/// Every answer list has one correct option and three distractors.
pub const OPTION_COUNT: usize = 4;

pub const CLAIM_PREFIX: &str = "the figure shows";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicClaim {
    pub figure_key: FigureKey,
    pub ordinal: usize,
    pub text: String,
}

impl AtomicClaim {
    pub fn key(&self) -> String {
        format!("{}#{}", self.figure_key, self.ordinal)
    }
}

/// True when the whitespace-normalized claim starts with "The figure shows"
/// (any case).
pub fn has_claim_prefix(text: &str) -> bool {
    let normalized = collapse_whitespace(text);
    normalized.len() > CLAIM_PREFIX.len()
        && normalized
            .get(..CLAIM_PREFIX.len())
            .is_some_and(|p| p.eq_ignore_ascii_case(CLAIM_PREFIX))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimStatus {
    Extracted,
    NoneSignal,
    Malformed,
}

/// Result of claim extraction for one figure, as persisted in the claims
/// file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureClaims {
    pub figure_key: FigureKey,
    pub status: ClaimStatus,
    pub claims: Vec<AtomicClaim>,
    /// Lines dropped for lacking the claim prefix.
    pub rejected_lines: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl FigureClaims {
    /// Claims whose text repeats an earlier claim of the same figure.
    pub fn duplicate_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.claims
            .iter()
            .filter(|c| !seen.insert(collapse_whitespace(&c.text).to_lowercase()))
            .count()
    }
}

/// Turns a parsed response into claims for `figure_key`.
fn claims_from_block(figure_key: &FigureKey, block: PatternsBlock) -> FigureClaims {
    match block {
        PatternsBlock::NoneSignal => FigureClaims {
            figure_key: figure_key.clone(),
            status: ClaimStatus::NoneSignal,
            claims: Vec::new(),
            rejected_lines: 0,
            detail: None,
        },
        PatternsBlock::Claims(lines) => {
            let mut claims = Vec::new();
            let mut rejected = 0;
            for (ordinal, line) in lines.into_iter().enumerate() {
                if has_claim_prefix(&line) {
                    claims.push(AtomicClaim {
                        figure_key: figure_key.clone(),
                        ordinal,
                        text: collapse_whitespace(&line),
                    });
                } else {
                    rejected += 1;
                }
            }
            FigureClaims {
                figure_key: figure_key.clone(),
                status: ClaimStatus::Extracted,
                claims,
                rejected_lines: rejected,
                detail: None,
            }
        }
    }
}

/// Asks the text model for atomic claims about the figure.
///
/// A response without a `<Patterns>` block is retried once as a fresh
/// sample before the figure is given up on.
pub fn extract_claims(text_model: &Endpoint, prompts: &PromptSet, ctx: &FigureContext) -> Result<FigureClaims, GatewayError> {
    let key = ctx.key();
    let prompt = prompts.render(PromptName::ClaimExtract, &[("context", &ctx.context)])?;
    let mut last_error = String::new();
    for sample in 0..2 {
        let request = ModelRequest::new(PromptName::ClaimExtract, prompt.clone())
            .for_item(key.to_string())
            .sample(sample);
        let completion = text_model.complete_text(request)?;
        match parse_patterns_block(&completion.text) {
            Ok(block) => return Ok(claims_from_block(&key, block)),
            Err(e) => {
                log::warn!("claim extraction for {key}: {e}");
                last_error = e.0;
            }
        }
    }
    Ok(FigureClaims {
        figure_key: key,
        status: ClaimStatus::Malformed,
        claims: Vec::new(),
        rejected_lines: 0,
        detail: Some(last_error),
    })
}

/// A generated multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaCandidate {
    /// Same as the source claim's key; one candidate per claim at most.
    pub key: String,
    pub figure_key: FigureKey,
    pub claim_key: String,
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    /// `options[i]` is the model's option number `permutation[i]`.
    pub permutation: Vec<usize>,
    pub caption: String,
}

impl QaCandidate {
    pub fn correct_letter(&self) -> char {
        crate::gateway::option_letter(self.correct_index)
    }

    pub fn correct_option(&self) -> &str {
        &self.options[self.correct_index]
    }

    /// Checks the structural invariants every candidate must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        validate_parts(&self.question, &self.options, self.correct_index)?;
        if self.caption.trim().is_empty() {
            return Err("caption is empty".into());
        }
        Ok(())
    }
}

fn validate_parts(question: &str, options: &[String], correct_index: usize) -> Result<(), String> {
    if question.trim().is_empty() {
        return Err("question is empty".into());
    }
    if options.len() != OPTION_COUNT {
        return Err(format!("expected {OPTION_COUNT} options, got {}", options.len()));
    }
    if correct_index >= OPTION_COUNT {
        return Err(format!("correct index {correct_index} out of range"));
    }
    if options[correct_index].trim().is_empty() {
        return Err("correct option is empty".into());
    }
    let normalized: Vec<String> = options.iter().map(|o| collapse_whitespace(o)).collect();
    for i in 0..normalized.len() {
        for j in i + 1..normalized.len() {
            if normalized[i] == normalized[j] {
                return Err(format!("options {} and {} are identical", i, j));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum DeclineReason {
    /// The model answered "None".
    ModelDeclined,
    MalformedQa(String),
}

impl fmt::Display for DeclineReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeclineReason::ModelDeclined => f.write_str("model declined"),
            DeclineReason::MalformedQa(d) => write!(f, "malformed QA: {d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum QaOutcome {
    Generated { candidate: QaCandidate },
    Declined { reason: DeclineReason },
}

/// Per-claim generation record, as persisted in the candidates file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimQa {
    pub claim_key: String,
    pub figure_key: FigureKey,
    pub claim: String,
    #[serde(flatten)]
    pub outcome: QaOutcome,
}

/// QA fields in the model's own option order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQa {
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QaParseError {
    Declined,
    /// Tags missing; worth one retry.
    Structure(String),
    /// Tags present but the content breaks an invariant.
    Invalid(String),
}

fn option_line(line: &str) -> Option<(char, String)> {
    let mut chars = line.chars();
    let letter = chars.next()?.to_ascii_uppercase();
    let rest = chars.as_str();
    let sep = rest.chars().next()?;
    if !letter.is_ascii_uppercase() || !matches!(sep, '.' | ')' | ':') {
        return None;
    }
    Some((letter, rest[sep.len_utf8()..].trim().to_string()))
}

/// Parses `<question>`, `<options>` and `<answer>` from a generation
/// response.
pub fn parse_qa_response(response: &str) -> Result<ParsedQa, QaParseError> {
    let trimmed = response.trim();
    if trimmed.trim_end_matches('.').eq_ignore_ascii_case("none") {
        return Err(QaParseError::Declined);
    }
    let (Some(question), Some(options), Some(answer)) = (
        tag_content(response, "question"),
        tag_content(response, "options"),
        tag_content(response, "answer"),
    ) else {
        return Err(QaParseError::Structure("missing question, options or answer tag".into()));
    };
    let mut parsed = Vec::new();
    for line in options.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (letter, text) =
            option_line(line).ok_or_else(|| QaParseError::Invalid(format!("unrecognized option line {line:?}")))?;
        if letter_index(letter) != Some(parsed.len()) {
            return Err(QaParseError::Invalid(format!("option {letter} out of order")));
        }
        parsed.push(text);
    }
    let answer_clean = answer.trim().trim_matches(|c: char| !c.is_alphanumeric());
    let mut answer_chars = answer_clean.chars();
    let correct_index = match (answer_chars.next(), answer_chars.next()) {
        (Some(c), next) if next.map_or(true, |n| !n.is_alphanumeric()) => letter_index(c.to_ascii_uppercase()),
        _ => None,
    }
    .or_else(|| parsed.iter().position(|o| collapse_whitespace(o) == collapse_whitespace(answer)))
    .ok_or_else(|| QaParseError::Invalid(format!("unrecognized answer {answer:?}")))?;
    let question = question.trim().to_string();
    validate_parts(&question, &parsed, correct_index).map_err(QaParseError::Invalid)?;
    Ok(ParsedQa {
        question,
        options: parsed,
        correct_index,
    })
}

/// Shuffles options with a stream seeded from the run seed and the
/// candidate key, so the outcome does not depend on processing order.
pub fn shuffle_options(parsed: &ParsedQa, run_seed: u64, key: &str) -> (Vec<String>, usize, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, "options", key));
    let mut permutation: Vec<usize> = (0..parsed.options.len()).collect();
    permutation.shuffle(&mut rng);
    let options = permutation.iter().map(|&i| parsed.options[i].clone()).collect();
    let correct = permutation
        .iter()
        .position(|&i| i == parsed.correct_index)
        .expect("permutation covers every option");
    (options, correct, permutation)
}

/// Asks the text model to turn one claim into a question.
pub fn generate_qa(
    text_model: &Endpoint,
    prompts: &PromptSet,
    claim: &AtomicClaim,
    caption: &str,
    context: &str,
    run_seed: u64,
) -> Result<QaOutcome, GatewayError> {
    let key = claim.key();
    let prompt = prompts.render(
        PromptName::QaGenerate,
        &[("claim", &claim.text), ("caption", caption), ("context", context)],
    )?;
    let mut last = String::new();
    for sample in 0..2 {
        let request = ModelRequest::new(PromptName::QaGenerate, prompt.clone())
            .for_item(key.clone())
            .sample(sample);
        let completion = text_model.complete_text(request)?;
        match parse_qa_response(&completion.text) {
            Ok(parsed) => {
                let (options, correct_index, permutation) = shuffle_options(&parsed, run_seed, &key);
                let candidate = QaCandidate {
                    key: key.clone(),
                    figure_key: claim.figure_key.clone(),
                    claim_key: key.clone(),
                    question: parsed.question,
                    options,
                    correct_index,
                    permutation,
                    caption: caption.to_string(),
                };
                if let Err(e) = candidate.validate() {
                    return Ok(QaOutcome::Declined {
                        reason: DeclineReason::MalformedQa(e),
                    });
                }
                return Ok(QaOutcome::Generated { candidate });
            }
            Err(QaParseError::Declined) => {
                return Ok(QaOutcome::Declined {
                    reason: DeclineReason::ModelDeclined,
                })
            }
            Err(QaParseError::Invalid(e)) => {
                return Ok(QaOutcome::Declined {
                    reason: DeclineReason::MalformedQa(e),
                })
            }
            Err(QaParseError::Structure(e)) => last = e,
        }
    }
    Ok(QaOutcome::Declined {
        reason: DeclineReason::MalformedQa(last),
    })
}

/// Counts claims and generated candidates across records.
pub fn generation_counts(claims: &[FigureClaims], qas: &[ClaimQa]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    out.insert("claims", claims.iter().map(|c| c.claims.len()).sum());
    out.insert("duplicate_claims", claims.iter().map(FigureClaims::duplicate_count).sum());
    out.insert(
        "qa_generated",
        qas.iter().filter(|q| matches!(q.outcome, QaOutcome::Generated { .. })).count(),
    );
    out.insert(
        "qa_declined",
        qas.iter().filter(|q| matches!(q.outcome, QaOutcome::Declined { .. })).count(),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule, MockScript, ModelEndpointConfig, ModelRole};
    use std::sync::Arc;

    fn ctx() -> FigureContext {
        FigureContext {
            arxiv_id: "2301.00001".into(),
            primary_category: "cs".into(),
            figure_index: 2,
            figure_image_ref: "f.png".into(),
            caption: "Accuracy over training.".into(),
            latex_caption: "Accuracy over training.".into(),
            label: "fig:acc".into(),
            context: "As shown in Fig.~\\ref{fig:acc}, accuracy rises by 20%.".into(),
            citing_paragraph_count: 1,
        }
    }

    fn text_endpoint(script: MockScript) -> (Endpoint, Arc<MockBackend>) {
        let mock = Arc::new(MockBackend::new(script));
        let cfg = ModelEndpointConfig::new(ModelRole::Text, "mock").with_backoff_ms(0);
        (Endpoint::new(cfg, mock.clone()), mock)
    }

    #[test]
    fn prefix_rule() {
        assert!(has_claim_prefix("The figure shows accuracy rises by 20%."));
        assert!(has_claim_prefix("  the   FIGURE shows x"));
        assert!(!has_claim_prefix("Figure 2 shows x"));
        assert!(!has_claim_prefix("The figure shows"));
    }

    #[test]
    fn extracts_conforming_claims() {
        let script = MockScript::default().rule(MockRule::new(
            PromptName::ClaimExtract,
            "<Patterns>\nThe figure shows accuracy rises by 20%.\nAccuracy is high.\n</Patterns>",
        ));
        let (ep, _) = text_endpoint(script);
        let out = extract_claims(&ep, &PromptSet::builtin(), &ctx()).unwrap();
        assert_eq!(out.status, ClaimStatus::Extracted);
        assert_eq!(out.claims.len(), 1);
        assert_eq!(out.claims[0].text, "The figure shows accuracy rises by 20%.");
        assert_eq!(out.claims[0].key(), "2301.00001#2#0");
        assert_eq!(out.rejected_lines, 1);
    }

    #[test]
    fn none_gives_no_claims() {
        let (ep, _) = text_endpoint(MockScript::default().rule(MockRule::new(PromptName::ClaimExtract, "None")));
        let out = extract_claims(&ep, &PromptSet::builtin(), &ctx()).unwrap();
        assert_eq!(out.status, ClaimStatus::NoneSignal);
        assert!(out.claims.is_empty());
    }

    #[test]
    fn malformed_retried_once() {
        let (ep, mock) = text_endpoint(
            MockScript::default()
                .rule(MockRule::new(PromptName::ClaimExtract, "chatter").on_sample(0))
                .rule(MockRule::new(PromptName::ClaimExtract, "<Patterns>The figure shows z.</Patterns>").on_sample(1)),
        );
        let out = extract_claims(&ep, &PromptSet::builtin(), &ctx()).unwrap();
        assert_eq!(out.claims.len(), 1);
        assert_eq!(mock.calls().len(), 2);

        let (ep, mock) = text_endpoint(MockScript::default().rule(MockRule::new(PromptName::ClaimExtract, "chatter")));
        let out = extract_claims(&ep, &PromptSet::builtin(), &ctx()).unwrap();
        assert_eq!(out.status, ClaimStatus::Malformed);
        assert_eq!(mock.calls().len(), 2);
    }

    const GOOD_QA: &str = "<question>How long does the trajectory last?</question>\n<options>\nA. about 60 seconds\nB. about 180 seconds\nC. about 600 seconds\nD. about 20 seconds\n</options>\n<answer>B</answer>";

    #[test]
    fn parse_good_response() {
        let parsed = parse_qa_response(GOOD_QA).unwrap();
        assert_eq!(parsed.question, "How long does the trajectory last?");
        assert_eq!(parsed.options.len(), 4);
        assert_eq!(parsed.correct_index, 1);
    }

    #[test]
    fn parse_rejects_bad_shapes() {
        assert_eq!(parse_qa_response("None"), Err(QaParseError::Declined));
        assert!(matches!(parse_qa_response("just text"), Err(QaParseError::Structure(_))));
        let dup = GOOD_QA.replace("about 600 seconds", "about  60 seconds");
        assert!(matches!(parse_qa_response(&dup), Err(QaParseError::Invalid(_))));
        let three = GOOD_QA.replace("D. about 20 seconds\n", "");
        assert!(matches!(parse_qa_response(&three), Err(QaParseError::Invalid(_))));
        let bad_answer = GOOD_QA.replace("<answer>B</answer>", "<answer>E</answer>");
        assert!(matches!(parse_qa_response(&bad_answer), Err(QaParseError::Invalid(_))));
        let empty_correct = GOOD_QA.replace("B. about 180 seconds", "B. ");
        assert!(matches!(parse_qa_response(&empty_correct), Err(QaParseError::Invalid(_))));
    }

    #[test]
    fn answer_by_text() {
        let r = GOOD_QA.replace("<answer>B</answer>", "<answer>about 180 seconds</answer>");
        assert_eq!(parse_qa_response(&r).unwrap().correct_index, 1);
    }

    #[test]
    fn shuffle_preserves_correct_answer() {
        let parsed = parse_qa_response(GOOD_QA).unwrap();
        let mut positions = [0usize; 4];
        for i in 0..400 {
            let key = format!("k{i}");
            let (opts, correct, perm) = shuffle_options(&parsed, 42, &key);
            assert_eq!(opts[correct], "about 180 seconds");
            let mut sorted = perm.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
            positions[correct] += 1;
            assert_eq!(shuffle_options(&parsed, 42, &key), (opts, correct, perm));
        }
        assert!(positions.iter().all(|&n| n > 60), "{positions:?}");
    }

    fn claim(text: &str) -> AtomicClaim {
        AtomicClaim {
            figure_key: ctx().key(),
            ordinal: 0,
            text: text.into(),
        }
    }

    #[test]
    fn generate_declines_vague_claims() {
        let vague = "The figure shows the workflow of self-supervision.";
        let script = MockScript::default()
            .rule(MockRule::new(PromptName::QaGenerate, "None").containing(vague))
            .rule(MockRule::new(PromptName::QaGenerate, GOOD_QA));
        let (ep, _) = text_endpoint(script);
        let p = PromptSet::builtin();
        let out = generate_qa(&ep, &p, &claim(vague), "cap", "ctx", 1).unwrap();
        assert_eq!(out, QaOutcome::Declined { reason: DeclineReason::ModelDeclined });
        let out = generate_qa(&ep, &p, &claim("The figure shows a 180 s trajectory."), "cap", "ctx", 1).unwrap();
        let QaOutcome::Generated { candidate } = out else { panic!("expected candidate") };
        assert_eq!(candidate.correct_option(), "about 180 seconds");
        assert!(candidate.validate().is_ok());
    }

    #[test]
    fn generate_declines_duplicates() {
        let dup = GOOD_QA.replace("about 600 seconds", "about 60 seconds");
        let (ep, mock) = text_endpoint(MockScript::default().rule(MockRule::new(PromptName::QaGenerate, dup)));
        let out = generate_qa(&ep, &PromptSet::builtin(), &claim("The figure shows x."), "cap", "ctx", 1).unwrap();
        assert!(matches!(out, QaOutcome::Declined { reason: DeclineReason::MalformedQa(_) }));
        assert_eq!(mock.calls().len(), 1);
    }

    #[test]
    fn claim_qa_serde_shape() {
        let rec = ClaimQa {
            claim_key: "a#0#1".into(),
            figure_key: ctx().key(),
            claim: "c".into(),
            outcome: QaOutcome::Declined { reason: DeclineReason::ModelDeclined },
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"status\":\"declined\""), "{json}");
        assert_eq!(serde_json::from_str::<ClaimQa>(&json).unwrap(), rec);
    }
}
