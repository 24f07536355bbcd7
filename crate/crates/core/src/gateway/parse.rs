//! Parsers for the tagged model responses.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed model response: {0}")]
pub struct MalformedResponse(pub String);

/// What a model picked from a multiple-choice list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selection {
    Letter(char),
    /// The model declined to pick ("None").
    NoneSignal,
    /// Conflicting or out-of-range picks, or no parseable pick at all.
    Ambiguous,
    /// No majority among repeated picks.
    Tie,
}

impl Selection {
    pub fn letter(self) -> Option<char> {
        match self {
            Selection::Letter(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Letter(c) => write!(f, "{c}"),
            Selection::NoneSignal => f.write_str("none"),
            Selection::Ambiguous => f.write_str("ambiguous"),
            Selection::Tie => f.write_str("tie"),
        }
    }
}

impl Serialize for Selection {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selection {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        match s.as_str() {
            "none" => Ok(Selection::NoneSignal),
            "ambiguous" => Ok(Selection::Ambiguous),
            "tie" => Ok(Selection::Tie),
            _ => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_uppercase() => Ok(Selection::Letter(c)),
                    _ => Err(serde::de::Error::custom(format!("invalid selection {s:?}"))),
                }
            }
        }
    }
}

/// Letter for a zero-based option index.
pub fn option_letter(index: usize) -> char {
    assert!(index < 26, "option index {index} out of range");
    (b'A' + index as u8) as char
}

/// Zero-based index of an option letter.
pub fn letter_index(letter: char) -> Option<usize> {
    letter
        .is_ascii_uppercase()
        .then(|| (letter as u8 - b'A') as usize)
}

/// Renders options as `A. text` lines.
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {}", option_letter(i), o))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Canonical response carrying a selection.
pub fn format_option_tag(selection: Selection) -> String {
    match selection {
        Selection::Letter(c) => format!("<option>{c}</option>"),
        _ => "<option>None</option>".to_string(),
    }
}

/// Outcome of parsing a claim-extraction response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternsBlock {
    Claims(Vec<String>),
    NoneSignal,
}

fn is_none_word(s: &str) -> bool {
    let t = s.trim().trim_matches(|c: char| c == '.' || c == '"' || c == '\'' || c == '*');
    t.eq_ignore_ascii_case("none")
}

fn patterns_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<patterns>(.*?)</patterns>").unwrap())
}

fn option_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<option>(.*?)</option>").unwrap())
}

fn bullet_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*\u{2022}]\s+|\d+[.)]\s+)").unwrap())
}

/// Extracts the claims listed inside the first `<Patterns>` block.
pub fn parse_patterns_block(response: &str) -> Result<PatternsBlock, MalformedResponse> {
    let Some(caps) = patterns_regex().captures(response) else {
        if is_none_word(response) {
            return Ok(PatternsBlock::NoneSignal);
        }
        return Err(MalformedResponse("no <Patterns> block".into()));
    };
    let inner = caps.get(1).map_or("", |m| m.as_str());
    if inner.trim().is_empty() || is_none_word(inner) {
        return Ok(PatternsBlock::NoneSignal);
    }
    let claims: Vec<String> = inner
        .lines()
        .map(|l| bullet_regex().replace(l.trim(), "").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    Ok(PatternsBlock::Claims(claims))
}

/// Interprets the contents of one option tag.
fn read_tag(inner: &str, option_count: usize) -> Selection {
    let cleaned = inner.trim().trim_matches(|c: char| !c.is_alphanumeric());
    if cleaned.eq_ignore_ascii_case("none") {
        return Selection::NoneSignal;
    }
    let mut chars = cleaned.chars();
    let letter = match (chars.next(), chars.next()) {
        (Some(c), None) => Some(c),
        (Some(c), Some(next)) if c.is_ascii_alphabetic() && !next.is_alphanumeric() => Some(c),
        _ => None,
    };
    match letter.map(|c| c.to_ascii_uppercase()) {
        Some(c) if letter_index(c).is_some_and(|i| i < option_count) => Selection::Letter(c),
        _ => Selection::Ambiguous,
    }
}

/// Reads the selection from `<option>` tags.
///
/// Every tag must agree; out-of-range letters and disagreements give
/// [`Selection::Ambiguous`].
pub fn parse_option_tag(response: &str, option_count: usize) -> Result<Selection, MalformedResponse> {
    assert!((2..=26).contains(&option_count), "option_count {option_count} out of range");
    let mut found: Option<Selection> = None;
    for caps in option_regex().captures_iter(response) {
        let sel = read_tag(caps.get(1).map_or("", |m| m.as_str()), option_count);
        if sel == Selection::Ambiguous {
            return Ok(Selection::Ambiguous);
        }
        match found {
            None => found = Some(sel),
            Some(prev) if prev == sel => {}
            Some(_) => return Ok(Selection::Ambiguous),
        }
    }
    found.ok_or_else(|| MalformedResponse("no <option> tag".into()))
}

/// Fail-closed variant: a missing tag counts as ambiguous.
pub fn selection_or_ambiguous(response: &str, option_count: usize) -> Selection {
    parse_option_tag(response, option_count).unwrap_or(Selection::Ambiguous)
}

/// Text of the first `<tag>..</tag>` pair, case-insensitive.
pub fn tag_content<'a>(response: &'a str, tag: &str) -> Option<&'a str> {
    let lower = response.to_ascii_lowercase();
    let open = format!("<{}>", tag.to_ascii_lowercase());
    let close = format!("</{}>", tag.to_ascii_lowercase());
    let start = lower.find(&open)? + open.len();
    let end = start + lower[start..].find(&close)?;
    Some(&response[start..end])
}
