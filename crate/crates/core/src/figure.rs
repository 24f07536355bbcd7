//! Binding corpus figure/caption pairs to their LaTeX figure environments
//! and collecting the paragraphs that cite them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::latex::{balanced_group_end, CleanPaper, RawPaper};

/// Caption similarity needed for a corpus caption to bind to an environment.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.9;

pub const CITE_PLACEHOLDER: &str = "<cit.>";
pub const REF_PLACEHOLDER: &str = "<ref>";

const FIGURE_ENVS: &[&str] = &["figure", "figure*", "wrapfigure", "SCfigure"];
const SUBFIGURE_ENVS: &[&str] = &["subfigure", "subfigure*", "subfloat"];
const SUBFIGURE_COMMANDS: &[&str] = &["subfloat", "subfigure", "subcaptionbox"];

/// Stable identity of a figure within a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FigureKey {
    pub arxiv_id: String,
    pub figure_index: usize,
}

impl fmt::Display for FigureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.arxiv_id, self.figure_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FigureEnvironment {
    /// Byte range of the whole environment within the paper body.
    pub span: Range<usize>,
    pub caption_raw: String,
    pub caption_normalized: String,
    pub labels: Vec<String>,
    /// First label outside any subfigure.
    pub primary_label: Option<String>,
}

impl FigureEnvironment {
    /// Label used as the figure's citation key.
    pub fn citation_key(&self) -> Option<&str> {
        self.primary_label
            .as_deref()
            .or_else(|| self.labels.first().map(String::as_str))
    }
}

/// Figure with its caption, label and citing context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureContext {
    pub arxiv_id: String,
    pub primary_category: String,
    pub figure_index: usize,
    pub figure_image_ref: String,
    /// Caption as supplied by the corpus.
    pub caption: String,
    /// Caption as written in the LaTeX source, kept for provenance.
    pub latex_caption: String,
    pub label: String,
    pub context: String,
    pub citing_paragraph_count: usize,
}

impl FigureContext {
    pub fn key(&self) -> FigureKey {
        FigureKey {
            arxiv_id: self.arxiv_id.clone(),
            figure_index: self.figure_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiscardKind {
    EmptyCaption,
    NoEnvironmentMatch,
    AmbiguousMatch,
    NoLabel,
    NoCitingParagraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardReason {
    pub kind: DiscardKind,
    pub detail: String,
}

impl DiscardReason {
    pub fn new(kind: DiscardKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureDiscard {
    pub arxiv_id: String,
    pub figure_index: usize,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Extraction {
    pub contexts: Vec<FigureContext>,
    pub discards: Vec<FigureDiscard>,
}

impl Extraction {
    pub fn discard_counts(&self) -> BTreeMap<DiscardKind, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.discards {
            *counts.entry(d.reason.kind).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub threshold: f64,
    pub citation_commands: Vec<String>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_MATCH_THRESHOLD,
            citation_commands: vec!["ref".into(), "cref".into(), "autoref".into()],
        }
    }
}

// ---------------------------------------------------------------------------
// Caption normalization
// ---------------------------------------------------------------------------

fn command_at(s: &str, pos: usize) -> Option<(&str, usize)> {
    let bytes = s.as_bytes();
    let start = pos + 1;
    if start >= bytes.len() {
        return None;
    }
    if bytes[start].is_ascii_alphabetic() {
        let end = start
            + bytes[start..]
                .iter()
                .take_while(|b| b.is_ascii_alphabetic())
                .count();
        Some((&s[start..end], end))
    } else {
        let ch = s[start..].chars().next()?;
        Some((&s[start..start + ch.len_utf8()], start + ch.len_utf8()))
    }
}

fn skip_ws(s: &str, mut pos: usize) -> usize {
    while pos < s.len() && s.as_bytes()[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

fn skip_star(s: &str, pos: usize) -> usize {
    if s[pos..].starts_with('*') {
        pos + 1
    } else {
        pos
    }
}

fn skip_optional(s: &str, mut pos: usize) -> usize {
    loop {
        let p = skip_ws(s, pos);
        if !s[p..].starts_with('[') {
            return pos;
        }
        match s[p..].find(']') {
            Some(n) => pos = p + n + 1,
            None => return pos,
        }
    }
}

/// Skips `count` mandatory braced arguments, returning the position after
/// them.
fn skip_args(s: &str, mut pos: usize, count: usize) -> usize {
    for _ in 0..count {
        let p = skip_ws(s, pos);
        match balanced_group_end(s, p) {
            Some(end) => pos = end,
            None => break,
        }
    }
    pos
}

fn math_end(s: &str, pos: usize, closing: &str) -> usize {
    s[pos..].find(closing).map_or(s.len(), |n| pos + n)
}

/// Converts a LaTeX caption to plain text.
///
/// Formatting commands keep their argument text, citations and references
/// become placeholders, math delimiters are dropped while the math itself is
/// copied literally, and whitespace is collapsed.
pub fn normalize_caption(caption_latex: &str) -> String {
    let s = caption_latex;
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' => i += 1,
            b'~' => {
                out.push(' ');
                i += 1;
            }
            b'$' => {
                let (open, close) = if s[i..].starts_with("$$") { (2, "$$") } else { (1, "$") };
                let start = i + open;
                let end = math_end(s, start, close);
                out.push_str(&s[start..end]);
                i = (end + close.len()).min(s.len());
            }
            b'\\' => {
                let Some((name, after)) = command_at(s, i) else {
                    i += 1;
                    continue;
                };
                i = normalize_command(s, name, after, &mut out);
            }
            _ => {
                let ch = s[i..].chars().next().unwrap();
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    collapse_whitespace(&out)
}

/// Handles one control sequence; returns the position to continue from.
fn normalize_command(s: &str, name: &str, after: usize, out: &mut String) -> usize {
    match name {
        "%" | "&" | "_" | "#" | "$" | "{" | "}" => {
            out.push_str(name);
            after
        }
        "\\" | " " | "," | ";" | ":" | "quad" | "qquad" | "newline" => {
            out.push(' ');
            skip_optional(s, after)
        }
        "(" => {
            let end = math_end(s, after, "\\)");
            out.push_str(&s[after..end]);
            (end + 2).min(s.len())
        }
        "[" => {
            let end = math_end(s, after, "\\]");
            out.push_str(&s[after..end]);
            (end + 2).min(s.len())
        }
        "ldots" | "dots" | "cdots" => {
            out.push_str("...");
            after
        }
        "'" | "`" | "^" | "\"" | "~" | "=" | "." => after,
        "cite" | "citep" | "citet" | "citealp" | "citealt" | "citeauthor" | "citeyear"
        | "Cite" | "parencite" | "textcite" | "autocite" | "footcite" => {
            out.push_str(CITE_PLACEHOLDER);
            let p = skip_optional(s, skip_star(s, after));
            skip_args(s, p, 1)
        }
        "ref" | "cref" | "Cref" | "autoref" | "eqref" | "pageref" | "subref" | "nameref" => {
            out.push_str(REF_PLACEHOLDER);
            let p = skip_star(s, after);
            skip_args(s, p, 1)
        }
        "label" | "vspace" | "hspace" | "color" | "footnote" | "footnotemark" | "phantom" => {
            let p = skip_optional(s, skip_star(s, after));
            skip_args(s, p, 1)
        }
        "includegraphics" => {
            let p = skip_optional(s, skip_star(s, after));
            skip_args(s, p, 1)
        }
        "href" | "textcolor" | "colorbox" => skip_args(s, after, 1),
        _ => skip_optional(s, skip_star(s, after)),
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Key used for caption comparison: lowercase with collapsed whitespace.
pub fn caption_match_key(normalized: &str) -> String {
    collapse_whitespace(&normalized.to_lowercase())
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance_chars(&a, &b)
}

fn edit_distance_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            curr[j + 1] = substitution.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `1 - distance / max_len`, or 1.0 when both strings are empty.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance_chars(&a, &b) as f64 / longest as f64
}

/// Picks the single environment whose caption is at least `threshold`
/// similar to the corpus caption. Returns the environment's index.
pub fn match_caption_to_environment(
    corpus_caption: &str,
    environments: &[FigureEnvironment],
    threshold: f64,
) -> Result<usize, DiscardReason> {
    let target = caption_match_key(&normalize_caption(corpus_caption));
    let target_len = target.chars().count();
    let mut hits = Vec::new();
    for (idx, env) in environments.iter().enumerate() {
        let candidate = caption_match_key(&env.caption_normalized);
        let cand_len = candidate.chars().count();
        let longest = target_len.max(cand_len);
        if longest > 0 {
            // Length difference alone bounds the similarity from above.
            let bound = 1.0 - target_len.abs_diff(cand_len) as f64 / longest as f64;
            if bound < threshold {
                continue;
            }
        }
        if levenshtein_similarity(&target, &candidate) >= threshold {
            hits.push(idx);
        }
    }
    match hits.as_slice() {
        [] => Err(DiscardReason::new(
            DiscardKind::NoEnvironmentMatch,
            format!("no figure environment caption reaches similarity {threshold}"),
        )),
        [one] => Ok(*one),
        many => Err(DiscardReason::new(
            DiscardKind::AmbiguousMatch,
            format!("{} figure environments match the caption", many.len()),
        )),
    }
}

// ---------------------------------------------------------------------------
// Figure environments
// ---------------------------------------------------------------------------

fn env_name_at(s: &str, pos: usize, keyword: &str) -> Option<(String, usize)> {
    s[pos..].strip_prefix(keyword)?;
    let p = skip_ws(s, pos + keyword.len());
    let end = balanced_group_end(s, p)?;
    Some((s[p + 1..end - 1].trim().to_string(), end))
}

/// Finds every top-level figure environment in `body`.
pub fn find_figure_environments(body: &str) -> Vec<FigureEnvironment> {
    let mut envs = Vec::new();
    let mut i = 0;
    while let Some(n) = body[i..].find("\\begin") {
        let start = i + n;
        let Some((name, after)) = env_name_at(body, start, "\\begin") else {
            i = start + 6;
            continue;
        };
        if !FIGURE_ENVS.contains(&name.as_str()) {
            i = after;
            continue;
        }
        let end = matching_end(body, after, &name).unwrap_or(body.len());
        envs.push(describe_environment(body, start..end));
        i = end;
    }
    envs
}

/// Position just past the `\end{name}` that closes an environment opened
/// before `from`.
fn matching_end(s: &str, from: usize, name: &str) -> Option<usize> {
    let mut depth = 1;
    let mut i = from;
    while i < s.len() {
        let n = s[i..].find('\\')?;
        let pos = i + n;
        if let Some((env, after)) = env_name_at(s, pos, "\\begin") {
            if env == name {
                depth += 1;
            }
            i = after;
        } else if let Some((env, after)) = env_name_at(s, pos, "\\end") {
            if env == name {
                depth -= 1;
                if depth == 0 {
                    return Some(after);
                }
            }
            i = after;
        } else {
            i = pos + 1;
        }
    }
    None
}

/// Byte ranges (relative to `text`) covered by subfigures.
fn subfigure_regions(text: &str) -> Vec<Range<usize>> {
    let mut regions = Vec::new();
    let mut i = 0;
    while let Some(n) = text[i..].find('\\') {
        let pos = i + n;
        if let Some((env, after)) = env_name_at(text, pos, "\\begin") {
            if SUBFIGURE_ENVS.contains(&env.as_str()) {
                let end = matching_end(text, after, &env).unwrap_or(text.len());
                regions.push(pos..end);
                i = end;
            } else {
                i = after;
            }
            continue;
        }
        match command_at(text, pos) {
            Some((name, after)) if SUBFIGURE_COMMANDS.contains(&name) => {
                let mut p = after;
                loop {
                    let q = skip_ws(text, p);
                    if text[q..].starts_with('[') {
                        p = match text[q..].find(']') {
                            Some(m) => q + m + 1,
                            None => break,
                        };
                    } else if let Some(end) = balanced_group_end(text, q) {
                        p = end;
                    } else {
                        break;
                    }
                }
                regions.push(pos..p);
                i = p.max(after);
            }
            Some((_, after)) => i = after,
            None => i = pos + 1,
        }
    }
    regions
}

fn in_regions(regions: &[Range<usize>], pos: usize) -> bool {
    regions.iter().any(|r| r.contains(&pos))
}

fn label_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\label\s*\{([^}]*)\}").unwrap())
}

/// Every `\label{..}` argument inside the environment, in order, subfigure
/// labels included.
pub fn extract_figure_labels(body: &str, env: &FigureEnvironment) -> Vec<String> {
    labels_with_positions(&body[env.span.clone()])
        .into_iter()
        .map(|(_, l)| l)
        .collect()
}

fn labels_with_positions(text: &str) -> Vec<(usize, String)> {
    label_regex()
        .captures_iter(text)
        .filter_map(|c| {
            let label = c.get(1)?.as_str().trim();
            (!label.is_empty()).then(|| (c.get(0).unwrap().start(), label.to_string()))
        })
        .collect()
}

/// Returns (position, raw argument) of each `\caption` in `text`.
fn captions(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(n) = text[i..].find("\\caption") {
        let pos = i + n;
        let Some((name, after)) = command_at(text, pos) else {
            break;
        };
        i = after;
        if name != "caption" {
            continue;
        }
        let p = skip_ws(text, skip_optional(text, skip_star(text, after)));
        if let Some(end) = balanced_group_end(text, p) {
            out.push((pos, text[p + 1..end - 1].to_string()));
            i = end;
        }
    }
    out
}

fn describe_environment(body: &str, span: Range<usize>) -> FigureEnvironment {
    let text = &body[span.clone()];
    let regions = subfigure_regions(text);
    let caps = captions(text);
    let caption_raw = caps
        .iter()
        .find(|(pos, _)| !in_regions(&regions, *pos))
        .or_else(|| caps.first())
        .map(|(_, c)| c.clone())
        .unwrap_or_default();
    let labels = labels_with_positions(text);
    let primary_label = labels
        .iter()
        .find(|(pos, _)| !in_regions(&regions, *pos))
        .map(|(_, l)| l.clone());
    FigureEnvironment {
        span,
        caption_normalized: normalize_caption(&caption_raw),
        caption_raw,
        labels: labels.into_iter().map(|(_, l)| l).collect(),
        primary_label,
    }
}

// ---------------------------------------------------------------------------
// Citations
// ---------------------------------------------------------------------------

/// Matches reference commands and captures their key list.
#[derive(Debug, Clone)]
pub struct CitationMatcher {
    re: Regex,
}

impl CitationMatcher {
    pub fn new(commands: &[String]) -> Self {
        let alternatives = commands
            .iter()
            .map(|c| regex::escape(c))
            .collect::<Vec<_>>()
            .join("|");
        let re = Regex::new(&format!(r"\\(?:{alternatives})\*?\s*\{{([^}}]*)\}}"))
            .expect("citation regex");
        Self { re }
    }

    /// True when any reference command in `paragraph` has `label` as one of
    /// its comma-separated keys.
    pub fn cites(&self, paragraph: &str, label: &str) -> bool {
        self.re.captures_iter(paragraph).any(|c| {
            c.get(1)
                .map_or(false, |keys| keys.as_str().split(',').any(|k| k.trim() == label))
        })
    }

    pub fn cites_any(&self, paragraph: &str, labels: &[&str]) -> bool {
        labels.iter().any(|l| self.cites(paragraph, l))
    }
}

impl Default for CitationMatcher {
    fn default() -> Self {
        Self::new(&ExtractConfig::default().citation_commands)
    }
}

/// Paragraphs citing `label` via `\ref`, `\cref` or `\autoref`, in order.
pub fn find_citing_paragraphs<'a>(label: &str, paragraphs: &'a [String]) -> Vec<&'a str> {
    let matcher = CitationMatcher::default();
    paragraphs
        .iter()
        .filter(|p| matcher.cites(p, label))
        .map(String::as_str)
        .collect()
}

/// Extracts a figure context for every figure/caption pair in the paper, or
/// the reason it was dropped. Every pair lands in exactly one of the two
/// output lists.
pub fn build_figure_contexts(raw: &RawPaper, clean: &CleanPaper, config: &ExtractConfig) -> Extraction {
    let envs = find_figure_environments(&clean.body);
    let matcher = CitationMatcher::new(&config.citation_commands);
    let spans = clean.paragraph_spans();

    let matched: Vec<Result<usize, DiscardReason>> = raw
        .figure_caption_pairs
        .iter()
        .map(|pair| {
            if pair.caption.trim().is_empty() {
                return Err(DiscardReason::new(DiscardKind::EmptyCaption, "corpus caption is empty"));
            }
            match_caption_to_environment(&pair.caption, &envs, config.threshold)
        })
        .collect();

    let mut env_users: HashMap<usize, usize> = HashMap::new();
    for env_idx in matched.iter().flatten() {
        *env_users.entry(*env_idx).or_insert(0) += 1;
    }

    let mut out = Extraction::default();
    for (pair, matched) in raw.figure_caption_pairs.iter().zip(matched) {
        let discard = |reason: DiscardReason| FigureDiscard {
            arxiv_id: raw.arxiv_id.clone(),
            figure_index: pair.figure_index,
            reason,
        };
        let env_idx = match matched {
            Ok(idx) => idx,
            Err(reason) => {
                out.discards.push(discard(reason));
                continue;
            }
        };
        if env_users[&env_idx] > 1 {
            out.discards.push(discard(DiscardReason::new(
                DiscardKind::AmbiguousMatch,
                "figure environment matched by more than one corpus figure",
            )));
            continue;
        }
        let env = &envs[env_idx];
        let Some(label) = env.citation_key() else {
            out.discards.push(discard(DiscardReason::new(
                DiscardKind::NoLabel,
                "matched figure environment has no \\label",
            )));
            continue;
        };
        let mut keys: Vec<&str> = vec![label];
        for l in &env.labels {
            if !keys.contains(&l.as_str()) {
                keys.push(l);
            }
        }
        let citing: Vec<&str> = clean
            .paragraphs
            .iter()
            .zip(&spans)
            .filter(|(_, span)| span.end <= env.span.start || span.start >= env.span.end)
            .filter(|(p, _)| matcher.cites_any(p, &keys))
            .map(|(p, _)| p.as_str())
            .collect();
        if citing.is_empty() {
            out.discards.push(discard(DiscardReason::new(
                DiscardKind::NoCitingParagraph,
                format!("label {label} is never referenced outside its figure"),
            )));
            continue;
        }
        out.contexts.push(FigureContext {
            arxiv_id: raw.arxiv_id.clone(),
            primary_category: raw.primary_category.clone(),
            figure_index: pair.figure_index,
            figure_image_ref: pair.image.clone(),
            caption: pair.caption.clone(),
            latex_caption: env.caption_raw.clone(),
            label: label.to_string(),
            context: citing.join(&clean.separator),
            citing_paragraph_count: citing.len(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latex::{prepare_paper, FigureCaptionPair, PrepConfig};
    use proptest::prelude::*;

    /// Exhaustive recursion over all edit scripts; only usable on short
    /// strings.
    fn brute_distance(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute_distance(ra, rb) + usize::from(x != y);
                let del = brute_distance(ra, b) + 1;
                let ins = brute_distance(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_caption("\\textbf{Results} for $k=1$"), "Results for k=1");
        assert_eq!(normalize_caption("plain caption"), "plain caption");
        assert_eq!(normalize_caption("  a   b  "), "a b");
    }

    #[test]
    fn normalize_placeholders_and_specials() {
        assert_eq!(
            normalize_caption("Error bars~\\cite[p.~3]{a,b}; see \\cref{fig:x}. 5\\% \\& more\\label{fig:y}"),
            "Error bars <cit.>; see <ref>. 5% & more"
        );
        assert_eq!(normalize_caption("\\emph{a}\\\\b \\(x^2\\)"), "a b x^2");
        assert_eq!(normalize_caption("unclosed {\\bf brace"), "unclosed brace");
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(levenshtein_similarity("abc", "abc"), 1.0);
        assert_eq!(levenshtein_similarity("abc", ""), 0.0);
        assert_eq!(levenshtein_similarity("", ""), 1.0);
        assert_eq!(levenshtein_similarity("kitten", "sitting"), 1.0 - 3.0 / 7.0);
    }

    fn env(caption: &str) -> FigureEnvironment {
        FigureEnvironment {
            span: 0..0,
            caption_raw: caption.into(),
            caption_normalized: normalize_caption(caption),
            labels: vec![],
            primary_label: None,
        }
    }

    #[test]
    fn match_unique_and_ambiguous() {
        let envs = vec![env("Loss over epochs."), env("Accuracy on \\textbf{test}.")];
        assert_eq!(match_caption_to_environment("accuracy on test.", &envs, 0.9), Ok(1));
        let dup = vec![env("Same caption"), env("Same caption")];
        assert_eq!(
            match_caption_to_environment("Same caption", &dup, 0.9).unwrap_err().kind,
            DiscardKind::AmbiguousMatch
        );
        assert_eq!(
            match_caption_to_environment("Unrelated", &envs, 0.9).unwrap_err().kind,
            DiscardKind::NoEnvironmentMatch
        );
    }

    #[test]
    fn noisy_caption_rejected() {
        let caption: String = "abcdefghij".repeat(10);
        let mut noisy: Vec<char> = caption.chars().collect();
        for i in (0..100).step_by(7).take(15) {
            noisy[i] = '#';
        }
        let noisy: String = noisy.into_iter().collect();
        assert_eq!(brute_like_dp(&caption, &noisy), 15);
        let envs = vec![env(&caption)];
        assert_eq!(
            match_caption_to_environment(&noisy, &envs, 0.9).unwrap_err().kind,
            DiscardKind::NoEnvironmentMatch
        );
    }

    /// Full-matrix DP, written independently of the rolling version.
    fn brute_like_dp(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in m.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            m[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                m[i][j] = (m[i - 1][j - 1] + c).min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
            }
        }
        m[a.len()][b.len()]
    }

    #[test]
    fn labels_including_subfigures() {
        let body = "\\begin{figure}\\begin{subfigure}{.5\\linewidth}\\caption{a}\\label{fig:a}\\end{subfigure}\
\\begin{subfigure}{.5\\linewidth}\\caption{b}\\label{fig:b}\\end{subfigure}\
\\caption{Main}\\label{fig:main}\\end{figure}";
        let envs = find_figure_environments(body);
        assert_eq!(envs.len(), 1);
        assert_eq!(extract_figure_labels(body, &envs[0]), vec!["fig:a", "fig:b", "fig:main"]);
        assert_eq!(envs[0].caption_raw, "Main");
        assert_eq!(envs[0].citation_key(), Some("fig:main"));
    }

    #[test]
    fn single_label_and_none() {
        let body = "\\begin{figure*}[t]\\centering\\caption{X}\\label{fig:main}\\end{figure*} \\begin{figure}\\caption{Y}\\end{figure}";
        let envs = find_figure_environments(body);
        assert_eq!(envs.len(), 2);
        assert_eq!(extract_figure_labels(body, &envs[0]), vec!["fig:main"]);
        assert!(extract_figure_labels(body, &envs[1]).is_empty());
    }

    #[test]
    fn citing_paragraph_rules() {
        let paras: Vec<String> = vec![
            "As shown in \\cref{fig:x}, accuracy rises.".into(),
            "Unrelated \\ref{fig:xy}.".into(),
            "See \\autoref{fig:x} and \\ref{tab:t}.".into(),
            "Both \\cref{fig:y, fig:x}.".into(),
            "Eq \\eqref{fig:x} only.".into(),
        ];
        let got = find_citing_paragraphs("fig:x", &paras);
        assert_eq!(got, vec![paras[0].as_str(), paras[2].as_str(), paras[3].as_str()]);
    }

    fn raw(source: &str, captions: &[&str]) -> RawPaper {
        RawPaper {
            arxiv_id: "0000.00001".into(),
            primary_category: "cs".into(),
            latex_source: source.into(),
            figure_caption_pairs: captions
                .iter()
                .enumerate()
                .map(|(i, c)| FigureCaptionPair {
                    figure_index: i,
                    image: format!("img{i}.png"),
                    caption: (*c).into(),
                })
                .collect(),
        }
    }

    #[test]
    fn build_contexts_cited_twice() {
        let src = "Intro \\ref{fig:r}.\n\n\\begin{figure}\\caption{Results}\\label{fig:r}\\end{figure}\n\nMore in \\cref{fig:r}.\n\nNothing.";
        let paper = raw(src, &["Results"]);
        let clean = prepare_paper(&paper, &PrepConfig::default()).unwrap();
        let ex = build_figure_contexts(&paper, &clean, &ExtractConfig::default());
        assert!(ex.discards.is_empty());
        assert_eq!(ex.contexts.len(), 1);
        let ctx = &ex.contexts[0];
        assert_eq!(ctx.citing_paragraph_count, 2);
        assert_eq!(ctx.context, "Intro \\ref{fig:r}.\n\nMore in \\cref{fig:r}.");
        assert_eq!(ctx.label, "fig:r");
    }

    #[test]
    fn build_contexts_discards() {
        let src = "\\begin{figure}\\caption{Lonely}\\label{fig:l}\\end{figure}\n\n\\begin{figure}\\caption{Unlabeled}\\end{figure}\n\nSee \\ref{fig:l2}.";
        let paper = raw(src, &["", "Lonely", "Unlabeled", "Missing"]);
        let clean = prepare_paper(&paper, &PrepConfig::default()).unwrap();
        let ex = build_figure_contexts(&paper, &clean, &ExtractConfig::default());
        let kinds: Vec<_> = ex.discards.iter().map(|d| d.reason.kind).collect();
        assert_eq!(
            kinds,
            vec![
                DiscardKind::EmptyCaption,
                DiscardKind::NoCitingParagraph,
                DiscardKind::NoLabel,
                DiscardKind::NoEnvironmentMatch
            ]
        );
    }

    #[test]
    fn two_figures_one_environment_both_ambiguous() {
        let src = "\\begin{figure}\\caption{Shared caption here}\\label{fig:s}\\end{figure}\n\nSee \\ref{fig:s}.";
        let paper = raw(src, &["Shared caption here", "Shared caption here!"]);
        let clean = prepare_paper(&paper, &PrepConfig::default()).unwrap();
        let ex = build_figure_contexts(&paper, &clean, &ExtractConfig::default());
        assert!(ex.contexts.is_empty());
        assert!(ex.discards.iter().all(|d| d.reason.kind == DiscardKind::AmbiguousMatch));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn distance_matches_brute_force(a in "[abc]{0,7}", b in "[abc]{0,7}") {
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            prop_assert_eq!(edit_distance(&a, &b), brute_distance(&ac, &bc));
        }

        #[test]
        fn similarity_symmetric_and_identity(a in "[a-dé ]{0,12}", b in "[a-dé ]{0,12}") {
            prop_assert_eq!(levenshtein_similarity(&a, &b), levenshtein_similarity(&b, &a));
            prop_assert_eq!(levenshtein_similarity(&a, &b) == 1.0, a == b);
        }

        #[test]
        fn triangle_inequality(a in "[ab]{0,8}", b in "[ab]{0,8}", c in "[ab]{0,8}") {
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn exact_threshold_needs_equality(a in "[a-c ]{1,8}", b in "[a-c ]{1,8}") {
            let envs = vec![env(&b)];
            let hit = match_caption_to_environment(&a, &envs, 1.0).is_ok();
            prop_assert_eq!(hit, caption_match_key(&normalize_caption(&a)) == caption_match_key(&normalize_caption(&b)));
        }

        #[test]
        fn citing_is_subsequence(flags in prop::collection::vec(any::<bool>(), 0..12)) {
            let paras: Vec<String> = flags.iter().enumerate()
                .map(|(i, f)| if *f { format!("p{i} \\ref{{fig:k}}") } else { format!("p{i} \\ref{{fig:k2}}") })
                .collect();
            let got = find_citing_paragraphs("fig:k", &paras);
            let expected: Vec<&str> = paras.iter().zip(&flags).filter(|(_, f)| **f).map(|(p, _)| p.as_str()).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
