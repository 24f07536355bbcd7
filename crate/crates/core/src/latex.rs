//! LaTeX source cleaning: comment removal, macro expansion, bibliography
//! removal and paragraph segmentation.
//!
//! Everything here is a pure function over strings. The scanner is a small
//! hand-written one that only understands as much TeX as the downstream
//! figure/reference extraction needs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default blank-line paragraph separator.
pub const DEFAULT_PARAGRAPH_SEPARATOR: &str = "\n\n";

/// Default bound on macro expansion passes.
pub const DEFAULT_MAX_MACRO_DEPTH: usize = 32;

/// Environments whose content is never touched by the comment stripper.
const VERBATIM_ENVS: &[&str] = &["verbatim", "verbatim*", "Verbatim", "lstlisting", "minted", "comment"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrepError {
    #[error("macro expansion exceeded depth {depth} (last expanded: \\{macro_name})")]
    RecursionLimitExceeded { depth: usize, macro_name: String },
}

/// A paper as it arrives from the corpus: LaTeX source plus the figure and
/// caption pairs attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPaper {
    pub arxiv_id: String,
    pub primary_category: String,
    pub latex_source: String,
    pub figure_caption_pairs: Vec<FigureCaptionPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureCaptionPair {
    pub figure_index: usize,
    pub image: String,
    pub caption: String,
}

/// Comment-free, macro-expanded, bibliography-free paper body.
///
/// `body` is always the paragraphs joined with the separator, so paragraph
/// offsets can be recovered exactly with [`CleanPaper::paragraph_spans`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanPaper {
    pub arxiv_id: String,
    pub body: String,
    pub paragraphs: Vec<String>,
    pub separator: String,
}

impl CleanPaper {
    /// Byte ranges of each paragraph inside `body`.
    pub fn paragraph_spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut spans = Vec::with_capacity(self.paragraphs.len());
        let mut offset = 0;
        for (i, p) in self.paragraphs.iter().enumerate() {
            if i > 0 {
                offset += self.separator.len();
            }
            spans.push(offset..offset + p.len());
            offset += p.len();
        }
        spans
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepConfig {
    pub paragraph_separator: String,
    pub max_macro_depth: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            paragraph_separator: DEFAULT_PARAGRAPH_SEPARATOR.to_string(),
            max_macro_depth: DEFAULT_MAX_MACRO_DEPTH,
        }
    }
}

/// Runs the full cleaning chain on a raw paper.
pub fn prepare_paper(raw: &RawPaper, config: &PrepConfig) -> Result<CleanPaper, PrepError> {
    let source = raw.latex_source.replace("\r\n", "\n");
    let stripped = strip_comments(&source);
    let expanded = expand_macros_with_depth(&stripped, config.max_macro_depth)?;
    let body = strip_bibliography(document_body(&expanded));
    let paragraphs = segment_paragraphs(&body, &config.paragraph_separator);
    Ok(CleanPaper {
        arxiv_id: raw.arxiv_id.clone(),
        body: paragraphs.join(&config.paragraph_separator),
        paragraphs,
        separator: config.paragraph_separator.clone(),
    })
}

fn is_letter(c: u8) -> bool {
    c.is_ascii_alphabetic()
}

/// Number of backslashes immediately preceding `pos`.
fn preceding_backslashes(bytes: &[u8], pos: usize) -> usize {
    bytes[..pos].iter().rev().take_while(|&&b| b == b'\\').count()
}

/// Reads the name of the control sequence starting at `pos` (which must be a
/// backslash). Returns the name and the index just past it.
fn control_sequence(s: &str, pos: usize) -> Option<(&str, usize)> {
    let bytes = s.as_bytes();
    if bytes.get(pos) != Some(&b'\\') {
        return None;
    }
    let start = pos + 1;
    if start >= bytes.len() {
        return None;
    }
    if is_letter(bytes[start]) {
        let mut end = start;
        while end < bytes.len() && is_letter(bytes[end]) {
            end += 1;
        }
        Some((&s[start..end], end))
    } else {
        let ch = s[start..].chars().next()?;
        Some((&s[start..start + ch.len_utf8()], start + ch.len_utf8()))
    }
}

/// If `s[pos..]` starts with `\begin{<env>}` for a verbatim-like env,
/// returns the env name and the index after the closing brace.
fn verbatim_begin(s: &str, pos: usize) -> Option<(&'static str, usize)> {
    let rest = s[pos..].strip_prefix("\\begin{")?;
    for env in VERBATIM_ENVS {
        if let Some(after) = rest.strip_prefix(env) {
            if after.starts_with('}') {
                return Some((env, s.len() - after.len() + 1));
            }
        }
    }
    None
}

/// Removes LaTeX line comments.
///
/// A comment runs from an unescaped `%` up to (not including) the newline.
/// Verbatim-like environments and `\verb` spans are copied through as-is.
pub fn strip_comments(latex: &str) -> String {
    let bytes = latex.as_bytes();
    let mut out = String::with_capacity(latex.len());
    let mut i = 0;
    let mut copied = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' if preceding_backslashes(bytes, i) % 2 == 0 => {
                out.push_str(&latex[copied..i]);
                let end = latex[i..].find('\n').map_or(latex.len(), |n| i + n);
                i = end;
                copied = end;
            }
            b'\\' => {
                if preceding_backslashes(bytes, i) % 2 == 1 {
                    i += 1;
                    continue;
                }
                if let Some((env, after)) = verbatim_begin(latex, i) {
                    let closing = format!("\\end{{{env}}}");
                    i = latex[after..]
                        .find(&closing)
                        .map_or(latex.len(), |n| after + n + closing.len());
                    continue;
                }
                if let Some(end) = verb_span_end(latex, i) {
                    i = end;
                    continue;
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    out.push_str(&latex[copied..]);
    out
}

/// `\verb|...|` and `\verb*|...|`: returns the index past the closing
/// delimiter, or `None` when `pos` does not start a verb span.
fn verb_span_end(s: &str, pos: usize) -> Option<usize> {
    let (name, mut after) = control_sequence(s, pos)?;
    if name != "verb" {
        return None;
    }
    if s[after..].starts_with('*') {
        after += 1;
    }
    let delim = s[after..].chars().next()?;
    if delim.is_whitespace() || delim.is_ascii_alphabetic() {
        return None;
    }
    let body_start = after + delim.len_utf8();
    let line_end = s[body_start..].find('\n').map_or(s.len(), |n| body_start + n);
    s[body_start..line_end]
        .find(delim)
        .map(|n| body_start + n + delim.len_utf8())
}

/// Returns the index just past the balanced `{...}` group opening at `pos`.
pub(crate) fn balanced_group_end(s: &str, pos: usize) -> Option<usize> {
    let bytes = s.as_bytes();
    if bytes.get(pos) != Some(&b'{') {
        return None;
    }
    let mut depth = 0usize;
    let mut i = pos;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                i += 2;
                continue;
            }
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Returns the index just past the `[...]` group opening at `pos`, honoring
/// nested braces inside it.
fn bracket_group_end(s: &str, pos: usize) -> Option<usize> {
    let bytes = s.as_bytes();
    if bytes.get(pos) != Some(&b'[') {
        return None;
    }
    let mut i = pos + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'{' => i = balanced_group_end(s, i)?,
            b']' => return Some(i + 1),
            _ => i += 1,
        }
    }
    None
}

fn skip_whitespace(s: &str, mut pos: usize) -> usize {
    let bytes = s.as_bytes();
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MacroDef {
    params: usize,
    /// Default for the first parameter when declared as optional.
    optional_default: Option<String>,
    body: String,
}

/// Expands user macros with the default depth bound.
pub fn expand_macros(latex: &str) -> Result<String, PrepError> {
    expand_macros_with_depth(latex, DEFAULT_MAX_MACRO_DEPTH)
}

/// Expands `\newcommand`, `\renewcommand` and simple `\def` macros.
///
/// Definitions are collected from the whole document and removed; use sites
/// are then rewritten one level per pass until nothing changes. More than
/// `max_depth` passes means the definitions are cyclic.
pub fn expand_macros_with_depth(latex: &str, max_depth: usize) -> Result<String, PrepError> {
    let (mut text, defs) = collect_definitions(latex);
    if defs.is_empty() {
        return Ok(latex.to_string());
    }
    let mut depth = 0;
    loop {
        let (next, last) = expand_once(&text, &defs);
        match last {
            None => return Ok(next),
            Some(name) => {
                depth += 1;
                if depth > max_depth {
                    return Err(PrepError::RecursionLimitExceeded {
                        depth: max_depth,
                        macro_name: name,
                    });
                }
                text = next;
            }
        }
    }
}

/// Scans for definitions, returning the text with definitions removed.
fn collect_definitions(latex: &str) -> (String, HashMap<String, MacroDef>) {
    let bytes = latex.as_bytes();
    let mut defs = HashMap::new();
    let mut out = String::with_capacity(latex.len());
    let mut copied = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            i += 1;
            continue;
        }
        let Some((name, after)) = control_sequence(latex, i) else {
            i += 1;
            continue;
        };
        let parsed = match name {
            "newcommand" | "renewcommand" | "providecommand" => parse_newcommand(latex, after),
            "def" => parse_def(latex, after),
            _ => None,
        };
        match parsed {
            Some((macro_name, def, end)) => {
                out.push_str(&latex[copied..i]);
                defs.insert(macro_name, def);
                copied = end;
                i = end;
            }
            None => i = after,
        }
    }
    out.push_str(&latex[copied..]);
    (out, defs)
}

/// `\newcommand*{\name}[n][default]{body}` or `\newcommand\name{body}`.
fn parse_newcommand(s: &str, mut pos: usize) -> Option<(String, MacroDef, usize)> {
    if s[pos..].starts_with('*') {
        pos += 1;
    }
    pos = skip_whitespace(s, pos);
    let name = if s[pos..].starts_with('{') {
        let end = balanced_group_end(s, pos)?;
        let inner = s[pos + 1..end - 1].trim();
        let (name, name_end) = control_sequence(inner, 0)?;
        if name_end != inner.len() {
            return None;
        }
        pos = end;
        name.to_string()
    } else {
        let (name, end) = control_sequence(s, pos)?;
        pos = end;
        name.to_string()
    };
    pos = skip_whitespace(s, pos);
    let mut params = 0;
    if s[pos..].starts_with('[') {
        let end = bracket_group_end(s, pos)?;
        params = s[pos + 1..end - 1].trim().parse().ok()?;
        pos = skip_whitespace(s, end);
    }
    let mut optional_default = None;
    if s[pos..].starts_with('[') {
        let end = bracket_group_end(s, pos)?;
        optional_default = Some(s[pos + 1..end - 1].to_string());
        pos = skip_whitespace(s, end);
    }
    let end = balanced_group_end(s, pos)?;
    let body = s[pos + 1..end - 1].to_string();
    Some((name, MacroDef { params, optional_default, body }, end))
}

/// `\def\name#1#2{body}`; anything with delimited parameter text is left
/// alone.
fn parse_def(s: &str, pos: usize) -> Option<(String, MacroDef, usize)> {
    let pos = skip_whitespace(s, pos);
    let (name, mut pos) = control_sequence(s, pos)?;
    let bytes = s.as_bytes();
    let mut params = 0;
    while bytes.get(pos) == Some(&b'#') {
        let digit = *bytes.get(pos + 1)?;
        if digit != b'1' + params as u8 {
            return None;
        }
        params += 1;
        pos += 2;
    }
    if bytes.get(pos) != Some(&b'{') {
        return None;
    }
    let end = balanced_group_end(s, pos)?;
    let body = s[pos + 1..end - 1].to_string();
    Some((
        name.to_string(),
        MacroDef { params, optional_default: None, body },
        end,
    ))
}

/// Reads one undelimited macro argument: a braced group (braces stripped)
/// or a single token.
fn read_argument(s: &str, pos: usize) -> (String, usize) {
    let pos = skip_whitespace(s, pos);
    if pos >= s.len() {
        return (String::new(), pos);
    }
    if s[pos..].starts_with('{') {
        if let Some(end) = balanced_group_end(s, pos) {
            return (s[pos + 1..end - 1].to_string(), end);
        }
    }
    if let Some((_, end)) = control_sequence(s, pos) {
        return (s[pos..end].to_string(), end);
    }
    let ch = s[pos..].chars().next().unwrap_or(' ');
    (ch.to_string(), pos + ch.len_utf8())
}

fn substitute_params(body: &str, args: &[String]) -> String {
    let mut out = String::with_capacity(body.len());
    let mut chars = body.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if c != '#' {
            out.push(c);
            continue;
        }
        match chars.peek().copied() {
            Some((_, '#')) => {
                chars.next();
                out.push('#');
            }
            Some((_, d)) if d.is_ascii_digit() && d != '0' => {
                chars.next();
                let idx = d as usize - '1' as usize;
                if let Some(arg) = args.get(idx) {
                    out.push_str(arg);
                }
            }
            _ => out.push('#'),
        }
    }
    out
}

/// One expansion pass. Returns the new text and the name of the last macro
/// expanded, if any.
fn expand_once(text: &str, defs: &HashMap<String, MacroDef>) -> (String, Option<String>) {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut last = None;
    let mut copied = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            i += 1;
            continue;
        }
        let Some((name, after)) = control_sequence(text, i) else {
            i += 1;
            continue;
        };
        let Some(def) = defs.get(name) else {
            i = after;
            continue;
        };
        let mut args = Vec::with_capacity(def.params);
        let mut pos = after;
        for n in 0..def.params {
            if n == 0 {
                if let Some(default) = &def.optional_default {
                    let p = skip_whitespace(text, pos);
                    if text[p..].starts_with('[') {
                        if let Some(end) = bracket_group_end(text, p) {
                            args.push(text[p + 1..end - 1].to_string());
                            pos = end;
                            continue;
                        }
                    }
                    args.push(default.clone());
                    continue;
                }
            }
            let (arg, end) = read_argument(text, pos);
            args.push(arg);
            pos = end;
        }
        // `\name{}` is the usual way to end a parameterless macro.
        if def.params == 0 && text[pos..].starts_with("{}") {
            pos += 2;
        }
        out.push_str(&text[copied..i]);
        out.push_str(&substitute_params(&def.body, &args));
        last = Some(name.to_string());
        copied = pos;
        i = pos;
    }
    out.push_str(&text[copied..]);
    (out, last)
}

/// Text between `\begin{document}` and `\end{document}`, or all of it when
/// the source has no document environment.
pub fn document_body(latex: &str) -> &str {
    const BEGIN: &str = "\\begin{document}";
    const END: &str = "\\end{document}";
    let Some(start) = latex.find(BEGIN).map(|i| i + BEGIN.len()) else {
        return latex;
    };
    let end = latex[start..].find(END).map_or(latex.len(), |i| start + i);
    &latex[start..end]
}

/// Removes `thebibliography` environments and `\bibliography{..}` /
/// `\printbibliography` commands.
pub fn strip_bibliography(latex: &str) -> String {
    const BEGIN: &str = "\\begin{thebibliography}";
    const END: &str = "\\end{thebibliography}";
    let bytes = latex.as_bytes();
    let mut out = String::with_capacity(latex.len());
    let mut copied = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            i += 1;
            continue;
        }
        if latex[i..].starts_with(BEGIN) {
            out.push_str(&latex[copied..i]);
            let end = latex[i..].find(END).map_or(latex.len(), |n| i + n + END.len());
            copied = end;
            i = end;
            continue;
        }
        let Some((name, after)) = control_sequence(latex, i) else {
            i += 1;
            continue;
        };
        let end = match name {
            "bibliography" => {
                let p = skip_whitespace(latex, after);
                balanced_group_end(latex, p)
            }
            "printbibliography" => {
                let p = skip_whitespace(latex, after);
                Some(bracket_group_end(latex, p).unwrap_or(after))
            }
            _ => None,
        };
        match end {
            Some(end) => {
                out.push_str(&latex[copied..i]);
                copied = end;
                i = end;
            }
            None => i = after,
        }
    }
    out.push_str(&latex[copied..]);
    out
}

/// Splits on `separator`, trims each chunk and drops empty ones.
pub fn segment_paragraphs(body: &str, separator: &str) -> Vec<String> {
    assert!(!separator.is_empty(), "paragraph separator must be non-empty");
    body.split(separator)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_comment_removed_newline_kept() {
        assert_eq!(strip_comments("a % note\nb"), "a \nb");
    }

    #[test]
    fn escaped_percent_kept() {
        assert_eq!(strip_comments("rate is 5\\% high"), "rate is 5\\% high");
    }

    #[test]
    fn double_backslash_then_percent_is_comment() {
        assert_eq!(strip_comments("a\\\\% gone\nb"), "a\\\\\nb");
    }

    #[test]
    fn verbatim_untouched() {
        let s = "\\begin{verbatim}x % y\\end{verbatim}";
        assert_eq!(strip_comments(s), s);
        let s = "\\begin{lstlisting}\nint x; % c\n\\end{lstlisting} % tail";
        assert_eq!(
            strip_comments(s),
            "\\begin{lstlisting}\nint x; % c\n\\end{lstlisting} "
        );
    }

    #[test]
    fn verb_inline_untouched() {
        assert_eq!(strip_comments("use \\verb|%| here % c"), "use \\verb|%| here ");
    }

    #[test]
    fn comment_cannot_open_verbatim() {
        let s = "% \\begin{verbatim}\nkeep % drop\n";
        assert_eq!(strip_comments(s), "\nkeep \n");
    }

    #[test]
    fn newcommand_zero_args() {
        assert_eq!(
            expand_macros("\\newcommand{\\foo}{bar} use \\foo now").unwrap(),
            " use bar now"
        );
    }

    #[test]
    fn empty_group_after_parameterless_macro_is_consumed() {
        assert_eq!(
            expand_macros("\\newcommand{\\m}{GradNorm}The \\m{} curve and \\m{x}").unwrap(),
            "The GradNorm curve and GradNorm{x}"
        );
    }

    #[test]
    fn document_body_drops_preamble() {
        assert_eq!(document_body("\\documentclass{a}\n\\begin{document}\nHi\n\\end{document}\n"), "\nHi\n");
        assert_eq!(document_body("no environment"), "no environment");
        assert_eq!(document_body("\\begin{document}unterminated"), "unterminated");
    }

    #[test]
    fn newcommand_one_arg() {
        assert_eq!(expand_macros("\\newcommand{\\id}[1]{#1} \\id{x}").unwrap(), " x");
    }

    #[test]
    fn newcommand_optional_default() {
        let s = "\\newcommand{\\w}[2][a]{(#1,#2)}\\w{b} \\w[c]{d}";
        assert_eq!(expand_macros(s).unwrap(), "(a,b) (c,d)");
    }

    #[test]
    fn def_forms() {
        assert_eq!(expand_macros("\\def\\x{y}\\x").unwrap(), "y");
        assert_eq!(expand_macros("\\def\\p#1#2{#2#1}\\p{a}{b}").unwrap(), "ba");
    }

    #[test]
    fn delimited_def_flows_through() {
        let s = "\\def\\q#1.{#1} text";
        assert_eq!(expand_macros(s).unwrap(), s);
    }

    #[test]
    fn nested_macros_expand() {
        let s = "\\newcommand{\\a}{\\b!}\\newcommand{\\b}{B}\\a";
        assert_eq!(expand_macros(s).unwrap(), "B!");
    }

    #[test]
    fn macro_name_boundary() {
        let s = "\\newcommand{\\fig}{Figure}\\figure \\fig";
        assert_eq!(expand_macros(s).unwrap(), "\\figure Figure");
    }

    #[test]
    fn self_reference_hits_limit() {
        assert!(matches!(
            expand_macros("\\def\\a{\\a} \\a"),
            Err(PrepError::RecursionLimitExceeded { depth: 32, .. })
        ));
    }

    #[test]
    fn bibliography_env_removed() {
        let s = "body\n\\begin{thebibliography}{9}\\bibitem{x} X\\end{thebibliography}";
        assert_eq!(strip_bibliography(s), "body\n");
        assert_eq!(strip_bibliography("plain body"), "plain body");
    }

    #[test]
    fn bibliography_commands_removed() {
        let s = "a\\bibliographystyle{plain}\\bibliography{refs} b \\printbibliography[title=R] c";
        assert_eq!(strip_bibliography(s), "a\\bibliographystyle{plain} b  c");
    }

    #[test]
    fn two_bibliographies_removed() {
        let s = "x\\begin{thebibliography}{1}A\\end{thebibliography}y\\begin{thebibliography}{1}B\\end{thebibliography}z";
        assert_eq!(strip_bibliography(s), "xyz");
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_paragraphs("p1\n\np2", "\n\n"), vec!["p1", "p2"]);
        assert_eq!(segment_paragraphs("p1", "\n\n"), vec!["p1"]);
        assert_eq!(segment_paragraphs("p1\n\n\n\np2", "\n\n"), vec!["p1", "p2"]);
    }

    #[test]
    fn clean_body_is_joined_paragraphs() {
        let raw = RawPaper {
            arxiv_id: "1".into(),
            primary_category: "cs".into(),
            latex_source: "  a\r\n\r\n\r\nb % c\n\n".into(),
            figure_caption_pairs: vec![],
        };
        let clean = prepare_paper(&raw, &PrepConfig::default()).unwrap();
        assert_eq!(clean.paragraphs, vec!["a", "b"]);
        assert_eq!(clean.body, "a\n\nb");
        let spans = clean.paragraph_spans();
        assert_eq!(&clean.body[spans[1].clone()], "b");
    }

    fn latex_like() -> impl Strategy<Value = String> {
        let atoms = prop::sample::select(vec![
            "a", "b", " ", "\n", "\n\n", "%", "\\%", "\\\\", "\\", "{", "}", "\\begin{verbatim}",
            "\\end{verbatim}", "\\verb|", "|", "x%y", "\\textbf{", "\\ref{fig:a}",
        ]);
        prop::collection::vec(atoms, 0..40).prop_map(|v| v.concat())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn strip_comments_idempotent(s in latex_like()) {
            let once = strip_comments(&s);
            prop_assert_eq!(strip_comments(&once), once);
        }

        #[test]
        fn macro_free_identity(s in "[a-z %{}\n\\\\]{0,60}") {
            prop_assume!(!s.contains("\\def") && !s.contains("command"));
            prop_assert_eq!(expand_macros(&s).unwrap(), s);
        }

        #[test]
        fn segments_nonempty_and_fixed_point(parts in prop::collection::vec(prop::sample::select(vec!["p", "q r", "", " ", "\n", "\n\n", "\n\n\n"]), 0..30)) {
            let body = parts.concat();
            let segs = segment_paragraphs(&body, "\n\n");
            prop_assert!(segs.iter().all(|p| !p.is_empty()));
            let rejoined = segs.join("\n\n");
            prop_assert_eq!(segment_paragraphs(&rejoined, "\n\n"), segs);
        }
    }
}
