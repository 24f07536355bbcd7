//! Prompt templates with `{{ name }}` interpolation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptName {
    ClaimExtract,
    QaGenerate,
    SourceCheck,
    VisdepCheck,
    VisionAnswer,
    FigureTypeLabel,
    QuestionTypeLabel,
    EvalZeroShot,
}

impl PromptName {
    pub const ALL: [PromptName; 8] = [
        PromptName::ClaimExtract,
        PromptName::QaGenerate,
        PromptName::SourceCheck,
        PromptName::VisdepCheck,
        PromptName::VisionAnswer,
        PromptName::FigureTypeLabel,
        PromptName::QuestionTypeLabel,
        PromptName::EvalZeroShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptName::ClaimExtract => "claim_extract",
            PromptName::QaGenerate => "qa_generate",
            PromptName::SourceCheck => "source_check",
            PromptName::VisdepCheck => "visdep_check",
            PromptName::VisionAnswer => "vision_answer",
            PromptName::FigureTypeLabel => "figure_type_label",
            PromptName::QuestionTypeLabel => "question_type_label",
            PromptName::EvalZeroShot => "eval_zero_shot",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn builtin_body(self) -> &'static str {
        match self {
            PromptName::ClaimExtract => include_str!("../../prompts/claim_extract.txt"),
            PromptName::QaGenerate => include_str!("../../prompts/qa_generate.txt"),
            PromptName::SourceCheck => include_str!("../../prompts/source_check.txt"),
            PromptName::VisdepCheck => include_str!("../../prompts/visdep_check.txt"),
            PromptName::VisionAnswer => include_str!("../../prompts/vision_answer.txt"),
            PromptName::FigureTypeLabel => include_str!("../../prompts/figure_type_label.txt"),
            PromptName::QuestionTypeLabel => include_str!("../../prompts/question_type_label.txt"),
            PromptName::EvalZeroShot => include_str!("../../prompts/eval_zero_shot.txt"),
        }
    }
}

impl fmt::Display for PromptName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown prompt template {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: PromptName,
    pub body: String,
}

/// One `{{ var }}` marker: byte range and variable name.
fn markers(body: &str) -> Vec<(std::ops::Range<usize>, &str)> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(n) = body[i..].find("{{") {
        let open = i + n;
        let Some(m) = body[open + 2..].find("}}") else {
            break;
        };
        let close = open + 2 + m;
        let name = body[open + 2..close].trim();
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push((open..close + 2, name));
            i = close + 2;
        } else {
            i = open + 2;
        }
    }
    out
}

impl PromptTemplate {
    pub fn new(name: PromptName, body: impl Into<String>) -> Self {
        Self { name, body: body.into() }
    }

    /// Variables referenced by the template, in first-use order.
    pub fn variables(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (_, name) in markers(&self.body) {
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
        seen
    }

    /// Substitutes every marker. Values are inserted verbatim and never
    /// re-scanned.
    pub fn render(&self, vars: &BTreeMap<&str, &str>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(self.body.len());
        let mut copied = 0;
        for (range, name) in markers(&self.body) {
            let value = vars
                .get(name)
                .ok_or_else(|| GatewayError::MissingVariable(name.to_string()))?;
            out.push_str(&self.body[copied..range.start]);
            out.push_str(value);
            copied = range.end;
        }
        out.push_str(&self.body[copied..]);
        Ok(out)
    }
}

/// Renders `template` with the given variables.
pub fn render_template(template: &PromptTemplate, vars: &BTreeMap<&str, &str>) -> Result<String, GatewayError> {
    template.render(vars)
}

/// The full set of templates a run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<PromptName, PromptTemplate>,
}

impl PromptSet {
    /// Templates shipped with the crate.
    pub fn builtin() -> Self {
        let templates = PromptName::ALL
            .into_iter()
            .map(|n| (n, PromptTemplate::new(n, n.builtin_body())))
            .collect();
        Self { templates }
    }

    /// Loads `<name>.txt` for every template from `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut templates = BTreeMap::new();
        for name in PromptName::ALL {
            let path = dir.join(name.file_name());
            let body = std::fs::read_to_string(&path).map_err(|e| {
                std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
            })?;
            templates.insert(name, PromptTemplate::new(name, body));
        }
        Ok(Self { templates })
    }

    pub fn get(&self, name: PromptName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn render(&self, name: PromptName, vars: &[(&str, &str)]) -> Result<String, GatewayError> {
        self.get(name).render(&vars.iter().copied().collect())
    }

    /// Hash of every template body, for run manifests.
    pub fn digest(&self) -> String {
        let joined: Vec<&str> = self.templates.values().map(|t| t.body.as_str()).collect();
        crate::digest::sha256_hex(joined.join("\u{0}").as_bytes())
    }
}
