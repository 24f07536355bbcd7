//! Scripted model backend for tests and offline runs.
//!
//! A script maps request digests to responses and may add rules that match
//! on template, role, sample index and prompt substrings. Any request that
//! nothing matches is a hard error, never a silent default.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ModelBackend, ModelEndpointConfig, ModelRequest, ModelRole, PromptName};

/// Response matched by content rather than digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PromptName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ModelRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u32>,
    /// Substrings that must all occur in the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Transport failures to report before the first success.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub transient_failures: u32,
    /// Response text. `{{letter_of:TEXT}}` is replaced by the letter of the
    /// option line reading `TEXT` in the prompt.
    pub response: String,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl MockRule {
    pub fn new(template: PromptName, response: impl Into<String>) -> Self {
        Self {
            template: Some(template),
            role: None,
            sample: None,
            contains: Vec::new(),
            transient_failures: 0,
            response: response.into(),
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn on_role(mut self, role: ModelRole) -> Self {
        self.role = Some(role);
        self
    }

    pub fn on_sample(mut self, sample: u32) -> Self {
        self.sample = Some(sample);
        self
    }

    pub fn failing_first(mut self, n: u32) -> Self {
        self.transient_failures = n;
        self
    }

    fn matches(&self, role: ModelRole, request: &ModelRequest) -> bool {
        self.template.map_or(true, |t| t == request.template)
            && self.role.map_or(true, |r| r == role)
            && self.sample.map_or(true, |s| s == request.sample_index)
            && self.contains.iter().all(|c| request.prompt.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }
}

/// One call that reached the mock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub digest: String,
    pub template: PromptName,
    pub role: ModelRole,
    pub sample_index: u32,
    pub item_key: String,
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    ledger: Mutex<Vec<CallRecord>>,
    ledger_file: Option<Mutex<File>>,
    failures_seen: Mutex<HashMap<(usize, String), u32>>,
    crash_after: Mutex<Option<usize>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            ledger: Mutex::new(Vec::new()),
            ledger_file: None,
            failures_seen: Mutex::new(HashMap::new()),
            crash_after: Mutex::new(None),
        }
    }

    /// Also appends every call to a JSON-lines file.
    pub fn with_ledger_file(mut self, path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.ledger_file = Some(Mutex::new(file));
        Ok(self)
    }

    /// After `calls` more successful calls, every call fails fatally.
    /// Used to simulate a crash in the middle of a stage.
    pub fn crash_after(&self, calls: Option<usize>) {
        *self.crash_after.lock().unwrap() = calls;
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.ledger.lock().unwrap().clone()
    }

    pub fn clear_calls(&self) {
        self.ledger.lock().unwrap().clear();
    }

    fn respond(&self, role: ModelRole, request: &ModelRequest, digest: &str) -> Result<String, BackendError> {
        if let Some(response) = self.script.responses.get(digest) {
            return Ok(response.clone());
        }
        let Some((idx, rule)) = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matches(role, request))
        else {
            return Err(BackendError::Fatal(format!(
                "unscripted {} request {digest} for {:?}",
                request.template, request.item_key
            )));
        };
        if rule.transient_failures > 0 {
            let mut seen = self.failures_seen.lock().unwrap();
            let count = seen.entry((idx, digest.to_string())).or_insert(0);
            if *count < rule.transient_failures {
                *count += 1;
                return Err(BackendError::Transport("scripted transient failure".into()));
            }
        }
        resolve_letters(&rule.response, &request.prompt)
    }
}

/// Replaces `{{letter_of:TEXT}}` with the letter of the prompt line
/// `X. TEXT`.
fn resolve_letters(response: &str, prompt: &str) -> Result<String, BackendError> {
    const OPEN: &str = "{{letter_of:";
    let mut out = String::with_capacity(response.len());
    let mut rest = response;
    while let Some(start) = rest.find(OPEN) {
        out.push_str(&rest[..start]);
        let after = &rest[start + OPEN.len()..];
        let end = after
            .find("}}")
            .ok_or_else(|| BackendError::Fatal("unterminated letter_of directive".into()))?;
        let text = &after[..end];
        let letter = prompt
            .lines()
            .find_map(|line| {
                let mut chars = line.chars();
                let letter = chars.next()?;
                let body = chars.as_str().strip_prefix(". ")?;
                (letter.is_ascii_uppercase() && body.trim_end() == text).then_some(letter)
            })
            .ok_or_else(|| BackendError::Fatal(format!("option {text:?} not present in prompt")))?;
        out.push(letter);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

impl ModelBackend for MockBackend {
    fn send(&self, config: &ModelEndpointConfig, request: &ModelRequest) -> Result<String, BackendError> {
        {
            let mut crash = self.crash_after.lock().unwrap();
            match crash.as_mut() {
                Some(0) => return Err(BackendError::Fatal("simulated crash".into())),
                Some(n) => *n -= 1,
                None => {}
            }
        }
        let digest = request.digest();
        let record = CallRecord {
            digest: digest.clone(),
            template: request.template,
            role: config.role,
            sample_index: request.sample_index,
            item_key: request.item_key.clone(),
        };
        if let Some(file) = &self.ledger_file {
            let mut file = file.lock().unwrap();
            let line = serde_json::to_string(&record).expect("call record serializes");
            writeln!(file, "{line}").map_err(|e| BackendError::Fatal(format!("ledger write failed: {e}")))?;
        }
        self.ledger.lock().unwrap().push(record);
        self.respond(config.role, request, &digest)
    }
}
