//! Zero-shot multiple-choice evaluation with per-category accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FigureType, QuestionType, VerifiedRecord};
use crate::gateway::{
    format_options, selection_or_ambiguous, Endpoint, GatewayError, ModelRequest, PromptName, PromptSet, Selection,
};

pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    /// Accuracy in hundredths of a percent, rounded half-up.
    pub fn accuracy_hundredths(&self) -> Option<u64> {
        (self.total > 0).then(|| {
            let (c, t) = (self.correct as u128, self.total as u128);
            ((20_000 * c + t) / (2 * t)) as u64
        })
    }

    /// Accuracy as printed, e.g. "82.30".
    pub fn accuracy_display(&self) -> String {
        match self.accuracy_hundredths() {
            Some(h) => format!("{}.{:02}", h / 100, h % 100),
            None => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResult {
    pub key: String,
    pub predicted: Selection,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model_name: String,
    pub overall: Tally,
    pub by_domain: BTreeMap<String, Tally>,
    pub by_figure_type: BTreeMap<String, Tally>,
    pub by_question_type: BTreeMap<String, Tally>,
    pub per_item: Vec<ItemResult>,
    /// Records whose calls never succeeded; excluded from every tally.
    pub unevaluated: Vec<String>,
}

impl EvalResult {
    /// Each breakdown partitions the evaluated items, so its tallies must
    /// add up to the overall tally.
    pub fn is_sum_consistent(&self) -> bool {
        let sum = |m: &BTreeMap<String, Tally>| {
            m.values().fold(Tally::default(), |acc, t| Tally {
                correct: acc.correct + t.correct,
                total: acc.total + t.total,
            })
        };
        [&self.by_domain, &self.by_figure_type, &self.by_question_type]
            .iter()
            .all(|m| sum(m) == self.overall)
            && self.per_item.len() == self.overall.total
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation requires temperature 0, endpoint is configured with {0}")]
    NonZeroTemperature(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn category<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| UNLABELED.to_string(), |v| v.to_string())
}

/// Asks `model` every question once and tallies the answers. Options are
/// shown in stored order. An unparseable or abstaining answer is wrong.
pub fn evaluate(model: &Endpoint, prompts: &PromptSet, records: &[VerifiedRecord]) -> Result<EvalResult, EvalError> {
    let temperature = model.config().temperature;
    if temperature != 0.0 {
        return Err(EvalError::NonZeroTemperature(temperature));
    }
    let answers: Vec<Result<Option<Selection>, GatewayError>> = records
        .par_iter()
        .map(|r| {
            let options = format_options(&r.options);
            let prompt = prompts.render(
                PromptName::EvalZeroShot,
                &[("caption", &r.caption), ("question", &r.question), ("options", &options)],
            )?;
            let request = ModelRequest::new(PromptName::EvalZeroShot, prompt)
                .for_item(r.key.clone())
                .with_image(r.figure_image_ref.clone());
            match model.complete_vision(request) {
                Ok(c) => Ok(Some(selection_or_ambiguous(&c.text, r.options.len()))),
                Err(e) if e.is_deferrable() => {
                    log::warn!("{}: left unevaluated: {e}", r.key);
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut result = EvalResult {
        model_name: model.config().model_name.clone(),
        overall: Tally::default(),
        by_domain: BTreeMap::new(),
        by_figure_type: BTreeMap::new(),
        by_question_type: BTreeMap::new(),
        per_item: Vec::new(),
        unevaluated: Vec::new(),
    };
    for (r, answer) in records.iter().zip(answers) {
        let Some(predicted) = answer? else {
            result.unevaluated.push(r.key.clone());
            continue;
        };
        let correct = predicted == Selection::Letter(r.correct_letter());
        result.overall.add(correct);
        result.by_domain.entry(r.primary_category.clone()).or_default().add(correct);
        result.by_figure_type.entry(category(r.figure_type)).or_default().add(correct);
        result.by_question_type.entry(category(r.question_type)).or_default().add(correct);
        result.per_item.push(ItemResult {
            key: r.key.clone(),
            predicted,
            correct,
        });
    }
    Ok(result)
}

fn ordered<'a>(map: &'a BTreeMap<String, Tally>, order: &[&str]) -> Vec<(&'a str, &'a Tally)> {
    let mut out: Vec<(&str, &Tally)> = order
        .iter()
        .filter_map(|k| map.get_key_value(*k).map(|(k, v)| (k.as_str(), v)))
        .collect();
    out.extend(
        map.iter()
            .filter(|(k, _)| !order.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v)),
    );
    out
}

/// Plain-text report: one table per breakdown followed by the overall
/// accuracy. Domains are sorted by name; figure and question types follow
/// their vocabulary order.
pub fn render_report(result: &EvalResult) -> String {
    let figure_order: Vec<&str> = FigureType::ALL.iter().map(|f| f.as_str()).collect();
    let question_order: Vec<&str> = QuestionType::ALL.iter().map(|q| q.as_str()).collect();
    let sections = [
        ("Domain", ordered(&result.by_domain, &[])),
        ("Figure Type", ordered(&result.by_figure_type, &figure_order)),
        ("Question Type", ordered(&result.by_question_type, &question_order)),
    ];
    let width = sections
        .iter()
        .flat_map(|(h, rows)| std::iter::once(h.len()).chain(rows.iter().map(|(k, _)| k.len())))
        .max()
        .unwrap_or(8)
        .max("Overall".len());
    let mut out = format!("Model: {}\n", result.model_name);
    for (header, rows) in sections {
        let _ = writeln!(out, "\n{header:<width$}  {:>8}  {:>7}  {:>7}", "Accuracy", "Correct", "Total");
        for (name, t) in rows {
            let _ = writeln!(out, "{name:<width$}  {:>8}  {:>7}  {:>7}", t.accuracy_display(), t.correct, t.total);
        }
        let o = &result.overall;
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>7}  {:>7}", "Overall", o.accuracy_display(), o.correct, o.total);
    }
    if !result.unevaluated.is_empty() {
        let _ = writeln!(out, "\nUnevaluated: {}", result.unevaluated.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::gateway::{MockBackend, MockRule, MockScript, ModelEndpointConfig, ModelRole};
    use std::sync::Arc;

    fn rec(key: &str, correct: usize, domain: &str, ft: Option<FigureType>, qt: Option<QuestionType>) -> VerifiedRecord {
        VerifiedRecord {
            key: key.into(),
            question: format!("Question {key}?"),
            options: vec!["w".into(), "x".into(), "y".into(), "z".into()],
            correct_index: correct,
            figure_image_ref: "https://example.org/f.png".into(),
            caption: "cap".into(),
            reasoning: "r".into(),
            arxiv_id: "a".into(),
            figure_index: 1,
            primary_category: domain.into(),
            figure_type: ft,
            question_type: qt,
            provenance: Provenance {
                claim: "c".into(),
                context_digest: "d".into(),
                verdict_keys: vec![],
                option_permutation: vec![0, 1, 2, 3],
            },
        }
    }

    fn model(script: MockScript, temperature: f64) -> Endpoint {
        let cfg = ModelEndpointConfig::new(ModelRole::Vision, "m")
            .with_temperature(temperature)
            .with_backoff_ms(0);
        Endpoint::new(cfg, Arc::new(MockBackend::new(script)))
    }

    #[test]
    fn requires_greedy_decoding() {
        let m = model(MockScript::default(), 1.0);
        assert!(matches!(evaluate(&m, &PromptSet::builtin(), &[]), Err(EvalError::NonZeroTemperature(_))));
    }

    #[test]
    fn always_correct_is_perfect() {
        let records: Vec<_> = (0..4).map(|i| rec(&format!("k{i}"), i, "cs", None, None)).collect();
        let mut script = MockScript::default();
        for i in 0..4 {
            script = script.rule(
                MockRule::new(PromptName::EvalZeroShot, format!("<option>{}</option>", (b'A' + i as u8) as char))
                    .containing(format!("Question k{i}?")),
            );
        }
        let result = evaluate(&model(script, 0.0), &PromptSet::builtin(), &records).unwrap();
        assert_eq!(result.overall, Tally { correct: 4, total: 4 });
        assert_eq!(result.overall.accuracy_display(), "100.00");
        assert!(result.is_sum_consistent());
        assert_eq!(result.by_figure_type[UNLABELED].total, 4);
    }

    #[test]
    fn unparseable_is_wrong_and_unavailable_is_excluded() {
        let records = vec![
            rec("k0", 0, "cs", Some(FigureType::Heatmap), Some(QuestionType::Descriptive)),
            rec("k1", 0, "cs", Some(FigureType::Heatmap), Some(QuestionType::Descriptive)),
            rec("k2", 0, "math", Some(FigureType::Photo), Some(QuestionType::Structural)),
        ];
        let script = MockScript::default()
            .rule(MockRule::new(PromptName::EvalZeroShot, "I think A").containing("Question k0?"))
            .rule(MockRule::new(PromptName::EvalZeroShot, "<option>A</option>").containing("Question k1?"))
            .rule(MockRule::new(PromptName::EvalZeroShot, "x").containing("Question k2?").failing_first(99));
        let result = evaluate(&model(script, 0.0), &PromptSet::builtin(), &records).unwrap();
        assert_eq!(result.overall, Tally { correct: 1, total: 2 });
        assert_eq!(result.unevaluated, vec!["k2".to_string()]);
        assert_eq!(result.per_item[0].predicted, Selection::Ambiguous);
        assert!(!result.by_domain.contains_key("math"));
        assert!(result.is_sum_consistent());
    }

    #[test]
    fn accuracy_rounding() {
        assert_eq!(Tally { correct: 823, total: 1000 }.accuracy_display(), "82.30");
        assert_eq!(Tally { correct: 1, total: 3 }.accuracy_display(), "33.33");
        assert_eq!(Tally { correct: 2, total: 3 }.accuracy_display(), "66.67");
        assert_eq!(Tally { correct: 1, total: 8 }.accuracy_display(), "12.50");
        assert_eq!(Tally::default().accuracy_display(), "-");
    }

    #[test]
    fn report_layout() {
        let records = vec![
            rec("k0", 0, "cs", Some(FigureType::PieChart), Some(QuestionType::Structural)),
            rec("k1", 0, "astro-ph", Some(FigureType::LinePlot), Some(QuestionType::Relational)),
        ];
        let script = MockScript::default().rule(MockRule::new(PromptName::EvalZeroShot, "<option>A</option>"));
        let result = evaluate(&model(script, 0.0), &PromptSet::builtin(), &records).unwrap();
        let report = render_report(&result);
        let astro = report.find("astro-ph").unwrap();
        let cs = report.find("\ncs ").unwrap();
        assert!(astro < cs);
        assert!(report.find("Line Plot").unwrap() < report.find("Pie Chart").unwrap());
        assert!(report.find("Relational").unwrap() < report.find("Structural").unwrap());
        assert_eq!(report.matches("Overall").count(), 3);
    }
}
