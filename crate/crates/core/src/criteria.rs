//! Semi-structured cohort criteria and the structured text format.
//!
//! ```text
//! Index date: first metformin prescription
//! Inclusion:
//! - age 18 or older at index
//! - type 2 diabetes diagnosis before index
//! Exclusion:
//! - type 1 diabetes at any time before index
//! ```
//!
//! Headings are case-insensitive and may be written `Inclusion criteria:` /
//! `Exclusion criteria:`. Items start with `-`, `*`, `•`, `1.` or `1)`;
//! a non-bullet line inside a list continues the previous item.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::entity::{mask_entities, EntityDetector, EntitySpan};
use crate::llm::{LlmProvider, LlmRequest, Message, ProviderError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

impl Criterion {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Criterion {
            id: id.into(),
            text: text.into(),
            entities: Vec::new(),
        }
    }

    /// Criterion text with its entities replaced by domain labels.
    pub fn masked_text(&self) -> String {
        mask_entities(&self.text, &self.entities).unwrap_or_else(|_| self.text.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriterionKind {
    Inclusion,
    Exclusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortCriteria {
    pub index_date_rule: String,
    #[serde(default)]
    pub index_entities: Vec<EntitySpan>,
    pub inclusion: Vec<Criterion>,
    #[serde(default)]
    pub exclusion: Vec<Criterion>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CriteriaError {
    #[error("criteria text is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing `Index date:` rule")]
    MissingIndexDate,
    #[error("no inclusion criteria")]
    NoInclusion,
    #[error(
        "parser output did not follow the criteria format after {attempts} attempts: {last_error}"
    )]
    Schema { attempts: usize, last_error: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl CriteriaError {
    pub fn line(&self) -> Option<usize> {
        match self {
            CriteriaError::Syntax { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Index,
    Inclusion,
    Exclusion,
}

fn heading(line: &str) -> Option<(Section, &str)> {
    let trimmed = line.trim().trim_start_matches('#').trim();
    let (head, rest) = trimmed.split_once(':')?;
    let head = head.trim().trim_matches('*').trim().to_ascii_lowercase();
    let section = match head.as_str() {
        "index date" | "index date rule" | "index" => Section::Index,
        "inclusion" | "inclusion criteria" => Section::Inclusion,
        "exclusion" | "exclusion criteria" => Section::Exclusion,
        _ => return None,
    };
    Some((section, rest.trim()))
}

fn bullet(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(marker) {
            return Some(rest.trim());
        }
    }
    if matches!(t, "-" | "*" | "•") {
        return Some("");
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return Some(rest.trim());
        }
    }
    None
}

/// Deterministic parser for the structured criteria format.
pub fn parse_structured(raw: &str) -> Result<CohortCriteria, CriteriaError> {
    if raw.trim().is_empty() {
        return Err(CriteriaError::Empty);
    }
    let mut index_rule: Option<String> = None;
    let mut inclusion: Vec<String> = Vec::new();
    let mut exclusion: Vec<String> = Vec::new();
    let mut seen = Vec::new();
    let mut section: Option<Section> = None;

    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let syntax = |message: String| CriteriaError::Syntax {
            line: line_no,
            message,
        };
        if bullet(line).is_none() {
            if let Some((s, rest)) = heading(line) {
                if seen.contains(&s) {
                    return Err(syntax(format!("duplicate {s:?} heading")));
                }
                seen.push(s);
                section = Some(s);
                if s == Section::Index {
                    index_rule = Some(rest.to_string());
                } else if !rest.is_empty() {
                    return Err(syntax(format!(
                        "text after the {s:?} heading must be written as bullet items"
                    )));
                }
                continue;
            }
        }
        match section {
            None => {
                return Err(syntax(
                    "expected a heading (`Index date:`, `Inclusion:` or `Exclusion:`)".into(),
                ))
            }
            Some(Section::Index) => {
                let rule = index_rule.get_or_insert_with(String::new);
                let text = bullet(line).unwrap_or(line.trim());
                if !rule.is_empty() {
                    rule.push(' ');
                }
                rule.push_str(text);
            }
            Some(s) => {
                let items = if s == Section::Inclusion {
                    &mut inclusion
                } else {
                    &mut exclusion
                };
                match bullet(line) {
                    Some("") => return Err(syntax("empty bullet item".into())),
                    Some(text) => items.push(text.to_string()),
                    None => match items.last_mut() {
                        Some(last) => {
                            last.push(' ');
                            last.push_str(line.trim());
                        }
                        None => {
                            return Err(syntax("list text must start with a bullet (`- `)".into()))
                        }
                    },
                }
            }
        }
    }

    let index_date_rule = match index_rule {
        Some(r) if !r.trim().is_empty() => r.trim().to_string(),
        _ => return Err(CriteriaError::MissingIndexDate),
    };
    if inclusion.is_empty() {
        return Err(CriteriaError::NoInclusion);
    }
    let number = |prefix: &str, items: Vec<String>| -> Vec<Criterion> {
        items
            .into_iter()
            .enumerate()
            .map(|(i, t)| Criterion::new(format!("{prefix}-{}", i + 1), t))
            .collect()
    };
    Ok(CohortCriteria {
        index_date_rule,
        index_entities: Vec::new(),
        inclusion: number("inc", inclusion),
        exclusion: number("exc", exclusion),
    })
}

impl CohortCriteria {
    /// Renders the structured text format.
    pub fn to_structured_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Index date: {}", self.index_date_rule);
        let _ = writeln!(s, "Inclusion:");
        for c in &self.inclusion {
            let _ = writeln!(s, "- {}", c.text);
        }
        if !self.exclusion.is_empty() {
            let _ = writeln!(s, "Exclusion:");
            for c in &self.exclusion {
                let _ = writeln!(s, "- {}", c.text);
            }
        }
        s
    }

    /// Structured text with every entity masked, used as the cohort-level
    /// retrieval query.
    pub fn to_masked_text(&self) -> String {
        let mut s = String::new();
        let index = mask_entities(&self.index_date_rule, &self.index_entities)
            .unwrap_or_else(|_| self.index_date_rule.clone());
        let _ = writeln!(s, "Index date: {index}");
        let _ = writeln!(s, "Inclusion:");
        for c in &self.inclusion {
            let _ = writeln!(s, "- {}", c.masked_text());
        }
        if !self.exclusion.is_empty() {
            let _ = writeln!(s, "Exclusion:");
            for c in &self.exclusion {
                let _ = writeln!(s, "- {}", c.masked_text());
            }
        }
        s
    }

    /// Inclusions then exclusions, in declaration order.
    pub fn ordered(&self) -> impl Iterator<Item = (CriterionKind, &Criterion)> {
        self.inclusion
            .iter()
            .map(|c| (CriterionKind::Inclusion, c))
            .chain(self.exclusion.iter().map(|c| (CriterionKind::Exclusion, c)))
    }

    pub fn criterion_count(&self) -> usize {
        self.inclusion.len() + self.exclusion.len()
    }

    pub fn get(&self, id: &str) -> Option<(CriterionKind, &Criterion)> {
        self.ordered().find(|(_, c)| c.id == id)
    }

    /// Fills entity spans for the index rule and every criterion.
    pub fn annotate<D: EntityDetector + ?Sized>(
        &mut self,
        detector: &D,
    ) -> Result<(), ProviderError> {
        self.index_entities = detector.detect(&self.index_date_rule)?;
        for c in self.inclusion.iter_mut().chain(self.exclusion.iter_mut()) {
            c.entities = detector.detect(&c.text)?;
        }
        Ok(())
    }
}

impl fmt::Display for CohortCriteria {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_structured_text())
    }
}

/// Lists violated invariants; empty when the criteria are valid.
pub fn validate_criteria(c: &CohortCriteria) -> Vec<String> {
    let mut violations = Vec::new();
    if c.index_date_rule.trim().is_empty() {
        violations.push("index_date_rule nonempty".to_string());
    }
    if c.inclusion.is_empty() {
        violations.push("inclusion nonempty".to_string());
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, crit) in c.ordered() {
        *counts.entry(crit.id.as_str()).or_default() += 1;
        if crit.text.trim().is_empty() {
            violations.push(format!("criterion `{}` text nonempty", crit.id));
        }
        for span in &crit.entities {
            if let Err(e) = span.validate(&crit.text) {
                violations.push(format!("criterion `{}` entity span invalid: {e}", crit.id));
            }
        }
    }
    let dups: Vec<&str> = counts
        .into_iter()
        .filter(|&(_, n)| n > 1)
        .map(|(id, _)| id)
        .collect();
    if !dups.is_empty() {
        violations.push(format!("duplicate criterion ids: {}", dups.join(", ")));
    }
    violations
}

const PARSE_PROMPT: &str = include_str!("../prompts/parse_criteria.v1.txt");

fn strip_fence(reply: &str) -> &str {
    let t = reply.trim();
    if let Some(start) = t.find("```") {
        let after = &t[start + 3..];
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            return body[..end].trim();
        }
    }
    t
}

/// Asks the model to restate free text in the structured format. A reply that
/// does not parse gets one reformat request; a second failure is a schema error.
pub fn parse_with_llm<P: LlmProvider + ?Sized>(
    raw: &str,
    llm: &P,
) -> Result<CohortCriteria, CriteriaError> {
    if raw.trim().is_empty() {
        return Err(CriteriaError::Empty);
    }
    let mut messages = vec![
        Message::system(PARSE_PROMPT),
        Message::user(raw.trim().to_string()),
    ];
    let mut last_error = String::new();
    for attempt in 1..=2 {
        let reply = llm.complete(&LlmRequest::new(messages.clone()))?;
        match parse_structured(strip_fence(&reply)) {
            Ok(c) => return Ok(c),
            Err(e) => {
                last_error = e.to_string();
                if attempt == 1 {
                    messages.push(Message::assistant(reply));
                    messages.push(Message::user(format!(
                        "Your reply did not follow the required format ({last_error}). \
                         Rewrite it using exactly the `Index date:`, `Inclusion:` and `Exclusion:` \
                         headings with one `- ` bullet per criterion, and nothing else."
                    )));
                }
            }
        }
    }
    Err(CriteriaError::Schema {
        attempts: 2,
        last_error,
    })
}

/// Parses structured text directly, falling back to the model for free text
/// when one is available.
pub fn parse_criteria(
    raw: &str,
    llm: Option<&dyn LlmProvider>,
) -> Result<CohortCriteria, CriteriaError> {
    match (parse_structured(raw), llm) {
        (Ok(c), _) => Ok(c),
        (Err(CriteriaError::Empty), _) => Err(CriteriaError::Empty),
        (Err(_), Some(llm)) => parse_with_llm(raw, llm),
        (Err(e), None) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockLlm, Transcript};
    use proptest::prelude::*;

    const SAMPLE: &str = "Index date: first metformin prescription\n\
                          Inclusion:\n\
                          - age 18 or older at index\n\
                          - type 2 diabetes before index\n\
                          Exclusion:\n\
                          - insulin in the 365 days before index\n";

    #[test]
    fn parses_headings_and_bullets() {
        let c = parse_structured(SAMPLE).unwrap();
        assert_eq!(c.index_date_rule, "first metformin prescription");
        assert_eq!(c.inclusion.len(), 2);
        assert_eq!(c.exclusion.len(), 1);
        assert_eq!(c.inclusion[1].id, "inc-2");
        assert_eq!(c.exclusion[0].id, "exc-1");
        assert_eq!(c.exclusion[0].text, "insulin in the 365 days before index");
    }

    #[test]
    fn minimal_input() {
        let c = parse_structured("Index date: first visit\nInclusion:\n- adults\n").unwrap();
        assert_eq!((c.inclusion.len(), c.exclusion.len()), (1, 0));
    }

    #[test]
    fn variants_and_continuations() {
        let raw = "## Index Date:\n  first diagnosis of asthma\n\n\
                   Inclusion criteria:\n1. adults\n   aged under 65\n2) continuous enrollment\n\
                   EXCLUSION CRITERIA:\n* prior COPD";
        let c = parse_structured(raw).unwrap();
        assert_eq!(c.index_date_rule, "first diagnosis of asthma");
        assert_eq!(c.inclusion[0].text, "adults aged under 65");
        assert_eq!(c.inclusion[1].text, "continuous enrollment");
        assert_eq!(c.exclusion[0].text, "prior COPD");
    }

    #[test]
    fn errors() {
        assert_eq!(parse_structured("   "), Err(CriteriaError::Empty));
        assert_eq!(
            parse_structured("Inclusion:\n- adults"),
            Err(CriteriaError::MissingIndexDate)
        );
        assert_eq!(
            parse_structured("Index date: x\nExclusion:\n- y"),
            Err(CriteriaError::NoInclusion)
        );
        let err = parse_structured("Patients who\nIndex date: x").unwrap_err();
        assert_eq!(err.line(), Some(1));
        let err = parse_structured("Index date: x\nInclusion:\nadults").unwrap_err();
        assert_eq!(err.line(), Some(3));
        let err = parse_structured("Index date: x\nInclusion:\n- a\nInclusion:\n- b").unwrap_err();
        assert_eq!(err.line(), Some(4));
    }

    #[test]
    fn validation_report() {
        let c = parse_structured(SAMPLE).unwrap();
        assert!(validate_criteria(&c).is_empty());

        let mut empty = c.clone();
        empty.inclusion.clear();
        assert_eq!(
            validate_criteria(&empty),
            vec!["inclusion nonempty".to_string()]
        );

        let mut dup = c.clone();
        dup.exclusion[0].id = "inc-1".into();
        let report = validate_criteria(&dup);
        assert_eq!(report.len(), 1);
        assert!(report[0].contains("inc-1"));
    }

    #[test]
    fn llm_parse_retries_once_then_fails() {
        let good = "```\nIndex date: first visit\nInclusion:\n- adults\n```";
        let mock = MockLlm::new(Transcript::default().turn("Sure! Here you go.").turn(good));
        let c = parse_with_llm("adults from their first visit", &mock).unwrap();
        assert_eq!(c.inclusion.len(), 1);
        let reqs = mock.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].messages.len(), 4);

        let bad = MockLlm::new(Transcript::default().turn("no").turn("still no"));
        assert!(matches!(
            parse_with_llm("adults", &bad),
            Err(CriteriaError::Schema { attempts: 2, .. })
        ));
    }

    #[test]
    fn structured_input_skips_the_model() {
        let mock = MockLlm::new(Transcript::default());
        let c = parse_criteria(SAMPLE, Some(&mock)).unwrap();
        assert_eq!(c.criterion_count(), 3);
        assert!(mock.requests().is_empty());
        assert!(parse_criteria("free text only", None).is_err());
    }

    fn item() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,<>=()%'-]{0,40}[A-Za-z0-9)]"
    }

    proptest! {
        #[test]
        fn structured_round_trip(
            rule in item(),
            inc in prop::collection::vec(item(), 1..6),
            exc in prop::collection::vec(item(), 0..6),
        ) {
            let c = CohortCriteria {
                index_date_rule: rule,
                index_entities: vec![],
                inclusion: inc.into_iter().enumerate().map(|(i, t)| Criterion::new(format!("inc-{}", i + 1), t)).collect(),
                exclusion: exc.into_iter().enumerate().map(|(i, t)| Criterion::new(format!("exc-{}", i + 1), t)).collect(),
            };
            let text = c.to_structured_text();
            let parsed = parse_structured(&text).unwrap();
            prop_assert_eq!(parsed.criterion_count(), text.lines().filter(|l| l.starts_with("- ")).count());
            prop_assert_eq!(parsed, c);
        }
    }
}
