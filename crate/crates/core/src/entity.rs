//! Medical entity spans, masking, and entity detection.

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::llm::{LlmProvider, LlmRequest, Message, ProviderError};

/// A medical entity located in a source text by character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpanError {
    #[error("span {start}..{end} is out of bounds for text of {len} chars")]
    OutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("span {start}..{end} text `{expected}` does not match source `{actual}`")]
    TextMismatch {
        start: usize,
        end: usize,
        expected: String,
        actual: String,
    },
    #[error("spans {first:?} and {second:?} overlap")]
    Overlap {
        first: (usize, usize),
        second: (usize, usize),
    },
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, text: impl Into<String>, domain: Domain) -> Self {
        EntitySpan {
            start,
            end,
            text: text.into(),
            domain,
        }
    }

    /// Checks the span against the text it claims to annotate.
    pub fn validate(&self, source: &str) -> Result<(), SpanError> {
        let len = source.chars().count();
        if self.start >= self.end || self.end > len {
            return Err(SpanError::OutOfBounds {
                start: self.start,
                end: self.end,
                len,
            });
        }
        let actual: String = source
            .chars()
            .skip(self.start)
            .take(self.end - self.start)
            .collect();
        if actual != self.text {
            return Err(SpanError::TextMismatch {
                start: self.start,
                end: self.end,
                expected: self.text.clone(),
                actual,
            });
        }
        Ok(())
    }
}

/// Replaces every span's substring with its domain label, leaving other text untouched.
pub fn mask_entities(text: &str, spans: &[EntitySpan]) -> Result<String, SpanError> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for span in &sorted {
        span.validate(text)?;
    }
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(SpanError::Overlap {
                first: (pair[0].start, pair[0].end),
                second: (pair[1].start, pair[1].end),
            });
        }
    }

    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for span in sorted {
        out.extend(&chars[cursor..span.start]);
        out.push_str(span.domain.label());
        cursor = span.end;
    }
    out.extend(&chars[cursor..]);
    Ok(out)
}

/// Finds medical entities in free text.
pub trait EntityDetector: Send + Sync {
    fn detect(&self, text: &str) -> Result<Vec<EntitySpan>, ProviderError>;
}

/// Deterministic detector backed by a term dictionary.
///
/// Matching is case-insensitive, respects word boundaries, and prefers the
/// longest term at each position.
#[derive(Debug, Clone, Default)]
pub struct DictionaryDetector {
    // (lowercased term chars, domain), longest first
    terms: Vec<(Vec<char>, Domain)>,
}

fn fold(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl DictionaryDetector {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Domain)>,
        S: AsRef<str>,
    {
        let mut terms: Vec<(Vec<char>, Domain)> = entries
            .into_iter()
            .map(|(t, d)| (t.as_ref().trim().chars().map(fold).collect::<Vec<_>>(), d))
            .filter(|(t, _)| !t.is_empty())
            .collect();
        terms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        terms.dedup_by(|a, b| a.0 == b.0);
        DictionaryDetector { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scan(&self, text: &str) -> Vec<EntitySpan> {
        let chars: Vec<char> = text.chars().collect();
        let folded: Vec<char> = chars.iter().copied().map(fold).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if i > 0 && is_word_char(chars[i - 1]) {
                i += 1;
                continue;
            }
            let hit = self.terms.iter().find(|(term, _)| {
                let end = i + term.len();
                end <= chars.len()
                    && folded[i..end] == term[..]
                    && (end == chars.len() || !is_word_char(chars[end]))
            });
            match hit {
                Some((term, domain)) => {
                    let end = i + term.len();
                    spans.push(EntitySpan::new(
                        i,
                        end,
                        chars[i..end].iter().collect::<String>(),
                        *domain,
                    ));
                    i = end;
                }
                None => i += 1,
            }
        }
        spans
    }
}

impl EntityDetector for DictionaryDetector {
    fn detect(&self, text: &str) -> Result<Vec<EntitySpan>, ProviderError> {
        Ok(self.scan(text))
    }
}

/// LLM-backed detector. The model lists entities as `domain: term` lines,
/// which are then located in the text.
pub struct LlmEntityDetector<P> {
    provider: P,
}

const DETECT_PROMPT: &str = include_str!("../prompts/detect_entities.v1.txt");

impl<P: LlmProvider> LlmEntityDetector<P> {
    pub fn new(provider: P) -> Self {
        LlmEntityDetector { provider }
    }
}

impl<P: LlmProvider> EntityDetector for LlmEntityDetector<P> {
    fn detect(&self, text: &str) -> Result<Vec<EntitySpan>, ProviderError> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let request = LlmRequest::new(vec![
            Message::system(DETECT_PROMPT),
            Message::user(text.to_string()),
        ]);
        let reply = self.provider.complete(&request)?;
        let mut listed = Vec::new();
        for line in reply.lines() {
            let line = line.trim().trim_start_matches(['-', '*']).trim();
            if let Some((domain, term)) = line.split_once(':') {
                if let Ok(domain) = domain.parse::<Domain>() {
                    listed.push((term.trim().to_string(), domain));
                }
            }
        }
        let mut spans = DictionaryDetector::new(listed).scan(text);
        spans.sort_by_key(|s| s.start);
        Ok(spans)
    }
}
