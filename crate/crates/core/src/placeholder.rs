//! The `[domain@term]` placeholder grammar used in generated SQL.
//!
//! A candidate placeholder is `[`, a run of ASCII letters/underscores, `@`,
//! then any characters other than `]` or a newline, closed by `]`. Candidates
//! with an unknown domain or an empty term are grammar errors. Brackets that do
//! not have this shape (array subscripts, quoted identifiers) are ignored.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::domain::Domain;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placeholder {
    pub domain: Domain,
    pub term: String,
    /// Character range of the whole token, brackets included.
    pub span: Range<usize>,
}

impl Placeholder {
    pub fn surface(&self) -> String {
        surface(self.domain, &self.term)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface())
    }
}

pub fn surface(domain: Domain, term: &str) -> String {
    format!("[{}@{}]", domain.surface(), term)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlaceholderError {
    #[error("unknown placeholder domain `{domain}` in `{token}` at chars {}..{}", span.start, span.end)]
    UnknownDomain {
        domain: String,
        token: String,
        span: Range<usize>,
    },
    #[error("empty placeholder term in `{token}` at chars {}..{}", span.start, span.end)]
    EmptyTerm { token: String, span: Range<usize> },
}

/// A grammar match before domain/term validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RawPlaceholder {
    pub domain: String,
    pub term: String,
    pub chars: Range<usize>,
    pub bytes: Range<usize>,
}

pub(crate) fn scan(sql: &str) -> Vec<RawPlaceholder> {
    let chars: Vec<(usize, char)> = sql.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(sql.len(), |&(b, _)| b);
    let mut found = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].1 != '[' {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (chars[j].1.is_ascii_alphabetic() || chars[j].1 == '_') {
            j += 1;
        }
        if j == i + 1 || j >= chars.len() || chars[j].1 != '@' {
            i += 1;
            continue;
        }
        let at = j;
        let mut k = at + 1;
        while k < chars.len() && chars[k].1 != ']' && chars[k].1 != '\n' {
            k += 1;
        }
        if k >= chars.len() || chars[k].1 != ']' {
            i += 1;
            continue;
        }
        found.push(RawPlaceholder {
            domain: chars[i + 1..at].iter().map(|&(_, c)| c).collect(),
            term: chars[at + 1..k].iter().map(|&(_, c)| c).collect(),
            chars: i..k + 1,
            bytes: byte_at(i)..byte_at(k + 1),
        });
        i = k + 1;
    }
    found
}

/// Returns every placeholder in `sql`, left to right.
pub fn parse_placeholders(sql: &str) -> Result<Vec<Placeholder>, PlaceholderError> {
    scan(sql)
        .into_iter()
        .map(|raw| {
            let token = sql[raw.bytes.clone()].to_string();
            let domain =
                raw.domain
                    .parse::<Domain>()
                    .map_err(|_| PlaceholderError::UnknownDomain {
                        domain: raw.domain.clone(),
                        token: token.clone(),
                        span: raw.chars.clone(),
                    })?;
            if raw.term.trim().is_empty() {
                return Err(PlaceholderError::EmptyTerm {
                    token,
                    span: raw.chars,
                });
            }
            Ok(Placeholder {
                domain,
                term: raw.term,
                span: raw.chars,
            })
        })
        .collect()
}

/// Replaces each grammar match (valid or not) with `replacement(domain, term)`.
pub fn replace_placeholders<F>(sql: &str, mut replacement: F) -> String
where
    F: FnMut(&str, &str) -> String,
{
    let mut out = String::with_capacity(sql.len());
    let mut cursor = 0;
    for raw in scan(sql) {
        out.push_str(&sql[cursor..raw.bytes.start]);
        out.push_str(&replacement(&raw.domain, &raw.term));
        cursor = raw.bytes.end;
    }
    out.push_str(&sql[cursor..]);
    out
}
