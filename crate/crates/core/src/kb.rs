//! Knowledge-base entries, the line-delimited KB file format, and dataset
//! statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::l2_norm;
use crate::entity::{mask_entities, EntitySpan};
use crate::sql_complexity::{analyze_sql, SqlComplexity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbKind {
    /// Analytical question paired with SQL.
    Ask,
    /// Full cohort inclusion/exclusion criteria paired with SQL.
    Coho,
}

impl fmt::Display for KbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KbKind::Ask => "ask",
            KbKind::Coho => "coho",
        })
    }
}

impl FromStr for KbKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ask" => Ok(KbKind::Ask),
            "coho" => Ok(KbKind::Coho),
            other => Err(format!("unknown KB kind `{other}` (expected ask or coho)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub id: String,
    pub kind: KbKind,
    pub natural_text: String,
    /// Empty in the file means "derive from `entities`".
    #[serde(default)]
    pub masked_text: String,
    pub sql: String,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl KbEntry {
    pub fn new(
        id: impl Into<String>,
        kind: KbKind,
        natural_text: impl Into<String>,
        sql: impl Into<String>,
    ) -> Self {
        KbEntry {
            id: id.into(),
            kind,
            natural_text: natural_text.into(),
            masked_text: String::new(),
            sql: sql.into(),
            entities: Vec::new(),
            embedding: None,
        }
    }

    pub fn with_masked_text(mut self, masked: impl Into<String>) -> Self {
        self.masked_text = masked.into();
        self
    }

    /// Text used for embedding: the masked form when present.
    pub fn retrieval_text(&self) -> &str {
        if self.masked_text.trim().is_empty() {
            &self.natural_text
        } else {
            &self.masked_text
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.natural_text.trim().is_empty() {
            return Err("natural_text is empty".into());
        }
        if self.sql.trim().is_empty() {
            return Err("sql is empty".into());
        }
        for span in &self.entities {
            span.validate(&self.natural_text)
                .map_err(|e| e.to_string())?;
        }
        if let Some(v) = &self.embedding {
            let n = l2_norm(v);
            if (n - 1.0).abs() > 1e-6 {
                return Err(format!("embedding norm is {n}, expected 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("record {index} (line {line}): {message}")]
    Malformed {
        index: usize,
        line: usize,
        message: String,
    },
    #[error("duplicate id `{id}` at records {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
}

/// Loads a KB file: UTF-8, one JSON record per line, blank lines ignored.
pub fn load_kb(path: impl AsRef<Path>, kind: KbKind) -> Result<Vec<KbEntry>, KbError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_kb(std::io::BufReader::new(file), kind).map_err(|e| match e {
        KbError::Io { source, .. } => KbError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_kb<R: BufRead>(reader: R, kind: KbKind) -> Result<Vec<KbEntry>, KbError> {
    let mut entries: Vec<KbEntry> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| KbError::Io {
            path: String::from("<reader>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let index = entries.len();
        let malformed = |message: String| KbError::Malformed {
            index,
            line: line_no + 1,
            message,
        };
        let mut entry: KbEntry =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if entry.kind != kind {
            return Err(malformed(format!(
                "kind is {} but {kind} was requested",
                entry.kind
            )));
        }
        entry.validate().map_err(malformed)?;
        if entry.masked_text.trim().is_empty() && !entry.entities.is_empty() {
            entry.masked_text = mask_entities(&entry.natural_text, &entry.entities)
                .map_err(|e| malformed(e.to_string()))?;
        }
        if let Some(&first) = seen.get(&entry.id) {
            return Err(KbError::DuplicateId {
                id: entry.id,
                first,
                second: index,
            });
        }
        seen.insert(entry.id.clone(), index);
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_kb<W: std::io::Write>(mut out: W, entries: &[KbEntry]) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Sample mean and n-1 standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbStats {
    pub n_samples: usize,
    pub n_distinct_tables: usize,
    pub n_distinct_columns: usize,
    pub unique_entity_terms: usize,
    pub text_chars: MeanStd,
    pub text_words: MeanStd,
    pub entities_per_entry: MeanStd,
    pub sql_chars: MeanStd,
    pub tables_referenced: MeanStd,
    pub joins: MeanStd,
    pub logical_conditions: MeanStd,
    pub pct_with_aggregation: f64,
    pub pct_with_datetime: f64,
    pub pct_with_subquery: f64,
    /// Entries whose SQL could not be analyzed, with the diagnostic.
    pub excluded: Vec<(String, String)>,
    pub conventions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot compute statistics over an empty entry list")]
pub struct EmptyKb;

pub const COUNTING_CONVENTIONS: [&str; 6] = [
    "tables referenced: every table reference in a FROM/JOIN position, repeats included (CTE references count)",
    "joins: explicit JOIN keywords plus comma-separated FROM items beyond the first, per SELECT",
    "logical conditions: AND/OR/NOT operators inside WHERE, HAVING and JOIN ... ON clauses (BETWEEN ... AND is not counted; NOT IN / NOT EXISTS / NOT LIKE / NOT BETWEEN count as NOT)",
    "aggregation: any COUNT/SUM/AVG/MIN/MAX call; date/time: any date/time function, INTERVAL, EXTRACT, DATE/TIMESTAMP cast or literal, or comparison against an ISO date string",
    "subquery: any nested query (scalar, IN, EXISTS, derived table or CTE)",
    "unique concepts: distinct (domain, lowercased entity text) pairs across all entries",
];

/// Characterizes a KB. Entries whose SQL fails analysis are excluded and listed.
pub fn kb_stats(entries: &[KbEntry]) -> Result<KbStats, EmptyKb> {
    if entries.is_empty() {
        return Err(EmptyKb);
    }
    let mut analyzed: Vec<(&KbEntry, SqlComplexity)> = Vec::new();
    let mut excluded = Vec::new();
    for e in entries {
        match analyze_sql(&e.sql) {
            Ok(c) => analyzed.push((e, c)),
            Err(err) => excluded.push((e.id.clone(), err.to_string())),
        }
    }
    let mut tables = BTreeSet::new();
    let mut columns = BTreeSet::new();
    let mut concepts = BTreeSet::new();
    for (e, c) in &analyzed {
        tables.extend(c.table_names.iter().cloned());
        columns.extend(c.column_names.iter().cloned());
        for span in &e.entities {
            concepts.insert((span.domain, span.text.to_lowercase()));
        }
    }
    let metric = |f: &dyn Fn(&KbEntry, &SqlComplexity) -> f64| -> MeanStd {
        MeanStd::of(&analyzed.iter().map(|(e, c)| f(e, c)).collect::<Vec<_>>())
    };
    let pct = |f: &dyn Fn(&SqlComplexity) -> bool| -> f64 {
        if analyzed.is_empty() {
            0.0
        } else {
            100.0 * analyzed.iter().filter(|(_, c)| f(c)).count() as f64 / analyzed.len() as f64
        }
    };
    Ok(KbStats {
        n_samples: entries.len(),
        n_distinct_tables: tables.len(),
        n_distinct_columns: columns.len(),
        unique_entity_terms: concepts.len(),
        text_chars: metric(&|e, _| e.natural_text.chars().count() as f64),
        text_words: metric(&|e, _| e.natural_text.split_whitespace().count() as f64),
        entities_per_entry: metric(&|e, _| e.entities.len() as f64),
        sql_chars: metric(&|_, c| c.char_length as f64),
        tables_referenced: metric(&|_, c| c.tables_referenced as f64),
        joins: metric(&|_, c| c.join_count as f64),
        logical_conditions: metric(&|_, c| c.logical_conditions as f64),
        pct_with_aggregation: pct(&|c| c.has_aggregation),
        pct_with_datetime: pct(&|c| c.has_datetime_ops),
        pct_with_subquery: pct(&|c| c.has_subquery),
        excluded,
        conventions: COUNTING_CONVENTIONS.iter().map(|s| s.to_string()).collect(),
    })
}

impl KbStats {
    /// Plain-text report laid out as statistic/value rows.
    pub fn render(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let rows: Vec<(&str, String)> = vec![
            ("Number of samples", self.n_samples.to_string()),
            (
                "Number of different tables used",
                self.n_distinct_tables.to_string(),
            ),
            (
                "Number of different columns used",
                self.n_distinct_columns.to_string(),
            ),
            (
                "Unique medical concepts",
                self.unique_entity_terms.to_string(),
            ),
            (
                "Question/criteria length [chars]",
                self.text_chars.to_string(),
            ),
            (
                "Question/criteria length [words]",
                self.text_words.to_string(),
            ),
            (
                "Medical entities per query",
                self.entities_per_entry.to_string(),
            ),
            ("SQL length [chars]", self.sql_chars.to_string()),
            ("Tables referenced", self.tables_referenced.to_string()),
            ("Joins per query", self.joins.to_string()),
            ("Logical conditions", self.logical_conditions.to_string()),
            (
                "Queries with aggregation functions (%)",
                format!("{:.1}", self.pct_with_aggregation),
            ),
            (
                "Queries with date/time operations (%)",
                format!("{:.1}", self.pct_with_datetime),
            ),
            (
                "Queries with subqueries (%)",
                format!("{:.1}", self.pct_with_subquery),
            ),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            let _ = writeln!(s, "  {k:<width$}  {v}");
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(s, "Excluded (SQL analysis failed):");
            for (id, err) in &self.excluded {
                let _ = writeln!(s, "  {id}: {err}");
            }
        }
        let _ = writeln!(s, "Counting conventions:");
        for c in &self.conventions {
            let _ = writeln!(s, "  - {c}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;

    fn line(id: &str, sql: &str) -> String {
        serde_json::to_string(&KbEntry::new(id, KbKind::Ask, "How many patients?", sql)).unwrap()
    }

    #[test]
    fn empty_file_loads_empty() {
        assert!(read_kb("".as_bytes(), KbKind::Ask).unwrap().is_empty());
        assert!(read_kb("\n\n".as_bytes(), KbKind::Ask).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let data = format!("{}\n{}\n", line("q1", "SELECT 1"), line("q1", "SELECT 2"));
        match read_kb(data.as_bytes(), KbKind::Ask) {
            Err(KbError::DuplicateId { id, first, second }) => {
                assert_eq!((id.as_str(), first, second), ("q1", 0, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_names_index() {
        let data = format!("{}\n\n{{not json\n", line("q1", "SELECT 1"));
        match read_kb(data.as_bytes(), KbKind::Ask) {
            Err(KbError::Malformed { index, line, .. }) => assert_eq!((index, line), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
        let empty_sql = line("q2", "  ");
        assert!(matches!(
            read_kb(empty_sql.as_bytes(), KbKind::Ask),
            Err(KbError::Malformed { index: 0, .. })
        ));
        assert!(matches!(
            read_kb(line("q3", "SELECT 1").as_bytes(), KbKind::Coho),
            Err(KbError::Malformed { .. })
        ));
    }

    #[test]
    fn masked_text_derived_from_entities() {
        let mut e = KbEntry::new("q1", KbKind::Ask, "Patients with asthma", "SELECT 1");
        e.entities
            .push(EntitySpan::new(14, 20, "asthma", Domain::Condition));
        let data = serde_json::to_string(&e).unwrap();
        let loaded = read_kb(data.as_bytes(), KbKind::Ask).unwrap();
        assert_eq!(loaded[0].masked_text, "Patients with CONDITION");
    }

    #[test]
    fn embedding_norm_checked() {
        let mut e = KbEntry::new("q1", KbKind::Ask, "x", "SELECT 1");
        e.embedding = Some(vec![0.5, 0.5]);
        let data = serde_json::to_string(&e).unwrap();
        assert!(read_kb(data.as_bytes(), KbKind::Ask).is_err());
        e.embedding = Some(vec![0.6, 0.8]);
        let data = serde_json::to_string(&e).unwrap();
        assert!(read_kb(data.as_bytes(), KbKind::Ask).is_ok());
    }

    #[test]
    fn single_entry_stats() {
        let e = KbEntry::new(
            "q1",
            KbKind::Ask,
            "How many persons?",
            "SELECT COUNT(*) FROM person",
        );
        let s = kb_stats(&[e]).unwrap();
        assert_eq!(s.n_samples, 1);
        assert_eq!(s.joins.mean, 0.0);
        assert_eq!(s.joins.std, 0.0);
        assert_eq!(s.pct_with_aggregation, 100.0);
        assert_eq!(s.n_distinct_tables, 1);
    }

    #[test]
    fn two_entry_sample_std() {
        // joins 1 and 3: mean 2, sample std sqrt((1 + 1) / (2 - 1)) = sqrt(2)
        let one = "SELECT * FROM a JOIN b ON a.id = b.id";
        let three =
            "SELECT * FROM a JOIN b ON a.id = b.id JOIN c ON c.id = a.id JOIN d ON d.id = a.id";
        let s = kb_stats(&[
            KbEntry::new("x", KbKind::Ask, "t", one),
            KbEntry::new("y", KbKind::Ask, "t", three),
        ])
        .unwrap();
        assert_eq!(s.joins.mean, 2.0);
        assert!((s.joins.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unparseable_entries_are_excluded_and_listed() {
        let s = kb_stats(&[
            KbEntry::new("good", KbKind::Ask, "t", "SELECT COUNT(*) FROM person"),
            KbEntry::new("bad", KbKind::Ask, "t", "SELECT FROMM WHERE"),
        ])
        .unwrap();
        assert_eq!(s.n_samples, 2);
        assert_eq!(s.excluded.len(), 1);
        assert_eq!(s.excluded[0].0, "bad");
        assert!(s.render("KB").contains("bad:"));
        assert_eq!(kb_stats(&[]), Err(EmptyKb));
    }
}
