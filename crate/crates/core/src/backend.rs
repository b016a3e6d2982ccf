//! SQL execution interface and result-set shapes.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PersonId, PersonSet};
use crate::sql_complexity::SqlDialect;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SqlValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<SqlValue>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    /// The engine rejected the statement before running it.
    #[error("{diagnostic}")]
    Compile { diagnostic: String },
    /// The statement compiled but failed while running.
    #[error("{diagnostic}")]
    Runtime { diagnostic: String },
    /// The result does not have the columns the caller needs.
    #[error("result shape error: {message}")]
    Shape { message: String },
    #[error("backend unavailable: {message}")]
    Unavailable { message: String },
}

impl ExecError {
    /// Errors a model can plausibly fix by rewriting the SQL.
    pub fn is_healable(&self) -> bool {
        !matches!(self, ExecError::Unavailable { .. })
    }

    pub fn shape(message: impl Into<String>) -> Self {
        ExecError::Shape {
            message: message.into(),
        }
    }
}

/// Name of the temporary table holding the index cohort while per-criterion
/// funnel queries run.
pub const INDEX_COHORT_TABLE: &str = "index_cohort";

pub trait SqlExecutor: Send + Sync {
    fn dialect(&self) -> SqlDialect;

    fn execute(&self, sql: &str) -> Result<RowSet, ExecError>;

    /// Runs `sql` with the index cohort available as
    /// `index_cohort(person_id, index_date)`.
    fn execute_with_index(&self, sql: &str, index: &Cohort) -> Result<RowSet, ExecError>;
}

impl<T: SqlExecutor + ?Sized> SqlExecutor for &T {
    fn dialect(&self) -> SqlDialect {
        (**self).dialect()
    }
    fn execute(&self, sql: &str) -> Result<RowSet, ExecError> {
        (**self).execute(sql)
    }
    fn execute_with_index(&self, sql: &str, index: &Cohort) -> Result<RowSet, ExecError> {
        (**self).execute_with_index(sql, index)
    }
}

impl<T: SqlExecutor + ?Sized> SqlExecutor for std::sync::Arc<T> {
    fn dialect(&self) -> SqlDialect {
        (**self).dialect()
    }
    fn execute(&self, sql: &str) -> Result<RowSet, ExecError> {
        (**self).execute(sql)
    }
    fn execute_with_index(&self, sql: &str, index: &Cohort) -> Result<RowSet, ExecError> {
        (**self).execute_with_index(sql, index)
    }
}

/// Which columns a result must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResultShape {
    Any,
    PersonIds,
    Cohort,
}

fn parse_date(v: &SqlValue) -> Option<NaiveDate> {
    match v {
        SqlValue::Text(s) => {
            let s = s.trim();
            s.get(..10)
                .and_then(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok())
        }
        _ => None,
    }
}

fn parse_person(v: &SqlValue) -> Option<PersonId> {
    match v {
        SqlValue::Integer(i) => Some(*i),
        SqlValue::Real(f) if f.fract() == 0.0 => Some(*f as i64),
        SqlValue::Text(s) => s.trim().parse().ok(),
        _ => None,
    }
}

impl RowSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn check_shape(&self, shape: ResultShape) -> Result<(), ExecError> {
        match shape {
            ResultShape::Any => Ok(()),
            ResultShape::PersonIds => self.person_ids().map(|_| ()),
            ResultShape::Cohort => self.to_cohort().map(|_| ()),
        }
    }

    pub fn person_ids(&self) -> Result<PersonSet, ExecError> {
        let pc = self.column("person_id").ok_or_else(|| {
            ExecError::shape(format!("missing column person_id (got {:?})", self.columns))
        })?;
        self.rows
            .iter()
            .map(|r| {
                parse_person(&r[pc]).ok_or_else(|| {
                    ExecError::shape(format!("person_id value {:?} is not an integer", r[pc]))
                })
            })
            .collect()
    }

    /// Reads (person_id, index_date) rows; repeated persons keep their earliest date.
    pub fn to_cohort(&self) -> Result<Cohort, ExecError> {
        let pc = self.column("person_id").ok_or_else(|| {
            ExecError::shape(format!("missing column person_id (got {:?})", self.columns))
        })?;
        let dc = self.column("index_date").ok_or_else(|| {
            ExecError::shape(format!(
                "missing column index_date (got {:?})",
                self.columns
            ))
        })?;
        let mut rows = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let p = parse_person(&r[pc]).ok_or_else(|| {
                ExecError::shape(format!("person_id value {:?} is not an integer", r[pc]))
            })?;
            let d = parse_date(&r[dc]).ok_or_else(|| {
                ExecError::shape(format!("index_date value {:?} is not an ISO date", r[dc]))
            })?;
            rows.push((p, d));
        }
        Ok(Cohort::from_rows_earliest(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rs(columns: &[&str], rows: Vec<Vec<SqlValue>>) -> RowSet {
        RowSet {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    #[test]
    fn cohort_conversion() {
        let r = rs(
            &["PERSON_ID", "index_date"],
            vec![
                vec![SqlValue::Integer(2), SqlValue::Text("2020-03-01".into())],
                vec![
                    SqlValue::Integer(2),
                    SqlValue::Text("2020-01-01 00:00:00".into()),
                ],
                vec![
                    SqlValue::Text("5".into()),
                    SqlValue::Text("2021-01-01".into()),
                ],
            ],
        );
        let c = r.to_cohort().unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.index_date(2), NaiveDate::from_ymd_opt(2020, 1, 1));
        assert!(r.check_shape(ResultShape::Cohort).is_ok());
    }

    #[test]
    fn shape_errors() {
        let r = rs(&["id"], vec![vec![SqlValue::Integer(1)]]);
        assert!(matches!(r.to_cohort(), Err(ExecError::Shape { .. })));
        assert!(matches!(r.person_ids(), Err(ExecError::Shape { .. })));
        assert!(r.check_shape(ResultShape::Any).is_ok());
        let bad_date = rs(
            &["person_id", "index_date"],
            vec![vec![SqlValue::Integer(1), SqlValue::Integer(20200101)]],
        );
        assert!(bad_date.to_cohort().is_err());
        assert!(bad_date.person_ids().is_ok());
        assert!(ExecError::shape("x").is_healable());
        assert!(!ExecError::Unavailable {
            message: "down".into()
        }
        .is_healable());
    }
}
