//! Structural complexity profile of a SQL statement.
//!
//! Counting rules:
//! - tables: every relation in a FROM/JOIN position, repeats included.
//! - joins: explicit `JOIN`s plus comma-separated FROM items beyond the first,
//!   counted per SELECT.
//! - logical conditions: `AND`/`OR`/`NOT` inside WHERE, HAVING and `JOIN ... ON`
//!   of each SELECT, not descending into nested queries (they count on their
//!   own). `NOT IN`, `NOT EXISTS`, `NOT BETWEEN`, `NOT LIKE` count as one NOT;
//!   the `AND` of `BETWEEN` and the `NOT` of `IS NOT NULL` are not counted.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    BinaryOperator, Expr, ObjectName, Query, Select, SelectItem, Statement, TableFactor,
    TableWithJoins, UnaryOperator, Value, Visit, Visitor,
};
use sqlparser::dialect::{Dialect, GenericDialect, SQLiteDialect, SnowflakeDialect};
use sqlparser::parser::Parser;

use crate::placeholder::replace_placeholders;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlComplexity {
    pub tables_referenced: usize,
    pub join_count: usize,
    pub logical_conditions: usize,
    pub has_aggregation: bool,
    pub has_datetime_ops: bool,
    pub has_subquery: bool,
    pub char_length: usize,
    /// Distinct base tables (lowercased, CTE names removed).
    pub table_names: BTreeSet<String>,
    /// Distinct column identifiers (lowercased, projection aliases removed).
    pub column_names: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("SQL analysis failed: {diagnostic}")]
pub struct AnalysisError {
    pub diagnostic: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SqlDialect {
    Snowflake,
    Sqlite,
    Generic,
}

impl SqlDialect {
    fn parser_dialect(self) -> Box<dyn Dialect> {
        match self {
            SqlDialect::Snowflake => Box::new(SnowflakeDialect {}),
            SqlDialect::Sqlite => Box::new(SQLiteDialect {}),
            SqlDialect::Generic => Box::new(GenericDialect {}),
        }
    }
}

/// Parses `sql` under one dialect. Placeholders are replaced by a numeric
/// literal first so placeholder SQL parses like its resolved form.
pub fn parse_statements(sql: &str, dialect: SqlDialect) -> Result<Vec<Statement>, AnalysisError> {
    let literal = replace_placeholders(sql, |_, _| "0".to_string());
    let statements =
        Parser::parse_sql(dialect.parser_dialect().as_ref(), &literal).map_err(|e| {
            AnalysisError {
                diagnostic: e.to_string(),
            }
        })?;
    if statements.is_empty() {
        return Err(AnalysisError {
            diagnostic: "no SQL statement found".into(),
        });
    }
    Ok(statements)
}

/// Tries Snowflake, then SQLite, then the generic dialect; reports the first
/// dialect's diagnostic when all fail.
pub fn parse_any(sql: &str) -> Result<Vec<Statement>, AnalysisError> {
    let mut first_err = None;
    for d in [
        SqlDialect::Snowflake,
        SqlDialect::Sqlite,
        SqlDialect::Generic,
    ] {
        match parse_statements(sql, d) {
            Ok(s) => return Ok(s),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.expect("at least one dialect tried"))
}

pub fn analyze_sql(sql: &str) -> Result<SqlComplexity, AnalysisError> {
    analyze_statements(sql, &parse_any(sql)?)
}

pub fn analyze_sql_with(sql: &str, dialect: SqlDialect) -> Result<SqlComplexity, AnalysisError> {
    analyze_statements(sql, &parse_statements(sql, dialect)?)
}

fn analyze_statements(sql: &str, statements: &[Statement]) -> Result<SqlComplexity, AnalysisError> {
    let mut v = ComplexityVisitor::default();
    for s in statements {
        let _ = s.visit(&mut v);
    }
    let mut table_names = v.tables;
    for cte in &v.cte_names {
        table_names.remove(cte);
    }
    let mut column_names = v.columns;
    for alias in &v.aliases {
        column_names.remove(alias);
    }
    Ok(SqlComplexity {
        tables_referenced: v.relation_refs,
        join_count: v.joins,
        logical_conditions: v.logical,
        has_aggregation: v.aggregation,
        has_datetime_ops: v.datetime,
        has_subquery: v.queries > statements.len(),
        char_length: sql.chars().count(),
        table_names,
        column_names,
    })
}

const AGGREGATES: [&str; 5] = ["COUNT", "SUM", "AVG", "MIN", "MAX"];

const DATETIME_FUNCTIONS: &[&str] = &[
    "ADD_MONTHS",
    "AGE",
    "CURRENT_DATE",
    "CURRENT_TIME",
    "CURRENT_TIMESTAMP",
    "DATE",
    "DATEADD",
    "DATEDIFF",
    "DATETIME",
    "DATE_ADD",
    "DATE_DIFF",
    "DATE_FROM_PARTS",
    "DATE_PART",
    "DATE_SUB",
    "DATE_TRUNC",
    "DAY",
    "DAYOFWEEK",
    "DAYOFYEAR",
    "GETDATE",
    "JULIANDAY",
    "LAST_DAY",
    "MONTH",
    "MONTHS_BETWEEN",
    "NOW",
    "STRFTIME",
    "SYSDATE",
    "TIMEDIFF",
    "TIMESTAMPADD",
    "TIMESTAMPDIFF",
    "TIMESTAMP_FROM_PARTS",
    "TO_DATE",
    "TO_TIMESTAMP",
    "WEEK",
    "YEAR",
];

fn last_part_upper(name: &ObjectName) -> String {
    let s = name.to_string();
    s.rsplit('.')
        .next()
        .unwrap_or(&s)
        .trim_matches('"')
        .to_ascii_uppercase()
}

fn is_date_type(data_type: &impl ToString) -> bool {
    let t = data_type.to_string().to_ascii_uppercase();
    t.starts_with("DATE") || t.starts_with("TIME")
}

fn is_iso_date_literal(e: &Expr) -> bool {
    if let Expr::Value(v) = e {
        if let Value::SingleQuotedString(s) = &v.value {
            let b = s.as_bytes();
            return b.len() >= 10
                && b[..4].iter().all(u8::is_ascii_digit)
                && b[4] == b'-'
                && b[5..7].iter().all(u8::is_ascii_digit)
                && b[7] == b'-'
                && b[8..10].iter().all(u8::is_ascii_digit);
        }
    }
    false
}

fn is_comparison(op: &BinaryOperator) -> bool {
    matches!(
        op,
        BinaryOperator::Eq
            | BinaryOperator::NotEq
            | BinaryOperator::Lt
            | BinaryOperator::LtEq
            | BinaryOperator::Gt
            | BinaryOperator::GtEq
    )
}

/// Counts logical operators in one clause, skipping nested queries.
#[derive(Default)]
struct LogicalCounter {
    depth: usize,
    count: usize,
}

impl Visitor for LogicalCounter {
    type Break = ();

    fn pre_visit_query(&mut self, _: &Query) -> ControlFlow<()> {
        self.depth += 1;
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _: &Query) -> ControlFlow<()> {
        self.depth -= 1;
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        if self.depth > 0 {
            return ControlFlow::Continue(());
        }
        let hit = match expr {
            Expr::BinaryOp { op, .. } => matches!(op, BinaryOperator::And | BinaryOperator::Or),
            Expr::UnaryOp { op, .. } => matches!(op, UnaryOperator::Not),
            Expr::InList { negated, .. }
            | Expr::InSubquery { negated, .. }
            | Expr::Between { negated, .. }
            | Expr::Like { negated, .. }
            | Expr::ILike { negated, .. }
            | Expr::Exists { negated, .. } => *negated,
            _ => false,
        };
        if hit {
            self.count += 1;
        }
        ControlFlow::Continue(())
    }
}

fn count_logical<V: Visit>(node: &V) -> usize {
    let mut c = LogicalCounter::default();
    let _ = node.visit(&mut c);
    c.count
}

#[derive(Default)]
struct ComplexityVisitor {
    queries: usize,
    relation_refs: usize,
    joins: usize,
    logical: usize,
    aggregation: bool,
    datetime: bool,
    tables: BTreeSet<String>,
    cte_names: BTreeSet<String>,
    columns: BTreeSet<String>,
    aliases: BTreeSet<String>,
}

impl ComplexityVisitor {
    fn count_from(&mut self, twj: &TableWithJoins) {
        self.joins += twj.joins.len();
        self.logical += twj
            .joins
            .iter()
            .map(|j| count_logical(&j.join_operator))
            .sum::<usize>();
        let factors = std::iter::once(&twj.relation).chain(twj.joins.iter().map(|j| &j.relation));
        for factor in factors {
            if let TableFactor::NestedJoin {
                table_with_joins, ..
            } = factor
            {
                self.count_from(table_with_joins);
            }
        }
    }
}

impl Visitor for ComplexityVisitor {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        self.queries += 1;
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.cte_names.insert(cte.alias.name.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_select(&mut self, select: &Select) -> ControlFlow<()> {
        self.joins += select.from.len().saturating_sub(1);
        for twj in &select.from {
            self.count_from(twj);
        }
        self.logical += count_logical(&select.selection) + count_logical(&select.having);
        for item in &select.projection {
            if let SelectItem::ExprWithAlias { alias, .. } = item {
                self.aliases.insert(alias.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<()> {
        self.relation_refs += 1;
        self.tables.insert(last_part_upper(relation).to_lowercase());
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        match expr {
            Expr::Function(f) => {
                let name = last_part_upper(&f.name);
                if AGGREGATES.contains(&name.as_str()) {
                    self.aggregation = true;
                }
                if DATETIME_FUNCTIONS.contains(&name.as_str()) {
                    self.datetime = true;
                }
            }
            Expr::TypedString(ts) if is_date_type(&ts.data_type) => self.datetime = true,
            Expr::Cast { data_type, .. } if is_date_type(data_type) => self.datetime = true,
            Expr::Extract { .. } | Expr::Interval(_) => self.datetime = true,
            Expr::BinaryOp { left, op, right } if is_comparison(op) => {
                if is_iso_date_literal(left) || is_iso_date_literal(right) {
                    self.datetime = true;
                }
            }
            Expr::Between { low, high, .. } => {
                if is_iso_date_literal(low) || is_iso_date_literal(high) {
                    self.datetime = true;
                }
            }
            Expr::Identifier(ident) => {
                self.columns.insert(ident.value.to_lowercase());
            }
            Expr::CompoundIdentifier(parts) => {
                if let Some(last) = parts.last() {
                    self.columns.insert(last.value.to_lowercase());
                }
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_one_has_nothing() {
        let c = analyze_sql("SELECT 1").unwrap();
        assert_eq!(
            (c.tables_referenced, c.join_count, c.logical_conditions),
            (0, 0, 0)
        );
        assert!(!c.has_aggregation && !c.has_datetime_ops && !c.has_subquery);
        assert_eq!(c.char_length, 8);
    }

    #[test]
    fn join_with_date_literal_and_subquery() {
        let sql = "SELECT p.person_id FROM person p JOIN condition_occurrence c ON p.person_id=c.person_id WHERE c.condition_start_date >= DATE '2020-01-01' AND c.condition_concept_id IN (SELECT concept_id FROM concept)";
        let c = analyze_sql(sql).unwrap();
        assert_eq!(
            (c.tables_referenced, c.join_count, c.logical_conditions),
            (3, 1, 1)
        );
        assert!(!c.has_aggregation);
        assert!(c.has_datetime_ops);
        assert!(c.has_subquery);
        assert_eq!(
            c.table_names.iter().map(String::as_str).collect::<Vec<_>>(),
            ["concept", "condition_occurrence", "person"]
        );
    }

    #[test]
    fn count_star() {
        let c = analyze_sql("SELECT COUNT(*) FROM person").unwrap();
        assert_eq!(
            (c.tables_referenced, c.join_count, c.logical_conditions),
            (1, 0, 0)
        );
        assert!(c.has_aggregation && !c.has_datetime_ops && !c.has_subquery);
    }

    #[test]
    fn comma_joins_between_and_not_variants() {
        let sql = "SELECT a.x FROM a, b, c WHERE a.id = b.id AND b.id = c.id \
                   AND a.d BETWEEN 1 AND 5 AND a.y NOT IN (1, 2) AND a.z IS NOT NULL";
        let c = analyze_sql(sql).unwrap();
        assert_eq!(c.join_count, 2);
        assert_eq!(c.tables_referenced, 3);
        // three ANDs joining predicates + NOT IN
        assert_eq!(c.logical_conditions, 5);
    }

    #[test]
    fn nested_query_conditions_counted_once() {
        let sql = "SELECT person_id FROM person WHERE year_of_birth > 1950 AND person_id IN \
                   (SELECT person_id FROM drug_exposure WHERE drug_concept_id = 1 OR drug_concept_id = 2)";
        let c = analyze_sql(sql).unwrap();
        assert_eq!(c.logical_conditions, 2);
        assert!(c.has_subquery);
    }

    #[test]
    fn cte_and_placeholders() {
        let sql = "WITH idx AS (SELECT person_id, MIN(drug_exposure_start_date) AS index_date \
                   FROM drug_exposure WHERE drug_concept_id IN ([drug@metformin]) GROUP BY person_id) \
                   SELECT i.person_id, i.index_date FROM idx i \
                   LEFT JOIN condition_occurrence co ON co.person_id = i.person_id AND co.condition_start_date < i.index_date \
                   WHERE DATEDIFF(day, co.condition_start_date, i.index_date) <= 365";
        let c = analyze_sql(sql).unwrap();
        assert!(c.has_subquery && c.has_aggregation && c.has_datetime_ops);
        assert_eq!(c.join_count, 1);
        assert_eq!(c.logical_conditions, 1);
        assert_eq!(c.tables_referenced, 3);
        assert!(!c.table_names.contains("idx"));
        assert!(!c.column_names.contains("index_date"));
        assert!(c.column_names.contains("drug_concept_id"));
    }

    #[test]
    fn sqlite_date_functions() {
        let c = analyze_sql(
            "SELECT person_id FROM person WHERE CAST(strftime('%Y', '2020-01-01') AS INTEGER) - year_of_birth >= 18",
        )
        .unwrap();
        assert!(c.has_datetime_ops);
    }

    #[test]
    fn unparseable_sql_carries_diagnostic() {
        let err = analyze_sql("SELECT FROMM WHERE").unwrap_err();
        assert!(!err.diagnostic.is_empty());
        assert!(analyze_sql("").is_err());
    }

    #[test]
    fn pure_function() {
        let sql =
            "SELECT COUNT(*) FROM person p JOIN visit_occurrence v ON v.person_id = p.person_id";
        assert_eq!(analyze_sql(sql).unwrap(), analyze_sql(sql).unwrap());
    }
}
