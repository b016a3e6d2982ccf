//! Repair loop: run SQL, and on failure hand the statement and the engine's
//! diagnostic back to the model for a corrected version.

use serde::{Deserialize, Serialize};

use crate::backend::{ExecError, ResultShape, RowSet, SqlExecutor};
use crate::cohort::Cohort;
use crate::generation::{dialect_name, extract_sql, Attempt};
use crate::llm::{LlmProvider, LlmRequest, Message, ProviderError};

const HEAL_PROMPT: &str = include_str!("../prompts/heal_sql.v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealingConfig {
    pub max_iterations: u32,
}

pub const DEFAULT_MAX_ITERATIONS: u32 = 3;

impl Default for HealingConfig {
    fn default() -> Self {
        HealingConfig {
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Turns model output (which may contain fresh placeholders) into executable
/// SQL. An `Err` is fed back to the model like an engine error.
pub type Resolver<'a> = &'a (dyn Fn(&str) -> Result<String, String> + Sync);

#[derive(Clone, Copy)]
pub struct HealContext<'a> {
    pub shape: ResultShape,
    /// Loaded as the `index_cohort` table before every run.
    pub index: Option<&'a Cohort>,
    pub resolver: Option<Resolver<'a>>,
}

impl Default for HealContext<'_> {
    fn default() -> Self {
        HealContext {
            shape: ResultShape::Any,
            index: None,
            resolver: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealOutcome {
    pub sql: String,
    pub rows: RowSet,
    /// Model repair calls used; 0 when the input ran as given.
    pub iterations: u32,
    /// Every failed run, in order.
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HealError {
    #[error("SQL still failing after {} repair iterations: {}", .attempts.len().saturating_sub(1), last_error(.attempts))]
    Exhausted { attempts: Vec<Attempt> },
    #[error("backend error: {error}")]
    Backend {
        error: ExecError,
        attempts: Vec<Attempt>,
    },
    #[error("provider error during repair: {error}")]
    Provider {
        error: ProviderError,
        attempts: Vec<Attempt>,
    },
}

fn last_error(attempts: &[Attempt]) -> &str {
    attempts.last().map_or("", |a| a.error.as_str())
}

impl HealError {
    pub fn attempts(&self) -> &[Attempt] {
        match self {
            HealError::Exhausted { attempts }
            | HealError::Backend { attempts, .. }
            | HealError::Provider { attempts, .. } => attempts,
        }
    }
}

/// The repair prompt: instructions, the failing SQL and the verbatim error.
pub fn heal_request(dialect: &str, sql: &str, error: &str) -> LlmRequest {
    let system = HEAL_PROMPT.replace("{dialect}", dialect);
    let user =
        format!("### Repair\nFailed SQL:\n```sql\n{sql}\n```\nError from the database:\n{error}\n");
    LlmRequest::new(vec![Message::system(system), Message::user(user)])
}

fn run<E: SqlExecutor + ?Sized>(
    sql: &str,
    executor: &E,
    ctx: &HealContext<'_>,
) -> Result<RowSet, ExecError> {
    let rows = match ctx.index {
        Some(index) => executor.execute_with_index(sql, index)?,
        None => executor.execute(sql)?,
    };
    rows.check_shape(ctx.shape)?;
    Ok(rows)
}

pub fn self_heal<E, P>(
    sql: &str,
    executor: &E,
    llm: &P,
    cfg: &HealingConfig,
    ctx: &HealContext<'_>,
) -> Result<HealOutcome, HealError>
where
    E: SqlExecutor + ?Sized,
    P: LlmProvider + ?Sized,
{
    let dialect = dialect_name(executor.dialect());
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut current = sql.to_string();
    let mut iterations = 0;
    loop {
        let mut error = match run(&current, executor, ctx) {
            Ok(rows) => {
                return Ok(HealOutcome {
                    sql: current,
                    rows,
                    iterations,
                    attempts,
                })
            }
            Err(e) if !e.is_healable() => {
                return Err(HealError::Backend { error: e, attempts });
            }
            Err(e) => e.to_string(),
        };
        attempts.push(Attempt {
            sql: current.clone(),
            error: error.clone(),
        });
        loop {
            if iterations >= cfg.max_iterations {
                return Err(HealError::Exhausted { attempts });
            }
            iterations += 1;
            let reply = match llm.complete(&heal_request(dialect, &current, &error)) {
                Ok(r) => r,
                Err(error) => return Err(HealError::Provider { error, attempts }),
            };
            let candidate = match extract_sql(&reply) {
                Some(fixed) => match ctx.resolver {
                    Some(resolve) => resolve(&fixed).map_err(|msg| (fixed, msg)),
                    None => Ok(fixed),
                },
                None => Err((
                    current.clone(),
                    "model reply contained no SQL statement".to_string(),
                )),
            };
            match candidate {
                Ok(fixed) => {
                    current = fixed;
                    break;
                }
                Err((sql, msg)) => {
                    error = msg;
                    attempts.push(Attempt {
                        sql: sql.clone(),
                        error: error.clone(),
                    });
                    current = sql;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SqlValue;
    use crate::llm::{MockLlm, Transcript};
    use crate::sql_complexity::{parse_statements, SqlDialect};

    /// Accepts whatever the SQLite grammar accepts and returns one row.
    struct ParseOnly;

    impl SqlExecutor for ParseOnly {
        fn dialect(&self) -> SqlDialect {
            SqlDialect::Sqlite
        }

        fn execute(&self, sql: &str) -> Result<RowSet, ExecError> {
            parse_statements(sql, SqlDialect::Sqlite).map_err(|e| ExecError::Compile {
                diagnostic: e.diagnostic,
            })?;
            Ok(RowSet {
                columns: vec!["person_id".into()],
                rows: vec![vec![SqlValue::Integer(1)]],
            })
        }

        fn execute_with_index(&self, sql: &str, _index: &Cohort) -> Result<RowSet, ExecError> {
            self.execute(sql)
        }
    }

    const GOOD: &str = "SELECT person_id FROM person";
    const BROKEN: &str = "SELECT person_id FROMM person WHERE";

    #[test]
    fn valid_sql_needs_no_repair() {
        let llm = MockLlm::new(Transcript::default());
        let out = self_heal(
            GOOD,
            &ParseOnly,
            &llm,
            &HealingConfig::default(),
            &HealContext::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.attempts.is_empty());
        assert!(llm.requests().is_empty());
    }

    #[test]
    fn fixed_on_first_feedback() {
        let llm = MockLlm::new(Transcript::default().turn(&format!("```sql\n{GOOD}\n```")));
        let out = self_heal(
            BROKEN,
            &ParseOnly,
            &llm,
            &HealingConfig::default(),
            &HealContext::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.sql, GOOD);
        assert_eq!(out.attempts.len(), 1);
        let prompt = llm.requests()[0].full_text();
        assert!(prompt.contains(BROKEN));
        assert!(prompt.contains(&out.attempts[0].error));
    }

    #[test]
    fn never_fixed_stops_after_three() {
        let llm = MockLlm::new(Transcript::default().rule(&["### Repair"], &[BROKEN]));
        let err = self_heal(
            BROKEN,
            &ParseOnly,
            &llm,
            &HealingConfig::default(),
            &HealContext::default(),
        )
        .unwrap_err();
        assert!(matches!(err, HealError::Exhausted { .. }));
        assert_eq!(llm.requests().len(), 3);
        assert_eq!(err.attempts().len(), 4);
    }

    #[test]
    fn zero_iterations_means_no_repair() {
        let llm = MockLlm::new(Transcript::default().turn(GOOD));
        let err = self_heal(
            BROKEN,
            &ParseOnly,
            &llm,
            &HealingConfig { max_iterations: 0 },
            &HealContext::default(),
        )
        .unwrap_err();
        assert_eq!(err.attempts().len(), 1);
        assert!(llm.requests().is_empty());
    }

    #[test]
    fn each_retry_sees_the_previous_error() {
        let second = "SELECT person_id FROM person WHERE (";
        let llm = MockLlm::new(Transcript::default().turn(second).turn(GOOD));
        let out = self_heal(
            BROKEN,
            &ParseOnly,
            &llm,
            &HealingConfig::default(),
            &HealContext::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 2);
        let reqs = llm.requests();
        for (attempt, req) in out.attempts.iter().zip(&reqs) {
            let text = req.full_text();
            assert!(text.contains(&attempt.sql));
            assert!(text.contains(&attempt.error));
        }
    }

    #[test]
    fn prose_reply_consumes_an_iteration() {
        let llm = MockLlm::new(Transcript::default().turn("I am not sure.").turn(GOOD));
        let out = self_heal(
            BROKEN,
            &ParseOnly,
            &llm,
            &HealingConfig::default(),
            &HealContext::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 2);
        assert!(llm.requests()[1].full_text().contains("no SQL statement"));
    }

    #[test]
    fn resolver_errors_are_fed_back() {
        let with_ph =
            "SELECT person_id FROM drug_exposure WHERE drug_concept_id IN ([drug@unobtainium])";
        let resolve = |s: &str| {
            if s.contains("unobtainium") {
                Err("no concept for [drug@unobtainium]".to_string())
            } else {
                Ok(s.to_string())
            }
        };
        let llm = MockLlm::new(Transcript::default().turn(with_ph).turn(GOOD));
        let ctx = HealContext {
            resolver: Some(&resolve),
            ..HealContext::default()
        };
        let out = self_heal(BROKEN, &ParseOnly, &llm, &HealingConfig::default(), &ctx).unwrap();
        assert_eq!(out.iterations, 2);
        assert!(llm.requests()[1]
            .full_text()
            .contains("no concept for [drug@unobtainium]"));
    }

    #[test]
    fn shape_errors_are_healable() {
        let llm = MockLlm::new(Transcript::default().turn(GOOD));
        let ctx = HealContext {
            shape: ResultShape::Cohort,
            ..HealContext::default()
        };
        let err = self_heal(
            GOOD,
            &ParseOnly,
            &llm,
            &HealingConfig { max_iterations: 1 },
            &ctx,
        )
        .unwrap_err();
        assert!(err.attempts()[0].error.contains("index_date"));
    }
}
