//! SQLite execution backend. Every call opens its own connection, so jobs
//! running in parallel never share temp tables or statement state.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rusqlite::types::ValueRef;
use rusqlite::{params, Connection, OpenFlags};

use cohort_core::backend::{ExecError, RowSet, SqlExecutor, SqlValue, INDEX_COHORT_TABLE};
use cohort_core::cohort::Cohort;
use cohort_core::sql_complexity::SqlDialect;

static MEMORY_DB_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq, Eq)]
enum Location {
    File(PathBuf),
    /// Shared-cache in-memory database; lives while `_keeper` is open.
    Memory(String),
}

#[derive(Debug)]
pub struct SqliteBackend {
    location: Location,
    /// Tag reported to prompts; SQL itself always runs on SQLite.
    dialect: SqlDialect,
    _keeper: Option<Mutex<Connection>>,
}

fn unavailable(e: rusqlite::Error) -> ExecError {
    ExecError::Unavailable {
        message: e.to_string(),
    }
}

impl SqliteBackend {
    /// Opens an existing database file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Err(ExecError::Unavailable {
                message: format!("database file {} does not exist", path.display()),
            });
        }
        let backend = SqliteBackend {
            location: Location::File(path),
            dialect: SqlDialect::Sqlite,
            _keeper: None,
        };
        backend.connect()?;
        Ok(backend)
    }

    /// A fresh, empty in-memory database private to this value.
    pub fn in_memory() -> Result<Self, ExecError> {
        let n = MEMORY_DB_COUNTER.fetch_add(1, Ordering::Relaxed);
        let name = format!(
            "file:cohort_mem_{}_{n}?mode=memory&cache=shared",
            std::process::id()
        );
        let keeper = Connection::open_with_flags(&name, Self::flags()).map_err(unavailable)?;
        Ok(SqliteBackend {
            location: Location::Memory(name),
            dialect: SqlDialect::Sqlite,
            _keeper: Some(Mutex::new(keeper)),
        })
    }

    pub fn with_dialect_tag(mut self, dialect: SqlDialect) -> Self {
        self.dialect = dialect;
        self
    }

    fn flags() -> OpenFlags {
        OpenFlags::SQLITE_OPEN_READ_WRITE
            | OpenFlags::SQLITE_OPEN_CREATE
            | OpenFlags::SQLITE_OPEN_URI
            | OpenFlags::SQLITE_OPEN_NO_MUTEX
    }

    /// A new connection to the same database.
    pub fn connect(&self) -> Result<Connection, ExecError> {
        let conn = match &self.location {
            // never recreate a file that disappeared underneath us
            Location::File(p) => {
                Connection::open_with_flags(p, Self::flags() - OpenFlags::SQLITE_OPEN_CREATE)
            }
            Location::Memory(name) => Connection::open_with_flags(name, Self::flags()),
        }
        .map_err(unavailable)?;
        conn.busy_timeout(std::time::Duration::from_secs(10))
            .map_err(unavailable)?;
        Ok(conn)
    }

    /// Runs a batch of DDL/DML, e.g. to load a schema.
    pub fn execute_batch(&self, sql: &str) -> Result<(), ExecError> {
        self.connect()?
            .execute_batch(sql)
            .map_err(|e| ExecError::Runtime {
                diagnostic: e.to_string(),
            })
    }

    /// Copies the whole database into a file.
    pub fn save_to(&self, path: impl AsRef<Path>) -> Result<(), ExecError> {
        let conn = self.connect()?;
        let target = path.as_ref().to_string_lossy().replace('\'', "''");
        conn.execute_batch(&format!("VACUUM INTO '{target}'"))
            .map_err(|e| ExecError::Runtime {
                diagnostic: e.to_string(),
            })
    }

    fn query(conn: &Connection, sql: &str) -> Result<RowSet, ExecError> {
        let mut stmt = conn.prepare(sql).map_err(|e| ExecError::Compile {
            diagnostic: e.to_string(),
        })?;
        let columns: Vec<String> = stmt
            .column_names()
            .into_iter()
            .map(str::to_string)
            .collect();
        let n = columns.len();
        let mut out = RowSet {
            columns,
            rows: Vec::new(),
        };
        let runtime = |e: rusqlite::Error| ExecError::Runtime {
            diagnostic: e.to_string(),
        };
        let mut rows = stmt.query([]).map_err(runtime)?;
        while let Some(row) = rows.next().map_err(runtime)? {
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                values.push(match row.get_ref(i).map_err(runtime)? {
                    ValueRef::Null => SqlValue::Null,
                    ValueRef::Integer(v) => SqlValue::Integer(v),
                    ValueRef::Real(v) => SqlValue::Real(v),
                    ValueRef::Text(t) => SqlValue::Text(String::from_utf8_lossy(t).into_owned()),
                    ValueRef::Blob(b) => SqlValue::Text(format!("<{} byte blob>", b.len())),
                });
            }
            out.rows.push(values);
        }
        Ok(out)
    }
}

/// Creates `index_cohort(person_id, index_date)` as a temp table on `conn`.
pub fn load_index_cohort(conn: &Connection, index: &Cohort) -> Result<(), rusqlite::Error> {
    conn.execute_batch(&format!(
        "DROP TABLE IF EXISTS temp.{INDEX_COHORT_TABLE};
         CREATE TEMP TABLE {INDEX_COHORT_TABLE} (person_id INTEGER PRIMARY KEY, index_date TEXT NOT NULL);"
    ))?;
    let tx = conn.unchecked_transaction()?;
    {
        let mut ins = tx.prepare(&format!(
            "INSERT INTO temp.{INDEX_COHORT_TABLE} VALUES (?1, ?2)"
        ))?;
        for (p, d) in index.iter() {
            ins.execute(params![p, d.format("%Y-%m-%d").to_string()])?;
        }
    }
    tx.commit()
}

impl SqlExecutor for SqliteBackend {
    fn dialect(&self) -> SqlDialect {
        self.dialect
    }

    fn execute(&self, sql: &str) -> Result<RowSet, ExecError> {
        let conn = self.connect()?;
        Self::query(&conn, sql)
    }

    fn execute_with_index(&self, sql: &str, index: &Cohort) -> Result<RowSet, ExecError> {
        let conn = self.connect()?;
        load_index_cohort(&conn, index).map_err(unavailable)?;
        Self::query(&conn, sql)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn backend() -> SqliteBackend {
        let b = SqliteBackend::in_memory().unwrap();
        b.execute_batch(
            "CREATE TABLE person (person_id INTEGER PRIMARY KEY, year_of_birth INTEGER);
             INSERT INTO person VALUES (1, 1950), (2, 1990), (3, 2001);",
        )
        .unwrap();
        b
    }

    #[test]
    fn rows_and_columns() {
        let rs = backend()
            .execute("SELECT person_id, year_of_birth AS yob FROM person ORDER BY person_id")
            .unwrap();
        assert_eq!(rs.columns, vec!["person_id", "yob"]);
        assert_eq!(rs.rows.len(), 3);
        assert_eq!(rs.rows[0][1], SqlValue::Integer(1950));
    }

    #[test]
    fn compile_errors_carry_the_engine_text() {
        let err = backend().execute("SELECT FROMM x").unwrap_err();
        let ExecError::Compile { diagnostic } = &err else {
            panic!("{err:?}")
        };
        assert!(
            diagnostic.contains("syntax error") || diagnostic.contains("no such"),
            "{diagnostic}"
        );
        let err = backend().execute("SELECT nope FROM person").unwrap_err();
        assert!(err.to_string().contains("no such column: nope"), "{err}");
    }

    #[test]
    fn empty_result() {
        let rs = backend()
            .execute("SELECT person_id FROM person WHERE 0")
            .unwrap();
        assert!(rs.is_empty());
    }

    #[test]
    fn index_cohort_is_per_connection() {
        let b = backend();
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let index = Cohort::try_from_rows([(1, d), (3, d)]).unwrap();
        let rs = b
            .execute_with_index(
                "SELECT person_id, index_date FROM index_cohort ORDER BY 1",
                &index,
            )
            .unwrap();
        assert_eq!(rs.rows.len(), 2);
        assert_eq!(rs.rows[0][1], SqlValue::Text("2020-01-01".into()));
        assert!(b.execute("SELECT * FROM index_cohort").is_err());
    }

    #[test]
    fn separate_memory_databases() {
        let a = backend();
        let b = SqliteBackend::in_memory().unwrap();
        assert!(a.execute("SELECT * FROM person").is_ok());
        assert!(b.execute("SELECT * FROM person").is_err());
    }

    #[test]
    fn missing_file_is_unavailable() {
        let err = SqliteBackend::open("/nonexistent/omop.sqlite").unwrap_err();
        assert!(!err.is_healable());
    }
}
