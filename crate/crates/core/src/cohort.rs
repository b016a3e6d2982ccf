//! Patient cohorts: person ids with one index date each.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub type PersonId = i64;
pub type PersonSet = BTreeSet<PersonId>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    rows: BTreeMap<PersonId, NaiveDate>,
}

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("person {0} appears more than once")]
    DuplicatePerson(PersonId),
    #[error("cohort file row {row}: {message}")]
    Row { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Cohort {
    pub fn new() -> Self {
        Cohort::default()
    }

    /// Builds a cohort, rejecting repeated person ids.
    pub fn try_from_rows<I>(rows: I) -> Result<Self, CohortError>
    where
        I: IntoIterator<Item = (PersonId, NaiveDate)>,
    {
        let mut c = Cohort::new();
        for (p, d) in rows {
            if c.rows.insert(p, d).is_some() {
                return Err(CohortError::DuplicatePerson(p));
            }
        }
        Ok(c)
    }

    /// Builds a cohort keeping the earliest date for repeated person ids.
    pub fn from_rows_earliest<I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (PersonId, NaiveDate)>,
    {
        let mut c = Cohort::new();
        for (p, d) in rows {
            c.rows
                .entry(p)
                .and_modify(|e| *e = (*e).min(d))
                .or_insert(d);
        }
        c
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn index_date(&self, person: PersonId) -> Option<NaiveDate> {
        self.rows.get(&person).copied()
    }

    pub fn contains(&self, person: PersonId) -> bool {
        self.rows.contains_key(&person)
    }

    pub fn persons(&self) -> PersonSet {
        self.rows.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PersonId, NaiveDate)> + '_ {
        self.rows.iter().map(|(&p, &d)| (p, d))
    }

    /// Keeps only persons for which `keep` holds; dates are preserved.
    pub fn retain(&mut self, mut keep: impl FnMut(PersonId) -> bool) {
        self.rows.retain(|&p, _| keep(p));
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CohortError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["person_id", "index_date"])?;
        for (p, d) in self.iter() {
            w.write_record([p.to_string(), d.format("%Y-%m-%d").to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, CohortError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
        };
        let (pc, dc) = match (col("person_id"), col("index_date")) {
            (Some(p), Some(d)) => (p, d),
            _ => {
                return Err(CohortError::Row {
                    row: 0,
                    message: "header must contain person_id and index_date".into(),
                })
            }
        };
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |message: String| CohortError::Row {
                row: i + 1,
                message,
            };
            let p: PersonId = rec
                .get(pc)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| bad(format!("person_id: {e}")))?;
            let d = NaiveDate::parse_from_str(rec.get(dc).unwrap_or("").trim(), "%Y-%m-%d")
                .map_err(|e| bad(format!("index_date: {e}")))?;
            rows.push((p, d));
        }
        Cohort::try_from_rows(rows)
    }
}

impl FromIterator<(PersonId, NaiveDate)> for Cohort {
    fn from_iter<T: IntoIterator<Item = (PersonId, NaiveDate)>>(iter: T) -> Self {
        Cohort::from_rows_earliest(iter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let c = Cohort::try_from_rows([(3, d("2020-01-05")), (1, d("2019-12-31"))]).unwrap();
        let text = c.to_csv_string();
        assert_eq!(text, "person_id,index_date\n1,2019-12-31\n3,2020-01-05\n");
        assert_eq!(Cohort::read_csv(text.as_bytes()).unwrap(), c);
    }

    #[test]
    fn duplicates_and_bad_rows() {
        assert!(matches!(
            Cohort::try_from_rows([(1, d("2020-01-01")), (1, d("2020-02-01"))]),
            Err(CohortError::DuplicatePerson(1))
        ));
        let earliest = Cohort::from_rows_earliest([(1, d("2020-02-01")), (1, d("2020-01-01"))]);
        assert_eq!(earliest.index_date(1), Some(d("2020-01-01")));
        assert!(Cohort::read_csv("person_id,index_date\nx,2020-01-01\n".as_bytes()).is_err());
        assert!(Cohort::read_csv("person,date\n1,2020-01-01\n".as_bytes()).is_err());
    }
}
