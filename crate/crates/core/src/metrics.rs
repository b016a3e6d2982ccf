//! Patient-level and date-level cohort comparison, per-sample scoring and
//! cross-sample aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::generation::Strategy;

pub const DEFAULT_WINDOW_DAYS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DateMetrics {
    pub exact: f64,
    pub within_window: f64,
}

fn overlap(generated: &Cohort, reference: &Cohort) -> usize {
    generated
        .iter()
        .filter(|(p, _)| reference.contains(*p))
        .count()
}

pub fn patient_metrics(generated: &Cohort, reference: &Cohort) -> PatientMetrics {
    let hits = overlap(generated, reference) as f64;
    let precision = if generated.is_empty() {
        0.0
    } else {
        hits / generated.len() as f64
    };
    let recall = if reference.is_empty() {
        0.0
    } else {
        hits / reference.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PatientMetrics {
        precision,
        recall,
        f1,
    }
}

/// min(|G|, |R|) / max(|G|, |R|); both empty gives 1, exactly one empty gives 0.
pub fn size_similarity(generated: &Cohort, reference: &Cohort) -> f64 {
    let (g, r) = (generated.len(), reference.len());
    if g == 0 && r == 0 {
        1.0
    } else {
        g.min(r) as f64 / g.max(r) as f64
    }
}

/// Fractions of matched persons whose index dates agree exactly and within
/// `window_days` (inclusive). No matched persons gives (0, 0).
pub fn date_metrics(generated: &Cohort, reference: &Cohort, window_days: u32) -> DateMetrics {
    let mut matched = 0usize;
    let mut exact = 0usize;
    let mut within = 0usize;
    for (p, gd) in generated.iter() {
        if let Some(rd) = reference.index_date(p) {
            matched += 1;
            let diff = (gd - rd).num_days().unsigned_abs();
            if diff == 0 {
                exact += 1;
            }
            if diff <= u64::from(window_days) {
                within += 1;
            }
        }
    }
    if matched == 0 {
        return DateMetrics {
            exact: 0.0,
            within_window: 0.0,
        };
    }
    DateMetrics {
        exact: exact as f64 / matched as f64,
        within_window: within as f64 / matched as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub window_days: u32,
    pub strategies: Vec<Strategy>,
    pub leave_one_out: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window_days: DEFAULT_WINDOW_DAYS,
            strategies: Strategy::ALL.to_vec(),
            leave_one_out: true,
        }
    }
}

/// What the pipeline produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutcome {
    /// Generation, resolution or healing did not yield executable SQL.
    Invalid { reason: String },
    /// The final SQL executed; the cohort may be empty.
    Executed(Cohort),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub valid_sql: bool,
    pub retrieved: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub size_similarity: f64,
    pub date_exact: f64,
    pub date_within_window: f64,
}

impl SampleResult {
    pub fn zero(sample_id: impl Into<String>, valid_sql: bool) -> Self {
        SampleResult {
            sample_id: sample_id.into(),
            valid_sql,
            retrieved: false,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            size_similarity: 0.0,
            date_exact: 0.0,
            date_within_window: 0.0,
        }
    }
}

/// Failed or empty generations score zero on every metric.
pub fn score_sample(
    sample_id: &str,
    outcome: &SampleOutcome,
    reference: &Cohort,
    window_days: u32,
) -> SampleResult {
    let generated = match outcome {
        SampleOutcome::Invalid { .. } => return SampleResult::zero(sample_id, false),
        SampleOutcome::Executed(c) if c.is_empty() => return SampleResult::zero(sample_id, true),
        SampleOutcome::Executed(c) => c,
    };
    let pm = patient_metrics(generated, reference);
    let dm = date_metrics(generated, reference, window_days);
    SampleResult {
        sample_id: sample_id.to_string(),
        valid_sql: true,
        retrieved: true,
        precision: pm.precision,
        recall: pm.recall,
        f1: pm.f1,
        size_similarity: size_similarity(generated, reference),
        date_exact: dm.exact,
        date_within_window: dm.within_window,
    }
}

/// One report row: means over all scored samples, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub n_samples: usize,
    pub valid_sql: f64,
    pub retrieved: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub size_similarity: f64,
    pub date_overlap: f64,
    pub within_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSample {
    pub sample_id: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub window_days: u32,
    pub rows: Vec<ReportRow>,
    /// Samples dropped because their reference SQL failed.
    pub excluded: Vec<ExcludedSample>,
    #[serde(default)]
    pub samples: Vec<(Strategy, SampleResult)>,
}

pub fn aggregate(strategy: Strategy, results: &[SampleResult]) -> ReportRow {
    let n = results.len();
    let mean = |f: &dyn Fn(&SampleResult) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            100.0 * results.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    ReportRow {
        strategy,
        n_samples: n,
        valid_sql: mean(&|r| flag(r.valid_sql)),
        retrieved: mean(&|r| flag(r.retrieved)),
        f1: mean(&|r| r.f1),
        precision: mean(&|r| r.precision),
        recall: mean(&|r| r.recall),
        size_similarity: mean(&|r| r.size_similarity),
        date_overlap: mean(&|r| r.date_exact),
        within_window: mean(&|r| r.date_within_window),
    }
}

impl EvalReport {
    pub fn headers(&self) -> Vec<String> {
        vec![
            "Settings".into(),
            "Valid SQL".into(),
            "Retrieved".into(),
            "F1".into(),
            "Prec.".into(),
            "Recall".into(),
            "Size sim.".into(),
            "Date overlap".into(),
            format!("Within {}d", self.window_days),
        ]
    }

    /// Plain-text table, all values in percent.
    pub fn render_table(&self) -> String {
        let headers = self.headers();
        let mut rows: Vec<Vec<String>> = vec![headers];
        for r in &self.rows {
            rows.push(vec![
                r.strategy.label().to_string(),
                format!("{:.1}", r.valid_sql),
                format!("{:.1}", r.retrieved),
                format!("{:.1}", r.f1),
                format!("{:.1}", r.precision),
                format!("{:.1}", r.recall),
                format!("{:.1}", r.size_similarity),
                format!("{:.1}", r.date_overlap),
                format!("{:.1}", r.within_window),
            ]);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    if c == 0 {
                        format!("{v:<w$}")
                    } else {
                        format!("{v:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", cells.join(" | "));
            if i == 0 {
                let _ = writeln!(
                    s,
                    "{}",
                    widths
                        .iter()
                        .map(|w| "-".repeat(*w))
                        .collect::<Vec<_>>()
                        .join("-+-")
                );
            }
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(s, "\nExcluded samples (reference SQL failed):");
            for e in &self.excluded {
                let _ = writeln!(s, "  {}: {}", e.sample_id, e.note);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(u64::from(day))
    }

    fn same_day(ids: &[i64]) -> Cohort {
        Cohort::try_from_rows(ids.iter().map(|&p| (p, d(0)))).unwrap()
    }

    #[test]
    fn patient_metric_cases() {
        let g = same_day(&[1, 2, 3]);
        let pm = patient_metrics(&g, &g);
        assert_eq!((pm.precision, pm.recall, pm.f1), (1.0, 1.0, 1.0));

        let pm = patient_metrics(&same_day(&[1, 2, 3]), &same_day(&[2, 3, 4]));
        assert!((pm.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((pm.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((pm.f1 - 2.0 / 3.0).abs() < 1e-12);

        let pm = patient_metrics(&same_day(&[1]), &same_day(&[2]));
        assert_eq!((pm.precision, pm.recall, pm.f1), (0.0, 0.0, 0.0));
        let pm = patient_metrics(&same_day(&[]), &same_day(&[]));
        assert_eq!(pm.f1, 0.0);
    }

    #[test]
    fn size_similarity_cases() {
        assert_eq!(size_similarity(&same_day(&[1, 2]), &same_day(&[3, 4])), 1.0);
        let fifty: Vec<i64> = (0..50).collect();
        let hundred: Vec<i64> = (0..100).collect();
        assert_eq!(size_similarity(&same_day(&fifty), &same_day(&hundred)), 0.5);
        assert_eq!(size_similarity(&same_day(&[]), &same_day(&[1])), 0.0);
        assert_eq!(size_similarity(&same_day(&[]), &same_day(&[])), 1.0);
    }

    #[test]
    fn date_metric_cases() {
        let g = Cohort::try_from_rows([(1, d(0)), (2, d(10))]).unwrap();
        let r = Cohort::try_from_rows([(1, d(0)), (2, d(0))]).unwrap();
        assert_eq!(
            date_metrics(&r, &r, 30),
            DateMetrics {
                exact: 1.0,
                within_window: 1.0
            }
        );
        assert_eq!(
            date_metrics(&g, &r, 30),
            DateMetrics {
                exact: 0.5,
                within_window: 1.0
            }
        );

        // 2020-01-01 vs 2020-01-31 is exactly 30 days
        let edge_g = Cohort::try_from_rows([(1, d(30))]).unwrap();
        let edge_r = Cohort::try_from_rows([(1, d(0))]).unwrap();
        assert_eq!((d(30) - d(0)).num_days(), 30);
        assert_eq!(date_metrics(&edge_g, &edge_r, 30).within_window, 1.0);
        assert_eq!(date_metrics(&edge_g, &edge_r, 29).within_window, 0.0);

        assert_eq!(
            date_metrics(&same_day(&[1]), &same_day(&[2]), 30),
            DateMetrics {
                exact: 0.0,
                within_window: 0.0
            }
        );
    }

    #[test]
    fn scoring_zeroes_failures() {
        let r = same_day(&[1, 2]);
        let invalid = score_sample("s", &SampleOutcome::Invalid { reason: "x".into() }, &r, 30);
        assert_eq!(invalid, SampleResult::zero("s", false));
        let empty = score_sample("s", &SampleOutcome::Executed(Cohort::new()), &r, 30);
        assert!(empty.valid_sql && !empty.retrieved && empty.f1 == 0.0);
        let perfect = score_sample("s", &SampleOutcome::Executed(r.clone()), &r, 30);
        assert!(perfect.retrieved);
        for v in [
            perfect.precision,
            perfect.recall,
            perfect.f1,
            perfect.size_similarity,
            perfect.date_exact,
            perfect.date_within_window,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn aggregation_includes_zeros() {
        let r = same_day(&[1, 2]);
        let good = score_sample("a", &SampleOutcome::Executed(r.clone()), &r, 30);
        let bad = score_sample("b", &SampleOutcome::Invalid { reason: "x".into() }, &r, 30);
        let row = aggregate(Strategy::RagAc, &[good, bad]);
        assert_eq!(row.valid_sql, 50.0);
        assert_eq!(row.f1, 50.0);
        assert_eq!(row.within_window, 50.0);
        let report = EvalReport {
            window_days: 30,
            rows: vec![row],
            excluded: vec![],
            samples: vec![],
        };
        let table = report.render_table();
        for h in [
            "Valid SQL",
            "Retrieved",
            "F1",
            "Prec.",
            "Recall",
            "Size sim.",
            "Date overlap",
            "Within 30d",
        ] {
            assert!(table.contains(h), "missing {h}");
        }
        assert!(table.contains("RAG+A+C"));
    }
}
