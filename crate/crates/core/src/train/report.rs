use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{ClassMetrics, Confusion, Metrics};
use crate::error::{Error, Result};

pub const METRIC_COLUMNS: [&str; 7] = [
    "accuracy",
    "fake_precision",
    "fake_recall",
    "fake_f1",
    "real_precision",
    "real_recall",
    "real_f1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    /// `None` when the run failed; `status` then carries the error.
    pub metrics: Option<Metrics>,
    pub params: usize,
    pub attention_params: usize,
    pub status: String,
}

impl ReportRow {
    pub fn ok(name: String, metrics: Metrics, params: usize, attention_params: usize) -> Self {
        Self {
            name,
            metrics: Some(metrics),
            params,
            attention_params,
            status: "ok".into(),
        }
    }

    pub fn failed(name: String, err: &Error) -> Self {
        Self {
            name,
            metrics: None,
            params: 0,
            attention_params: 0,
            status: format!("failed: {err}"),
        }
    }

    pub fn values(&self) -> Option<[f64; 7]> {
        self.metrics.map(|m| {
            [
                m.accuracy,
                m.fake.precision,
                m.fake.recall,
                m.fake.f1,
                m.real.precision,
                m.real.recall,
                m.real.f1,
            ]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Header of the first column, `strategy` or `config`.
    pub key: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(key: &str, rows: Vec<ReportRow>) -> Self {
        Self { key: key.into(), rows }
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec![self.key.clone()];
        h.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        h.extend(["params", "attention_params", "status"].map(String::from));
        h
    }

    /// Floats are written in shortest round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Contract(format!("csv: {e}"));
        w.write_record(self.header()).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![r.name.clone()];
            match r.values() {
                Some(v) => rec.extend(v.iter().map(|x| x.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 7)),
            }
            rec.push(r.params.to_string());
            rec.push(r.attention_params.to_string());
            rec.push(r.status.clone());
            w.write_record(&rec).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Contract(format!("csv: {e}")))
    }

    /// Inverse of [`Report::to_csv`]. Confusion counts are not stored and come back as zero.
    pub fn from_csv(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Contract(format!("report csv: {msg}"));
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.len() != 11 || header.iter().skip(1).take(7).ne(METRIC_COLUMNS) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| bad(format!("column {} value {:?}", &header[i], &rec[i])))
            };
            let int = |i: usize| -> Result<usize> {
                rec[i]
                    .parse()
                    .map_err(|_| bad(format!("column {} value {:?}", &header[i], &rec[i])))
            };
            let metrics = if rec[1].is_empty() {
                None
            } else {
                let cm = |p, q, f| -> Result<ClassMetrics> {
                    Ok(ClassMetrics {
                        precision: num(p)?,
                        recall: num(q)?,
                        f1: num(f)?,
                    })
                };
                Some(Metrics {
                    accuracy: num(1)?,
                    fake: cm(2, 3, 4)?,
                    real: cm(5, 6, 7)?,
                    confusion: Confusion::default(),
                })
            };
            rows.push(ReportRow {
                name: rec[0].to_string(),
                metrics,
                params: int(8)?,
                attention_params: int(9)?,
                status: rec[10].to_string(),
            });
        }
        Ok(Self {
            key: header[0].to_string(),
            rows,
        })
    }

    /// Aligned plain-text table with four-decimal metrics.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut c = vec![r.name.clone()];
                match r.values() {
                    Some(v) => c.extend(v.iter().map(|x| format!("{x:.4}"))),
                    None => c.extend(std::iter::repeat_n("-".to_string(), 7)),
                }
                c.push(r.params.to_string());
                c.push(r.attention_params.to_string());
                c.push(r.status.clone());
                c
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|c| c[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let mut line = |row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == 0 || i == row.len() - 1 {
                        format!("{s:<w$}", w = widths[i])
                    } else {
                        format!("{s:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header);
        for c in &cells {
            line(c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = Metrics::from_confusion(Confusion {
            tp: 3,
            fp: 1,
            tn: 4,
            fn_: 2,
        });
        let report = Report::new(
            "strategy",
            vec![
                ReportRow::ok("early".into(), m, 10, 0),
                ReportRow::failed("late".into(), &Error::Config("x, \"y\"".into())),
            ],
        );
        let csv = report.to_csv().unwrap();
        let back = Report::from_csv(&csv).unwrap();
        assert_eq!(back.rows[0].values(), report.rows[0].values());
        assert_eq!(back.rows[1], report.rows[1]);
        assert_eq!(back.to_csv().unwrap(), csv);
        assert!(report.to_text().lines().count() == 3);
    }
}
