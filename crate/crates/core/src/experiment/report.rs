//! Result tables: one row per (measure, test condition), one column per
//! module plus the chance, selector and oracle baselines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `sdr`, `stoi` or `accuracy`.
    pub measure: String,
    /// Test condition (axis value), or `all`.
    pub test: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub axis: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

impl ReportTable {
    pub fn new(axis: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            axis: axis.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, measure: &str, test: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Report(format!(
                "row {measure}/{test} has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push(ReportRow {
            measure: measure.into(),
            test: test.into(),
            values,
        });
        Ok(())
    }

    pub fn get(&self, measure: &str, test: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows
            .iter()
            .find(|r| r.measure == measure && r.test == test)
            .and_then(|r| r.values[c])
    }

    fn check_complete(&self) -> Result<()> {
        for r in &self.rows {
            if let Some(c) = r.values.iter().position(Option::is_none) {
                return Err(Error::Report(format!(
                    "missing value for {} / {} / {}",
                    r.measure, r.test, self.columns[c]
                )));
            }
        }
        Ok(())
    }

    /// Header `measure,<axis>,<columns...>`; values in shortest round-trip
    /// form. Fails on any empty cell.
    pub fn to_csv(&self) -> Result<String> {
        self.check_complete()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = ["measure", self.axis.as_str()]
            .into_iter()
            .chain(self.columns.iter().map(String::as_str));
        w.write_record(header).map_err(csv_err)?;
        for r in &self.rows {
            let cells = [r.measure.clone(), r.test.clone()]
                .into_iter()
                .chain(r.values.iter().map(|v| v.unwrap().to_string()));
            w.write_record(cells).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "measure" {
            return Err(Error::Report("not a report table".into()));
        }
        let mut table = Self::new(&header[1], header.iter().skip(2).map(String::from).collect());
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let values = rec
                .iter()
                .skip(2)
                .map(|v| {
                    v.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Report(format!("bad number {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            table.push(&rec[0], &rec[1], values)?;
        }
        Ok(table)
    }

    /// Aligned plain-text tables, one block per measure. Fails on any
    /// empty cell.
    pub fn to_text(&self) -> Result<String> {
        self.check_complete()?;
        let mut measures: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !measures.contains(&r.measure.as_str()) {
                measures.push(&r.measure);
            }
        }
        let mut out = String::new();
        for m in measures {
            let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.measure == m).collect();
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    std::iter::once(r.test.clone())
                        .chain(r.values.iter().map(|v| format_value(m, v.unwrap())))
                        .collect()
                })
                .collect();
            let header: Vec<String> = std::iter::once(self.axis.clone())
                .chain(self.columns.iter().cloned())
                .collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|c| {
                    cells
                        .iter()
                        .map(|row| row[c].len())
                        .chain(std::iter::once(header[c].len()))
                        .max()
                        .unwrap()
                })
                .collect();
            let _ = writeln!(out, "{}", title(m));
            let line = |row: &[String]| {
                row.iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            let _ = writeln!(out, "{}", line(&header));
            let _ = writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
            for row in &cells {
                let _ = writeln!(out, "{}", line(row));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

fn title(measure: &str) -> String {
    match measure {
        "sdr" => "Mean SDR (dB)".into(),
        "stoi" => "Mean STOI".into(),
        "accuracy" => "Share of utterances matching the SDR oracle (%)".into(),
        other => other.into(),
    }
}

fn format_value(measure: &str, v: f64) -> String {
    match measure {
        "stoi" => format!("{v:.3}"),
        "accuracy" => format!("{:.1}", 100.0 * v),
        _ => format!("{v:.2}"),
    }
}
