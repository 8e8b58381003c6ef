use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of a convergence table. Row 0 is the starting point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub content: f64,
    pub texture: f64,
    pub total: f64,
    pub gradnorm: f64,
    pub accepted: bool,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    /// Totals of accepted rows, in order.
    pub fn accepted_totals(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.total)
            .collect()
    }

    pub fn last_accepted(&self) -> Option<&TraceRecord> {
        self.records.iter().rev().find(|r| r.accepted)
    }

    pub fn to_csv(&self) -> Result<String> {
        if self.records.is_empty() {
            return Err(Error::Validation("cannot report an empty trace".into()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(RunTrace { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize, total: f64) -> TraceRecord {
        TraceRecord {
            iter,
            content: total - 0.5,
            texture: 0.1,
            total,
            gradnorm: 1.0 / 3.0,
            accepted: iter.is_multiple_of(2),
            ms: 0.125,
        }
    }

    #[test]
    fn single_row_has_header() {
        let t = RunTrace {
            records: vec![record(0, 1.0)],
        };
        let csv = t.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "iter,content,texture,total,gradnorm,accepted,ms");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = RunTrace {
            records: (0..5).map(|i| record(i, 1.0 / (i + 3) as f64)).collect(),
        };
        assert_eq!(RunTrace::from_csv(&t.to_csv().unwrap()).unwrap(), t);
    }

    #[test]
    fn empty_trace_is_rejected() {
        assert!(RunTrace::default().to_csv().is_err());
    }
}
