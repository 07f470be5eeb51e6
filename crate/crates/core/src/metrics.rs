//! Communication-cost accounting and the per-round metrics ledger.
//!
//! The ledger is a CSV file, one row per round, with this header:
//!
//! ```text
//! round,stage,params_broadcast,params,flops,accuracy,best_accuracy,selected,
//! bytes_down,bytes_up,cumulative_bytes,filters,wall_ms
//! ```
//!
//! * `params_broadcast`: parameters in the model sent to clients that round.
//! * `params`: parameters in the global model at the end of the round.
//! * `bytes_down` / `bytes_up`: `params_broadcast · elem_bytes · selected` each.
//! * `filters`: per-layer filter counts as `name:count` joined by `;`.
//! * `wall_ms`: wall-clock time; the only nondeterministic column.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{RoundOutcome, Stage};

pub const DEFAULT_ELEM_BYTES: u64 = 4;

/// Bytes moved in one round: every selected client downloads and uploads `params` elements.
pub fn round_bytes(params: u64, selected: u64, elem_bytes: u64) -> u64 {
    params * elem_bytes * selected * 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub stage: Stage,
    pub params_broadcast: u64,
    pub params: u64,
    pub flops: u64,
    pub accuracy: f64,
    pub best_accuracy: f64,
    pub selected: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub cumulative_bytes: u64,
    pub filters: String,
    pub wall_ms: u64,
}

impl LedgerRow {
    pub fn round_bytes(&self) -> u64 {
        self.bytes_down + self.bytes_up
    }

    /// Parses `filters` back into `(layer, count)` pairs.
    pub fn filter_counts(&self) -> Result<Vec<(String, usize)>> {
        if self.filters.is_empty() {
            return Ok(Vec::new());
        }
        self.filters
            .split(';')
            .map(|item| {
                let (name, n) = item
                    .rsplit_once(':')
                    .ok_or_else(|| Error::LedgerParse { row: self.round, reason: format!("bad filter entry {item:?}") })?;
                let n = n
                    .parse()
                    .map_err(|_| Error::LedgerParse { row: self.round, reason: format!("bad filter count {n:?}") })?;
                Ok((name.to_string(), n))
            })
            .collect()
    }
}

fn format_filters(counts: &[(String, usize)]) -> String {
    counts.iter().map(|(n, c)| format!("{n}:{c}")).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLedger {
    pub rows: Vec<LedgerRow>,
    pub elem_bytes: u64,
}

impl MetricsLedger {
    pub fn new(elem_bytes: u64) -> Self {
        MetricsLedger { rows: Vec::new(), elem_bytes }
    }

    pub fn from_history(history: &[RoundOutcome], elem_bytes: u64) -> Self {
        let mut ledger = Self::new(elem_bytes);
        for o in history {
            ledger.push(o);
        }
        ledger
    }

    pub fn push(&mut self, o: &RoundOutcome) {
        let s = o.selected.len() as u64;
        let p = o.params_broadcast as u64;
        let one_way = p * self.elem_bytes * s;
        let prev = self.rows.last().map_or(0, |r| r.cumulative_bytes);
        let best = self.rows.last().map_or(0.0, |r| r.best_accuracy).max(o.accuracy);
        self.rows.push(LedgerRow {
            round: o.round,
            stage: o.stage,
            params_broadcast: p,
            params: o.params as u64,
            flops: o.flops,
            accuracy: o.accuracy,
            best_accuracy: best,
            selected: s,
            bytes_down: one_way,
            bytes_up: one_way,
            cumulative_bytes: prev + 2 * one_way,
            filters: format_filters(&o.filter_counts),
            wall_ms: o.wall_ms as u64,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rounds_in(&self, stage: Stage) -> usize {
        self.rows.iter().filter(|r| r.stage == stage).count()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    /// Parses a ledger, checking each row's byte arithmetic and running totals.
    pub fn read_from<R: Read>(r: R, elem_bytes: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut ledger = Self::new(elem_bytes);
        for (i, rec) in rdr.deserialize::<LedgerRow>().enumerate() {
            let row_no = i + 1;
            let row = rec.map_err(|e| Error::LedgerParse { row: row_no, reason: e.to_string() })?;
            let expect = row.params_broadcast * elem_bytes * row.selected;
            if row.bytes_down != expect || row.bytes_up != expect {
                return Err(Error::LedgerParse {
                    row: row_no,
                    reason: format!("byte columns {}/{} disagree with {expect}", row.bytes_down, row.bytes_up),
                });
            }
            let prev = ledger.rows.last().map_or(0, |r| r.cumulative_bytes);
            if row.cumulative_bytes != prev + row.round_bytes() {
                return Err(Error::LedgerParse { row: row_no, reason: "cumulative_bytes is not a running sum".into() });
            }
            ledger.rows.push(row);
        }
        Ok(ledger)
    }

    pub fn load(path: &Path, elem_bytes: u64) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?, elem_bytes)
    }

    /// Rows with the timing column zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Vec<LedgerRow> {
        self.rows.iter().cloned().map(|r| LedgerRow { wall_ms: 0, ..r }).collect()
    }
}

/// Total bytes over all rounds of `ledger`.
pub fn cumulative_cost(ledger: &MetricsLedger) -> Result<u64> {
    if ledger.is_empty() {
        return Err(Error::Config("empty ledger has no cost".into()));
    }
    Ok(ledger.rows.iter().map(LedgerRow::round_bytes).sum())
}

/// Sample mean and standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
