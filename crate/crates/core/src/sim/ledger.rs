use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Phase2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    QueryBroadcast,
    PartialOut,
    PartialLse,
    KvShift,
}

impl PayloadKind {
    pub fn is_partial(self) -> bool {
        matches!(self, PayloadKind::PartialOut | PayloadKind::PartialLse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: Phase,
    pub src: usize,
    pub dst: usize,
    pub kind: PayloadKind,
    pub scalar_count: u64,
}

/// Append-only record of simulated transfers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

pub const LEDGER_CSV_HEADER: &str = "phase,src,dst,kind,scalar_count";

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = LedgerEntry>) {
        self.entries.extend(entries);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn phase_entries(&self, phase: Phase) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.phase == phase)
    }

    pub fn scalars_where(&self, pred: impl Fn(&LedgerEntry) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.scalar_count)
            .sum()
    }

    /// Scalars moved as partial outputs and log-sum-exps.
    pub fn partial_scalars(&self) -> u64 {
        self.scalars_where(|e| e.kind.is_partial())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LEDGER_CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.phase, e.src, e.dst, e.kind, e.scalar_count
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LEDGER_CSV_HEADER) {
            return Err(Error::Format("ledger CSV header mismatch".into()));
        }
        let mut ledger = CommLedger::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("ledger CSV line {}: {line:?}", n + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            ledger.record(LedgerEntry {
                phase: f[0].parse().map_err(|_| bad())?,
                src: f[1].parse().map_err(|_| bad())?,
                dst: f[2].parse().map_err(|_| bad())?,
                kind: f[3].parse().map_err(|_| bad())?,
                scalar_count: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(ledger)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase1" => Ok(Phase::Phase1),
            "phase2" => Ok(Phase::Phase2),
            _ => Err(Error::Format(format!("unknown phase {s:?}"))),
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::QueryBroadcast => "query_broadcast",
            PayloadKind::PartialOut => "partial_out",
            PayloadKind::PartialLse => "partial_lse",
            PayloadKind::KvShift => "kv_shift",
        })
    }
}

impl FromStr for PayloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "query_broadcast" => PayloadKind::QueryBroadcast,
            "partial_out" => PayloadKind::PartialOut,
            "partial_lse" => PayloadKind::PartialLse,
            "kv_shift" => PayloadKind::KvShift,
            _ => return Err(Error::Format(format!("unknown payload kind {s:?}"))),
        })
    }
}
