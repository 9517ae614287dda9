use std::io::{self, Write};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceMode {
    #[default]
    Off,
    /// Fold every record into a running SHA-256 digest.
    Hash,
    /// Hash and keep every record for export.
    Record,
}

/// One line of the exported trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub t_us: u64,
    pub kind: &'static str,
    pub src: String,
    pub dst: String,
    pub info: String,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    mode: TraceMode,
    hasher: Sha256,
    records: Vec<TraceRecord>,
    count: u64,
}

impl Trace {
    pub fn new(mode: TraceMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.mode != TraceMode::Off
    }

    pub fn push(&mut self, t: SimTime, kind: &'static str, src: String, dst: String, info: String) {
        if self.mode == TraceMode::Off {
            return;
        }
        let record = TraceRecord {
            t_us: t.as_micros(),
            kind,
            src,
            dst,
            info,
        };
        let line = serde_json::to_string(&record).expect("trace record serializes");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.count += 1;
        if self.mode == TraceMode::Record {
            self.records.push(record);
        }
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    /// Hex digest of everything recorded so far.
    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    /// Write the recorded trace as JSON lines.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
