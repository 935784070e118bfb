//! Structured event trace: one JSON object per line.
//!
//! The first line is a [`TraceHeader`]; every following line is a
//! [`TraceRecord`]. Records appear in non-decreasing `time_us` order.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::streams::Side;
use crate::time::Instant;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Transport,
    Recovery,
    Flow,
    Security,
    Simnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub scenario: String,
}

impl TraceHeader {
    pub fn new(seed: u64, scenario: impl Into<String>) -> Self {
        TraceHeader {
            schema_version: TRACE_SCHEMA_VERSION,
            kind: "trace_header".into(),
            seed,
            scenario: scenario.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_us: u64,
    pub endpoint: Side,
    pub category: Category,
    pub event: String,
    /// Flat map of scalar values.
    pub data: Map<String, Value>,
}

impl TraceRecord {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.data.get(key)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.data.get(key).and_then(Value::as_u64)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.data.get(key).and_then(Value::as_str)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.data.get(key).and_then(Value::as_bool)
    }

    pub fn time(&self) -> Instant {
        Instant::from_micros(self.time_us)
    }

    pub fn is(&self, side: Side, event: &str) -> bool {
        self.endpoint == side && self.event == event
    }
}

/// Collects records on behalf of one endpoint.
#[derive(Debug, Clone)]
pub struct Tracer {
    side: Side,
    records: Vec<TraceRecord>,
}

impl Tracer {
    pub fn new(side: Side) -> Self {
        Tracer {
            side,
            records: Vec::new(),
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// `data` must be a JSON object; anything else is recorded empty.
    pub fn emit(&mut self, now: Instant, category: Category, event: &str, data: Value) {
        let data = match data {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        self.records.push(TraceRecord {
            time_us: now.as_micros(),
            endpoint: self.side,
            category,
            event: event.to_string(),
            data,
        });
    }

    pub fn drain_into(&mut self, out: &mut Vec<TraceRecord>) {
        out.append(&mut self.records);
    }
}

pub fn write_jsonl<W: Write>(mut w: W, header: &TraceHeader, records: &[TraceRecord]) -> io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<(TraceHeader, Vec<TraceRecord>)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty trace"))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}
