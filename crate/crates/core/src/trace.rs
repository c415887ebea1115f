//! Newline-delimited JSON trace emitted by a simulation run.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::chain::{BlockKind, RejectReason, UncleRef};
use crate::ids::{BlockHash, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Block,
    Compact,
    Cbf,
    MissingRequest,
    MissingResponse,
    BlockRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    RunInfo {
        n: usize,
        step_ms: f64,
        w_ms: f64,
        m: usize,
        steps: u64,
        seed: u64,
        warmup_steps: u64,
        label: String,
    },
    StepBoundary {
        t: f64,
        step: u64,
        generated: usize,
    },
    BlockProduced {
        t: f64,
        node: NodeId,
        step: u64,
        hash: BlockHash,
        parent: BlockHash,
        kind: BlockKind,
        tx_count: usize,
        fees: u64,
        /// Full encoded size.
        bytes: usize,
        /// Mean size of the copies actually sent.
        wire_bytes: usize,
        x: Option<f64>,
        r: f64,
        a: f64,
        /// Verification cost of this block at a receiver.
        v: f64,
        uncles: usize,
    },
    InTurnFailed {
        t: f64,
        node: NodeId,
        step: u64,
    },
    Deliver {
        t: f64,
        from: NodeId,
        to: NodeId,
        msg: MsgKind,
        bytes: usize,
        attempts: u32,
    },
    Undeliverable {
        t: f64,
        from: NodeId,
        to: NodeId,
        msg: MsgKind,
        bytes: usize,
    },
    MissingRound {
        t: f64,
        node: NodeId,
        hash: BlockHash,
        missing: usize,
        ambiguous: usize,
    },
    Head {
        t: f64,
        node: NodeId,
        step: u64,
        hash: BlockHash,
        reorg: bool,
    },
    Rejected {
        t: f64,
        node: NodeId,
        hash: BlockHash,
        reason: RejectReason,
    },
    DeadlockTie {
        t: f64,
        node: NodeId,
        step: u64,
    },
    BetaClamped {
        t: f64,
        node: NodeId,
        signer: NodeId,
        beta: f64,
    },
    BroadcastComplete {
        t: f64,
        hash: BlockHash,
        b: f64,
    },
    Committed {
        step: u64,
        hash: BlockHash,
        signer: NodeId,
        kind: BlockKind,
        tx_count: usize,
        fees: u64,
        created_at: f64,
        uncles: Vec<UncleRef>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, TraceReadError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TraceReadError { line: i + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| TraceReadError { line: i + 1, message: e.to_string() })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("trace line {line}: {message}")]
pub struct TraceReadError {
    pub line: usize,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trip() {
        let mut t = Trace::default();
        t.push(TraceRecord::StepBoundary { t: 3000.0, step: 1, generated: 10 });
        t.push(TraceRecord::DeadlockTie { t: 1.5, node: 2, step: 4 });
        let text = t.to_ndjson();
        assert!(text.starts_with("{\"type\":\"step_boundary\""));
        let back = Trace::read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back, t);
        assert!(Trace::read_ndjson("{\"type\":\"nope\"}".as_bytes()).is_err());
    }
}
