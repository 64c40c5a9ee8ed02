//! Flat auditable event stream: one JSONL line per victim exchange.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One victim exchange (original or refined resend) from simulation or
/// traversal. Field order is the wire order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEvent {
    /// Per-run id: `<base run id>-r<run index>`. Filled in by the writer.
    #[serde(default)]
    pub run_id: String,
    pub behavior_id: String,
    pub chain_id: String,
    pub phase: String,
    pub turn_index: u32,
    pub role: String,
    pub text: String,
    #[serde(rename = "H")]
    pub h: u8,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "delta_H")]
    pub delta_h: i32,
    #[serde(rename = "delta_S")]
    pub delta_s: f64,
    pub refinement_index: u32,
    pub endpoint: String,
    pub ts: u64,
}

pub const PHASE_SIMULATION: &str = "simulation";
pub const PHASE_TRAVERSAL: &str = "traversal";

/// Appends serialized records to a JSONL file, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> crate::Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut buf = String::new();
    for record in records {
        buf.push_str(&serde_json::to_string(record)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads a JSONL file into records, tolerating a missing file (empty result).
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> crate::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}
