//! Behavior dataset ingestion: CSV (header row) or JSONL, user-supplied.
//! No behavior corpus ships with the repository.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One harmful-intent prompt: the unit over which success rate is computed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    pub id: String,
    pub text: String,
}

const ID_COLUMN_CANDIDATES: [&str; 3] = ["id", "BehaviorID", "behavior_id"];

#[derive(Debug, Deserialize)]
struct JsonlRow {
    id: String,
    behavior: String,
}

/// Loads behaviors from `path`. `.csv` files need a header row with the
/// designated text column; any other extension is treated as JSONL with
/// `{"id": ..., "behavior": ...}` per line. Duplicate ids are rejected.
pub fn load_behaviors(
    path: &Path,
    text_column: &str,
    id_column: Option<&str>,
) -> Result<Vec<Behavior>> {
    let behaviors = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(path, text_column, id_column)?,
        _ => load_jsonl(path)?,
    };
    if behaviors.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "no behaviors found".into(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for b in &behaviors {
        if !seen.insert(b.id.clone()) {
            return Err(Error::DuplicateId(b.id.clone()));
        }
    }
    Ok(behaviors)
}

fn load_csv(path: &Path, text_column: &str, id_column: Option<&str>) -> Result<Vec<Behavior>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let text_idx = headers
        .iter()
        .position(|h| h == text_column)
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("missing text column '{text_column}'"),
        })?;
    let id_idx = match id_column {
        Some(col) => Some(headers.iter().position(|h| h == col).ok_or_else(|| {
            Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("missing id column '{col}'"),
            }
        })?),
        None => ID_COLUMN_CANDIDATES
            .iter()
            .find_map(|c| headers.iter().position(|h| &h == c)),
    };

    let mut behaviors = Vec::new();
    for (row_number, record) in reader.records().enumerate() {
        let line = row_number + 2; // header occupies line 1
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        let text = record.get(text_idx).unwrap_or("").trim().to_string();
        if text.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                message: "empty behavior text".into(),
            });
        }
        let id = match id_idx {
            Some(i) => record.get(i).unwrap_or("").trim().to_string(),
            None => format!("b{}", row_number + 1),
        };
        if id.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                message: "empty behavior id".into(),
            });
        }
        behaviors.push(Behavior { id, text });
    }
    Ok(behaviors)
}

fn load_jsonl(path: &Path) -> Result<Vec<Behavior>> {
    let text = std::fs::read_to_string(path)?;
    let mut behaviors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if row.behavior.trim().is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "empty behavior text".into(),
            });
        }
        behaviors.push(Behavior {
            id: row.id,
            text: row.behavior,
        });
    }
    Ok(behaviors)
}
