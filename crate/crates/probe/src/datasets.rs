//! JSON-lines dataset ingestion, validation-split sampling, and a synthetic
//! item generator for desk-scale runs.
//!
//! File schema, one object per line:
//! `{"id": str, "question": str, "choices": [str…], "gold": int}` with an
//! optional `"subtask"` tag. `gold` is 0-based in files (the common
//! benchmark-export convention) and converted to this crate's 1-based
//! indexing on load.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcq::{validate_item, McqItem};

/// A loaded dataset. `declared_k` is the shared option count, or `None`
/// when items mix different counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub items: Vec<McqItem>,
    pub declared_k: Option<usize>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("dataset contains no items")]
    EmptyDataset,
    #[error("validation size {requested} must be smaller than the dataset ({available} items)")]
    TooFewItems { requested: usize, available: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonLine {
    id: String,
    question: String,
    choices: Vec<String>,
    /// 0-based in the file.
    gold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtask: Option<String>,
}

fn declared_k(items: &[McqItem]) -> Option<usize> {
    let first = items.first()?.k();
    items.iter().all(|i| i.k() == first).then_some(first)
}

/// Loads a JSONL dataset, rejecting malformed lines with their line number.
pub fn load_jsonl(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonLine =
            serde_json::from_str(line).map_err(|err| DatasetError::Schema {
                line: line_no,
                message: err.to_string(),
            })?;
        if parsed.gold >= parsed.choices.len() {
            return Err(DatasetError::Schema {
                line: line_no,
                message: format!(
                    "gold {} out of range for {} choices",
                    parsed.gold,
                    parsed.choices.len()
                ),
            });
        }
        let item = McqItem {
            id: parsed.id,
            question: parsed.question,
            contents: parsed.choices,
            gold_index: parsed.gold + 1,
            subtask: parsed.subtask,
        };
        let violations = validate_item(&item);
        if !violations.is_empty() {
            let message = violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(DatasetError::Schema {
                line: line_no,
                message,
            });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(DatasetManifest {
        declared_k: declared_k(&items),
        name,
        items,
    })
}

/// Writes a manifest back out in the file schema (gold returns to 0-based).
pub fn save_jsonl(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for item in &manifest.items {
        let line = JsonLine {
            id: item.id.clone(),
            question: item.question.clone(),
            choices: item.contents.clone(),
            gold: item.gold_index - 1,
            subtask: item.subtask.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("dataset line serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Seeded sample without replacement: `n` items for distribution
/// estimation, the rest for evaluation. Both halves keep the original file
/// order; the halves are disjoint and together exhaustive.
pub fn split_validation(
    manifest: &DatasetManifest,
    n: usize,
    seed: u64,
) -> Result<(Vec<McqItem>, Vec<McqItem>), DatasetError> {
    let total = manifest.items.len();
    if n >= total {
        return Err(DatasetError::TooFewItems {
            requested: n,
            available: total,
        });
    }
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut validation_idx: Vec<usize> = indices[..n].to_vec();
    let mut evaluation_idx: Vec<usize> = indices[n..].to_vec();
    validation_idx.sort_unstable();
    evaluation_idx.sort_unstable();
    let validation: Vec<McqItem> = validation_idx
        .iter()
        .map(|i| manifest.items[*i].clone())
        .collect();
    let evaluation: Vec<McqItem> = evaluation_idx
        .iter()
        .map(|i| manifest.items[*i].clone())
        .collect();
    if !validation.is_empty() {
        let ids: Vec<&str> = validation.iter().map(|i| i.id.as_str()).collect();
        log::info!(
            "validation split ({} items, seed {seed}): {}",
            validation.len(),
            ids.join(", ")
        );
    }
    Ok((validation, evaluation))
}

/// Deterministic synthetic items for simulator runs: `n` questions with `k`
/// distinct options each and seeded gold positions.
pub fn synthetic_items(n: usize, k: usize, seed: u64) -> Vec<McqItem> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| McqItem {
            id: format!("syn-{i:05}"),
            question: format!("Synthetic question {i}: which option is marked correct?"),
            contents: (1..=k).map(|j| format!("option {j} of question {i}")).collect(),
            gold_index: rng.gen_range(1..=k),
            subtask: None,
        })
        .collect()
}
