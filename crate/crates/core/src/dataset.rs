//! Benchmark dataset loading.
//!
//! A dataset is a line-delimited JSON file; each line carries `id`,
//! `question`, and `answer` (the gold answer used for grading):
//!
//! ```json
//! {"id":"aime24-1","question":"Find ...","answer":"42"}
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One benchmark question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("dataset {path} line {line}: duplicate id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("dataset {path} is empty")]
    Empty { path: String },
}

/// Load and validate a dataset, preserving file order.
pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkItem>, DatasetError> {
    let display = path.display().to_string();
    let content = fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem =
            serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
                path: display.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if item.question.trim().is_empty() {
            return Err(DatasetError::Malformed {
                path: display,
                line: idx + 1,
                message: "question is empty".to_string(),
            });
        }
        if !seen.insert(item.id.clone()) {
            return Err(DatasetError::DuplicateId { path: display, line: idx + 1, id: item.id });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::Empty { path: display });
    }
    Ok(items)
}

/// Write items in the dataset format; `load_dataset(write_dataset(x)) == x`.
pub fn write_dataset(path: &Path, items: &[BenchmarkItem]) -> Result<(), DatasetError> {
    let display = path.display().to_string();
    let io_err = |source| DatasetError::Io { path: display.clone(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}
