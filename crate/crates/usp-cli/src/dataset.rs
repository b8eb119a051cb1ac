//! Line-delimited dataset files: one JSON record per line with
//! `{id?, text, options?, references?, task_type?}`. Ids must be unique
//! within a file; records without an id get a content hash of their text.

use std::path::Path;

use serde::Deserialize;

use usp_core::model::{TaskQuery, TaskType};
use usp_core::{Result, UspError};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    options: Option<Vec<String>>,
    #[serde(default)]
    references: Option<Vec<String>>,
    #[serde(default)]
    task_type: Option<TaskType>,
}

/// A parsed dataset plus the task type its records declare, if any.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub queries: Vec<TaskQuery>,
    pub task_type: Option<TaskType>,
    /// File stem, used to group runs in reports.
    pub label: String,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let invalid = |reason: String| UspError::InvalidField {
        field: "dataset".into(),
        reason: format!("{}: {reason}", path.display()),
    };
    let body = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    let mut queries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut task_type: Option<TaskType> = None;
    for (line_no, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| invalid(format!("line {}: {e}", line_no + 1)))?;
        if record.text.trim().is_empty() {
            return Err(invalid(format!("line {}: empty text", line_no + 1)));
        }
        if let Some(declared) = record.task_type {
            match task_type {
                None => task_type = Some(declared),
                Some(existing) if existing == declared => {}
                Some(existing) => {
                    return Err(invalid(format!(
                        "line {}: task_type {declared} conflicts with {existing}",
                        line_no + 1
                    )))
                }
            }
        }
        let mut query = match record.id {
            Some(id) => TaskQuery::new(id, record.text),
            None => TaskQuery::from_text(record.text),
        };
        if !seen.insert(query.id.clone()) {
            return Err(invalid(format!(
                "line {}: duplicate id `{}`",
                line_no + 1,
                query.id
            )));
        }
        query.options = record.options;
        query.references = record.references.unwrap_or_default();
        queries.push(query);
    }
    if queries.is_empty() {
        return Err(invalid("no records".into()));
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Dataset {
        queries,
        task_type,
        label,
    })
}

/// Serialize queries back out as one record per line (fixture generation).
pub fn write_dataset(path: &Path, queries: &[TaskQuery], task_type: TaskType) -> Result<()> {
    let mut body = String::new();
    for query in queries {
        let mut record = serde_json::json!({
            "id": query.id,
            "text": query.text,
            "task_type": task_type,
        });
        if let Some(options) = &query.options {
            record["options"] = serde_json::json!(options);
        }
        if !query.references.is_empty() {
            record["references"] = serde_json::json!(query.references);
        }
        body.push_str(&serde_json::to_string(&record).expect("records serialize"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| UspError::InvalidField {
        field: "dataset".into(),
        reason: format!("{}: {e}", path.display()),
    })
}
