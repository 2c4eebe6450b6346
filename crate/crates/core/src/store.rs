//! Append-only stores for human labels and source screening groups.
//!
//! Reads are last-write-wins per `(sample_id, rater_id)`, so replaying a
//! store file always reconstructs the same state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::ScreeningGroup;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Bad,
}

/// A human judgement. Exactly one of `label` and `group` is set; group
/// records carry the source id in `sample_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub sample_id: String,
    pub rater_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ScreeningGroup>,
    pub timestamp: String,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("invalid record: {0}")]
    Invalid(String),
}

impl LabelRecord {
    pub fn label(sample_id: &str, rater_id: &str, label: Label) -> Self {
        Self { sample_id: sample_id.into(), rater_id: rater_id.into(), label: Some(label), group: None, timestamp: now() }
    }

    pub fn group(source_id: &str, rater_id: &str, group: ScreeningGroup) -> Self {
        Self { sample_id: source_id.into(), rater_id: rater_id.into(), label: None, group: Some(group), timestamp: now() }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.sample_id.trim().is_empty() || self.rater_id.trim().is_empty() {
            return Err(StoreError::Invalid("sample_id and rater_id are required".into()));
        }
        if self.label.is_some() == self.group.is_some() {
            return Err(StoreError::Invalid("exactly one of label and group must be set".into()));
        }
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// One JSONL file with a single serialized appender.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    writer: Mutex<()>,
}

impl RecordStore {
    pub fn open(path: &Path) -> Self {
        Self { path: path.to_path_buf(), writer: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &LabelRecord) -> Result<(), StoreError> {
        record.validate()?;
        let _guard = self.writer.lock().expect("store lock");
        jsonl::append(&self.path, [record])?;
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<LabelRecord>, StoreError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        Ok(jsonl::read_all_tolerant(&self.path)?)
    }

    /// Latest record per `(sample_id, rater_id)`.
    pub fn latest(&self) -> Result<BTreeMap<(String, String), LabelRecord>, StoreError> {
        Ok(self
            .records()?
            .into_iter()
            .map(|r| ((r.sample_id.clone(), r.rater_id.clone()), r))
            .collect())
    }

    /// `rater → sample → label` over label records.
    pub fn labels_by_rater(&self) -> Result<BTreeMap<String, BTreeMap<String, Label>>, StoreError> {
        let mut out: BTreeMap<String, BTreeMap<String, Label>> = BTreeMap::new();
        for ((sample, rater), r) in self.latest()? {
            if let Some(l) = r.label {
                out.entry(rater).or_default().insert(sample, l);
            }
        }
        Ok(out)
    }

    /// Current group per source: the last group record for it, from any rater.
    pub fn groups(&self) -> Result<BTreeMap<String, ScreeningGroup>, StoreError> {
        let mut out = BTreeMap::new();
        for r in self.records()? {
            if let Some(g) = r.group {
                out.insert(r.sample_id, g);
            }
        }
        Ok(out)
    }
}
