//! Resumable, idempotent stage execution.
//!
//! Every finished item is appended to `<name>.log.jsonl` as it completes and
//! `<name>.manifest.json` records the input hash and the finished ids. A
//! restarted stage skips logged items, so a killed run resumed to completion
//! yields the same final output as an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jsonl::{self, JsonlError};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{stage}: {message}")]
    Item { stage: String, message: String },
}

/// Outcome records carry the id of the input item they belong to.
pub trait Keyed {
    fn key(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_hash: String,
    pub done_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOptions {
    pub batch_size: usize,
    /// Stop after this many new items; used to simulate an interrupted run.
    pub limit: Option<usize>,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self { batch_size: DEFAULT_BATCH_SIZE, limit: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRun<O> {
    /// One outcome per finished input id, sorted by id.
    pub outcomes: Vec<O>,
    pub resumed: usize,
    pub processed: usize,
    pub complete: bool,
}

/// SHA-256 over the canonical JSON of every input item, in order.
pub fn input_hash<T: Serialize>(items: &[T]) -> String {
    let mut h = Sha256::new();
    for item in items {
        h.update(serde_json::to_vec(item).expect("serializable input"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub struct Stage {
    name: String,
    log: PathBuf,
    manifest: PathBuf,
}

impl Stage {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            name: name.to_string(),
            log: dir.join(format!("{name}.log.jsonl")),
            manifest: dir.join(format!("{name}.manifest.json")),
        }
    }

    pub fn log_path(&self) -> &Path {
        &self.log
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest
    }

    pub fn read_manifest(&self) -> Result<Option<StageManifest>, JsonlError> {
        if !self.manifest.exists() {
            return Ok(None);
        }
        jsonl::read_json(&self.manifest).map(Some)
    }

    /// Logged outcomes, last write per id wins.
    fn load<O: DeserializeOwned + Keyed>(&self) -> Result<BTreeMap<String, O>, JsonlError> {
        if !self.log.exists() {
            return Ok(BTreeMap::new());
        }
        let records: Vec<O> = jsonl::read_all_tolerant(&self.log)?;
        Ok(records.into_iter().map(|o| (o.key().to_string(), o)).collect())
    }

    fn reset(&self) -> Result<(), JsonlError> {
        for p in [&self.log, &self.manifest] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| JsonlError::io(p, e))?;
            }
        }
        Ok(())
    }

    fn save_manifest(&self, input_hash: &str, done: &BTreeSet<String>) -> Result<(), JsonlError> {
        jsonl::write_json(
            &self.manifest,
            &StageManifest {
                stage: self.name.clone(),
                input_hash: input_hash.to_string(),
                done_ids: done.iter().cloned().collect(),
            },
        )
    }

    /// Runs `f` over every item not already logged. Items within a batch run
    /// concurrently; the backend's own limiter bounds actual parallelism.
    pub async fn run<I, O, F, Fut>(
        &self,
        items: Vec<I>,
        key: impl Fn(&I) -> String,
        input_hash: &str,
        opts: StageOptions,
        f: F,
    ) -> Result<StageRun<O>, StageError>
    where
        O: Serialize + DeserializeOwned + Keyed,
        F: Fn(I) -> Fut,
        Fut: Future<Output = Result<O, String>>,
    {
        if let Some(m) = self.read_manifest()? {
            if m.input_hash != input_hash {
                tracing::warn!(stage = %self.name, "input changed since last run; starting over");
                self.reset()?;
            }
        } else if self.log.exists() {
            // A log without a manifest has unknown provenance.
            self.reset()?;
        }

        let mut done: BTreeMap<String, O> = self.load()?;
        let wanted: BTreeSet<String> = items.iter().map(&key).collect();
        done.retain(|k, _| wanted.contains(k));
        let resumed = done.len();

        let pending: Vec<I> = items.into_iter().filter(|i| !done.contains_key(&key(i))).collect();
        let budget = opts.limit.unwrap_or(usize::MAX);
        let total_pending = pending.len();
        let mut processed = 0;
        let mut iter = pending.into_iter().take(budget);
        let batch_size = opts.batch_size.max(1);
        let mut done_ids: BTreeSet<String> = done.keys().cloned().collect();
        self.save_manifest(input_hash, &done_ids)?;

        loop {
            let batch: Vec<I> = iter.by_ref().take(batch_size).collect();
            if batch.is_empty() {
                break;
            }
            let results = futures::future::join_all(batch.into_iter().map(&f)).await;
            let mut ok = Vec::with_capacity(results.len());
            let mut failure = None;
            for r in results {
                match r {
                    Ok(o) => ok.push(o),
                    Err(e) => failure = failure.or(Some(e)),
                }
            }
            jsonl::append(&self.log, ok.iter())?;
            processed += ok.len();
            for o in ok {
                done_ids.insert(o.key().to_string());
                done.insert(o.key().to_string(), o);
            }
            self.save_manifest(input_hash, &done_ids)?;
            if let Some(message) = failure {
                return Err(StageError::Item { stage: self.name.clone(), message });
            }
        }

        Ok(StageRun {
            outcomes: done.into_values().collect(),
            resumed,
            processed,
            complete: processed == total_pending,
        })
    }
}
