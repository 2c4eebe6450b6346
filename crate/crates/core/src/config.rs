//! Run configuration: one JSON document, paths relative to its directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::Tokenizer;
use crate::ingest::DEFAULT_SCREENING_SIZE;
use crate::inference::{EndpointConfig, EndpointKind};
use crate::mixer::MixPlan;
use crate::prompts::DEFAULT_PAIR_NUM;
use crate::stage::DEFAULT_BATCH_SIZE;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub rewrite: bool,
    pub judge: bool,
    pub score: bool,
    pub mix: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { rewrite: true, judge: true, score: true, mix: true }
    }
}

/// Where the original share of a mix is drawn from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginalPool {
    #[default]
    GroupB,
    GroupAAndB,
}

fn default_pair_num() -> u32 {
    DEFAULT_PAIR_NUM
}
fn default_screening_size() -> usize {
    DEFAULT_SCREENING_SIZE
}
fn default_bucket() -> usize {
    50
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub registry: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_root: Option<PathBuf>,
    pub output_root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pair_num")]
    pub pair_num: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub mix_plans: Vec<MixPlan>,
    #[serde(default)]
    pub original_pool: OriginalPool,
    #[serde(default = "default_screening_size")]
    pub screening_size: usize,
    /// Samples scored per provenance; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_sample_size: Option<usize>,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    #[serde(default = "default_bucket")]
    pub histogram_bucket: usize,
    #[serde(default)]
    pub standardize_images: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.registry);
        fix(&mut self.output_root);
        if let Some(p) = self.media_root.as_mut() {
            fix(p);
        }
        if let Some(p) = self.template_dir.as_mut() {
            fix(p);
        }
        for e in &mut self.endpoints {
            if let Some(p) = e.mock_script.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !self.registry.is_file() {
            return invalid(format!("registry {} does not exist", self.registry.display()));
        }
        for (what, p) in [("media_root", &self.media_root), ("template_dir", &self.template_dir)] {
            if let Some(p) = p.as_ref().filter(|p| !p.is_dir()) {
                return invalid(format!("{what} {} does not exist", p.display()));
            }
        }
        for e in &self.endpoints {
            e.validate().map_err(|err| ConfigError::Invalid(err.to_string()))?;
            if let Some(p) = e.mock_script.as_ref().filter(|p| !p.is_file()) {
                return invalid(format!("mock_script {} does not exist", p.display()));
            }
        }
        let text_only = self.endpoints.iter().filter(|e| e.kind == EndpointKind::TextOnly).count();
        if text_only > 1 {
            return invalid(format!("expected at most one text_only endpoint, found {text_only}"));
        }
        let needs_model = self.stages.rewrite || self.stages.judge || self.stages.score;
        if needs_model && !self.endpoints.iter().any(|e| e.kind == EndpointKind::Multimodal) {
            return invalid("at least one multimodal endpoint is required".into());
        }
        if self.pair_num == 0 {
            return invalid("pair_num must be positive".into());
        }
        if self.histogram_bucket == 0 {
            return invalid("histogram_bucket must be positive".into());
        }
        let mut names = BTreeSet::new();
        for plan in &self.mix_plans {
            plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !names.insert(plan.name.as_str()) {
                return invalid(format!("duplicate mix plan name `{}`", plan.name));
            }
            if plan.name.is_empty() || plan.name.contains(['/', '\\']) {
                return invalid(format!("mix plan name `{}` is not a file name", plan.name));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.output_root)
    }

    /// Directory images are read from by the model stages.
    pub fn effective_media_root(&self) -> Option<PathBuf> {
        if self.standardize_images {
            Some(self.layout().media_dir())
        } else {
            self.media_root.clone()
        }
    }
}

/// Files under the output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn group_a(&self) -> PathBuf {
        self.samples_dir().join("group_a.jsonl")
    }

    pub fn group_b(&self) -> PathBuf {
        self.samples_dir().join("group_b.jsonl")
    }

    pub fn rewritten(&self) -> PathBuf {
        self.samples_dir().join("rewritten.jsonl")
    }

    pub fn rewrite_failed(&self) -> PathBuf {
        self.samples_dir().join("rewritten.failed.jsonl")
    }

    pub fn filtered(&self) -> PathBuf {
        self.samples_dir().join("filtered.jsonl")
    }

    pub fn screening_dir(&self) -> PathBuf {
        self.samples_dir().join("screening")
    }

    pub fn verdicts_dir(&self) -> PathBuf {
        self.root.join("verdicts")
    }

    pub fn verdicts(&self) -> PathBuf {
        self.verdicts_dir().join("verdicts.jsonl")
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn scores(&self) -> PathBuf {
        self.scores_dir().join("scores.jsonl")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels").join("labels.jsonl")
    }

    pub fn groups(&self) -> PathBuf {
        self.root.join("labels").join("groups.jsonl")
    }

    pub fn manifests_dir(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn manifest(&self, plan: &str) -> PathBuf {
        self.manifests_dir().join(format!("{plan}.jsonl"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn media_dir(&self) -> PathBuf {
        self.root.join("media")
    }
}
