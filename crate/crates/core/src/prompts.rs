//! Prompt templates for rewriting, judging and scoring.
//!
//! Built-in bodies live in `prompts/<template_id>.prompt` and are compiled in.
//! A run may replace any body from a directory of files with the same names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Category;

pub const DEFAULT_PAIR_NUM: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Rewrite,
    Judge,
    Score,
}

/// Output syntax the model is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedParse {
    AnglePairs,
    HashPairs,
    Dialogue,
    RevisedAnswer,
    YesNo,
    TwoScores,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub stage: PromptStage,
    /// Empty means every category.
    pub category_scope: BTreeSet<Category>,
    pub body: String,
    pub placeholders: BTreeSet<String>,
    pub expected_parse: ExpectedParse,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("unbound placeholder {0}")]
    Unbound(String),
    #[error("category {0} is not rewritable")]
    NotRewritable(Category),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template override {path}: {message}")]
    Override { path: String, message: String },
}

impl PromptTemplate {
    pub fn new(
        template_id: &str,
        stage: PromptStage,
        category_scope: &[Category],
        body: &str,
        expected_parse: ExpectedParse,
    ) -> Self {
        Self {
            template_id: template_id.to_string(),
            stage,
            category_scope: category_scope.iter().copied().collect(),
            body: body.to_string(),
            placeholders: scan_placeholders(body).into_iter().map(|(_, _, n)| n.to_string()).collect(),
            expected_parse,
        }
    }
}

/// `(start, end, name)` for every `{name}` token, `name` matching `[a-z_][a-z0-9_]*`.
fn scan_placeholders(body: &str) -> Vec<(usize, usize, &str)> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_' || (j > start && bytes[j].is_ascii_digit())) {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, j + 1, &body[start..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Single-pass substitution. Values are inserted literally and never
/// re-expanded; unused bindings are ignored with a warning.
pub fn render(t: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
    if let Some(missing) = t.placeholders.iter().find(|p| !bindings.contains_key(*p)) {
        return Err(PromptError::Unbound(missing.clone()));
    }
    for extra in bindings.keys().filter(|k| !t.placeholders.contains(*k)) {
        tracing::warn!(template = %t.template_id, binding = %extra, "ignoring unused binding");
    }
    let mut out = String::with_capacity(t.body.len());
    let mut last = 0;
    for (start, end, name) in scan_placeholders(&t.body) {
        out.push_str(&t.body[last..start]);
        out.push_str(&bindings[name]);
        last = end;
    }
    out.push_str(&t.body[last..]);
    Ok(out)
}

/// Immutable template set keyed by template id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

pub const REWRITE_GENERAL_QA: &str = "rewrite_general_qa";
pub const REWRITE_CHART: &str = "rewrite_chart";
pub const REWRITE_MATH: &str = "rewrite_math";
pub const REWRITE_CAPTION: &str = "rewrite_caption";
pub const REWRITE_OCR: &str = "rewrite_ocr";
pub const JUDGE: &str = "judge";
pub const SCORE: &str = "score";

pub(crate) const BUILTIN_BODIES: [(&str, &str); 7] = [
    (REWRITE_GENERAL_QA, include_str!("../prompts/rewrite_general_qa.prompt")),
    (REWRITE_CHART, include_str!("../prompts/rewrite_chart.prompt")),
    (REWRITE_MATH, include_str!("../prompts/rewrite_math.prompt")),
    (REWRITE_CAPTION, include_str!("../prompts/rewrite_caption.prompt")),
    (REWRITE_OCR, include_str!("../prompts/rewrite_ocr.prompt")),
    (JUDGE, include_str!("../prompts/judge.prompt")),
    (SCORE, include_str!("../prompts/score.prompt")),
];

fn builtin_meta(id: &str) -> (PromptStage, &'static [Category], ExpectedParse) {
    use Category::*;
    match id {
        REWRITE_GENERAL_QA => (PromptStage::Rewrite, &[General, DomainSpecific, Detection], ExpectedParse::AnglePairs),
        REWRITE_CHART => (PromptStage::Rewrite, &[Chart], ExpectedParse::HashPairs),
        REWRITE_MATH => (PromptStage::Rewrite, &[CodeMath], ExpectedParse::RevisedAnswer),
        REWRITE_CAPTION => (PromptStage::Rewrite, &[Caption], ExpectedParse::AnglePairs),
        REWRITE_OCR => (PromptStage::Rewrite, &[Ocr], ExpectedParse::Dialogue),
        JUDGE => (PromptStage::Judge, &[], ExpectedParse::YesNo),
        SCORE => (PromptStage::Score, &[], ExpectedParse::TwoScores),
        _ => unreachable!("not a built-in template id: {id}"),
    }
}

pub fn builtin_registry() -> PromptRegistry {
    let templates = BUILTIN_BODIES
        .iter()
        .map(|(id, body)| {
            let (stage, scope, parse) = builtin_meta(id);
            (id.to_string(), PromptTemplate::new(id, stage, scope, body, parse))
        })
        .collect();
    PromptRegistry { templates }
}

impl PromptRegistry {
    /// Replaces built-in bodies with any `<template_id>.prompt` found in `dir`.
    /// Stage, scope and expected parse stay those of the built-in.
    pub fn with_overrides(mut self, dir: &Path) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Override { path: dir.display().to_string(), message };
        let entries = fs::read_dir(dir).map_err(|e| err(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| err(e.to_string()))?.path();
            if path.extension().is_none_or(|e| e != "prompt") {
                continue;
            }
            let id = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let Some(existing) = self.templates.get(&id) else {
                return Err(err(format!("`{id}` does not name a built-in template")));
            };
            let body = fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
            let scope: Vec<Category> = existing.category_scope.iter().copied().collect();
            let replaced = PromptTemplate::new(&id, existing.stage, &scope, &body, existing.expected_parse);
            self.templates.insert(id, replaced);
        }
        Ok(self)
    }

    pub fn get(&self, template_id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(template_id)
            .ok_or_else(|| PromptError::UnknownTemplate(template_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    pub fn template_for(&self, stage: PromptStage, category: Category) -> Result<&PromptTemplate, PromptError> {
        self.get(template_id_for(stage, category)?)
    }
}

/// Routing table from (stage, category) to template id.
pub fn template_id_for(stage: PromptStage, category: Category) -> Result<&'static str, PromptError> {
    use Category::*;
    match stage {
        PromptStage::Judge => Ok(JUDGE),
        PromptStage::Score => Ok(SCORE),
        PromptStage::Rewrite => match category {
            Ocr => Ok(REWRITE_OCR),
            Chart => Ok(REWRITE_CHART),
            Caption => Ok(REWRITE_CAPTION),
            CodeMath => Ok(REWRITE_MATH),
            General | DomainSpecific | Detection => Ok(REWRITE_GENERAL_QA),
            Language | MultiImage | Video => Err(PromptError::NotRewritable(category)),
        },
    }
}
