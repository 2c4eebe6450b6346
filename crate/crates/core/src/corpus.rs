//! Canonical data model shared by every stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const IMAGE_TOKEN: &str = "<image>";
pub const VIDEO_TOKEN: &str = "<video>";

const VIDEO_EXTENSIONS: &[&str] = &["mp4", "avi", "mov", "mkv", "webm", "m4v", "flv", "wmv"];

/// The ten data categories a source can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    General,
    Ocr,
    Chart,
    Caption,
    DomainSpecific,
    CodeMath,
    Language,
    Detection,
    MultiImage,
    Video,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::General,
        Category::Ocr,
        Category::Chart,
        Category::Caption,
        Category::DomainSpecific,
        Category::CodeMath,
        Category::Language,
        Category::Detection,
        Category::MultiImage,
        Category::Video,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::General => "general",
            Category::Ocr => "ocr",
            Category::Chart => "chart",
            Category::Caption => "caption",
            Category::DomainSpecific => "domain_specific",
            Category::CodeMath => "code_math",
            Category::Language => "language",
            Category::Detection => "detection",
            Category::MultiImage => "multi_image",
            Category::Video => "video",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// Outcome of manual source screening.
///
/// A keeps its data as is, B is rewritten, C is dropped from every later stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScreeningGroup {
    A,
    B,
    C,
}

impl FromStr for ScreeningGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(ScreeningGroup::A),
            "B" | "b" => Ok(ScreeningGroup::B),
            "C" | "c" => Ok(ScreeningGroup::C),
            other => Err(format!("unknown screening group `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Self { role: Role::Human, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Rewritten,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Rewritten => "rewritten",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaKind {
    Image,
    Video,
}

impl MediaKind {
    pub fn of(path: &str) -> MediaKind {
        let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
        match ext {
            Some(e) if VIDEO_EXTENSIONS.contains(&e.as_str()) => MediaKind::Video,
            _ => MediaKind::Image,
        }
    }
}

/// One multimodal instruction record.
///
/// Unknown JSON fields are kept in `extra` when reading and are never written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub source_id: String,
    pub category: Category,
    #[serde(default)]
    pub media: Vec<String>,
    pub turns: Vec<Turn>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(flatten, skip_serializing)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Sample {
    pub fn image_refs(&self) -> impl Iterator<Item = &str> {
        self.media.iter().map(String::as_str).filter(|m| MediaKind::of(m) == MediaKind::Image)
    }

    pub fn video_refs(&self) -> impl Iterator<Item = &str> {
        self.media.iter().map(String::as_str).filter(|m| MediaKind::of(m) == MediaKind::Video)
    }

    /// Human/assistant pairs in order, with media placeholder tokens stripped.
    ///
    /// A trailing human turn without an answer is ignored.
    pub fn qa_pairs(&self) -> Vec<(String, String)> {
        self.turns
            .chunks(2)
            .filter(|c| c.len() == 2 && c[0].role == Role::Human && c[1].role == Role::Assistant)
            .map(|c| (strip_media_tokens(&c[0].text), strip_media_tokens(&c[1].text)))
            .collect()
    }

    /// Media placeholder prefix matching this sample's media list.
    pub fn placeholder_prefix(&self) -> String {
        let mut prefix = String::new();
        for _ in self.image_refs() {
            prefix.push_str(IMAGE_TOKEN);
            prefix.push('\n');
        }
        for _ in self.video_refs() {
            prefix.push_str(VIDEO_TOKEN);
            prefix.push('\n');
        }
        prefix
    }
}

/// A registered source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: String,
    pub display_name: String,
    pub root_path: PathBuf,
    pub format_tag: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ScreeningGroup>,
}

pub fn strip_media_tokens(text: &str) -> String {
    text.replace(IMAGE_TOKEN, "").replace(VIDEO_TOKEN, "").trim().to_string()
}

fn hash_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

/// Stable id of an original record; `record_key` is the record's own id when it
/// has one, otherwise its line number.
pub fn original_id(source_id: &str, record_key: &str) -> String {
    hash_hex(&[source_id, record_key, Provenance::Original.as_str(), ""])
}

/// Stable id of the `pair_index`-th sample produced by rewriting `parent_id`.
pub fn rewritten_id(source_id: &str, parent_id: &str, pair_index: usize) -> String {
    hash_hex(&[source_id, parent_id, Provenance::Rewritten.as_str(), &pair_index.to_string()])
}

/// Every invariant violation of `s`; empty when the sample is valid.
pub fn validate_sample(s: &Sample) -> Vec<String> {
    let mut violations = Vec::new();

    if s.id.trim().is_empty() {
        violations.push("empty id".to_string());
    }
    if s.turns.is_empty() {
        violations.push("no turns".to_string());
    }
    if s.turns.iter().any(|t| t.text.trim().is_empty()) {
        violations.push("empty turn text".to_string());
    }
    let alternates = s.turns.iter().enumerate().all(|(i, t)| {
        let expected = if i % 2 == 0 { Role::Human } else { Role::Assistant };
        t.role == expected
    });
    if !alternates {
        violations.push("role alternation violated".to_string());
    }

    let image_tokens: usize = s.turns.iter().map(|t| t.text.matches(IMAGE_TOKEN).count()).sum();
    let video_tokens: usize = s.turns.iter().map(|t| t.text.matches(VIDEO_TOKEN).count()).sum();
    if image_tokens != s.image_refs().count() || video_tokens != s.video_refs().count() {
        violations.push("media/placeholder mismatch".to_string());
    }

    match (s.provenance, &s.parent_id) {
        (Provenance::Rewritten, None) => violations.push("rewritten sample without parent_id".to_string()),
        (Provenance::Original, Some(_)) => violations.push("original sample with parent_id".to_string()),
        _ => {}
    }

    violations
}
