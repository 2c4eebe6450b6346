//! Reports computed from the stores under an output root. The CLI and the
//! review API both render through these functions, so their bytes match.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytics::{
    aggregate_scores, length_report, substitution_analysis, AgreementMatrix, AnalyticsError, LengthReport, ScoreRecord,
    ScoreReport, SubstitutionAnalysis, Tokenizer,
};
use crate::config::Layout;
use crate::corpus::Sample;
use crate::filter::{filter_rates, FilterRateReport, JudgeVerdict};
use crate::jsonl::{self, JsonlError};
use crate::parse::Verdict;
use crate::rewrite::RewriteOutcome;
use crate::store::{Label, RecordStore, StoreError};

/// Rater id under which judge verdicts enter agreement analysis.
pub const MODEL_RATER: &str = "model";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

fn read_or_empty<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    if path.exists() {
        jsonl::read_all(path)
    } else {
        Ok(Vec::new())
    }
}

pub fn verdicts(layout: &Layout) -> Result<Vec<JudgeVerdict>, JsonlError> {
    read_or_empty(&layout.verdicts())
}

pub fn scores(layout: &Layout) -> Result<Vec<ScoreRecord>, JsonlError> {
    read_or_empty(&layout.scores())
}

/// Pretty JSON with a trailing newline; the one serialization every report uses.
pub fn render_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn filter_rate_report(layout: &Layout) -> Result<FilterRateReport, ReportError> {
    Ok(filter_rates(&verdicts(layout)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub matrix: AgreementMatrix,
    pub human_raters: Vec<String>,
    pub model_rater: Option<String>,
    /// Items labelled by each rater.
    pub item_counts: BTreeMap<String, usize>,
    /// Present once two humans and the model have overlapping labels.
    pub substitution: Option<SubstitutionAnalysis>,
}

/// Human labels from the label store plus judge verdicts as rater `model`
/// (Keep is good, Discard is bad).
pub fn agreement_report(layout: &Layout) -> Result<AgreementReport, ReportError> {
    let mut labels = RecordStore::open(&layout.labels()).labels_by_rater()?;
    labels.remove(MODEL_RATER);
    let human_raters: Vec<String> = labels.keys().cloned().collect();
    let model: BTreeMap<String, Label> = verdicts(layout)?
        .into_iter()
        .map(|v| (v.sample_id, if v.verdict == Verdict::Keep { Label::Good } else { Label::Bad }))
        .collect();
    let model_rater = (!model.is_empty()).then(|| MODEL_RATER.to_string());
    if !model.is_empty() {
        labels.insert(MODEL_RATER.to_string(), model);
    }
    let item_counts = labels.iter().map(|(r, m)| (r.clone(), m.len())).collect();
    let matrix = AgreementMatrix::from_labels(&labels);
    let humans: Vec<&str> = human_raters.iter().map(String::as_str).collect();
    let substitution = model_rater
        .as_ref()
        .and_then(|m| substitution_analysis(&matrix, m, &humans).ok());
    Ok(AgreementReport { matrix, human_raters, model_rater, item_counts, substitution })
}

/// Original samples (Group B) against the rewritten samples that survived
/// filtering, or all rewrites when no filter has run.
pub fn length_distribution(layout: &Layout, tokenizer: Tokenizer, bucket: usize) -> Result<LengthReport, ReportError> {
    let mut samples: Vec<Sample> = read_or_empty(&layout.group_b())?;
    let rewritten = if layout.filtered().exists() { layout.filtered() } else { layout.rewritten() };
    samples.extend(read_or_empty::<Sample>(&rewritten)?);
    Ok(length_report(&samples, tokenizer, bucket)?)
}

pub fn score_report(layout: &Layout) -> Result<ScoreReport, ReportError> {
    Ok(aggregate_scores(&scores(layout)?))
}

/// An original sample with everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub original: Sample,
    pub rewrite: Option<RewriteOutcome>,
    pub rewritten: Vec<Sample>,
    pub verdicts: Vec<JudgeVerdict>,
    pub scores: Vec<ScoreRecord>,
}

/// Lineage of `id`, which may name an original or one of its rewrites.
pub fn lineage(layout: &Layout, id: &str) -> Result<Option<Lineage>, ReportError> {
    let rewritten_all: Vec<Sample> = read_or_empty(&layout.rewritten())?;
    let root_id = rewritten_all
        .iter()
        .find(|s| s.id == id)
        .and_then(|s| s.parent_id.clone())
        .unwrap_or_else(|| id.to_string());

    let mut original = None;
    for path in [layout.group_b(), layout.group_a()] {
        if let Some(s) = read_or_empty::<Sample>(&path)?.into_iter().find(|s| s.id == root_id) {
            original = Some(s);
            break;
        }
    }
    let Some(original) = original else { return Ok(None) };

    let rewritten: Vec<Sample> = rewritten_all.into_iter().filter(|s| s.parent_id.as_deref() == Some(&root_id)).collect();
    let log = layout.samples_dir().join("rewrite.log.jsonl");
    let rewrite = if log.exists() {
        jsonl::read_all_tolerant::<RewriteOutcome>(&log)?
            .into_iter()
            .rev()
            .find(|o| o.parent_id == root_id)
            .map(|mut o| {
                o.samples.clear();
                o
            })
    } else {
        None
    };
    let related = |sid: &str| sid == root_id || rewritten.iter().any(|s| s.id == sid);
    let verdicts = verdicts(layout)?.into_iter().filter(|v| related(&v.sample_id)).collect();
    let scores = scores(layout)?.into_iter().filter(|s| related(&s.sample_id)).collect();
    Ok(Some(Lineage { original, rewrite, rewritten, verdicts, scores }))
}
