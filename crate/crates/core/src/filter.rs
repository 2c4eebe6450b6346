//! Model-judge filtering of rewritten samples and quality scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analytics::ScoreRecord;
use crate::corpus::{Category, Sample};
use crate::inference::{ChatRequest, Endpoint, InferenceError, MediaLoader, JUDGE_TEMPERATURE};
use crate::parse::{parse_scores, parse_verdict, Verdict};
use crate::prompts::{render, PromptRegistry, PromptStage};
use crate::rewrite::{bind_placeholders, RewriteError};
use crate::stage::Keyed;

/// Judge outcome for one rewritten sample. `flagged` marks a discard caused by
/// a failed request rather than a model verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub sample_id: String,
    pub source_id: String,
    pub category: Category,
    pub verdict: Verdict,
    pub attempts: u8,
    #[serde(default)]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Keyed for JudgeVerdict {
    fn key(&self) -> &str {
        &self.sample_id
    }
}

impl Keyed for ScoreRecord {
    fn key(&self) -> &str {
        &self.sample_id
    }
}

/// Endpoint, prompts and media shared by judging and scoring.
#[derive(Debug, Clone, Copy)]
pub struct ReviewContext<'a> {
    pub endpoint: &'a Endpoint,
    pub prompts: &'a PromptRegistry,
    pub media: &'a MediaLoader,
}

impl ReviewContext<'_> {
    fn request(&self, stage: PromptStage, sample: &Sample) -> Result<Result<ChatRequest, String>, RewriteError> {
        let template = self.prompts.template_for(stage, sample.category)?;
        let prompt = render(template, &bind_placeholders(template, sample, 0)?)?;
        Ok(self.media.image_parts(sample).map(|images| {
            ChatRequest::user(prompt, images, self.endpoint.config().kind).with_temperature(JUDGE_TEMPERATURE)
        }))
    }
}

/// Keep or discard one sample. Anything but a clean Yes/No is asked once more;
/// a second unparseable answer or a failed request discards. Multi-turn
/// samples are judged as a whole.
pub async fn judge_sample(ctx: ReviewContext<'_>, sample: &Sample) -> Result<JudgeVerdict, RewriteError> {
    let mut record = JudgeVerdict {
        sample_id: sample.id.clone(),
        source_id: sample.source_id.clone(),
        category: sample.category,
        verdict: Verdict::Discard,
        attempts: 0,
        flagged: false,
        raw_text: None,
    };
    let request = match ctx.request(PromptStage::Judge, sample)? {
        Ok(r) => r,
        Err(e) => {
            record.flagged = true;
            record.raw_text = Some(e);
            return Ok(record);
        }
    };
    for _ in 0..2 {
        record.attempts += 1;
        match ctx.endpoint.complete(&request).await {
            Ok(resp) => {
                let verdict = parse_verdict(&resp.text);
                record.raw_text = Some(resp.text);
                if verdict != Verdict::Unparseable {
                    record.verdict = verdict;
                    return Ok(record);
                }
            }
            Err(InferenceError::RequestFailed { cause, .. }) => {
                record.flagged = true;
                record.raw_text = Some(cause);
                return Ok(record);
            }
            Err(e) => return Err(e.into()),
        }
    }
    record.verdict = Verdict::Discard;
    Ok(record)
}

/// Content and relevance scores, retried once; missing after that.
pub async fn score_sample(ctx: ReviewContext<'_>, sample: &Sample) -> Result<ScoreRecord, RewriteError> {
    let mut record = ScoreRecord {
        sample_id: sample.id.clone(),
        source_id: sample.source_id.clone(),
        provenance: sample.provenance,
        score: None,
        attempts: 0,
    };
    let Ok(request) = ctx.request(PromptStage::Score, sample)? else {
        return Ok(record);
    };
    for _ in 0..2 {
        record.attempts += 1;
        match ctx.endpoint.complete(&request).await {
            Ok(resp) => {
                if let Ok(score) = parse_scores(&resp.text) {
                    record.score = Some(score);
                    return Ok(record);
                }
            }
            Err(InferenceError::RequestFailed { .. }) => return Ok(record),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(record)
}

/// Before/after counts for one category. `rate` is the discarded fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRateRow {
    pub category: String,
    pub before: usize,
    pub after: usize,
    pub rate: f64,
}

impl FilterRateRow {
    pub fn new(category: &str, before: usize, after: usize) -> Self {
        let rate = if before == 0 { 0.0 } else { 1.0 - after as f64 / before as f64 };
        Self { category: category.to_string(), before, after, rate }
    }

    pub fn percent(&self) -> f64 {
        self.rate * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRateReport {
    pub rows: Vec<FilterRateRow>,
    pub total: FilterRateRow,
}

impl FilterRateReport {
    /// Report over precomputed `(label, before, after)` counts.
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, usize, usize)>) -> Self {
        let rows: Vec<FilterRateRow> = counts.into_iter().map(|(c, b, a)| FilterRateRow::new(c, b, a)).collect();
        let before = rows.iter().map(|r| r.before).sum();
        let after = rows.iter().map(|r| r.after).sum();
        Self { rows, total: FilterRateRow::new("total", before, after) }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8}", "category", "before", "after", "rate(%)");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8.1}", r.category, r.before, r.after, r.percent());
        }
        out
    }
}

/// Per-category counts of judged (before) and kept (after) samples, in
/// category order, plus the overall row.
pub fn filter_rates(verdicts: &[JudgeVerdict]) -> FilterRateReport {
    let mut counts: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for v in verdicts {
        let c = counts.entry(v.category).or_default();
        c.0 += 1;
        if v.verdict == Verdict::Keep {
            c.1 += 1;
        }
    }
    FilterRateReport::from_counts(
        Category::ALL.iter().filter_map(|c| counts.get(c).map(|(b, a)| (c.as_str(), *b, *a))),
    )
}
