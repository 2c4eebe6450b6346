//! Category-specific rewriting of original samples into rationale-rich ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{rewritten_id, strip_media_tokens, validate_sample, Category, Provenance, Role, Sample, Turn};
use crate::inference::{ChatRequest, EndpointKind, EndpointSet, InferenceError, MediaLoader};
use crate::parse::{self, ParseError, ParsedRewrite, RewriteBody};
use crate::prompts::{render, ExpectedParse, PromptError, PromptRegistry, PromptStage, PromptTemplate};
use crate::stage::Keyed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteStatus {
    Ok,
    EmptyParse,
    RequestFailed,
    SkippedNotRewritable,
    BindError,
    MediaError,
}

/// Result of rewriting one original sample. Failures are recorded, not dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub parent_id: String,
    pub source_id: String,
    pub category: Category,
    pub template_id: String,
    pub status: RewriteStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedRewrite>,
    #[serde(default)]
    pub emitted_ids: Vec<String>,
    #[serde(default)]
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Keyed for RewriteOutcome {
    fn key(&self) -> &str {
        &self.parent_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot bind {template}: {message}")]
pub struct BindError {
    pub template: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// `Question: …` / `Answer: …` lines for every Q&A pair.
pub fn qa_text(s: &Sample) -> String {
    s.qa_pairs()
        .iter()
        .map(|(q, a)| format!("Question: {q}\nAnswer: {a}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The whole conversation as `Human:` / `Assistant:` lines.
pub fn conversation_text(s: &Sample) -> String {
    s.turns
        .iter()
        .map(|t| {
            let speaker = match t.role {
                Role::Human => "Human",
                Role::Assistant => "Assistant",
            };
            format!("{speaker}: {}", strip_media_tokens(&t.text))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Values for every placeholder the template declares, drawn from `s`.
/// Caption and math slots take exactly one Q&A pair.
pub fn bind_placeholders(t: &PromptTemplate, s: &Sample, pair_num: u32) -> Result<BTreeMap<String, String>, BindError> {
    let pairs = s.qa_pairs();
    let err = |message: String| BindError { template: t.template_id.clone(), message };
    let single = || match pairs.as_slice() {
        [one] => Ok(one.clone()),
        _ => Err(err(format!("expected one Q&A pair, found {}", pairs.len()))),
    };
    let mut b = BTreeMap::new();
    for name in &t.placeholders {
        let value = match name.as_str() {
            "pair_num" => pair_num.to_string(),
            "qa_text" | "vqa" => {
                if pairs.is_empty() {
                    return Err(err("sample has no Q&A pair".into()));
                }
                qa_text(s)
            }
            "conversations" => conversation_text(s),
            "question" => single()?.0,
            "answer" => single()?.1,
            "caption" => single()?.1,
            other => return Err(err(format!("no binding for placeholder {other}"))),
        };
        b.insert(name.clone(), value);
    }
    Ok(b)
}

pub fn parse_output(expected: ExpectedParse, raw: &str, parent: &Sample) -> Result<ParsedRewrite, ParseError> {
    match expected {
        ExpectedParse::AnglePairs => parse::parse_angle_pairs(raw),
        ExpectedParse::HashPairs => parse::parse_hash_pairs(raw),
        ExpectedParse::Dialogue => parse::parse_dialogue(raw),
        ExpectedParse::RevisedAnswer => {
            let question = parent.qa_pairs().first().map(|p| p.0.clone()).unwrap_or_default();
            parse::parse_revised_answer(raw, &question)
        }
        ExpectedParse::YesNo | ExpectedParse::TwoScores => Err(ParseError::EmptyParse {
            warnings: vec!["template is not a rewrite template".into()],
        }),
    }
}

/// New samples from a parsed rewrite. Pairs fan out one sample each; a
/// dialogue or revised answer becomes a single sample. Media placeholders are
/// re-attached to the first human turn so every sample stays valid.
pub fn materialize(parent: &Sample, parsed: &ParsedRewrite) -> (Vec<Sample>, Vec<String>) {
    let prefix = parent.placeholder_prefix();
    let mut warnings = Vec::new();
    let conversations: Vec<Vec<(String, String)>> = match &parsed.body {
        RewriteBody::Pairs { pairs } => pairs
            .iter()
            .map(|p| vec![(strip_media_tokens(&p.instruction), strip_media_tokens(&p.response))])
            .collect(),
        RewriteBody::Dialogue { turns, .. } => vec![turns
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| (strip_media_tokens(&c[0].text), strip_media_tokens(&c[1].text)))
            .collect()],
        RewriteBody::RevisedAnswer { revised, .. } => {
            let question = parent.qa_pairs().first().map(|p| p.0.clone()).unwrap_or_default();
            vec![vec![(question, strip_media_tokens(revised))]]
        }
    };

    let mut samples = Vec::new();
    for (index, rounds) in conversations.into_iter().enumerate() {
        let mut turns = Vec::with_capacity(rounds.len() * 2);
        for (i, (q, a)) in rounds.into_iter().enumerate() {
            let q = if i == 0 { format!("{prefix}{q}") } else { q };
            turns.push(Turn::human(q));
            turns.push(Turn::assistant(a));
        }
        let sample = Sample {
            id: rewritten_id(&parent.source_id, &parent.id, index),
            source_id: parent.source_id.clone(),
            category: parent.category,
            media: parent.media.clone(),
            turns,
            provenance: Provenance::Rewritten,
            parent_id: Some(parent.id.clone()),
            extra: BTreeMap::new(),
        };
        let violations = validate_sample(&sample);
        if violations.is_empty() {
            samples.push(sample);
        } else {
            warnings.push(format!("unit {index} dropped: {}", violations.join(", ")));
        }
    }
    (samples, warnings)
}

/// Shared, read-only state of a rewrite run.
#[derive(Debug, Clone)]
pub struct RewriteContext {
    pub prompts: PromptRegistry,
    pub endpoints: EndpointSet,
    pub media: MediaLoader,
    pub pair_num: u32,
}

/// Rewrites one sample. An empty parse is retried once; request, binding and
/// routing-table failures are recorded on the outcome. A missing endpoint
/// aborts the run.
pub async fn rewrite_sample(ctx: &RewriteContext, sample: &Sample) -> Result<RewriteOutcome, RewriteError> {
    let mut outcome = RewriteOutcome {
        parent_id: sample.id.clone(),
        source_id: sample.source_id.clone(),
        category: sample.category,
        template_id: String::new(),
        status: RewriteStatus::Ok,
        attempts: 0,
        parsed: None,
        emitted_ids: Vec::new(),
        samples: Vec::new(),
        warnings: Vec::new(),
        error: None,
        raw_text: None,
    };
    let template = match ctx.prompts.template_for(PromptStage::Rewrite, sample.category) {
        Ok(t) => t,
        Err(PromptError::NotRewritable(_)) => {
            outcome.status = RewriteStatus::SkippedNotRewritable;
            return Ok(outcome);
        }
        Err(e) => return Err(e.into()),
    };
    outcome.template_id = template.template_id.clone();
    let endpoint = ctx.endpoints.route(sample.category)?;

    let bindings = match bind_placeholders(template, sample, ctx.pair_num) {
        Ok(b) => b,
        Err(e) => {
            outcome.status = RewriteStatus::BindError;
            outcome.error = Some(e.to_string());
            return Ok(outcome);
        }
    };
    let prompt = render(template, &bindings)?;
    let images = match endpoint.config().kind {
        EndpointKind::TextOnly => Vec::new(),
        EndpointKind::Multimodal => match ctx.media.image_parts(sample) {
            Ok(parts) => parts,
            Err(e) => {
                outcome.status = RewriteStatus::MediaError;
                outcome.error = Some(e);
                return Ok(outcome);
            }
        },
    };
    let request = ChatRequest::user(prompt, images, endpoint.config().kind);

    for _ in 0..2 {
        outcome.attempts += 1;
        let response = match endpoint.complete(&request).await {
            Ok(r) => r,
            Err(InferenceError::RequestFailed { attempts, cause }) => {
                outcome.status = RewriteStatus::RequestFailed;
                outcome.error = Some(format!("request failed after {attempts} attempt(s): {cause}"));
                return Ok(outcome);
            }
            Err(e) => return Err(e.into()),
        };
        outcome.raw_text = Some(response.text);
        let raw = outcome.raw_text.as_deref().unwrap_or_default();
        match parse_output(template.expected_parse, raw, sample) {
            Ok(parsed) => {
                let (samples, dropped) = materialize(sample, &parsed);
                outcome.warnings = parsed.warnings.clone();
                outcome.warnings.extend(dropped);
                if !samples.is_empty() {
                    outcome.status = RewriteStatus::Ok;
                    outcome.emitted_ids = samples.iter().map(|s| s.id.clone()).collect();
                    outcome.samples = samples;
                    outcome.parsed = Some(parsed);
                    return Ok(outcome);
                }
            }
            Err(ParseError::EmptyParse { warnings }) => outcome.warnings = warnings,
        }
        outcome.status = RewriteStatus::EmptyParse;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::sample;
    use crate::inference::{BackoffPolicy, Endpoint, EndpointConfig, MockBackend};
    use crate::prompts::builtin_registry;
    use std::sync::Arc;

    fn ctx(mock: MockBackend) -> RewriteContext {
        let mock = Arc::new(mock);
        let mut mm = EndpointConfig::new("mock:", "mm", EndpointKind::Multimodal);
        mm.backoff = BackoffPolicy::none();
        let mut text = EndpointConfig::new("mock:", "txt", EndpointKind::TextOnly);
        text.backoff = BackoffPolicy::none();
        RewriteContext {
            prompts: builtin_registry(),
            endpoints: EndpointSet::new(vec![
                Arc::new(Endpoint::new(mm, Arc::new(mock.clone())).unwrap()),
                Arc::new(Endpoint::new(text, Arc::new(mock)).unwrap()),
            ]),
            media: MediaLoader::default(),
            pair_num: 3,
        }
    }

    fn qa(category: Category) -> Sample {
        sample(
            "p1",
            category,
            &["a.png"],
            vec![Turn::human("<image>\nWhat is the total?"), Turn::assistant("42")],
        )
    }

    #[test]
    fn binds_each_template() {
        let reg = builtin_registry();
        let s = qa(Category::CodeMath);
        let math = bind_placeholders(reg.get("rewrite_math").unwrap(), &s, 3).unwrap();
        assert_eq!(math["question"], "What is the total?");
        assert_eq!(math["answer"], "42");
        let general = bind_placeholders(reg.get("rewrite_general_qa").unwrap(), &s, 4).unwrap();
        assert_eq!(general["pair_num"], "4");
        assert_eq!(general["qa_text"], "Question: What is the total?\nAnswer: 42");
        for t in reg.iter() {
            assert!(render(t, &bind_placeholders(t, &s, 3).unwrap()).is_ok(), "{}", t.template_id);
        }
    }

    #[test]
    fn shape_mismatch_is_a_bind_error() {
        let reg = builtin_registry();
        let two = sample(
            "p2",
            Category::CodeMath,
            &["a.png"],
            vec![Turn::human("<image>\nq1"), Turn::assistant("a1"), Turn::human("q2"), Turn::assistant("a2")],
        );
        assert!(bind_placeholders(reg.get("rewrite_math").unwrap(), &two, 3).is_err());
        assert!(bind_placeholders(reg.get("rewrite_caption").unwrap(), &two, 3).is_err());
        assert!(bind_placeholders(reg.get("rewrite_ocr").unwrap(), &two, 3).unwrap()["vqa"].contains("q2"));
    }

    #[test]
    fn ocr_vqa_binding() {
        let reg = builtin_registry();
        let s = sample("o", Category::Ocr, &["a.png"], vec![Turn::human("<image>\nwhats the amount on the page?"), Turn::assistant("1999")]);
        let b = bind_placeholders(reg.get("rewrite_ocr").unwrap(), &s, 3).unwrap();
        assert!(b["vqa"].contains("whats the amount on the page?") && b["vqa"].contains("1999"));
        let c = bind_placeholders(reg.get("rewrite_caption").unwrap(), &s, 3).unwrap();
        assert_eq!(c["caption"], "1999");
        assert!(!c.contains_key("qa_text"));
    }

    #[tokio::test]
    async fn pairs_fan_out_with_placeholders() {
        let mock = MockBackend::new().with_default("<Instruction: Explain A.> <Response: Because A.>\n<Instruction: And B?> <Response: B too.>");
        let out = rewrite_sample(&ctx(mock), &qa(Category::General)).await.unwrap();
        assert_eq!(out.status, RewriteStatus::Ok);
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.emitted_ids, vec![out.samples[0].id.clone(), out.samples[1].id.clone()]);
        assert_eq!(out.samples[0].turns[0].text, "<image>\nExplain A.");
        assert_eq!(out.samples[1].turns[1].text, "B too.");
        assert!(out.samples.iter().all(|s| s.parent_id.as_deref() == Some("p1")));
        assert_ne!(out.samples[0].id, out.samples[1].id);
    }

    #[tokio::test]
    async fn empty_parse_retried_once() {
        let mock = MockBackend::new().with_default("nothing useful");
        let out = rewrite_sample(&ctx(mock), &qa(Category::Chart)).await.unwrap();
        assert_eq!(out.status, RewriteStatus::EmptyParse);
        assert_eq!(out.attempts, 2);
        assert_eq!(out.raw_text.as_deref(), Some("nothing useful"));
    }

    #[tokio::test]
    async fn math_keeps_question() {
        let mock = MockBackend::new().with_default("Revised Answer: <response: 40 + 2 = 42.>");
        let out = rewrite_sample(&ctx(mock), &qa(Category::CodeMath)).await.unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].turns[0].text, "<image>\nWhat is the total?");
        assert_eq!(out.samples[0].turns[1].text, "40 + 2 = 42.");
    }

    #[tokio::test]
    async fn ocr_dialogue_is_one_sample() {
        let mock = MockBackend::new()
            .with_default("Scenario: A shop.\nHuman: What does the sign say?\nAssistant: Open.\nHuman: Hours?\nAssistant: Nine to five.");
        let out = rewrite_sample(&ctx(mock), &qa(Category::Ocr)).await.unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].turns.len(), 4);
    }

    #[tokio::test]
    async fn caption_routes_to_text_model() {
        let mock = MockBackend::new().with_responder(|model, _| {
            (model == "txt").then(|| "<Instruction: Plan it.> <Response: Steps.>".to_string())
        });
        let out = rewrite_sample(&ctx(mock), &qa(Category::Caption)).await.unwrap();
        assert_eq!(out.status, RewriteStatus::Ok);
    }

    #[tokio::test]
    async fn unrewritable_category_is_skipped() {
        let out = rewrite_sample(&ctx(MockBackend::new()), &qa(Category::Language)).await.unwrap();
        assert_eq!(out.status, RewriteStatus::SkippedNotRewritable);
        assert!(out.emitted_ids.is_empty());
    }

    #[tokio::test]
    async fn request_failure_recorded() {
        let out = rewrite_sample(&ctx(MockBackend::new()), &qa(Category::General)).await.unwrap();
        assert_eq!(out.status, RewriteStatus::RequestFailed);
        assert!(out.samples.is_empty());
    }
}
