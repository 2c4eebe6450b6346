//! Parsers for raw model output.
//!
//! Every parser is total over arbitrary UTF-8: it returns a value or a
//! declared error and never panics. Extracted text is always a contiguous,
//! trimmed slice of the input.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::analytics::QualityScore;
use crate::corpus::Turn;

pub const MAX_DIALOGUE_ROUNDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub instruction: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewriteBody {
    Pairs { pairs: Vec<InstructionPair> },
    Dialogue { scenario: Option<String>, turns: Vec<Turn> },
    RevisedAnswer { question: String, revised: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRewrite {
    #[serde(flatten)]
    pub body: RewriteBody,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ParsedRewrite {
    /// Number of emitted units: pairs, dialogue rounds, or one revised answer.
    pub fn units(&self) -> usize {
        match &self.body {
            RewriteBody::Pairs { pairs } => pairs.len(),
            RewriteBody::Dialogue { turns, .. } => turns.len() / 2,
            RewriteBody::RevisedAnswer { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no parseable content{}", fmt_warnings(.warnings))]
    EmptyParse { warnings: Vec<String> },
}

fn fmt_warnings(w: &[String]) -> String {
    if w.is_empty() {
        String::new()
    } else {
        format!(" ({})", w.join("; "))
    }
}

fn empty(warnings: Vec<String>) -> ParseError {
    ParseError::EmptyParse { warnings }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Discard,
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreAxis {
    Content,
    Relevance,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoreParseError {
    #[error("{0:?} score missing")]
    Missing(ScoreAxis),
    #[error("{axis:?} score {value} out of range 1-5")]
    OutOfRange { axis: ScoreAxis, value: String },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AngleMarker {
    Instruction,
    Response,
}

/// `<Instruction: …>` / `<Response: …>` pairs, keywords matched
/// case-insensitively.
pub fn parse_angle_pairs(text: &str) -> Result<ParsedRewrite, ParseError> {
    let lower = text.to_ascii_lowercase();
    let mut markers = Vec::new();
    for (needle, kind) in [("<instruction:", AngleMarker::Instruction), ("<response:", AngleMarker::Response)] {
        markers.extend(lower.match_indices(needle).map(|(i, m)| (i, i + m.len(), kind)));
    }
    markers.sort_by_key(|m| m.0);

    let mut warnings = Vec::new();
    let mut segments = Vec::with_capacity(markers.len());
    for (idx, &(_, body_start, kind)) in markers.iter().enumerate() {
        let seg_end = markers.get(idx + 1).map_or(text.len(), |m| m.0);
        let segment = &text[body_start..seg_end];
        let content = match segment.rfind('>') {
            Some(close) => &segment[..close],
            None => {
                warnings.push("unterminated marker".to_string());
                segment
            }
        };
        segments.push((kind, content.trim()));
    }

    let pairs = pair_up(segments, &mut warnings);
    if pairs.is_empty() {
        return Err(empty(warnings));
    }
    Ok(ParsedRewrite { body: RewriteBody::Pairs { pairs }, warnings })
}

fn pair_up(segments: Vec<(AngleMarker, &str)>, warnings: &mut Vec<String>) -> Vec<InstructionPair> {
    let mut pairs = Vec::new();
    let mut pending: Option<&str> = None;
    for (kind, content) in segments {
        match (kind, pending.take()) {
            (AngleMarker::Instruction, prev) => {
                if prev.is_some() {
                    warnings.push("dangling instruction".to_string());
                }
                pending = Some(content);
            }
            (AngleMarker::Response, Some(instruction)) => {
                if instruction.is_empty() || content.is_empty() {
                    warnings.push("empty instruction or response".to_string());
                } else {
                    pairs.push(InstructionPair { instruction: instruction.to_string(), response: content.to_string() });
                }
            }
            (AngleMarker::Response, None) => warnings.push("response without instruction".to_string()),
        }
    }
    if pending.is_some() {
        warnings.push("dangling instruction".to_string());
    }
    pairs
}

/// Byte offset of each line start, plus the line text.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |line| {
        let start = offset;
        offset += line.len();
        (start, line)
    })
}

/// If `line` starts (after indentation and an optional bullet) with one of
/// `tags`, returns the tag index and the byte offset just past the tag.
fn line_tag(line: &str, tags: &[&str]) -> Option<(usize, usize)> {
    let trimmed = line.trim_start();
    let mut rest = trimmed;
    for bullet in ["- ", "* "] {
        if let Some(r) = rest.strip_prefix(bullet) {
            rest = r.trim_start();
            break;
        }
    }
    let lead = line.len() - rest.len();
    tags.iter()
        .position(|t| rest.starts_with(t))
        .map(|i| (i, lead + tags[i].len()))
}

/// Splits text into `(tag index, content)` runs for line-start tags. Text
/// before the first tag is returned separately.
fn tagged_runs<'a>(text: &'a str, tags: &[&str]) -> (&'a str, Vec<(usize, &'a str)>) {
    let mut starts = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        if let Some((tag, past)) = line_tag(line, tags) {
            starts.push((offset, tag, offset + past));
        }
    }
    let preamble = &text[..starts.first().map_or(text.len(), |s| s.0)];
    let runs = starts
        .iter()
        .enumerate()
        .map(|(i, &(_, tag, body))| {
            let end = starts.get(i + 1).map_or(text.len(), |s| s.0);
            (tag, text[body..end].trim())
        })
        .collect();
    (preamble, runs)
}

/// `##Instruction##:` / `##Response##:` blocks at line starts, case-sensitive.
pub fn parse_hash_pairs(text: &str) -> Result<ParsedRewrite, ParseError> {
    let (_, runs) = tagged_runs(text, &["##Instruction##:", "##Response##:"]);
    let mut warnings = Vec::new();
    let segments = runs
        .into_iter()
        .map(|(tag, content)| (if tag == 0 { AngleMarker::Instruction } else { AngleMarker::Response }, content))
        .collect();
    let pairs = pair_up(segments, &mut warnings);
    if pairs.is_empty() {
        return Err(empty(warnings));
    }
    Ok(ParsedRewrite { body: RewriteBody::Pairs { pairs }, warnings })
}

/// `Scenario:` line followed by alternating `Human:` / `Assistant:` messages,
/// at most five rounds.
pub fn parse_dialogue(text: &str) -> Result<ParsedRewrite, ParseError> {
    const SCENARIO: usize = 0;
    const HUMAN: usize = 1;
    let (_, runs) = tagged_runs(text, &["Scenario:", "Human:", "Assistant:"]);
    let mut warnings = Vec::new();
    let mut scenario = None;
    let mut turns: Vec<Turn> = Vec::new();
    let mut speakers = runs.into_iter().peekable();

    while let Some(&(tag, content)) = speakers.peek() {
        if tag != SCENARIO {
            break;
        }
        if scenario.is_some() {
            warnings.push("repeated scenario".to_string());
        } else if !content.is_empty() {
            scenario = Some(content.to_string());
        }
        speakers.next();
    }
    if scenario.is_none() {
        warnings.push("missing scenario".to_string());
    }

    let mut speakers = speakers.peekable();
    match speakers.peek() {
        None => {
            warnings.push("no Human/Assistant tags".to_string());
            return Err(empty(warnings));
        }
        Some(&(tag, _)) if tag != HUMAN => {
            warnings.push("dialogue must start with Human".to_string());
            return Err(empty(warnings));
        }
        _ => {}
    }

    for (tag, content) in speakers {
        if tag == SCENARIO {
            warnings.push("scenario inside dialogue ignored".to_string());
            continue;
        }
        let expect_human = turns.len().is_multiple_of(2);
        if (tag == HUMAN) != expect_human {
            warnings.push("alternation broken; truncated".to_string());
            break;
        }
        if content.is_empty() {
            warnings.push("empty message; truncated".to_string());
            break;
        }
        if expect_human && turns.len() / 2 == MAX_DIALOGUE_ROUNDS {
            warnings.push("truncated".to_string());
            break;
        }
        turns.push(if tag == HUMAN { Turn::human(content) } else { Turn::assistant(content) });
    }
    if turns.len() % 2 == 1 {
        warnings.push("dangling human turn dropped".to_string());
        turns.pop();
    }
    if turns.is_empty() {
        return Err(empty(warnings));
    }
    Ok(ParsedRewrite { body: RewriteBody::Dialogue { scenario, turns }, warnings })
}

/// Text inside a `<response: …>` wrapper if present, else the whole trimmed
/// body. The question is carried over from the original sample.
pub fn parse_revised_answer(text: &str, fallback_question: &str) -> Result<ParsedRewrite, ParseError> {
    let lower = text.to_ascii_lowercase();
    let mut warnings = Vec::new();
    let wrapped = lower.find("<response:").map(|start| {
        let body = &text[start + "<response:".len()..];
        match body.rfind('>') {
            Some(close) => body[..close].trim(),
            None => {
                warnings.push("unterminated response wrapper".to_string());
                body.trim()
            }
        }
    });
    let revised = match wrapped {
        Some(inner) if !inner.is_empty() => inner,
        Some(_) => {
            warnings.push("empty response wrapper".to_string());
            text.trim()
        }
        None => text.trim(),
    };
    if revised.is_empty() {
        return Err(empty(warnings));
    }
    Ok(ParsedRewrite {
        body: RewriteBody::RevisedAnswer {
            question: fallback_question.to_string(),
            revised: revised.to_string(),
        },
        warnings,
    })
}

/// Strict single-word Yes/No after trimming whitespace, terminal punctuation
/// and emphasis quotes.
pub fn parse_verdict(text: &str) -> Verdict {
    let word = text
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim_matches(['*', '\'', '"', '`'])
        .trim();
    if word.eq_ignore_ascii_case("yes") {
        Verdict::Keep
    } else if word.eq_ignore_ascii_case("no") {
        Verdict::Discard
    } else {
        Verdict::Unparseable
    }
}

static CONTENT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)Information\s+Content(?:\s+Score)?\s*\(\s*1\s*[-\u{2013}]\s*5\s*\)\s*:[ \t]*(\S*)").expect("valid regex")
});
static RELEVANCE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)Relevance(?:\s+Score)?\s*\(\s*1\s*[-\u{2013}]\s*5\s*\)\s*:[ \t]*(\S*)").expect("valid regex")
});

fn score_on(re: &Regex, text: &str, axis: ScoreAxis) -> Result<u8, ScoreParseError> {
    let caps = re.captures(text).ok_or(ScoreParseError::Missing(axis))?;
    let raw = caps.get(1).map_or("", |m| m.as_str()).trim_end_matches(['.', ',', '*']);
    let raw = raw.trim_start_matches('*');
    if raw.is_empty() {
        return Err(ScoreParseError::Missing(axis));
    }
    match raw.parse::<i64>() {
        Ok(v) if (1..=5).contains(&v) => Ok(v as u8),
        _ => Err(ScoreParseError::OutOfRange { axis, value: raw.to_string() }),
    }
}

/// The two labelled integers of the scoring prompt's output format.
pub fn parse_scores(text: &str) -> Result<QualityScore, ScoreParseError> {
    let content = score_on(&CONTENT_RE, text, ScoreAxis::Content)?;
    let relevance = score_on(&RELEVANCE_RE, text, ScoreAxis::Relevance)?;
    Ok(QualityScore::new(content, relevance).expect("range checked above"))
}

/// Canonical `<Instruction: …>` rendering, the inverse of [`parse_angle_pairs`].
pub fn render_angle_pairs(pairs: &[InstructionPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("<Instruction: {}>\n<Response: {}>\n", p.instruction, p.response))
        .collect()
}

/// Canonical `##Instruction##:` rendering, the inverse of [`parse_hash_pairs`].
pub fn render_hash_pairs(pairs: &[InstructionPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("##Instruction##: {}\n##Response##: {}\n", p.instruction, p.response))
        .collect()
}
