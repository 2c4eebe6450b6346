//! Source reading, image standardization, screening draws and sample files.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    original_id, validate_sample, MediaKind, Provenance, Role, Sample, SourceSpec, Turn, IMAGE_TOKEN,
    VIDEO_TOKEN,
};
use crate::jsonl::{self, JsonlError};

pub const MIN_SIDE: u32 = 224;
pub const MAX_SIDE: u32 = 4096;
pub const MAX_ASPECT: u32 = 7;
pub const DEFAULT_SCREENING_SIZE: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read source `{source_id}` at {path}: {cause}")]
    Unreadable { source_id: String, path: PathBuf, cause: io::Error },
    #[error("unsupported format tag `{0}`")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("invalid source registry: {0}")]
    Registry(String),
    #[error("image {path}: {cause}")]
    Image { path: PathBuf, cause: String },
}

/// A malformed record; the stream carries on after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub file: PathBuf,
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}: {}", self.file.display(), self.line, self.message)
    }
}

/// Fields extracted from one raw source record before it becomes a [`Sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub record_id: Option<String>,
    pub media: Vec<String>,
    pub turns: Vec<Turn>,
}

/// Parser for one on-disk record layout.
pub trait RecordFormat: Send + Sync {
    fn parse(&self, value: Value) -> Result<RawRecord, String>;
}

/// `{"id", "image"|"video", "conversations": [{"from", "value"}]}`
pub struct LlavaJsonl;

/// `{"id"?, "image"?, "question", "answer"}`
pub struct PairsJsonl;

fn str_or_list(value: Option<&Value>, field: &str) -> Result<Vec<String>, String> {
    match value {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::String(s)) => Ok(vec![s.clone()]),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| format!("non-string entry in `{field}`")))
            .collect(),
        Some(_) => Err(format!("field `{field}` must be a string or list of strings")),
    }
}

fn record_id(obj: &serde_json::Map<String, Value>) -> Option<String> {
    match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    }
}

fn media_of(obj: &serde_json::Map<String, Value>) -> Result<Vec<String>, String> {
    let mut media = str_or_list(obj.get("image"), "image")?;
    media.extend(str_or_list(obj.get("images"), "images")?);
    media.extend(str_or_list(obj.get("video"), "video")?);
    Ok(media)
}

/// LLaVA-style data often omits placeholders for single-image records; add them
/// to the first human turn when none are present at all.
fn ensure_placeholders(media: &[String], turns: &mut [Turn]) {
    let has_tokens = turns.iter().any(|t| t.text.contains(IMAGE_TOKEN) || t.text.contains(VIDEO_TOKEN));
    if media.is_empty() || has_tokens {
        return;
    }
    if let Some(first) = turns.iter_mut().find(|t| t.role == Role::Human) {
        let mut prefix = String::new();
        for m in media {
            prefix.push_str(match MediaKind::of(m) {
                MediaKind::Image => IMAGE_TOKEN,
                MediaKind::Video => VIDEO_TOKEN,
            });
            prefix.push('\n');
        }
        first.text = format!("{prefix}{}", first.text);
    }
}

impl RecordFormat for LlavaJsonl {
    fn parse(&self, value: Value) -> Result<RawRecord, String> {
        let obj = value.as_object().ok_or("record is not a JSON object")?;
        let convs = obj
            .get("conversations")
            .ok_or("missing field `conversations`")?
            .as_array()
            .ok_or("field `conversations` must be a list")?;
        let mut turns = Vec::with_capacity(convs.len());
        for (i, c) in convs.iter().enumerate() {
            let from = c.get("from").and_then(Value::as_str).ok_or(format!("turn {i}: missing field `from`"))?;
            let text = c.get("value").and_then(Value::as_str).ok_or(format!("turn {i}: missing field `value`"))?;
            let role = match from {
                "human" | "user" => Role::Human,
                "gpt" | "assistant" | "model" => Role::Assistant,
                other => return Err(format!("turn {i}: unknown speaker `{other}`")),
            };
            turns.push(Turn { role, text: text.to_string() });
        }
        let media = media_of(obj)?;
        ensure_placeholders(&media, &mut turns);
        Ok(RawRecord { record_id: record_id(obj), media, turns })
    }
}

impl RecordFormat for PairsJsonl {
    fn parse(&self, value: Value) -> Result<RawRecord, String> {
        let obj = value.as_object().ok_or("record is not a JSON object")?;
        let question = obj.get("question").and_then(Value::as_str).ok_or("missing field `question`")?;
        let answer = obj.get("answer").and_then(Value::as_str).ok_or("missing field `answer`")?;
        let media = media_of(obj)?;
        let mut turns = vec![Turn::human(question), Turn::assistant(answer)];
        ensure_placeholders(&media, &mut turns);
        Ok(RawRecord { record_id: record_id(obj), media, turns })
    }
}

/// Format tag → parser. Starts with `llava_jsonl` and `pairs_jsonl`.
pub struct FormatRegistry {
    formats: HashMap<String, Box<dyn RecordFormat>>,
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut reg = FormatRegistry { formats: HashMap::new() };
        reg.register("llava_jsonl", LlavaJsonl);
        reg.register("pairs_jsonl", PairsJsonl);
        reg
    }
}

impl FormatRegistry {
    pub fn register(&mut self, tag: &str, format: impl RecordFormat + 'static) {
        self.formats.insert(tag.to_string(), Box::new(format));
    }

    pub fn get(&self, tag: &str) -> Option<&dyn RecordFormat> {
        self.formats.get(tag).map(|f| f.as_ref())
    }
}

/// Streaming reader over one source. Yields samples in file order.
pub struct SourceReader<'a> {
    spec: SourceSpec,
    format: &'a dyn RecordFormat,
    files: std::vec::IntoIter<PathBuf>,
    current: Option<(PathBuf, Lines<BufReader<File>>, usize)>,
    multi_file: bool,
}

impl<'a> SourceReader<'a> {
    fn open_next(&mut self) -> Option<Result<(), RecordError>> {
        let path = self.files.next()?;
        match File::open(&path) {
            Ok(f) => {
                self.current = Some((path, BufReader::new(f).lines(), 0));
                Some(Ok(()))
            }
            Err(e) => Some(Err(RecordError { file: path, line: 0, message: e.to_string() })),
        }
    }

    fn build(&self, file: &Path, line: usize, raw: RawRecord) -> Result<Sample, String> {
        let key = match (&raw.record_id, self.multi_file) {
            (Some(id), _) => id.clone(),
            (None, false) => line.to_string(),
            (None, true) => format!("{}:{line}", file.file_name().unwrap_or_default().to_string_lossy()),
        };
        let sample = Sample {
            id: original_id(&self.spec.source_id, &key),
            source_id: self.spec.source_id.clone(),
            category: self.spec.category,
            media: raw.media,
            turns: raw.turns,
            provenance: Provenance::Original,
            parent_id: None,
            extra: Default::default(),
        };
        let violations = validate_sample(&sample);
        if violations.is_empty() {
            Ok(sample)
        } else {
            Err(format!("invalid sample: {}", violations.join("; ")))
        }
    }
}

impl Iterator for SourceReader<'_> {
    type Item = Result<Sample, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.current.is_none() {
                match self.open_next()? {
                    Ok(()) => {}
                    Err(e) => return Some(Err(e)),
                }
            }
            let (path, lines, lineno) = self.current.as_mut().expect("file opened above");
            match lines.next() {
                None => {
                    self.current = None;
                }
                Some(Err(e)) => {
                    *lineno += 1;
                    let err = RecordError { file: path.clone(), line: *lineno, message: e.to_string() };
                    return Some(Err(err));
                }
                Some(Ok(text)) => {
                    *lineno += 1;
                    if text.trim().is_empty() {
                        continue;
                    }
                    let line = *lineno;
                    let path = path.clone();
                    let result = serde_json::from_str::<Value>(&text)
                        .map_err(|e| format!("malformed JSON: {e}"))
                        .and_then(|v| self.format.parse(v))
                        .and_then(|raw| self.build(&path, line, raw))
                        .map_err(|message| RecordError { file: path, line, message });
                    return Some(result);
                }
            }
        }
    }
}

/// Opens a source for streaming. Fails if the path is unreadable or the
/// format is unknown; per-record problems surface as `Err` items.
pub fn read_source<'a>(spec: &SourceSpec, formats: &'a FormatRegistry) -> Result<SourceReader<'a>, IngestError> {
    let format = formats
        .get(&spec.format_tag)
        .ok_or_else(|| IngestError::UnsupportedFormat(spec.format_tag.clone()))?;
    let unreadable = |cause| IngestError::Unreadable {
        source_id: spec.source_id.clone(),
        path: spec.root_path.clone(),
        cause,
    };
    let meta = fs::metadata(&spec.root_path).map_err(unreadable)?;
    let files = if meta.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&spec.root_path)
            .map_err(unreadable)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        files
    } else {
        File::open(&spec.root_path).map_err(unreadable)?;
        vec![spec.root_path.clone()]
    };
    Ok(SourceReader {
        spec: spec.clone(),
        format,
        multi_file: files.len() > 1,
        files: files.into_iter(),
        current: None,
    })
}

/// Uniform draw of up to `n` valid records without replacement (reservoir
/// sampling), returned in file order. Deterministic for a fixed seed.
pub fn sample_for_screening(
    spec: &SourceSpec,
    formats: &FormatRegistry,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>, IngestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, Sample)> = Vec::with_capacity(n.min(4096));
    let mut seen = 0usize;
    for item in read_source(spec, formats)? {
        let sample = match item {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(%e, "skipping malformed record during screening");
                continue;
            }
        };
        if reservoir.len() < n {
            reservoir.push((seen, sample));
        } else {
            let j = rng.random_range(0..=seen);
            if j < n {
                reservoir[j] = (seen, sample);
            }
        }
        seen += 1;
    }
    reservoir.sort_by_key(|(i, _)| *i);
    Ok(reservoir.into_iter().map(|(_, s)| s).collect())
}

pub fn write_samples<'a, I>(path: &Path, samples: I) -> Result<usize, IngestError>
where
    I: IntoIterator<Item = &'a Sample>,
{
    Ok(jsonl::write_all(path, samples)?)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, IngestError> {
    if !path.exists() {
        return Err(IngestError::Jsonl(JsonlError::io(
            path,
            io::Error::new(io::ErrorKind::NotFound, "no such file"),
        )));
    }
    Ok(jsonl::read_all(path)?)
}

/// Loads a registry file (JSON array of [`SourceSpec`]); relative root paths
/// resolve against the registry file's directory.
pub fn load_registry(path: &Path) -> Result<Vec<SourceSpec>, IngestError> {
    let mut specs: Vec<SourceSpec> = jsonl::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::HashSet::new();
    for spec in &mut specs {
        if !seen.insert(spec.source_id.clone()) {
            return Err(IngestError::Registry(format!("duplicate source_id `{}`", spec.source_id)));
        }
        if spec.root_path.is_relative() {
            spec.root_path = base.join(&spec.root_path);
        }
        if !spec.root_path.exists() {
            return Err(IngestError::Registry(format!(
                "source `{}`: root_path {} does not exist",
                spec.source_id,
                spec.root_path.display()
            )));
        }
    }
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: u32,
    pub height: u32,
}

impl ImageGeometry {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "image geometry must be at least 1x1");
        Self { width, height }
    }

    fn min_side(self) -> u32 {
        self.width.min(self.height)
    }

    fn max_side(self) -> u32 {
        self.width.max(self.height)
    }

    pub fn within_bounds(self) -> bool {
        (MIN_SIDE..=MAX_SIDE).contains(&self.width)
            && (MIN_SIDE..=MAX_SIDE).contains(&self.height)
            && self.max_side() <= MAX_ASPECT * self.min_side()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeAction {
    None,
    Upscale,
    Downscale,
    PadWidth,
    PadHeight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardizationReport {
    pub input: ImageGeometry,
    pub output: ImageGeometry,
    /// Size of the scaled image before padding.
    pub scaled: ImageGeometry,
    pub actions: Vec<StandardizeAction>,
}

fn scale_side(side: u32, factor: f64) -> u32 {
    ((side as f64 * factor).round() as u32).max(1)
}

/// Brings both sides into [224, 4096] with one uniform scale factor, then pads
/// the short side if the aspect ratio still exceeds 7:1.
///
/// Downscaling pins the long side at 4096. Upscaling targets a short side of
/// 224 but never pushes the long side past 4096; whenever that cap binds the
/// ratio is above 18:1, so the padding step lifts the short side to
/// `ceil(long / 7)`, which is at least 224 there.
pub fn standardize_geometry(g: ImageGeometry) -> StandardizationReport {
    let mut actions = Vec::new();
    let (w, h) = (g.width, g.height);
    let (long, short) = (g.max_side(), g.min_side());

    let scaled = if long > MAX_SIDE {
        actions.push(StandardizeAction::Downscale);
        let factor = MAX_SIDE as f64 / long as f64;
        if w >= h {
            ImageGeometry { width: MAX_SIDE, height: scale_side(h, factor) }
        } else {
            ImageGeometry { width: scale_side(w, factor), height: MAX_SIDE }
        }
    } else if short < MIN_SIDE {
        actions.push(StandardizeAction::Upscale);
        let up = MIN_SIDE as f64 / short as f64;
        let cap = MAX_SIDE as f64 / long as f64;
        if up <= cap {
            if w <= h {
                ImageGeometry { width: MIN_SIDE, height: scale_side(h, up).min(MAX_SIDE) }
            } else {
                ImageGeometry { width: scale_side(w, up).min(MAX_SIDE), height: MIN_SIDE }
            }
        } else if w >= h {
            ImageGeometry { width: MAX_SIDE, height: scale_side(h, cap) }
        } else {
            ImageGeometry { width: scale_side(w, cap), height: MAX_SIDE }
        }
    } else {
        g
    };

    let mut output = scaled;
    let (long, short) = (scaled.max_side(), scaled.min_side());
    if long > MAX_ASPECT * short {
        let target = long.div_ceil(MAX_ASPECT).max(MIN_SIDE);
        if target > MAX_SIDE {
            // Unreachable with the scaling rules above; kept as a guard.
            tracing::warn!(?g, "padding capped at {MAX_SIDE}");
        }
        let target = target.min(MAX_SIDE);
        if scaled.width < scaled.height {
            actions.push(StandardizeAction::PadWidth);
            output.width = target;
        } else {
            actions.push(StandardizeAction::PadHeight);
            output.height = target;
        }
    }

    if actions.is_empty() {
        actions.push(StandardizeAction::None);
    }
    StandardizationReport { input: g, output, scaled, actions }
}

/// Standardizes an image file into `dst`. Images already within bounds are
/// copied byte-for-byte. Padding is solid white and centred.
pub fn standardize_image_file(src: &Path, dst: &Path) -> Result<StandardizationReport, IngestError> {
    let img_err = |cause: String| IngestError::Image { path: src.to_path_buf(), cause };
    let (w, h) = image::image_dimensions(src).map_err(|e| img_err(e.to_string()))?;
    let report = standardize_geometry(ImageGeometry::new(w, h));
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(|e| img_err(e.to_string()))?;
    }
    if report.actions == [StandardizeAction::None] {
        fs::copy(src, dst).map_err(|e| img_err(e.to_string()))?;
        return Ok(report);
    }
    let img = image::open(src).map_err(|e| img_err(e.to_string()))?.to_rgb8();
    let scaled = if report.scaled != report.input {
        image::imageops::resize(
            &img,
            report.scaled.width,
            report.scaled.height,
            image::imageops::FilterType::CatmullRom,
        )
    } else {
        img
    };
    let out = if report.output != report.scaled {
        let mut canvas = image::RgbImage::from_pixel(
            report.output.width,
            report.output.height,
            image::Rgb([255, 255, 255]),
        );
        let x = (report.output.width - report.scaled.width) / 2;
        let y = (report.output.height - report.scaled.height) / 2;
        image::imageops::overlay(&mut canvas, &scaled, x as i64, y as i64);
        canvas
    } else {
        scaled
    };
    out.save(dst).map_err(|e| IngestError::Image { path: dst.to_path_buf(), cause: e.to_string() })?;
    Ok(report)
}
