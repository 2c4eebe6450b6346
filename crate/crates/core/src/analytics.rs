//! Quality-score aggregation, token-length distributions and rater agreement.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Provenance, Sample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label vectors are empty")]
    Empty,
    #[error("degenerate agreement: p_e = 1 but p_o = {0}")]
    Degenerate(f64),
    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),
    #[error("insufficient raters: {0}")]
    InsufficientRaters(String),
    #[error("bucket width must be positive")]
    ZeroBucket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityScore {
    pub content: u8,
    pub relevance: u8,
}

impl QualityScore {
    pub fn new(content: u8, relevance: u8) -> Option<Self> {
        ((1..=5).contains(&content) && (1..=5).contains(&relevance)).then_some(Self { content, relevance })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaComputation {
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub kappa: f64,
}

/// Cohen's kappa between two raters over the same items.
///
/// When both raters use one identical label throughout, chance agreement is 1
/// and kappa is defined as 1.
pub fn cohens_kappa<L: Eq + Hash>(a: &[L], b: &[L]) -> Result<KappaComputation, AnalyticsError> {
    if a.len() != b.len() {
        return Err(AnalyticsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let n = a.len() as f64;
    let mut margins: HashMap<&L, (usize, usize)> = HashMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        margins.entry(x).or_default().0 += 1;
        margins.entry(y).or_default().1 += 1;
        if x == y {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    // Integer products keep p_e exact up to one final division.
    let expected: u128 = margins.values().map(|&(ca, cb)| ca as u128 * cb as u128).sum();
    let total = (a.len() as u128) * (a.len() as u128);
    if expected == total {
        if agree == a.len() {
            return Ok(KappaComputation { observed_agreement: 1.0, expected_agreement: 1.0, kappa: 1.0 });
        }
        return Err(AnalyticsError::Degenerate(p_o));
    }
    let p_e = expected as f64 / total as f64;
    Ok(KappaComputation { observed_agreement: p_o, expected_agreement: p_e, kappa: (p_o - p_e) / (1.0 - p_e) })
}

/// Symmetric pairwise kappa table; diagonal and pairs without shared items are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub raters: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl AgreementMatrix {
    pub fn new(raters: Vec<String>) -> Self {
        let n = raters.len();
        Self { raters, values: vec![vec![None; n]; n] }
    }

    fn index(&self, rater: &str) -> Option<usize> {
        self.raters.iter().position(|r| r == rater)
    }

    pub fn set(&mut self, a: &str, b: &str, kappa: f64) {
        let (i, j) = (self.index(a).expect("known rater"), self.index(b).expect("known rater"));
        assert_ne!(i, j, "diagonal is undefined");
        self.values[i][j] = Some(kappa);
        self.values[j][i] = Some(kappa);
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        self.values[self.index(a)?][self.index(b)?]
    }

    /// Pairwise kappa over the items each pair of raters both labelled.
    pub fn from_labels<L: Eq + Hash>(labels: &BTreeMap<String, BTreeMap<String, L>>) -> Self {
        let raters: Vec<String> = labels.keys().cloned().collect();
        let mut m = AgreementMatrix::new(raters.clone());
        for (i, ra) in raters.iter().enumerate() {
            for rb in &raters[i + 1..] {
                let (la, lb) = (&labels[ra], &labels[rb]);
                let (xs, ys): (Vec<&L>, Vec<&L>) =
                    la.iter().filter_map(|(item, x)| lb.get(item).map(|y| (x, y))).unzip();
                if let Ok(k) = cohens_kappa(&xs, &ys) {
                    m.set(ra, rb, k.kappa);
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionAnalysis {
    pub human_mean: f64,
    pub substituted_mean: f64,
}

fn mean_pairwise(m: &AgreementMatrix, raters: &[&str]) -> Result<f64, AnalyticsError> {
    let mut values = Vec::new();
    for (i, a) in raters.iter().enumerate() {
        for b in &raters[i + 1..] {
            values.push(
                m.get(a, b)
                    .ok_or_else(|| AnalyticsError::InsufficientRaters(format!("no kappa for {a}/{b}")))?,
            );
        }
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean human-human kappa, and the mean over "replace one human by the model"
/// rater sets of each set's mean pairwise kappa.
pub fn substitution_analysis(
    m: &AgreementMatrix,
    model_id: &str,
    human_ids: &[&str],
) -> Result<SubstitutionAnalysis, AnalyticsError> {
    if human_ids.len() < 2 {
        return Err(AnalyticsError::InsufficientRaters("need at least two human raters".into()));
    }
    for id in human_ids.iter().chain([&model_id]) {
        if m.index(id).is_none() {
            return Err(AnalyticsError::InsufficientRaters(format!("rater `{id}` not in matrix")));
        }
    }
    let human_mean = mean_pairwise(m, human_ids)?;
    let mut set_means = Vec::with_capacity(human_ids.len());
    for replaced in human_ids {
        let raters: Vec<&str> =
            std::iter::once(model_id).chain(human_ids.iter().copied().filter(|h| h != replaced)).collect();
        set_means.push(mean_pairwise(m, &raters)?);
    }
    let substituted_mean = set_means.iter().sum::<f64>() / set_means.len() as f64;
    Ok(SubstitutionAnalysis { human_mean, substituted_mean })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Whitespace-delimited words.
    #[default]
    Whitespace,
    /// Unicode scalar values, ignoring whitespace.
    Char,
}

impl Tokenizer {
    pub fn tag(self) -> &'static str {
        match self {
            Tokenizer::Whitespace => "whitespace",
            Tokenizer::Char => "char",
        }
    }

    pub fn count(self, text: &str) -> usize {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().count(),
            Tokenizer::Char => text.chars().filter(|c| !c.is_whitespace()).count(),
        }
    }
}

impl FromStr for Tokenizer {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "char" => Ok(Tokenizer::Char),
            other => Err(AnalyticsError::UnknownTokenizer(other.to_string())),
        }
    }
}

/// Instruction + response length of a sample, summed over all turns.
pub fn token_length(s: &Sample, tokenizer_tag: &str) -> Result<usize, AnalyticsError> {
    let tok: Tokenizer = tokenizer_tag.parse()?;
    Ok(s.turns.iter().map(|t| tok.count(&t.text)).sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub bucket_start: usize,
    pub count: usize,
}

/// Dense histogram from 0 up to the bucket holding the largest value.
pub fn histogram(lengths: &[usize], bucket_width: usize) -> Result<Vec<HistogramBucket>, AnalyticsError> {
    if bucket_width == 0 {
        return Err(AnalyticsError::ZeroBucket);
    }
    let Some(&max) = lengths.iter().max() else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0usize; max / bucket_width + 1];
    for &len in lengths {
        counts[len / bucket_width] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBucket { bucket_start: i * bucket_width, count })
        .collect())
}

pub fn histogram_csv(buckets: &[HistogramBucket]) -> String {
    let mut out = String::from("bucket_start,count\n");
    for b in buckets {
        out.push_str(&format!("{},{}\n", b.bucket_start, b.count));
    }
    out
}

/// One score record as persisted by the scoring stage. A missing score means
/// the model's output could not be parsed twice in a row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub source_id: String,
    pub provenance: Provenance,
    pub score: Option<QualityScore>,
    pub attempts: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScore {
    pub content: f64,
    pub relevance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScores {
    pub source_id: String,
    pub original: Option<MeanScore>,
    pub rewritten: Option<MeanScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_source: Vec<SourceScores>,
    /// Mean over all scored samples of each provenance.
    pub original: Option<MeanScore>,
    pub rewritten: Option<MeanScore>,
    pub missing: usize,
}

fn mean_of<'a>(scores: impl Iterator<Item = &'a QualityScore>) -> Option<MeanScore> {
    let (mut c, mut r, mut n) = (0u64, 0u64, 0usize);
    for s in scores {
        c += s.content as u64;
        r += s.relevance as u64;
        n += 1;
    }
    (n > 0).then(|| MeanScore { content: c as f64 / n as f64, relevance: r as f64 / n as f64, count: n })
}

/// Integer sums make the result independent of record order.
pub fn aggregate_scores(records: &[ScoreRecord]) -> ScoreReport {
    let mut by_source: BTreeMap<&str, (Vec<QualityScore>, Vec<QualityScore>)> = BTreeMap::new();
    let mut missing = 0;
    for rec in records {
        let entry = by_source.entry(&rec.source_id).or_default();
        match (rec.score, rec.provenance) {
            (None, _) => missing += 1,
            (Some(s), Provenance::Original) => entry.0.push(s),
            (Some(s), Provenance::Rewritten) => entry.1.push(s),
        }
    }
    let per_source = by_source
        .iter()
        .map(|(src, (o, r))| SourceScores {
            source_id: src.to_string(),
            original: mean_of(o.iter()),
            rewritten: mean_of(r.iter()),
        })
        .collect();
    ScoreReport {
        per_source,
        original: mean_of(by_source.values().flat_map(|(o, _)| o.iter())),
        rewritten: mean_of(by_source.values().flat_map(|(_, r)| r.iter())),
        missing,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub tokenizer: String,
    pub bucket_width: usize,
    pub original: Vec<HistogramBucket>,
    pub rewritten: Vec<HistogramBucket>,
}

pub fn length_report(samples: &[Sample], tokenizer: Tokenizer, bucket_width: usize) -> Result<LengthReport, AnalyticsError> {
    let lengths = |p: Provenance| -> Vec<usize> {
        samples
            .iter()
            .filter(|s| s.provenance == p)
            .map(|s| s.turns.iter().map(|t| tokenizer.count(&t.text)).sum())
            .collect()
    };
    Ok(LengthReport {
        tokenizer: tokenizer.tag().to_string(),
        bucket_width,
        original: histogram(&lengths(Provenance::Original), bucket_width)?,
        rewritten: histogram(&lengths(Provenance::Rewritten), bucket_width)?,
    })
}
