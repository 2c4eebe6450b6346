//! Stage orchestration over a [`RunConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::ScoreRecord;
use crate::config::{ConfigError, Layout, OriginalPool, RunConfig};
use crate::corpus::{Category, Sample, ScreeningGroup, SourceSpec};
use crate::filter::{judge_sample, score_sample, JudgeVerdict, ReviewContext};
use crate::ingest::{self, FormatRegistry, IngestError, StandardizeAction};
use crate::inference::{Endpoint, EndpointSet, InferenceError, MediaLoader};
use crate::jsonl::{self, JsonlError};
use crate::mixer::{export_manifest, mix, MixError};
use crate::parse::Verdict;
use crate::prompts::{builtin_registry, template_id_for, PromptError, PromptRegistry, PromptStage};
use crate::rewrite::{rewrite_sample, RewriteContext, RewriteOutcome, RewriteStatus};
use crate::stage::{input_hash, Stage, StageError, StageOptions};
use crate::store::{RecordStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0} not found; run `{1}` first")]
    MissingInput(String, &'static str),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub group_a: usize,
    pub group_b: usize,
    /// Sources in Group C or not yet screened.
    pub skipped_sources: Vec<String>,
    pub record_errors: usize,
    pub images_standardized: usize,
    pub images_changed: usize,
    pub image_errors: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub ok: usize,
    pub failed: usize,
    pub skipped: usize,
    pub emitted: usize,
    pub resumed: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub judged: usize,
    pub kept: usize,
    pub discarded: usize,
    pub flagged: usize,
    pub resumed: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreStageReport {
    pub scored: usize,
    pub missing: usize,
    pub resumed: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSummary {
    pub plan: String,
    pub n_rewritten: usize,
    pub n_original: usize,
    pub path: String,
}

/// Planned work of a rewrite run, per category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePlan {
    pub per_category: BTreeMap<Category, usize>,
    pub not_rewritable: usize,
    pub pending: usize,
    pub already_done: usize,
}

pub struct Pipeline {
    cfg: RunConfig,
    layout: Layout,
    formats: FormatRegistry,
    prompts: PromptRegistry,
    endpoints: Option<EndpointSet>,
}

impl Pipeline {
    /// Builds endpoints from the configuration.
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        let endpoints = cfg
            .endpoints
            .iter()
            .map(|e| Endpoint::from_config(e.clone(), Path::new("")).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Self::with_endpoints(cfg, EndpointSet::new(endpoints))
    }

    /// Uses caller-supplied endpoints, e.g. instrumented mocks.
    pub fn with_endpoints(cfg: RunConfig, endpoints: EndpointSet) -> Result<Self, PipelineError> {
        let mut prompts = builtin_registry();
        if let Some(dir) = &cfg.template_dir {
            prompts = prompts.with_overrides(dir)?;
        }
        Ok(Self {
            layout: cfg.layout(),
            formats: FormatRegistry::default(),
            prompts,
            endpoints: Some(endpoints),
            cfg,
        })
    }

    /// Without any model endpoint: ingest, screening, mixing and reports only.
    pub fn offline(cfg: RunConfig) -> Result<Self, PipelineError> {
        let mut p = Self::with_endpoints(cfg, EndpointSet::new(Vec::new()))?;
        p.endpoints = None;
        Ok(p)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn prompts(&self) -> &PromptRegistry {
        &self.prompts
    }

    fn endpoints(&self) -> Result<&EndpointSet, PipelineError> {
        self.endpoints
            .as_ref()
            .ok_or_else(|| InferenceError::Config("no endpoints configured".into()).into())
    }

    pub fn group_store(&self) -> RecordStore {
        RecordStore::open(&self.layout.groups())
    }

    /// Registry entries with groups from the screening store applied over
    /// the registry's own.
    pub fn sources(&self) -> Result<Vec<SourceSpec>, PipelineError> {
        let mut specs = ingest::load_registry(&self.cfg.registry)?;
        let groups = self.group_store().groups()?;
        for s in &mut specs {
            if let Some(g) = groups.get(&s.source_id) {
                s.group = Some(*g);
            }
        }
        Ok(specs)
    }

    pub fn source(&self, source_id: &str) -> Result<SourceSpec, PipelineError> {
        self.sources()?
            .into_iter()
            .find(|s| s.source_id == source_id)
            .ok_or_else(|| PipelineError::UnknownSource(source_id.to_string()))
    }

    /// A seeded screening batch from one source.
    pub fn screen(&self, source_id: &str, n: usize, seed: u64) -> Result<Vec<Sample>, PipelineError> {
        let spec = self.source(source_id)?;
        Ok(ingest::sample_for_screening(&spec, &self.formats, n, seed)?)
    }

    /// Reads Group A and B sources into `group_a.jsonl` / `group_b.jsonl`,
    /// sorted by id. Group C and unscreened sources are not read.
    pub fn ingest(&self) -> Result<IngestReport, PipelineError> {
        let mut report = IngestReport::default();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for spec in self.sources()? {
            let target = match spec.group {
                Some(ScreeningGroup::A) => &mut a,
                Some(ScreeningGroup::B) => &mut b,
                _ => {
                    report.skipped_sources.push(spec.source_id.clone());
                    continue;
                }
            };
            for item in ingest::read_source(&spec, &self.formats)? {
                match item {
                    Ok(s) => target.push(s),
                    Err(e) => {
                        tracing::warn!(%e, "skipping record");
                        report.record_errors += 1;
                    }
                }
            }
        }
        for v in [&mut a, &mut b] {
            v.sort_by(|x, y| x.id.cmp(&y.id));
            v.dedup_by(|x, y| x.id == y.id);
        }
        if self.cfg.standardize_images {
            self.standardize(a.iter().chain(&b), &mut report);
        }
        report.group_a = ingest::write_samples(&self.layout.group_a(), &a)?;
        report.group_b = ingest::write_samples(&self.layout.group_b(), &b)?;
        Ok(report)
    }

    fn standardize<'a>(&self, samples: impl Iterator<Item = &'a Sample>, report: &mut IngestReport) {
        let Some(root) = &self.cfg.media_root else {
            tracing::warn!("standardize_images is set but media_root is not; skipping");
            return;
        };
        let media: BTreeSet<&str> = samples.flat_map(|s| s.image_refs()).collect();
        let out = self.layout.media_dir();
        for rel in media {
            let dst = out.join(rel);
            if dst.exists() {
                report.images_standardized += 1;
                continue;
            }
            match ingest::standardize_image_file(&root.join(rel), &dst) {
                Ok(r) => {
                    report.images_standardized += 1;
                    if r.actions.iter().any(|a| *a != StandardizeAction::None) {
                        report.images_changed += 1;
                    }
                }
                Err(e) => {
                    tracing::warn!(%e, "image standardization failed");
                    report.image_errors += 1;
                }
            }
        }
    }

    fn read_required(&self, path: &Path, stage: &'static str) -> Result<Vec<Sample>, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(path.display().to_string(), stage));
        }
        Ok(ingest::read_samples(path)?)
    }

    fn media(&self) -> MediaLoader {
        MediaLoader::new(self.cfg.effective_media_root())
    }

    fn rewrite_stage(&self) -> Stage {
        Stage::new(&self.layout.samples_dir(), "rewrite")
    }

    pub fn plan_rewrite(&self) -> Result<RewritePlan, PipelineError> {
        let input = self.read_required(&self.layout.group_b(), "ingest")?;
        let stage = self.rewrite_stage();
        let done: BTreeSet<String> = match stage.read_manifest()? {
            Some(m) if m.input_hash == input_hash(&input) => m.done_ids.into_iter().collect(),
            _ => BTreeSet::new(),
        };
        let mut plan = RewritePlan::default();
        for s in &input {
            if done.contains(&s.id) {
                plan.already_done += 1;
            } else if template_id_for(PromptStage::Rewrite, s.category).is_err() {
                plan.not_rewritable += 1;
            } else {
                *plan.per_category.entry(s.category).or_default() += 1;
                plan.pending += 1;
            }
        }
        Ok(plan)
    }

    /// Rewrites Group B. Final files are written once every sample is done.
    pub async fn rewrite(&self, opts: StageOptions) -> Result<RewriteReport, PipelineError> {
        let input = self.read_required(&self.layout.group_b(), "ingest")?;
        let hash = input_hash(&input);
        let categories: BTreeSet<Category> = input.iter().map(|s| s.category).collect();
        for c in categories {
            if template_id_for(PromptStage::Rewrite, c).is_ok() {
                self.endpoints()?.route(c)?;
            }
        }
        let ctx = RewriteContext {
            prompts: self.prompts.clone(),
            endpoints: self.endpoints()?.clone(),
            media: self.media(),
            pair_num: self.cfg.pair_num,
        };
        let ctx = &ctx;
        let run = self
            .rewrite_stage()
            .run(input, |s| s.id.clone(), &hash, opts, |s: Sample| async move {
                rewrite_sample(ctx, &s).await.map_err(|e| e.to_string())
            })
            .await?;

        let mut report = RewriteReport { resumed: run.resumed, complete: run.complete, ..Default::default() };
        for o in &run.outcomes {
            match o.status {
                RewriteStatus::Ok => report.ok += 1,
                RewriteStatus::SkippedNotRewritable => report.skipped += 1,
                _ => report.failed += 1,
            }
        }
        if run.complete {
            let mut rewritten: Vec<&Sample> = run.outcomes.iter().flat_map(|o| &o.samples).collect();
            rewritten.sort_by(|x, y| x.id.cmp(&y.id));
            report.emitted = ingest::write_samples(&self.layout.rewritten(), rewritten)?;
            let failed: Vec<RewriteOutcome> = run
                .outcomes
                .iter()
                .filter(|o| o.status != RewriteStatus::Ok)
                .cloned()
                .collect();
            jsonl::write_all(&self.layout.rewrite_failed(), &failed)?;
        }
        Ok(report)
    }

    /// Judges every rewritten sample; kept ones go to `filtered.jsonl`.
    pub async fn judge(&self, opts: StageOptions) -> Result<JudgeReport, PipelineError> {
        let input = self.read_required(&self.layout.rewritten(), "rewrite")?;
        let hash = input_hash(&input);
        let endpoint = self.endpoints()?.multimodal()?.clone();
        let media = self.media();
        let ctx = ReviewContext { endpoint: &endpoint, prompts: &self.prompts, media: &media };
        let by_id: BTreeMap<String, Sample> = input.iter().map(|s| (s.id.clone(), s.clone())).collect();
        let run = Stage::new(&self.layout.verdicts_dir(), "judge")
            .run(input, |s| s.id.clone(), &hash, opts, |s: Sample| async move {
                judge_sample(ctx, &s).await.map_err(|e| e.to_string())
            })
            .await?;

        let mut report = JudgeReport { resumed: run.resumed, complete: run.complete, ..Default::default() };
        for v in &run.outcomes {
            report.judged += 1;
            if v.verdict == Verdict::Keep {
                report.kept += 1;
            } else {
                report.discarded += 1;
            }
            report.flagged += v.flagged as usize;
        }
        if run.complete {
            jsonl::write_all(&self.layout.verdicts(), &run.outcomes)?;
            let kept = run.outcomes.iter().filter(|v| v.verdict == Verdict::Keep).map(|v| &by_id[&v.sample_id]);
            ingest::write_samples(&self.layout.filtered(), kept)?;
        }
        Ok(report)
    }

    fn rewritten_pool(&self) -> Result<Vec<Sample>, PipelineError> {
        if self.cfg.stages.judge {
            self.read_required(&self.layout.filtered(), "judge")
        } else {
            self.read_required(&self.layout.rewritten(), "rewrite")
        }
    }

    /// Scores originals and rewrites, optionally a seeded subset of each.
    pub async fn score(&self, opts: StageOptions) -> Result<ScoreStageReport, PipelineError> {
        let originals = self.read_required(&self.layout.group_b(), "ingest")?;
        let rewrites = self.rewritten_pool()?;
        let mut input = Vec::new();
        for (i, pool) in [originals, rewrites].into_iter().enumerate() {
            input.extend(self.subsample(pool, self.cfg.seed.wrapping_add(i as u64)));
        }
        input.sort_by(|x, y| x.id.cmp(&y.id));
        let hash = input_hash(&input);
        let endpoint = self.endpoints()?.multimodal()?.clone();
        let media = self.media();
        let ctx = ReviewContext { endpoint: &endpoint, prompts: &self.prompts, media: &media };
        let run = Stage::new(&self.layout.scores_dir(), "score")
            .run(input, |s| s.id.clone(), &hash, opts, |s: Sample| async move {
                score_sample(ctx, &s).await.map_err(|e| e.to_string())
            })
            .await?;
        let missing = run.outcomes.iter().filter(|r: &&ScoreRecord| r.score.is_none()).count();
        if run.complete {
            jsonl::write_all(&self.layout.scores(), &run.outcomes)?;
        }
        Ok(ScoreStageReport {
            scored: run.outcomes.len() - missing,
            missing,
            resumed: run.resumed,
            complete: run.complete,
        })
    }

    fn subsample(&self, mut pool: Vec<Sample>, seed: u64) -> Vec<Sample> {
        let Some(n) = self.cfg.score_sample_size.filter(|n| *n < pool.len()) else { return pool };
        pool.sort_by(|x, y| x.id.cmp(&y.id));
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        pool.truncate(n);
        pool
    }

    /// Writes one manifest per configured plan.
    pub fn mix(&self) -> Result<Vec<MixSummary>, PipelineError> {
        let mut originals = self.read_required(&self.layout.group_b(), "ingest")?;
        if self.cfg.original_pool == OriginalPool::GroupAAndB {
            originals.extend(self.read_required(&self.layout.group_a(), "ingest")?);
        }
        let rewrites = self.rewritten_pool()?;
        let store: Vec<Sample> = originals.iter().chain(&rewrites).cloned().collect();
        let mut out = Vec::new();
        for plan in &self.cfg.mix_plans {
            let result = mix(&originals, &rewrites, plan, self.cfg.seed)?;
            let path = self.layout.manifest(&plan.name);
            export_manifest(&result.ids, &store, &path)?;
            out.push(MixSummary {
                plan: plan.name.clone(),
                n_rewritten: result.n_rewritten,
                n_original: result.n_original,
                path: path.display().to_string(),
            });
        }
        Ok(out)
    }

    /// Reads the final verdict log, if judging has completed.
    pub fn verdicts(&self) -> Result<Vec<JudgeVerdict>, PipelineError> {
        Ok(crate::reports::verdicts(&self.layout)?)
    }
}
