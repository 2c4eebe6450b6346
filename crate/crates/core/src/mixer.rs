//! Seeded ratio mixing of original and rewritten pools into training manifests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, Sample};
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryBound {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub name: String,
    pub rewritten_fraction: f64,
    pub total: usize,
    /// Falls back to the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Share of the manifest each category must (min) or may (max) take.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub category_constraints: BTreeMap<Category, CategoryBound>,
}

impl MixPlan {
    pub fn new(name: &str, rewritten_fraction: f64, total: usize) -> Self {
        Self { name: name.into(), rewritten_fraction, total, seed: None, category_constraints: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<(), MixError> {
        if !(0.0..=1.0).contains(&self.rewritten_fraction) {
            return Err(MixError::InvalidPlan(format!(
                "{}: rewritten_fraction {} outside [0, 1]",
                self.name, self.rewritten_fraction
            )));
        }
        for (c, b) in &self.category_constraints {
            let ok = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
            if !ok(b.min) || !ok(b.max) || matches!((b.min, b.max), (Some(lo), Some(hi)) if lo > hi) {
                return Err(MixError::InvalidPlan(format!("{}: bad bounds for {c}", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixError {
    #[error("invalid mix plan: {0}")]
    InvalidPlan(String),
    #[error("{pool} pool too small: need {needed}, have {available} (short by {})", needed - available)]
    InsufficientPool { pool: &'static str, needed: usize, available: usize },
    #[error("pools overlap on id {0}")]
    Overlap(String),
    #[error("category constraints cannot be met: {0}")]
    Constraint(String),
    #[error("duplicate id in manifest: {0}")]
    Duplicate(String),
    #[error("unresolved ids: {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error("{0}")]
    Io(String),
}

impl From<JsonlError> for MixError {
    fn from(e: JsonlError) -> Self {
        MixError::Io(e.to_string())
    }
}

/// `(rewritten, original)` counts: round-half-up of `total * fraction`.
/// The product is first rounded to nine decimals so binary noise such as
/// `10 * 0.7 = 7.000000000000001` cannot move the result.
pub fn split_counts(total: usize, fraction: f64) -> (usize, usize) {
    let exact = ((total as f64 * fraction) * 1e9).round() / 1e9;
    let n_rw = ((exact + 0.5).floor() as usize).min(total);
    (n_rw, total - n_rw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixResult {
    pub plan: String,
    pub seed: u64,
    pub n_rewritten: usize,
    pub n_original: usize,
    /// Manifest order.
    pub ids: Vec<String>,
}

fn bounds(plan: &MixPlan) -> (BTreeMap<Category, usize>, BTreeMap<Category, usize>) {
    let total = plan.total as f64;
    let mut mins = BTreeMap::new();
    let mut maxs = BTreeMap::new();
    for (c, b) in &plan.category_constraints {
        if let Some(lo) = b.min {
            mins.insert(*c, (lo * total - 1e-9).ceil().max(0.0) as usize);
        }
        if let Some(hi) = b.max {
            maxs.insert(*c, (hi * total + 1e-9).floor() as usize);
        }
    }
    (mins, maxs)
}

/// Uniform sampling without replacement from each pool, then a seeded shuffle
/// of the union. Pools are sorted by id first, so caller order is irrelevant.
/// Category constraints are met greedily: minimums first, then the remaining
/// quota in shuffled order skipping categories at their maximum.
pub fn mix(originals: &[Sample], rewrites: &[Sample], plan: &MixPlan, fallback_seed: u64) -> Result<MixResult, MixError> {
    plan.validate()?;
    let seed = plan.seed.unwrap_or(fallback_seed);
    let (n_rw, n_or) = split_counts(plan.total, plan.rewritten_fraction);
    for (pool, needed, available) in [("rewritten", n_rw, rewrites.len()), ("original", n_or, originals.len())] {
        if needed > available {
            return Err(MixError::InsufficientPool { pool, needed, available });
        }
    }
    let rw_ids: BTreeSet<&str> = rewrites.iter().map(|s| s.id.as_str()).collect();
    if let Some(dup) = originals.iter().find(|s| rw_ids.contains(s.id.as_str())) {
        return Err(MixError::Overlap(dup.id.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<&Sample>> = [rewrites, originals]
        .into_iter()
        .map(|p| {
            let mut v: Vec<&Sample> = p.iter().collect();
            v.sort_by(|a, b| a.id.cmp(&b.id));
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let quotas = [n_rw, n_or];

    let mut chosen: Vec<Vec<&Sample>> = vec![Vec::new(), Vec::new()];
    if plan.category_constraints.is_empty() {
        for (i, pool) in pools.iter_mut().enumerate() {
            chosen[i] = pool.drain(..quotas[i]).collect();
        }
    } else {
        let (mins, maxs) = bounds(plan);
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        for (cat, need) in &mins {
            for _ in 0..*need {
                let slot = (0..2).find(|&i| chosen[i].len() < quotas[i] && pools[i].iter().any(|s| s.category == *cat));
                let Some(i) = slot else {
                    return Err(MixError::Constraint(format!("{cat} needs {need} samples")));
                };
                let pos = pools[i].iter().position(|s| s.category == *cat).expect("checked above");
                chosen[i].push(pools[i].remove(pos));
                *counts.entry(*cat).or_default() += 1;
            }
        }
        for i in 0..2 {
            for s in std::mem::take(&mut pools[i]) {
                let at_max = maxs.get(&s.category).is_some_and(|m| counts.get(&s.category).copied().unwrap_or(0) >= *m);
                if chosen[i].len() < quotas[i] && !at_max {
                    *counts.entry(s.category).or_default() += 1;
                    chosen[i].push(s);
                }
            }
            if chosen[i].len() < quotas[i] {
                return Err(MixError::Constraint(format!(
                    "only {} of {} {} samples fit the maximums",
                    chosen[i].len(),
                    quotas[i],
                    if i == 0 { "rewritten" } else { "original" }
                )));
            }
        }
        if let Some((cat, max)) = maxs.iter().find(|(c, m)| counts.get(c).copied().unwrap_or(0) > **m) {
            return Err(MixError::Constraint(format!("minimums push {cat} past its maximum {max}")));
        }
    }

    let mut ids: Vec<String> = chosen.iter().flatten().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut rng);
    Ok(MixResult { plan: plan.name.clone(), seed, n_rewritten: n_rw, n_original: n_or, ids })
}

/// Writes the samples named by `ids`, in order, as a JSONL manifest.
pub fn export_manifest(ids: &[String], store: &[Sample], path: &Path) -> Result<usize, MixError> {
    let index: HashMap<&str, &Sample> = store.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(MixError::Duplicate(id.clone()));
        }
    }
    let missing: Vec<String> = ids.iter().filter(|id| !index.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        return Err(MixError::Unresolved(missing));
    }
    Ok(jsonl::write_all(path, ids.iter().map(|id| index[id.as_str()]))?)
}
