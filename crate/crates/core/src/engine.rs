//! Batch counterfactual generation and Table-style summaries.
//!
//! A run recombines every (target, source, selection) triple, classifies the
//! recombined images and flags those whose label differs from the target's
//! own prediction. Results come out in canonical order: target id, then
//! source id, then selection bitmask, independent of the worker count.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{CohortError, FilterClause};
use crate::evaluate::{evaluate, FidelityReport};
use crate::gateway::{Gateway, GatewayError, PredictRequest, Prediction};
use crate::io::{hex, Dataset, VariableDecl};
use crate::model::{SegmentMap, SegmentSchema, SegmentSelection, Subject, SubjectRecord, Volume};
use crate::morphmix::{recombine, MorphError, RecombinationSpec, RecombinedImage};
use crate::synth::SyntheticDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{0}")]
    Precondition(String),
    #[error("unknown subject ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error(transparent)]
    Morph(#[from] MorphError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

/// Lookup of subjects and their records by id.
pub trait SubjectStore: Sync {
    fn schema(&self) -> &SegmentSchema;
    fn subject(&self, id: &str) -> Option<&Subject>;
    fn record(&self, id: &str) -> Option<&SubjectRecord>;
    fn digest(&self) -> String;
    fn location(&self) -> Option<String> {
        None
    }
}

impl SubjectStore for Dataset {
    fn schema(&self) -> &SegmentSchema {
        Dataset::schema(self)
    }
    fn subject(&self, id: &str) -> Option<&Subject> {
        Dataset::subject(self, id)
    }
    fn record(&self, id: &str) -> Option<&SubjectRecord> {
        Dataset::record(self, id)
    }
    fn digest(&self) -> String {
        self.digest.clone()
    }
    fn location(&self) -> Option<String> {
        Some(self.root.display().to_string())
    }
}

impl SubjectStore for SyntheticDataset {
    fn schema(&self) -> &SegmentSchema {
        &self.schema
    }
    fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id() == id)
    }
    fn record(&self, id: &str) -> Option<&SubjectRecord> {
        self.records.iter().find(|r| r.id == id)
    }
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.subjects {
            h.update(s.id().as_bytes());
            h.update(s.volume().pixels());
            h.update(s.segmap().labels());
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecombinedResult {
    pub spec: RecombinationSpec,
    /// `None` for skipped specs.
    pub prediction: Option<Prediction>,
    pub target_prediction: Prediction,
    pub is_counterfactual: bool,
    /// A selected segment was missing from the source in some frame.
    pub skipped: bool,
    pub dropped_px: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRequest {
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    pub selections: Vec<SegmentSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Worker threads for recombination; 0 means available parallelism.
    pub jobs: usize,
    pub store_volumes: bool,
    /// RFC 3339 creation time; defaults to `SOURCE_DATE_EPOCH` or now.
    pub created_at: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 0,
            store_volumes: false,
            created_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub run_id: String,
    pub created_at: String,
    pub dataset_digest: String,
    pub dataset: Option<String>,
    pub model: String,
    pub schema: SegmentSchema,
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    pub selections: Vec<SegmentSelection>,
    pub results: Vec<RecombinedResult>,
    /// Recombined volumes aligned with `results`, when requested.
    pub volumes: Option<Vec<Volume>>,
}

impl RunArtifact {
    pub fn skipped(&self) -> usize {
        self.results.iter().filter(|r| r.skipped).count()
    }

    /// Index of a result in canonical order, if present.
    pub fn index_of(&self, spec: &RecombinationSpec) -> Option<usize> {
        let t = self.targets.binary_search(&spec.target).ok()?;
        let s = self.sources.binary_search(&spec.source).ok()?;
        let k = self.selections.binary_search(&spec.selection).ok()?;
        Some((t * self.sources.len() + s) * self.selections.len() + k)
    }
}

/// Total recombinations for a design, e.g. (21, 79, 2, 7) -> 23226.
pub fn expected_count(targets: usize, sources: usize, directions: usize, selections: usize) -> usize {
    targets * sources * directions * selections
}

/// Current time, or `SOURCE_DATE_EPOCH` when set.
pub fn timestamp_now() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok());
    let t = match secs.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Current time ignoring `SOURCE_DATE_EPOCH`.
pub fn wall_clock() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn sorted_unique(ids: &[String], what: &str) -> Result<Vec<String>, EngineError> {
    let mut v = ids.to_vec();
    v.sort();
    let dups: BTreeSet<&String> = v.windows(2).filter(|w| w[0] == w[1]).map(|w| &w[0]).collect();
    if !dups.is_empty() {
        return Err(EngineError::Precondition(format!(
            "duplicate {what} ids: {}",
            dups.into_iter().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(v)
}

/// Checks a run request against the store. Returns sorted targets, sources
/// and selections.
pub fn validate_request<S: SubjectStore + ?Sized>(
    store: &S,
    request: &RunRequest,
) -> Result<(Vec<String>, Vec<String>, Vec<SegmentSelection>), EngineError> {
    if request.targets.is_empty() || request.sources.is_empty() {
        return Err(EngineError::Precondition("targets and sources must be nonempty".into()));
    }
    if request.selections.is_empty() {
        return Err(EngineError::Precondition("at least one segment selection is required".into()));
    }
    let targets = sorted_unique(&request.targets, "target")?;
    let sources = sorted_unique(&request.sources, "source")?;
    let source_set: HashSet<&String> = sources.iter().collect();
    let overlap: Vec<String> = targets.iter().filter(|t| source_set.contains(t)).cloned().collect();
    if !overlap.is_empty() {
        return Err(EngineError::Precondition(format!(
            "targets and sources overlap: {}",
            overlap.join(", ")
        )));
    }
    let unknown: Vec<String> = targets
        .iter()
        .chain(&sources)
        .filter(|id| store.subject(id).is_none() || store.record(id).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(EngineError::UnknownIds(unknown));
    }
    let label = |id: &String| store.record(id).expect("checked").predicted_label;
    let target_label = label(&targets[0]);
    let bad_targets: Vec<&String> = targets.iter().filter(|t| label(t) != target_label).collect();
    let bad_sources: Vec<&String> = sources.iter().filter(|s| label(s) == target_label).collect();
    if !bad_targets.is_empty() || !bad_sources.is_empty() {
        let mut msg = format!("targets must all have predicted label {target_label} and sources the opposite");
        if !bad_targets.is_empty() {
            msg += &format!("; mismatched targets: {}", join(&bad_targets));
        }
        if !bad_sources.is_empty() {
            msg += &format!("; mismatched sources: {}", join(&bad_sources));
        }
        return Err(EngineError::Precondition(msg));
    }
    let schema = store.schema();
    let mut selections = request.selections.clone();
    for sel in &selections {
        SegmentSelection::from_mask(sel.mask(), schema)
            .map_err(|e| EngineError::Precondition(format!("selection {}: {e}", sel.mask())))?;
    }
    selections.sort();
    selections.dedup();
    Ok((targets, sources, selections))
}

fn join(ids: &[&String]) -> String {
    ids.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

/// Identifier of a run: a digest of its inputs and creation time.
pub fn run_id(digest: &str, model: &str, t: &[String], s: &[String], sel: &[SegmentSelection], at: &str) -> String {
    let mut h = Sha256::new();
    for part in [digest, model, &t.join(","), &s.join(","), at] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    for x in sel {
        h.update(x.mask().to_le_bytes());
    }
    hex(&h.finalize())[..16].to_string()
}

fn worker_count(jobs: usize) -> usize {
    if jobs > 0 {
        jobs
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

#[cfg(feature = "parallel")]
fn recombine_chunk(
    pool: &rayon::ThreadPool,
    work: &[(usize, usize, SegmentSelection)],
    targets: &[&Subject],
    sources: &[&Subject],
) -> Result<Vec<RecombinedImage>, MorphError> {
    use rayon::prelude::*;
    pool.install(|| {
        work.par_iter()
            .map(|&(t, s, sel)| recombine(targets[t], sources[s], sel))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn recombine_chunk(
    _pool: &(),
    work: &[(usize, usize, SegmentSelection)],
    targets: &[&Subject],
    sources: &[&Subject],
) -> Result<Vec<RecombinedImage>, MorphError> {
    work.iter()
        .map(|&(t, s, sel)| recombine(targets[t], sources[s], sel))
        .collect()
}

/// Generates, classifies and flags every recombination of the request.
pub fn run<S: SubjectStore + ?Sized>(
    store: &S,
    gateway: &Gateway,
    request: &RunRequest,
    options: &RunOptions,
) -> Result<RunArtifact, EngineError> {
    let (targets, sources, selections) = validate_request(store, request)?;
    let target_subjects: Vec<&Subject> = targets.iter().map(|t| store.subject(t).expect("checked")).collect();
    let source_subjects: Vec<&Subject> = sources.iter().map(|s| store.subject(s).expect("checked")).collect();

    let target_requests: Vec<PredictRequest<'_>> = target_subjects
        .iter()
        .map(|s| PredictRequest::new(s.volume(), Some(s.segmap())))
        .collect();
    let target_predictions = gateway.predict_many(&target_requests)?;

    let work: Vec<(usize, usize, SegmentSelection)> = (0..targets.len())
        .flat_map(|t| {
            let selections = &selections;
            (0..sources.len()).flat_map(move |s| selections.iter().map(move |&sel| (t, s, sel)))
        })
        .collect();

    let jobs = worker_count(options.jobs);
    #[cfg(feature = "parallel")]
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EngineError::Precondition(format!("worker pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let pool = ();

    let chunk = (gateway.batch_size() * jobs).max(64);
    let mut results = Vec::with_capacity(work.len());
    let mut volumes = options.store_volumes.then(|| Vec::with_capacity(work.len()));
    for part in work.chunks(chunk) {
        let images = recombine_chunk(&pool, part, &target_subjects, &source_subjects)?;
        let live: Vec<usize> = (0..images.len())
            .filter(|&i| !images[i].provenance.has_skips())
            .collect();
        let requests: Vec<PredictRequest<'_>> = live
            .iter()
            .map(|&i| PredictRequest::new(&images[i].volume, Some(&images[i].expected_segmap)))
            .collect();
        let predictions = gateway.predict_many(&requests)?;
        let mut by_index: HashMap<usize, Prediction> = live.into_iter().zip(predictions).collect();
        for (i, (&(t, s, sel), image)) in part.iter().zip(images).enumerate() {
            let target_prediction = target_predictions[t].clone();
            let prediction = by_index.remove(&i);
            let is_counterfactual = prediction
                .as_ref()
                .is_some_and(|p| p.label != target_prediction.label);
            results.push(RecombinedResult {
                spec: RecombinationSpec {
                    target: targets[t].clone(),
                    source: sources[s].clone(),
                    selection: sel,
                },
                skipped: prediction.is_none(),
                prediction,
                target_prediction,
                is_counterfactual,
                dropped_px: image.provenance.dropped_total(),
            });
            if let Some(v) = volumes.as_mut() {
                v.push(image.volume);
            }
        }
    }

    let created_at = options.created_at.clone().unwrap_or_else(timestamp_now);
    let digest = store.digest();
    Ok(RunArtifact {
        run_id: run_id(&digest, gateway.model_id(), &targets, &sources, &selections, &created_at),
        created_at,
        dataset_digest: digest,
        dataset: store.location(),
        model: gateway.model_id().to_string(),
        schema: store.schema().clone(),
        targets,
        sources,
        selections,
        results,
        volumes,
    })
}

/// Recomputes the recombined image of one result.
pub fn recompute<S: SubjectStore + ?Sized>(
    store: &S,
    spec: &RecombinationSpec,
) -> Result<RecombinedImage, EngineError> {
    let t = store
        .subject(&spec.target)
        .ok_or_else(|| EngineError::UnknownIds(vec![spec.target.clone()]))?;
    let s = store
        .subject(&spec.source)
        .ok_or_else(|| EngineError::UnknownIds(vec![spec.source.clone()]))?;
    Ok(recombine(t, s, spec.selection)?)
}

/// Re-segments the recombined images at `indices` and aggregates fidelity.
pub fn fidelity_sample<S, F>(
    store: &S,
    artifact: &RunArtifact,
    indices: &[usize],
    segmenter: F,
) -> Result<Vec<FidelityReport>, EngineError>
where
    S: SubjectStore + ?Sized,
    F: Fn(&Volume) -> SegmentMap,
{
    indices
        .iter()
        .map(|&i| {
            let r = artifact
                .results
                .get(i)
                .ok_or_else(|| EngineError::Precondition(format!("no result at index {i}")))?;
            let image = recompute(store, &r.spec)?;
            Ok(evaluate(&image, &artifact.schema, &segmenter))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mask: u64,
    pub segments: String,
    pub counterfactuals: usize,
    pub unchanged: usize,
    pub skipped: usize,
    /// Counterfactual share rounded to 3 decimals; `None` for an empty row.
    pub proportion: Option<f64>,
}

/// `cf / (cf + unchanged)` in thousandths, rounded half up.
pub fn proportion_thousandths(counterfactuals: usize, unchanged: usize) -> Option<u64> {
    let total = (counterfactuals + unchanged) as u64;
    (total > 0).then(|| (2000 * counterfactuals as u64 + total) / (2 * total))
}

impl SummaryRow {
    pub fn new(selection: SegmentSelection, schema: &SegmentSchema, cf: usize, unchanged: usize, skipped: usize) -> Self {
        Self {
            mask: selection.mask(),
            segments: selection.display_names(schema),
            counterfactuals: cf,
            unchanged,
            skipped,
            proportion: proportion_thousandths(cf, unchanged).map(|q| q as f64 / 1000.0),
        }
    }

    pub fn proportion_text(&self) -> String {
        match proportion_thousandths(self.counterfactuals, self.unchanged) {
            Some(q) => format!("{}.{:03}", q / 1000, q % 1000),
            None => String::new(),
        }
    }
}

/// One row per selection, in bitmask order, over the given results.
pub fn summarize_results<'a, I>(schema: &SegmentSchema, selections: &[SegmentSelection], results: I) -> Vec<SummaryRow>
where
    I: IntoIterator<Item = &'a RecombinedResult>,
{
    let mut sels = selections.to_vec();
    sels.sort();
    sels.dedup();
    let mut counts: HashMap<u64, (usize, usize, usize)> = sels.iter().map(|s| (s.mask(), (0, 0, 0))).collect();
    for r in results {
        if let Some(c) = counts.get_mut(&r.spec.selection.mask()) {
            if r.skipped {
                c.2 += 1;
            } else if r.is_counterfactual {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
    }
    sels.iter()
        .map(|s| {
            let (cf, un, sk) = counts[&s.mask()];
            SummaryRow::new(*s, schema, cf, un, sk)
        })
        .collect()
}

pub fn summarize(artifact: &RunArtifact) -> Vec<SummaryRow> {
    summarize_results(&artifact.schema, &artifact.selections, &artifact.results)
}

/// Summary over results whose source subject satisfies `clause`.
pub fn subgroup_summarize<F>(
    artifact: &RunArtifact,
    variables: &[VariableDecl],
    clause: &FilterClause,
    record: F,
) -> Result<Vec<SummaryRow>, EngineError>
where
    F: Fn(&str) -> Option<SubjectRecord>,
{
    clause.validate(variables)?;
    let keep: HashSet<&String> = artifact
        .sources
        .iter()
        .filter(|id| record(id).is_some_and(|r| clause.matches(&r)))
        .collect();
    Ok(summarize_results(
        &artifact.schema,
        &artifact.selections,
        artifact.results.iter().filter(|r| keep.contains(&r.spec.source)),
    ))
}

/// Sums rows of several summaries with matching selections (e.g. the two
/// directions of a swap experiment).
pub fn merge_summaries(parts: &[Vec<SummaryRow>]) -> Vec<SummaryRow> {
    let mut merged: Vec<SummaryRow> = Vec::new();
    for rows in parts {
        for row in rows {
            match merged.iter_mut().find(|m| m.mask == row.mask) {
                Some(m) => {
                    m.counterfactuals += row.counterfactuals;
                    m.unchanged += row.unchanged;
                    m.skipped += row.skipped;
                    m.proportion = proportion_thousandths(m.counterfactuals, m.unchanged).map(|q| q as f64 / 1000.0);
                }
                None => merged.push(row.clone()),
            }
        }
    }
    merged.sort_by_key(|r| r.mask);
    merged
}

/// CSV with header `segments,counterfactuals,unchanged,proportion`; empty
/// rows have an empty proportion.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["segments", "counterfactuals", "unchanged", "proportion"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.segments.clone(),
            r.counterfactuals.to_string(),
            r.unchanged.to_string(),
            r.proportion_text(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}
