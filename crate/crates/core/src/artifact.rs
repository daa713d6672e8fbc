//! On-disk layout of a finished run.
//!
//! ```text
//! <run>/run.json       metadata, design and counts
//! <run>/results.csv    one row per recombination, canonical order
//! <run>/summary.csv    per-selection counts and proportions
//! <run>/volumes/       optional recombined volumes, <index>.mvol
//! ```
//!
//! A run directory is written once under a temporary name and renamed into
//! place, so it is either complete or absent.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{summarize, summary_csv, RecombinedResult, RunArtifact};
use crate::gateway::Prediction;
use crate::io::{read_volume, write_atomic, write_volume, DataError};
use crate::model::{SegmentSchema, SegmentSelection};
use crate::morphmix::RecombinationSpec;

pub const RESULTS_HEADER: [&str; 11] = [
    "target",
    "source",
    "mask",
    "segments",
    "label",
    "probability",
    "target_label",
    "target_probability",
    "counterfactual",
    "skipped",
    "dropped_px",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub mask: u64,
    pub segments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub created_at: String,
    pub dataset: Option<String>,
    pub dataset_digest: String,
    pub model: String,
    pub schema: SegmentSchema,
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    pub selections: Vec<SelectionEntry>,
    pub results: usize,
    pub counterfactuals: usize,
    pub skipped: usize,
    pub volumes: bool,
}

impl RunMeta {
    pub fn of(a: &RunArtifact) -> Self {
        Self {
            run_id: a.run_id.clone(),
            created_at: a.created_at.clone(),
            dataset: a.dataset.clone(),
            dataset_digest: a.dataset_digest.clone(),
            model: a.model.clone(),
            schema: a.schema.clone(),
            targets: a.targets.clone(),
            sources: a.sources.clone(),
            selections: a
                .selections
                .iter()
                .map(|s| SelectionEntry {
                    mask: s.mask(),
                    segments: s.display_names(&a.schema),
                })
                .collect(),
            results: a.results.len(),
            counterfactuals: a.results.iter().filter(|r| r.is_counterfactual).count(),
            skipped: a.skipped(),
            volumes: a.volumes.is_some(),
        }
    }
}

pub fn results_csv(a: &RunArtifact) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).expect("in-memory write");
    for r in &a.results {
        let (label, p) = match &r.prediction {
            Some(p) => (p.label.to_string(), p.probability.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.spec.target.clone(),
            r.spec.source.clone(),
            r.spec.selection.mask().to_string(),
            r.spec.selection.display_names(&a.schema),
            label,
            p,
            r.target_prediction.label.to_string(),
            r.target_prediction.probability.to_string(),
            u8::from(r.is_counterfactual).to_string(),
            u8::from(r.skipped).to_string(),
            r.dropped_px.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Writes `a` to `dir`, which must not exist yet.
pub fn write_run(a: &RunArtifact, dir: &Path) -> Result<(), DataError> {
    if dir.exists() {
        return Err(DataError::AlreadyExists(dir.to_path_buf()));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let tmp = dir.with_file_name(format!(".{name}.partial{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    }
    let result = write_contents(a, &tmp).and_then(|()| {
        if dir.exists() {
            return Err(DataError::AlreadyExists(dir.to_path_buf()));
        }
        fs::rename(&tmp, dir).map_err(|e| DataError::io(dir, e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn write_contents(a: &RunArtifact, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let meta = serde_json::to_vec_pretty(&RunMeta::of(a)).expect("serializable");
    write_atomic(&dir.join("run.json"), &meta)?;
    write_atomic(&dir.join("results.csv"), results_csv(a).as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&summarize(a)).as_bytes())?;
    if let Some(volumes) = &a.volumes {
        let vdir = dir.join("volumes");
        fs::create_dir_all(&vdir).map_err(|e| DataError::io(&vdir, e))?;
        for (i, v) in volumes.iter().enumerate() {
            write_volume(v, &volume_path(dir, i))?;
        }
    }
    Ok(())
}

pub fn volume_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("volumes").join(format!("{index:06}.mvol"))
}

pub fn read_meta(dir: &Path) -> Result<RunMeta, DataError> {
    let path = dir.join("run.json");
    let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json { path, source })
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T, DataError> {
    raw.parse()
        .map_err(|_| DataError::table(path, format!("line {line}: bad {name} {raw:?}")))
}

/// Reads a run directory written by [`write_run`].
pub fn read_run(dir: &Path) -> Result<RunArtifact, DataError> {
    let meta = read_meta(dir)?;
    let path = dir.join("results.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| DataError::table(&path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| DataError::table(&path, e.to_string()))?
        .clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(DataError::table(&path, "unexpected header"));
    }
    let mut results = Vec::with_capacity(meta.results);
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::table(&path, e.to_string()))?;
        let mask: u64 = parse_field(&path, line, "mask", &rec[2])?;
        let selection = SegmentSelection::from_mask(mask, &meta.schema)
            .map_err(|e| DataError::table(&path, format!("line {line}: {e}")))?;
        let prediction = if rec[5].is_empty() {
            None
        } else {
            Some(Prediction {
                label: parse_field(&path, line, "label", &rec[4])?,
                probability: parse_field(&path, line, "probability", &rec[5])?,
                model: meta.model.clone(),
            })
        };
        results.push(RecombinedResult {
            spec: RecombinationSpec {
                target: rec[0].to_string(),
                source: rec[1].to_string(),
                selection,
            },
            prediction,
            target_prediction: Prediction {
                label: parse_field(&path, line, "target_label", &rec[6])?,
                probability: parse_field(&path, line, "target_probability", &rec[7])?,
                model: meta.model.clone(),
            },
            is_counterfactual: &rec[8] == "1",
            skipped: &rec[9] == "1",
            dropped_px: parse_field(&path, line, "dropped_px", &rec[10])?,
        });
    }
    if results.len() != meta.results {
        return Err(DataError::table(
            &path,
            format!("expected {} rows, found {}", meta.results, results.len()),
        ));
    }
    let volumes = if meta.volumes {
        let mut v = Vec::with_capacity(results.len());
        for (i, r) in results.iter().enumerate() {
            v.push(read_volume(&volume_path(dir, i))?.with_id(r.spec.volume_id()));
        }
        Some(v)
    } else {
        None
    };
    let selections = meta
        .selections
        .iter()
        .map(|s| SegmentSelection::from_mask(s.mask, &meta.schema))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DataError::table(&dir.join("run.json"), e.to_string()))?;
    Ok(RunArtifact {
        run_id: meta.run_id,
        created_at: meta.created_at,
        dataset_digest: meta.dataset_digest,
        dataset: meta.dataset,
        model: meta.model,
        schema: meta.schema,
        targets: meta.targets,
        sources: meta.sources,
        selections,
        results,
        volumes,
    })
}
