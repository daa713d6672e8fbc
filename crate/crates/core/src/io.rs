//! Dataset persistence.
//!
//! Volumes and segment maps use a small little-endian binary format:
//!
//! ```text
//! magic    4 bytes  "MVOL" (volume) or "MSEG" (segment map)
//! version  1 byte   0x01
//! frames   u16 LE
//! height   u16 LE
//! width    u16 LE
//! payload  frames*height*width bytes, frame-major then row-major
//! ```
//!
//! A dataset directory holds `manifest.json`, `demographics.csv`, and the
//! per-subject raster files referenced by the manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    label_for, DemographicValue, Dims, SegmentMap, SegmentSchema, Subject, SubjectRecord, Volume,
};
use crate::synth::{GroundTruth, SyntheticConstants, SyntheticDataset};

pub const VOLUME_MAGIC: [u8; 4] = *b"MVOL";
pub const SEGMAP_MAGIC: [u8; 4] = *b"MSEG";
pub const FORMAT_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 11;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("wrong magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes: expected {expected} bytes, have {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("zero dimension in header {frames}x{height}x{width}")]
    ZeroDim {
        frames: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid dimensions: {0}")]
    Dims(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Table { path: PathBuf, message: String },
    #[error("dataset invalid ({} problems): {}", .0.len(), .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{0} already exists")]
    AlreadyExists(PathBuf),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn table(path: &Path, message: impl Into<String>) -> Self {
        Self::Table {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

fn encode(magic: [u8; 4], dims: Dims, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&magic);
    out.push(FORMAT_VERSION);
    for d in [dims.frames, dims.height, dims.width] {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<(Dims, Vec<u8>), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let dim = |i: usize| u16::from_le_bytes([bytes[5 + 2 * i], bytes[6 + 2 * i]]) as usize;
    let (frames, height, width) = (dim(0), dim(1), dim(2));
    if frames == 0 || height == 0 || width == 0 {
        return Err(FormatError::ZeroDim {
            frames,
            height,
            width,
        });
    }
    let dims = Dims::new(frames, height, width).map_err(|e| FormatError::Dims(e.to_string()))?;
    let expected = HEADER_LEN + dims.len();
    match bytes.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        }),
        std::cmp::Ordering::Greater => Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len(),
        }),
        std::cmp::Ordering::Equal => Ok((dims, bytes[HEADER_LEN..].to_vec())),
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    encode(VOLUME_MAGIC, v.dims(), v.pixels())
}

pub fn decode_volume(id: &str, bytes: &[u8]) -> Result<Volume, FormatError> {
    let (dims, pixels) = decode(VOLUME_MAGIC, bytes)?;
    Ok(Volume::new(id, dims, pixels).expect("length checked"))
}

pub fn encode_segmap(m: &SegmentMap) -> Vec<u8> {
    encode(SEGMAP_MAGIC, m.dims(), m.labels())
}

pub fn decode_segmap(bytes: &[u8]) -> Result<SegmentMap, FormatError> {
    let (dims, labels) = decode(SEGMAP_MAGIC, bytes)?;
    Ok(SegmentMap::new(dims, labels).expect("length checked"))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DataError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::io(path, e))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &encode_volume(v))
}

/// Reads a volume; its id is the file stem.
pub fn read_volume(path: &Path) -> Result<Volume, DataError> {
    decode_volume(&file_stem(path), &read_bytes(path)?).map_err(|source| DataError::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_segmap(m: &SegmentMap, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &encode_segmap(m))
}

pub fn read_segmap(path: &Path) -> Result<SegmentMap, DataError> {
    decode_segmap(&read_bytes(path)?).map_err(|source| DataError::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Paths relative to the dataset root.
    pub volume: String,
    pub segmap: String,
}

/// `manifest.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub schema: SegmentSchema,
    pub subjects: Vec<SubjectEntry>,
    pub variables: Vec<VariableDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConstants>,
}

impl DatasetManifest {
    pub fn variable(&self, name: &str) -> Option<&VariableDecl> {
        self.variables.iter().find(|v| v.name == name)
    }
}

const RESERVED_COLUMNS: [&str; 3] = ["id", "predicted_label", "probability"];

/// Parses a demographics table. Empty cells are missing values.
pub fn parse_demographics(
    path: &Path,
    text: &str,
    variables: &[VariableDecl],
) -> Result<Vec<SubjectRecord>, DataError> {
    if let Some(v) = variables
        .iter()
        .find(|v| RESERVED_COLUMNS.contains(&v.name.as_str()))
    {
        return Err(DataError::table(
            path,
            format!("variable name '{}' is reserved", v.name),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::table(path, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::table(path, format!("missing column '{name}'")))
    };
    let id_col = column("id")?;
    let label_col = column("predicted_label")?;
    let prob_col = column("probability")?;
    let var_cols = variables
        .iter()
        .map(|v| column(&v.name).map(|i| (v, i)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(|e| DataError::table(path, e.to_string()))?;
        let line = row_no + 2;
        let id = row.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DataError::table(path, format!("line {line}: empty id")));
        }
        if !seen.insert(id.clone()) {
            return Err(DataError::table(path, format!("duplicate id '{id}'")));
        }
        let parse_num = |col: usize, what: &str| -> Result<f64, DataError> {
            let raw = row.get(col).unwrap_or("");
            raw.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DataError::table(
                    path,
                    format!("line {line}: unparsable number '{raw}' in column '{what}'"),
                )
            })
        };
        let mut demographics = BTreeMap::new();
        for &(decl, col) in &var_cols {
            let raw = row.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                continue;
            }
            let value = match decl.kind {
                VariableKind::Numeric => DemographicValue::Numeric(parse_num(col, &decl.name)?),
                VariableKind::Categorical => DemographicValue::Categorical(raw.to_string()),
            };
            demographics.insert(decl.name.clone(), value);
        }
        let probability = parse_num(prob_col, "probability")?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(DataError::table(
                path,
                format!("line {line}: probability {probability} out of range [0, 1] for '{id}'"),
            ));
        }
        let label = match row.get(label_col).unwrap_or("").trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::table(
                    path,
                    format!("line {line}: predicted_label must be 0 or 1, got '{other}'"),
                ))
            }
        };
        if label != label_for(probability) {
            return Err(DataError::table(
                path,
                format!("line {line}: predicted_label {label} inconsistent with probability {probability} for '{id}'"),
            ));
        }
        out.push(SubjectRecord {
            id,
            demographics,
            predicted_label: label,
            probability,
        });
    }
    Ok(out)
}

pub fn load_demographics(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<SubjectRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_demographics(path, &text, &manifest.variables)
}

fn format_value(v: &DemographicValue) -> String {
    match v {
        DemographicValue::Numeric(x) => x.to_string(),
        DemographicValue::Categorical(s) => s.clone(),
    }
}

pub fn format_demographics(records: &[SubjectRecord], variables: &[VariableDecl]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(variables.iter().map(|v| v.name.clone()));
    header.extend(["predicted_label".to_string(), "probability".to_string()]);
    w.write_record(&header).expect("in-memory write");
    for r in records {
        let mut row = vec![r.id.clone()];
        row.extend(
            variables
                .iter()
                .map(|v| r.value(&v.name).map(format_value).unwrap_or_default()),
        );
        row.push(r.predicted_label.to_string());
        row.push(r.probability.to_string());
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// A fully loaded and validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub subjects: Vec<Subject>,
    /// One record per subject, in manifest order.
    pub records: Vec<SubjectRecord>,
    /// Hex SHA-256 over the manifest, demographics and raster files.
    pub digest: String,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Loads everything under `root`. Every problem found is reported, not
    /// only the first.
    pub fn load(root: &Path) -> Result<Self, DataError> {
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest_bytes = read_bytes(&manifest_path)?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&manifest_bytes).map_err(|source| DataError::Json {
                path: manifest_path.clone(),
                source,
            })?;
        let demo_path = root.join(DEMOGRAPHICS_FILE);
        let demo_bytes = read_bytes(&demo_path)?;

        let mut failures = Vec::new();
        let mut hasher = Sha256::new();
        hasher.update(&manifest_bytes);
        hasher.update(&demo_bytes);

        let mut ids = HashSet::new();
        let mut subjects = Vec::new();
        for entry in &manifest.subjects {
            if !ids.insert(entry.id.as_str()) {
                failures.push(format!("duplicate subject id '{}'", entry.id));
                continue;
            }
            let vpath = root.join(&entry.volume);
            let mpath = root.join(&entry.segmap);
            let volume = read_bytes(&vpath).and_then(|b| {
                hasher.update(&b);
                decode_volume(&entry.id, &b).map_err(|source| DataError::Format {
                    path: vpath.clone(),
                    source,
                })
            });
            let segmap = read_bytes(&mpath).and_then(|b| {
                hasher.update(&b);
                decode_segmap(&b).map_err(|source| DataError::Format {
                    path: mpath.clone(),
                    source,
                })
            });
            match (volume, segmap) {
                (Ok(v), Ok(m)) => {
                    if let Err(e) = m.validate(&manifest.schema) {
                        failures.push(format!("{}: {e}", mpath.display()));
                        continue;
                    }
                    match Subject::new(v, m) {
                        Ok(s) => subjects.push(s),
                        Err(e) => failures.push(format!("subject '{}': {e}", entry.id)),
                    }
                }
                (v, m) => {
                    failures.extend(v.err().map(|e| e.to_string()));
                    failures.extend(m.err().map(|e| e.to_string()));
                }
            }
        }

        let text = String::from_utf8_lossy(&demo_bytes);
        let mut records = Vec::new();
        match parse_demographics(&demo_path, &text, &manifest.variables) {
            Ok(rows) => {
                let mut by_id: HashMap<String, SubjectRecord> =
                    rows.into_iter().map(|r| (r.id.clone(), r)).collect();
                for entry in &manifest.subjects {
                    match by_id.remove(&entry.id) {
                        Some(r) => records.push(r),
                        None => failures.push(format!("no demographics row for '{}'", entry.id)),
                    }
                }
                let mut extra: Vec<_> = by_id.into_keys().collect();
                extra.sort();
                for id in extra {
                    failures.push(format!("demographics row '{id}' matches no subject"));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }

        if !failures.is_empty() {
            return Err(DataError::Invalid(failures));
        }
        let index = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id().to_string(), i))
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            subjects,
            records,
            digest: hex(&hasher.finalize()),
            index,
        })
    }

    pub fn schema(&self) -> &SegmentSchema {
        &self.manifest.schema
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.position(id).map(|i| &self.subjects[i])
    }

    pub fn record(&self, id: &str) -> Option<&SubjectRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    /// Rewrites the demographics table with new records (same ids and order).
    pub fn save_records(&self, records: &[SubjectRecord]) -> Result<(), DataError> {
        let bytes = format_demographics(records, &self.manifest.variables);
        write_atomic(&self.root.join(DEMOGRAPHICS_FILE), &bytes)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn synthetic_variables() -> Vec<VariableDecl> {
    vec![
        VariableDecl {
            name: "age".into(),
            kind: VariableKind::Numeric,
            unit: Some("years".into()),
        },
        VariableDecl {
            name: "sex".into(),
            kind: VariableKind::Categorical,
            unit: None,
        },
        VariableDecl {
            name: "bmi".into(),
            kind: VariableKind::Numeric,
            unit: Some("kg/m2".into()),
        },
    ]
}

fn format_ground_truth(truths: &[GroundTruth]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "true_label", "thickness", "label_noise", "tau_g"])
        .expect("in-memory write");
    for t in truths {
        w.write_record([
            t.id.clone(),
            t.true_label.to_string(),
            t.thickness.to_string(),
            t.label_noise.to_string(),
            t.tau_g.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Writes a generated dataset under `dir`, creating it when needed.
pub fn write_dataset(
    dir: &Path,
    data: &SyntheticDataset,
    seed: Option<u64>,
) -> Result<DatasetManifest, DataError> {
    for sub in ["volumes", "segmaps"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| DataError::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(data.subjects.len());
    for s in &data.subjects {
        let entry = SubjectEntry {
            id: s.id().to_string(),
            volume: format!("volumes/{}.mvol", s.id()),
            segmap: format!("segmaps/{}.mseg", s.id()),
        };
        write_volume(s.volume(), &dir.join(&entry.volume))?;
        write_segmap(s.segmap(), &dir.join(&entry.segmap))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: 1,
        schema: data.schema.clone(),
        subjects: entries,
        variables: synthetic_variables(),
        seed,
        synthetic: Some(data.constants.clone()),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("serializable manifest");
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    write_atomic(
        &dir.join(DEMOGRAPHICS_FILE),
        &format_demographics(&data.records, &manifest.variables),
    )?;
    write_atomic(&dir.join(GROUND_TRUTH_FILE), &format_ground_truth(&data.truths))?;
    Ok(manifest)
}
