//! Shared domain types: volumes, segment maps, the segment schema, subject
//! records and segment selections.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest accepted height or width of a raster.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid dimensions {frames}x{height}x{width}: frames must be >= 1 and sides >= {MIN_SIDE}")]
    InvalidDims {
        frames: usize,
        height: usize,
        width: usize,
    },
    #[error("buffer length {actual} does not match dimensions (expected {expected})")]
    BufferLength { expected: usize, actual: usize },
    #[error("dimension mismatch pairing {left} with {right}")]
    DimsMismatch { left: Dims, right: Dims },
    #[error("segment map contains label {0} which is not in the schema")]
    UnknownLabel(u8),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("segment selection must not be empty")]
    EmptySelection,
    #[error("unknown segment name '{0}'")]
    UnknownSegment(String),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityRange(f64),
    #[error("predicted label {label} inconsistent with probability {probability}")]
    LabelMismatch { label: u8, probability: f64 },
}

/// Raster shape in frames x rows x columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self, ModelError> {
        if frames == 0 || height < MIN_SIDE || width < MIN_SIDE {
            return Err(ModelError::InvalidDims {
                frames,
                height,
                width,
            });
        }
        Ok(Self {
            frames,
            height,
            width,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear offset of (frame, row, col) in a frame-major, row-major buffer.
    #[inline]
    pub fn index(&self, frame: usize, row: usize, col: usize) -> usize {
        (frame * self.height + row) * self.width + col
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

/// A frames x height x width grayscale raster with 8-bit intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume {
    id: String,
    dims: Dims,
    pixels: Vec<u8>,
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: Dims, pixels: Vec<u8>) -> Result<Self, ModelError> {
        let dims = Dims::new(dims.frames, dims.height, dims.width)?;
        if pixels.len() != dims.len() {
            return Err(ModelError::BufferLength {
                expected: dims.len(),
                actual: pixels.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            dims,
            pixels,
        })
    }

    pub fn zeros(id: impl Into<String>, dims: Dims) -> Self {
        Self {
            id: id.into(),
            dims,
            pixels: vec![0; dims.len()],
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.dims.frame_len();
        &self.pixels[f * n..(f + 1) * n]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// Per-pixel label raster; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    dims: Dims,
    labels: Vec<u8>,
}

impl SegmentMap {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self, ModelError> {
        let dims = Dims::new(dims.frames, dims.height, dims.width)?;
        if labels.len() != dims.len() {
            return Err(ModelError::BufferLength {
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn background(dims: Dims) -> Self {
        Self {
            dims,
            labels: vec![0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.dims.frame_len();
        &self.labels[f * n..(f + 1) * n]
    }

    /// Number of pixels carrying `label` in frame `f`.
    pub fn count(&self, f: usize, label: u8) -> usize {
        self.frame(f).iter().filter(|&&l| l == label).count()
    }

    /// Fails with the first (smallest) label id absent from `schema`.
    pub fn validate(&self, schema: &SegmentSchema) -> Result<(), ModelError> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        match (1..=255u8).find(|&l| seen[l as usize] && !schema.contains(l)) {
            Some(l) => Err(ModelError::UnknownLabel(l)),
            None => Ok(()),
        }
    }
}

/// A volume together with its segmentation; dimensions are checked on pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject {
    volume: Volume,
    segmap: SegmentMap,
}

impl Subject {
    pub fn new(volume: Volume, segmap: SegmentMap) -> Result<Self, ModelError> {
        if volume.dims() != segmap.dims() {
            return Err(ModelError::DimsMismatch {
                left: volume.dims(),
                right: segmap.dims(),
            });
        }
        Ok(Self { volume, segmap })
    }

    pub fn id(&self) -> &str {
        self.volume.id()
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn segmap(&self) -> &SegmentMap {
        &self.segmap
    }

    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentDef {
    pub label: u8,
    pub name: String,
}

/// Ordered label definitions; ids are contiguous from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SegmentDef>", into = "Vec<SegmentDef>")]
pub struct SegmentSchema {
    segments: Vec<SegmentDef>,
}

impl SegmentSchema {
    pub fn new(segments: Vec<SegmentDef>) -> Result<Self, ModelError> {
        if segments.is_empty() {
            return Err(ModelError::InvalidSchema("no segments".into()));
        }
        if segments.len() > 64 {
            return Err(ModelError::InvalidSchema("more than 64 segments".into()));
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.label as usize != i + 1 {
                return Err(ModelError::InvalidSchema(format!(
                    "label ids must be contiguous from 1; position {} has id {}",
                    i + 1,
                    seg.label
                )));
            }
            if !is_snake_case(&seg.name) {
                return Err(ModelError::InvalidSchema(format!(
                    "segment name '{}' is not lowercase snake_case",
                    seg.name
                )));
            }
            if segments[..i].iter().any(|s| s.name == seg.name) {
                return Err(ModelError::InvalidSchema(format!(
                    "duplicate segment name '{}'",
                    seg.name
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, ModelError> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| SegmentDef {
                    label: (i + 1) as u8,
                    name: n.as_ref().to_string(),
                })
                .collect(),
        )
    }

    /// lv_cavity, lv_myocardium, rv_cavity.
    pub fn cardiac() -> Self {
        Self::from_names(&["lv_cavity", "lv_myocardium", "rv_cavity"]).expect("valid schema")
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[SegmentDef] {
        &self.segments
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.segments.iter().map(|s| s.label)
    }

    pub fn contains(&self, label: u8) -> bool {
        label >= 1 && (label as usize) <= self.segments.len()
    }

    pub fn name(&self, label: u8) -> Option<&str> {
        self.contains(label)
            .then(|| self.segments[label as usize - 1].name.as_str())
    }

    pub fn label_of(&self, name: &str) -> Option<u8> {
        self.segments.iter().find(|s| s.name == name).map(|s| s.label)
    }
}

impl TryFrom<Vec<SegmentDef>> for SegmentSchema {
    type Error = ModelError;

    fn try_from(value: Vec<SegmentDef>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SegmentSchema> for Vec<SegmentDef> {
    fn from(value: SegmentSchema) -> Self {
        value.segments
    }
}

fn is_snake_case(s: &str) -> bool {
    !s.is_empty()
        && s.starts_with(|c: char| c.is_ascii_lowercase())
        && s
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && !s.ends_with('_')
        && !s.contains("__")
}

/// Nonempty set of schema labels, stored as a bitmask (label 1 = bit 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentSelection(u64);

impl SegmentSelection {
    pub fn new(labels: &[u8], schema: &SegmentSchema) -> Result<Self, ModelError> {
        let mut mask = 0u64;
        for &l in labels {
            if !schema.contains(l) {
                return Err(ModelError::UnknownLabel(l));
            }
            mask |= 1 << (l - 1);
        }
        Self::from_mask(mask, schema)
    }

    pub fn from_mask(mask: u64, schema: &SegmentSchema) -> Result<Self, ModelError> {
        if mask == 0 {
            return Err(ModelError::EmptySelection);
        }
        let allowed = if schema.len() == 64 {
            u64::MAX
        } else {
            (1u64 << schema.len()) - 1
        };
        if mask & !allowed != 0 {
            let bit = (mask & !allowed).trailing_zeros();
            return Err(ModelError::UnknownLabel((bit + 1) as u8));
        }
        Ok(Self(mask))
    }

    pub fn from_names<S: AsRef<str>>(names: &[S], schema: &SegmentSchema) -> Result<Self, ModelError> {
        let labels = names
            .iter()
            .map(|n| {
                schema
                    .label_of(n.as_ref())
                    .ok_or_else(|| ModelError::UnknownSegment(n.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&labels, schema)
    }

    /// Selection from a bitmask without schema validation; `None` when empty.
    pub fn from_raw_mask(mask: u64) -> Option<Self> {
        (mask != 0).then_some(Self(mask))
    }

    pub fn mask(&self) -> u64 {
        self.0
    }

    pub fn contains(&self, label: u8) -> bool {
        (1..=64).contains(&label) && self.0 & (1 << (label - 1)) != 0
    }

    /// Labels in ascending order.
    pub fn labels(&self) -> Vec<u8> {
        (0..64u8)
            .filter(|b| self.0 & (1 << b) != 0)
            .map(|b| b + 1)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Parses `all` or comma-separated segment names.
    pub fn parse_list(text: &str, schema: &SegmentSchema) -> Result<Self, ModelError> {
        if text.trim() == "all" {
            let k = schema.len();
            return Ok(Self(if k == 64 { u64::MAX } else { (1u64 << k) - 1 }));
        }
        let names: Vec<&str> = text.split(',').map(str::trim).filter(|n| !n.is_empty()).collect();
        Self::from_names(&names, schema)
    }

    /// Every nonempty sub-selection, in ascending bitmask order.
    pub fn subsets(&self) -> Vec<SegmentSelection> {
        let mut out = Vec::with_capacity((1usize << self.len().min(20)) - 1);
        let mut sub = self.0;
        while sub != 0 {
            out.push(Self(sub));
            sub = (sub - 1) & self.0;
        }
        out.reverse();
        out
    }

    /// Segment names joined with `+`, e.g. `lv_cavity+rv_cavity`.
    pub fn display_names(&self, schema: &SegmentSchema) -> String {
        self.labels()
            .iter()
            .map(|&l| schema.name(l).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Every nonempty subset of the schema's labels, in ascending bitmask order.
pub fn combinations(schema: &SegmentSchema) -> Vec<SegmentSelection> {
    let k = schema.len();
    assert!((1..64).contains(&k), "combinations supports 1..=63 labels");
    (1..(1u64 << k)).map(SegmentSelection).collect()
}

/// Binary label for a probability; 0.5 maps to 0.
pub fn label_for(probability: f64) -> u8 {
    u8::from(probability > 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DemographicValue {
    Numeric(f64),
    Categorical(String),
}

impl DemographicValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Numeric(v) => Some(*v),
            Self::Categorical(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Self::Categorical(s) => Some(s),
            Self::Numeric(_) => None,
        }
    }
}

/// A subject's demographics and cached prediction. Missing values are absent
/// from `demographics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub demographics: BTreeMap<String, DemographicValue>,
    pub predicted_label: u8,
    pub probability: f64,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        demographics: BTreeMap<String, DemographicValue>,
        probability: f64,
    ) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(ModelError::ProbabilityRange(probability));
        }
        Ok(Self {
            id: id.into(),
            demographics,
            predicted_label: label_for(probability),
            probability,
        })
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(ModelError::ProbabilityRange(self.probability));
        }
        if self.predicted_label != label_for(self.probability) {
            return Err(ModelError::LabelMismatch {
                label: self.predicted_label,
                probability: self.probability,
            });
        }
        Ok(())
    }

    pub fn value(&self, variable: &str) -> Option<&DemographicValue> {
        self.demographics.get(variable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_of_three() {
        let schema = SegmentSchema::cardiac();
        let combos = combinations(&schema);
        assert_eq!(combos.len(), 7);
        assert_eq!(combos[0].labels(), vec![1]);
        assert_eq!(combos[6].labels(), vec![1, 2, 3]);
        assert_eq!(combos[2].labels(), vec![1, 2]);
    }

    #[test]
    fn parse_list_and_subsets() {
        let schema = SegmentSchema::cardiac();
        let all = SegmentSelection::parse_list("all", &schema).unwrap();
        assert_eq!(all.subsets(), combinations(&schema));
        let lv = SegmentSelection::parse_list("lv_myocardium, lv_cavity", &schema).unwrap();
        assert_eq!(lv.mask(), 0b011);
        let masks: Vec<u64> = lv.subsets().iter().map(|s| s.mask()).collect();
        assert_eq!(masks, vec![1, 2, 3]);
        let sparse = SegmentSelection::parse_list("lv_cavity,rv_cavity", &schema).unwrap();
        let masks: Vec<u64> = sparse.subsets().iter().map(|s| s.mask()).collect();
        assert_eq!(masks, vec![1, 4, 5]);
        assert!(SegmentSelection::parse_list("", &schema).is_err());
        assert!(SegmentSelection::parse_list("aorta", &schema).is_err());
    }

    #[test]
    fn combinations_small_and_large() {
        let one = SegmentSchema::from_names(&["a"]).unwrap();
        assert_eq!(combinations(&one), vec![SegmentSelection::new(&[1], &one).unwrap()]);
        let four = SegmentSchema::from_names(&["a", "b", "c", "d"]).unwrap();
        assert_eq!(combinations(&four).len(), 15);
    }

    #[test]
    fn combination_counts_distinct() {
        for k in 1..=6 {
            let names: Vec<String> = (0..k).map(|i| format!("s{i}")).collect();
            let schema = SegmentSchema::from_names(&names).unwrap();
            let combos = combinations(&schema);
            assert_eq!(combos.len(), (1 << k) - 1);
            let set: std::collections::HashSet<_> = combos.iter().collect();
            assert_eq!(set.len(), combos.len());
            assert!(combos.windows(2).all(|w| w[0].mask() < w[1].mask()));
        }
    }

    #[test]
    fn schema_rejects_bad_definitions() {
        assert!(SegmentSchema::from_names::<&str>(&[]).is_err());
        assert!(SegmentSchema::from_names(&["a", "a"]).is_err());
        assert!(SegmentSchema::from_names(&["LV"]).is_err());
        assert!(SegmentSchema::from_names(&["lv cavity"]).is_err());
        let gap = vec![
            SegmentDef { label: 1, name: "a".into() },
            SegmentDef { label: 3, name: "b".into() },
        ];
        assert!(SegmentSchema::new(gap).is_err());
    }

    #[test]
    fn schema_serde_validates() {
        let json = r#"[{"label":1,"name":"a"},{"label":2,"name":"a"}]"#;
        assert!(serde_json::from_str::<SegmentSchema>(json).is_err());
        let ok: SegmentSchema = serde_json::from_str(r#"[{"label":1,"name":"a"}]"#).unwrap();
        assert_eq!(ok.name(1), Some("a"));
    }

    #[test]
    fn selection_validation() {
        let schema = SegmentSchema::cardiac();
        assert_eq!(SegmentSelection::new(&[], &schema), Err(ModelError::EmptySelection));
        assert_eq!(SegmentSelection::new(&[4], &schema), Err(ModelError::UnknownLabel(4)));
        let sel = SegmentSelection::from_names(&["rv_cavity", "lv_cavity"], &schema).unwrap();
        assert_eq!(sel.labels(), vec![1, 3]);
        assert_eq!(sel.display_names(&schema), "lv_cavity+rv_cavity");
        assert!(SegmentSelection::from_names(&["aorta"], &schema).is_err());
    }

    #[test]
    fn tie_rule() {
        assert_eq!(label_for(0.5), 0);
        assert_eq!(label_for(0.5000001), 1);
        assert_eq!(label_for(0.0), 0);
        assert_eq!(label_for(1.0), 1);
    }

    #[test]
    fn volume_and_pairing_checks() {
        let d = Dims::new(1, 8, 8).unwrap();
        assert!(Dims::new(0, 8, 8).is_err());
        assert!(Dims::new(1, 7, 8).is_err());
        assert!(Volume::new("a", d, vec![0; 63]).is_err());
        let v = Volume::new("a", d, vec![0; 64]).unwrap();
        let m = SegmentMap::background(Dims::new(1, 8, 9).unwrap());
        assert!(matches!(
            Subject::new(v, m),
            Err(ModelError::DimsMismatch { .. })
        ));
    }

    #[test]
    fn segmap_validation_names_label() {
        let d = Dims::new(1, 8, 8).unwrap();
        let mut labels = vec![0; 64];
        labels[5] = 9;
        labels[6] = 2;
        let m = SegmentMap::new(d, labels).unwrap();
        let err = m.validate(&SegmentSchema::cardiac()).unwrap_err();
        assert_eq!(err, ModelError::UnknownLabel(9));
        assert!(err.to_string().contains("label 9"));
    }

    #[test]
    fn record_checks() {
        assert!(SubjectRecord::new("s", BTreeMap::new(), 1.2).is_err());
        let r = SubjectRecord::new("s", BTreeMap::new(), 0.5).unwrap();
        assert_eq!(r.predicted_label, 0);
        let bad = SubjectRecord {
            predicted_label: 1,
            ..r
        };
        assert!(bad.check().is_err());
    }
}
