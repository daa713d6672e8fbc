//! Segment transplant between two segmented volumes.
//!
//! For every frame, the selected target segments are erased and the
//! corresponding source segments are copied in, translated so that the
//! integer centroids of each segment coincide. Copying walks every 4-connected
//! component of the source segment by flood fill, seeded at the component
//! pixel nearest its centroid, so annular segments whose centroid falls
//! outside the segment are still transferred completely.
//!
//! Erasure fills each target segment with the rounded mean intensity of its
//! 8-connected outer boundary ring in the untouched target frame. All erasures
//! of a frame happen before any copy; copies run in ascending label order and
//! later labels overwrite earlier ones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dims, SegmentMap, SegmentSelection, Subject, Volume};
use crate::raster::{self, Pixel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorphError {
    #[error("frame count mismatch: target has {target_frames}, source has {source_frames}")]
    FrameMismatch {
        target_frames: usize,
        source_frames: usize,
    },
    #[error("dimension mismatch: target {target_dims}, source {source_dims}")]
    DimsMismatch { target_dims: Dims, source_dims: Dims },
    #[error("target and source must differ (both '{0}')")]
    SameSubject(String),
}

/// One transplant request: which source segments go into which target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecombinationSpec {
    pub target: String,
    pub source: String,
    #[serde(with = "selection_mask")]
    pub selection: SegmentSelection,
}

impl RecombinationSpec {
    pub fn new(
        target: impl Into<String>,
        source: impl Into<String>,
        selection: SegmentSelection,
    ) -> Result<Self, MorphError> {
        let (target, source) = (target.into(), source.into());
        if target == source {
            return Err(MorphError::SameSubject(target));
        }
        Ok(Self {
            target,
            source,
            selection,
        })
    }

    /// Identifier used for the recombined volume, e.g. `s01~s07~3`.
    pub fn volume_id(&self) -> String {
        format!("{}~{}~{}", self.target, self.source, self.selection.mask())
    }
}

mod selection_mask {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::model::SegmentSelection;

    pub fn serialize<S: Serializer>(sel: &SegmentSelection, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(sel.mask())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SegmentSelection, D::Error> {
        let mask = u64::deserialize(d)?;
        SegmentSelection::from_raw_mask(mask)
            .ok_or_else(|| serde::de::Error::custom("empty segment selection"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame: usize,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedWrites {
    pub frame: usize,
    pub label: u8,
    pub count: usize,
}

/// Per-label offset applied in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedOffset {
    pub frame: usize,
    pub label: u8,
    pub offset: (i64, i64),
    pub fill_value: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub target: String,
    pub source: String,
    pub selection_mask: u64,
    /// Segments absent from the source frame; nothing was changed for them.
    pub skipped: Vec<FrameLabel>,
    /// Segments absent from the target frame; aligned to the frame center.
    pub empty_target: Vec<FrameLabel>,
    pub dropped: Vec<DroppedWrites>,
    pub offsets: Vec<AppliedOffset>,
}

impl Provenance {
    pub fn dropped_total(&self) -> usize {
        self.dropped.iter().map(|d| d.count).sum()
    }

    pub fn has_skips(&self) -> bool {
        !self.skipped.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecombinedImage {
    pub volume: Volume,
    pub expected_segmap: SegmentMap,
    pub provenance: Provenance,
}

/// Transplants the `selection` segments of `source` into `target`.
pub fn recombine(
    target: &Subject,
    source: &Subject,
    selection: SegmentSelection,
) -> Result<RecombinedImage, MorphError> {
    let (td, sd) = (target.dims(), source.dims());
    if td.frames != sd.frames {
        return Err(MorphError::FrameMismatch {
            target_frames: td.frames,
            source_frames: sd.frames,
        });
    }
    if td != sd {
        return Err(MorphError::DimsMismatch {
            target_dims: td,
            source_dims: sd,
        });
    }
    let mut provenance = Provenance {
        target: target.id().to_string(),
        source: source.id().to_string(),
        selection_mask: selection.mask(),
        ..Default::default()
    };
    let mut pixels = Vec::with_capacity(td.len());
    let mut labels = Vec::with_capacity(td.len());
    for f in 0..td.frames {
        let (p, l) = recombine_frame(
            FrameRef {
                pixels: target.volume().frame(f),
                labels: target.segmap().frame(f),
            },
            FrameRef {
                pixels: source.volume().frame(f),
                labels: source.segmap().frame(f),
            },
            td.height,
            td.width,
            f,
            &selection,
            &mut provenance,
        );
        pixels.extend(p);
        labels.extend(l);
    }
    let id = format!("{}~{}~{}", target.id(), source.id(), selection.mask());
    Ok(RecombinedImage {
        volume: Volume::new(id, td, pixels).expect("dims preserved"),
        expected_segmap: SegmentMap::new(td, labels).expect("dims preserved"),
        provenance,
    })
}

#[derive(Clone, Copy)]
struct FrameRef<'a> {
    pixels: &'a [u8],
    labels: &'a [u8],
}

struct LabelPlan {
    label: u8,
    offset: (i64, i64),
    fill: u8,
    target_pixels: Vec<Pixel>,
    source_mask: Vec<bool>,
}

fn recombine_frame(
    target: FrameRef<'_>,
    source: FrameRef<'_>,
    height: usize,
    width: usize,
    frame: usize,
    selection: &SegmentSelection,
    provenance: &mut Provenance,
) -> (Vec<u8>, Vec<u8>) {
    let mut plans = Vec::new();
    for label in selection.labels() {
        let source_pixels = raster::pixels_with(source.labels, width, label);
        let Some(source_centroid) = raster::centroid(&source_pixels) else {
            provenance.skipped.push(FrameLabel { frame, label });
            continue;
        };
        let target_pixels = raster::pixels_with(target.labels, width, label);
        let anchor = raster::centroid(&target_pixels).unwrap_or_else(|| {
            provenance.empty_target.push(FrameLabel { frame, label });
            ((height / 2) as i64, (width / 2) as i64)
        });
        let offset = (anchor.0 - source_centroid.0, anchor.1 - source_centroid.1);
        let fill = erase_fill_value(target.pixels, &target_pixels, height, width);
        provenance.offsets.push(AppliedOffset {
            frame,
            label,
            offset,
            fill_value: fill,
        });
        plans.push(LabelPlan {
            label,
            offset,
            fill,
            target_pixels,
            source_mask: source.labels.iter().map(|&l| l == label).collect(),
        });
    }

    let mut pixels = target.pixels.to_vec();
    let mut labels = target.labels.to_vec();
    for plan in &plans {
        for &(r, c) in &plan.target_pixels {
            pixels[r * width + c] = plan.fill;
            labels[r * width + c] = 0;
        }
    }
    for plan in &plans {
        let mut dropped = 0;
        for component in raster::components4(&plan.source_mask, height, width) {
            let seed = raster::nearest_to_centroid(&component).expect("nonempty component");
            raster::flood_fill(&plan.source_mask, height, width, seed, |(r, c)| {
                let dr = r as i64 + plan.offset.0;
                let dc = c as i64 + plan.offset.1;
                if (0..height as i64).contains(&dr) && (0..width as i64).contains(&dc) {
                    let i = dr as usize * width + dc as usize;
                    pixels[i] = source.pixels[r * width + c];
                    labels[i] = plan.label;
                } else {
                    dropped += 1;
                }
            });
        }
        if dropped > 0 {
            provenance.dropped.push(DroppedWrites {
                frame,
                label: plan.label,
                count: dropped,
            });
        }
    }
    (pixels, labels)
}

/// Rounded mean of the 8-connected outer ring of `segment`, falling back to
/// the rounded frame mean when the ring is empty.
fn erase_fill_value(frame: &[u8], segment: &[Pixel], height: usize, width: usize) -> u8 {
    if segment.is_empty() {
        return 0;
    }
    let mut mask = vec![false; frame.len()];
    for &(r, c) in segment {
        mask[r * width + c] = true;
    }
    let ring = raster::outer_ring8(&mask, height, width);
    let (sum, n) = if ring.is_empty() {
        (frame.iter().map(|&v| v as u64).sum::<u64>(), frame.len() as u64)
    } else {
        (
            ring.iter().map(|&(r, c)| frame[r * width + c] as u64).sum(),
            ring.len() as u64,
        )
    };
    ((sum as f64 / n as f64).round() as u64).min(255) as u8
}
