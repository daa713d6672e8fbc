//! Counterfactual explanations for segmented grayscale image classifiers.
//!
//! Selected morphological segments of a target image are replaced with the
//! corresponding segments of source images whose prediction differs. The
//! recombined images are re-classified; a recombination whose label differs
//! from the target's is a counterfactual. Summaries count counterfactuals per
//! segment combination.

pub mod artifact;
pub mod cohort;
pub mod engine;
pub mod evaluate;
pub mod gateway;
pub mod io;
pub mod model;
pub mod morphmix;
pub mod raster;
pub mod render;
pub mod synth;

pub use model::{
    combinations, label_for, DemographicValue, Dims, ModelError, SegmentDef, SegmentMap,
    SegmentSchema, SegmentSelection, Subject, SubjectRecord, Volume,
};
pub use morphmix::{recombine, MorphError, RecombinationSpec, RecombinedImage};
