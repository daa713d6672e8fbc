//! In-browser demo over a small synthetic cohort.
//!
//! [`Demo`] is plain Rust so it can be tested natively; the `wasm` module
//! wraps it with `wasm-bindgen` for the page in `www/`.

use cfx_core::evaluate::{evaluate, FidelityReport};
use cfx_core::render::frame_rgba;
use cfx_core::synth::{self, synthetic_classifier, synthetic_segmenter, SyntheticConfig, SyntheticDataset};
use cfx_core::{recombine, RecombinedImage, SegmentSelection};
use serde::Serialize;

pub const MAX_SUBJECTS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectInfo {
    pub id: String,
    pub label: u8,
    pub probability: f64,
    pub thickness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransplantInfo {
    pub target: String,
    pub source: String,
    pub segments: String,
    pub target_label: u8,
    pub label: Option<u8>,
    pub probability: Option<f64>,
    pub counterfactual: bool,
    pub skipped: bool,
    pub dropped_px: usize,
}

pub struct Demo {
    data: SyntheticDataset,
    last: Option<(TransplantInfo, RecombinedImage)>,
}

impl Demo {
    pub fn new(subjects: usize, seed: u64, noiseless: bool) -> Result<Self, String> {
        if !(2..=MAX_SUBJECTS).contains(&subjects) {
            return Err(format!("subjects must be in 2..={MAX_SUBJECTS}"));
        }
        let mut config = SyntheticConfig::new(subjects, seed);
        if noiseless {
            config = config.noiseless();
        }
        let data = synth::generate(&config).map_err(|e| e.to_string())?;
        Ok(Self { data, last: None })
    }

    pub fn size(&self) -> usize {
        self.data.subjects[0].dims().width
    }

    pub fn subjects(&self) -> Vec<SubjectInfo> {
        self.data
            .records
            .iter()
            .zip(&self.data.params)
            .map(|(r, p)| SubjectInfo {
                id: r.id.clone(),
                label: r.predicted_label,
                probability: r.probability,
                thickness: p.myocardium_thickness,
            })
            .collect()
    }

    pub fn segment_names(&self) -> Vec<String> {
        self.data.schema.segments().iter().map(|s| s.name.clone()).collect()
    }

    fn check(&self, index: usize) -> Result<(), String> {
        if index < self.data.subjects.len() {
            Ok(())
        } else {
            Err(format!("no subject {index}"))
        }
    }

    /// RGBA pixels of frame 0, optionally with the segment overlay.
    pub fn subject_rgba(&self, index: usize, overlay: bool) -> Result<Vec<u8>, String> {
        self.check(index)?;
        let s = &self.data.subjects[index];
        Ok(frame_rgba(s.volume(), overlay.then(|| s.segmap()), 0).expect("frame 0 exists"))
    }

    /// Transplants the `mask` segments of `source` into `target` and
    /// classifies the result.
    pub fn transplant(&mut self, target: usize, source: usize, mask: u64) -> Result<TransplantInfo, String> {
        self.check(target)?;
        self.check(source)?;
        if target == source {
            return Err("target and source must differ".into());
        }
        if mask == 0 {
            return Err("select at least one segment".into());
        }
        let selection = SegmentSelection::from_mask(mask, &self.data.schema).map_err(|e| e.to_string())?;
        let (t, s) = (&self.data.subjects[target], &self.data.subjects[source]);
        let image = recombine(t, s, selection.clone()).map_err(|e| e.to_string())?;
        let target_label = self.data.records[target].predicted_label;
        let skipped = image.provenance.has_skips();
        let prediction = if skipped {
            None
        } else {
            Some(
                synthetic_classifier(&image.volume, &image.expected_segmap, &self.data.constants)
                    .map_err(|e| e.to_string())?,
            )
        };
        let info = TransplantInfo {
            target: self.data.records[target].id.clone(),
            source: self.data.records[source].id.clone(),
            segments: selection.display_names(&self.data.schema),
            target_label,
            label: prediction.map(|p| p.0),
            probability: prediction.map(|p| p.1),
            counterfactual: prediction.is_some_and(|p| p.0 != target_label),
            skipped,
            dropped_px: image.provenance.dropped_total(),
        };
        self.last = Some((info.clone(), image));
        Ok(info)
    }

    fn last_image(&self) -> Result<&RecombinedImage, String> {
        self.last.as_ref().map(|l| &l.1).ok_or_else(|| "no transplant yet".to_string())
    }

    pub fn transplant_rgba(&self, overlay: bool) -> Result<Vec<u8>, String> {
        let image = self.last_image()?;
        Ok(frame_rgba(&image.volume, overlay.then_some(&image.expected_segmap), 0).expect("frame 0 exists"))
    }

    /// Re-segments the last transplant and scores it against the expected map.
    pub fn resegment(&self) -> Result<FidelityReport, String> {
        let image = self.last_image()?;
        let bands = self.data.constants.bands;
        Ok(evaluate(image, &self.data.schema, |v| synthetic_segmenter(v, &bands)))
    }

    /// RGBA of what the segmenter finds in the last transplant.
    pub fn resegment_rgba(&self) -> Result<Vec<u8>, String> {
        let image = self.last_image()?;
        let observed = synthetic_segmenter(&image.volume, &self.data.constants.bands);
        Ok(frame_rgba(&image.volume, Some(&observed), 0).expect("frame 0 exists"))
    }
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn js<T: serde::Serialize>(value: &T) -> String {
        serde_json::to_string(value).expect("serializable")
    }

    #[wasm_bindgen]
    pub struct DemoHandle(super::Demo);

    #[wasm_bindgen]
    impl DemoHandle {
        #[wasm_bindgen(constructor)]
        pub fn new(subjects: usize, seed: u32, noiseless: bool) -> Result<DemoHandle, JsError> {
            super::Demo::new(subjects, seed as u64, noiseless)
                .map(DemoHandle)
                .map_err(|e| JsError::new(&e))
        }

        pub fn size(&self) -> usize {
            self.0.size()
        }

        /// JSON list of subjects.
        pub fn subjects(&self) -> String {
            js(&self.0.subjects())
        }

        /// JSON list of segment names in label order.
        pub fn segments(&self) -> String {
            js(&self.0.segment_names())
        }

        pub fn subject_rgba(&self, index: usize, overlay: bool) -> Result<Vec<u8>, JsError> {
            self.0.subject_rgba(index, overlay).map_err(|e| JsError::new(&e))
        }

        pub fn transplant(&mut self, target: usize, source: usize, mask: u32) -> Result<String, JsError> {
            self.0
                .transplant(target, source, mask as u64)
                .map(|i| js(&i))
                .map_err(|e| JsError::new(&e))
        }

        pub fn transplant_rgba(&self, overlay: bool) -> Result<Vec<u8>, JsError> {
            self.0.transplant_rgba(overlay).map_err(|e| JsError::new(&e))
        }

        pub fn resegment(&self) -> Result<String, JsError> {
            self.0.resegment().map(|r| js(&r)).map_err(|e| JsError::new(&e))
        }

        pub fn resegment_rgba(&self) -> Result<Vec<u8>, JsError> {
            self.0.resegment_rgba().map_err(|e| JsError::new(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sizes_and_indices() {
        assert!(Demo::new(1, 0, false).is_err());
        assert!(Demo::new(MAX_SUBJECTS + 1, 0, false).is_err());
        let mut d = Demo::new(4, 3, true).unwrap();
        assert!(d.subject_rgba(4, false).is_err());
        assert!(d.transplant(0, 0, 1).is_err());
        assert!(d.transplant(0, 1, 0).is_err());
        assert!(d.resegment().is_err());
    }

    #[test]
    fn rgba_buffers_match_frame() {
        let d = Demo::new(3, 1, false).unwrap();
        let n = d.size() * d.size() * 4;
        assert_eq!(d.subject_rgba(0, false).unwrap().len(), n);
        assert_ne!(d.subject_rgba(0, false).unwrap(), d.subject_rgba(0, true).unwrap());
    }
}
