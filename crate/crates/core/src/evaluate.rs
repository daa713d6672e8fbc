//! Re-segmentation fidelity: Dice overlap between what a segmenter finds in a
//! recombined image and the segment map the transplant is expected to yield.

use std::collections::HashSet;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{SegmentMap, SegmentSchema, Volume};
use crate::morphmix::RecombinedImage;

/// Dice from set sizes; 1.0 when both sets are empty.
pub fn dice_from_counts(a: usize, b: usize, intersection: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (a + b) as f64
    }
}

/// `2|A ∩ B| / (|A| + |B|)`, 1.0 for two empty sets.
pub fn dice<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    dice_from_counts(a.len(), b.len(), a.intersection(b).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFidelity {
    pub label: u8,
    pub name: String,
    /// Mean per-frame Dice.
    pub dice: f64,
    pub expected_px: usize,
    pub observed_px: usize,
    pub intersection_px: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub labels: Vec<LabelFidelity>,
    pub mean_dice: f64,
}

impl FidelityReport {
    /// Compares `observed` with `expected` for every schema label.
    pub fn compare(expected: &SegmentMap, observed: &SegmentMap, schema: &SegmentSchema) -> Self {
        assert_eq!(expected.dims(), observed.dims(), "segment maps must share dims");
        let frames = expected.dims().frames;
        let labels = schema
            .segments()
            .iter()
            .map(|seg| {
                let mut dice_sum = 0.0;
                let (mut e_total, mut o_total, mut i_total) = (0, 0, 0);
                for f in 0..frames {
                    let (e, o) = (expected.frame(f), observed.frame(f));
                    let (mut ne, mut no, mut ni) = (0, 0, 0);
                    for (&a, &b) in e.iter().zip(o) {
                        let (ia, ib) = (a == seg.label, b == seg.label);
                        ne += usize::from(ia);
                        no += usize::from(ib);
                        ni += usize::from(ia && ib);
                    }
                    dice_sum += dice_from_counts(ne, no, ni);
                    e_total += ne;
                    o_total += no;
                    i_total += ni;
                }
                LabelFidelity {
                    label: seg.label,
                    name: seg.name.clone(),
                    dice: dice_sum / frames as f64,
                    expected_px: e_total,
                    observed_px: o_total,
                    intersection_px: i_total,
                }
            })
            .collect();
        Self::from_labels(labels)
    }

    fn from_labels(labels: Vec<LabelFidelity>) -> Self {
        let mean_dice = if labels.is_empty() {
            1.0
        } else {
            labels.iter().map(|l| l.dice).sum::<f64>() / labels.len() as f64
        };
        Self { labels, mean_dice }
    }

    /// Per-label mean Dice and summed pixel counts over several reports.
    pub fn aggregate(reports: &[FidelityReport]) -> Option<Self> {
        let first = reports.first()?;
        let labels = first
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let rows = reports.iter().map(|r| &r.labels[i]);
                LabelFidelity {
                    label: l.label,
                    name: l.name.clone(),
                    dice: rows.clone().map(|r| r.dice).sum::<f64>() / reports.len() as f64,
                    expected_px: rows.clone().map(|r| r.expected_px).sum(),
                    observed_px: rows.clone().map(|r| r.observed_px).sum(),
                    intersection_px: rows.map(|r| r.intersection_px).sum(),
                }
            })
            .collect();
        Some(Self::from_labels(labels))
    }

    /// CSV with header `label,dice,expected_px,observed_px,intersection_px`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "dice", "expected_px", "observed_px", "intersection_px"])?;
        for l in &self.labels {
            w.write_record([
                l.name.clone(),
                format!("{:.6}", l.dice),
                l.expected_px.to_string(),
                l.observed_px.to_string(),
                l.intersection_px.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `segmenter` on the recombined volume and scores it against the
/// expected segment map.
pub fn evaluate<F>(recombined: &RecombinedImage, schema: &SegmentSchema, segmenter: F) -> FidelityReport
where
    F: Fn(&Volume) -> SegmentMap,
{
    let observed = segmenter(&recombined.volume);
    FidelityReport::compare(&recombined.expected_segmap, &observed, schema)
}

/// `k` distinct indices below `total` drawn with a seeded RNG, ascending.
pub fn sample_indices(total: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, k.min(total)).into_vec();
    idx.sort_unstable();
    idx
}
