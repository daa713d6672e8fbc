//! Measures the synthetic generator and classifier constants on fixed seeds.
//!
//! `cargo run -p cfx-core --example calibrate`

use cfx_core::engine::{self, RunOptions, RunRequest, SubjectStore};
use cfx_core::evaluate::FidelityReport;
use cfx_core::gateway::Gateway;
use cfx_core::synth::{self, SyntheticConfig};
use cfx_core::{combinations, recombine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let ds = synth::generate(&SyntheticConfig::new(100, 1)).unwrap();
    let positives = ds.truths.iter().filter(|t| t.true_label == 1).count();
    let agree = ds
        .records
        .iter()
        .zip(&ds.truths)
        .filter(|(r, t)| r.predicted_label == t.true_label)
        .count();
    println!("n=100 seed=1: prevalence {:.2}, classifier agreement {:.2}", positives as f64 / 100.0, agree as f64 / 100.0);

    let mut min_dice = [1.0f64; 3];
    for s in &ds.subjects {
        let m = synth::synthetic_segmenter(s.volume(), &ds.constants.bands);
        let r = FidelityReport::compare(s.segmap(), &m, &ds.schema);
        for (i, l) in r.labels.iter().enumerate() {
            min_dice[i] = min_dice[i].min(l.dice);
        }
    }
    println!("segmenter on originals, min Dice per label: {min_dice:?}");

    let combos = combinations(&ds.schema);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut reports = Vec::new();
    let mut worst = 1.0f64;
    for _ in 0..50 {
        let t = rng.random_range(0..100);
        let mut s = rng.random_range(0..100);
        while s == t {
            s = rng.random_range(0..100);
        }
        let sel = combos[rng.random_range(0..combos.len())];
        let out = recombine(&ds.subjects[t], &ds.subjects[s], sel).unwrap();
        let rep = cfx_core::evaluate::evaluate(&out, &ds.schema, |v| synth::synthetic_segmenter(v, &ds.constants.bands));
        worst = worst.min(rep.mean_dice);
        reports.push(rep);
    }
    let agg = FidelityReport::aggregate(&reports).unwrap();
    for l in &agg.labels {
        println!("recombined: {} mean Dice {:.4}", l.name, l.dice);
    }
    println!("recombined: worst single mean Dice {worst:.4}");

    let cohort = synth::generate(&SyntheticConfig::new(120, 7)).unwrap();
    let pick = |label: u8| -> Vec<String> {
        cohort.records.iter().filter(|r| r.predicted_label == label).take(40).map(|r| r.id.clone()).collect()
    };
    let (pos, neg) = (pick(1), pick(0));
    println!("known-positive cohort n=120 seed=7: {} positives, {} negatives", pos.len(), neg.len());
    let lv = cfx_core::SegmentSelection::new(&[synth::LV_CAVITY, synth::LV_MYOCARDIUM], &cohort.schema).unwrap();
    let gateway = Gateway::synthetic(cohort.constants.clone());
    let started = std::time::Instant::now();
    for (t, s) in [(&pos, &neg), (&neg, &pos)] {
        let request = RunRequest { targets: t.clone(), sources: s.clone(), selections: vec![lv] };
        let run = engine::run(&cohort, &gateway, &request, &RunOptions::default()).unwrap();
        let rows = engine::summarize(&run);
        println!(
            "lv swap into label {} targets: {} flips of {} ({} skipped), rate {}",
            cohort.record(&t[0]).unwrap().predicted_label,
            rows[0].counterfactuals,
            rows[0].counterfactuals + rows[0].unchanged,
            rows[0].skipped,
            rows[0].proportion_text()
        );
    }
    println!("known-positive runs took {:.1?}", started.elapsed());

    let flat = synth::generate(&SyntheticConfig::new(40, 5).noiseless()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut exact, mut worst) = (0, [1.0f64; 3]);
    for _ in 0..50 {
        let t = rng.random_range(0..40);
        let s = (t + rng.random_range(1..40)) % 40;
        let sel = combos[rng.random_range(0..combos.len())];
        let out = recombine(&flat.subjects[t], &flat.subjects[s], sel).unwrap();
        let rep = cfx_core::evaluate::evaluate(&out, &flat.schema, |v| synth::synthetic_segmenter(v, &flat.constants.bands));
        exact += usize::from(rep.labels.iter().all(|l| l.dice == 1.0));
        for (w, l) in worst.iter_mut().zip(&rep.labels) {
            *w = w.min(l.dice);
        }
    }
    println!("noiseless random pairs: exact Dice 1.0 in {exact}/50, worst per label {worst:?}");
}
